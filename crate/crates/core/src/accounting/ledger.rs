use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::gaussian_track_epsilon;
use super::rdp::{amplify_approx_rdp, default_orders, em_rdp_curve, ptr_rdp, rdp_to_dp, RdpCurve};
use super::{check_delta, AccountingError};

/// A noisy release recorded in the ledger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    /// Gaussian noise with multiplier `sigma` (noise std / L2 sensitivity).
    Gaussian { sigma: f64 },
    /// Exponential mechanism satisfying `epsilon`-DP.
    Exponential { epsilon: f64 },
    /// Propose-test-release with gap noise multiplier `sigma`.
    Ptr { sigma: f64, delta_fail: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub mechanism: Mechanism,
    /// Poisson sampling rate of the records the mechanism saw.
    pub q: f64,
    pub count: u64,
}

impl LedgerEntry {
    pub fn new(mechanism: Mechanism, q: f64, count: u64) -> Self {
        Self { mechanism, q, count }
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        let bad = |m: String| Err(AccountingError::InvalidParameter(m));
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad(format!("q = {} must lie in (0, 1]", self.q));
        }
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        match self.mechanism {
            Mechanism::Gaussian { sigma } | Mechanism::Ptr { sigma, .. } if !(sigma > 0.0 && sigma.is_finite()) => {
                bad(format!("sigma = {sigma} has unbounded privacy cost"))
            }
            Mechanism::Exponential { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                bad(format!("epsilon = {epsilon} must be finite and > 0"))
            }
            Mechanism::Ptr { delta_fail, .. } if !(delta_fail > 0.0 && delta_fail < 1.0) => {
                bad(format!("delta_fail = {delta_fail} must lie in (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// One ledger line. Field order on the wire: kind, sigma | epsilon, q, delta_fail, count.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_fail: Option<f64>,
    count: u64,
}

impl From<&LedgerEntry> for WireEntry {
    fn from(e: &LedgerEntry) -> Self {
        let (kind, sigma, epsilon, delta_fail) = match e.mechanism {
            Mechanism::Gaussian { sigma } => ("gaussian", Some(sigma), None, None),
            Mechanism::Exponential { epsilon } => ("exponential", None, Some(epsilon), None),
            Mechanism::Ptr { sigma, delta_fail } => ("ptr", Some(sigma), None, Some(delta_fail)),
        };
        WireEntry { kind: kind.into(), sigma, epsilon, q: e.q, delta_fail, count: e.count }
    }
}

impl TryFrom<WireEntry> for LedgerEntry {
    type Error = String;

    fn try_from(w: WireEntry) -> Result<Self, String> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("{} entry needs {name}", w.kind));
        let mechanism = match w.kind.as_str() {
            "gaussian" => Mechanism::Gaussian { sigma: need(w.sigma, "sigma")? },
            "exponential" => Mechanism::Exponential { epsilon: need(w.epsilon, "epsilon")? },
            "ptr" => Mechanism::Ptr { sigma: need(w.sigma, "sigma")?, delta_fail: need(w.delta_fail, "delta_fail")? },
            other => return Err(format!("unknown mechanism kind {other:?}")),
        };
        Ok(LedgerEntry { mechanism, q: w.q, count: w.count })
    }
}

/// Append-only record of mechanism invocations.
///
/// Appends are not synchronized; a session has a single writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<(), AccountingError> {
        entry.validate()?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The ledger as it would be after appending `entries`.
    pub fn projected(&self, entries: &[LedgerEntry]) -> Result<Self, AccountingError> {
        let mut next = self.clone();
        for e in entries {
            next.append(*e)?;
        }
        Ok(next)
    }

    pub fn total(&self, delta: f64) -> Result<(f64, f64), AccountingError> {
        ledger_total(self, delta)
    }

    pub fn entry_line(entry: &LedgerEntry) -> String {
        serde_json::to_string(&WireEntry::from(entry)).expect("ledger entries serialize")
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| Self::entry_line(e) + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, AccountingError> {
        let mut ledger = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| AccountingError::Parse { line: i + 1, message };
            let wire: WireEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let entry = LedgerEntry::try_from(wire).map_err(parse_err)?;
            ledger.append(entry).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(ledger)
    }

    /// Reads a ledger file; a missing file is an empty ledger.
    pub fn load(path: &Path) -> Result<Self, AccountingError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_jsonl(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Appends to the in-memory ledger and to the file at `path`.
    pub fn append_to_file(&mut self, path: &Path, entry: LedgerEntry) -> Result<(), AccountingError> {
        entry.validate()?;
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(file, "{}", Self::entry_line(&entry))?;
        self.entries.push(entry);
        Ok(())
    }
}

/// Total `(eps, delta)` spent by a ledger.
///
/// Gaussian entries are composed exactly through their privacy-loss
/// distributions. Exponential-mechanism and PTR entries are composed as RDP
/// curves; PTR curves are amplified by their sampling rate, exponential
/// mechanism entries are not. When both tracks are present each gets half of
/// `delta` and their epsilons add.
pub fn ledger_total(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, f64), AccountingError> {
    check_delta(delta)?;
    let mut groups: Vec<((f64, f64), u64)> = Vec::new();
    let mut curve: Option<RdpCurve> = None;
    let orders = default_orders();
    for e in &ledger.entries {
        e.validate()?;
        let next = match e.mechanism {
            Mechanism::Gaussian { sigma } => {
                match groups.iter_mut().find(|(k, _)| *k == (sigma, e.q)) {
                    Some((_, c)) => *c += e.count,
                    None => groups.push(((sigma, e.q), e.count)),
                }
                continue;
            }
            Mechanism::Exponential { epsilon } => em_rdp_curve(epsilon, &orders)?.repeat(e.count),
            Mechanism::Ptr { sigma, delta_fail } => {
                amplify_approx_rdp(&ptr_rdp(sigma, delta_fail, &orders)?, e.q)?.repeat(e.count)
            }
        };
        curve = Some(match curve {
            Some(c) => c.compose(&next)?,
            None => next,
        });
    }

    let share = if !groups.is_empty() && curve.is_some() { delta / 2.0 } else { delta };
    let mut eps = 0.0;
    if !groups.is_empty() {
        eps += gaussian_track_epsilon(&groups, share)?;
    }
    if let Some(c) = curve {
        eps += rdp_to_dp(&c, share)?.0;
    }
    Ok((eps, delta))
}
