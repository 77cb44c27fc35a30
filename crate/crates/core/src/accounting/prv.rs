use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{check_delta, AccountingError};
use crate::normal;

/// Default truncation of the noisy output `o`, in standard deviations of the noise.
pub const DEFAULT_TRUNCATION: f64 = 8.0;

const MAX_GRID: usize = 1 << 22;
const MAX_FFT: usize = 1 << 23;
const TAIL_TRIM: f64 = 1e-15;
const EDGE_TOL: f64 = 1e-13;
/// Share of the delta budget spent on the rounding tail bound.
const MARGIN_SHARE: f64 = 1e-3;

// 5-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 5] =
    [-0.906_179_845_938_664, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Bound on the displacement introduced by moving privacy-loss mass onto the grid.
///
/// Mass is split between the two neighbouring grid points so that the
/// conditional mean inside every cell is preserved. The discretized loss is
/// then the true loss plus independent zero-mean displacements, one per
/// composed mechanism, each bounded by `step`. Their summed variance and
/// summed bound feed a Bernstein tail bound in [`prv_to_epsilon`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundingBound {
    pub variance: f64,
    pub step: f64,
    pub total: f64,
}

impl RoundingBound {
    pub fn is_exact(&self) -> bool {
        self.total == 0.0
    }

    fn repeated(self, count: u64) -> Self {
        let c = count as f64;
        Self { variance: self.variance * c, step: self.step, total: self.total * c }
    }

    fn plus(self, other: Self) -> Self {
        Self {
            variance: self.variance + other.variance,
            step: self.step.max(other.step),
            total: self.total + other.total,
        }
    }

    /// `(t, delta_err)` such that the displacement sum falls below `-t` with
    /// probability at most `delta_err`. `budget` is the delta available.
    pub fn margin(&self, budget: f64) -> (f64, f64) {
        if self.is_exact() {
            return (0.0, 0.0);
        }
        let delta_err = budget * MARGIN_SHARE;
        let l = (1.0 / delta_err).ln();
        let a = self.step * l / 3.0;
        let t = a + (a * a + 2.0 * self.variance * l).sqrt();
        if t >= self.total {
            (self.total, 0.0)
        } else {
            (t, delta_err)
        }
    }
}

/// Discretized privacy-loss distribution on the grid `{(origin_index + i) * mesh}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrvDistribution {
    origin_index: i64,
    mesh: f64,
    masses: Vec<f64>,
    inf_mass: f64,
    rounding: RoundingBound,
}

impl PrvDistribution {
    /// An exact distribution. `grid_origin` must be a multiple of `mesh`.
    pub fn new(grid_origin: f64, mesh: f64, masses: Vec<f64>, inf_mass: f64) -> Result<Self, AccountingError> {
        check_mesh(mesh)?;
        let ratio = grid_origin / mesh;
        if !ratio.is_finite() || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(AccountingError::InvalidParameter(format!(
                "grid origin {grid_origin} is not a multiple of mesh {mesh}"
            )));
        }
        if masses.is_empty() || masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(AccountingError::InvalidParameter("masses must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&inf_mass) {
            return Err(AccountingError::InvalidParameter(format!("mass at infinity {inf_mass} outside [0, 1]")));
        }
        let total = masses.iter().sum::<f64>() + inf_mass;
        if (total - 1.0).abs() > 1e-9 {
            return Err(AccountingError::InvalidParameter(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { origin_index: ratio.round() as i64, mesh, masses, inf_mass, rounding: RoundingBound::default() })
    }

    /// The loss of a mechanism that reveals nothing.
    pub fn point_mass_zero(mesh: f64) -> Self {
        Self { origin_index: 0, mesh, masses: vec![1.0], inf_mass: 0.0, rounding: RoundingBound::default() }
    }

    pub fn grid_origin(&self) -> f64 {
        self.origin_index as f64 * self.mesh
    }

    pub fn origin_index(&self) -> i64 {
        self.origin_index
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass_at_infinity(&self) -> f64 {
        self.inf_mass
    }

    pub fn rounding(&self) -> RoundingBound {
        self.rounding
    }

    /// Privacy-loss value of grid point `i`.
    pub fn value(&self, i: usize) -> f64 {
        (self.origin_index + i as i64) as f64 * self.mesh
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.inf_mass
    }

    /// Mean and variance of the finite part, renormalized to total mass one.
    pub fn finite_moments(&self) -> (f64, f64) {
        let w: f64 = self.masses.iter().sum();
        if w <= 0.0 {
            return (0.0, 0.0);
        }
        let rel_mean = self.masses.iter().enumerate().map(|(i, m)| m * i as f64).sum::<f64>() / w;
        let var = self.masses.iter().enumerate().map(|(i, m)| m * (i as f64 - rel_mean).powi(2)).sum::<f64>() / w;
        ((self.origin_index as f64 + rel_mean) * self.mesh, var * self.mesh * self.mesh)
    }

    /// `E[(1 - e^(eps - Y))_+] + P(Y = inf)` for this discrete distribution,
    /// without the rounding margin.
    pub fn delta_for_epsilon(&self, eps: f64) -> f64 {
        let finite: f64 = self
            .masses
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let y = self.value(i);
                if y > eps {
                    -m * (eps - y).exp_m1()
                } else {
                    0.0
                }
            })
            .sum();
        self.inf_mass + finite
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64, AccountingError> {
        prv_to_epsilon(self, delta)
    }

    /// Moves every mass onto a grid with a different mesh, splitting each
    /// off-grid mass between its two neighbours so its mean is preserved.
    pub fn regrid(&self, mesh: f64) -> Result<Self, AccountingError> {
        check_mesh(mesh)?;
        if (mesh / self.mesh - 1.0).abs() < 1e-12 {
            return Ok(self.clone());
        }
        let lo = (self.value(0) / mesh).floor() as i64;
        let hi = (self.value(self.masses.len() - 1) / mesh).ceil() as i64;
        let len = (hi - lo + 1) as usize;
        if len > MAX_GRID {
            return Err(AccountingError::GridTooLarge(len));
        }
        let mut out = vec![0.0; len];
        let mut variance = 0.0;
        let mut moved = false;
        for (i, &m) in self.masses.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let pos = self.value(i) / mesh - lo as f64;
            let base = pos.floor();
            let frac = pos - base;
            let b = base as usize;
            if frac < 1e-9 || b + 1 >= len {
                out[b.min(len - 1)] += m;
            } else if frac > 1.0 - 1e-9 {
                out[b + 1] += m;
            } else {
                out[b] += m * (1.0 - frac);
                out[b + 1] += m * frac;
                variance += m * frac * (1.0 - frac) * mesh * mesh;
                moved = true;
            }
        }
        let added = if moved { RoundingBound { variance, step: mesh, total: mesh } } else { RoundingBound::default() };
        Ok(Self { origin_index: lo, mesh, masses: out, inf_mass: self.inf_mass, rounding: self.rounding.plus(added) })
    }

    fn is_null(&self) -> bool {
        self.origin_index == 0 && self.masses.len() == 1 && self.inf_mass == 0.0 && self.rounding.is_exact()
    }
}

fn check_mesh(mesh: f64) -> Result<(), AccountingError> {
    if mesh > 0.0 && mesh.is_finite() {
        Ok(())
    } else {
        Err(AccountingError::InvalidParameter(format!("mesh = {mesh} must be finite and > 0")))
    }
}

/// Privacy loss `Y = ln(1 - q + q exp((2o - 1) / (2 sigma^2)))` of the
/// subsampled Gaussian mechanism with unit sensitivity, as a function of the
/// output `o ~ (1 - q) N(0, sigma^2) + q N(1, sigma^2)`.
struct LossModel {
    sigma: f64,
    q: f64,
    ln_q: f64,
    ln_1mq: f64,
}

impl LossModel {
    fn new(sigma: f64, q: f64) -> Self {
        Self { sigma, q, ln_q: q.ln(), ln_1mq: (-q).ln_1p() }
    }

    fn loss(&self, o: f64) -> f64 {
        let x = (2.0 * o - 1.0) / (2.0 * self.sigma * self.sigma);
        if self.q == 1.0 {
            x
        } else if x > 0.0 {
            self.ln_q + x + ((1.0 - self.q) / self.q * (-x).exp()).ln_1p()
        } else {
            (self.q * x.exp_m1()).ln_1p()
        }
    }

    /// Inverse of [`loss`](Self::loss); `-inf` at or below the loss floor `ln(1 - q)`.
    fn output_at(&self, y: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        if self.q == 1.0 {
            return s2 * y + 0.5;
        }
        let d = y - self.ln_1mq;
        if d <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let ln_expm1 = if d > 1.0 { d + (-(-d).exp_m1()).ln() } else { d.exp_m1().ln() };
        s2 * (self.ln_1mq + ln_expm1 - self.ln_q) + 0.5
    }

    fn cdf(&self, o: f64) -> f64 {
        (1.0 - self.q) * normal::cdf(o / self.sigma) + self.q * normal::cdf((o - 1.0) / self.sigma)
    }

    fn sf(&self, o: f64) -> f64 {
        (1.0 - self.q) * normal::sf(o / self.sigma) + self.q * normal::sf((o - 1.0) / self.sigma)
    }

    /// `P(o1 < o <= o2)`, using upper tails when both ends are right of centre.
    fn mass(&self, o1: f64, o2: f64) -> f64 {
        let m = if o1 >= 0.5 { self.sf(o1) - self.sf(o2) } else { self.cdf(o2) - self.cdf(o1) };
        m.max(0.0)
    }

    /// Rough spread of `Y` used to choose a mesh.
    fn scale(&self) -> f64 {
        let tail = self.q * (1.0 / (self.sigma * self.sigma)).exp_m1().sqrt();
        tail.min(1.0 / self.sigma)
    }

    fn span(&self, truncation: f64) -> (f64, f64) {
        (self.loss(-truncation * self.sigma), self.loss(1.0 + truncation * self.sigma))
    }
}

fn check_sigma_q(sigma: f64, q: f64) -> Result<(), AccountingError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AccountingError::InvalidParameter(format!("sigma = {sigma} must be finite and > 0")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountingError::InvalidParameter(format!("q = {q} must lie in (0, 1]")));
    }
    Ok(())
}

/// Mesh suited to composing subsampled Gaussian PRVs with the given
/// `(sigma, q)` pairs: about 200 grid points per unit of the narrowest
/// spread, coarsened if any single distribution would need too many points.
pub fn auto_mesh(params: &[(f64, f64)]) -> f64 {
    let mut mesh = f64::INFINITY;
    let mut widest: f64 = 0.0;
    for &(sigma, q) in params {
        let model = LossModel::new(sigma, q);
        mesh = mesh.min((model.scale() / 200.0).clamp(1e-7, 1e-2));
        let (lo, hi) = model.span(DEFAULT_TRUNCATION);
        widest = widest.max(hi - lo);
    }
    if !mesh.is_finite() {
        return 1e-4;
    }
    mesh.max(widest / (MAX_GRID / 2) as f64)
}

/// Discretized privacy-loss distribution of the Poisson-subsampled Gaussian
/// mechanism with noise multiplier `sigma` and sampling rate `q`.
///
/// The output `o` is truncated to `[-z sigma, 1 + z sigma]` with
/// `z = truncation_bound`. Mass above the window is assigned to `+inf`, and
/// mass below is moved up to the loss at the lower end, both of which can
/// only overstate the loss. Grid cell masses are exact normal CDF
/// differences; each cell's conditional mean comes from 5-point
/// Gauss-Legendre quadrature.
pub fn subsampled_gaussian_prv(
    sigma: f64,
    q: f64,
    mesh: f64,
    truncation_bound: f64,
) -> Result<PrvDistribution, AccountingError> {
    check_sigma_q(sigma, q)?;
    check_mesh(mesh)?;
    if !(truncation_bound > 0.0 && truncation_bound.is_finite()) {
        return Err(AccountingError::InvalidParameter(format!(
            "truncation bound {truncation_bound} must be finite and > 0"
        )));
    }
    let model = LossModel::new(sigma, q);
    if mesh > model.scale() / 20.0 {
        log::warn!("mesh {mesh} is coarse for sigma = {sigma}, q = {q}; epsilon will be loose");
    }
    let o_hi = 1.0 + truncation_bound * sigma;
    let (y_lo, y_hi) = model.span(truncation_bound);
    let i_lo = (y_lo / mesh).floor() as i64;
    let i_hi = ((y_hi / mesh).ceil() as i64).max(i_lo);
    let len = (i_hi - i_lo + 1) as usize;
    if len > MAX_GRID {
        return Err(AccountingError::GridTooLarge(len));
    }

    let inf_mass = model.sf(o_hi);
    let mut masses = vec![0.0; len];
    let mut variance = 0.0;
    if len == 1 {
        masses[0] = 1.0 - inf_mass;
    }
    for b in 0..len.saturating_sub(1) {
        let a = (i_lo + b as i64) as f64 * mesh;
        let next = a + mesh;
        let first = b == 0;
        let lo = a.max(y_lo);
        let hi = next.min(y_hi);
        if hi < lo || (hi == lo && !first) {
            continue;
        }
        let o_top = if hi >= y_hi { o_hi } else { model.output_at(hi) };
        // The first cell also holds everything below the window, as an atom at y_lo.
        let o_bottom = if first { f64::NEG_INFINITY } else { model.output_at(lo) };
        let m = model.mass(o_bottom, o_top);
        if m <= 0.0 {
            continue;
        }
        let half = (hi - lo) / 2.0;
        let integral: f64 = GL_NODES
            .iter()
            .zip(GL_WEIGHTS)
            .map(|(x, w)| w * model.mass(model.output_at(lo + half * (1.0 + x)), o_top))
            .sum::<f64>()
            * half;
        let mu = (lo + integral / m).clamp(a, next);
        let frac = ((mu - a) / mesh).clamp(0.0, 1.0);
        masses[b] += m * (1.0 - frac);
        masses[b + 1] += m * frac;
        variance += m * (mu - a) * (next - mu);
    }

    Ok(PrvDistribution {
        origin_index: i_lo,
        mesh,
        masses,
        inf_mass,
        rounding: RoundingBound { variance, step: mesh, total: mesh },
    })
}

/// Distribution of the sum of independent privacy losses, `prvs[i]` repeated
/// `counts[i]` times.
///
/// All distributions share one FFT buffer. When the exact support of the sum
/// is too long, each distribution is shifted by its rounded mean and the sum
/// is evaluated on a circular window around the residual mean, doubling the
/// window while its edges carry non-negligible mass. Tails below `1e-15`
/// are trimmed: the lower tail moves up to the first kept point, the upper
/// tail to `+inf`.
pub fn compose_prvs(prvs: &[PrvDistribution], counts: &[u64]) -> Result<PrvDistribution, AccountingError> {
    if prvs.is_empty() || prvs.len() != counts.len() {
        return Err(AccountingError::InvalidParameter("need one count per distribution".into()));
    }
    let mesh = prvs[0].mesh;
    for p in prvs {
        if (p.mesh / mesh - 1.0).abs() > 1e-9 {
            return Err(AccountingError::MeshMismatch(mesh, p.mesh));
        }
    }

    let mut log_keep = 0.0;
    let mut rounding = RoundingBound::default();
    let mut active: Vec<(&PrvDistribution, u64)> = Vec::new();
    for (p, &c) in prvs.iter().zip(counts) {
        if c == 0 {
            continue;
        }
        log_keep += c as f64 * (-p.inf_mass).ln_1p();
        rounding = rounding.plus(p.rounding.repeated(c));
        if !p.is_null() {
            active.push((p, c));
        }
    }
    let inf_mass = -log_keep.exp_m1();
    match active.as_slice() {
        [] => {
            let mut out = PrvDistribution::point_mass_zero(mesh);
            out.masses[0] = 1.0 - inf_mass;
            out.inf_mass = inf_mass;
            out.rounding = rounding;
            return Ok(out);
        }
        [(p, 1)] => return Ok((*p).clone()),
        _ => {}
    }

    let exact_len: usize = 1 + active.iter().map(|(p, c)| (p.masses.len() - 1) * *c as usize).sum::<usize>();
    let spread = active.iter().map(|(p, c)| *c as f64 * p.finite_moments().1).sum::<f64>().sqrt() / mesh;
    let widest = active.iter().map(|(p, _)| p.masses.len()).max().unwrap_or(1);
    let window = (40.0 * spread).ceil() as usize + 2 * widest;

    let (shifts, base_offset, mut n, exact) = if exact_len <= window {
        let shifts: Vec<i64> = active.iter().map(|(p, _)| p.origin_index).collect();
        (shifts, 0i64, exact_len.next_power_of_two(), true)
    } else {
        let mut residual = 0.0;
        let shifts: Vec<i64> = active
            .iter()
            .map(|(p, c)| {
                let mean_idx = p.finite_moments().0 / mesh;
                let s = mean_idx.round();
                residual += *c as f64 * (mean_idx - s);
                s as i64
            })
            .collect();
        (shifts, residual.round() as i64, window.next_power_of_two(), false)
    };

    let mut planner = FftPlanner::<f64>::new();
    let (values, start) = loop {
        if n > MAX_FFT {
            return Err(AccountingError::GridTooLarge(n));
        }
        let start = if exact { 0 } else { base_offset - (n / 2) as i64 };
        let fft = planner.plan_fft_forward(n);
        let mut acc = vec![Complex64::new(1.0, 0.0); n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for ((p, c), shift) in active.iter().zip(&shifts) {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (i, &m) in p.masses.iter().enumerate() {
                let pos = (p.origin_index + i as i64 - shift).rem_euclid(n as i64) as usize;
                buf[pos].re += m;
            }
            fft.process(&mut buf);
            let c = u32::try_from(*c).map_err(|_| AccountingError::InvalidParameter("count too large".into()))?;
            for (a, z) in acc.iter_mut().zip(&buf) {
                *a *= z.powu(c);
            }
        }
        planner.plan_fft_inverse(n).process(&mut acc);
        let scale = 1.0 / n as f64;
        let len = if exact { exact_len } else { n };
        let raw: Vec<f64> =
            (0..len).map(|j| acc[(start + j as i64).rem_euclid(n as i64) as usize].re * scale).collect();
        // Signed sum, so symmetric round-off noise cancels while real wrapped mass does not.
        let edge = n / 16;
        let edge_mass: f64 = if exact { 0.0 } else { raw[..edge].iter().chain(&raw[n - edge..]).sum() };
        if edge_mass <= EDGE_TOL {
            break (raw.into_iter().map(|v| v.max(0.0)).collect::<Vec<f64>>(), start);
        }
        n *= 2;
    };

    let mut first = 0;
    let mut acc = 0.0;
    while first + 1 < values.len() && acc + values[first] < TAIL_TRIM {
        acc += values[first];
        first += 1;
    }
    let lower = acc;
    let mut last = values.len() - 1;
    let mut acc = 0.0;
    while last > first && acc + values[last] < TAIL_TRIM {
        acc += values[last];
        last -= 1;
    }
    let mut masses = values[first..=last].to_vec();
    masses[0] += lower;
    let total_shift: i64 = active.iter().zip(&shifts).map(|((_, c), s)| *c as i64 * s).sum();
    Ok(PrvDistribution {
        origin_index: total_shift + start + first as i64,
        mesh,
        masses,
        inf_mass: (inf_mass + acc).min(1.0),
        rounding,
    })
}

/// [`compose_prvs`] after moving every distribution onto the finest mesh present.
pub fn compose_prvs_regrid(prvs: &[PrvDistribution], counts: &[u64]) -> Result<PrvDistribution, AccountingError> {
    let mesh = prvs.iter().map(|p| p.mesh).fold(f64::INFINITY, f64::min);
    let regridded = prvs.iter().map(|p| p.regrid(mesh)).collect::<Result<Vec<_>, _>>()?;
    compose_prvs(&regridded, counts)
}

/// Smallest `eps` with `E[(1 - e^(eps - Y))_+] + P(Y = inf) <= delta`.
///
/// The discrete distribution is solved exactly on each grid cell. The
/// result is then raised by the rounding margin, so it upper-bounds the
/// epsilon of the undiscretized loss.
pub fn prv_to_epsilon(prv: &PrvDistribution, delta: f64) -> Result<f64, AccountingError> {
    check_delta(delta)?;
    if delta <= prv.inf_mass {
        return Err(AccountingError::Unachievable { delta, floor: prv.inf_mass });
    }
    let (t, delta_err) = prv.rounding.margin(delta - prv.inf_mass);
    Ok(discrete_epsilon(prv, delta - delta_err).max(0.0) + t)
}

fn discrete_epsilon(prv: &PrvDistribution, target: f64) -> f64 {
    let decay = (-prv.mesh).exp();
    // Suffix sums over points above the current one: total mass, and
    // sum of m_i * exp(-(y_i - y_next)) anchored at the next point.
    let mut tail_m = 0.0;
    let mut tail_e = 0.0;
    for j in (0..prv.masses.len()).rev() {
        let delta_here = prv.inf_mass + tail_m - decay * tail_e;
        if delta_here > target {
            return prv.value(j + 1) + ((prv.inf_mass + tail_m - target) / tail_e).ln();
        }
        tail_e = prv.masses[j] + decay * tail_e;
        tail_m += prv.masses[j];
    }
    let num = prv.inf_mass + tail_m - target;
    if num <= 0.0 || tail_e <= 0.0 {
        f64::NEG_INFINITY
    } else {
        prv.value(0) + (num / tail_e).ln()
    }
}
