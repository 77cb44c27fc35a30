//! Standard normal helpers shared by the mechanisms and the accountant.

use statrs::distribution::{ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// `P(Z <= x)` for a standard normal `Z`.
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    standard().cdf(x)
}

/// `P(Z > x)`, accurate deep into the upper tail.
pub fn sf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return 1.0;
    }
    standard().sf(x)
}

/// Inverse of [`cdf`] for `p` in `(0, 1)`.
pub fn quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-15);
        let c = cdf(1.959_963_984_540_054);
        assert!((c - 0.975).abs() < 1e-10);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        // deep tail stays relative-accurate
        let s = sf(10.0);
        assert!((s / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-9);
    }
}
