use serde::Serialize;
use statrs::function::erf::erfc;

use super::ReportError;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZTest {
    pub z: f64,
    /// Two-sided.
    pub p: f64,
    pub significant: bool,
}

/// Pooled two-sided two-proportion z-test of `k1/n1` against `k2/n2`.
///
/// The normal tail is `erfc(|z| / sqrt 2)`; statrs evaluates erfc with
/// rational approximations accurate to about 1e-16 relative error. A pooled
/// proportion of exactly 0 or 1 gives `z = 0, p = 1`.
pub fn two_proportion_z_test(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<ZTest, ReportError> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(ReportError::Contract(format!(
            "z-test needs 0 <= k <= n and n > 0, got {k1}/{n1} vs {k2}/{n2}"
        )));
    }
    let (k1f, n1f, k2f, n2f) = (k1 as f64, n1 as f64, k2 as f64, n2 as f64);
    let pooled = (k1f + k2f) / (n1f + n2f);
    if k1 + k2 == 0 || k1 + k2 == n1 + n2 {
        return Ok(ZTest {
            z: 0.0,
            p: 1.0,
            significant: false,
        });
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = (k1f / n1f - k2f / n2f) / se;
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(ZTest {
        z,
        p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_proportions() {
        let t = two_proportion_z_test(50, 100, 50, 100).unwrap();
        assert_eq!((t.z, t.p, t.significant), (0.0, 1.0, false));
    }

    #[test]
    fn sixty_vs_forty() {
        let t = two_proportion_z_test(60, 100, 40, 100).unwrap();
        assert!((t.z - 2.8284271247461901).abs() < 1e-12);
        assert!((t.p - 0.0046777349810472658).abs() < 1e-12);
        assert!(t.significant);
    }

    #[test]
    fn preconditions() {
        assert!(two_proportion_z_test(1, 0, 1, 1).is_err());
        assert!(two_proportion_z_test(5, 4, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn antisymmetric(n1 in 1u64..2000, n2 in 1u64..2000, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let k1 = (a * n1 as f64) as u64;
            let k2 = (b * n2 as f64) as u64;
            let f = two_proportion_z_test(k1, n1, k2, n2).unwrap();
            let r = two_proportion_z_test(k2, n2, k1, n1).unwrap();
            prop_assert_eq!(f.z, -r.z);
            prop_assert_eq!(f.p, r.p);
            prop_assert!((0.0..=1.0).contains(&f.p));
        }
    }
}
