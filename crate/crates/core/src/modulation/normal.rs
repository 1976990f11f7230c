//! Standard normal CDF and its inverse.

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// `Φ(z)` through the complementary error function, accurate in both tails.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
///
/// Rational initial guess (Acklam) refined by two Halley steps on `Φ`, which
/// brings `|Φ(Φ⁻¹(p)) − p|` to rounding level.
pub fn std_normal_icdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            value: p,
            domain: "(0, 1)",
        });
    }
    if p > 0.5 {
        return Ok(-lower_icdf(1.0 - p));
    }
    Ok(lower_icdf(p))
}

// p in (0, 0.5].
fn lower_icdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let e = std_normal_cdf(x) - p;
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent CDF: composite Simpson quadrature of the density from 0.
    fn simpson_cdf(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let mut s = std_normal_pdf(0.0) + std_normal_pdf(z);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * std_normal_pdf(k as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    fn bisect(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if simpson_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        for z in [-3.0, -1.0, 0.3, 2.5] {
            assert!((std_normal_cdf(z) - simpson_cdf(z)).abs() < 1e-13, "z={z}");
        }
        assert!(std_normal_cdf(40.0) == 1.0);
        assert!(std_normal_cdf(-40.0) >= 0.0);
    }

    #[test]
    fn icdf_examples() {
        assert_eq!(std_normal_icdf(0.5).unwrap(), 0.0);
        let oracle = bisect(0.6);
        let x = std_normal_icdf(0.6).unwrap();
        assert!((x - oracle).abs() < 1e-10, "{x} vs {oracle}");
        assert!((x - 0.253_347).abs() < 1e-6);
        assert!((std_normal_icdf(0.3).unwrap() - bisect(0.3)).abs() < 1e-10);
    }

    #[test]
    fn icdf_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(std_normal_icdf(p), Err(Error::Domain { .. })));
        }
    }

    proptest! {
        #[test]
        fn icdf_inverts_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
            let x = std_normal_icdf(p).unwrap();
            prop_assert!((std_normal_cdf(x) - p).abs() <= 1e-10);
        }

        #[test]
        fn icdf_is_odd(p in 1e-6f64..(1.0 - 1e-6)) {
            let a = std_normal_icdf(p).unwrap();
            let b = std_normal_icdf(1.0 - p).unwrap();
            prop_assert!((a + b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
