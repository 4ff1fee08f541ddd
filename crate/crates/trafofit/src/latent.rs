//! Latent reference distributions F_Z.
//!
//! All four distributions are parameter-free. CDF, log-density, survival
//! and quantile functions are evaluated in f64 internally; the normal CDF
//! uses Cody-style rational approximations of erf/erfc (relative error
//! below 1e-15) and the normal quantile refines Acklam's rational
//! approximation with Halley steps against that CDF.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentDistribution {
    /// Standard normal, Φ.
    #[serde(rename = "normal")]
    StdNormal,
    /// Standard logistic, expit.
    #[serde(rename = "logistic")]
    StdLogistic,
    /// Standard minimum extreme value: F(z) = 1 - exp(-exp(z)).
    #[serde(rename = "gompertz")]
    MinExtremeValue,
    /// Standard maximum extreme value: F(z) = exp(-exp(-z)).
    #[serde(rename = "gumbel")]
    MaxExtremeValue,
}

impl LatentDistribution {
    pub fn parse_name(name: &str) -> Option<Self> {
        match name {
            "normal" => Some(Self::StdNormal),
            "logistic" => Some(Self::StdLogistic),
            "gompertz" => Some(Self::MinExtremeValue),
            "gumbel" => Some(Self::MaxExtremeValue),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::StdNormal => "normal",
            Self::StdLogistic => "logistic",
            Self::MinExtremeValue => "gompertz",
            Self::MaxExtremeValue => "gumbel",
        }
    }

    /// F_Z(z). Total on the extended reals: cdf(-inf) = 0, cdf(+inf) = 1.
    pub fn cdf<S: Scalar>(&self, z: S) -> S {
        S::of_f64(self.cdf_f64(z.as_f64()))
    }

    /// 1 - F_Z(z), computed without cancellation in the upper tail.
    pub fn surv<S: Scalar>(&self, z: S) -> S {
        S::of_f64(self.surv_f64(z.as_f64()))
    }

    /// log f_Z(z).
    pub fn log_pdf<S: Scalar>(&self, z: S) -> S {
        S::of_f64(self.log_pdf_f64(z.as_f64()))
    }

    /// f_Z(z).
    pub fn pdf<S: Scalar>(&self, z: S) -> S {
        S::of_f64(self.log_pdf_f64(z.as_f64()).exp())
    }

    /// d/dz log f_Z(z).
    pub fn dlog_pdf<S: Scalar>(&self, z: S) -> S {
        S::of_f64(self.dlog_pdf_f64(z.as_f64()))
    }

    /// F_Z^{-1}(p) for p in (0, 1).
    pub fn quantile<S: Scalar>(&self, p: S) -> Option<S> {
        let p = p.as_f64();
        if !(0.0 < p && p < 1.0) {
            return None;
        }
        Some(S::of_f64(self.quantile_f64(p)))
    }

    fn cdf_f64(&self, z: f64) -> f64 {
        match self {
            Self::StdNormal => norm_cdf(z),
            Self::StdLogistic => sigmoid(z),
            Self::MinExtremeValue => -f64::exp_m1(-z.exp()),
            Self::MaxExtremeValue => (-(-z).exp()).exp(),
        }
    }

    fn surv_f64(&self, z: f64) -> f64 {
        match self {
            Self::StdNormal => norm_cdf(-z),
            Self::StdLogistic => sigmoid(-z),
            Self::MinExtremeValue => (-z.exp()).exp(),
            Self::MaxExtremeValue => -f64::exp_m1(-(-z).exp()),
        }
    }

    fn log_pdf_f64(&self, z: f64) -> f64 {
        const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
        match self {
            Self::StdNormal => -0.5 * z * z - LN_SQRT_2PI,
            Self::StdLogistic => -z - 2.0 * softplus(-z),
            Self::MinExtremeValue => z - z.exp(),
            Self::MaxExtremeValue => -z - (-z).exp(),
        }
    }

    fn dlog_pdf_f64(&self, z: f64) -> f64 {
        match self {
            Self::StdNormal => -z,
            Self::StdLogistic => 1.0 - 2.0 * sigmoid(z),
            Self::MinExtremeValue => 1.0 - z.exp(),
            Self::MaxExtremeValue => -1.0 + (-z).exp(),
        }
    }

    fn quantile_f64(&self, p: f64) -> f64 {
        match self {
            Self::StdNormal => norm_quantile(p),
            Self::StdLogistic => (p / (1.0 - p)).ln(),
            Self::MinExtremeValue => (-f64::ln_1p(-p)).ln(),
            Self::MaxExtremeValue => -(-p.ln()).ln(),
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + f64::ln_1p((-z.abs()).exp())
}

/// Φ(z) = erfc(-z / sqrt(2)) / 2.
pub(crate) fn norm_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z == f64::INFINITY {
        return 1.0;
    }
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

// Rational approximations for erf/erfc after W. J. Cody (1969), as in the
// netlib SPECFUN `calerf` routine. Relative error is below 1.2e-16 in all
// three regimes.
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_1e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const ERF_C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_375_9e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const ERF_D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_098_5e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const ERF_P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044_4e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const ERF_Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_460_5e0,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];
const ONE_OVER_SQRT_PI: f64 = 5.641_895_835_477_563e-1;

fn erf(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        let ysq = if y > 1e-300 { y * y } else { 0.0 };
        let mut xnum = ERF_A[4] * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + ERF_A[i]) * ysq;
            xden = (xden + ERF_B[i]) * ysq;
        }
        x * (xnum + ERF_A[3]) / (xden + ERF_B[3])
    } else {
        let sign = x.signum();
        sign * (1.0 - erfc_positive(y))
    }
}

fn erfc(x: f64) -> f64 {
    if x < -0.46875 {
        2.0 - erfc_positive(-x)
    } else if x <= 0.46875 {
        1.0 - erf(x)
    } else {
        erfc_positive(x)
    }
}

/// erfc(y) for y > 0.46875.
fn erfc_positive(y: f64) -> f64 {
    let result = if y <= 4.0 {
        let mut xnum = ERF_C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + ERF_C[i]) * y;
            xden = (xden + ERF_D[i]) * y;
        }
        (xnum + ERF_C[7]) / (xden + ERF_D[7])
    } else if y >= 26.6 {
        return 0.0;
    } else {
        let ysq = 1.0 / (y * y);
        let mut xnum = ERF_P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + ERF_P[i]) * ysq;
            xden = (xden + ERF_Q[i]) * ysq;
        }
        let r = ysq * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
        (ONE_OVER_SQRT_PI - r) / y
    };
    // Split exp(-y^2) as exp(-hi^2) * exp(-(y-hi)(y+hi)) to limit rounding
    // in the argument of the exponential.
    let hi = (y * 16.0).trunc() / 16.0;
    let del = (y - hi) * (y + hi);
    (-hi * hi).exp() * (-del).exp() * result
}

/// Acklam's rational approximation for Φ^{-1}, then two Halley steps.
fn norm_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239e0,
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
        -2.400_758_277_161_838e0,
        -2.549_732_539_343_734e0,
        4.374_664_141_464_968e0,
        2.938_163_982_698_783e0,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996e0,
        3.754_408_661_907_416e0,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * f64::ln_1p(-p)).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
    for _ in 0..2 {
        let e = norm_cdf(x) - p;
        let pdf = (-0.5 * x * x - LN_SQRT_2PI).exp();
        if pdf == 0.0 {
            break;
        }
        let u = e / pdf;
        x -= u / (1.0 + x * u / 2.0);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent erf oracle: Maclaurin series, adequate for |x| < 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            let n = n as f64;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
            if term.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    fn cdf_oracle(z: f64) -> f64 {
        0.5 + 0.5 * erf_series(z / std::f64::consts::SQRT_2)
    }

    #[test]
    fn logistic_cdf_at_zero() {
        assert_eq!(LatentDistribution::StdLogistic.cdf(0.0f64), 0.5);
    }

    #[test]
    fn minev_cdf_at_zero() {
        assert_relative_eq!(
            LatentDistribution::MinExtremeValue.cdf(0.0f64),
            1.0 - (-1.0f64).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn normal_cdf_against_series_oracle() {
        // Spec example: Φ(1.959964) = 0.975.
        assert_relative_eq!(
            LatentDistribution::StdNormal.cdf(1.959964f64),
            0.975,
            epsilon = 1e-6
        );
        for &z in &[-2.5, -1.0, -0.1, 0.0, 0.3, 1.0, 1.959964, 2.8] {
            assert_relative_eq!(
                LatentDistribution::StdNormal.cdf(z),
                cdf_oracle(z),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn normal_cdf_tails() {
        // Values against the asymptotic expansion: Φ(-10) ≈ 7.6198530241605e-24.
        let lo = LatentDistribution::StdNormal.cdf(-10.0f64);
        assert_relative_eq!(lo, 7.619_853_024_160_526e-24, max_relative = 1e-12);
        assert_eq!(LatentDistribution::StdNormal.cdf(f64::INFINITY), 1.0);
        assert_eq!(LatentDistribution::StdNormal.cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(LatentDistribution::StdLogistic.cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(LatentDistribution::MinExtremeValue.cdf(f64::INFINITY), 1.0);
        assert_eq!(LatentDistribution::MaxExtremeValue.cdf(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn log_pdf_values() {
        assert_relative_eq!(
            LatentDistribution::StdLogistic.log_pdf(0.0f64),
            0.25f64.ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            LatentDistribution::StdNormal.log_pdf(0.0f64),
            -0.918_938_533_204_672_8,
            max_relative = 1e-14
        );
        // MinEV density log f(0) = 0 - e^0 = -1.
        assert_relative_eq!(
            LatentDistribution::MinExtremeValue.log_pdf(0.0f64),
            -1.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn log_pdf_stable_to_30() {
        for d in [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
        ] {
            for &z in &[-30.0f64, -20.0, 20.0, 30.0] {
                let lp = d.log_pdf(z);
                assert!(lp.is_finite(), "{d:?} log_pdf({z}) = {lp}");
            }
        }
    }

    #[test]
    fn quantile_values() {
        assert_eq!(
            LatentDistribution::StdLogistic.quantile(0.5f64).unwrap(),
            0.0
        );
        assert_relative_eq!(
            LatentDistribution::StdLogistic.quantile(0.75f64).unwrap(),
            3.0f64.ln(),
            max_relative = 1e-14
        );
        // Derived by bisection on the CDF oracle.
        assert_relative_eq!(
            LatentDistribution::StdNormal.quantile(0.975f64).unwrap(),
            1.959_963_984_540_054,
            epsilon = 1e-9
        );
        assert!(LatentDistribution::StdNormal.quantile(0.0f64).is_none());
        assert!(LatentDistribution::StdNormal.quantile(1.0f64).is_none());
    }

    #[test]
    fn quantile_round_trip() {
        let dists = [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
            LatentDistribution::MinExtremeValue,
            LatentDistribution::MaxExtremeValue,
        ];
        for d in dists {
            let mut p = 1e-6;
            while p < 1.0 - 1e-6 {
                let z = d.quantile(p).unwrap();
                let back: f64 = d.cdf(z);
                assert!(
                    (back - p).abs() < 1e-9,
                    "{d:?}: cdf(quantile({p})) = {back}"
                );
                p += 0.0137;
            }
        }
    }

    #[test]
    fn symmetry_and_duality() {
        let zs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.25).collect();
        for &z in &zs {
            for d in [
                LatentDistribution::StdNormal,
                LatentDistribution::StdLogistic,
            ] {
                let lhs: f64 = d.cdf(-z);
                let rhs: f64 = 1.0 - d.cdf(z);
                assert!((lhs - rhs).abs() < 1e-12, "{d:?} symmetry broken at {z}");
            }
            let min_ev: f64 = LatentDistribution::MinExtremeValue.cdf(z);
            let max_ev: f64 = LatentDistribution::MaxExtremeValue.cdf(-z);
            assert!((min_ev - (1.0 - max_ev)).abs() < 1e-12);
        }
    }

    #[test]
    fn cdf_derivative_matches_pdf() {
        let h = 1e-6;
        for d in [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
            LatentDistribution::MinExtremeValue,
            LatentDistribution::MaxExtremeValue,
        ] {
            for &z in &[-2.0, -0.7, 0.0, 0.4, 1.3, 2.5] {
                let fd = (d.cdf_f64(z + h) - d.cdf_f64(z - h)) / (2.0 * h);
                let pdf: f64 = d.pdf(z);
                assert_relative_eq!(fd, pdf, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn surv_consistent_with_cdf() {
        for d in [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
            LatentDistribution::MinExtremeValue,
            LatentDistribution::MaxExtremeValue,
        ] {
            for &z in &[-3.0, -1.0, 0.0, 1.0, 3.0] {
                let s: f64 = d.surv(z);
                let c: f64 = d.cdf(z);
                assert_relative_eq!(s, 1.0 - c, epsilon = 1e-12);
            }
        }
        // Far tail must not cancel to zero prematurely (MinEV genuinely
        // underflows there: exp(-exp(12)) is below the smallest double).
        for d in [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
            LatentDistribution::MaxExtremeValue,
        ] {
            let s: f64 = d.surv(12.0);
            assert!(s > 0.0, "{d:?}");
        }
    }

    #[test]
    fn f32_instantiation() {
        let c: f32 = LatentDistribution::StdLogistic.cdf(0.0f32);
        assert_eq!(c, 0.5);
    }

    #[test]
    fn names_round_trip() {
        for d in [
            LatentDistribution::StdNormal,
            LatentDistribution::StdLogistic,
            LatentDistribution::MinExtremeValue,
            LatentDistribution::MaxExtremeValue,
        ] {
            assert_eq!(LatentDistribution::parse_name(d.name()), Some(d));
        }
        assert_eq!(LatentDistribution::parse_name("cauchy"), None);
    }
}
