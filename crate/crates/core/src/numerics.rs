//! Shared numerical kernels: Gaussian pdf/cdf, the inverse normal CDF,
//! trapezoid quadrature, the 1-Wasserstein distance between quantile grids,
//! and the Gaussian exponential-tilt identity.
//!
//! The error function follows the FreeBSD/SunPro rational approximations
//! (double-precision, ~1 ulp); the inverse normal CDF uses the Wichura
//! AS 241 rational approximation (PPND16 grade). The two families are
//! independent, so their round-trip agreement is a meaningful cross-check.

use crate::error::{Error, Result};
use crate::grids::{trapezoid, Grid1D, QuantileGrid};
use crate::scalar::Real;

/// Standard normal pdf.
pub fn normal_pdf<R: Real>(x: R) -> R {
    let inv_sqrt_2pi = R::of(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-x * x * R::of(0.5)).exp()
}

/// Gaussian pdf with mean and standard deviation.
pub fn gaussian_pdf<R: Real>(x: R, mean: R, sd: R) -> R {
    normal_pdf((x - mean) / sd) / sd
}

/// Natural log of the Gaussian pdf; avoids underflow deep in the tails.
pub fn ln_gaussian_pdf<R: Real>(x: R, mean: R, sd: R) -> R {
    let z = (x - mean) / sd;
    let ln_sqrt_2pi = R::of(0.918_938_533_204_672_7);
    -z * z * R::of(0.5) - ln_sqrt_2pi - sd.ln()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf<R: Real>(x: R) -> R {
    let inv_sqrt2 = R::of(std::f64::consts::FRAC_1_SQRT_2);
    R::of(0.5) * erfc(-x * inv_sqrt2)
}

/// Upper tail `P(Z > x)` of the standard normal, accurate for large `x`.
pub fn normal_sf<R: Real>(x: R) -> R {
    let inv_sqrt2 = R::of(std::f64::consts::FRAC_1_SQRT_2);
    R::of(0.5) * erfc(x * inv_sqrt2)
}

/// Inverse of the standard normal CDF on (0,1).
pub fn normal_quantile<R: Real>(u: R) -> Result<R> {
    if !(u > R::zero() && u < R::one()) {
        return Err(Error::Domain(format!("normal_quantile requires u in (0,1), got {u}")));
    }
    Ok(ppnd16(u))
}

/// AS 241 (Wichura), PPND16 variant: relative accuracy about 1e-16.
fn ppnd16<R: Real>(p: R) -> R {
    let q = p - R::of(0.5);
    if q.abs() <= R::of(0.425) {
        let r = R::of(0.180625) - q * q;
        let num = poly(
            r,
            &[
                3.387_132_872_796_366_608e0,
                1.331_416_678_917_843_774_5e2,
                1.971_590_950_306_551_442_7e3,
                1.373_169_376_550_946_112_5e4,
                4.592_195_393_154_987_145_7e4,
                6.726_577_092_700_870_085_3e4,
                3.343_057_558_358_812_810_5e4,
                2.509_080_928_730_122_672_7e3,
            ],
        );
        let den = poly(
            r,
            &[
                1.0,
                4.231_333_070_160_091_125_2e1,
                6.871_870_074_920_579_083e2,
                5.394_196_021_424_751_107_7e3,
                2.121_379_430_158_659_586_7e4,
                3.930_789_580_009_271_061e4,
                2.872_908_573_572_194_267_4e4,
                5.226_495_278_852_854_561e3,
            ],
        );
        return q * num / den;
    }
    let tail = if q < R::zero() { p } else { R::one() - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= R::of(5.0) {
        r = r - R::of(1.6);
        let num = poly(
            r,
            &[
                1.423_437_110_749_683_577_34e0,
                4.630_337_846_156_545_295_9e0,
                5.769_497_221_460_691_405_5e0,
                3.647_848_324_763_204_605_04e0,
                1.270_458_252_452_368_382_58e0,
                2.417_807_251_774_506_117_7e-1,
                2.272_384_498_926_918_458_33e-2,
                7.745_450_142_783_414_076_4e-4,
            ],
        );
        let den = poly(
            r,
            &[
                1.0,
                2.053_191_626_637_758_821_87e0,
                1.676_384_830_183_803_849_4e0,
                6.897_673_349_851_000_045_5e-1,
                1.481_039_764_274_800_745_9e-1,
                1.519_866_656_361_645_719_66e-2,
                5.475_938_084_995_344_946e-4,
                1.050_750_071_644_416_843_24e-9,
            ],
        );
        num / den
    } else {
        r = r - R::of(5.0);
        let num = poly(
            r,
            &[
                6.657_904_643_501_103_777_2e0,
                5.463_784_911_164_114_369_9e0,
                1.784_826_539_917_291_335_8e0,
                2.965_605_718_285_048_912_3e-1,
                2.653_218_952_657_612_309_3e-2,
                1.242_660_947_388_078_438_6e-3,
                2.711_555_568_743_487_578_15e-5,
                2.010_334_399_292_288_132_65e-7,
            ],
        );
        let den = poly(
            r,
            &[
                1.0,
                5.998_322_065_558_879_376_9e-1,
                1.369_298_809_227_358_053_1e-1,
                1.487_536_129_085_061_485_25e-2,
                7.868_691_311_456_132_591e-4,
                1.846_318_317_510_054_681_8e-5,
                1.421_511_758_316_445_888_7e-7,
                2.044_263_103_389_939_785_64e-15,
            ],
        );
        num / den
    };
    if q < R::zero() {
        -value
    } else {
        value
    }
}

fn poly<R: Real>(x: R, coeffs: &[f64]) -> R {
    let mut acc = R::zero();
    for &c in coeffs.iter().rev() {
        acc = acc * x + R::of(c);
    }
    acc
}

// --- error function (FreeBSD/SunPro, as in Go's math package) ---

const ERX: f64 = 8.450_629_115_104_675_3e-1;

const PP: [f64; 5] = [
    1.283_791_670_955_125_6e-1,
    -3.250_421_072_470_015e-1,
    -2.848_174_957_559_851e-2,
    -5.770_270_296_489_442e-3,
    -2.376_301_665_665_016_3e-5,
];
const QQ: [f64; 5] = [
    3.979_172_239_591_553_4e-1,
    6.502_224_998_876_73e-2,
    5.081_306_281_875_766e-3,
    1.324_947_380_043_216_4e-4,
    -3.960_228_278_775_368e-6,
];
const PA: [f64; 7] = [
    -2.362_118_560_752_659_4e-3,
    4.148_561_186_837_483e-1,
    -3.722_078_760_357_013_3e-1,
    3.183_466_199_011_617_5e-1,
    -1.108_946_942_823_966_8e-1,
    3.547_830_432_561_823_6e-2,
    -2.166_375_594_868_790_8e-3,
];
const QA: [f64; 6] = [
    1.064_208_804_008_442_3e-1,
    5.403_979_177_021_71e-1,
    7.182_865_441_419_627e-2,
    1.261_712_198_087_616_4e-1,
    1.363_708_391_202_905e-2,
    1.198_449_984_679_910_7e-2,
];
const RA: [f64; 8] = [
    -9.864_944_034_847_148e-3,
    -6.938_583_267_847_208e-1,
    -1.055_862_622_532_329_1e1,
    -6.237_533_245_032_6e1,
    -1.623_966_694_625_734_7e2,
    -1.846_050_929_067_110_4e2,
    -8.128_743_550_630_66e1,
    -9.814_329_344_169_146e0,
];
const SA: [f64; 8] = [
    1.965_127_166_743_925_7e1,
    1.376_577_541_435_190_4e2,
    4.345_658_774_752_292_3e2,
    6.453_872_717_332_679e2,
    4.290_081_400_275_678_3e2,
    1.086_350_055_417_794_4e2,
    6.570_249_770_319_282e0,
    -6.042_441_521_485_81e-2,
];
const RB: [f64; 7] = [
    -9.864_942_924_700_1e-3,
    -7.992_832_376_805_23e-1,
    -1.775_795_491_775_475_2e1,
    -1.606_363_848_558_219_2e2,
    -6.375_664_433_683_896e2,
    -1.025_095_131_611_077_2e3,
    -4.835_191_916_086_514e2,
];
const SB: [f64; 7] = [
    3.033_806_074_348_246e1,
    3.257_925_129_965_739_2e2,
    1.536_729_586_084_437e3,
    3.199_858_219_508_595_4e3,
    2.553_050_406_433_164_4e3,
    4.745_285_412_069_554e2,
    -2.244_095_244_658_581_8e1,
];

/// `x` with the low 32 mantissa bits cleared; the classical trick that makes
/// `exp(-z*z - 0.5625) * exp((z-x)(z+x) + R/S)` accurate for the erfc tail.
fn trunc_low_bits<R: Real>(x: R) -> R {
    R::of(f64::from_bits(x.as_f64().to_bits() & 0xffff_ffff_0000_0000))
}

/// Error function.
pub fn erf<R: Real>(x: R) -> R {
    let sign = x < R::zero();
    let x = x.abs();
    let one = R::one();
    if x < R::of(0.84375) {
        let temp = if x < R::of(3.725_290_298_461_914e-9) {
            // 2^-28: avoid spurious underflow in x*x
            x + R::of(1.283_791_670_955_125_9e-1) * x
        } else {
            let z = x * x;
            let r = poly(z, &PP);
            let s = one + z * poly(z, &QQ);
            x + x * (r / s)
        };
        return if sign { -temp } else { temp };
    }
    if x < R::of(1.25) {
        let s = x - one;
        let p = poly(s, &PA);
        let q = one + s * poly(s, &QA);
        let v = R::of(ERX) + p / q;
        return if sign { -v } else { v };
    }
    if x >= R::of(6.0) {
        return if sign { -one } else { one };
    }
    let s = one / (x * x);
    let (r, q) = if x < R::of(1.0 / 0.35) {
        (poly(s, &RA), one + s * poly(s, &SA))
    } else {
        (poly(s, &RB), one + s * poly(s, &SB))
    };
    let z = trunc_low_bits(x);
    let t = (-z * z - R::of(0.5625)).exp() * ((z - x) * (z + x) + r / q).exp();
    let v = one - t / x;
    if sign {
        -v
    } else {
        v
    }
}

/// Complementary error function, accurate in the upper tail.
pub fn erfc<R: Real>(x: R) -> R {
    let sign = x < R::zero();
    let x = x.abs();
    let one = R::one();
    let half = R::of(0.5);
    if x < R::of(0.84375) {
        let temp = if x < R::of(1.387_778_780_781_445_7e-17) {
            // 2^-56
            x
        } else {
            let z = x * x;
            let r = poly(z, &PP);
            let s = one + z * poly(z, &QQ);
            let y = x * (r / s);
            if x < R::of(0.25) {
                x + y
            } else {
                half + (y + (x - half))
            }
        };
        if sign {
            return one + temp;
        }
        return if x < R::of(0.25) { one - temp } else { half - (temp - half) };
    }
    if x < R::of(1.25) {
        let s = x - one;
        let p = poly(s, &PA);
        let q = one + s * poly(s, &QA);
        return if sign {
            one + R::of(ERX) + p / q
        } else {
            one - R::of(ERX) - p / q
        };
    }
    if x < R::of(28.0) {
        let s = one / (x * x);
        let (r, q) = if x < R::of(1.0 / 0.35) {
            (poly(s, &RA), one + s * poly(s, &SA))
        } else {
            if sign && x > R::of(6.0) {
                return R::of(2.0);
            }
            (poly(s, &RB), one + s * poly(s, &SB))
        };
        let z = trunc_low_bits(x);
        let t = (-z * z - R::of(0.5625)).exp() * ((z - x) * (z + x) + r / q).exp();
        return if sign { R::of(2.0) - t / x } else { t / x };
    }
    if sign {
        R::of(2.0)
    } else {
        R::zero()
    }
}

/// Trapezoid integral of a sampled function.
pub fn integrate_trapezoid<R: Real>(g: &Grid1D<R>) -> R {
    trapezoid(g.points(), g.values())
}

/// 1-Wasserstein distance between two distributions given by quantile grids
/// on the same rank grid: the trapezoid value of `∫ |q1(r) - q2(r)| dr`
/// over the covered rank range.
pub fn wasserstein1<R: Real>(q1: &QuantileGrid<R>, q2: &QuantileGrid<R>) -> Result<R> {
    if !q1.same_ranks(q2) {
        return Err(Error::Usage("wasserstein1 requires identical rank grids".into()));
    }
    let diffs: Vec<R> = q1
        .values()
        .iter()
        .zip(q2.values().iter())
        .map(|(a, b)| (*a - *b).abs())
        .collect();
    Ok(trapezoid(q1.ranks(), &diffs))
}

/// Result of tilting a Gaussian `N(x_nom, sd)` by `exp(tau * x)`:
/// `f_nom(x) exp(tau x) = exp(log_normalizer) * phi(x; tilted_mean, sd)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTilt<R = f64> {
    pub log_normalizer: R,
    pub tilted_mean: R,
}

/// Exponential-tilt identity for a Gaussian with standard deviation `sd`.
pub fn gaussian_tilt<R: Real>(x_nom: R, sd: R, tau: R) -> Result<GaussianTilt<R>> {
    if !(sd > R::zero()) {
        return Err(Error::Domain(format!("gaussian_tilt requires sd > 0, got {sd}")));
    }
    Ok(GaussianTilt {
        log_normalizer: tau * x_nom + tau * tau * sd * sd * R::of(0.5),
        tilted_mean: x_nom + tau * sd * sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{default_rank_grid, linspace};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn erf_reference_values() {
        assert!((erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(-1.0f64) + 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erfc(3.0f64) - 2.209_049_699_858_544e-5).abs() < 1e-19);
        assert!((erfc(0.0f64) - 1.0).abs() < 1e-16);
        assert!(erf(7.0f64) == 1.0);
    }

    #[test]
    fn quantile_reference_values() {
        assert_eq!(normal_quantile(0.5f64).unwrap(), 0.0);
        assert!((normal_quantile(0.975f64).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_quantile(0.975f64).unwrap() - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.9f64).unwrap() - 1.281_551_565_544_600_4).abs() < 1e-12);
        assert!((normal_quantile(0.01f64).unwrap() + 2.326_347_874_040_841).abs() < 1e-12);
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(normal_quantile(0.0f64).is_err());
        assert!(normal_quantile(1.0f64).is_err());
        assert!(normal_quantile(-0.2f64).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        // Two independent approximation families must agree.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            let x = normal_quantile(u).unwrap();
            assert!((normal_cdf(x) - u).abs() < 1e-12, "u={u}");
        }
        for i in 0..400 {
            let x = -7.0 + 14.0 * (i as f64) / 399.0;
            let u = normal_cdf(x);
            let back = normal_quantile(u).unwrap();
            assert!((back - x).abs() < 1e-9, "x={x} back={back}");
        }
    }

    #[test]
    fn quantile_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..2000 {
            let u = i as f64 / 2000.0;
            let q = normal_quantile(u).unwrap();
            assert!(q > prev);
            prev = q;
        }
    }

    #[test]
    fn quantile_f32_smoke() {
        let q: f32 = normal_quantile(0.975f32).unwrap();
        assert!((q - 1.959964).abs() < 1e-4);
    }

    #[test]
    fn trapezoid_square_on_fine_grid() {
        let xs: Vec<f64> = linspace(0.0, 1.0, 4001);
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let g = Grid1D::new(xs, ys).unwrap();
        assert!((integrate_trapezoid(&g) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn wasserstein_shift_and_scale() {
        let ranks: Vec<f64> = default_rank_grid(20001);
        let q0: Vec<f64> = ranks.iter().map(|&r| normal_quantile(r).unwrap()).collect();
        let q_shift: Vec<f64> = q0.iter().map(|q| q + 0.37).collect();
        let q_scale: Vec<f64> = q0.iter().map(|q| 2.0 * q).collect();
        let g0 = QuantileGrid::new(ranks.clone(), q0).unwrap();
        let gs = QuantileGrid::new(ranks.clone(), q_shift).unwrap();
        let gw = QuantileGrid::new(ranks.clone(), q_scale).unwrap();
        assert_eq!(wasserstein1(&g0, &g0).unwrap(), 0.0);
        assert!((wasserstein1(&g0, &gs).unwrap() - 0.37).abs() < 1e-12);
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((wasserstein1(&g0, &gw).unwrap() - expect).abs() < 1e-3);
        // symmetry
        assert_eq!(
            wasserstein1(&g0, &gw).unwrap(),
            wasserstein1(&gw, &g0).unwrap()
        );
    }

    #[test]
    fn wasserstein_mismatched_grids_rejected() {
        let r1: Vec<f64> = default_rank_grid(101);
        let r2: Vec<f64> = default_rank_grid(102);
        let a = QuantileGrid::new(r1.clone(), r1.clone()).unwrap();
        let b = QuantileGrid::new(r2.clone(), r2.clone()).unwrap();
        assert!(wasserstein1(&a, &b).is_err());
    }

    #[test]
    fn tilt_identity_zero_tau() {
        let t = gaussian_tilt(18.0f64, 1.0, 0.0).unwrap();
        assert_eq!(t.log_normalizer, 0.0);
        assert_eq!(t.tilted_mean, 18.0);
    }

    #[test]
    fn tilt_matches_price_incentive_mean() {
        // x_nom = 18, sd = 0.6 * sqrt(3), tau = -0.17/1.8 shifts the mean to 17.898.
        let sd = 0.6 * 3.0f64.sqrt();
        let t = gaussian_tilt(18.0, sd, -0.17 / 1.8).unwrap();
        assert!((t.tilted_mean - 17.898).abs() < 1e-12);
    }

    #[test]
    fn tilt_pointwise_identity() {
        let sd = 0.6 * 3.0f64.sqrt();
        let tau = -0.4;
        let t = gaussian_tilt(18.0, sd, tau).unwrap();
        let xs: Vec<f64> = linspace(18.0 - 8.0 * sd, 18.0 + 8.0 * sd, 4001);
        let mut max_rel = 0.0f64;
        for &x in &xs {
            let lhs = gaussian_pdf(x, 18.0, sd) * (tau * x).exp();
            let rhs = t.log_normalizer.exp() * gaussian_pdf(x, t.tilted_mean, sd);
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            max_rel = max_rel.max((lhs - rhs).abs() / scale);
        }
        assert!(max_rel < 1e-12, "max relative residual {max_rel}");
    }

    #[test]
    fn tilt_rejects_bad_sd() {
        assert!(gaussian_tilt(1.0f64, 0.0, 0.3).is_err());
        assert!(gaussian_tilt(1.0f64, -1.0, 0.3).is_err());
    }
}
