//! Error-function family and Gaussian closed forms.
//!
//! `erfcx` is evaluated directly from Cody's rational Chebyshev
//! approximations (Math. Comp. 1969) so the scaled value never passes
//! through `exp(x^2)` for positive arguments.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 5.641_895_835_477_563e-1;
const THRESH: f64 = 0.46875;
/// Below this argument `2 exp(x^2)` exceeds the largest finite double.
pub const ERFCX_MIN_ARG: f64 = -26.628;

const A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const B: [f64; 4] = [
    2.360_129_095_234_412e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const C: [f64; 9] = [
    5.641_884_969_886_701e-1,
    8.883_149_794_388_376e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_099e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044_4e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_460_5e0,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];

/// erf(x) for |x| <= THRESH.
fn erf_small(x: f64) -> f64 {
    let ysq = x * x;
    let mut num = A[4] * ysq;
    let mut den = ysq;
    for i in 0..3 {
        num = (num + A[i]) * ysq;
        den = (den + B[i]) * ysq;
    }
    x * (num + A[3]) / (den + B[3])
}

/// exp(y^2) erfc(y) for y > THRESH.
fn erfcx_positive(y: f64) -> f64 {
    if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        (num + C[7]) / (den + D[7])
    } else if y >= 6.71e7 {
        FRAC_1_SQRT_PI / y
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + P[i]) * ysq;
            den = (den + Q[i]) * ysq;
        }
        let r = ysq * (num + P[4]) / (den + Q[4]);
        (FRAC_1_SQRT_PI - r) / y
    }
}

/// exp(-y^2) computed with the split used by Cody to keep full precision.
fn exp_neg_sq(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Scaled complementary error function `exp(x^2) erfc(x)`.
///
/// Fails with [`Error::Overflow`] for `x < -26.628`, where the result is
/// not representable.
pub fn erfcx(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("erfcx of NaN".into()));
    }
    let y = x.abs();
    if y <= THRESH {
        return Ok((x * x).exp() * (1.0 - erf_small(x)));
    }
    if x > 0.0 {
        return Ok(erfcx_positive(y));
    }
    if x < ERFCX_MIN_ARG {
        return Err(Error::Overflow(format!("erfcx({x})")));
    }
    let ysq = (x * 16.0).trunc() / 16.0;
    let del = (x - ysq) * (x + ysq);
    let e = (ysq * ysq).exp() * del.exp();
    Ok(2.0 * e - erfcx_positive(y))
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= THRESH {
        return 1.0 - erf_small(x);
    }
    let pos = if y >= 26.543 {
        0.0
    } else {
        exp_neg_sq(y) * erfcx_positive(y)
    };
    if x < 0.0 {
        2.0 - pos
    } else {
        pos
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.abs() <= THRESH {
        erf_small(x)
    } else {
        1.0 - erfc(x)
    }
}

/// KL divergence `KL[N(mean_a, var_a) || N(mean_b, var_b)]`.
pub fn gauss_kl(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> Result<f64> {
    if !(var_a > 0.0 && var_b > 0.0) {
        return Err(Error::Domain(format!(
            "gauss_kl needs positive variances, got {var_a} and {var_b}"
        )));
    }
    let d = mean_a - mean_b;
    let ratio = var_a / var_b;
    Ok(0.5 * (-ratio.ln() - 1.0 + ratio + d * d / var_b))
}

/// Partial derivatives of [`gauss_kl`] with respect to
/// `(mean_a, var_a, var_b)`; the prior mean is taken as fixed.
pub(crate) fn gauss_kl_grad(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> (f64, f64, f64) {
    let d = mean_a - mean_b;
    let d_mean = d / var_b;
    let d_var_a = 0.5 * (1.0 / var_b - 1.0 / var_a);
    let d_var_b = 0.5 * (1.0 / var_b - var_a / (var_b * var_b) - d * d / (var_b * var_b));
    (d_mean, d_var_a, d_var_b)
}

/// Gaussian log density `log N(y | mean, var)`.
#[inline]
pub fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var
}
