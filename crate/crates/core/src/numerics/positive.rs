use serde::{Deserialize, Serialize};

pub const LENGTHSCALE_FLOOR: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DECAY_FLOOR: f64 = 1e-4;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A strictly positive quantity stored through an unconstrained raw value:
/// `value = softplus(raw) + floor`.
///
/// When a `PositiveParam` lives inside a gradient container, `raw` holds the
/// derivative with respect to the raw value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveParam {
    pub raw: f64,
    pub floor: f64,
}

impl PositiveParam {
    pub fn new(value: f64, floor: f64) -> Self {
        assert!(value > floor, "positive parameter {value} must exceed its floor {floor}");
        Self {
            raw: softplus_inv(value - floor),
            floor,
        }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        softplus(self.raw) + self.floor
    }

    /// d value / d raw.
    #[inline]
    pub fn jacobian(&self) -> f64 {
        sigmoid(self.raw)
    }

    pub fn set_value(&mut self, value: f64) {
        *self = Self::new(value, self.floor);
    }

    /// A zeroed gradient slot with the same floor.
    pub fn zero_like(&self) -> Self {
        Self {
            raw: 0.0,
            floor: self.floor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_floor() {
        for &v in &[1e-3, 0.01, 0.5, 3.0, 40.0, 1e4] {
            let p = PositiveParam::new(v, 1e-6);
            assert!(((p.value() - v) / v).abs() < 1e-12, "{v} -> {}", p.value());
        }
        let p = PositiveParam {
            raw: -800.0,
            floor: 1e-4,
        };
        assert_eq!(p.value(), 1e-4);
        assert_eq!(softplus(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn jacobian_matches_difference() {
        for &r in &[-20.0, -1.0, 0.0, 0.7, 25.0] {
            let h = 1e-5 * f64::max(1.0, f64::abs(r));
            let fd = (softplus(r + h) - softplus(r - h)) / (2.0 * h);
            assert!((fd - sigmoid(r)).abs() < 1e-8, "r={r} fd={fd}");
        }
    }
}
