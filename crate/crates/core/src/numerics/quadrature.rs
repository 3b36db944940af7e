//! Adaptive Gauss-Kronrod (7/15) quadrature in one and two dimensions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Tolerances and budget for [`integrate`].
#[derive(Clone, Copy, Debug)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 20_000,
        }
    }
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * half, ((kron - gauss) * half).abs())
}

/// Integrate `f` over `[a, b]` to `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = kronrod(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let mut total = value;
    let mut total_err = error;
    loop {
        if !total.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
        }
        if total_err <= opts.abs_tol.max(opts.rel_tol * total.abs()) {
            return Ok(total);
        }
        if heap.len() >= opts.max_intervals {
            return Err(Error::Quadrature(format!(
                "error estimate {total_err:e} after {} intervals on [{a}, {b}]",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (v1, e1) = kronrod(&mut f, worst.a, mid);
        let (v2, e2) = kronrod(&mut f, mid, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: worst.b, value: v2, error: e2 });
        // Guard against drift in the running sums.
        if heap.len() % 256 == 0 {
            total = heap.iter().map(|s| s.value).sum();
            total_err = heap.iter().map(|s| s.error).sum();
        }
    }
}

/// Integrate `f(x, y)` over `x in [ax, bx]`, `y in [ay(x), by(x)]` by
/// nesting [`integrate`].
pub fn integrate_2d<F, L, U>(f: F, ax: f64, bx: f64, ay: L, by: U, opts: QuadOptions) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
    L: Fn(f64) -> f64,
    U: Fn(f64) -> f64,
{
    let inner_opts = QuadOptions {
        abs_tol: opts.abs_tol * 0.1 / (bx - ax).abs().max(1.0),
        rel_tol: opts.rel_tol * 0.1,
        max_intervals: opts.max_intervals,
    };
    let mut failure = None;
    let value = integrate(
        |x| match integrate(|y| f(x, y), ay(x), by(x), inner_opts) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        ax,
        bx,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_transcendentals() {
        let o = QuadOptions::default();
        assert!((integrate(|x| x * x, 0.0, 3.0, o).unwrap() - 9.0).abs() < 1e-13);
        assert!((integrate(f64::sin, 0.0, std::f64::consts::PI, o).unwrap() - 2.0).abs() < 1e-12);
        let g = integrate(|x| (-x * x).exp(), -10.0, 10.0, o).unwrap();
        assert!((g - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        assert_eq!(integrate(|x| x, 2.0, 2.0, o).unwrap(), 0.0);
        assert!((integrate(|x| x, 1.0, 0.0, o).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn oscillatory_integrand() {
        let o = QuadOptions::default();
        let v = integrate(|x| (50.0 * x).cos() * (-x).exp(), 0.0, 20.0, o).unwrap();
        // Re of 1/(1 - 50i) * (1 - e^{-20(1-50i)})
        let want = 1.0 / 2501.0;
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
    }

    #[test]
    fn two_dimensional_triangle() {
        let o = QuadOptions::default();
        let v = integrate_2d(|x, y| x * y, 0.0, 1.0, |_| 0.0, |x| x, o).unwrap();
        assert!((v - 0.125).abs() < 1e-12);
    }

    #[test]
    fn budget_exhaustion_reports() {
        let o = QuadOptions {
            abs_tol: 1e-300,
            rel_tol: 0.0,
            max_intervals: 10,
        };
        assert!(matches!(integrate(|x| x.sqrt(), 0.0, 1.0, o), Err(Error::Quadrature(_))));
    }
}
