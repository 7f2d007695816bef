//! Globally adaptive Gauss–Kronrod (7, 15) integration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

// 15-point Kronrod abscissae on [0, 1]; odd indices are the embedded 7-point Gauss nodes.
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
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Default cap on the number of subintervals.
pub const DEFAULT_MAX_INTERVALS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    lower: f64,
    upper: f64,
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

fn kronrod15<F: Fn(f64) -> f64>(f: &F, lower: f64, upper: f64) -> Segment {
    let center = 0.5 * (lower + upper);
    let half = 0.5 * (upper - lower);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        lower,
        upper,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Integrates `f` over `[lower, upper]` until the summed error estimate
/// drops below `abs_tol`. Reversed bounds flip the sign.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    lower: f64,
    upper: f64,
    abs_tol: f64,
    max_intervals: usize,
) -> Result<Integral> {
    if !(lower.is_finite() && upper.is_finite()) {
        return Err(Error::Domain(format!(
            "integration bounds must be finite, got [{lower}, {upper}]"
        )));
    }
    if abs_tol <= 0.0 || abs_tol.is_nan() {
        return Err(Error::Domain(format!(
            "quadrature tolerance must be positive, got {abs_tol}"
        )));
    }
    if lower == upper {
        return Ok(Integral {
            value: 0.0,
            error_estimate: 0.0,
            intervals: 0,
        });
    }
    if lower > upper {
        let r = integrate(f, upper, lower, abs_tol, max_intervals)?;
        return Ok(Integral {
            value: -r.value,
            ..r
        });
    }

    let first = kronrod15(&f, lower, upper);
    let mut error = first.error;
    let mut heap = BinaryHeap::from([first]);

    while error > abs_tol {
        if heap.len() >= max_intervals {
            return Err(Error::Quadrature {
                lower,
                upper,
                error_estimate: error,
                tolerance: abs_tol,
                intervals: heap.len(),
            });
        }
        let worst = heap.pop().expect("heap holds at least one segment");
        let mid = 0.5 * (worst.lower + worst.upper);
        if mid <= worst.lower || mid >= worst.upper {
            // Interval can no longer be split in floating point.
            return Err(Error::Quadrature {
                lower,
                upper,
                error_estimate: error,
                tolerance: abs_tol,
                intervals: heap.len() + 1,
            });
        }
        let left = kronrod15(&f, worst.lower, mid);
        let right = kronrod15(&f, mid, worst.upper);
        error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }

    // Sum from the segments; the running error total accumulates drift.
    let value = heap.iter().map(|s| s.value).sum();
    let error_estimate = heap.iter().map(|s| s.error).sum();
    Ok(Integral {
        value,
        error_estimate,
        intervals: heap.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let r = integrate(|x| 3.0 * x * x - 2.0 * x + 1.0, -1.0, 2.0, 1e-12, 50).unwrap();
        // x^3 - x^2 + x from -1 to 2 = (8 - 4 + 2) - (-1 - 1 - 1) = 9
        assert!((r.value - 9.0).abs() < 1e-12);
        assert_eq!(r.intervals, 1);
    }

    #[test]
    fn gaussian_density_mass() {
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let r = integrate(phi, -8.0, 8.0, 1e-13, 200).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
        let half = integrate(phi, -8.0, 0.0, 1e-13, 200).unwrap();
        assert!((half.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reversed_bounds_and_empty() {
        let a = integrate(|x| x.exp(), 0.0, 1.0, 1e-12, 50).unwrap().value;
        let b = integrate(|x| x.exp(), 1.0, 0.0, 1e-12, 50).unwrap().value;
        assert!((a + b).abs() < 1e-14);
        assert!((a - (1f64.exp() - 1.0)).abs() < 1e-12);
        assert_eq!(integrate(|x| x, 3.0, 3.0, 1e-9, 10).unwrap().value, 0.0);
    }

    #[test]
    fn reports_non_convergence() {
        let r = integrate(|x| if x > 0.3 { 1.0 } else { 0.0 }, 0.0, 1.0, 1e-14, 4);
        assert!(matches!(r, Err(Error::Quadrature { intervals: 4, .. })));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(integrate(|x| x, 0.0, f64::INFINITY, 1e-9, 10).is_err());
        assert!(integrate(|x| x, 0.0, 1.0, 0.0, 10).is_err());
    }
}
