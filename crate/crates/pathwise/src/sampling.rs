//! Deterministic low-discrepancy sampling of box neighbourhoods.
//!
//! "For all x in a neighbourhood" conditions are checked numerically on a
//! quasi-random point set; the R2 Kronecker sequence gives reproducible,
//! well-spread samples without carrying an RNG around.

use crate::{lit, Real};

/// Generalised golden ratio: the unique positive root of x^(d+1) = x + 1.
fn plastic_constant(dim: usize) -> f64 {
    let mut x = 1.5_f64;
    for _ in 0..64 {
        x = (1.0 + x).powf(1.0 / (dim as f64 + 1.0));
    }
    x
}

/// `count` points of the R2 sequence mapped into the ∞-ball
/// { x : |x - center|_∞ <= radius }.
pub(crate) fn box_points<T: Real>(center: &[T], radius: T, count: usize) -> Vec<Vec<T>> {
    let dim = center.len();
    let phi = plastic_constant(dim);
    let alpha: Vec<f64> = (1..=dim).map(|k| (1.0 / phi.powi(k as i32)) % 1.0).collect();
    (0..count)
        .map(|k| {
            (0..dim)
                .map(|j| {
                    let u = (0.5 + alpha[j] * (k as f64 + 1.0)).fract();
                    let offset: T = lit::<T>(2.0 * u - 1.0) * radius;
                    center[j] + offset
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_stay_in_the_box_and_spread() {
        let c = [0.0_f64, 0.0, 0.0];
        let pts = box_points(&c, 0.2, 200);
        assert_eq!(pts.len(), 200);
        for p in &pts {
            for v in p {
                assert!(v.abs() <= 0.2 + 1e-15);
            }
        }
        // crude spread check: all octant sign patterns show up
        let mut seen = std::collections::HashSet::new();
        for p in &pts {
            seen.insert(p.iter().map(|v| *v > 0.0).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn sequence_is_deterministic() {
        let c = [0.1_f64, -0.1];
        assert_eq!(box_points(&c, 0.3, 50), box_points(&c, 0.3, 50));
    }
}
