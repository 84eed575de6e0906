//! Gauss-Legendre quadrature on an interval.
//!
//! Nodes and weights are computed at construction by Newton iteration on the
//! Legendre recurrence, so the rule is exact for polynomials up to degree
//! `2n - 1` and accurate to rounding for the smooth integrands used by the
//! path-wise objective.

use alloc::vec::Vec;

use crate::math;

/// Node count used by the path-wise quadrature objective.
pub const DEFAULT_NODES: usize = 64;

/// Clip applied to the unit interval so integrands stay away from the
/// schedule endpoints.
pub const DEFAULT_CLIP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadError {
    #[error("need at least one node")]
    NoNodes,
    #[error("interval [{a}, {b}] is empty or reversed")]
    BadInterval { a: f64, b: f64 },
}

/// A fixed quadrature rule: paired nodes and weights on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Legendre polynomial value and derivative at `x` via the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

impl Quadrature {
    /// Gauss-Legendre rule with `n` nodes on `[a, b]`.
    pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Self, QuadError> {
        if n == 0 {
            return Err(QuadError::NoNodes);
        }
        if !(b > a) || a.is_nan() || b.is_nan() {
            return Err(QuadError::BadInterval { a, b });
        }
        let mut nodes = alloc::vec![0.0; n];
        let mut weights = alloc::vec![0.0; n];
        let half = (n + 1) / 2;
        for i in 0..half {
            // Tricomi's estimate for the i-th root of P_n, then Newton.
            let mut x = math::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                let step = p / d;
                x -= step;
                if math::abs(step) < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // Roots come out in descending order; store ascending and use
            // the even symmetry of the weights.
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let mid = 0.5 * (a + b);
        let scale = 0.5 * (b - a);
        for i in 0..n {
            nodes[i] = mid + scale * nodes[i];
            weights[i] *= scale;
        }
        Ok(Quadrature { nodes, weights })
    }

    /// The rule used by default for time integrals on `[0, 1]`: 64 nodes on
    /// the clipped interval `[1e-3, 1 - 1e-3]`.
    pub fn clipped_unit() -> Self {
        Quadrature::gauss_legendre(DEFAULT_NODES, DEFAULT_CLIP, 1.0 - DEFAULT_CLIP)
            .expect("default rule is valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.points().map(|(x, w)| w * f(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_node_rule_matches_reference_values() {
        let rule = Quadrature::gauss_legendre(5, -1.0, 1.0).unwrap();
        let nodes = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        let weights = [
            0.236_926_885_056_189,
            0.478_628_670_499_366,
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
        ];
        for i in 0..5 {
            assert!((rule.nodes()[i] - nodes[i]).abs() < 1e-12, "node {i}");
            assert!((rule.weights()[i] - weights[i]).abs() < 1e-12, "weight {i}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let n = 8;
        let rule = Quadrature::gauss_legendre(n, 0.0, 1.0).unwrap();
        for k in 0..2 * n {
            let got = rule.integrate(|x| math::powf(x, k as f64));
            let want = 1.0 / (k as f64 + 1.0);
            assert!(
                (got - want).abs() < 1e-13,
                "degree {k}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn clipped_unit_rule_integrates_smooth_functions() {
        let rule = Quadrature::clipped_unit();
        assert_eq!(rule.len(), DEFAULT_NODES);
        let (a, b) = (DEFAULT_CLIP, 1.0 - DEFAULT_CLIP);
        let total: f64 = rule.weights().iter().sum();
        assert!((total - (b - a)).abs() < 1e-14);
        let got = rule.integrate(math::exp);
        let want = math::exp(b) - math::exp(a);
        assert!((got - want).abs() < 1e-13);
        assert!(rule.nodes().windows(2).all(|w| w[0] < w[1]));
        assert!(rule.weights().iter().all(|&w| w > 0.0));
        assert!(rule.nodes().iter().all(|&x| x > a && x < b));
    }

    #[test]
    fn rejects_degenerate_rules() {
        assert!(matches!(
            Quadrature::gauss_legendre(0, 0.0, 1.0),
            Err(QuadError::NoNodes)
        ));
        assert!(matches!(
            Quadrature::gauss_legendre(4, 1.0, 0.5),
            Err(QuadError::BadInterval { .. })
        ));
    }
}
