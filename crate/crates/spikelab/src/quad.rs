//! Gaussian quadrature rules used throughout the crate.
//!
//! Every rule here integrates against the standard normal density, so
//! `rule.expect(f)` approximates `E[f(Z)]` for `Z ~ N(0, 1)`.

use std::f64::consts::PI;


/// Nodes and weights of a one-dimensional rule for `E[f(Z)]`, `Z ~ N(0,1)`.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Probabilists' Gauss–Hermite rule with `n` nodes, ascending.
    ///
    /// Golub–Welsch on the Jacobi matrix of `He_k`, with each node then
    /// polished by a few Newton steps on the orthonormal recurrence.
    pub fn hermite(n: usize) -> Self {
        assert!(n >= 1);
        let jac = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = nalgebra::SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (polish_root(eig.eigenvalues[k], n), v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove the last bit of eigen-solver asymmetry.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-x, w);
            pairs[j] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        NormalRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// Composite Gauss–Legendre rule on `[-half_width, half_width]` with the
    /// normal density folded into the weights. Panels never straddle a
    /// breakpoint, which keeps piecewise-smooth integrands exact to rounding.
    pub fn panels(breakpoints: &[f64], half_width: f64, panel_width: f64, order: usize) -> Self {
        let (gx, gw) = gauss_legendre(order);
        let mut cuts: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|b| b.abs() < half_width)
            .collect();
        cuts.push(-half_width);
        cuts.push(half_width);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for seg in cuts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let k = ((b - a) / panel_width).ceil().max(1.0) as usize;
            let h = (b - a) / k as f64;
            for p in 0..k {
                let lo = a + p as f64 * h;
                let mid = lo + 0.5 * h;
                for (x, w) in gx.iter().zip(&gw) {
                    let z = mid + 0.5 * h * x;
                    nodes.push(z);
                    weights.push(0.5 * h * w * normal_pdf(z));
                }
            }
        }
        NormalRule { nodes, weights }
    }

    /// Default rule for integrands with kinks or jumps at `breakpoints`.
    pub fn piecewise(breakpoints: &[f64]) -> Self {
        Self::panels(breakpoints, 12.0, 1.0, 16)
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / 2f64.sqrt())
}

pub fn normal_quantile(p: f64) -> f64 {
    -2f64.sqrt() * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp;
        loop {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Newton refinement of a root of `He_n`, using the orthonormal recurrence
/// `p_{k+1} = (x p_k - sqrt(k) p_{k-1}) / sqrt(k+1)`.
fn polish_root(mut x: f64, n: usize) -> f64 {
    for _ in 0..3 {
        let (mut p0, mut p1) = (0.0, 1.0);
        for k in 0..n {
            let p2 = (x * p1 - (k as f64).sqrt() * p0) / ((k + 1) as f64).sqrt();
            p0 = p1;
            p1 = p2;
        }
        // d/dx p_n = sqrt(n) p_{n-1}
        let dp = (n as f64).sqrt() * p0;
        if dp == 0.0 || !dp.is_finite() || !p1.is_finite() {
            break;
        }
        let step = p1 / dp;
        if step.abs() > 1e-3 {
            break;
        }
        x -= step;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_reproduces_gaussian_moments() {
        let r = NormalRule::hermite(200);
        assert!((r.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!((r.expect(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((r.expect(|x| x.powi(4)) - 3.0).abs() < 1e-11);
        assert!((r.expect(|x| x.powi(6)) - 15.0).abs() < 1e-10);
        assert!(r.expect(|x| x.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn small_hermite_rule_is_exact_for_low_degree() {
        let r = NormalRule::hermite(3);
        // nodes 0, +-sqrt(3), weights 2/3, 1/6
        assert!((r.nodes[2] - 3f64.sqrt()).abs() < 1e-14);
        assert!((r.weights[1] - 2.0 / 3.0).abs() < 1e-14);
        assert!((r.expect(|x| x.powi(4)) - 3.0).abs() < 1e-13);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn panel_rule_handles_indicator() {
        let r = NormalRule::piecewise(&[0.0]);
        let half = r.expect(|x| if x > 0.0 { x * x } else { 0.0 });
        assert!((half - 0.5).abs() < 1e-13);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let t = normal_quantile(0.75);
        assert!((t - 0.674_489_750_196_081_7).abs() < 1e-12);
        assert!((normal_cdf(t) - 0.75).abs() < 1e-14);
    }
}
