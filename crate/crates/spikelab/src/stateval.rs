//! Bayes-optimal state evolution `q ← F^BO(q)`, its weak-recovery
//! threshold and the small-overlap hierarchy of moments.
//!
//! The outer average `E_ξ[Z*_out f*_out f*_outᵀ]` at `(√q ξ, I − q, I)`
//! equals an average of `f*_out f*_outᵀ` under the planted law: given the
//! latents `Λ`, `ω ~ N(qF₂(Λ), qΣq + q − q²)` with `Σ = diag(1, η²)`. Both
//! the latent sum and the Gaussian in `ω` are done by quadrature.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::amp::{sym_sqrt, Channel, ChannelError};
use crate::latents::{correlation_exponent, joint_moment, CorrelationExponent, LatentDistribution};
use crate::popflow::linear_fit;
use crate::quad::NormalRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateEvolutionError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("E[λ²] must be positive")]
    NoSignal,
    #[error("correlation exponent is not finite up to degree {0}")]
    InfiniteExponent(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoOverlap {
    pub q11: f64,
    pub q12: f64,
    pub q22: f64,
}

impl BoOverlap {
    pub fn from_mat(q: &Matrix2<f64>) -> Self {
        BoOverlap { q11: q[(0, 0)], q12: 0.5 * (q[(0, 1)] + q[(1, 0)]), q22: q[(1, 1)] }
    }

    pub fn mat(&self) -> Matrix2<f64> {
        Matrix2::new(self.q11, self.q12, self.q12, self.q22)
    }

    pub fn theta_u(&self) -> f64 {
        self.q11.max(0.0).sqrt()
    }

    pub fn theta_v(&self) -> f64 {
        self.q22.max(0.0).sqrt()
    }

    pub fn frobenius(&self) -> f64 {
        self.mat().norm()
    }
}

/// Default `q⁰` of the uninformative start.
pub fn uninformative_init() -> Matrix2<f64> {
    Matrix2::new(1e-3, 1e-4, 1e-4, 1e-3)
}

/// Quadrature form of the map `F^BO`.
pub struct BoMap {
    channel: Channel,
    /// `(w, F₂)` per latent node.
    planted: Vec<(f64, Vector2<f64>)>,
    sigma: Matrix2<f64>,
    gh: NormalRule,
}

pub const DEFAULT_OMEGA_NODES: usize = 20;

impl BoMap {
    pub fn new(dist: &LatentDistribution, omega_nodes: usize) -> Self {
        let eta = dist.eta();
        let planted = dist
            .rule()
            .nodes
            .iter()
            .filter(|n| n.w > 1e-300)
            .map(|n| (n.w, Vector2::new(n.lambda, eta * n.nu)))
            .collect();
        BoMap {
            channel: Channel::new(dist),
            planted,
            sigma: Matrix2::new(1.0, 0.0, 0.0, eta * eta),
            gh: NormalRule::hermite(omega_nodes),
        }
    }

    /// `q̂ = α E[f*_out f*_outᵀ]` under the planted law.
    pub fn q_hat(&self, q: &Matrix2<f64>, alpha: f64) -> Result<Matrix2<f64>, ChannelError> {
        let v = Matrix2::identity() - q;
        let ctx = self.channel.context(&Matrix2::identity())?;
        let cov = q * self.sigma * q + q - q * q;
        let l = sym_sqrt(&cov);
        let gh = &self.gh;
        let parts: Vec<Matrix2<f64>> = self
            .planted
            .par_iter()
            .map(|(w, f2)| -> Result<Matrix2<f64>, ChannelError> {
                let mean = q * f2;
                let mut acc = Matrix2::zeros();
                for (&g1, &w1) in gh.nodes.iter().zip(&gh.weights) {
                    for (&g2, &w2) in gh.nodes.iter().zip(&gh.weights) {
                        let om = mean + l * Vector2::new(g1, g2);
                        let f = self.channel.eval(&ctx, &om, &v)?.f_out;
                        acc += (w1 * w2) * f * f.transpose();
                    }
                }
                Ok(*w * acc)
            })
            .collect::<Result<_, _>>()?;
        let s: Matrix2<f64> = parts.iter().sum();
        let s = alpha * s;
        Ok(0.5 * (s + s.transpose()))
    }

    /// `F^BO(q) = q̂(I + q̂)⁻¹`.
    pub fn apply(&self, q: &Matrix2<f64>, alpha: f64) -> Result<Matrix2<f64>, ChannelError> {
        let qh = self.q_hat(q, alpha)?;
        let out = qh * (Matrix2::identity() + qh).try_inverse().expect("I + q̂ is positive definite");
        Ok(0.5 * (out + out.transpose()))
    }
}

#[derive(Debug, Clone)]
pub struct BoConfig {
    pub damping: f64,
    pub iters: usize,
    pub tol: f64,
    /// Iterates averaged at the end.
    pub average_last: usize,
    pub omega_nodes: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig { damping: 0.6, iters: 200, tol: 1e-4, average_last: 50, omega_nodes: DEFAULT_OMEGA_NODES }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoResult {
    pub overlap: BoOverlap,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn iterate(
    map: &BoMap,
    alpha: f64,
    init: Matrix2<f64>,
    cfg: &BoConfig,
) -> Result<BoResult, StateEvolutionError> {
    let mut q = init;
    let mut tail: Vec<Matrix2<f64>> = Vec::new();
    let mut residual = f64::INFINITY;
    let mut it = 0;
    for t in 0..cfg.iters {
        let next = map.apply(&q, alpha)?;
        residual = (next - q).norm();
        q = cfg.damping * q + (1.0 - cfg.damping) * next;
        it = t + 1;
        tail.push(q);
        if tail.len() > cfg.average_last {
            tail.remove(0);
        }
        if residual < 1e-9 {
            tail.clear();
            tail.push(q);
            break;
        }
    }
    let avg: Matrix2<f64> = tail.iter().sum::<Matrix2<f64>>() / tail.len() as f64;
    let fixed_residual = (map.apply(&avg, alpha)? - avg).norm();
    Ok(BoResult {
        overlap: BoOverlap::from_mat(&avg),
        residual: fixed_residual,
        converged: fixed_residual < cfg.tol || residual < cfg.tol,
        iterations: it,
    })
}

/// Damped iteration from the uninformative `q⁰`.
pub fn bo_fixed_point(
    alpha: f64,
    dist: &LatentDistribution,
    cfg: &BoConfig,
) -> Result<BoResult, StateEvolutionError> {
    if !(alpha > 0.0) {
        return Err(StateEvolutionError::BadAlpha(alpha));
    }
    let map = BoMap::new(dist, cfg.omega_nodes);
    iterate(&map, alpha, uninformative_init(), cfg)
}

/// Fixed points reached from the uninformative and the informed
/// (`0.99·I`) starts, with a flag when they disagree.
#[derive(Debug, Clone, Serialize)]
pub struct BoFixedPoints {
    pub uninformed: BoResult,
    pub informed: BoResult,
    pub disagree: bool,
}

pub fn bo_fixed_points(
    alpha: f64,
    dist: &LatentDistribution,
    cfg: &BoConfig,
) -> Result<BoFixedPoints, StateEvolutionError> {
    if !(alpha > 0.0) {
        return Err(StateEvolutionError::BadAlpha(alpha));
    }
    let map = BoMap::new(dist, cfg.omega_nodes);
    let uninformed = iterate(&map, alpha, uninformative_init(), cfg)?;
    let informed = iterate(&map, alpha, 0.99 * Matrix2::identity(), cfg)?;
    let disagree = (uninformed.overlap.mat() - informed.overlap.mat()).norm() > 1e-2;
    Ok(BoFixedPoints { uninformed, informed, disagree })
}

/// `α_c = f / E[λ²]²` with `f = 4/(1 + √(1+4γ))²`.
pub fn alpha_weak(dist: &LatentDistribution) -> Result<f64, StateEvolutionError> {
    let l2 = dist.e_lambda2;
    if !(l2 > 0.0) {
        return Err(StateEvolutionError::NoSignal);
    }
    let gamma = dist.e_lambda_nu.powi(2) / (l2 * l2 * (1.0 + dist.e_nu2));
    let f = 4.0 / (1.0 + (1.0 + 4.0 * gamma).sqrt()).powi(2);
    Ok(f / (l2 * l2))
}

/// `∂_ω f*_out(0, I, I)` from the latent moments.
pub fn jacobian_at_origin(dist: &LatentDistribution) -> Matrix2<f64> {
    let c = dist.eta() * dist.e_lambda_nu;
    Matrix2::new(dist.e_lambda2, c, c, 0.0)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Instability {
    pub lambda_plus: f64,
    pub v_plus: [f64; 2],
    pub q_pert: [[f64; 2]; 2],
}

/// Top eigenpair of the Jacobian at the trivial fixed point.
pub fn instability_direction(dist: &LatentDistribution) -> Result<Instability, StateEvolutionError> {
    if !(dist.e_lambda2 > 0.0) {
        return Err(StateEvolutionError::NoSignal);
    }
    let e = SymmetricEigen::new(jacobian_at_origin(dist));
    let k = if e.eigenvalues[0] >= e.eigenvalues[1] { 0 } else { 1 };
    let mut v = e.eigenvectors.column(k).into_owned();
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        v = -v;
    }
    Ok(Instability {
        lambda_plus: e.eigenvalues[k],
        v_plus: [v[0], v[1]],
        q_pert: [[v[0] * v[0], v[0] * v[1]], [v[1] * v[0], v[1] * v[1]]],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HierarchyCheck {
    pub k_star: u32,
    pub q_u: Vec<f64>,
    pub q_v: Vec<f64>,
    pub exponent: f64,
    /// `q_v / q_u^{k*}` at the smallest grid point.
    pub coefficient: f64,
    /// `α E[νλ^{k*}]² / ((1 + E[ν²]) k*!)`.
    pub predicted: f64,
}

/// Geometric grid from `lo` to `hi` with `n` points.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// One application of `F^BO` to `diag(q_u, 0)` on a grid, fitted in log-log.
pub fn hierarchy_coefficient_check(
    dist: &LatentDistribution,
    alpha: f64,
    q_u: &[f64],
) -> Result<HierarchyCheck, StateEvolutionError> {
    let k_star = match correlation_exponent(dist, crate::latents::DEFAULT_K_MAX, crate::latents::DEFAULT_EXPONENT_TOL) {
        Ok(CorrelationExponent::Finite(k)) => k,
        Ok(CorrelationExponent::NoneUpTo(k)) => return Err(StateEvolutionError::InfiniteExponent(k)),
        Err(_) => return Err(StateEvolutionError::InfiniteExponent(0)),
    };
    let map = BoMap::new(dist, DEFAULT_OMEGA_NODES);
    let q_v: Vec<f64> = q_u
        .iter()
        .map(|&qu| map.apply(&Matrix2::new(qu, 0.0, 0.0, 0.0), alpha).map(|m| m[(1, 1)]))
        .collect::<Result<_, _>>()?;
    let (x, y): (Vec<f64>, Vec<f64>) = q_u.iter().zip(&q_v).map(|(a, b)| (a.ln(), b.ln())).unzip();
    let (exponent, _, _) = linear_fit(&x, &y);
    let m = joint_moment(dist, k_star).map(|m| m.value).unwrap_or(f64::NAN);
    let predicted = alpha * m * m / ((1.0 + dist.e_nu2) * crate::hermite::factorial(k_star as usize));
    let i0 = q_u
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let coefficient = q_v[i0] / q_u[i0].powi(k_star as i32);
    Ok(HierarchyCheck { k_star, q_u: q_u.to_vec(), q_v, exponent, coefficient, predicted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::ChannelParams;

    fn quick() -> BoConfig {
        BoConfig { omega_nodes: 12, ..Default::default() }
    }

    #[test]
    fn threshold_values() {
        assert!((alpha_weak(&LatentDistribution::k2_threshold()).unwrap() - 1.0).abs() < 1e-12);
        let g = LatentDistribution::linearly_correlated(1.0).unwrap();
        let want = 4.0 / (1.0 + 3f64.sqrt()).powi(2);
        assert!((alpha_weak(&g).unwrap() - want).abs() < 1e-9);
        assert!((want - 0.53590).abs() < 1e-5);
        let scaled = LatentDistribution::from_map("scaled", |l| l * 0.0, &[]);
        assert!((alpha_weak(&scaled).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_scales_with_lambda_variance() {
        // E[λ²] = 2 and E[λν] = 0 through a joint sampler
        let d = LatentDistribution::from_sampler(
            "wide",
            |r| {
                let l: f64 = rand::Rng::sample(r, rand_distr::StandardNormal);
                (2f64.sqrt() * l, 0.0)
            },
            1000,
            1,
        );
        let a = alpha_weak(&d).unwrap();
        let l2 = d.e_lambda2;
        assert!((a - 1.0 / (l2 * l2)).abs() < 1e-12);
    }

    #[test]
    fn instability_eigenpairs() {
        let i = instability_direction(&LatentDistribution::k2_threshold()).unwrap();
        assert!((i.lambda_plus - 1.0).abs() < 1e-9);
        assert!((i.v_plus[0] - 1.0).abs() < 1e-9 && i.v_plus[1].abs() < 1e-6);
        let g = LatentDistribution::linearly_correlated(1.0).unwrap();
        let i = instability_direction(&g).unwrap();
        assert!((i.lambda_plus - (1.0 + 3f64.sqrt()) / 2.0).abs() < 1e-8);
        let tr = i.q_pert[0][0] + i.q_pert[1][1];
        assert!((tr - 1.0).abs() < 1e-12);
        // Jacobian agrees with the channel derivative
        let p = ChannelParams::at_identity(Vector2::zeros(), Matrix2::identity());
        let j = Channel::new(&g).df_out(&p).unwrap();
        assert!((j - jacobian_at_origin(&g)).abs().max() < 1e-8);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let map = BoMap::new(&LatentDistribution::k2_threshold(), 8);
        let out = map.apply(&Matrix2::zeros(), 3.0).unwrap();
        assert!(out.norm() < 1e-20);
    }

    #[test]
    fn below_threshold_collapses() {
        let r = bo_fixed_point(0.5, &LatentDistribution::k2_threshold(), &quick()).unwrap();
        assert!(r.overlap.theta_u() < 0.02 && r.overlap.theta_v() < 0.02, "{r:?}");
    }

    #[test]
    fn nu_free_law_keeps_v_block_empty() {
        let dist = LatentDistribution::from_map("lambda-only", |_| 0.0, &[]);
        let map = BoMap::new(&dist, 12);
        let mut q = uninformative_init();
        q[(1, 1)] = 0.0;
        q[(0, 1)] = 0.0;
        q[(1, 0)] = 0.0;
        for _ in 0..20 {
            q = 0.6 * q + 0.4 * map.apply(&q, 3.0).unwrap();
            assert!(q[(1, 1)].abs() < 1e-20);
        }
        assert!(q[(0, 0)] > 0.1);
    }

    #[test]
    fn k2_hierarchy_is_quadratic() {
        let dist = LatentDistribution::k2_threshold();
        let h = hierarchy_coefficient_check(&dist, 2.0, &geometric_grid(1e-3, 1e-1, 5)).unwrap();
        assert_eq!(h.k_star, 2);
        assert!((h.exponent - 2.0).abs() < 0.1, "{h:?}");
        assert!((h.predicted - 0.49002).abs() < 1e-4, "{h:?}");
        assert!((h.coefficient / h.predicted - 1.0).abs() < 0.05, "{h:?}");
    }

    #[test]
    fn rademacher_v_overlap_stays_zero() {
        let dist = LatentDistribution::independent_rademacher();
        let map = BoMap::new(&dist, 12);
        for qu in geometric_grid(1e-3, 1e-1, 4) {
            let out = map.apply(&Matrix2::new(qu, 0.0, 0.0, 0.0), 2.0).unwrap();
            assert!(out[(1, 1)].abs() < 1e-10);
        }
    }
}
