//! Joint laws of the latent pair `(λ, ν)`, their moments and the
//! correlation exponent `k*`.
//!
//! Each law carries a weighted node rule: a finite set of `(w, λ, ν)` that
//! reproduces expectations over the law. Laws where ν is a piecewise-constant
//! function of a Gaussian λ get a composite Gauss–Legendre rule split at the
//! jumps, so parity zeros come out at rounding level. Joint samplers fall
//! back to a fixed Monte-Carlo rule.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{normal_quantile, NormalRule};
use crate::rng::{stream, StreamRng};

pub type LatentMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type JointSampler = Arc<dyn Fn(&mut StreamRng) -> (f64, f64) + Send + Sync>;

pub const MAX_MOMENT_DEGREE: u32 = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("joint moment degree {0} exceeds the quadrature bound {MAX_MOMENT_DEGREE}")]
    DegreeTooHigh(u32),
    #[error("law has neither a deterministic map nor a sampler")]
    QuadratureNotApplicable,
    #[error("correlation must lie in [-1, 1], got {0}")]
    BadCorrelation(f64),
}

#[derive(Clone)]
pub enum CustomLaw {
    /// λ ~ N(0,1) and ν = map(λ); `breakpoints` lists the jumps of `map`.
    Map {
        name: String,
        map: LatentMap,
        breakpoints: Vec<f64>,
    },
    /// Arbitrary joint law, integrated with `samples` fixed draws.
    Joint {
        name: String,
        sampler: JointSampler,
        samples: usize,
        seed: u64,
    },
}

#[derive(Clone)]
pub enum LatentKind {
    K2Threshold,
    K3SignThreshold,
    IndependentRademacher,
    LinearlyCorrelated(f64),
    Custom(CustomLaw),
}

impl fmt::Debug for LatentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentKind::K2Threshold => write!(f, "K2Threshold"),
            LatentKind::K3SignThreshold => write!(f, "K3SignThreshold"),
            LatentKind::IndependentRademacher => write!(f, "IndependentRademacher"),
            LatentKind::LinearlyCorrelated(r) => write!(f, "LinearlyCorrelated({r})"),
            LatentKind::Custom(CustomLaw::Map { name, .. }) => write!(f, "Custom({name})"),
            LatentKind::Custom(CustomLaw::Joint { name, .. }) => write!(f, "Custom({name})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNode {
    pub w: f64,
    pub lambda: f64,
    pub nu: f64,
}

#[derive(Debug, Clone)]
pub struct LatentRule {
    pub nodes: Vec<LatentNode>,
    /// False when the rule is a Monte-Carlo sample rather than a quadrature.
    pub exact: bool,
}

impl LatentRule {
    pub fn expect<F: FnMut(f64, f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().map(|n| n.w * f(n.lambda, n.nu)).sum()
    }
}

#[derive(Clone)]
pub struct LatentDistribution {
    pub kind: LatentKind,
    pub e_lambda2: f64,
    pub e_nu2: f64,
    pub e_lambda_nu: f64,
    rule: Arc<LatentRule>,
}

impl fmt::Debug for LatentDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatentDistribution")
            .field("kind", &self.kind)
            .field("e_lambda2", &self.e_lambda2)
            .field("e_nu2", &self.e_nu2)
            .field("e_lambda_nu", &self.e_lambda_nu)
            .field("nodes", &self.rule.nodes.len())
            .finish()
    }
}

/// Threshold `Φ⁻¹(0.75)` of the k*=2 law.
pub fn k2_threshold() -> f64 {
    normal_quantile(0.75)
}

/// Threshold `√(2 ln 2)` of the k*=3 law.
pub fn k3_threshold() -> f64 {
    (2.0 * std::f64::consts::LN_2).sqrt()
}

fn k2_map(l: f64) -> f64 {
    if l.abs() < k2_threshold() {
        -std::f64::consts::SQRT_2
    } else {
        std::f64::consts::SQRT_2
    }
}

fn k3_map(l: f64) -> f64 {
    let s = if l >= 0.0 { 1.0 } else { -1.0 };
    let t = if l.abs() >= k3_threshold() { 1.0 } else { -1.0 };
    s * t
}

fn lambda_rule(breakpoints: &[f64]) -> NormalRule {
    NormalRule::panels(breakpoints, 12.0, 1.5, 12)
}

fn map_rule(map: &dyn Fn(f64) -> f64, breakpoints: &[f64]) -> LatentRule {
    let r = lambda_rule(breakpoints);
    let nodes = r
        .nodes
        .iter()
        .zip(&r.weights)
        .map(|(&l, &w)| LatentNode { w, lambda: l, nu: map(l) })
        .collect();
    LatentRule { nodes, exact: true }
}

impl LatentDistribution {
    pub fn new(kind: LatentKind) -> Result<Self, LatentError> {
        let rule = match &kind {
            LatentKind::K2Threshold => {
                let t = k2_threshold();
                map_rule(&k2_map, &[-t, t])
            }
            LatentKind::K3SignThreshold => {
                let c = k3_threshold();
                map_rule(&k3_map, &[-c, 0.0, c])
            }
            LatentKind::IndependentRademacher => {
                let r = lambda_rule(&[]);
                let mut nodes = Vec::with_capacity(2 * r.len());
                for (&l, &w) in r.nodes.iter().zip(&r.weights) {
                    for nu in [-1.0, 1.0] {
                        nodes.push(LatentNode { w: 0.5 * w, lambda: l, nu });
                    }
                }
                LatentRule { nodes, exact: true }
            }
            LatentKind::LinearlyCorrelated(rho) => {
                let rho = *rho;
                if !(-1.0..=1.0).contains(&rho) || rho.is_nan() {
                    return Err(LatentError::BadCorrelation(rho));
                }
                let r = lambda_rule(&[]);
                let zeta = NormalRule::hermite(32);
                let c = (1.0 - rho * rho).sqrt();
                let mut nodes = Vec::with_capacity(r.len() * zeta.len());
                for (&l, &w) in r.nodes.iter().zip(&r.weights) {
                    for (&z, &wz) in zeta.nodes.iter().zip(&zeta.weights) {
                        nodes.push(LatentNode { w: w * wz, lambda: l, nu: rho * l + c * z });
                    }
                }
                LatentRule { nodes, exact: true }
            }
            LatentKind::Custom(CustomLaw::Map { map, breakpoints, .. }) => {
                map_rule(map.as_ref(), breakpoints)
            }
            LatentKind::Custom(CustomLaw::Joint { sampler, samples, seed, .. }) => {
                let mut rng = stream(*seed, "latent-rule", 0);
                let w = 1.0 / *samples as f64;
                let nodes = (0..*samples)
                    .map(|_| {
                        let (lambda, nu) = sampler(&mut rng);
                        LatentNode { w, lambda, nu }
                    })
                    .collect();
                LatentRule { nodes, exact: false }
            }
        };
        let e_lambda2 = rule.expect(|l, _| l * l);
        let e_nu2 = rule.expect(|_, n| n * n);
        let e_lambda_nu = rule.expect(|l, n| l * n);
        Ok(LatentDistribution { kind, e_lambda2, e_nu2, e_lambda_nu, rule: Arc::new(rule) })
    }

    pub fn k2_threshold() -> Self {
        Self::new(LatentKind::K2Threshold).unwrap()
    }

    pub fn k3_sign_threshold() -> Self {
        Self::new(LatentKind::K3SignThreshold).unwrap()
    }

    pub fn independent_rademacher() -> Self {
        Self::new(LatentKind::IndependentRademacher).unwrap()
    }

    pub fn linearly_correlated(rho: f64) -> Result<Self, LatentError> {
        Self::new(LatentKind::LinearlyCorrelated(rho))
    }

    pub fn from_map(
        name: &str,
        map: impl Fn(f64) -> f64 + Send + Sync + 'static,
        breakpoints: &[f64],
    ) -> Self {
        Self::new(LatentKind::Custom(CustomLaw::Map {
            name: name.to_string(),
            map: Arc::new(map),
            breakpoints: breakpoints.to_vec(),
        }))
        .unwrap()
    }

    pub fn from_sampler(
        name: &str,
        sampler: impl Fn(&mut StreamRng) -> (f64, f64) + Send + Sync + 'static,
        samples: usize,
        seed: u64,
    ) -> Self {
        Self::new(LatentKind::Custom(CustomLaw::Joint {
            name: name.to_string(),
            sampler: Arc::new(sampler),
            samples: samples.max(1),
            seed,
        }))
        .unwrap()
    }

    /// λ ≡ ν ≡ 0: the data reduce to pure Gaussian noise.
    pub fn null() -> Self {
        Self::from_sampler("null", |_| (0.0, 0.0), 1, 0)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            LatentKind::K2Threshold => "k2_threshold".into(),
            LatentKind::K3SignThreshold => "k3_sign_threshold".into(),
            LatentKind::IndependentRademacher => "independent_rademacher".into(),
            LatentKind::LinearlyCorrelated(r) => format!("linearly_correlated({r})"),
            LatentKind::Custom(CustomLaw::Map { name, .. }) => name.clone(),
            LatentKind::Custom(CustomLaw::Joint { name, .. }) => name.clone(),
        }
    }

    pub fn rule(&self) -> &LatentRule {
        &self.rule
    }

    /// `η = 1/√(1+E[ν²])`.
    pub fn eta(&self) -> f64 {
        1.0 / (1.0 + self.e_nu2).sqrt()
    }

    pub fn sample_one(&self, rng: &mut StreamRng) -> (f64, f64) {
        match &self.kind {
            LatentKind::K2Threshold => {
                let l: f64 = rng.sample(StandardNormal);
                (l, k2_map(l))
            }
            LatentKind::K3SignThreshold => {
                let l: f64 = rng.sample(StandardNormal);
                (l, k3_map(l))
            }
            LatentKind::IndependentRademacher => {
                let l: f64 = rng.sample(StandardNormal);
                let nu = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (l, nu)
            }
            LatentKind::LinearlyCorrelated(rho) => {
                let l: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                (l, rho * l + (1.0 - rho * rho).sqrt() * z)
            }
            LatentKind::Custom(CustomLaw::Map { map, .. }) => {
                let l: f64 = rng.sample(StandardNormal);
                (l, map(l))
            }
            LatentKind::Custom(CustomLaw::Joint { sampler, .. }) => sampler(rng),
        }
    }
}

/// Draw `n` i.i.d. latent pairs.
pub fn sample_latents(dist: &LatentDistribution, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = stream(seed, "latents", 0);
    (0..n).map(|_| dist.sample_one(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moment {
    pub value: f64,
    /// Standard error when the moment is a Monte-Carlo estimate.
    pub std_err: Option<f64>,
}

/// `E[λᵏ ν]`.
pub fn joint_moment(dist: &LatentDistribution, k: u32) -> Result<Moment, LatentError> {
    if k > MAX_MOMENT_DEGREE {
        return Err(LatentError::DegreeTooHigh(k));
    }
    let rule = dist.rule();
    let value = rule.expect(|l, n| l.powi(k as i32) * n);
    if rule.exact {
        return Ok(Moment { value, std_err: None });
    }
    let m2 = rule.expect(|l, n| (l.powi(k as i32) * n).powi(2));
    let n = rule.nodes.len() as f64;
    let var = (m2 - value * value).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(Moment { value, std_err: Some((var / n).sqrt()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationExponent {
    Finite(u32),
    NoneUpTo(u32),
}

impl CorrelationExponent {
    pub fn finite(self) -> Option<u32> {
        match self {
            CorrelationExponent::Finite(k) => Some(k),
            CorrelationExponent::NoneUpTo(_) => None,
        }
    }
}

pub const DEFAULT_EXPONENT_TOL: f64 = 1e-6;
pub const DEFAULT_K_MAX: u32 = 8;

/// Smallest `k ≤ k_max` with `|E[λᵏν]| > tol`. For Monte-Carlo laws the
/// threshold is the larger of `tol` and five standard errors.
pub fn correlation_exponent(
    dist: &LatentDistribution,
    k_max: u32,
    tol: f64,
) -> Result<CorrelationExponent, LatentError> {
    if k_max > MAX_MOMENT_DEGREE {
        return Err(LatentError::DegreeTooHigh(k_max));
    }
    for k in 1..=k_max {
        let m = joint_moment(dist, k)?;
        let thr = match m.std_err {
            Some(se) => tol.max(5.0 * se),
            None => tol,
        };
        if m.value.abs() > thr {
            return Ok(CorrelationExponent::Finite(k));
        }
    }
    Ok(CorrelationExponent::NoneUpTo(k_max))
}

/// JSON-facing name of a latent law, e.g. `{"kind":"k2_threshold"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentSpec {
    K2Threshold,
    K3SignThreshold,
    IndependentRademacher,
    LinearlyCorrelated { rho: f64 },
}

impl LatentSpec {
    pub fn build(&self) -> Result<LatentDistribution, LatentError> {
        match self {
            LatentSpec::K2Threshold => Ok(LatentDistribution::k2_threshold()),
            LatentSpec::K3SignThreshold => Ok(LatentDistribution::k3_sign_threshold()),
            LatentSpec::IndependentRademacher => Ok(LatentDistribution::independent_rademacher()),
            LatentSpec::LinearlyCorrelated { rho } => LatentDistribution::linearly_correlated(*rho),
        }
    }
}
