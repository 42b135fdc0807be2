//! Reduced two-dimensional spherical gradient flow on the truncated
//! Hermite expansion of the population loss.
//!
//! The loss series is `L̃(m_u, m_v) = Σ a_{i,j} m_u^i m_v^j` with
//! `a_{i,j} = c^L_{i,j}(c_k^{σ²} − 2c_k^{zσ}) / (i! j!)`, `k = i + j`.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::hermite::{factorial, ActivationCoeffs, FlowConstants, LikelihoodCoeffs, ZERO_TOL};
use crate::rng::stream;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("trajectory left the unit disc at t = {t} (reduce dt)")]
    StepUnstable { t: f64 },
    #[error("initial point ({0}, {1}) is not strictly inside the unit disc")]
    BadInit(f64, f64),
    #[error("truncation degree must be at least 3, got {0}")]
    DegreeTooLow(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    /// `coeffs[i][j] = a_{i,j}` for `i + j ≤ k_trunc`.
    pub coeffs: Vec<Vec<f64>>,
    pub k_trunc: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub t_max: f64,
    /// Threshold on the change of `m_v` at exit; derived from the
    /// coefficients when `None`.
    pub epsilon2: Option<f64>,
}

pub const DEFAULT_K_TRUNC: usize = 4;
pub const EPSILON2_FLOOR: f64 = 1e-3;
const ROUNDOFF: f64 = 1e-12;

impl FlowSpec {
    fn with_table(coeffs: Vec<Vec<f64>>, k_trunc: usize) -> Result<Self, FlowError> {
        if k_trunc < 3 {
            return Err(FlowError::DegreeTooLow(k_trunc));
        }
        Ok(FlowSpec { coeffs, k_trunc, epsilon: 0.1, dt: 1e-2, t_max: 1e3, epsilon2: None })
    }

    fn empty(k_trunc: usize) -> Vec<Vec<f64>> {
        (0..=k_trunc).map(|i| vec![0.0; k_trunc + 1 - i]).collect()
    }

    /// Series table from activation and likelihood coefficients.
    pub fn from_coeffs(
        act: &ActivationCoeffs,
        lik: &LikelihoodCoeffs,
        k_trunc: usize,
    ) -> Result<Self, FlowError> {
        let k_trunc = k_trunc.min(lik.k_max).min(act.c_sigma2.len() - 1);
        let mut t = Self::empty(k_trunc);
        for (i, row) in t.iter_mut().enumerate() {
            for (j, a) in row.iter_mut().enumerate() {
                let k = i + j;
                if k >= 1 {
                    let v = lik.get(i, j) * act.diff(k) / (factorial(i) * factorial(j));
                    // quadrature leaves ~1e-16 where the coefficient vanishes exactly
                    *a = if v.abs() < ROUNDOFF { 0.0 } else { v };
                }
            }
        }
        Self::with_table(t, k_trunc)
    }

    /// Series holding only the four named products:
    /// `L̃ = C₂m_u²/2 + C₃m_u²m_v/2 + C₍₃,₁₎m_u³m_v/6 + C₍₂,₂₎m_u²m_v²/4`.
    pub fn from_constants(c2: f64, c3: f64, c31: f64, c22: f64) -> Self {
        let mut t = Self::empty(DEFAULT_K_TRUNC);
        t[2][0] = c2 / 2.0;
        t[2][1] = c3 / 2.0;
        t[3][1] = c31 / 6.0;
        t[2][2] = c22 / 4.0;
        Self::with_table(t, DEFAULT_K_TRUNC).expect("degree 4")
    }

    pub fn from_flow_constants(c: &FlowConstants) -> Self {
        Self::from_constants(c.c2, c.c3, c.c31, c.c22)
    }

    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        self.coeffs.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
    }

    /// `C₂ = 2a_{2,0}`, the linear growth rate is `−C₂`.
    pub fn c2(&self) -> f64 {
        2.0 * self.coeff(2, 0)
    }

    /// Truncated loss without the constant term.
    pub fn loss(&self, mu: f64, mv: f64) -> f64 {
        let mut s = 0.0;
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                if *a != 0.0 {
                    s += a * mu.powi(i as i32) * mv.powi(j as i32);
                }
            }
        }
        s
    }

    pub fn grad(&self, mu: f64, mv: f64) -> (f64, f64) {
        let (mut gu, mut gv) = (0.0, 0.0);
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                if i > 0 {
                    gu += a * i as f64 * mu.powi(i as i32 - 1) * mv.powi(j as i32);
                }
                if j > 0 {
                    gv += a * j as f64 * mu.powi(i as i32) * mv.powi(j as i32 - 1);
                }
            }
        }
        (gu, gv)
    }

    /// Predicted change of `m_v` while `m_u` grows from 0 to `ε`, from the
    /// lowest-degree `m_u^p m_v` term.
    pub fn predicted_v_drive(&self) -> Option<f64> {
        let c2 = self.c2();
        if c2 >= 0.0 {
            return None;
        }
        (2..self.k_trunc).find_map(|p| {
            let a = self.coeff(p, 1);
            (a.abs() > ZERO_TOL).then(|| a.abs() * self.epsilon.powi(p as i32) / (p as f64 * c2.abs()))
        })
    }

    /// Exit threshold on `|m_v(T) − m_v(0)|`: two thirds of the predicted
    /// drive, which equals `ε²|C₃|/(6|C₂|)` when `C₃ ≠ 0`.
    pub fn epsilon2(&self) -> f64 {
        self.epsilon2
            .unwrap_or_else(|| self.predicted_v_drive().map_or(EPSILON2_FLOOR, |d| 2.0 * d / 3.0))
    }

    /// Same series for the law with `ν ↦ −ν`.
    pub fn flip_v(&self) -> Self {
        let mut s = self.clone();
        for row in s.coeffs.iter_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                if j % 2 == 1 {
                    *a = -*a;
                }
            }
        }
        s
    }
}

/// Projected flow `ṁ = −(Id − w̃w̃ᵀ)∇L̃` in overlap coordinates.
pub fn reduced_rhs(spec: &FlowSpec, mu: f64, mv: f64) -> (f64, f64) {
    let (gu, gv) = spec.grad(mu, mv);
    (
        -(1.0 - mu * mu) * gu + mu * mv * gv,
        -(1.0 - mv * mv) * gv + mu * mv * gu,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitKind {
    UOnly,
    UAndV,
    None,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub m_u: Vec<f64>,
    pub m_v: Vec<f64>,
    pub exit_time: Option<f64>,
    pub exit_kind: ExitKind,
}

fn rk4_step(spec: &FlowSpec, mu: f64, mv: f64, h: f64) -> (f64, f64) {
    let f = |a: f64, b: f64| reduced_rhs(spec, a, b);
    let k1 = f(mu, mv);
    let k2 = f(mu + 0.5 * h * k1.0, mv + 0.5 * h * k1.1);
    let k3 = f(mu + 0.5 * h * k2.0, mv + 0.5 * h * k2.1);
    let k4 = f(mu + h * k3.0, mv + h * k3.1);
    (
        mu + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        mv + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

/// RK4 until `|m_u| ≥ ε` or `t_max`.
pub fn integrate(spec: &FlowSpec, mu0: f64, mv0: f64) -> Result<FlowTrajectory, FlowError> {
    if mu0 * mu0 + mv0 * mv0 >= 1.0 {
        return Err(FlowError::BadInit(mu0, mv0));
    }
    let steps = (spec.t_max / spec.dt).ceil() as usize;
    let mut tr = FlowTrajectory {
        times: vec![0.0],
        m_u: vec![mu0],
        m_v: vec![mv0],
        exit_time: None,
        exit_kind: ExitKind::None,
    };
    let (mut mu, mut mv) = (mu0, mv0);
    for s in 1..=steps {
        (mu, mv) = rk4_step(spec, mu, mv, spec.dt);
        let t = s as f64 * spec.dt;
        if !(mu * mu + mv * mv <= 1.0 + 1e-6) {
            return Err(FlowError::StepUnstable { t });
        }
        tr.times.push(t);
        tr.m_u.push(mu);
        tr.m_v.push(mv);
        if mu.abs() >= spec.epsilon {
            tr.exit_time = Some(t);
            tr.exit_kind = if (mv - mv0).abs() >= spec.epsilon2() {
                ExitKind::UAndV
            } else {
                ExitKind::UOnly
            };
            break;
        }
    }
    Ok(tr)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitScaling {
    pub dims: Vec<usize>,
    /// Mean exit time per dimension over the runs that exited.
    pub mean_times: Vec<f64>,
    /// Runs without exit per dimension.
    pub censored: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line `y = a + b x`, returning `(b, a, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// Mean exit time against `ln d`, with inits `m_u, m_v ~ N(0, 1/d)`.
pub fn exit_time_scaling(
    spec: &FlowSpec,
    dims: &[usize],
    seeds: usize,
    seed: u64,
) -> Result<ExitScaling, FlowError> {
    let mut mean_times = Vec::with_capacity(dims.len());
    let mut censored = Vec::with_capacity(dims.len());
    for &d in dims {
        let sd = (d as f64).sqrt().recip();
        let (mut sum, mut hits, mut miss) = (0.0, 0usize, 0usize);
        for s in 0..seeds {
            let mut rng = stream(seed, &format!("flow-init-{d}"), s as u64);
            let mu0: f64 = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let mv0: f64 = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            match integrate(spec, mu0, mv0)?.exit_time {
                Some(t) => {
                    sum += t;
                    hits += 1;
                }
                None => miss += 1,
            }
        }
        mean_times.push(if hits > 0 { sum / hits as f64 } else { f64::NAN });
        censored.push(miss);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = dims
        .iter()
        .zip(&mean_times)
        .filter(|(_, t)| t.is_finite())
        .map(|(&d, &t)| ((d as f64).ln(), t))
        .unzip();
    let (slope, intercept, r2) =
        if x.len() >= 2 { linear_fit(&x, &y) } else { (f64::NAN, f64::NAN, f64::NAN) };
    Ok(ExitScaling { dims: dims.to_vec(), mean_times, censored, slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::{activation_coeffs, likelihood_coeffs, Activation};
    use crate::latents::LatentDistribution;
    use proptest::prelude::*;

    fn real_spec(act: Activation) -> FlowSpec {
        let a = activation_coeffs(&act, 8).unwrap();
        let l = likelihood_coeffs(&LatentDistribution::k2_threshold(), 8).unwrap();
        FlowSpec::from_coeffs(&a, &l, 4).unwrap()
    }

    #[test]
    fn origin_is_fixed() {
        let s = real_spec(Activation::relu());
        assert_eq!(reduced_rhs(&s, 0.0, 0.0), (0.0, 0.0));
        let s = FlowSpec::from_constants(-1.0, -0.5, 0.3, 0.2);
        assert_eq!(reduced_rhs(&s, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn linearized_rates_follow_the_series() {
        // L̃ ∋ C₂m_u²/2 gives ṁ_u ≈ −C₂m_u; C₃m_u²m_v/2 gives ṁ_v ≈ −C₃m_u²/2.
        let s = FlowSpec::from_constants(-0.8, -0.6, 0.0, 0.0);
        let m = 1e-4;
        let (du, _) = reduced_rhs(&s, m, 0.0);
        assert!((du / m - 0.8).abs() < 1e-6);
        let (_, dv) = reduced_rhs(&s, m, 0.0);
        assert!((dv / (m * m) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn degree_guard() {
        let t = FlowSpec::empty(2);
        assert_eq!(FlowSpec::with_table(t, 2), Err(FlowError::DegreeTooLow(2)));
    }

    #[test]
    fn relu_k2_recovers_both() {
        let s = real_spec(Activation::relu());
        let tr = integrate(&s, 1e-2, 1e-2).unwrap();
        assert_eq!(tr.exit_kind, ExitKind::UAndV, "{:?}", tr.exit_time);
    }

    #[test]
    fn quadratic_never_exits() {
        let s = real_spec(Activation::new(crate::hermite::ActivationKind::Quadratic));
        let tr = integrate(&s, 1e-2, 1e-2).unwrap();
        assert_eq!(tr.exit_kind, ExitKind::None);
        assert!(tr.m_u.last().unwrap().abs() <= 1e-2);
    }

    #[test]
    fn fail1_constants_keep_v_small() {
        let s = FlowSpec::from_constants(-1.0, 0.0, 0.0, 0.5);
        let tr = integrate(&s, 1e-2, 1e-2).unwrap();
        assert_eq!(tr.exit_kind, ExitKind::UOnly);
        assert!(tr.m_v.last().unwrap().abs() <= 2e-2);
    }

    #[test]
    fn energy_descends_and_mu_grows() {
        let s = FlowSpec::from_constants(-1.0, -0.7, 0.4, 0.3);
        let tr = integrate(&s, 3e-3, -2e-3).unwrap();
        for k in 1..tr.times.len() {
            let l0 = s.loss(tr.m_u[k - 1], tr.m_v[k - 1]);
            let l1 = s.loss(tr.m_u[k], tr.m_v[k]);
            assert!(l1 <= l0 + 1e-8);
            assert!(tr.m_u[k] >= tr.m_u[k - 1]);
        }
    }

    #[test]
    fn exit_time_grows_like_log_d() {
        let s = FlowSpec::from_constants(-1.0, -1.0, 0.0, 0.0);
        let fit = exit_time_scaling(&s, &[100, 1000, 10_000, 100_000], 40, 7).unwrap();
        assert!(fit.r2 >= 0.98, "{fit:?}");
        // linearization: T ≈ ln(ε/|m_u(0)|)/|C₂| so dT/d ln d = 1/(2|C₂|)
        assert!((fit.slope - 0.5).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn fail2_is_censored() {
        let s = FlowSpec::from_constants(0.5, -1.0, 0.0, 0.0);
        let fit = exit_time_scaling(&s, &[100, 10_000], 5, 1).unwrap();
        assert_eq!(fit.censored, vec![5, 5]);
    }

    proptest! {
        #[test]
        fn v_flip_mirrors_trajectories(mu in 1e-3f64..0.05, mv in -0.05f64..0.05,
                                        c3 in -1.0f64..1.0, c31 in -1.0f64..1.0) {
            let mut s = FlowSpec::from_constants(-1.0, c3, c31, 0.2);
            s.t_max = 5.0;
            let f = s.flip_v();
            let a = integrate(&s, mu, mv).unwrap();
            let b = integrate(&f, mu, -mv).unwrap();
            prop_assert_eq!(a.m_v.len(), b.m_v.len());
            for (x, y) in a.m_v.iter().zip(&b.m_v) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
