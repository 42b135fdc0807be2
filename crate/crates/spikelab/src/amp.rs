//! Bayes-optimal output channel of the spiked cumulant model and the
//! two-spike AMP iteration built on it.
//!
//! Per latent node the output density `P*_out(h, Q)` is exp-quadratic in
//! `h`, so the Gaussian average over `h ~ N(ω, V)` is done in closed form
//! and only the sum over latent nodes is numerical (in the log domain).

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::datagen::SpikedDataset;
use crate::latents::LatentDistribution;
use crate::rng::stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("V is not positive definite (smallest eigenvalue {0:e})")]
    BadV(f64),
    #[error("V⁻¹ − M is not positive definite; the Gaussian average over h diverges")]
    Divergent,
    #[error("latent weights underflow for every node")]
    DegenerateDenominator,
    #[error("I + Q F₁ is singular")]
    SingularQ,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmpError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("iterate diverged at t = {t}: |W|²/d = {norm}")]
    Diverged { t: usize, norm: f64 },
    #[error("I + A_i is singular at t = {t}, coordinate {i}")]
    SingularUpdate { t: usize, i: usize },
    #[error("covariance of coordinate {i} lost positivity at t = {t} ({eig:e})")]
    NotPsd { t: usize, i: usize, eig: f64 },
}

/// Symmetric 2×2 stored as `(xx, xy, yy)`.
pub type Sym2 = [f64; 3];

pub fn sym_to_mat(s: &Sym2) -> Matrix2<f64> {
    Matrix2::new(s[0], s[1], s[1], s[2])
}

pub fn mat_to_sym(m: &Matrix2<f64>) -> Sym2 {
    [m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]]
}

pub fn sym_min_eig(s: &Sym2) -> f64 {
    let tr = 0.5 * (s[0] + s[2]);
    let dif = 0.5 * (s[0] - s[2]);
    tr - (dif * dif + s[1] * s[1]).sqrt()
}

/// Symmetric square root through the eigendecomposition; tolerates
/// singular PSD input.
pub fn sym_sqrt(m: &Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let d = e.eigenvalues.map(|x| x.max(0.0).sqrt());
    e.eigenvectors * Matrix2::from_diagonal(&d) * e.eigenvectors.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub omega: Vector2<f64>,
    pub v: Matrix2<f64>,
    pub q: Matrix2<f64>,
}

impl ChannelParams {
    pub fn new(omega: Vector2<f64>, v: Matrix2<f64>, q: Matrix2<f64>) -> Self {
        ChannelParams { omega, v, q }
    }

    pub fn at_identity(omega: Vector2<f64>, v: Matrix2<f64>) -> Self {
        Self::new(omega, v, Matrix2::identity())
    }
}

/// Latent nodes with `F₂ = (λ, ην)` and log weights.
#[derive(Debug, Clone)]
pub struct Channel {
    log_w: Vec<f64>,
    f2: Vec<Vector2<f64>>,
    /// `F₁ = diag(0, −s)`.
    shrink: f64,
}

/// Quantities that depend on `Q` only, shared by every `(ω, V)`.
#[derive(Debug, Clone)]
pub struct QContext {
    /// `B⁻ᵀF₂` per node.
    a: Vec<Vector2<f64>>,
    /// `log w − ½F₂ᵀB⁻¹QF₂` per node.
    c: Vec<f64>,
    /// Symmetric part of `Q⁻¹(I − B⁻¹)`.
    m: Matrix2<f64>,
    log_det_g: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelEval {
    pub log_z: f64,
    pub f_out: Vector2<f64>,
    pub df_out: Matrix2<f64>,
}

impl Channel {
    pub fn new(dist: &LatentDistribution) -> Self {
        let eta = dist.eta();
        let e = dist.e_nu2;
        let shrink = e / (1.0 + e + (1.0 + e).sqrt());
        let (log_w, f2) = dist
            .rule()
            .nodes
            .iter()
            .filter(|n| n.w > 0.0)
            .map(|n| (n.w.ln(), Vector2::new(n.lambda, eta * n.nu)))
            .unzip();
        Channel { log_w, f2, shrink }
    }

    pub fn len(&self) -> usize {
        self.f2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f2.is_empty()
    }

    pub fn context(&self, q: &Matrix2<f64>) -> Result<QContext, ChannelError> {
        let f1 = Matrix2::new(0.0, 0.0, 0.0, -self.shrink);
        let g = Matrix2::identity() + q * f1;
        let det_g = g.determinant();
        if det_g.abs() < 1e-300 {
            return Err(ChannelError::SingularQ);
        }
        let b = g * g;
        let b_inv = b.try_inverse().ok_or(ChannelError::SingularQ)?;
        let q_inv = q.try_inverse().ok_or(ChannelError::SingularQ)?;
        let m_raw = q_inv * (Matrix2::identity() - b_inv);
        let m = 0.5 * (m_raw + m_raw.transpose());
        let bt = b_inv.transpose();
        let bq = b_inv * q;
        let a = self.f2.iter().map(|f| bt * f).collect();
        let c = self.f2.iter().zip(&self.log_w).map(|(f, lw)| lw - 0.5 * f.dot(&(bq * f))).collect();
        Ok(QContext { a, c, m, log_det_g: det_g.abs().ln() })
    }

    /// `log Z*_out`, `f*_out = ∂_ω log Z*_out` and `∂_ω f*_out`.
    pub fn eval(
        &self,
        ctx: &QContext,
        omega: &Vector2<f64>,
        v: &Matrix2<f64>,
    ) -> Result<ChannelEval, ChannelError> {
        let (log_z, mean_b, cov_b, v_inv, a_inv) = self.moments(ctx, omega, v, true)?;
        let va = v_inv * a_inv;
        let f_out = va * mean_b - v_inv * omega;
        let df = va * (cov_b * a_inv * v_inv + v_inv) - v_inv;
        let df_out = 0.5 * (df + df.transpose());
        Ok(ChannelEval { log_z, f_out, df_out })
    }

    pub fn log_z(&self, ctx: &QContext, omega: &Vector2<f64>, v: &Matrix2<f64>) -> Result<f64, ChannelError> {
        Ok(self.moments(ctx, omega, v, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn moments(
        &self,
        ctx: &QContext,
        omega: &Vector2<f64>,
        v: &Matrix2<f64>,
        want_cov: bool,
    ) -> Result<(f64, Vector2<f64>, Matrix2<f64>, Matrix2<f64>, Matrix2<f64>), ChannelError> {
        let v_min = sym_min_eig(&mat_to_sym(v));
        if !(v_min > 1e-10) {
            return Err(ChannelError::BadV(v_min));
        }
        let v_inv = v.try_inverse().ok_or(ChannelError::BadV(v_min))?;
        let a = v_inv - ctx.m;
        if !(sym_min_eig(&mat_to_sym(&a)) > 0.0) {
            return Err(ChannelError::Divergent);
        }
        let a_inv = a.try_inverse().ok_or(ChannelError::Divergent)?;
        let a_inv = 0.5 * (a_inv + a_inv.transpose());
        let vw = v_inv * omega;
        let mut max_e = f64::NEG_INFINITY;
        let mut expo = Vec::with_capacity(self.len());
        for (an, cn) in ctx.a.iter().zip(&ctx.c) {
            let b = vw + an;
            let e = cn + 0.5 * b.dot(&(a_inv * b));
            max_e = max_e.max(e);
            expo.push(e);
        }
        if !max_e.is_finite() {
            return Err(ChannelError::DegenerateDenominator);
        }
        let mut s = 0.0;
        let mut sb = Vector2::zeros();
        let mut sbb = Matrix2::zeros();
        for (e, an) in expo.iter().zip(&ctx.a) {
            let p = (e - max_e).exp();
            let b = vw + an;
            s += p;
            sb += p * b;
            if want_cov {
                sbb += p * b * b.transpose();
            }
        }
        let mean_b = sb / s;
        let cov_b = if want_cov { sbb / s - mean_b * mean_b.transpose() } else { Matrix2::zeros() };
        let det_ivm = (Matrix2::identity() - v * ctx.m).determinant();
        let log_z = max_e + s.ln() - ctx.log_det_g - 0.5 * det_ivm.ln() - 0.5 * omega.dot(&vw);
        Ok((log_z, mean_b, cov_b, v_inv, a_inv))
    }

    pub fn z_out(&self, p: &ChannelParams) -> Result<f64, ChannelError> {
        Ok(self.log_z(&self.context(&p.q)?, &p.omega, &p.v)?.exp())
    }

    pub fn f_out(&self, p: &ChannelParams) -> Result<Vector2<f64>, ChannelError> {
        Ok(self.eval(&self.context(&p.q)?, &p.omega, &p.v)?.f_out)
    }

    pub fn df_out(&self, p: &ChannelParams) -> Result<Matrix2<f64>, ChannelError> {
        Ok(self.eval(&self.context(&p.q)?, &p.omega, &p.v)?.df_out)
    }

    pub fn f_q(&self, p: &ChannelParams) -> Result<Matrix2<f64>, ChannelError> {
        let ctx = FqContexts::new(self, &p.q, FQ_STEP)?;
        Ok(sym_to_mat(&ctx.f_q(self, &p.omega, &p.v)?))
    }
}

pub const FQ_STEP: f64 = 1e-5;

/// Perturbed contexts for the central differences of `log Z` in `Q`.
/// Off-diagonal entries move `Q₁₂` and `Q₂₁` together and halve the
/// slope, i.e. the symmetrized entrywise gradient.
pub struct FqContexts {
    plus: [QContext; 3],
    minus: [QContext; 3],
    step: f64,
}

impl FqContexts {
    pub fn new(ch: &Channel, q: &Matrix2<f64>, step: f64) -> Result<Self, ChannelError> {
        let dirs = [
            Matrix2::new(1.0, 0.0, 0.0, 0.0),
            Matrix2::new(0.0, 1.0, 1.0, 0.0),
            Matrix2::new(0.0, 0.0, 0.0, 1.0),
        ];
        let mk = |sign: f64| -> Result<[QContext; 3], ChannelError> {
            Ok([
                ch.context(&(q + sign * step * dirs[0]))?,
                ch.context(&(q + sign * step * dirs[1]))?,
                ch.context(&(q + sign * step * dirs[2]))?,
            ])
        };
        Ok(FqContexts { plus: mk(1.0)?, minus: mk(-1.0)?, step })
    }

    pub fn f_q(&self, ch: &Channel, omega: &Vector2<f64>, v: &Matrix2<f64>) -> Result<Sym2, ChannelError> {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let d = ch.log_z(&self.plus[k], omega, v)? - ch.log_z(&self.minus[k], omega, v)?;
            out[k] = d / (2.0 * self.step) * if k == 1 { 0.5 } else { 1.0 };
        }
        Ok(out)
    }
}

pub fn z_out_star(p: &ChannelParams, dist: &LatentDistribution) -> Result<f64, ChannelError> {
    Channel::new(dist).z_out(p)
}

pub fn f_out_star(p: &ChannelParams, dist: &LatentDistribution) -> Result<Vector2<f64>, ChannelError> {
    Channel::new(dist).f_out(p)
}

pub fn f_q_star(p: &ChannelParams, dist: &LatentDistribution) -> Result<Matrix2<f64>, ChannelError> {
    Channel::new(dist).f_q(p)
}

#[derive(Debug, Clone)]
pub struct AmpConfig {
    pub iters: usize,
    /// Entries of `Ŵ⁰` are `init_scale · N(0,1)`.
    pub init_scale: f64,
    /// Fraction of the previous `Ŵ, Ĉ` kept each step; 0 runs the plain
    /// algorithm.
    pub damping: f64,
    /// Stop early once the overlap matrix moves by less than this
    /// fraction of its Frobenius norm.
    pub tol: Option<f64>,
    pub seed: u64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig { iters: 50, init_scale: 1e-3, damping: 0.0, tol: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct AmpState {
    /// `Ŵ_i` per coordinate.
    pub w_hat: Vec<[f64; 2]>,
    pub c_hat: Vec<Sym2>,
    pub f: Vec<[f64; 2]>,
    pub iteration: usize,
}

/// Overlaps after one iteration. `q[(k, s)] = Ŵ_kᵀ s*/d` with columns
/// `(u*, v*)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AmpRecord {
    pub t: usize,
    pub q11: f64,
    pub q12: f64,
    pub q21: f64,
    pub q22: f64,
    pub theta_u: f64,
    pub theta_v: f64,
}

#[derive(Debug, Clone)]
pub struct AmpOutput {
    pub state: AmpState,
    pub trace: Vec<AmpRecord>,
}

fn record(t: usize, ds: &SpikedDataset, w: &[[f64; 2]]) -> AmpRecord {
    let d = ds.d as f64;
    let (us, vs) = (&ds.spikes.u_star, &ds.spikes.v_star);
    let mut q = [[0.0; 2]; 2];
    let mut nn = [0.0; 2];
    for i in 0..ds.d {
        for k in 0..2 {
            q[k][0] += w[i][k] * us[i];
            q[k][1] += w[i][k] * vs[i];
            nn[k] += w[i][k] * w[i][k];
        }
    }
    let cos = |k: usize, s: usize| {
        if nn[k] > 0.0 {
            q[k][s].abs() / (nn[k] * d).sqrt()
        } else {
            0.0
        }
    };
    AmpRecord {
        t,
        q11: q[0][0] / d,
        q12: q[0][1] / d,
        q21: q[1][0] / d,
        q22: q[1][1] / d,
        theta_u: cos(0, 0),
        theta_v: cos(1, 1),
    }
}

/// Per-row output of the channel step.
struct RowOut {
    f: [f64; 2],
    df: Sym2,
    fq: Sym2,
}

/// Column accumulators of one row chunk: `Σ X² ∂f` and `Σ X f`.
struct ColSums {
    s1: Vec<Sym2>,
    s2: Vec<[f64; 2]>,
}

const ROW_CHUNK: usize = 512;

/// Algorithm 1 with the literal per-coordinate `X²` sums.
pub fn amp_run(ds: &SpikedDataset, dist: &LatentDistribution, cfg: &AmpConfig) -> Result<AmpOutput, AmpError> {
    let (n, d) = (ds.n, ds.d);
    let df = d as f64;
    let sqd = df.sqrt();
    let ch = Channel::new(dist);
    let mut rng = stream(cfg.seed, "amp-init", 0);
    let mut w_hat: Vec<[f64; 2]> = (0..d)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [cfg.init_scale * a, cfg.init_scale * b]
        })
        .collect();
    let mut c_hat: Vec<Sym2> = vec![[1.0, 0.0, 1.0]; d];
    let mut f_prev: Vec<[f64; 2]> = vec![[0.0; 2]; n];
    let mut trace = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        // Q^t
        let mut qs = [0.0; 3];
        for (w, c) in w_hat.iter().zip(&c_hat) {
            qs[0] += c[0] + w[0] * w[0];
            qs[1] += c[1] + w[0] * w[1];
            qs[2] += c[2] + w[1] * w[1];
        }
        let q_mat = sym_to_mat(&qs.map(|x| x / df));
        let ctx = ch.context(&q_mat)?;
        let fq_ctx = FqContexts::new(&ch, &q_mat, FQ_STEP)?;

        // channel step over samples
        let rows: Vec<RowOut> = (0..n)
            .into_par_iter()
            .map(|mu| -> Result<RowOut, ChannelError> {
                let x = ds.row(mu);
                let mut v = [0.0; 3];
                let mut om = [0.0; 2];
                for i in 0..d {
                    let xi = x[i] as f64;
                    let x2 = xi * xi;
                    let c = &c_hat[i];
                    v[0] += x2 * c[0];
                    v[1] += x2 * c[1];
                    v[2] += x2 * c[2];
                    om[0] += xi * w_hat[i][0];
                    om[1] += xi * w_hat[i][1];
                }
                let v = sym_to_mat(&v.map(|s| s / df));
                let fp = Vector2::from(f_prev[mu]);
                let omega = Vector2::new(om[0], om[1]) / sqd - v * fp;
                let ev = ch.eval(&ctx, &omega, &v)?;
                let fq = fq_ctx.f_q(&ch, &omega, &v)?;
                Ok(RowOut { f: [ev.f_out[0], ev.f_out[1]], df: mat_to_sym(&ev.df_out), fq })
            })
            .collect::<Result<_, _>>()?;

        // prior step: column sums over row chunks, reduced in order
        let partial: Vec<ColSums> = rows
            .par_chunks(ROW_CHUNK)
            .enumerate()
            .map(|(k, chunk)| {
                let mut acc = ColSums { s1: vec![[0.0; 3]; d], s2: vec![[0.0; 2]; d] };
                for (j, r) in chunk.iter().enumerate() {
                    let x = ds.row(k * ROW_CHUNK + j);
                    for i in 0..d {
                        let xi = x[i] as f64;
                        let x2 = xi * xi;
                        let s1 = &mut acc.s1[i];
                        s1[0] += x2 * r.df[0];
                        s1[1] += x2 * r.df[1];
                        s1[2] += x2 * r.df[2];
                        acc.s2[i][0] += xi * r.f[0];
                        acc.s2[i][1] += xi * r.f[1];
                    }
                }
                acc
            })
            .collect();
        let mut s1 = vec![[0.0; 3]; d];
        let mut s2 = vec![[0.0; 2]; d];
        for p in &partial {
            for i in 0..d {
                for k in 0..3 {
                    s1[i][k] += p.s1[i][k];
                }
                s2[i][0] += p.s2[i][0];
                s2[i][1] += p.s2[i][1];
            }
        }
        let mut fq_sum = [0.0; 3];
        for r in &rows {
            for k in 0..3 {
                fq_sum[k] += r.fq[k];
            }
        }
        let fq_term = sym_to_mat(&fq_sum) * (2.0 / df);

        for i in 0..d {
            let s1m = sym_to_mat(&s1[i]) / df;
            let a = -s1m - fq_term;
            let w = Vector2::from(w_hat[i]);
            let b = Vector2::from(s2[i]) / sqd - s1m * w;
            let inv = (Matrix2::identity() + a)
                .try_inverse()
                .ok_or(AmpError::SingularUpdate { t, i })?;
            let inv = 0.5 * (inv + inv.transpose());
            let new_w = inv * b;
            let new_c = mat_to_sym(&inv);
            let eig = sym_min_eig(&new_c);
            if eig < -1e-10 {
                return Err(AmpError::NotPsd { t, i, eig });
            }
            let g = cfg.damping;
            w_hat[i] = [g * w[0] + (1.0 - g) * new_w[0], g * w[1] + (1.0 - g) * new_w[1]];
            let c_old = c_hat[i];
            c_hat[i] = [0, 1, 2].map(|k| g * c_old[k] + (1.0 - g) * new_c[k]);
        }
        f_prev = rows.iter().map(|r| r.f).collect();

        let norm = w_hat.iter().map(|w| w[0] * w[0] + w[1] * w[1]).sum::<f64>() / df;
        if !(norm <= 1e3) {
            return Err(AmpError::Diverged { t, norm });
        }
        let rec = record(t + 1, ds, &w_hat);
        let done = match (cfg.tol, trace.last()) {
            (Some(tol), Some(prev)) => {
                let p: &AmpRecord = prev;
                let step = [rec.q11 - p.q11, rec.q12 - p.q12, rec.q21 - p.q21, rec.q22 - p.q22];
                let size = [rec.q11, rec.q12, rec.q21, rec.q22];
                let fro = |v: &[f64; 4]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                fro(&step) < tol * fro(&size)
            }
            _ => false,
        };
        trace.push(rec);
        if done {
            break;
        }
    }
    let iteration = trace.len();
    Ok(AmpOutput { state: AmpState { w_hat, c_hat, f: f_prev, iteration }, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, make_spikes};
    use crate::latents::{k2_threshold, CustomLaw, LatentKind};
    use crate::quad::normal_cdf;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn k2() -> LatentDistribution {
        LatentDistribution::k2_threshold()
    }

    fn lambda_only() -> LatentDistribution {
        LatentDistribution::new(LatentKind::Custom(CustomLaw::Map {
            name: "lambda-only".into(),
            map: Arc::new(|_| 0.0),
            breakpoints: vec![],
        }))
        .unwrap()
    }

    fn spd(a: f64, b: f64, c: f64) -> Matrix2<f64> {
        // a, c in (0.2, 1.2), |b| small enough to stay positive definite
        Matrix2::new(a, b, b, c)
    }

    /// Closed-form `Z*_out(ω, V, I)` for the K2 law: for each of the two ν
    /// values the λ-integrand is a Gaussian restricted to an interval.
    fn k2_closed_form(omega: Vector2<f64>, v: Matrix2<f64>) -> f64 {
        let e = 2.0f64;
        let eta = 1.0 / (1.0 + e).sqrt();
        let t = k2_threshold();
        let v_inv = v.try_inverse().unwrap();
        let m = Matrix2::new(0.0, 0.0, 0.0, -e);
        let a_inv = (v_inv - m).try_inverse().unwrap();
        let pref = (1.0 / eta) / (Matrix2::identity() - v * m).determinant().sqrt();
        let mut z = 0.0;
        for (nu, inner) in [(-(2f64.sqrt()), true), (2f64.sqrt(), false)] {
            let b0 = v_inv * omega + Vector2::new(0.0, nu / eta);
            let p = a_inv[(0, 0)];
            let bb = (a_inv * b0)[0];
            let a = 2.0 - p;
            let mean = bb / a;
            let sd = a.sqrt().recip();
            let mass = if inner {
                normal_cdf((t - mean) / sd) - normal_cdf((-t - mean) / sd)
            } else {
                1.0 - normal_cdf((t - mean) / sd) + normal_cdf((-t - mean) / sd)
            };
            let expo = 0.5 * b0.dot(&(a_inv * b0)) - 0.5 * nu * nu + bb * bb / (2.0 * a)
                - 0.5 * omega.dot(&(v_inv * omega));
            z += mass * expo.exp() / a.sqrt();
        }
        pref * z
    }

    #[test]
    fn normalized_at_uninformative_point() {
        let p = ChannelParams::at_identity(Vector2::zeros(), Matrix2::identity());
        for dist in [k2(), LatentDistribution::k3_sign_threshold(), LatentDistribution::independent_rademacher()] {
            assert!((z_out_star(&p, &dist).unwrap() - 1.0).abs() < 1e-12);
            assert!(f_out_star(&p, &dist).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn k2_matches_closed_form_on_grid() {
        let ch = Channel::new(&k2());
        let ctx = ch.context(&Matrix2::identity()).unwrap();
        let mut rng = stream(3, "grid", 0);
        for _ in 0..100 {
            let u = |r: &mut crate::rng::StreamRng| -> f64 { rand::Rng::random::<f64>(r) };
            let om = Vector2::new(4.0 * u(&mut rng) - 2.0, 4.0 * u(&mut rng) - 2.0);
            let v = spd(0.2 + u(&mut rng), 0.3 * (u(&mut rng) - 0.5), 0.2 + u(&mut rng));
            let got = ch.log_z(&ctx, &om, &v).unwrap().exp();
            let want = k2_closed_form(om, v);
            assert!((got - want).abs() < 1e-8 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn lambda_only_reduces_to_one_spike() {
        // E_λ e^{λh−λ²/2} = e^{h²/4}/√2, then the Gaussian average over h₁
        let dist = lambda_only();
        for (w1, v11) in [(0.0, 1.0), (0.7, 0.5), (-1.3, 0.9)] {
            let p = ChannelParams::at_identity(Vector2::new(w1, 0.4), Matrix2::new(v11, 0.1, 0.1, 0.8));
            let want = (1.0 - v11 / 2.0).powf(-0.5) * (w1 * w1 / (4.0 - 2.0 * v11)).exp() / 2f64.sqrt();
            assert!((z_out_star(&p, &dist).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_at_origin_matches_moments() {
        for dist in [k2(), LatentDistribution::linearly_correlated(0.6).unwrap()] {
            let p = ChannelParams::at_identity(Vector2::zeros(), Matrix2::identity());
            let j = Channel::new(&dist).df_out(&p).unwrap();
            let eta = dist.eta();
            let want = Matrix2::new(
                dist.e_lambda2,
                eta * dist.e_lambda_nu,
                eta * dist.e_lambda_nu,
                0.0,
            );
            assert!((j - want).abs().max() < 1e-9, "{j} vs {want}");
        }
        let j = Channel::new(&k2()).df_out(&ChannelParams::at_identity(Vector2::zeros(), Matrix2::identity())).unwrap();
        assert!((j - Matrix2::new(1.0, 0.0, 0.0, 0.0)).abs().max() < 1e-9);
    }

    #[test]
    fn df_out_matches_finite_differences() {
        let ch = Channel::new(&k2());
        let ctx = ch.context(&Matrix2::new(1.0, 0.05, 0.05, 0.9)).unwrap();
        let v = spd(0.6, 0.1, 0.7);
        let om = Vector2::new(0.3, -0.8);
        let ev = ch.eval(&ctx, &om, &v).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut e = Vector2::zeros();
            e[k] = h;
            let fp = ch.eval(&ctx, &(om + e), &v).unwrap().f_out;
            let fm = ch.eval(&ctx, &(om - e), &v).unwrap().f_out;
            let col = (fp - fm) / (2.0 * h);
            assert!((col - ev.df_out.column(k)).abs().max() < 1e-7);
        }
    }

    #[test]
    fn f_out_is_gradient_of_log_z() {
        for dist in [k2(), LatentDistribution::k3_sign_threshold()] {
            let ch = Channel::new(&dist);
            let mut rng = stream(11, "fd", 0);
            for _ in 0..20 {
                let u = |r: &mut crate::rng::StreamRng| -> f64 { rand::Rng::random::<f64>(r) };
                let om = Vector2::new(3.0 * u(&mut rng) - 1.5, 3.0 * u(&mut rng) - 1.5);
                let v = spd(0.3 + 0.7 * u(&mut rng), 0.2 * (u(&mut rng) - 0.5), 0.3 + 0.7 * u(&mut rng));
                let ctx = ch.context(&Matrix2::identity()).unwrap();
                let f = ch.eval(&ctx, &om, &v).unwrap().f_out;
                let h = 1e-5;
                for k in 0..2 {
                    let mut e = Vector2::zeros();
                    e[k] = h;
                    let g = (ch.log_z(&ctx, &(om + e), &v).unwrap() - ch.log_z(&ctx, &(om - e), &v).unwrap())
                        / (2.0 * h);
                    assert!((g - f[k]).abs() <= 1e-5 * f[k].abs().max(1e-2), "{g} vs {}", f[k]);
                }
            }
        }
    }

    #[test]
    fn f_q_vanishes_without_signal() {
        let null = LatentDistribution::null();
        let p = ChannelParams::at_identity(Vector2::zeros(), Matrix2::identity());
        assert!(f_q_star(&p, &null).unwrap().abs().max() < 1e-12);
    }

    #[test]
    fn f_q_matches_richardson_oracle() {
        let ch = Channel::new(&k2());
        let om = Vector2::new(0.4, -0.6);
        let v = spd(0.7, -0.1, 0.8);
        let q = Matrix2::identity();
        let p = ChannelParams::new(om, v, q);
        let got = ch.f_q(&p).unwrap();
        assert!((got - got.transpose()).abs().max() < 1e-10);
        // fourth-order central differences
        let lz = |dq: Matrix2<f64>| ch.log_z(&ch.context(&(q + dq)).unwrap(), &om, &v).unwrap();
        let h = 1e-3;
        let dirs = [
            (Matrix2::new(1.0, 0.0, 0.0, 0.0), 1.0, (0, 0)),
            (Matrix2::new(0.0, 1.0, 1.0, 0.0), 0.5, (0, 1)),
            (Matrix2::new(0.0, 0.0, 0.0, 1.0), 1.0, (1, 1)),
        ];
        for (e, scale, idx) in dirs {
            let d = (8.0 * (lz(h * e) - lz(-h * e)) - (lz(2.0 * h * e) - lz(-2.0 * h * e))) / (12.0 * h);
            assert!((d * scale - got[idx]).abs() < 1e-6, "{idx:?}: {} vs {}", d * scale, got[idx]);
        }
    }

    #[test]
    fn below_threshold_amp_stays_trivial() {
        let dist = k2();
        let d = 2000;
        let ds = generate(&dist, Arc::new(make_spikes(d, 5).unwrap()), 1000, 5);
        let out = amp_run(&ds, &dist, &AmpConfig { iters: 15, ..Default::default() }).unwrap();
        let last = out.trace.last().unwrap();
        let bound = 5.0 / (d as f64).sqrt();
        for q in [last.q11, last.q12, last.q21, last.q22] {
            assert!(q.abs() < bound, "{last:?}");
        }
        for c in &out.state.c_hat {
            assert!(sym_min_eig(c) > -1e-10);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let dist = k2();
        let ds = generate(&dist, Arc::new(make_spikes(200, 9).unwrap()), 600, 9);
        let perm: Vec<usize> = (0..ds.n).rev().collect();
        let other = ds.permuted(&perm);
        let cfg = AmpConfig { iters: 5, ..Default::default() };
        let a = amp_run(&ds, &dist, &cfg).unwrap();
        let b = amp_run(&other, &dist, &cfg).unwrap();
        let (x, y) = (a.trace.last().unwrap(), b.trace.last().unwrap());
        for (p, q) in [(x.q11, y.q11), (x.q12, y.q12), (x.q21, y.q21), (x.q22, y.q22)] {
            assert!((p - q).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn df_out_is_symmetric(w1 in -2.0f64..2.0, w2 in -2.0f64..2.0, a in 0.3f64..1.0, c in 0.3f64..1.0) {
            let ch = Channel::new(&k2());
            let p = ChannelParams::at_identity(Vector2::new(w1, w2), spd(a, 0.05, c));
            let j = ch.df_out(&p).unwrap();
            prop_assert!((j - j.transpose()).abs().max() < 1e-12);
        }
    }
}
