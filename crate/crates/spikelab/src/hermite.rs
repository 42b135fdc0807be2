//! Hermite machinery: activations, their coefficients, likelihood-ratio
//! coefficients, the triple-Hermite identity and the flow classifier.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latents::LatentDistribution;
use crate::quad::{normal_cdf, normal_pdf, NormalRule};

pub const ZERO_TOL: f64 = 1e-8;
pub const MAX_COEFF_DEGREE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HermiteError {
    #[error("activation {0} is not square-integrable enough for the Hermite expansion")]
    NonIntegrable(String),
    #[error("degree {0} exceeds the supported bound")]
    DegreeTooHigh(usize),
    #[error("unknown activation '{0}'")]
    UnknownActivation(String),
}

/// Probabilists' Hermite polynomial by the three-term recurrence.
pub fn he(k: usize, z: f64) -> f64 {
    let mut p0 = 1.0;
    if k == 0 {
        return p0;
    }
    let mut p1 = z;
    for j in 1..k {
        let p2 = z * p1 - j as f64 * p0;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// `[He_0(z), …, He_k(z)]`.
pub fn he_all(k: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(1.0);
    if k >= 1 {
        out.push(z);
    }
    for j in 1..k {
        let next = z * out[j] - j as f64 * out[j - 1];
        out.push(next);
    }
    out
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Linear,
    Quadratic,
    Relu,
    Tanh,
    Elu,
    Swish,
    Sigmoid,
    Gelu,
    He2PlusHe1,
    Custom,
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
struct CustomActivation {
    name: String,
    f: ScalarFn,
    df: ScalarFn,
    kinks: Vec<f64>,
    saturating: bool,
}

/// A scalar nonlinearity, optionally rescaled as `σ_r(z) = r·σ(r·z)`.
#[derive(Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    pub radius: f64,
    custom: Option<CustomActivation>,
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Activation({}, r={})", self.name(), self.radius)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        assert!(kind != ActivationKind::Custom, "use Activation::custom");
        Activation { kind, radius: 1.0, custom: None }
    }

    pub fn custom(
        name: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        kinks: &[f64],
        saturating: bool,
    ) -> Self {
        Activation {
            kind: ActivationKind::Custom,
            radius: 1.0,
            custom: Some(CustomActivation {
                name: name.into(),
                f: Arc::new(f),
                df: Arc::new(df),
                kinks: kinks.to_vec(),
                saturating,
            }),
        }
    }

    pub fn with_radius(mut self, r: f64) -> Self {
        assert!(r > 0.0);
        self.radius = r;
        self
    }

    pub fn linear() -> Self {
        Self::new(ActivationKind::Linear)
    }
    pub fn relu() -> Self {
        Self::new(ActivationKind::Relu)
    }
    pub fn tanh() -> Self {
        Self::new(ActivationKind::Tanh)
    }

    /// The eight activations of the classification table, in column order.
    pub fn table_columns() -> Vec<Activation> {
        use ActivationKind::*;
        [Linear, Quadratic, Relu, Tanh, Elu, Swish, Sigmoid, Gelu]
            .into_iter()
            .map(Activation::new)
            .collect()
    }

    pub fn name(&self) -> String {
        match self.kind {
            ActivationKind::Linear => "linear".into(),
            ActivationKind::Quadratic => "quadratic".into(),
            ActivationKind::Relu => "relu".into(),
            ActivationKind::Tanh => "tanh".into(),
            ActivationKind::Elu => "elu".into(),
            ActivationKind::Swish => "swish".into(),
            ActivationKind::Sigmoid => "sigmoid".into(),
            ActivationKind::Gelu => "gelu".into(),
            ActivationKind::He2PlusHe1 => "he2_plus_he1".into(),
            ActivationKind::Custom => self.custom.as_ref().unwrap().name.clone(),
        }
    }

    fn base(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Linear => z,
            ActivationKind::Quadratic => z * z,
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            ActivationKind::Swish => z * sigmoid(z),
            ActivationKind::Sigmoid => sigmoid(z),
            ActivationKind::Gelu => z * normal_cdf(z),
            ActivationKind::He2PlusHe1 => z * z + z - 1.0,
            ActivationKind::Custom => (self.custom.as_ref().unwrap().f)(z),
        }
    }

    fn base_deriv(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Linear => 1.0,
            ActivationKind::Quadratic => 2.0 * z,
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => 1.0 - z.tanh().powi(2),
            ActivationKind::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            ActivationKind::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActivationKind::Gelu => normal_cdf(z) + z * normal_pdf(z),
            ActivationKind::He2PlusHe1 => 2.0 * z + 1.0,
            ActivationKind::Custom => (self.custom.as_ref().unwrap().df)(z),
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        if self.radius == 1.0 {
            self.base(z)
        } else {
            self.radius * self.base(self.radius * z)
        }
    }

    /// Derivative, taking the right-continuous a.e. value at kinks (0 for ReLU at 0).
    pub fn deriv(&self, z: f64) -> f64 {
        if self.radius == 1.0 {
            self.base_deriv(z)
        } else {
            self.radius * self.radius * self.base_deriv(self.radius * z)
        }
    }

    /// Points where σ is not smooth, in the rescaled variable.
    pub fn kinks(&self) -> Vec<f64> {
        let raw = match self.kind {
            ActivationKind::Relu | ActivationKind::Elu => vec![0.0],
            ActivationKind::Custom => self.custom.as_ref().unwrap().kinks.clone(),
            _ => Vec::new(),
        };
        raw.into_iter().map(|k| k / self.radius).collect()
    }

    /// Saturating activations need a wider proximal search window.
    pub fn is_saturating(&self) -> bool {
        match self.kind {
            ActivationKind::Tanh | ActivationKind::Sigmoid => true,
            ActivationKind::Custom => self.custom.as_ref().unwrap().saturating,
            _ => false,
        }
    }
}

impl FromStr for Activation {
    type Err = HermiteError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "id" | "identity" => ActivationKind::Linear,
            "quadratic" | "square" => ActivationKind::Quadratic,
            "relu" => ActivationKind::Relu,
            "tanh" => ActivationKind::Tanh,
            "elu" => ActivationKind::Elu,
            "swish" | "silu" => ActivationKind::Swish,
            "sigmoid" => ActivationKind::Sigmoid,
            "gelu" => ActivationKind::Gelu,
            "he2_plus_he1" | "he2+he1" => ActivationKind::He2PlusHe1,
            other => return Err(HermiteError::UnknownActivation(other.into())),
        };
        Ok(Activation::new(kind))
    }
}

/// Rule for Gaussian expectations of functions built from σ: Gauss–Hermite
/// for smooth σ, split composite Gauss–Legendre when σ has kinks.
pub fn activation_rule(act: &Activation) -> NormalRule {
    let kinks = act.kinks();
    if kinks.is_empty() {
        NormalRule::hermite(240)
    } else {
        NormalRule::piecewise(&kinks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCoeffs {
    /// `c_k^{σ²} = E[σ(Z)² He_k(Z)]`
    pub c_sigma2: Vec<f64>,
    /// `c_k^{zσ} = E[Z σ(Z) He_k(Z)]`
    pub c_zsigma: Vec<f64>,
}

impl ActivationCoeffs {
    /// `c_k^{σ²} − 2 c_k^{zσ}`
    pub fn diff(&self, k: usize) -> f64 {
        self.c_sigma2[k] - 2.0 * self.c_zsigma[k]
    }
}

fn tail_ok(act: &Activation) -> bool {
    let g = |z: f64| {
        let s = act.eval(z);
        (s.powi(4) + z * z * s * s) * normal_pdf(z)
    };
    [-12.0, -10.0, 10.0, 12.0].iter().all(|&z| g(z).is_finite())
        && g(12.0) <= g(10.0).max(1e-300)
        && g(-12.0) <= g(-10.0).max(1e-300)
        && g(12.0).max(g(-12.0)) < 1e-6
}

pub fn activation_coeffs(act: &Activation, k_max: usize) -> Result<ActivationCoeffs, HermiteError> {
    if k_max > MAX_COEFF_DEGREE {
        return Err(HermiteError::DegreeTooHigh(k_max));
    }
    if !tail_ok(act) {
        return Err(HermiteError::NonIntegrable(act.name()));
    }
    let rule = activation_rule(act);
    let mut c_sigma2 = vec![0.0; k_max + 1];
    let mut c_zsigma = vec![0.0; k_max + 1];
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let s = act.eval(z);
        let h = he_all(k_max, z);
        for k in 0..=k_max {
            c_sigma2[k] += w * s * s * h[k];
            c_zsigma[k] += w * z * s * h[k];
        }
    }
    if c_sigma2.iter().chain(&c_zsigma).any(|c| !c.is_finite()) {
        return Err(HermiteError::NonIntegrable(act.name()));
    }
    Ok(ActivationCoeffs { c_sigma2, c_zsigma })
}

/// Table of `c^L_{i,j} = E[He_i(λ+Z_u) He_j(η(ν+Z_v))]`, `i + j ≤ K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodCoeffs {
    pub k_max: usize,
    table: Vec<Vec<f64>>,
}

impl LikelihoodCoeffs {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i + j <= self.k_max, "c^L_({i},{j}) beyond degree {}", self.k_max);
        self.table[i][j]
    }

    /// Build from an explicit table (row `i` holds `j = 0..=K−i`).
    pub fn from_table(table: Vec<Vec<f64>>) -> Self {
        let k_max = table.len() - 1;
        for (i, row) in table.iter().enumerate() {
            assert_eq!(row.len(), k_max + 1 - i);
        }
        LikelihoodCoeffs { k_max, table }
    }

    /// `c^L_{i,j} → (−1)^j c^L_{i,j}`, the coefficients of the law with ν ↦ −ν.
    pub fn flip_v(&self) -> Self {
        let table = self
            .table
            .iter()
            .map(|row| row.iter().enumerate().map(|(j, c)| if j % 2 == 1 { -c } else { *c }).collect())
            .collect();
        LikelihoodCoeffs { k_max: self.k_max, table }
    }
}

pub const MAX_LIKELIHOOD_DEGREE: usize = 8;

pub fn likelihood_coeffs(dist: &LatentDistribution, k_max: usize) -> Result<LikelihoodCoeffs, HermiteError> {
    if k_max > MAX_LIKELIHOOD_DEGREE {
        return Err(HermiteError::DegreeTooHigh(k_max));
    }
    let eta = dist.eta();
    let gh = NormalRule::hermite(40);
    let mut table: Vec<Vec<f64>> = (0..=k_max).map(|i| vec![0.0; k_max + 1 - i]).collect();
    let mut a = vec![0.0; k_max + 1];
    let mut b = vec![0.0; k_max + 1];
    for node in &dist.rule().nodes {
        a.iter_mut().for_each(|x| *x = 0.0);
        b.iter_mut().for_each(|x| *x = 0.0);
        for (&z, &w) in gh.nodes.iter().zip(&gh.weights) {
            let hu = he_all(k_max, node.lambda + z);
            let hv = he_all(k_max, eta * (node.nu + z));
            for k in 0..=k_max {
                a[k] += w * hu[k];
                b[k] += w * hv[k];
            }
        }
        for i in 0..=k_max {
            for j in 0..=(k_max - i) {
                table[i][j] += node.w * a[i] * b[j];
            }
        }
    }
    Ok(LikelihoodCoeffs { k_max, table })
}

/// `E[He_p(λ+Z) ν]` by tensor quadrature over the latent rule and `Z`.
pub fn shifted_hermite_moment(dist: &LatentDistribution, p: usize) -> f64 {
    let gh = NormalRule::hermite(40);
    dist.rule().expect(|l, nu| nu * gh.expect(|z| he(p, l + z)))
}

/// `E[He_i(X) He_j(Y) He_k(Z)]` for unit Gaussians with `E[XY]=0`,
/// `E[XZ]=ρ₁`, `E[YZ]=ρ₂`.
pub fn triple_hermite(i: usize, j: usize, k: usize, rho1: f64, rho2: f64) -> f64 {
    assert!(rho1 * rho1 + rho2 * rho2 <= 1.0 + 1e-12, "need ρ₁² + ρ₂² ≤ 1");
    if k != i + j {
        return 0.0;
    }
    factorial(k) * rho1.powi(i as i32) * rho2.powi(j as i32)
}

/// Low-degree products entering the gradient-flow classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConstants {
    pub c2: f64,
    pub c3: f64,
    pub c31: f64,
    pub c22: f64,
    /// `C_{p,1} = c^L_{p,1}(c_{p+1}^{σ²} − 2c_{p+1}^{zσ})` for `p = 1..=6`.
    pub cp1: [f64; 6],
}

impl FlowConstants {
    pub fn from_coeffs(a: &ActivationCoeffs, l: &LikelihoodCoeffs) -> Self {
        let mut cp1 = [0.0; 6];
        for (p, c) in cp1.iter_mut().enumerate().map(|(i, c)| (i + 1, c)) {
            if p + 1 <= l.k_max && p + 1 < a.c_sigma2.len() {
                *c = l.get(p, 1) * a.diff(p + 1);
            }
        }
        FlowConstants {
            c2: l.get(2, 0) * a.diff(2),
            c3: l.get(2, 1) * a.diff(3),
            c31: l.get(3, 1) * a.diff(4),
            c22: l.get(2, 2) * a.diff(4),
            cp1,
        }
    }
}

pub fn flow_constants(act: &Activation, dist: &LatentDistribution) -> Result<FlowConstants, HermiteError> {
    let a = activation_coeffs(act, 8)?;
    let l = likelihood_coeffs(dist, 8)?;
    Ok(FlowConstants::from_coeffs(&a, &l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowClass {
    Success1,
    Success2,
    Fail1,
    Fail2,
    Inconclusive,
}

pub fn classify(c: &FlowConstants) -> FlowClass {
    let nz = |x: f64| x.abs() > ZERO_TOL;
    if c.c2 >= 0.0 {
        FlowClass::Fail2
    } else if nz(c.c3) {
        FlowClass::Success1
    } else if nz(c.c31) {
        FlowClass::Success2
    } else if c.cp1.iter().all(|&x| !nz(x)) && c.c22 > 2.0 * c.c2 {
        FlowClass::Fail1
    } else {
        FlowClass::Inconclusive
    }
}

pub fn classify_activation(act: &Activation, dist: &LatentDistribution) -> Result<FlowClass, HermiteError> {
    Ok(classify(&flow_constants(act, dist)?))
}

/// One cell of the classification table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableSymbol {
    pub success: bool,
    pub index: u8,
}

impl fmt::Display for TableSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.success { "✓" } else { "✗" }, self.index)
    }
}

impl FlowClass {
    /// Symbol for recovery of v*; `None` when inconclusive.
    pub fn v_symbol(self) -> Option<TableSymbol> {
        match self {
            FlowClass::Success1 => Some(TableSymbol { success: true, index: 1 }),
            FlowClass::Success2 => Some(TableSymbol { success: true, index: 2 }),
            FlowClass::Fail1 => Some(TableSymbol { success: false, index: 1 }),
            FlowClass::Fail2 => Some(TableSymbol { success: false, index: 2 }),
            FlowClass::Inconclusive => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationTable {
    pub activations: Vec<String>,
    /// Rows: recovery of u*, of v* under the k*=2 law, of v* under the k*=3 law.
    pub rows: [Vec<Option<TableSymbol>>; 3],
}

/// Build the three-row table. The linear column follows from the PCA
/// equivalence (u* always, v* never). Otherwise the u* entry is ✗2 when
/// C₂ ≥ 0 and otherwise the smallest success index over the two laws.
pub fn classification_table(
    acts: &[Activation],
    law_k2: &LatentDistribution,
    law_k3: &LatentDistribution,
) -> Result<ClassificationTable, HermiteError> {
    let mut rows: [Vec<Option<TableSymbol>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut names = Vec::new();
    for act in acts {
        names.push(act.name());
        if act.kind == ActivationKind::Linear {
            rows[0].push(Some(TableSymbol { success: true, index: 0 }));
            rows[1].push(Some(TableSymbol { success: false, index: 0 }));
            rows[2].push(Some(TableSymbol { success: false, index: 0 }));
            continue;
        }
        let c2 = classify_activation(act, law_k2)?;
        let c3 = classify_activation(act, law_k3)?;
        let u = if c2 == FlowClass::Fail2 || c3 == FlowClass::Fail2 {
            TableSymbol { success: false, index: 2 }
        } else {
            let idx = [c2, c3]
                .iter()
                .filter_map(|c| match c {
                    FlowClass::Success1 => Some(1),
                    FlowClass::Success2 => Some(2),
                    _ => None,
                })
                .min()
                .unwrap_or(1);
            TableSymbol { success: true, index: idx }
        };
        rows[0].push(Some(u));
        rows[1].push(c2.v_symbol());
        rows[2].push(c3.v_symbol());
    }
    Ok(ClassificationTable { activations: names, rows })
}

impl ClassificationTable {
    pub fn to_csv(&self) -> String {
        let labels = ["recovery_u", "recovery_v_kstar2", "recovery_v_kstar3"];
        let mut s = String::from("target");
        for a in &self.activations {
            s.push(',');
            s.push_str(a);
        }
        s.push('\n');
        for (label, row) in labels.iter().zip(&self.rows) {
            s.push_str(label);
            for c in row {
                s.push(',');
                match c {
                    Some(sym) => s.push_str(&sym.to_string()),
                    None => s.push('?'),
                }
            }
            s.push('\n');
        }
        s
    }
}
