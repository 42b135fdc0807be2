//! Experiment configuration: a JSON file, command-line flags, and the
//! resolved record that gets hashed into every output row.

use crate::hermite::Activation;
use crate::latents::LatentSpec;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write datasets in the binary format plus a summary CSV.
    Generate,
    /// Table of recovery symbols for a list of activations.
    HermiteClassify,
    /// Reduced population gradient flow: trajectories and exit times.
    Flow,
    /// AMP runs next to their state-evolution prediction.
    Amp,
    /// Bayes-optimal state evolution over an α grid.
    SeBo,
    /// Replica fixed points of the tied autoencoder over an α grid.
    SeErm,
    /// Full-batch training runs with per-run and aggregate CSVs.
    Train,
    /// Downstream classification error, single samples and batches.
    Downstream,
    /// Training and replica theory on one grid, sharing a schema.
    Sweep,
    /// Overlaps against α: Bayes-optimal, ERM theory and training.
    Figure1,
    /// Loss gaps to linear and downstream error against α.
    Figure2,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::HermiteClassify => "hermite-classify",
            Command::Flow => "flow",
            Command::Amp => "amp",
            Command::SeBo => "se-bo",
            Command::SeErm => "se-erm",
            Command::Train => "train",
            Command::Downstream => "downstream",
            Command::Sweep => "sweep",
            Command::Figure1 => "figure1",
            Command::Figure2 => "figure2",
        }
    }

    fn is_figure(self) -> bool {
        matches!(self, Command::Figure1 | Command::Figure2)
    }
}

/// A configuration problem tied to one field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl ConfigError {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        ConfigError { field, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// An α grid: `a..b` (step 0.5), `a..b:step`, or a comma list.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrid(pub Vec<f64>);

impl FromStr for AlphaGrid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some((lo, rest)) = s.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((h, st)) => (h, st),
                None => (rest, "0.5"),
            };
            let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number `{t}` in `{s}`: {e}"));
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) {
                return Err(format!("step must be positive in `{s}`"));
            }
            if hi < lo {
                return Err(format!("range `{s}` runs backwards"));
            }
            let span = (hi - lo) / step;
            let k = span.round();
            if (span - k).abs() > 1e-9 {
                return Err(format!("step {step} does not divide {lo}..{hi}"));
            }
            let vals = (0..=k as usize).map(|i| round12(lo + i as f64 * step)).collect();
            return Ok(AlphaGrid(vals));
        }
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad α `{t}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(AlphaGrid)
    }
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

impl<'de> Deserialize<'de> for AlphaGrid {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(Vec<f64>),
            One(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::List(v) => Ok(AlphaGrid(v)),
            Raw::One(a) => Ok(AlphaGrid(vec![a])),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Latent law on the command line: a bare kind (`k2_threshold`) or a JSON
/// object (`{"kind":"linearly_correlated","rho":0.5}`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct DistArg(pub LatentSpec);

impl FromStr for DistArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let json = if s.starts_with('{') { s.to_string() } else { format!("{{\"kind\":\"{s}\"}}") };
        serde_json::from_str(&json).map(DistArg).map_err(|e| format!("unknown latent law `{s}`: {e}"))
    }
}

/// Half-open seed range `a..b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedRange(pub u64, pub u64);

impl FromStr for SeedRange {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected `a..b`, got `{s}`"))?;
        let p = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
        Ok(SeedRange(p(a)?, p(b)?))
    }
}

impl<'de> Deserialize<'de> for SeedRange {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        String::deserialize(de)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Settings that may come from the JSON file or from flags; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Latent law, e.g. `k2_threshold` or a JSON object.
    #[arg(long)]
    pub dist: Option<DistArg>,
    /// Comma-separated activations.
    #[arg(long = "activation", value_delimiter = ',')]
    #[serde(alias = "activation")]
    pub activations: Option<Vec<String>>,
    /// α grid: `1..6`, `0.5..6:0.25` or `2,4,6`.
    #[arg(long, visible_alias = "alpha-grid")]
    #[serde(alias = "alpha_grid")]
    pub alpha: Option<AlphaGrid>,
    /// Dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of seeds, counted from `seed_start`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub seed_start: Option<u64>,
    /// Half-open seed range `a..b`; replaces `seeds` and `seed_start`.
    #[arg(long)]
    pub seed_range: Option<SeedRange>,
    /// Monte-Carlo size: downstream-theory trials, or the Gauss–Hermite
    /// nodes per axis for `se-bo`.
    #[arg(long)]
    pub mc: Option<usize>,
    /// Damping of whichever iteration the command runs.
    #[arg(long)]
    pub damping: Option<f64>,
    /// Iteration cap of whichever iteration the command runs.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Relative stopping tolerance of AMP.
    #[arg(long)]
    pub amp_tol: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fresh samples for the empirical test loss.
    #[arg(long)]
    pub test_samples: Option<usize>,
    /// Labeled pairs for the empirical downstream error.
    #[arg(long)]
    pub downstream_pairs: Option<usize>,
    /// Batch size `M` of the sign aggregation.
    #[arg(long)]
    pub m_batch: Option<usize>,
    /// Dimensions for the exit-time scaling of `flow`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    #[serde(default)]
    pub command: Option<Command>,
}

impl Overrides {
    /// Read a JSON config file.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    /// Fields set here replace those of `base`.
    pub fn over(self, base: Overrides) -> Overrides {
        Overrides {
            dist: self.dist.or(base.dist),
            activations: self.activations.or(base.activations),
            alpha: self.alpha.or(base.alpha),
            d: self.d.or(base.d),
            seeds: self.seeds.or(base.seeds),
            seed_start: self.seed_start.or(base.seed_start),
            seed_range: self.seed_range.or(base.seed_range),
            mc: self.mc.or(base.mc),
            damping: self.damping.or(base.damping),
            iters: self.iters.or(base.iters),
            amp_tol: self.amp_tol.or(base.amp_tol),
            epochs: self.epochs.or(base.epochs),
            lr: self.lr.or(base.lr),
            test_samples: self.test_samples.or(base.test_samples),
            downstream_pairs: self.downstream_pairs.or(base.downstream_pairs),
            m_batch: self.m_batch.or(base.m_batch),
            dims: self.dims.or(base.dims),
            out: self.out.or(base.out),
            command: self.command.or(base.command),
        }
    }
}

/// Fully resolved experiment. Everything except `out` enters the hash, so
/// the same experiment written to two directories yields the same rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub dist: LatentSpec,
    pub activations: Vec<String>,
    pub alpha: Vec<f64>,
    pub d: usize,
    pub seeds: Vec<u64>,
    pub omega_nodes: usize,
    pub theory_trials: usize,
    pub damping: Option<f64>,
    pub iters: Option<usize>,
    pub amp_tol: f64,
    pub epochs: usize,
    pub lr: f64,
    pub test_samples: usize,
    pub downstream_pairs: usize,
    pub m_batch: usize,
    pub dims: Vec<usize>,
    #[serde(skip)]
    pub out: PathBuf,
}

pub const DESK_GRID: &str = "0.5..6";

impl ExperimentConfig {
    /// Fill defaults for `command` and validate.
    pub fn resolve(command: Command, o: Overrides) -> Result<Self, ConfigError> {
        let figure = command.is_figure();
        let activations = o.activations.unwrap_or_else(|| match command {
            Command::HermiteClassify => Activation::table_columns().iter().map(|a| a.name()).collect(),
            Command::Figure2 => ["linear", "relu", "elu", "tanh"].map(String::from).to_vec(),
            _ => vec!["linear".into(), "relu".into()],
        });
        for a in &activations {
            a.parse::<Activation>().map_err(|e| ConfigError::new("activations", e.to_string()))?;
        }
        if activations.is_empty() {
            return Err(ConfigError::new("activations", "at least one activation is required"));
        }
        let grid_default = figure || matches!(command, Command::SeBo | Command::SeErm);
        let alpha = match o.alpha {
            Some(g) => g.0,
            None if grid_default => DESK_GRID.parse::<AlphaGrid>().expect("default grid").0,
            None => vec![2.0],
        };
        if alpha.is_empty() {
            return Err(ConfigError::new("alpha", "grid is empty"));
        }
        for w in alpha.windows(2) {
            if !(w[1] > w[0]) {
                return Err(ConfigError::new("alpha", format!("grid must be strictly increasing ({} then {})", w[0], w[1])));
            }
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(ConfigError::new("alpha", format!("entries must be positive and finite, got {a}")));
        }
        let seeds: Vec<u64> = match o.seed_range {
            Some(SeedRange(a, b)) => (a..b).collect(),
            None => {
                let n = o.seeds.unwrap_or(if figure { 10 } else { 1 });
                let s0 = o.seed_start.unwrap_or(0);
                (s0..s0.saturating_add(n)).collect()
            }
        };
        if seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        let d = o.d.unwrap_or(if command == Command::Amp { 2000 } else { 1000 });
        if d < 2 {
            return Err(ConfigError::new("d", format!("dimension must be at least 2, got {d}")));
        }
        let (omega_nodes, theory_trials) = match (command, o.mc) {
            (Command::SeBo, Some(m)) => (m, 200_000),
            (_, Some(m)) => (crate::stateval::DEFAULT_OMEGA_NODES, m),
            (_, None) => (crate::stateval::DEFAULT_OMEGA_NODES, 200_000),
        };
        if omega_nodes < 2 || theory_trials == 0 {
            return Err(ConfigError::new("mc", "must be at least 2 nodes or 1 trial"));
        }
        if let Some(x) = o.damping {
            if !(0.0..1.0).contains(&x) {
                return Err(ConfigError::new("damping", format!("must lie in [0, 1), got {x}")));
            }
        }
        if o.iters == Some(0) {
            return Err(ConfigError::new("iters", "must be at least 1"));
        }
        let amp_tol = o.amp_tol.unwrap_or(1e-3);
        if !(amp_tol >= 0.0) {
            return Err(ConfigError::new("amp_tol", "must be non-negative"));
        }
        let epochs = o.epochs.unwrap_or(800);
        if epochs == 0 {
            return Err(ConfigError::new("epochs", "must be at least 1"));
        }
        let lr = o.lr.unwrap_or(0.1);
        if !(lr > 0.0) {
            return Err(ConfigError::new("lr", format!("must be positive, got {lr}")));
        }
        let test_samples = o.test_samples.unwrap_or(200_000);
        let downstream_pairs = o.downstream_pairs.unwrap_or(10_000);
        if test_samples == 0 || downstream_pairs == 0 {
            return Err(ConfigError::new("test_samples", "sample counts must be positive"));
        }
        let m_batch = o.m_batch.unwrap_or(100);
        if m_batch == 0 {
            return Err(ConfigError::new("m_batch", "must be at least 1"));
        }
        let dims = o.dims.unwrap_or_else(|| vec![100, 1000, 10_000, 100_000]);
        if dims.is_empty() || dims.iter().any(|&x| x < 2) {
            return Err(ConfigError::new("dims", "need at least one dimension ≥ 2"));
        }
        let out = o.out.unwrap_or_else(|| PathBuf::from("out").join(command.name()));
        check_writable(&out)?;
        Ok(ExperimentConfig {
            command,
            dist: o.dist.map(|d| d.0).unwrap_or(LatentSpec::K2Threshold),
            activations,
            alpha,
            d,
            seeds,
            omega_nodes,
            theory_trials,
            damping: o.damping,
            iters: o.iters,
            amp_tol,
            epochs,
            lr,
            test_samples,
            downstream_pairs,
            m_batch,
            dims,
            out,
        })
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn parsed_activations(&self) -> Vec<Activation> {
        self.activations.iter().map(|a| a.parse().expect("validated")).collect()
    }
}

fn check_writable(dir: &Path) -> Result<(), ConfigError> {
    let err = |e: std::io::Error| ConfigError::new("out", format!("{} is not writable: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(err)?;
    let probe = dir.join(".spikelab-write-probe");
    std::fs::write(&probe, b"").map_err(err)?;
    std::fs::remove_file(&probe).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("spikelab-config-{name}-{}", std::process::id()))
    }

    #[test]
    fn alpha_grammar() {
        let g: AlphaGrid = "1..6".parse().unwrap();
        assert_eq!(g.0.len(), 11);
        assert_eq!(g.0[0], 1.0);
        assert_eq!(g.0[10], 6.0);
        let g: AlphaGrid = "0.5..1:0.1".parse().unwrap();
        assert_eq!(g.0, vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!("2, 4,6".parse::<AlphaGrid>().unwrap().0, vec![2.0, 4.0, 6.0]);
        assert!("1..2:0.3".parse::<AlphaGrid>().is_err());
        assert!("3..1".parse::<AlphaGrid>().is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: Overrides = serde_json::from_str(
            r#"{"dist":{"kind":"k3_sign_threshold"},"alpha":"1..2","d":300,"seeds":4,"activations":["tanh"]}"#,
        )
        .unwrap();
        let flags = Overrides { d: Some(500), out: Some(tmp("merge")), ..Default::default() };
        let c = ExperimentConfig::resolve(Command::Sweep, flags.over(file)).unwrap();
        assert_eq!(c.d, 500);
        assert_eq!(c.dist, LatentSpec::K3SignThreshold);
        assert_eq!(c.alpha, vec![1.0, 1.5, 2.0]);
        assert_eq!(c.seeds, vec![0, 1, 2, 3]);
        assert_eq!(c.activations, vec!["tanh"]);
    }

    #[test]
    fn field_level_errors() {
        let base = || Overrides { out: Some(tmp("errors")), ..Default::default() };
        let bad = Overrides { alpha: Some(AlphaGrid(vec![2.0, 1.0])), ..base() };
        assert_eq!(ExperimentConfig::resolve(Command::Sweep, bad).unwrap_err().field, "alpha");
        let bad = Overrides { seeds: Some(0), ..base() };
        assert_eq!(ExperimentConfig::resolve(Command::Sweep, bad).unwrap_err().field, "seeds");
        let bad = Overrides { activations: Some(vec!["softplus".into()]), ..base() };
        assert_eq!(ExperimentConfig::resolve(Command::Sweep, bad).unwrap_err().field, "activations");
        let file = tmp("plain-file");
        std::fs::write(&file, b"x").unwrap();
        let bad = Overrides { out: Some(file.join("sub")), ..Default::default() };
        assert_eq!(ExperimentConfig::resolve(Command::Sweep, bad).unwrap_err().field, "out");
        let unknown = serde_json::from_str::<Overrides>(r#"{"alhpa":[1]}"#);
        assert!(unknown.unwrap_err().to_string().contains("alhpa"));
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = Overrides { out: Some(tmp("h1")), ..Default::default() };
        let b = Overrides { out: Some(tmp("h2")), ..Default::default() };
        let ca = ExperimentConfig::resolve(Command::Train, a).unwrap();
        let cb = ExperimentConfig::resolve(Command::Train, b.clone()).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        let cc = ExperimentConfig::resolve(Command::Train, Overrides { d: Some(999), ..b }).unwrap();
        assert_ne!(ca.hash(), cc.hash());
    }

    #[test]
    fn dist_flag_forms() {
        assert_eq!("k2_threshold".parse::<DistArg>().unwrap().0, LatentSpec::K2Threshold);
        let d: DistArg = r#"{"kind":"linearly_correlated","rho":0.5}"#.parse().unwrap();
        assert_eq!(d.0, LatentSpec::LinearlyCorrelated { rho: 0.5 });
        assert!("gaussian".parse::<DistArg>().is_err());
    }
}
