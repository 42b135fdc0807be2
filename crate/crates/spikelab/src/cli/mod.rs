//! Experiment harness: configuration, sweeps over α, activations and
//! seeds, CSV output and the two figure recipes.
//!
//! Every command resolves one [`ExperimentConfig`], splits its work into
//! independent cells run on a rayon pool (capped by `SPIKELAB_THREADS`),
//! and writes CSVs whose rows end with the config hash and code version.

pub mod cells;
pub mod config;
pub mod plot;

pub use config::{AlphaGrid, Command, ConfigError, DistArg, ExperimentConfig, Overrides, SeedRange};

use crate::amp::{amp_run, AmpConfig};
use crate::datagen::{covariance_spike_projection, dot, generate, make_spikes, SpikedDataset, TeacherSpikes};
use crate::ermse::{downstream_loss_theory, erm_fixed_point, test_loss_theory, train_loss_theory, ErmConfig, ErmState};
use crate::hermite::{
    activation_coeffs, classification_table, classify_activation, flow_constants, likelihood_coeffs, Activation,
};
use crate::latents::{LatentDistribution, LatentSpec};
use crate::popflow::{exit_time_scaling, integrate, FlowSpec, DEFAULT_K_TRUNC};
use crate::rng::{child_seed, stream};
use crate::stateval::{bo_fixed_point, bo_fixed_points, BoConfig};
use crate::trainer::{downstream_eval, test_loss_centered, train, TrainConfig, TrainResult};
use anyhow::Context;
use cells::{num, CellCache, CsvOut};
use clap::Parser;
use plot::{Panel, Series, Style};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Debug, Parser)]
#[command(name = "spikelab", version, about = "Experiments on the spiked cumulant model")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON config file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop cached cells of this configuration before running.
    #[arg(long)]
    pub fresh: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Code version written into every row. Set `SPIKELAB_GIT_DESCRIBE` at
/// build time to record `git describe` output instead of the crate version.
pub fn code_version() -> &'static str {
    option_env!("SPIKELAB_GIT_DESCRIBE").unwrap_or(concat!("spikelab-", env!("CARGO_PKG_VERSION")))
}

/// Origin of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Simulation,
    TheoryRs,
    Amp,
    StateEvolution,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Simulation => "simulation",
            Provenance::TheoryRs => "theory-rs",
            Provenance::Amp => "amp",
            Provenance::StateEvolution => "state-evolution",
        }
    }
}

/// One row of the shared sweep schema. Theory rows leave `seed` and `d`
/// empty; fields a source does not produce stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub provenance: Provenance,
    pub activation: String,
    pub dist: String,
    pub alpha: f64,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub theta_u: Option<f64>,
    pub theta_v: Option<f64>,
    pub m_u: Option<f64>,
    pub m_v: Option<f64>,
    pub q: Option<f64>,
    pub v: Option<f64>,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_loss_delta: Option<f64>,
    pub test_loss_delta: Option<f64>,
    pub downstream_error: Option<f64>,
    pub converged: Option<bool>,
}

pub const SWEEP_HEADER: [&str; 18] = [
    "provenance",
    "activation",
    "dist",
    "alpha",
    "seed",
    "d",
    "theta_u",
    "theta_v",
    "m_u",
    "m_v",
    "q",
    "V",
    "train_loss",
    "test_loss",
    "train_loss_delta",
    "test_loss_delta",
    "downstream_error",
    "converged",
];

impl SweepRecord {
    fn blank(provenance: Provenance, activation: &str, dist: &str, alpha: f64) -> Self {
        SweepRecord {
            provenance,
            activation: activation.into(),
            dist: dist.into(),
            alpha,
            seed: None,
            d: None,
            theta_u: None,
            theta_v: None,
            m_u: None,
            m_v: None,
            q: None,
            v: None,
            train_loss: None,
            test_loss: None,
            train_loss_delta: None,
            test_loss_delta: None,
            downstream_error: None,
            converged: None,
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.provenance.as_str().into(),
            self.activation.clone(),
            self.dist.clone(),
            format!("{}", self.alpha),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.d.map(|s| s.to_string()).unwrap_or_default(),
            num(self.theta_u),
            num(self.theta_v),
            num(self.m_u),
            num(self.m_v),
            num(self.q),
            num(self.v),
            num(self.train_loss),
            num(self.test_loss),
            num(self.train_loss_delta),
            num(self.test_loss_delta),
            num(self.downstream_error),
            self.converged.map(|c| c.to_string()).unwrap_or_default(),
        ]
    }
}

/// Fill loss differences against the linear row with the same provenance,
/// α and seed, where one exists.
pub fn fill_deltas(rows: &mut [SweepRecord]) {
    let linear: Vec<SweepRecord> = rows.iter().filter(|r| r.activation == "linear").cloned().collect();
    for r in rows.iter_mut() {
        let partner = linear
            .iter()
            .find(|l| l.provenance == r.provenance && l.alpha == r.alpha && l.seed == r.seed && l.dist == r.dist);
        if let Some(l) = partner {
            r.train_loss_delta = r.train_loss.zip(l.train_loss).map(|(a, b)| a - b);
            r.test_loss_delta = r.test_loss.zip(l.test_loss).map(|(a, b)| a - b);
        }
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

const AGG_STATS: [&str; 7] =
    ["theta_u", "theta_v", "train_loss", "test_loss", "train_loss_delta", "test_loss_delta", "downstream_error"];

fn stat_of(r: &SweepRecord, name: &str) -> Option<f64> {
    match name {
        "theta_u" => r.theta_u,
        "theta_v" => r.theta_v,
        "train_loss" => r.train_loss,
        "test_loss" => r.test_loss,
        "train_loss_delta" => r.train_loss_delta,
        "test_loss_delta" => r.test_loss_delta,
        "downstream_error" => r.downstream_error,
        _ => None,
    }
}

/// Seed averages of the simulation rows per (activation, α).
pub struct Aggregate {
    pub activation: String,
    pub alpha: f64,
    pub runs: usize,
    /// `(mean, std)` per entry of the aggregated statistics.
    pub stats: BTreeMap<&'static str, (f64, f64)>,
}

pub fn aggregate(rows: &[SweepRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.provenance == Provenance::Simulation) {
        if !keys.iter().any(|(a, al)| *a == r.activation && *al == r.alpha) {
            keys.push((r.activation.clone(), r.alpha));
        }
    }
    keys.into_iter()
        .map(|(act, alpha)| {
            let group: Vec<&SweepRecord> = rows
                .iter()
                .filter(|r| r.provenance == Provenance::Simulation && r.activation == act && r.alpha == alpha)
                .collect();
            let mut stats = BTreeMap::new();
            for name in AGG_STATS {
                let xs: Vec<f64> = group.iter().filter_map(|r| stat_of(r, name)).collect();
                if !xs.is_empty() {
                    stats.insert(name, mean_std(&xs));
                }
            }
            Aggregate { activation: act, alpha, runs: group.len(), stats }
        })
        .collect()
}

fn write_aggregate(ctx: &Ctx, rows: &[SweepRecord], name: &str) -> anyhow::Result<PathBuf> {
    let mut header = vec!["activation", "dist", "alpha", "d", "runs"];
    let cols: Vec<String> = AGG_STATS.iter().flat_map(|s| [format!("{s}_mean"), format!("{s}_std")]).collect();
    header.extend(cols.iter().map(|s| s.as_str()));
    let mut csv = CsvOut::new(&header, &ctx.hash);
    for a in aggregate(rows) {
        let mut f = vec![a.activation.clone(), ctx.dist_name.clone(), format!("{}", a.alpha), ctx.cfg.d.to_string(), a.runs.to_string()];
        for s in AGG_STATS {
            let (m, sd) = a.stats.get(s).map(|(m, s)| (Some(*m), Some(*s))).unwrap_or((None, None));
            f.push(num(m));
            f.push(num(sd));
        }
        csv.row(&f);
    }
    let path = ctx.cfg.out.join(name);
    csv.write(&path)?;
    Ok(path)
}

fn write_sweep(ctx: &Ctx, rows: &[SweepRecord], name: &str) -> anyhow::Result<PathBuf> {
    let mut csv = CsvOut::new(&SWEEP_HEADER, &ctx.hash);
    for r in rows {
        csv.row(&r.fields());
    }
    let path = ctx.cfg.out.join(name);
    csv.write(&path)?;
    Ok(path)
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    cache: CellCache,
    dist: LatentDistribution,
    dist_name: String,
}

/// Parse-free entry point used by the binary.
pub fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let file = match &cli.config {
        Some(p) => Overrides::from_file(p)?,
        None => Overrides::default(),
    };
    let cfg = ExperimentConfig::resolve(cli.command, cli.overrides.over(file))?;
    run_config(cfg, cli.fresh)
}

/// Run a resolved configuration and return the files written.
pub fn run_config(cfg: ExperimentConfig, fresh: bool) -> anyhow::Result<Vec<PathBuf>> {
    let hash = cfg.hash();
    let cache = CellCache::new(&cfg.out, &hash);
    if fresh {
        let dir = cfg.out.join("cells").join(&hash[..16]);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    let dist = cfg.dist.build().map_err(|e| ConfigError { field: "dist", message: e.to_string() })?;
    let dist_name = dist.name();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Ok(s) = std::env::var("SPIKELAB_THREADS") {
        let n: usize = s.trim().parse().map_err(|_| anyhow::anyhow!("SPIKELAB_THREADS must be a positive integer, got `{s}`"))?;
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build()?;
    let ctx = Ctx { cfg, hash, cache, dist, dist_name };
    let mut files = vec![write_config(&ctx)?];
    let written = pool.install(|| match ctx.cfg.command {
        Command::Generate => cmd_generate(&ctx),
        Command::HermiteClassify => cmd_hermite(&ctx),
        Command::Flow => cmd_flow(&ctx),
        Command::Amp => cmd_amp(&ctx),
        Command::SeBo => cmd_se_bo(&ctx),
        Command::SeErm => cmd_se_erm(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Downstream => cmd_downstream(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Figure1 => cmd_figure1(&ctx),
        Command::Figure2 => cmd_figure2(&ctx),
    })?;
    files.extend(written);
    Ok(files)
}

fn write_config(ctx: &Ctx) -> anyhow::Result<PathBuf> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        config: &'a ExperimentConfig,
        config_hash: &'a str,
        code_version: &'a str,
    }
    let path = ctx.cfg.out.join("config.json");
    let body = Resolved { config: &ctx.cfg, config_hash: &ctx.hash, code_version: code_version() };
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(path)
}

fn key_alpha(a: f64) -> String {
    format!("{a}").replace('.', "p")
}

// ---------------------------------------------------------------- cells

fn erm_config(cfg: &ExperimentConfig) -> ErmConfig {
    let mut ec = ErmConfig::default();
    if let Some(x) = cfg.damping {
        ec.damping = x;
    }
    if let Some(i) = cfg.iters {
        ec.iters = i;
        ec.average_last = ec.average_last.min(i);
    }
    ec
}

fn bo_config(cfg: &ExperimentConfig) -> BoConfig {
    let mut bc = BoConfig { omega_nodes: cfg.omega_nodes, ..Default::default() };
    if let Some(x) = cfg.damping {
        bc.damping = x;
    }
    if let Some(i) = cfg.iters {
        bc.iters = i;
        bc.average_last = bc.average_last.min(i);
    }
    bc
}

fn theory_state(ctx: &Ctx, act: &Activation, alpha: f64) -> anyhow::Result<(ErmState, bool)> {
    let r = erm_fixed_point(alpha, &ctx.dist, act, &erm_config(&ctx.cfg))?;
    Ok((r.state, r.converged))
}

fn theory_record(ctx: &Ctx, name: &str, alpha: f64) -> anyhow::Result<SweepRecord> {
    let act: Activation = name.parse()?;
    let (st, converged) = theory_state(ctx, &act, alpha)?;
    let mut r = SweepRecord::blank(Provenance::TheoryRs, name, &ctx.dist_name, alpha);
    r.theta_u = Some(st.theta_u());
    r.theta_v = Some(st.theta_v());
    r.m_u = Some(st.m[0]);
    r.m_v = Some(st.m[1]);
    r.q = Some(st.q);
    r.v = Some(st.v);
    r.train_loss = Some(train_loss_theory(&st, alpha, &ctx.dist, &act, 0.0)?);
    r.test_loss = Some(test_loss_theory(&st, &ctx.dist, &act));
    let seed = child_seed(ctx.cfg.seeds[0], &format!("theory-downstream-{name}-{alpha}"));
    r.downstream_error = Some(downstream_loss_theory(&st, &ctx.dist, ctx.cfg.m_batch, ctx.cfg.theory_trials, seed));
    r.converged = Some(converged);
    Ok(r)
}

/// Teacher spikes depend on `(d, seed)`; the rows also on α.
fn dataset(ctx: &Ctx, alpha: f64, seed: u64) -> anyhow::Result<(Arc<TeacherSpikes>, SpikedDataset)> {
    let d = ctx.cfg.d;
    let spikes = Arc::new(make_spikes(d, seed)?);
    let n = (alpha * d as f64).round() as usize;
    if n == 0 {
        anyhow::bail!("α = {alpha} gives no samples at d = {d}");
    }
    let ds = generate(&ctx.dist, spikes.clone(), n, child_seed(seed, &format!("rows-alpha-{alpha}")));
    Ok((spikes, ds))
}

fn trained(ctx: &Ctx, act: &Activation, alpha: f64, seed: u64) -> anyhow::Result<(Arc<TeacherSpikes>, TrainResult)> {
    let (spikes, ds) = dataset(ctx, alpha, seed)?;
    let mut tc = TrainConfig::new(act.clone(), child_seed(seed, "train"));
    tc.lr = ctx.cfg.lr;
    tc.epochs = ctx.cfg.epochs;
    let r = train(&ds, &tc)?;
    Ok((spikes, r))
}

fn simulation_record(ctx: &Ctx, name: &str, alpha: f64, seed: u64) -> anyhow::Result<SweepRecord> {
    let act: Activation = name.parse()?;
    let (spikes, r) = trained(ctx, &act, alpha, seed)?;
    let d = ctx.cfg.d as f64;
    let mut rec = SweepRecord::blank(Provenance::Simulation, name, &ctx.dist_name, alpha);
    rec.seed = Some(seed);
    rec.d = Some(ctx.cfg.d);
    rec.theta_u = Some(r.theta_u);
    rec.theta_v = Some(r.theta_v);
    rec.m_u = Some(dot(&r.w, &spikes.u_star) / d);
    rec.m_v = Some(dot(&r.w, &spikes.v_star) / d);
    rec.q = Some(dot(&r.w, &r.w) / d);
    rec.train_loss = Some(r.train_loss_centered);
    rec.test_loss = Some(test_loss_centered(
        &r.w,
        &act,
        &spikes,
        &ctx.dist,
        ctx.cfg.test_samples,
        child_seed(seed, "test-loss"),
    ));
    let down = downstream_eval(&r.w, &spikes, &ctx.dist, ctx.cfg.m_batch, ctx.cfg.downstream_pairs, child_seed(seed, "downstream"))?;
    rec.downstream_error = Some(down.error);
    Ok(rec)
}

fn theory_rows(ctx: &Ctx) -> anyhow::Result<Vec<SweepRecord>> {
    let cells: Vec<(String, f64)> = ctx
        .cfg
        .activations
        .iter()
        .flat_map(|a| ctx.cfg.alpha.iter().map(move |&al| (a.clone(), al)))
        .collect();
    ctx.cache.run("theory", &cells, |(a, al)| format!("{a}_a{}", key_alpha(*al)), |(a, al)| theory_record(ctx, a, *al))
}

fn simulation_rows(ctx: &Ctx) -> anyhow::Result<Vec<SweepRecord>> {
    let mut cells = Vec::new();
    for a in &ctx.cfg.activations {
        for &al in &ctx.cfg.alpha {
            for &s in &ctx.cfg.seeds {
                cells.push((a.clone(), al, s));
            }
        }
    }
    ctx.cache.run(
        "simulation",
        &cells,
        |(a, al, s)| format!("{a}_a{}_s{s}", key_alpha(*al)),
        |(a, al, s)| simulation_record(ctx, a, *al, *s),
    )
}

fn bo_rows(ctx: &Ctx) -> anyhow::Result<Vec<SweepRecord>> {
    let bc = bo_config(&ctx.cfg);
    ctx.cache.run("state-evolution", &ctx.cfg.alpha, |al| format!("a{}", key_alpha(*al)), |&al| {
        let r = bo_fixed_point(al, &ctx.dist, &bc)?;
        let mut rec = SweepRecord::blank(Provenance::StateEvolution, "bayes-optimal", &ctx.dist_name, al);
        rec.theta_u = Some(r.overlap.theta_u());
        rec.theta_v = Some(r.overlap.theta_v());
        rec.m_u = Some(r.overlap.q11);
        rec.m_v = Some(r.overlap.q22);
        rec.converged = Some(r.converged);
        Ok(rec)
    })
}

// ------------------------------------------------------------- commands

fn cmd_generate(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    #[derive(Serialize, Deserialize)]
    struct Gen {
        alpha: f64,
        seed: u64,
        n: usize,
        file: String,
        proj: [f64; 6],
    }
    let dir = ctx.cfg.out.join("datasets");
    std::fs::create_dir_all(&dir)?;
    let cells: Vec<(f64, u64)> =
        ctx.cfg.alpha.iter().flat_map(|&a| ctx.cfg.seeds.iter().map(move |&s| (a, s))).collect();
    let rows = ctx.cache.run("generate", &cells, |(a, s)| format!("a{}_s{s}", key_alpha(*a)), |&(a, s)| {
        let (_, ds) = dataset(ctx, a, s)?;
        let name = format!("d{}_a{}_s{s}.spkc", ctx.cfg.d, key_alpha(a));
        let f = std::fs::File::create(dir.join(&name))?;
        ds.write_to(std::io::BufWriter::new(f))?;
        let p = covariance_spike_projection(&ds);
        Ok(Gen { alpha: a, seed: s, n: ds.n, file: name, proj: [p.proj_u, p.proj_v, p.cross, p.se_u, p.se_v, p.se_cross] })
    })?;
    let mut csv = CsvOut::new(
        &["provenance", "dist", "alpha", "seed", "n", "d", "file", "proj_u", "proj_v", "cross", "se_u", "se_v", "se_cross"],
        &ctx.hash,
    );
    for g in &rows {
        let mut f = vec![
            "simulation".to_string(),
            ctx.dist_name.clone(),
            format!("{}", g.alpha),
            g.seed.to_string(),
            g.n.to_string(),
            ctx.cfg.d.to_string(),
            format!("datasets/{}", g.file),
        ];
        f.extend(g.proj.iter().map(|x| num(Some(*x))));
        csv.row(&f);
    }
    let path = ctx.cfg.out.join("generate.csv");
    csv.write(&path)?;
    Ok(vec![path])
}

fn cmd_hermite(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let acts = ctx.cfg.parsed_activations();
    let k2 = LatentSpec::K2Threshold.build()?;
    let k3 = LatentSpec::K3SignThreshold.build()?;
    let table = classification_table(&acts, &k2, &k3)?;
    let mut header = vec!["target".to_string()];
    header.extend(table.activations.iter().cloned());
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvOut::new(&header, &ctx.hash);
    for line in table.to_csv().lines().skip(1) {
        csv.row(&line.split(',').collect::<Vec<_>>());
    }
    let table_path = ctx.cfg.out.join("table1.csv");
    csv.write(&table_path)?;

    let mut csv = CsvOut::new(&["activation", "law", "c2", "c3", "c31", "c22", "class"], &ctx.hash);
    for act in &acts {
        for law in [&k2, &k3] {
            let c = flow_constants(act, law)?;
            let class = classify_activation(act, law)?;
            csv.row(&[
                act.name(),
                law.name(),
                num(Some(c.c2)),
                num(Some(c.c3)),
                num(Some(c.c31)),
                num(Some(c.c22)),
                format!("{class:?}"),
            ]);
        }
    }
    let const_path = ctx.cfg.out.join("flow_constants.csv");
    csv.write(&const_path)?;
    Ok(vec![table_path, const_path])
}

fn cmd_flow(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    #[derive(Serialize, Deserialize)]
    struct FlowOut {
        class: String,
        traj: Vec<(u64, f64, f64, f64)>,
        runs: Vec<(u64, Option<f64>, String)>,
        mean_times: Vec<Option<f64>>,
        censored: Vec<usize>,
        fit: [Option<f64>; 3],
    }
    const STRIDE: usize = 10;
    let lik = likelihood_coeffs(&ctx.dist, 8)?;
    let outs = ctx.cache.run("flow", &ctx.cfg.activations, |a| a.clone(), |name| {
        let act: Activation = name.parse()?;
        let spec = FlowSpec::from_coeffs(&activation_coeffs(&act, 8)?, &lik, DEFAULT_K_TRUNC)?;
        let sd = (ctx.cfg.d as f64).sqrt().recip();
        let (mut traj, mut runs) = (Vec::new(), Vec::new());
        for &s in &ctx.cfg.seeds {
            let mut rng = stream(s, "flow-cli-init", 0);
            let mu0: f64 = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let mv0: f64 = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let tr = integrate(&spec, mu0, mv0)?;
            let last = tr.times.len() - 1;
            for i in (0..tr.times.len()).filter(|&i| i % STRIDE == 0 || i == last) {
                traj.push((s, tr.times[i], tr.m_u[i], tr.m_v[i]));
            }
            runs.push((s, tr.exit_time, format!("{:?}", tr.exit_kind)));
        }
        let sc = exit_time_scaling(&spec, &ctx.cfg.dims, ctx.cfg.seeds.len(), ctx.cfg.seeds[0])?;
        let fin = |x: f64| x.is_finite().then_some(x);
        Ok(FlowOut {
            class: format!("{:?}", classify_activation(&act, &ctx.dist)?),
            traj,
            runs,
            mean_times: sc.mean_times.iter().map(|&t| fin(t)).collect(),
            censored: sc.censored,
            fit: [fin(sc.slope), fin(sc.intercept), fin(sc.r2)],
        })
    })?;
    let mut tcsv = CsvOut::new(&["provenance", "activation", "dist", "seed", "d", "t", "m_u", "m_v"], &ctx.hash);
    let mut rcsv = CsvOut::new(&["provenance", "activation", "dist", "seed", "d", "class", "exit_time", "exit_kind"], &ctx.hash);
    let mut scsv = CsvOut::new(
        &["provenance", "activation", "dist", "d", "runs", "mean_exit_time", "censored", "slope_vs_ln_d", "intercept", "r2"],
        &ctx.hash,
    );
    let d = ctx.cfg.d.to_string();
    for (name, o) in ctx.cfg.activations.iter().zip(&outs) {
        for &(s, t, mu, mv) in &o.traj {
            tcsv.row(&["theory-rs".into(), name.clone(), ctx.dist_name.clone(), s.to_string(), d.clone(), num(Some(t)), num(Some(mu)), num(Some(mv))]);
        }
        for (s, t, kind) in &o.runs {
            rcsv.row(&["theory-rs".into(), name.clone(), ctx.dist_name.clone(), s.to_string(), d.clone(), o.class.clone(), num(*t), kind.clone()]);
        }
        for (i, dim) in ctx.cfg.dims.iter().enumerate() {
            scsv.row(&[
                "theory-rs".into(),
                name.clone(),
                ctx.dist_name.clone(),
                dim.to_string(),
                ctx.cfg.seeds.len().to_string(),
                num(o.mean_times[i]),
                o.censored[i].to_string(),
                num(o.fit[0]),
                num(o.fit[1]),
                num(o.fit[2]),
            ]);
        }
    }
    let paths = [
        ctx.cfg.out.join("flow_trajectory.csv"),
        ctx.cfg.out.join("flow_runs.csv"),
        ctx.cfg.out.join("flow_exit.csv"),
    ];
    tcsv.write(&paths[0])?;
    rcsv.write(&paths[1])?;
    scsv.write(&paths[2])?;
    Ok(paths.to_vec())
}

fn cmd_amp(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    #[derive(Serialize, Deserialize)]
    struct AmpOut {
        trace: Vec<[f64; 7]>,
    }
    let cells: Vec<(f64, u64)> =
        ctx.cfg.alpha.iter().flat_map(|&a| ctx.cfg.seeds.iter().map(move |&s| (a, s))).collect();
    let runs = ctx.cache.run("amp", &cells, |(a, s)| format!("a{}_s{s}", key_alpha(*a)), |&(a, s)| {
        let (_, ds) = dataset(ctx, a, s)?;
        let ac = AmpConfig {
            iters: ctx.cfg.iters.unwrap_or(40),
            damping: ctx.cfg.damping.unwrap_or(0.0),
            tol: (ctx.cfg.amp_tol > 0.0).then_some(ctx.cfg.amp_tol),
            seed: child_seed(s, "amp"),
            ..Default::default()
        };
        let out = amp_run(&ds, &ctx.dist, &ac)?;
        Ok(AmpOut {
            trace: out.trace.iter().map(|r| [r.t as f64, r.q11, r.q12, r.q21, r.q22, r.theta_u, r.theta_v]).collect(),
        })
    })?;
    let se = bo_rows(ctx)?;
    let mut tcsv = CsvOut::new(&["provenance", "dist", "alpha", "seed", "d", "t", "q11", "q12", "q21", "q22", "theta_u", "theta_v"], &ctx.hash);
    let mut rows = Vec::new();
    for ((a, s), run) in cells.iter().zip(&runs) {
        for r in &run.trace {
            let mut f = vec!["amp".to_string(), ctx.dist_name.clone(), format!("{a}"), s.to_string(), ctx.cfg.d.to_string(), format!("{}", r[0])];
            f.extend(r[1..].iter().map(|x| num(Some(*x))));
            tcsv.row(&f);
        }
        if let Some(last) = run.trace.last() {
            let mut rec = SweepRecord::blank(Provenance::Amp, "bayes-optimal", &ctx.dist_name, *a);
            rec.seed = Some(*s);
            rec.d = Some(ctx.cfg.d);
            rec.m_u = Some(last[1]);
            rec.m_v = Some(last[4]);
            rec.theta_u = Some(last[5]);
            rec.theta_v = Some(last[6]);
            rows.push(rec);
        }
    }
    rows.extend(se);
    let trace_path = ctx.cfg.out.join("amp_trace.csv");
    tcsv.write(&trace_path)?;
    let sum_path = write_sweep(ctx, &rows, "amp.csv")?;
    Ok(vec![trace_path, sum_path])
}

fn cmd_se_bo(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    #[derive(Serialize, Deserialize)]
    struct Bo {
        q: [f64; 3],
        theta: [f64; 2],
        informed_theta: [f64; 2],
        residual: f64,
        converged: bool,
        disagree: bool,
    }
    let bc = bo_config(&ctx.cfg);
    let rows = ctx.cache.run("se-bo", &ctx.cfg.alpha, |a| format!("a{}", key_alpha(*a)), |&a| {
        let fp = bo_fixed_points(a, &ctx.dist, &bc)?;
        let o = fp.uninformed.overlap;
        Ok(Bo {
            q: [o.q11, o.q12, o.q22],
            theta: [o.theta_u(), o.theta_v()],
            informed_theta: [fp.informed.overlap.theta_u(), fp.informed.overlap.theta_v()],
            residual: fp.uninformed.residual,
            converged: fp.uninformed.converged,
            disagree: fp.disagree,
        })
    })?;
    let mut csv = CsvOut::new(
        &[
            "provenance",
            "dist",
            "alpha",
            "theta_u",
            "theta_v",
            "q11",
            "q12",
            "q22",
            "residual",
            "converged",
            "informed_theta_u",
            "informed_theta_v",
            "multiple_fixed_points",
        ],
        &ctx.hash,
    );
    for (a, b) in ctx.cfg.alpha.iter().zip(&rows) {
        let mut f = vec!["state-evolution".to_string(), ctx.dist_name.clone(), format!("{a}")];
        f.extend(b.theta.iter().chain(&b.q).chain([&b.residual]).map(|x| num(Some(*x))));
        f.push(b.converged.to_string());
        f.extend(b.informed_theta.iter().map(|x| num(Some(*x))));
        f.push(b.disagree.to_string());
        csv.row(&f);
    }
    let path = ctx.cfg.out.join("se_bo.csv");
    csv.write(&path)?;
    Ok(vec![path])
}

fn cmd_se_erm(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let mut rows = theory_rows(ctx)?;
    fill_deltas(&mut rows);
    Ok(vec![write_sweep(ctx, &rows, "se_erm.csv")?])
}

fn cmd_train(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let mut rows = simulation_rows(ctx)?;
    fill_deltas(&mut rows);
    Ok(vec![write_sweep(ctx, &rows, "train_runs.csv")?, write_aggregate(ctx, &rows, "train_aggregate.csv")?])
}

fn cmd_downstream(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let batches: Vec<usize> = if ctx.cfg.m_batch == 1 { vec![1] } else { vec![1, ctx.cfg.m_batch] };
    let mut cells = Vec::new();
    for a in &ctx.cfg.activations {
        for &al in &ctx.cfg.alpha {
            cells.push((a.clone(), al, None));
            for &s in &ctx.cfg.seeds {
                cells.push((a.clone(), al, Some(s)));
            }
        }
    }
    let key = |(a, al, s): &(String, f64, Option<u64>)| match s {
        Some(s) => format!("{a}_a{}_s{s}", key_alpha(*al)),
        None => format!("{a}_a{}_theory", key_alpha(*al)),
    };
    let errs: Vec<Vec<f64>> = ctx.cache.run("downstream", &cells, key, |(a, al, s)| {
        let act: Activation = a.parse()?;
        match s {
            None => {
                let (st, _) = theory_state(ctx, &act, *al)?;
                Ok(batches
                    .iter()
                    .map(|&m| {
                        let seed = child_seed(ctx.cfg.seeds[0], &format!("theory-downstream-{a}-{al}-{m}"));
                        downstream_loss_theory(&st, &ctx.dist, m, ctx.cfg.theory_trials, seed)
                    })
                    .collect())
            }
            Some(s) => {
                let (spikes, r) = trained(ctx, &act, *al, *s)?;
                batches
                    .iter()
                    .map(|&m| {
                        let seed = child_seed(*s, &format!("downstream-m{m}"));
                        Ok(downstream_eval(&r.w, &spikes, &ctx.dist, m, ctx.cfg.downstream_pairs, seed)?.error)
                    })
                    .collect()
            }
        }
    })?;
    let mut csv = CsvOut::new(&["provenance", "activation", "dist", "alpha", "seed", "d", "m_batch", "downstream_error"], &ctx.hash);
    for ((a, al, s), e) in cells.iter().zip(&errs) {
        for (m, err) in batches.iter().zip(e) {
            let prov = if s.is_some() { Provenance::Simulation } else { Provenance::TheoryRs };
            csv.row(&[
                prov.as_str().to_string(),
                a.clone(),
                ctx.dist_name.clone(),
                format!("{al}"),
                s.map(|x| x.to_string()).unwrap_or_default(),
                if s.is_some() { ctx.cfg.d.to_string() } else { String::new() },
                m.to_string(),
                num(Some(*err)),
            ]);
        }
    }
    let path = ctx.cfg.out.join("downstream.csv");
    csv.write(&path)?;
    Ok(vec![path])
}

fn sweep_rows(ctx: &Ctx) -> anyhow::Result<Vec<SweepRecord>> {
    let mut rows = simulation_rows(ctx)?;
    rows.extend(theory_rows(ctx)?);
    fill_deltas(&mut rows);
    Ok(rows)
}

fn cmd_sweep(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let rows = sweep_rows(ctx)?;
    Ok(vec![write_sweep(ctx, &rows, "sweep.csv")?, write_aggregate(ctx, &rows, "sweep_aggregate.csv")?])
}

/// Theory lines and seed-averaged simulation dots of one statistic.
fn panel(rows: &[SweepRecord], stat: &'static str, title: &str, ylabel: &str) -> Panel {
    let mut series = Vec::new();
    let mut names: Vec<(String, Provenance)> = Vec::new();
    for r in rows {
        if r.provenance != Provenance::Simulation && !names.contains(&(r.activation.clone(), r.provenance)) {
            names.push((r.activation.clone(), r.provenance));
        }
    }
    for (name, prov) in &names {
        let pts = rows
            .iter()
            .filter(|r| r.provenance == *prov && r.activation == *name)
            .filter_map(|r| stat_of(r, stat).map(|y| (r.alpha, y, 0.0)))
            .collect();
        series.push(Series { label: format!("{name} ({})", prov.as_str()), style: Style::Line, points: pts });
    }
    let agg = aggregate(rows);
    let mut sim_names: Vec<String> = Vec::new();
    for a in &agg {
        if !sim_names.contains(&a.activation) {
            sim_names.push(a.activation.clone());
        }
    }
    for name in sim_names {
        let pts = agg
            .iter()
            .filter(|a| a.activation == name)
            .filter_map(|a| a.stats.get(stat).map(|(m, s)| (a.alpha, *m, *s)))
            .collect();
        series.push(Series { label: format!("{name} (simulation)"), style: Style::Dots, points: pts });
    }
    Panel { title: title.into(), xlabel: "alpha".into(), ylabel: ylabel.into(), series }
}

fn write_figure(ctx: &Ctx, stem: &str, panels: &[(Panel, &str)]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let svg_path = ctx.cfg.out.join(format!("{stem}.svg"));
    let ps: Vec<Panel> = panels.iter().map(|(p, _)| p.clone()).collect();
    std::fs::write(&svg_path, plot::svg(&ps))?;
    files.push(svg_path);
    for (p, suffix) in panels {
        let path = ctx.cfg.out.join(format!("{stem}_{suffix}.dat"));
        std::fs::write(&path, plot::gnuplot_data(p))?;
        files.push(path);
    }
    Ok(files)
}

fn cmd_figure1(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let mut rows = sweep_rows(ctx)?;
    rows.extend(bo_rows(ctx)?);
    let mut files = vec![write_sweep(ctx, &rows, "figure1.csv")?, write_aggregate(ctx, &rows, "figure1_aggregate.csv")?];
    let panels = [
        (panel(&rows, "theta_u", "cosine similarity with u*", "theta_u"), "theta_u"),
        (panel(&rows, "theta_v", "cosine similarity with v*", "theta_v"), "theta_v"),
    ];
    files.extend(write_figure(ctx, "figure1", &panels)?);
    Ok(files)
}

fn cmd_figure2(ctx: &Ctx) -> anyhow::Result<Vec<PathBuf>> {
    let rows = sweep_rows(ctx)?;
    let mut files = vec![write_sweep(ctx, &rows, "figure2.csv")?, write_aggregate(ctx, &rows, "figure2_aggregate.csv")?];
    let panels = [
        (panel(&rows, "train_loss_delta", "train loss minus linear", "train loss gap"), "train_delta"),
        (panel(&rows, "test_loss_delta", "test loss minus linear", "test loss gap"), "test_delta"),
        (panel(&rows, "downstream_error", "downstream classification error", "error"), "downstream"),
    ];
    files.extend(write_figure(ctx, "figure2", &panels)?);
    Ok(files)
}
