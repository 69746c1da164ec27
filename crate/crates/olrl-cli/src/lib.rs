//! Experiment harness around the `olrl` crate.
//!
//! The library half of the `olrl` binary: JSON config loading, seed-parallel
//! experiment execution, bootstrap statistics, and deterministic CSV/JSON
//! emission. Everything here is a pure function of the config and the seed
//! list, so two runs with identical inputs write identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use olrl::algorithms::{
    preflight, run_algorithm_with, Algorithm, LearningCurve, RecordSpec, RunConfig, RunOutcome,
};
use olrl::env::{Environment, PendulumEnv, RolloutCounter};
use olrl::models::{
    perturbed_pendulum_model, pink_noise_sequence, train_mlp_model, DifferentiableModel, MlpConfig,
};
use olrl::optim::OptimizerKind;
use olrl::theory::{gradient_check, rate_guarantee_report, TheoryConstants};

/// A pendulum run counts as solved when its best recorded return exceeds
/// this.
pub const SOLVE_THRESHOLD: f64 = -0.03;

/// Curves longer than this are thinned on emission.
pub const MAX_EMITTED_ROWS: usize = 2000;

/// Default seed count for `--seeds N` style invocations.
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Anything wrong with the requested experiment itself; exits with 2.
    #[error("config error: {0}")]
    Config(String),
    /// I/O and other environmental failures; exits with 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<olrl::Error> for CliError {
    fn from(e: olrl::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_error(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

/// SplitMix64 finalizer; a bijection on `u64` with good avalanche.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream seed for one run, mixed from the config's master seed and the
/// experiment seed index. Independent of the algorithm so that runs with
/// the same `(master, seed)` pair are paired across algorithms.
pub fn derive_run_seed(master: u64, seed: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(seed ^ 0x5EED_0000_0000_0000))
}

/// Seed for harness-constructed models, decorrelated from the action noise
/// stream of the run that uses the model.
pub fn derive_model_seed(run_seed: u64) -> u64 {
    splitmix64(run_seed ^ 0x6D6F_6465_6C00_0000)
}

// ---------------------------------------------------------------------------
// Config loading

/// Flat JSON mirror of [`RunConfig`]; absent keys keep the stock pendulum
/// defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    env: Option<String>,
    horizon: Option<usize>,
    algorithm: Option<String>,
    #[serde(rename = "N")]
    steps: Option<usize>,
    eta: Option<f64>,
    sigma: Option<f64>,
    #[serde(rename = "M")]
    samples: Option<usize>,
    alpha: Option<f64>,
    q0: Option<f64>,
    #[serde(rename = "L")]
    elite: Option<usize>,
    oracle: Option<bool>,
    seed: Option<u64>,
    init_std: Option<f64>,
    #[serde(rename = "s")]
    model_scale: Option<f64>,
    model: Option<String>,
    optimizer: Option<String>,
}

fn optimizer_id(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Plain => "plain",
        OptimizerKind::Adam => "adam",
    }
}

fn parse_optimizer(id: &str) -> Result<OptimizerKind, CliError> {
    match id {
        "plain" => Ok(OptimizerKind::Plain),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(CliError::Config(format!(
            "unknown optimizer {other:?}; expected \"plain\" or \"adam\""
        ))),
    }
}

/// Parses a flat JSON config; see [`load_config`].
pub fn config_from_str(text: &str) -> Result<RunConfig, CliError> {
    let file: ConfigFile = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("config parse: {e}")))?;
    let mut cfg = RunConfig::default();
    if let Some(v) = file.env {
        cfg.env = v;
    }
    if let Some(v) = file.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = file.algorithm {
        cfg.algorithm = Algorithm::from_id(&v)?;
    }
    if let Some(v) = file.steps {
        cfg.steps = v;
    }
    if let Some(v) = file.eta {
        cfg.eta = v;
    }
    if let Some(v) = file.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = file.samples {
        cfg.samples = v;
    }
    if let Some(v) = file.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = file.q0 {
        cfg.q0 = v;
    }
    if file.elite.is_some() {
        cfg.elite = file.elite;
    }
    if let Some(v) = file.oracle {
        cfg.oracle = v;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.init_std {
        cfg.init_std = v;
    }
    if let Some(v) = file.model_scale {
        cfg.model_scale = v;
    }
    if let Some(v) = file.model {
        cfg.model = v;
    }
    if let Some(v) = file.optimizer {
        cfg.optimizer = parse_optimizer(&v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a UTF-8 JSON config with flat keys mirroring [`RunConfig`]
/// (`N` = steps, `M` = samples, `L` = elite, `s` = model scale). Unknown
/// keys are rejected; absent keys take the stock pendulum defaults.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    config_from_str(&text)
}

/// The config rendered back as the same flat JSON dialect `load_config`
/// accepts, with every field explicit. Keys are emitted sorted, so the
/// bytes are a pure function of the config.
pub fn config_echo_json(cfg: &RunConfig) -> String {
    let value = serde_json::json!({
        "env": cfg.env,
        "horizon": cfg.horizon,
        "algorithm": cfg.algorithm.id(),
        "N": cfg.steps,
        "eta": cfg.eta,
        "sigma": cfg.sigma,
        "M": cfg.samples,
        "alpha": cfg.alpha,
        "q0": cfg.q0,
        "L": cfg.elite,
        "oracle": cfg.oracle,
        "seed": cfg.seed,
        "init_std": cfg.init_std,
        "s": cfg.model_scale,
        "model": cfg.model,
        "optimizer": optimizer_id(cfg.optimizer),
    });
    let mut text = serde_json::to_string_pretty(&value).expect("plain json cannot fail");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// Experiment execution

/// One emitted point of a learning curve.
#[derive(Clone, Copy, Debug)]
pub struct CurveRow {
    pub iteration: usize,
    pub rollouts: u64,
    pub j: f64,
    /// Running maximum over every record up to here, thinned-away ones
    /// included.
    pub j_max: f64,
}

/// Everything retained from one seed's run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    /// The experiment seed index, as listed on the command line.
    pub seed: u64,
    /// The RNG stream seed actually run, mixed from `(master, seed)`.
    pub run_seed: u64,
    pub rows: Vec<CurveRow>,
    pub j_max: f64,
    pub solved: bool,
    /// Cumulative rollouts at the first record above the solve threshold.
    pub rollouts_to_solve: Option<u64>,
    pub total_rollouts: u64,
    /// Rollouts spent collecting model training data, counted separately
    /// from the run's own interaction.
    pub training_rollouts: u64,
    pub error: Option<String>,
}

/// Aggregated outcome of one config run across seeds.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub threshold: f64,
}

impl ExperimentResult {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    /// Solved count over seed count, exactly.
    pub fn solve_rate(&self) -> f64 {
        let solved = self.runs.iter().filter(|r| r.solved).count();
        solved as f64 / self.runs.len() as f64
    }

    pub fn solved_flags(&self) -> Vec<f64> {
        self.runs.iter().map(|r| if r.solved { 1.0 } else { 0.0 }).collect()
    }

    /// Best returns of the seeds that recorded at least one evaluation.
    pub fn j_maxes(&self) -> Vec<f64> {
        self.runs.iter().filter(|r| !r.rows.is_empty()).map(|r| r.j_max).collect()
    }

    pub fn rollouts_to_solve(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.rollouts_to_solve)
            .map(|n| n as f64)
            .collect()
    }

    /// Mean return and bootstrap CI at every recorded iteration, pooled
    /// across seeds; the sample count varies where seeds aborted early.
    pub fn per_iteration_mean_ci(
        &self,
        resamples: usize,
        rng: &mut impl Rng,
    ) -> Vec<(usize, usize, f64, f64, f64)> {
        let mut grid: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for run in &self.runs {
            for row in &run.rows {
                grid.entry(row.iteration).or_default().push(row.j);
            }
        }
        grid.into_iter()
            .map(|(iteration, js)| {
                let mean = js.iter().sum::<f64>() / js.len() as f64;
                let (lo, hi) = bootstrap_ci(&js, 0.95, resamples, rng)
                    .expect("non-empty by construction");
                (iteration, js.len(), mean, lo, hi)
            })
            .collect()
    }
}

/// Iteration distance between emitted rows: 1 up to
/// [`MAX_EMITTED_ROWS`] steps, `ceil(N / MAX_EMITTED_ROWS)` beyond.
pub fn record_stride(steps: usize) -> usize {
    if steps <= MAX_EMITTED_ROWS {
        1
    } else {
        steps.div_ceil(MAX_EMITTED_ROWS)
    }
}

fn thin_curve(curve: &LearningCurve, stride: usize) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    let mut j_max = f64::NEG_INFINITY;
    let last = curve.records.len().wrapping_sub(1);
    for (i, rec) in curve.records.iter().enumerate() {
        j_max = j_max.max(rec.j);
        if rec.iteration % stride == 0 || i == last {
            rows.push(CurveRow { iteration: rec.iteration, rollouts: rec.rollouts, j: rec.j, j_max });
        }
    }
    rows
}

/// Rejects everything a run of this config would reject, before any seed
/// starts: field validation, algorithm preconditions, and the env/model
/// names the harness knows how to construct.
pub fn experiment_preflight(cfg: &RunConfig) -> Result<(), CliError> {
    preflight(cfg)?;
    if cfg.env != "pendulum" {
        return Err(CliError::Config(format!(
            "unknown env {:?}; the harness only constructs \"pendulum\"",
            cfg.env
        )));
    }
    if cfg.algorithm.needs_model() && !matches!(cfg.model.as_str(), "exact" | "mlp") {
        return Err(CliError::Config(format!(
            "unknown model {:?}; expected \"exact\" or \"mlp\"",
            cfg.model
        )));
    }
    Ok(())
}

fn build_and_run(cfg: &RunConfig) -> Result<(RunOutcome, u64), CliError> {
    let params = *PendulumEnv::default_task().params();
    let env = PendulumEnv::new(params, cfg.horizon)?;
    let mut training_rollouts = 0;
    let model: Option<Box<dyn DifferentiableModel>> = if cfg.algorithm.needs_model() {
        match cfg.model.as_str() {
            "exact" => Some(Box::new(perturbed_pendulum_model(
                &params,
                cfg.model_scale,
                derive_model_seed(cfg.seed),
            )?)),
            "mlp" => {
                let counter = RolloutCounter::new();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_model_seed(cfg.seed));
                let mlp = train_mlp_model(&env, &MlpConfig::default(), &mut rng, &counter)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                training_rollouts = counter.count();
                Some(Box::new(mlp))
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown model {other:?}; expected \"exact\" or \"mlp\""
                )))
            }
        }
    } else {
        None
    };
    let outcome = run_algorithm_with(cfg, &env, model.as_deref(), RecordSpec::default())?;
    Ok((outcome, training_rollouts))
}

fn run_one_seed(base: &RunConfig, seed: u64) -> SeedRun {
    let mut cfg = base.clone();
    cfg.seed = derive_run_seed(base.seed, seed);
    let stride = record_stride(cfg.steps);
    match build_and_run(&cfg) {
        Ok((outcome, training_rollouts)) => {
            let curve = &outcome.curve;
            SeedRun {
                seed,
                run_seed: cfg.seed,
                rows: thin_curve(curve, stride),
                j_max: curve.j_max,
                solved: curve.j_max > SOLVE_THRESHOLD,
                rollouts_to_solve: curve.rollouts_to_reach(SOLVE_THRESHOLD),
                total_rollouts: curve.total_rollouts,
                training_rollouts,
                error: outcome.error.map(|e| e.to_string()),
            }
        }
        Err(e) => SeedRun {
            seed,
            run_seed: cfg.seed,
            rows: Vec::new(),
            j_max: f64::NEG_INFINITY,
            solved: false,
            rollouts_to_solve: None,
            total_rollouts: 0,
            training_rollouts: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Runs the configured algorithm once per seed, in parallel, and
/// aggregates. Config problems fail the whole experiment up front; a
/// numeric failure inside one seed's run is recorded on that seed and the
/// experiment continues.
pub fn run_experiment(cfg: &RunConfig, seeds: &[u64]) -> Result<ExperimentResult, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".to_owned()));
    }
    experiment_preflight(cfg)?;
    let runs: Vec<SeedRun> = seeds.par_iter().map(|&s| run_one_seed(cfg, s)).collect();
    Ok(ExperimentResult {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        runs,
        threshold: SOLVE_THRESHOLD,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap statistics

fn bootstrap_stat(
    samples: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut impl Rng,
    stat: impl Fn(&mut [f64]) -> f64,
) -> (f64, f64) {
    let n = samples.len();
    let mut draw = vec![0.0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in draw.iter_mut() {
            *slot = samples[rng.random_range(0..n)];
        }
        stats.push(stat(&mut draw));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (stats[percentile_index(resamples, tail)], stats[percentile_index(resamples, 1.0 - tail)])
}

/// Nearest-rank index of the `q`-quantile among `n` sorted values.
fn percentile_index(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n) - 1
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median_sorted(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median of a sample, `NaN` when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    median_sorted(&mut xs.to_vec())
}

/// Percentile bootstrap CI of the sample mean: `resamples` draws of `n`
/// with replacement, interval between the `(1-level)/2` and `(1+level)/2`
/// quantiles of the resampled means. Deterministic given the rng state.
pub fn bootstrap_ci(
    samples: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64), CliError> {
    if samples.is_empty() {
        return Err(CliError::Config("bootstrap needs at least one sample".to_owned()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    if resamples == 0 {
        return Err(CliError::Config("resamples must be at least 1".to_owned()));
    }
    Ok(bootstrap_stat(samples, level, resamples, rng, |xs| mean(xs)))
}

// ---------------------------------------------------------------------------
// Emission

/// `{:.16e}`: 17 significant digits, enough to round-trip any finite `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

const SUMMARY_RESAMPLES: usize = 10_000;
const CURVE_RESAMPLES: usize = 1_000;
/// All emitted CIs are 95% intervals.
const CI_LEVEL: f64 = 0.95;
/// Fixed stream for the emission-time bootstrap; outputs stay a pure
/// function of the aggregated data.
const BOOTSTRAP_SEED: u64 = 0xB007;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error("write", path, e))
}

fn summary_row(out: &mut String, metric: &str, value: f64, lo: f64, hi: f64) {
    writeln!(out, "{metric},{},{},{}", fmt17(value), fmt17(lo), fmt17(hi)).unwrap();
}

/// Writes `curves.csv`, `summary.csv`, `aggregate.csv`, `config.json` and
/// `meta.json` under `out_dir`, creating it if needed, and returns the
/// paths. Floats are serialized with 17 significant digits so parsing the
/// files recovers them bit-exactly.
pub fn emit_results(result: &ExperimentResult, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| io_error("create", out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);

    let mut curves = String::from("seed,iteration,rollouts,J,J_max\n");
    for run in &result.runs {
        for row in &run.rows {
            writeln!(
                curves,
                "{},{},{},{},{}",
                run.seed,
                row.iteration,
                row.rollouts,
                fmt17(row.j),
                fmt17(row.j_max)
            )
            .unwrap();
        }
    }

    let mut summary = String::from("metric,value,ci_lo,ci_hi\n");
    let flags = result.solved_flags();
    let rate = result.solve_rate();
    let (lo, hi) = bootstrap_ci(&flags, CI_LEVEL, SUMMARY_RESAMPLES, &mut rng)?;
    summary_row(&mut summary, "solve_rate", rate, lo, hi);

    let j_maxes = result.j_maxes();
    if j_maxes.is_empty() {
        summary_row(&mut summary, "j_max_mean", f64::NAN, f64::NAN, f64::NAN);
    } else {
        let (lo, hi) = bootstrap_ci(&j_maxes, CI_LEVEL, SUMMARY_RESAMPLES, &mut rng)?;
        summary_row(&mut summary, "j_max_mean", mean(&j_maxes), lo, hi);
    }

    let to_solve = result.rollouts_to_solve();
    if to_solve.is_empty() {
        summary_row(&mut summary, "rollouts_to_solve_median", f64::NAN, f64::NAN, f64::NAN);
    } else {
        let med = median(&to_solve);
        let (lo, hi) =
            bootstrap_stat(&to_solve, CI_LEVEL, SUMMARY_RESAMPLES, &mut rng, median_sorted);
        summary_row(&mut summary, "rollouts_to_solve_median", med, lo, hi);
    }

    let totals: Vec<f64> = result.runs.iter().map(|r| r.total_rollouts as f64).collect();
    let (lo, hi) = bootstrap_ci(&totals, CI_LEVEL, SUMMARY_RESAMPLES, &mut rng)?;
    summary_row(&mut summary, "total_rollouts_mean", mean(&totals), lo, hi);

    let n = result.runs.len() as f64;
    summary_row(&mut summary, "n_seeds", n, n, n);
    let failed = result.failures() as f64;
    summary_row(&mut summary, "n_failed", failed, failed, failed);

    let mut aggregate = String::from("iteration,n_seeds,mean_J,ci_lo,ci_hi\n");
    for (iteration, count, mean_j, lo, hi) in
        result.per_iteration_mean_ci(CURVE_RESAMPLES, &mut rng)
    {
        writeln!(
            aggregate,
            "{iteration},{count},{},{},{}",
            fmt17(mean_j),
            fmt17(lo),
            fmt17(hi)
        )
        .unwrap();
    }

    let config_json = config_echo_json(&result.config);

    let mut errors = serde_json::Map::new();
    for run in &result.runs {
        if let Some(e) = &run.error {
            errors.insert(run.seed.to_string(), serde_json::json!(e));
        }
    }
    let meta = serde_json::json!({
        "config_hash": format!("{:016x}", fnv1a64(config_json.as_bytes())),
        "version": env!("CARGO_PKG_VERSION"),
        "threshold": result.threshold,
        "seeds": result.seeds,
        "run_seeds": result.runs.iter().map(|r| r.run_seed).collect::<Vec<_>>(),
        "training_rollouts": result.runs.iter().map(|r| r.training_rollouts).collect::<Vec<_>>(),
        "errors": serde_json::Value::Object(errors),
    });
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("plain json cannot fail");
    meta_json.push('\n');

    let files = [
        ("curves.csv", curves),
        ("summary.csv", summary),
        ("aggregate.csv", aggregate),
        ("config.json", config_json),
        ("meta.json", meta_json),
    ];
    let mut paths = Vec::new();
    for (name, contents) in files {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Sweeps

/// The config keys `sweep` can grid over, with their target fields.
pub const SWEEP_KEYS: [&str; 9] =
    ["sigma", "eta", "alpha", "q0", "init_std", "s", "M", "N", "L"];

fn parse_sweep_f64(key: &str, raw: &str) -> Result<f64, CliError> {
    raw.parse::<f64>()
        .map_err(|_| CliError::Config(format!("sweep value {raw:?} for {key} is not a number")))
}

fn parse_sweep_usize(key: &str, raw: &str) -> Result<usize, CliError> {
    raw.parse::<usize>().map_err(|_| {
        CliError::Config(format!("sweep value {raw:?} for {key} is not a nonnegative integer"))
    })
}

/// Returns `base` with one field replaced by the parsed sweep value.
pub fn apply_sweep_value(base: &RunConfig, key: &str, raw: &str) -> Result<RunConfig, CliError> {
    let mut cfg = base.clone();
    match key {
        "sigma" => cfg.sigma = parse_sweep_f64(key, raw)?,
        "eta" => cfg.eta = parse_sweep_f64(key, raw)?,
        "alpha" => cfg.alpha = parse_sweep_f64(key, raw)?,
        "q0" => cfg.q0 = parse_sweep_f64(key, raw)?,
        "init_std" => cfg.init_std = parse_sweep_f64(key, raw)?,
        "s" => cfg.model_scale = parse_sweep_f64(key, raw)?,
        "M" => cfg.samples = parse_sweep_usize(key, raw)?,
        "N" => cfg.steps = parse_sweep_usize(key, raw)?,
        "L" => cfg.elite = Some(parse_sweep_usize(key, raw)?),
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep key {other:?}; expected one of {SWEEP_KEYS:?}"
            )))
        }
    }
    Ok(cfg)
}

fn sweep_dir_component(key: &str, raw: &str) -> Result<String, CliError> {
    let ok = !raw.is_empty()
        && raw.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+' | '_'));
    if ok {
        Ok(format!("{key}={raw}"))
    } else {
        Err(CliError::Config(format!("sweep value {raw:?} cannot name a directory")))
    }
}

/// One grid point of a sweep.
#[derive(Debug)]
pub struct SweepEntry {
    pub value: String,
    pub result: ExperimentResult,
}

/// Runs `base` once per value of `key`, emitting each grid point into
/// `out_dir/<key>=<value>/` plus a top-level `sweep.csv`. All grid points
/// are validated before any of them runs.
pub fn run_sweep(
    base: &RunConfig,
    key: &str,
    values: &[String],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepEntry>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".to_owned()));
    }
    let mut staged = Vec::new();
    for raw in values {
        let cfg = apply_sweep_value(base, key, raw)?;
        experiment_preflight(&cfg)?;
        staged.push((sweep_dir_component(key, raw)?, raw.clone(), cfg));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_error("create", out_dir, e))?;

    let mut entries = Vec::new();
    let mut sweep_csv = String::from("key,value,solve_rate,ci_lo,ci_hi,j_max_mean,n_failed\n");
    for (dir, raw, cfg) in staged {
        let result = run_experiment(&cfg, seeds)?;
        emit_results(&result, &out_dir.join(dir))?;
        let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
        let (lo, hi) =
            bootstrap_ci(&result.solved_flags(), CI_LEVEL, SUMMARY_RESAMPLES, &mut rng)?;
        let j_maxes = result.j_maxes();
        let j_mean = if j_maxes.is_empty() { f64::NAN } else { mean(&j_maxes) };
        writeln!(
            sweep_csv,
            "{key},{raw},{},{},{},{},{}",
            fmt17(result.solve_rate()),
            fmt17(lo),
            fmt17(hi),
            fmt17(j_mean),
            result.failures()
        )
        .unwrap();
        entries.push(SweepEntry { value: raw, result });
    }
    write_file(&out_dir.join("sweep.csv"), &sweep_csv)?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Self-checks

/// One line of the `check` subcommand's report.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// The measured quantity; smaller is better for every check.
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn check(name: &'static str, value: f64, threshold: f64) -> CheckOutcome {
    CheckOutcome { name, value, threshold, pass: value <= threshold }
}

/// Gradient and rate-guarantee suites against independent references:
/// central differences on the cart-pole and on random linear-quadratic
/// instances, the Riccati-solved optimum, and the guaranteed ascent rate.
/// Deterministic; a second call reports identical numbers.
pub fn run_checks() -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);

    let pendulum = PendulumEnv::default_task();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let spec = pendulum.spec();
        let actions = pink_noise_sequence(spec.horizon, spec.action_dim, 0.05, &mut rng)?;
        worst = worst.max(gradient_check(&pendulum, &actions, 1e-5)?.max_relative_error);
    }
    out.push(check("pendulum_gradient_rel_err", worst, 1e-4));

    let mut instances = Vec::new();
    for _ in 0..10 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=2);
        let horizon = rng.random_range(2..=20);
        instances.push(olrl::env::LqrEnv::random_stable(d, k, horizon, &mut rng));
    }

    let mut worst = 0.0f64;
    for env in &instances {
        let spec = env.spec();
        let actions = pink_noise_sequence(spec.horizon, spec.action_dim, 0.3, &mut rng)?;
        worst = worst.max(gradient_check(env, &actions, 1e-5)?.max_relative_error);
    }
    out.push(check("lqr_gradient_rel_err", worst, 1e-4));

    let mut worst_gap = 0.0f64;
    let mut rate_violations = 0usize;
    for env in &instances {
        let l = env.smoothness_bound();
        let spec = env.spec();
        let cfg = RunConfig {
            steps: 4000,
            eta: 1.0 / l,
            optimizer: OptimizerKind::Plain,
            init_std: 0.3,
            seed: rng.random::<u64>(),
            horizon: spec.horizon,
            ..RunConfig::default()
        };
        let model = olrl::models::LinearModel::new(env.a().clone(), env.b().clone())?;
        let record = RecordSpec { oracle: true, ..RecordSpec::default() };
        let outcome = olrl::algorithms::run_model_based_with(&cfg, env, &model, record)?;
        if let Some(e) = outcome.error {
            return Err(CliError::Runtime(format!("check run failed: {e}")));
        }
        worst_gap = worst_gap.max(env.optimal_return() - outcome.curve.j_max);
        let constants = TheoryConstants::new(0.0, 0.0, l, cfg.eta)?;
        let report = rate_guarantee_report(&outcome.curve, &constants, env.optimal_return())?;
        rate_violations += report.satisfied.iter().filter(|&&ok| !ok).count();
    }
    out.push(check("lqr_riccati_gap", worst_gap, 1e-6));
    out.push(check("rate_guarantee_violations", rate_violations as f64, 0.0));

    Ok(out)
}

/// Renders check outcomes as `check.csv` under `out_dir`.
pub fn emit_checks(checks: &[CheckOutcome], out_dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| io_error("create", out_dir, e))?;
    let mut csv = String::from("check,value,threshold,pass\n");
    for c in checks {
        writeln!(csv, "{},{},{},{}", c.name, fmt17(c.value), fmt17(c.threshold), c.pass).unwrap();
    }
    let path = out_dir.join("check.csv");
    write_file(&path, &csv)?;
    Ok(path)
}

// ---------------------------------------------------------------------------

/// Parses `--seeds`: a bare integer `N` means seeds `0..N`, a comma list
/// gives explicit seed values.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = |t: &str| CliError::Config(format!("seed {t:?} is not a nonnegative integer"));
    if text.contains(',') {
        text.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u64>().map_err(|_| bad(t)))
            .collect()
    } else {
        let n = text.trim().parse::<u64>().map_err(|_| bad(text))?;
        Ok((0..n).collect())
    }
}
