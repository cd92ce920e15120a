//! Experiment runner: seed, length and supervision sweeps, the baseline
//! hyperparameter search, expected-best reporting and CSV/JSON emission.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{make_synthetic, IngestConfig, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::lei::{evaluate_e2e, mean_generator_ratio, train_e2e, E2EConfig};
use crate::model::evaluate;
use crate::pipeline::{run_fresh, train_support, FreshConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_SEEDS: [u64; 5] = [13, 17, 29, 42, 71];
/// Second seed set for re-running stochastic comparisons.
pub const FALLBACK_SEEDS: [u64; 5] = [101, 211, 307, 401, 503];
pub const DEFAULT_RATIOS: [f64; 3] = [0.1, 0.2, 0.3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullText,
    #[default]
    Fresh,
    E2eBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullText => "full_text",
            Method::Fresh => "fresh",
            Method::E2eBaseline => "e2e_baseline",
        }
    }

    fn replay_command(self) -> &'static str {
        match self {
            Method::FullText => "run-fresh --full-text",
            Method::Fresh => "run-fresh",
            Method::E2eBaseline => "run-e2e",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "full_text" => Ok(Method::FullText),
            "fresh" => Ok(Method::Fresh),
            "e2e_baseline" => Ok(Method::E2eBaseline),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        synth: SynthConfig,
    },
    /// A directory written by `ingest` or `synth`: split JSONL files plus
    /// `vocab.txt`.
    Directory {
        path: PathBuf,
        #[serde(default)]
        ingest: IngestConfig,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 1,
            synth: SynthConfig::default(),
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DataSource::Synthetic { seed, synth } => Ok(make_synthetic(synth, *seed)?.splits),
            DataSource::Directory { path, ingest } => Splits::read_dir(path, ingest),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub trials: usize,
    pub lambda1_min: f64,
    pub lambda1_max: f64,
    pub lambda2_choices: Vec<f64>,
    pub seed: u64,
    pub ratio: f64,
    pub fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            trials: 20,
            lambda1_min: 1e-2,
            lambda1_max: 1.0,
            lambda2_choices: vec![0.0, 0.5, 1.0, 2.0],
            seed: 0,
            ratio: 0.2,
            fraction: 0.0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("a sweep needs at least one trial".into()));
        }
        if !(self.lambda1_min > 0.0 && self.lambda1_min <= self.lambda1_max) {
            return Err(Error::Config("lambda1 range must satisfy 0 < min <= max".into()));
        }
        if self.lambda2_choices.is_empty() || self.lambda2_choices.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("lambda2 choices must be nonempty and nonnegative".into()));
        }
        Ok(())
    }
}

/// The versioned run configuration read by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataSource,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
    pub fractions: Vec<f64>,
    pub fresh: FreshConfig,
    pub e2e: E2EConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            data: DataSource::default(),
            method: Method::Fresh,
            seeds: DEFAULT_SEEDS.to_vec(),
            ratios: vec![0.2],
            fractions: vec![0.0],
            fresh: FreshConfig::default(),
            e2e: E2EConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Config("ratios must be nonempty and lie in (0, 1]".into()));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config("fractions must be nonempty and lie in [0, 1]".into()));
        }
        self.sweep.validate()
    }

    /// The cells of the sweep in execution order. Full-text runs ignore the
    /// ratio and fraction axes and get one cell per seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            if self.method == Method::FullText {
                cells.push(Cell { seed, ratio: 1.0, fraction: 0.0 });
                continue;
            }
            for &ratio in &self.ratios {
                for &fraction in &self.fractions {
                    cells.push(Cell { seed, ratio, fraction });
                }
            }
        }
        cells
    }

    pub fn fresh_config(&self, cell: &Cell) -> FreshConfig {
        let mut cfg = self.fresh.clone();
        cfg.seed = cell.seed;
        cfg.budget.ratio = cell.ratio;
        cfg.supervision = cell.fraction;
        cfg
    }

    /// The baseline at a matched budget: the regularizer's desired ratio and
    /// the inference truncation both follow the cell ratio.
    pub fn e2e_config(&self, cell: &Cell) -> E2EConfig {
        let mut cfg = self.e2e;
        cfg.regularizer.desired_ratio = cell.ratio;
        cfg.truncation_ratio = cell.ratio;
        cfg
    }

    /// Content hash of everything that determines a cell's result.
    pub fn cell_key(&self, cell: &Cell) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            data: &'a DataSource,
            method: Method,
            seed: u64,
            fresh: Option<FreshConfig>,
            e2e: Option<(E2EConfig, f64)>,
        }
        let keyed = Keyed {
            data: &self.data,
            method: self.method,
            seed: cell.seed,
            fresh: match self.method {
                Method::E2eBaseline => None,
                Method::FullText => {
                    let mut cfg = self.fresh_config(cell);
                    cfg.budget = Default::default();
                    cfg.supervision = 0.0;
                    Some(cfg)
                }
                Method::Fresh => Some(self.fresh_config(cell)),
            },
            e2e: (self.method == Method::E2eBaseline).then(|| (self.e2e_config(cell), cell.fraction)),
        };
        let json = serde_json::to_string(&keyed).expect("configs serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub ratio: f64,
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: String,
    pub method: Method,
    pub scorer: String,
    pub strategy: String,
    pub scope: String,
    pub p: f64,
    pub f: f64,
    pub seed: u64,
    pub status: Status,
    pub dev_macro_f1: Option<f64>,
    pub test_macro_f1: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub mean_rationale_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    pub error: Option<String>,
    pub replay: String,
}

impl ReportRow {
    fn group(&self) -> (Method, &str, &str, &str, u64, u64) {
        (
            self.method,
            &self.scorer,
            &self.strategy,
            &self.scope,
            self.p.to_bits(),
            self.f.to_bits(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub scorer: String,
    pub strategy: String,
    pub scope: String,
    pub p: f64,
    pub f: f64,
    /// Successful cells aggregated.
    pub n: usize,
    pub dev_macro_f1_mean: f64,
    pub test_macro_f1_mean: f64,
    pub test_macro_f1_min: f64,
    pub test_macro_f1_max: f64,
    /// Sample standard deviation; 0 for a single cell.
    pub test_macro_f1_std: f64,
    pub test_accuracy_mean: f64,
    pub mean_rationale_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n - 1) standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Aggregate successful rows per configuration, in order of first
/// appearance.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.status == Status::Ok) {
        let idx = match order.iter().position(|g| *g == row.group()) {
            Some(i) => i,
            None => {
                order.push(row.group());
                order.len() - 1
            }
        };
        groups.entry(idx).or_default().push(row);
    }
    groups
        .into_values()
        .map(|members| {
            let collect = |f: fn(&ReportRow) -> Option<f64>| members.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let test = collect(|r| r.test_macro_f1);
            let first = members[0];
            AggregateRow {
                method: first.method,
                scorer: first.scorer.clone(),
                strategy: first.strategy.clone(),
                scope: first.scope.clone(),
                p: first.p,
                f: first.f,
                n: members.len(),
                dev_macro_f1_mean: mean(&collect(|r| r.dev_macro_f1)),
                test_macro_f1_mean: mean(&test),
                test_macro_f1_min: test.iter().copied().fold(f64::INFINITY, f64::min),
                test_macro_f1_max: test.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                test_macro_f1_std: sample_std(&test),
                test_accuracy_mean: mean(&collect(|r| r.test_accuracy)),
                mean_rationale_ratio: mean(&collect(|r| r.mean_rationale_ratio)),
            }
        })
        .collect()
}

struct CellMetrics {
    dev_macro_f1: f64,
    test_macro_f1: f64,
    test_accuracy: f64,
    mean_rationale_ratio: f64,
}

fn run_cell(data: &Splits, cfg: &ExperimentConfig, cell: &Cell) -> Result<CellMetrics> {
    match cfg.method {
        Method::FullText => {
            let fresh = cfg.fresh_config(cell);
            let outcome = train_support(data, &fresh)?;
            let dev = evaluate(&outcome.params, &data.dev, None)?;
            let test = evaluate(&outcome.params, &data.test, None)?;
            Ok(CellMetrics {
                dev_macro_f1: dev.macro_f1,
                test_macro_f1: test.macro_f1,
                test_accuracy: test.accuracy,
                mean_rationale_ratio: 1.0,
            })
        }
        Method::Fresh => {
            let result = run_fresh(data, &cfg.fresh_config(cell))?;
            Ok(CellMetrics {
                dev_macro_f1: result.classifier.dev.macro_f1,
                test_macro_f1: result.classifier.test.macro_f1,
                test_accuracy: result.classifier.test.accuracy,
                mean_rationale_ratio: result.mean_rationale_ratio,
            })
        }
        Method::E2eBaseline => {
            let e2e = cfg.e2e_config(cell);
            let outcome = train_e2e(data, &e2e, cell.fraction, cell.seed)?;
            let (dev, _) = evaluate_e2e(&outcome.generator, &outcome.encoder, &data.dev, e2e.truncation_ratio)?;
            let (test, masks) = evaluate_e2e(&outcome.generator, &outcome.encoder, &data.test, e2e.truncation_ratio)?;
            let ratio = mean(
                &masks
                    .iter()
                    .zip(data.test.documents())
                    .map(|(m, d)| m.len() as f64 / d.len() as f64)
                    .collect::<Vec<f64>>(),
            );
            Ok(CellMetrics {
                dev_macro_f1: dev.macro_f1,
                test_macro_f1: test.macro_f1,
                test_accuracy: test.accuracy,
                mean_rationale_ratio: ratio,
            })
        }
    }
}

fn describe(cfg: &ExperimentConfig) -> (String, String, String) {
    match cfg.method {
        Method::FullText => ("none".into(), "none".into(), "none".into()),
        Method::Fresh => {
            let b = &cfg.fresh.budget;
            let scope = serde_json::to_value(b.scope).expect("serializable");
            let strategy = serde_json::to_value(b.strategy).expect("serializable");
            (
                cfg.fresh.scorer.as_str().into(),
                format!("{}/{}", strategy.as_str().unwrap_or_default(), cfg.fresh.extractor.as_str()),
                scope.as_str().unwrap_or_default().into(),
            )
        }
        Method::E2eBaseline => ("generator".into(), "truncate".into(), "instance".into()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Recorded in each row's replay command.
    pub config_path: Option<String>,
    /// Rows of an earlier run; successful cells with the same content hash
    /// are kept rather than recomputed.
    pub previous: Option<ExperimentReport>,
}

pub fn replay_command(method: Method, config_path: &str, cell: &Cell) -> String {
    format!(
        "fresh {} --config {config_path} --seed {} --ratios {} --fractions {}",
        method.replay_command(),
        cell.seed,
        cell.ratio,
        cell.fraction
    )
}

/// Run every cell of `cfg`. Cell failures become error rows; only a data
/// loading failure aborts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, &RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows: Vec<ReportRow> = opts.previous.as_ref().map(|r| r.rows.clone()).unwrap_or_default();
    let done: HashSet<String> = rows
        .iter()
        .filter(|r| r.status == Status::Ok)
        .map(|r| r.key.clone())
        .collect();
    let pending: Vec<(Cell, String)> = cfg
        .cells()
        .into_iter()
        .map(|c| {
            let key = cfg.cell_key(&c);
            (c, key)
        })
        .filter(|(_, key)| !done.contains(key))
        .collect();
    if !pending.is_empty() {
        let data = cfg.data.load()?;
        let (scorer, strategy, scope) = describe(cfg);
        let config_path = opts.config_path.as_deref().unwrap_or("<config>");
        let fresh_rows: Vec<ReportRow> = pending
            .par_iter()
            .map(|(cell, key)| {
                let start = Instant::now();
                let outcome = run_cell(&data, cfg, cell);
                let wall = start.elapsed().as_secs_f64();
                let mut row = ReportRow {
                    key: key.clone(),
                    method: cfg.method,
                    scorer: scorer.clone(),
                    strategy: strategy.clone(),
                    scope: scope.clone(),
                    p: cell.ratio,
                    f: cell.fraction,
                    seed: cell.seed,
                    status: Status::Ok,
                    dev_macro_f1: None,
                    test_macro_f1: None,
                    test_accuracy: None,
                    mean_rationale_ratio: None,
                    wall_time_s: Some(wall),
                    error: None,
                    replay: replay_command(cfg.method, config_path, cell),
                };
                match outcome {
                    Ok(m) => {
                        row.dev_macro_f1 = Some(m.dev_macro_f1);
                        row.test_macro_f1 = Some(m.test_macro_f1);
                        row.test_accuracy = Some(m.test_accuracy);
                        row.mean_rationale_ratio = Some(m.mean_rationale_ratio);
                    }
                    Err(e) => {
                        row.status = Status::Error;
                        row.error = Some(format!("{}: {e}", e.kind()));
                    }
                }
                row
            })
            .collect();
        let replaced: HashSet<&str> = fresh_rows.iter().map(|r| r.key.as_str()).collect();
        rows.retain(|r| !replaced.contains(r.key.as_str()));
        rows.extend(fresh_rows);
    }
    let aggregates = aggregate(&rows);
    Ok(ExperimentReport { rows, aggregates })
}

/// Expected maximum of `n` draws with replacement from `scores`:
/// `sum_i v_(i) * ((i/N)^n - ((i-1)/N)^n)` over the ascending order
/// statistics.
pub fn expected_best(scores: &[f64], n: u64) -> Result<f64> {
    if scores.is_empty() || n == 0 {
        return Err(Error::Config("expected_best needs scores and n >= 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let len = sorted.len() as f64;
    let exponent = n.min(i32::MAX as u64) as i32;
    let cdf = |i: usize| (i as f64 / len).powi(exponent);
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, v)| v * (cdf(i + 1) - cdf(i)))
        .sum())
}

pub const DEGENERATE_LOW: f64 = 0.02;
pub const DEGENERATE_HIGH: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub status: Status,
    /// Mean `|z| / L` of the thresholded generator on dev, before
    /// truncation.
    pub mean_rationale_ratio: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    pub test_macro_f1: Option<f64>,
    pub degenerate: Option<bool>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub trials: Vec<Trial>,
    /// Share of successful trials whose generator selects almost nothing
    /// or almost everything.
    pub degenerate_fraction: f64,
    /// `expected_best` of the dev scores for n = 1..=trials.
    pub expected_best_dev: Vec<f64>,
    pub report: ExperimentReport,
}

/// The `(lambda1, lambda2)` draws of a sweep: `lambda1` log-uniform over
/// the configured range, `lambda2` uniform over the choices.
pub fn draw_hyperparameters(sweep: &SweepConfig) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
    let (lo, hi) = (sweep.lambda1_min.ln(), sweep.lambda1_max.ln());
    (0..sweep.trials)
        .map(|_| {
            let l1 = if hi > lo { rng.gen_range(lo..hi).exp() } else { sweep.lambda1_min };
            let l2 = *sweep.lambda2_choices.choose(&mut rng).expect("nonempty choices");
            (l1, l2)
        })
        .collect()
}

pub fn hyperparameter_sweep(cfg: &ExperimentConfig, config_path: Option<&str>) -> Result<SweepReport> {
    cfg.validate()?;
    let sweep = &cfg.sweep;
    let data = cfg.data.load()?;
    let draws = draw_hyperparameters(sweep);
    let cell_base = Cell {
        seed: sweep.seed,
        ratio: sweep.ratio,
        fraction: sweep.fraction,
    };
    let base = cfg.e2e_config(&cell_base);
    let results: Vec<(Trial, ReportRow)> = draws
        .par_iter()
        .enumerate()
        .map(|(trial, &(lambda1, lambda2))| {
            let seed = sweep.seed.wrapping_add(trial as u64 + 1);
            let mut e2e = base;
            e2e.regularizer.lambda1 = lambda1;
            e2e.regularizer.lambda2 = lambda2;
            let start = Instant::now();
            let outcome = (|| {
                let out = train_e2e(&data, &e2e, sweep.fraction, seed)?;
                let ratio = mean_generator_ratio(&out.generator, &data.dev)?;
                let (dev, _) = evaluate_e2e(&out.generator, &out.encoder, &data.dev, e2e.truncation_ratio)?;
                let (test, _) = evaluate_e2e(&out.generator, &out.encoder, &data.test, e2e.truncation_ratio)?;
                Ok::<_, Error>((ratio, dev, test))
            })();
            let wall = start.elapsed().as_secs_f64();
            let mut t = Trial {
                trial,
                lambda1,
                lambda2,
                seed,
                status: Status::Ok,
                mean_rationale_ratio: None,
                dev_macro_f1: None,
                test_macro_f1: None,
                degenerate: None,
                error: None,
            };
            let mut row = ReportRow {
                key: format!("trial-{trial:03}"),
                method: Method::E2eBaseline,
                scorer: "generator".into(),
                strategy: "truncate".into(),
                scope: "instance".into(),
                p: sweep.ratio,
                f: sweep.fraction,
                seed,
                status: Status::Ok,
                dev_macro_f1: None,
                test_macro_f1: None,
                test_accuracy: None,
                mean_rationale_ratio: None,
                wall_time_s: Some(wall),
                error: None,
                replay: format!(
                    "fresh sweep --config {} --seed {}",
                    config_path.unwrap_or("<config>"),
                    sweep.seed
                ),
            };
            match outcome {
                Ok((ratio, dev, test)) => {
                    t.mean_rationale_ratio = Some(ratio);
                    t.dev_macro_f1 = Some(dev.macro_f1);
                    t.test_macro_f1 = Some(test.macro_f1);
                    t.degenerate = Some(!(DEGENERATE_LOW..=DEGENERATE_HIGH).contains(&ratio));
                    row.dev_macro_f1 = Some(dev.macro_f1);
                    row.test_macro_f1 = Some(test.macro_f1);
                    row.test_accuracy = Some(test.accuracy);
                    row.mean_rationale_ratio = Some(ratio);
                }
                Err(e) => {
                    let msg = format!("{}: {e}", e.kind());
                    t.status = Status::Error;
                    t.error = Some(msg.clone());
                    row.status = Status::Error;
                    row.error = Some(msg);
                }
            }
            (t, row)
        })
        .collect();
    let (trials, rows): (Vec<Trial>, Vec<ReportRow>) = results.into_iter().unzip();
    let flags: Vec<bool> = trials.iter().filter_map(|t| t.degenerate).collect();
    let degenerate_fraction = if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&d| d).count() as f64 / flags.len() as f64
    };
    let dev: Vec<f64> = trials.iter().filter_map(|t| t.dev_macro_f1).collect();
    let expected_best_dev = if dev.is_empty() {
        Vec::new()
    } else {
        (1..=sweep.trials as u64)
            .map(|n| expected_best(&dev, n))
            .collect::<Result<_>>()?
    };
    let aggregates = aggregate(&rows);
    Ok(SweepReport {
        trials,
        degenerate_fraction,
        expected_best_dev,
        report: ExperimentReport { rows, aggregates },
    })
}

/// Round to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn round_opt(x: Option<f64>) -> Option<f64> {
    x.map(round_sig)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Format> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// One CSV line: a cell (`kind = "cell"`) or a per-configuration aggregate
/// (`kind = "aggregate"`, metric columns hold means).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRecord {
    kind: String,
    key: Option<String>,
    method: Method,
    scorer: String,
    strategy: String,
    scope: String,
    p: f64,
    f: f64,
    seed: Option<u64>,
    n: Option<usize>,
    status: Option<Status>,
    dev_macro_f1: Option<f64>,
    test_macro_f1: Option<f64>,
    test_accuracy: Option<f64>,
    mean_rationale_ratio: Option<f64>,
    test_macro_f1_min: Option<f64>,
    test_macro_f1_max: Option<f64>,
    test_macro_f1_std: Option<f64>,
    error: Option<String>,
    replay: Option<String>,
}

pub const REPORT_COLUMNS: [&str; 20] = [
    "kind",
    "key",
    "method",
    "scorer",
    "strategy",
    "scope",
    "p",
    "f",
    "seed",
    "n",
    "status",
    "dev_macro_f1",
    "test_macro_f1",
    "test_accuracy",
    "mean_rationale_ratio",
    "test_macro_f1_min",
    "test_macro_f1_max",
    "test_macro_f1_std",
    "error",
    "replay",
];

/// A copy of the report with every float rounded to 6 significant digits.
pub fn rounded(report: &ExperimentReport) -> ExperimentReport {
    ExperimentReport {
        rows: report
            .rows
            .iter()
            .map(|r| ReportRow {
                p: round_sig(r.p),
                f: round_sig(r.f),
                dev_macro_f1: round_opt(r.dev_macro_f1),
                test_macro_f1: round_opt(r.test_macro_f1),
                test_accuracy: round_opt(r.test_accuracy),
                mean_rationale_ratio: round_opt(r.mean_rationale_ratio),
                wall_time_s: round_opt(r.wall_time_s),
                ..r.clone()
            })
            .collect(),
        aggregates: report
            .aggregates
            .iter()
            .map(|a| AggregateRow {
                p: round_sig(a.p),
                f: round_sig(a.f),
                dev_macro_f1_mean: round_sig(a.dev_macro_f1_mean),
                test_macro_f1_mean: round_sig(a.test_macro_f1_mean),
                test_macro_f1_min: round_sig(a.test_macro_f1_min),
                test_macro_f1_max: round_sig(a.test_macro_f1_max),
                test_macro_f1_std: round_sig(a.test_macro_f1_std),
                test_accuracy_mean: round_sig(a.test_accuracy_mean),
                mean_rationale_ratio: round_sig(a.mean_rationale_ratio),
                ..a.clone()
            })
            .collect(),
    }
}

fn to_records(report: &ExperimentReport) -> Vec<CsvRecord> {
    let cells = report.rows.iter().map(|r| CsvRecord {
        kind: "cell".into(),
        key: Some(r.key.clone()),
        method: r.method,
        scorer: r.scorer.clone(),
        strategy: r.strategy.clone(),
        scope: r.scope.clone(),
        p: r.p,
        f: r.f,
        seed: Some(r.seed),
        n: None,
        status: Some(r.status),
        dev_macro_f1: r.dev_macro_f1,
        test_macro_f1: r.test_macro_f1,
        test_accuracy: r.test_accuracy,
        mean_rationale_ratio: r.mean_rationale_ratio,
        test_macro_f1_min: None,
        test_macro_f1_max: None,
        test_macro_f1_std: None,
        error: r.error.clone(),
        replay: Some(r.replay.clone()),
    });
    let aggregates = report.aggregates.iter().map(|a| CsvRecord {
        kind: "aggregate".into(),
        key: None,
        method: a.method,
        scorer: a.scorer.clone(),
        strategy: a.strategy.clone(),
        scope: a.scope.clone(),
        p: a.p,
        f: a.f,
        seed: None,
        n: Some(a.n),
        status: None,
        dev_macro_f1: Some(a.dev_macro_f1_mean),
        test_macro_f1: Some(a.test_macro_f1_mean),
        test_accuracy: Some(a.test_accuracy_mean),
        mean_rationale_ratio: Some(a.mean_rationale_ratio),
        test_macro_f1_min: Some(a.test_macro_f1_min),
        test_macro_f1_max: Some(a.test_macro_f1_max),
        test_macro_f1_std: Some(a.test_macro_f1_std),
        error: None,
        replay: None,
    });
    cells.chain(aggregates).collect()
}

fn row_from_record(rec: CsvRecord) -> ReportRow {
    ReportRow {
        key: rec.key.unwrap_or_default(),
        method: rec.method,
        scorer: rec.scorer,
        strategy: rec.strategy,
        scope: rec.scope,
        p: rec.p,
        f: rec.f,
        seed: rec.seed.unwrap_or_default(),
        status: rec.status.unwrap_or_default(),
        dev_macro_f1: rec.dev_macro_f1,
        test_macro_f1: rec.test_macro_f1,
        test_accuracy: rec.test_accuracy,
        mean_rationale_ratio: rec.mean_rationale_ratio,
        wall_time_s: None,
        error: rec.error,
        replay: rec.replay.unwrap_or_default(),
    }
}

fn aggregate_from_record(rec: CsvRecord) -> Result<AggregateRow> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Schema(format!("aggregate row lacks `{name}`")));
    Ok(AggregateRow {
        n: rec.n.ok_or_else(|| Error::Schema("aggregate row lacks `n`".into()))?,
        dev_macro_f1_mean: need(rec.dev_macro_f1, "dev_macro_f1")?,
        test_macro_f1_mean: need(rec.test_macro_f1, "test_macro_f1")?,
        test_macro_f1_min: need(rec.test_macro_f1_min, "test_macro_f1_min")?,
        test_macro_f1_max: need(rec.test_macro_f1_max, "test_macro_f1_max")?,
        test_macro_f1_std: need(rec.test_macro_f1_std, "test_macro_f1_std")?,
        test_accuracy_mean: need(rec.test_accuracy, "test_accuracy")?,
        mean_rationale_ratio: need(rec.mean_rationale_ratio, "mean_rationale_ratio")?,
        method: rec.method,
        scorer: rec.scorer,
        strategy: rec.strategy,
        scope: rec.scope,
        p: rec.p,
        f: rec.f,
    })
}

/// Write `report` with floats rounded to 6 significant digits. CSV has a
/// fixed header (written even for an empty report) and omits wall time;
/// JSON keeps it.
pub fn emit(report: &ExperimentReport, format: Format, path: &Path) -> Result<()> {
    let report = rounded(report);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
            w.write_record(REPORT_COLUMNS)?;
            for rec in to_records(&report) {
                w.serialize(rec)?;
            }
            w.flush()?;
        }
        Format::Json => write_json(path, &report)?,
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Read a report written by [`emit`], choosing the format by extension.
pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_reader(File::open(path)?)?),
        Some("csv") => {
            let mut reader = csv::Reader::from_path(path)?;
            let headers = reader.headers()?.clone();
            if headers.iter().ne(REPORT_COLUMNS) {
                return Err(Error::Schema(format!("`{}` does not have the report columns", path.display())));
            }
            let mut report = ExperimentReport::default();
            for rec in reader.deserialize::<CsvRecord>() {
                let rec = rec?;
                match rec.kind.as_str() {
                    "cell" => report.rows.push(row_from_record(rec)),
                    "aggregate" => report.aggregates.push(aggregate_from_record(rec)?),
                    other => return Err(Error::Schema(format!("unknown report row kind `{other}`"))),
                }
            }
            Ok(report)
        }
        _ => Err(Error::Config(format!(
            "cannot infer the report format of `{}`",
            path.display()
        ))),
    }
}

#[derive(Serialize)]
struct TrialRecord<'a> {
    trial: usize,
    lambda1: f64,
    lambda2: f64,
    seed: u64,
    status: Status,
    mean_rationale_ratio: Option<f64>,
    dev_macro_f1: Option<f64>,
    test_macro_f1: Option<f64>,
    degenerate: Option<bool>,
    degenerate_fraction: f64,
    expected_best_dev: Option<f64>,
    error: Option<&'a str>,
}

/// Figure-ready sweep output: one CSV line per trial (the scatter of mean
/// rationale ratio against F1, plus the expected-best curve at
/// `n = trial + 1`), or the whole sweep as JSON.
pub fn emit_sweep(sweep: &SweepReport, format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for t in &sweep.trials {
                w.serialize(TrialRecord {
                    trial: t.trial,
                    lambda1: round_sig(t.lambda1),
                    lambda2: round_sig(t.lambda2),
                    seed: t.seed,
                    status: t.status,
                    mean_rationale_ratio: round_opt(t.mean_rationale_ratio),
                    dev_macro_f1: round_opt(t.dev_macro_f1),
                    test_macro_f1: round_opt(t.test_macro_f1),
                    degenerate: t.degenerate,
                    degenerate_fraction: round_sig(sweep.degenerate_fraction),
                    expected_best_dev: round_opt(sweep.expected_best_dev.get(t.trial).copied()),
                    error: t.error.as_deref(),
                })?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut copy = sweep.clone();
            copy.report = rounded(&sweep.report);
            for t in &mut copy.trials {
                t.lambda1 = round_sig(t.lambda1);
                t.mean_rationale_ratio = round_opt(t.mean_rationale_ratio);
                t.dev_macro_f1 = round_opt(t.dev_macro_f1);
                t.test_macro_f1 = round_opt(t.test_macro_f1);
            }
            copy.degenerate_fraction = round_sig(copy.degenerate_fraction);
            copy.expected_best_dev.iter_mut().for_each(|v| *v = round_sig(*v));
            write_json(path, &copy)?;
        }
    }
    Ok(())
}
