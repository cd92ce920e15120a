use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fresh_core::checkpoint::Checkpoint;
use fresh_core::corpus::{self, make_synthetic, IngestConfig, SpanUnit, SplitName, Splits};
use fresh_core::discretize::{discretize_split, read_masks, write_masks, RationaleMask, SplitMasks};
use fresh_core::extractor::{
    make_pseudo_targets, mean_agreement, mix_supervision, tag_split, train_tagger, write_decoded, write_targets,
    TaggerParams, TargetSource,
};
use fresh_core::harness::{
    self, emit, emit_sweep, expected_best, hyperparameter_sweep, read_report, round_sig, run_experiment_with,
    DataSource, ExperimentConfig, Format, Method, RunOptions,
};
use fresh_core::model::{evaluate, ModelParams};
use fresh_core::pipeline::train_support;
use fresh_core::saliency::{read_scores, score_corpus, write_scores, Scorer};
use fresh_core::{Error, Result};

/// Faithful rationale extraction: FRESH pipeline and end-to-end baseline.
#[derive(Parser)]
#[command(name = "fresh", version)]
struct Cli {
    /// Versioned TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "csv", value_parser = parse_format)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Normalize raw train/dev/test JSONL files and build the vocabulary.
    Ingest {
        /// Directory holding train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Unit of `rationale_spans` offsets: token or char.
        #[arg(long)]
        span_unit: Option<String>,
    },
    /// Generate a planted-rationale corpus.
    Synth,
    /// Train the full-text support model.
    TrainSupport(DataArg),
    /// Score every token with a trained support model.
    Score {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scorer: Option<Scorer>,
    },
    /// Discretize scores into rationale masks.
    Extract {
        #[command(flatten)]
        data: DataArg,
        /// Directory holding scores.<split>.jsonl.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train the rationale tagger on training masks and decode all splits.
    TrainExtractor {
        #[command(flatten)]
        data: DataArg,
        /// Directory holding masks.train.jsonl.
        #[arg(long)]
        masks: PathBuf,
        /// Fraction of training documents whose targets come from gold
        /// rationales.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Run the FRESH pipeline (or the full-text reference) over the
    /// configured seeds, ratios and supervision fractions.
    RunFresh {
        #[arg(long)]
        full_text: bool,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Run the end-to-end REINFORCE baseline over the configured cells.
    RunE2e {
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Random hyperparameter search for the end-to-end baseline.
    Sweep,
    /// Re-emit a report, recompute aggregates and the expected-best curves.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct DataArg {
    /// Data directory written by `ingest` or `synth`; defaults to the
    /// configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Keep successful cells of an existing report in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = ErrorReport {
                error: "usage",
                message: e.to_string().trim().to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    config_path: Option<String>,
    seed: Option<u64>,
    out_dir: PathBuf,
    format: Format,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ingest_config(&self) -> IngestConfig {
        match &self.cfg.data {
            DataSource::Directory { ingest, .. } => ingest.clone(),
            DataSource::Synthetic { synth, .. } => IngestConfig {
                max_piece_len: synth.max_piece_len,
                ..IngestConfig::default()
            },
        }
    }

    fn load_data(&self, arg: &DataArg) -> Result<Splits> {
        match &arg.data {
            Some(dir) => Splits::read_dir(dir, &self.ingest_config()),
            None => self.cfg.data.load(),
        }
    }

    fn train_seed(&self) -> u64 {
        self.seed.unwrap_or(self.cfg.fresh.seed)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    std::fs::create_dir_all(&cli.out_dir)?;
    let ctx = Ctx {
        cfg,
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    match cli.command {
        Command::Ingest {
            input,
            num_classes,
            span_unit,
        } => {
            let mut icfg = ctx.ingest_config();
            if num_classes.is_some() {
                icfg.num_classes = num_classes;
            }
            if let Some(unit) = span_unit {
                icfg.span_unit = match unit.as_str() {
                    "token" => SpanUnit::Token,
                    "char" => SpanUnit::Char,
                    other => return Err(Error::Config(format!("unknown span unit `{other}`"))),
                };
            }
            let splits = Splits::ingest_dir(&input, &icfg)?;
            splits.write_dir(&ctx.out_dir)?;
            write_stats(&ctx, &splits)
        }
        Command::Synth => {
            let (seed, synth) = match &ctx.cfg.data {
                DataSource::Synthetic { seed, synth } => (ctx.seed.unwrap_or(*seed), synth.clone()),
                DataSource::Directory { .. } => (ctx.seed.unwrap_or(1), Default::default()),
            };
            let corpus = make_synthetic(&synth, seed)?;
            corpus.splits.write_dir(&ctx.out_dir)?;
            write_json_file(&ctx.out("lexicon.json"), &corpus.lexicon)?;
            write_stats(&ctx, &corpus.splits)
        }
        Command::TrainSupport(data) => {
            let splits = ctx.load_data(&data)?;
            let mut fcfg = ctx.cfg.fresh.clone();
            fcfg.seed = ctx.train_seed();
            let outcome = train_support(&splits, &fcfg)?;
            outcome.params.save(&ctx.out("support.ckpt.json"))?;
            write_history(&ctx.out("history.csv"), &outcome.history)?;
            let rows = SplitName::ALL
                .into_iter()
                .filter(|&n| n != SplitName::Train)
                .map(|n| {
                    let m = evaluate(&outcome.params, splits.get(n), None)?;
                    Ok(SplitMetrics {
                        split: n.as_str(),
                        macro_f1: round_sig(m.macro_f1),
                        accuracy: round_sig(m.accuracy),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_csv(&ctx.out("metrics.csv"), &rows)
        }
        Command::Score {
            data,
            checkpoint,
            scorer,
        } => {
            let splits = ctx.load_data(&data)?;
            let params = ModelParams::load(&checkpoint)?;
            let scorer = scorer.unwrap_or(ctx.cfg.fresh.scorer);
            let mut rows = Vec::new();
            for split in splits.iter() {
                let scores = score_corpus(&params, split, scorer)?;
                write_scores(&ctx.out(&format!("scores.{}.jsonl", split.name())), &scores)?;
                let maxima: Vec<f64> = scores
                    .iter()
                    .map(|s| s.scores.iter().copied().fold(0.0, f64::max))
                    .collect();
                rows.push(ScoreSummary {
                    split: split.name().as_str(),
                    scorer: scorer.as_str(),
                    docs: scores.len(),
                    mean_max_score: round_sig(harness::mean(&maxima)),
                });
            }
            write_csv(&ctx.out("metrics.csv"), &rows)
        }
        Command::Extract { data, scores, ratio } => {
            let splits = ctx.load_data(&data)?;
            let mut spec = ctx.cfg.fresh.budget;
            if let Some(p) = ratio {
                spec.ratio = p;
            }
            spec.validate()?;
            let mut masks = SplitMasks::default();
            for split in splits.iter() {
                let sv = read_scores(&scores.join(format!("scores.{}.jsonl", split.name())))?;
                *masks.get_mut(split.name()) = discretize_split(&sv, &spec)?;
            }
            write_split_masks(&ctx, &splits, &masks, "heuristic")
        }
        Command::TrainExtractor { data, masks, fraction } => {
            let splits = ctx.load_data(&data)?;
            let f = fraction.unwrap_or(ctx.cfg.fresh.supervision);
            let fcfg = {
                let mut c = ctx.cfg.fresh.clone();
                c.seed = ctx.train_seed();
                c.supervision = f;
                c
            };
            let train_masks = read_masks(&masks.join("masks.train.jsonl"))?;
            let pseudo = make_pseudo_targets(&train_masks, &splits.train)?;
            let targets = mix_supervision(&pseudo, &splits.train, f, fcfg.seed)?;
            write_targets(&ctx.out("targets.train.jsonl"), &targets)?;
            let human = targets.iter().filter(|t| t.source == TargetSource::Human).count();
            let tagger: TaggerParams =
                train_tagger(&splits.train, &targets, fcfg.tagger_embed_dim, &fcfg.tagger_train_config())?;
            tagger.save(&ctx.out("tagger.ckpt.json"))?;
            let mut decoded = SplitMasks::default();
            for split in splits.iter() {
                let m = tag_split(&tagger, split, &fcfg.budget)?;
                write_decoded(&ctx.out(&format!("decoded.{}.jsonl", split.name())), &m)?;
                *decoded.get_mut(split.name()) = m;
            }
            let rows = mask_rows(&splits, &decoded, Some(human));
            write_csv(&ctx.out("metrics.csv"), &rows)
        }
        Command::RunFresh { full_text, sweep } => {
            let method = if full_text { Method::FullText } else { Method::Fresh };
            run_cells(&ctx, method, sweep)
        }
        Command::RunE2e { sweep } => run_cells(&ctx, Method::E2eBaseline, sweep),
        Command::Sweep => {
            let mut cfg = ctx.cfg.clone();
            if let Some(seed) = ctx.seed {
                cfg.sweep.seed = seed;
            }
            let report = hyperparameter_sweep(&cfg, ctx.config_path.as_deref())?;
            emit_sweep(&report, ctx.format, &ctx.out(&format!("sweep.{}", ctx.format.extension())))
        }
        Command::Report { input } => {
            let mut report = read_report(&input)?;
            report.aggregates = harness::aggregate(&report.rows);
            emit(&report, ctx.format, &ctx.out(&format!("report.{}", ctx.format.extension())))?;
            let mut curves = Vec::new();
            for agg in &report.aggregates {
                let dev: Vec<f64> = report
                    .rows
                    .iter()
                    .filter(|r| {
                        r.method == agg.method
                            && r.scorer == agg.scorer
                            && r.strategy == agg.strategy
                            && r.scope == agg.scope
                            && r.p == agg.p
                            && r.f == agg.f
                    })
                    .filter_map(|r| r.dev_macro_f1)
                    .collect();
                for n in 1..=dev.len() as u64 {
                    curves.push(CurvePoint {
                        method: agg.method.as_str(),
                        scorer: &agg.scorer,
                        strategy: &agg.strategy,
                        scope: &agg.scope,
                        p: agg.p,
                        f: agg.f,
                        n,
                        expected_best_dev: round_sig(expected_best(&dev, n)?),
                    });
                }
            }
            write_csv(&ctx.out("expected_best.csv"), &curves)
        }
    }
}

fn run_cells(ctx: &Ctx, method: Method, args: SweepArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.method = method;
    if let Some(seed) = ctx.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(r) = args.ratios {
        cfg.ratios = r;
    }
    if let Some(f) = args.fractions {
        cfg.fractions = f;
    }
    let path = ctx.out(&format!("report.{}", ctx.format.extension()));
    let previous = if args.resume && path.exists() {
        Some(read_report(&path)?)
    } else {
        None
    };
    let report = run_experiment_with(
        &cfg,
        &RunOptions {
            config_path: ctx.config_path.clone(),
            previous,
        },
    )?;
    emit(&report, ctx.format, &path)
}

#[derive(Serialize)]
struct SplitMetrics {
    split: &'static str,
    macro_f1: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct ScoreSummary {
    split: &'static str,
    scorer: &'static str,
    docs: usize,
    mean_max_score: f64,
}

#[derive(Serialize)]
struct MaskSummary {
    split: &'static str,
    docs: usize,
    mean_rationale_ratio: f64,
    gold_docs: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    human_targets: Option<usize>,
}

#[derive(Serialize)]
struct CurvePoint<'a> {
    method: &'static str,
    scorer: &'a str,
    strategy: &'a str,
    scope: &'a str,
    p: f64,
    f: f64,
    n: u64,
    expected_best_dev: f64,
}

#[derive(Serialize)]
struct StatsRow {
    split: &'static str,
    count: usize,
    doc_len_mean: f64,
    doc_len_max: usize,
    query_len_mean: Option<f64>,
    rationale_ratio_mean: Option<f64>,
    num_classes: usize,
    vocab_size: usize,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    #[derive(Serialize)]
    struct Epoch {
        epoch: usize,
        dev_macro_f1: f64,
    }
    let rows: Vec<Epoch> = history
        .iter()
        .enumerate()
        .map(|(epoch, &f1)| Epoch {
            epoch,
            dev_macro_f1: round_sig(f1),
        })
        .collect();
    write_csv(path, &rows)
}

fn write_stats(ctx: &Ctx, splits: &Splits) -> Result<()> {
    let rows = splits
        .iter()
        .map(|split| {
            let s = corpus::stats(split)?;
            Ok(StatsRow {
                split: split.name().as_str(),
                count: s.count,
                doc_len_mean: round_sig(s.doc_len_mean),
                doc_len_max: s.doc_len_max,
                query_len_mean: s.query_len_mean.map(round_sig),
                rationale_ratio_mean: s.rationale_ratio_mean.map(round_sig),
                num_classes: split.num_classes(),
                vocab_size: split.vocab().len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match ctx.format {
        Format::Csv => write_csv(&ctx.out("stats.csv"), &rows),
        Format::Json => write_json_file(&ctx.out("stats.json"), &rows),
    }
}

fn mask_rows(splits: &Splits, masks: &SplitMasks, human: Option<usize>) -> Vec<MaskSummary> {
    splits
        .iter()
        .map(|split| {
            let m: &[RationaleMask] = masks.get(split.name());
            let ratios: Vec<f64> = m
                .iter()
                .zip(split.documents())
                .map(|(m, d)| m.len() as f64 / d.len() as f64)
                .collect();
            let agreement = mean_agreement(m, split);
            MaskSummary {
                split: split.name().as_str(),
                docs: m.len(),
                mean_rationale_ratio: round_sig(harness::mean(&ratios)),
                gold_docs: agreement.map_or(0, |(_, n)| n),
                precision: agreement.map(|(a, _)| round_sig(a.precision)),
                recall: agreement.map(|(a, _)| round_sig(a.recall)),
                f1: agreement.map(|(a, _)| round_sig(a.f1)),
                human_targets: (split.name() == SplitName::Train).then_some(human).flatten(),
            }
        })
        .collect()
}

fn write_split_masks(ctx: &Ctx, splits: &Splits, masks: &SplitMasks, source: &str) -> Result<()> {
    for split in splits.iter() {
        write_masks(
            &ctx.out(&format!("masks.{}.jsonl", split.name())),
            masks.get(split.name()),
            Some(source),
        )?;
    }
    write_csv(&ctx.out("metrics.csv"), &mask_rows(splits, masks, None))
}
