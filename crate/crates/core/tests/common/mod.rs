#![allow(dead_code)]

use fresh_core::corpus::EncodedDoc;
use fresh_core::discretize::RationaleMask;
use fresh_core::model::{forward, loss_and_grads, ArchConfig, ModelConfig, ModelParams};
use fresh_core::optim::Parameters;
use fresh_core::saliency::{ScoreVector, Scorer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
const FD_TINY: f64 = 1e-7;
const FD_ABS_TOL: f64 = 1e-9;

/// A small model with every parameter drawn from `U(-1, 1)`, so attention is
/// far from uniform.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let num_heads = rng.gen_range(1..=3);
    let head_dim = rng.gen_range(1..=3);
    let arch = ArchConfig {
        embed_dim: num_heads * head_dim,
        num_heads,
    };
    let config = ModelConfig::new(arch, rng.gen_range(4..=12), rng.gen_range(2..=4));
    let mut params = ModelParams::zeros(config);
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    params
}

/// A document of 1-6 tokens with 1-3 pieces each and an optional query,
/// drawn over ids `3..vocab_size` plus the unknown id.
pub fn random_doc(rng: &mut ChaCha8Rng, vocab_size: usize) -> EncodedDoc {
    let draw = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.1) {
            1
        } else {
            rng.gen_range(3..vocab_size)
        }
    };
    let mut pieces = Vec::new();
    let mut token_starts = Vec::new();
    for _ in 0..rng.gen_range(1..=6) {
        token_starts.push(pieces.len());
        for _ in 0..rng.gen_range(1..=3) {
            pieces.push(draw(rng));
        }
    }
    token_starts.push(pieces.len());
    let query = rng
        .gen_bool(0.5)
        .then(|| (0..rng.gen_range(1..=3)).map(|_| draw(rng)).collect());
    EncodedDoc {
        query,
        pieces,
        token_starts,
    }
}

fn loss_at(params: &ModelParams, doc: &EncodedDoc, label: usize, l2: f64) -> f64 {
    let trace = forward(params, doc, None).unwrap();
    loss_and_grads(params, &trace, label, l2).unwrap().0
}

/// One gradient entry that disagrees with its central difference.
#[derive(Debug)]
pub struct Mismatch {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_TINY {
        diff <= FD_ABS_TOL + FD_REL_TOL * scale
    } else {
        diff / scale <= FD_REL_TOL
    }
}

/// Compare every entry of the analytic gradient with a central difference.
/// Returns the number of entries checked and the mismatches.
pub fn check_gradients(params: &ModelParams, doc: &EncodedDoc, label: usize, l2: f64) -> (usize, Vec<Mismatch>) {
    let trace = forward(params, doc, None).unwrap();
    let (_, grads) = loss_and_grads(params, &trace, label, l2).unwrap();
    let analytic: Vec<(&'static str, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut checked = 0;
    let mut bad = Vec::new();
    for (ti, (name, expected)) in analytic.iter().enumerate() {
        for (i, &a) in expected.iter().enumerate() {
            let original = probe.tensors()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = original + FD_STEP;
            let up = loss_at(&probe, doc, label, l2);
            probe.tensors_mut()[ti].1[i] = original - FD_STEP;
            let down = loss_at(&probe, doc, label, l2);
            probe.tensors_mut()[ti].1[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            checked += 1;
            if !within_tolerance(a, numeric) {
                bad.push(Mismatch {
                    tensor: name,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

pub fn random_scores(rng: &mut ChaCha8Rng, len: usize, quantized: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if quantized {
                rng.gen_range(0..4) as f64 * 0.25
            } else {
                rng.gen::<f64>()
            }
        })
        .collect()
}

pub fn score_vectors(scores: &[Vec<f64>]) -> Vec<ScoreVector> {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreVector::new(format!("d{i}"), s.clone(), Scorer::Attention))
        .collect()
}

pub fn mask_mass(scores: &[f64], mask: &RationaleMask) -> f64 {
    mask.selected.iter().map(|&i| scores[i]).sum()
}

/// Start and mass of the best length-`k` window, summing every window
/// from scratch. Earliest start on ties.
pub fn exhaustive_window(scores: &[f64], k: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for start in 0..=scores.len() - k {
        let mass: f64 = scores[start..start + k].iter().sum();
        if mass > best.1 {
            best = (start, mass);
        }
    }
    best
}

/// Best mass of any `k`-subset, by enumerating all subsets.
pub fn best_subset_masses(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    for bits in 0u32..(1 << n) {
        let size = bits.count_ones() as usize;
        let mass: f64 = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| scores[i]).sum();
        best[size] = best[size].max(mass);
    }
    best
}

/// Best mass of a contiguous span of every length `0..=l`.
pub fn best_span_masses(scores: &[f64]) -> Vec<f64> {
    let mut best = vec![0.0];
    for k in 1..=scores.len() {
        best.push(exhaustive_window(scores, k).1);
    }
    best
}

/// Maximum of `sum_i per_doc[i][s_i]` over size vectors with
/// `minimums[i] <= s_i <= l_i` and `sum_i s_i = total`.
pub fn best_allocation(per_doc: &[Vec<f64>], minimums: &[usize], total: usize) -> Option<f64> {
    fn go(per_doc: &[Vec<f64>], minimums: &[usize], left: usize) -> Option<f64> {
        match per_doc.split_first() {
            None => (left == 0).then_some(0.0),
            Some((first, rest)) => {
                let mut best: Option<f64> = None;
                for s in minimums[0]..first.len() {
                    if s > left {
                        break;
                    }
                    if let Some(tail) = go(rest, &minimums[1..], left - s) {
                        let v = first[s] + tail;
                        best = Some(best.map_or(v, |b: f64| b.max(v)));
                    }
                }
                best
            }
        }
    }
    go(per_doc, minimums, total)
}

/// Every tuple of up to three document lengths in `1..=6`.
pub fn small_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for a in 1..=6 {
        shapes.push(vec![a]);
        for b in 1..=6 {
            shapes.push(vec![a, b]);
            for c in 1..=6 {
                shapes.push(vec![a, b, c]);
            }
        }
    }
    shapes
}

/// A ratio whose global budget `floor(p * n)` is exactly `total`.
pub fn ratio_for_budget(total: usize, n: usize) -> f64 {
    if total == n {
        1.0
    } else {
        (total as f64 + 0.5) / n as f64
    }
}

/// Outcome of comparing a global selector with the exhaustive optimum.
#[derive(Debug, Default)]
pub struct OracleTally {
    pub corpora: usize,
    pub mismatches: usize,
    pub first: Option<String>,
}

impl OracleTally {
    pub fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.corpora += 1;
        if !ok {
            self.mismatches += 1;
            if self.first.is_none() {
                self.first = Some(describe());
            }
        }
    }
}

/// Run `global_topk` over every small shape and budget, with floor ratios
/// 0 and 0.3, against the subset-enumeration optimum.
pub fn global_topk_oracle(seed: u64) -> OracleTally {
    use fresh_core::discretize::{floor_lengths, global_topk};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    for lengths in small_shapes() {
        let n: usize = lengths.iter().sum();
        for total in 1..=n {
            let ratio = ratio_for_budget(total, n);
            for floor in [0.0, 0.3] {
                if floor >= ratio {
                    continue;
                }
                let minimums = floor_lengths(&lengths, floor);
                if minimums.iter().sum::<usize>() > total {
                    continue;
                }
                for quantized in [false, true] {
                    let scores: Vec<Vec<f64>> = lengths.iter().map(|&l| random_scores(&mut rng, l, quantized)).collect();
                    let masks = global_topk(&score_vectors(&scores), ratio, floor).unwrap();
                    let per_doc: Vec<Vec<f64>> = scores.iter().map(|s| best_subset_masses(s)).collect();
                    let optimum = best_allocation(&per_doc, &minimums, total).unwrap();
                    let got: f64 = masks.iter().zip(&scores).map(|(m, s)| mask_mass(s, m)).sum();
                    let sizes_ok = masks.iter().map(|m| m.len()).sum::<usize>() == total
                        && masks.iter().zip(&minimums).all(|(m, &q)| m.len() >= q);
                    tally.record(sizes_ok && (got - optimum).abs() <= 1e-9, || {
                        format!("scores {scores:?}, budget {total}, floor {floor}: got {got}, optimum {optimum}")
                    });
                }
            }
        }
    }
    tally
}

/// Run `global_contig` over every small shape and budget, with minimum
/// lengths of 1 and 2, against the window-enumeration optimum.
pub fn global_contig_oracle(seed: u64) -> OracleTally {
    use fresh_core::discretize::global_contig;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    for lengths in small_shapes() {
        let n: usize = lengths.iter().sum();
        for total in 1..=n {
            let ratio = ratio_for_budget(total, n);
            for min_len in [1, 2] {
                let minimums: Vec<usize> = lengths.iter().map(|&l| min_len.min(l)).collect();
                if minimums.iter().sum::<usize>() > total {
                    continue;
                }
                for quantized in [false, true] {
                    let scores: Vec<Vec<f64>> = lengths.iter().map(|&l| random_scores(&mut rng, l, quantized)).collect();
                    let masks = global_contig(&score_vectors(&scores), ratio, &minimums).unwrap();
                    let per_doc: Vec<Vec<f64>> = scores.iter().map(|s| best_span_masses(s)).collect();
                    let optimum = best_allocation(&per_doc, &minimums, total).unwrap();
                    let got: f64 = masks.iter().zip(&scores).map(|(m, s)| mask_mass(s, m)).sum();
                    let shape_ok = masks.iter().map(|m| m.len()).sum::<usize>() == total
                        && masks.iter().zip(&minimums).all(|(m, &q)| m.len() >= q)
                        && masks.iter().zip(&lengths).all(|(m, &l)| m.validate(l).is_ok() && m.contiguous);
                    tally.record(shape_ok && (got - optimum).abs() <= 1e-9, || {
                        format!("scores {scores:?}, budget {total}, min_len {min_len}: got {got}, optimum {optimum}")
                    });
                }
            }
        }
    }
    tally
}

pub const CLI_CONFIG: &str = r#"version = 1
seeds = [13, 17]
ratios = [0.2]
fractions = [0.0]

[data]
source = "synthetic"
seed = 3

[data.synth]
train_docs = 200
dev_docs = 50
test_docs = 50

[fresh.support_train]
epochs = 3

[fresh.classifier_train]
epochs = 3

[fresh.tagger_train]
epochs = 3
learning_rate = 0.01

[e2e.train]
epochs = 3

[sweep]
trials = 3
"#;

/// The subcommands in pipeline order, each writing to its own directory
/// under the root. `{root}` in an argument is replaced by the root path.
pub const CLI_STEPS: &[(&str, &[&str])] = &[
    ("synth", &["synth"]),
    ("ingest", &["ingest", "--input", "{root}/synth", "--num-classes", "2"]),
    ("support", &["train-support", "--data", "{root}/synth"]),
    ("score", &["score", "--data", "{root}/synth", "--checkpoint", "{root}/support/support.ckpt.json"]),
    ("extract", &["extract", "--data", "{root}/synth", "--scores", "{root}/score"]),
    ("tagger", &["train-extractor", "--data", "{root}/synth", "--masks", "{root}/extract", "--fraction", "0.5"]),
    ("fresh", &["run-fresh"]),
    ("full", &["run-fresh", "--full-text"]),
    ("e2e", &["run-e2e"]),
    ("sweep", &["sweep"]),
    ("report", &["report", "--input", "{root}/fresh/report.csv"]),
];

/// Run every CLI subcommand under `root` and return the metric CSVs each
/// step wrote, keyed by `step/file`. Reports record the config path in
/// their replay column, so reruns must reuse the same root.
pub fn run_cli_pipeline(exe: &std::path::Path, root: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let config = root.join("config.toml");
    std::fs::write(&config, CLI_CONFIG).map_err(|e| e.to_string())?;
    let root_str = root.display().to_string();
    let mut csvs = Vec::new();
    for (step, args) in CLI_STEPS {
        let out_dir = root.join(step);
        let output = std::process::Command::new(exe)
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("5")
            .arg("--out-dir")
            .arg(&out_dir)
            .args(args.iter().map(|a| a.replace("{root}", &root_str)))
            .output()
            .map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!("`{step}` failed: {}", String::from_utf8_lossy(&output.stderr)));
        }
        let mut names: Vec<_> = std::fs::read_dir(&out_dir)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(format!("`{step}` wrote no CSV"));
        }
        for path in names {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            csvs.push((format!("{step}/{}", path.file_name().unwrap().to_string_lossy()), bytes));
        }
    }
    Ok(csvs)
}

/// Files that differ between two pipeline runs.
pub fn csv_differences(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) -> Vec<String> {
    let mut diffs: Vec<String> = a
        .iter()
        .filter(|(name, bytes)| b.iter().find(|(n, _)| n == name).map_or(true, |(_, other)| other != bytes))
        .map(|(name, _)| name.clone())
        .collect();
    if a.len() != b.len() {
        diffs.push(format!("{} files vs {}", a.len(), b.len()));
    }
    diffs
}
