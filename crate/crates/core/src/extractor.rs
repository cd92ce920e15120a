//! Trained rationale extractor: an independent per-token tagger fit to
//! binary targets derived from discretized scores, optionally mixed with
//! human rationales.
//!
//! Token features are the mean embedding of the token's pieces, the mean of
//! those token embeddings over a `±window` neighbourhood, and the relative
//! position `i / (l - 1)`:
//!
//! ```text
//! p_i = sigmoid(w_tok . t_i + w_ctx . c_i + w_pos * r_i + b)
//! ```

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{DatasetSplit, EncodedDoc};
use crate::discretize::{
    best_window, read_masks, resolve_k, top_k_indices, write_masks, BudgetSpec, RationaleMask,
    Scope, Strategy,
};
use crate::error::{Error, Result};
use crate::model::{shuffled_epochs, TrainConfig};
use crate::optim::{clip_global_norm, Adam, Parameters};

pub const DEFAULT_WINDOW: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    Pseudo,
    Human,
}

impl TargetSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetSource::Pseudo => "pseudo",
            TargetSource::Human => "human",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTargets {
    pub doc_id: String,
    pub labels: Vec<bool>,
    pub source: TargetSource,
}

impl TokenTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerParams {
    pub config: TaggerConfig,
    /// `vocab x E`
    pub embeddings: Vec<f64>,
    pub token_weights: Vec<f64>,
    pub context_weights: Vec<f64>,
    /// Single entry.
    pub position_weight: Vec<f64>,
    /// Single entry.
    pub bias: Vec<f64>,
}

impl Parameters for TaggerParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embeddings", &self.embeddings),
            ("token_weights", &self.token_weights),
            ("context_weights", &self.context_weights),
            ("position_weight", &self.position_weight),
            ("bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embeddings", &mut self.embeddings),
            ("token_weights", &mut self.token_weights),
            ("context_weights", &mut self.context_weights),
            ("position_weight", &mut self.position_weight),
            ("bias", &mut self.bias),
        ]
    }
}

impl Checkpoint for TaggerParams {
    const KIND: &'static str = "tagger";
    type Config = TaggerConfig;

    fn config(&self) -> TaggerConfig {
        self.config
    }

    fn shapes(c: &TaggerConfig) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("embeddings", vec![c.vocab_size, c.embed_dim]),
            ("token_weights", vec![c.embed_dim]),
            ("context_weights", vec![c.embed_dim]),
            ("position_weight", vec![1]),
            ("bias", vec![1]),
        ]
    }

    fn zeros(config: &TaggerConfig) -> Result<TaggerParams> {
        if config.embed_dim == 0 || config.vocab_size == 0 {
            return Err(Error::Config("tagger dimensions must be positive".into()));
        }
        Ok(TaggerParams::zeros(*config))
    }
}

impl TaggerParams {
    pub fn zeros(config: TaggerConfig) -> TaggerParams {
        let e = config.embed_dim;
        TaggerParams {
            config,
            embeddings: vec![0.0; config.vocab_size * e],
            token_weights: vec![0.0; e],
            context_weights: vec![0.0; e],
            position_weight: vec![0.0],
            bias: vec![0.0],
        }
    }

    pub fn init(config: TaggerConfig, seed: u64) -> Result<TaggerParams> {
        let mut p = <TaggerParams as Checkpoint>::zeros(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        for t in [&mut p.embeddings, &mut p.token_weights, &mut p.context_weights] {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        Ok(p)
    }
}

/// Per-token features and logits of one document.
#[derive(Clone, Debug)]
pub struct TaggerTrace {
    token_emb: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
    position: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TaggerTrace {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&a| sigmoid(a)).collect()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^a)` without overflow.
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn window(i: usize, len: usize, w: usize) -> std::ops::Range<usize> {
    i.saturating_sub(w)..(i + w + 1).min(len)
}

pub fn tagger_forward(params: &TaggerParams, doc: &EncodedDoc) -> Result<TaggerTrace> {
    let e = params.config.embed_dim;
    let len = doc.num_tokens();
    if len == 0 {
        return Err(Error::EmptyDocument);
    }
    let mut token_emb = Vec::with_capacity(len);
    for t in 0..len {
        let pieces = doc.token_pieces(t);
        let mut v = vec![0.0; e];
        for &id in pieces {
            if id >= params.config.vocab_size {
                return Err(Error::Shape(format!("piece id {id} outside the tagger vocabulary")));
            }
            for (acc, x) in v.iter_mut().zip(&params.embeddings[id * e..(id + 1) * e]) {
                *acc += x;
            }
        }
        let n = pieces.len().max(1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        token_emb.push(v);
    }
    let w = params.config.window;
    let context: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let range = window(i, len, w);
            let n = range.len() as f64;
            let mut v = vec![0.0; e];
            for j in range {
                for (acc, x) in v.iter_mut().zip(&token_emb[j]) {
                    *acc += x / n;
                }
            }
            v
        })
        .collect();
    let position: Vec<f64> = (0..len)
        .map(|i| if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<f64> = (0..len)
        .map(|i| {
            dot(&params.token_weights, &token_emb[i])
                + dot(&params.context_weights, &context[i])
                + params.position_weight[0] * position[i]
                + params.bias[0]
        })
        .collect();
    if logits.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric {
            tensor: "tagger logits".into(),
        });
    }
    Ok(TaggerTrace {
        token_emb,
        context,
        position,
        logits,
    })
}

/// Accumulate the gradient of `sum_i dlogits[i] * logit_i` into `grads`.
pub fn tagger_backprop(
    params: &TaggerParams,
    doc: &EncodedDoc,
    trace: &TaggerTrace,
    dlogits: &[f64],
    grads: &mut TaggerParams,
) {
    let e = params.config.embed_dim;
    let len = dlogits.len();
    let w = params.config.window;
    // Context weight mass that flows back to each token.
    let mut ctx_flow = vec![0.0; len];
    for (i, &g) in dlogits.iter().enumerate() {
        let range = window(i, len, w);
        let share = g / range.len() as f64;
        for j in range {
            ctx_flow[j] += share;
        }
        for k in 0..e {
            grads.token_weights[k] += g * trace.token_emb[i][k];
            grads.context_weights[k] += g * trace.context[i][k];
        }
        grads.position_weight[0] += g * trace.position[i];
        grads.bias[0] += g;
    }
    for t in 0..len {
        let pieces = doc.token_pieces(t);
        let n = pieces.len() as f64;
        for &id in pieces {
            let row = &mut grads.embeddings[id * e..(id + 1) * e];
            for k in 0..e {
                row[k] += (dlogits[t] * params.token_weights[k]
                    + ctx_flow[t] * params.context_weights[k])
                    / n;
            }
        }
    }
}

pub fn tagger_probabilities(params: &TaggerParams, doc: &EncodedDoc) -> Result<Vec<f64>> {
    Ok(tagger_forward(params, doc)?.probabilities())
}

/// Mean binary cross-entropy over the tokens of one document, accumulating
/// `scale * gradient` into `grads`.
pub fn bce_step(
    params: &TaggerParams,
    doc: &EncodedDoc,
    labels: &[bool],
    scale: f64,
    grads: &mut TaggerParams,
) -> Result<f64> {
    let trace = tagger_forward(params, doc)?;
    if labels.len() != trace.logits.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} tokens",
            labels.len(),
            trace.logits.len()
        )));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let dlogits: Vec<f64> = trace
        .logits
        .iter()
        .zip(labels)
        .map(|(&a, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            loss += (softplus(a) - y * a) / n;
            scale * (sigmoid(a) - y) / n
        })
        .collect();
    tagger_backprop(params, doc, &trace, &dlogits, grads);
    Ok(loss)
}

pub fn make_pseudo_targets(masks: &[RationaleMask], split: &DatasetSplit) -> Result<Vec<TokenTargets>> {
    let by_id: HashMap<&str, &RationaleMask> = masks.iter().map(|m| (m.doc_id.as_str(), m)).collect();
    split
        .documents()
        .iter()
        .map(|doc| {
            let mask = by_id
                .get(doc.id.as_str())
                .ok_or_else(|| Error::Selection(format!("no mask for document `{}`", doc.id)))?;
            mask.validate(doc.len()).map_err(|e| e.in_document(&doc.id))?;
            Ok(TokenTargets {
                doc_id: doc.id.clone(),
                labels: mask.to_binary(doc.len()),
                source: TargetSource::Pseudo,
            })
        })
        .collect()
}

/// Indices of the documents that receive human supervision: a seeded sample
/// of `ceil(f * N)` of the `N` documents carrying a gold rationale.
pub fn supervised_subset(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("supervision fraction {fraction} outside [0, 1]")));
    }
    if fraction == 0.0 {
        return Ok(Vec::new());
    }
    let mut gold: Vec<usize> = split
        .documents()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.gold_rationale.as_ref().is_some_and(|g| !g.is_empty()))
        .map(|(i, _)| i)
        .collect();
    if gold.is_empty() {
        return Err(Error::Config(
            "rationale supervision requested but no document has a gold rationale".into(),
        ));
    }
    let count = ((fraction * gold.len() as f64) - 1e-9).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gold.shuffle(&mut rng);
    gold.truncate(count.min(gold.len()));
    gold.sort_unstable();
    Ok(gold)
}

pub fn mix_supervision(
    pseudo: &[TokenTargets],
    split: &DatasetSplit,
    fraction: f64,
    seed: u64,
) -> Result<Vec<TokenTargets>> {
    if pseudo.len() != split.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} documents",
            pseudo.len(),
            split.len()
        )));
    }
    let mut out = pseudo.to_vec();
    for i in supervised_subset(split, fraction, seed)? {
        let doc = &split.documents()[i];
        let gold = doc.gold_rationale.as_ref().expect("subset has gold");
        out[i] = TokenTargets {
            doc_id: doc.id.clone(),
            labels: (0..doc.len()).map(|t| gold.contains(&t)).collect(),
            source: TargetSource::Human,
        };
    }
    Ok(out)
}

/// Fit a tagger to `targets` with mean token-level binary cross-entropy,
/// using the same optimizer and clipping contract as the classifier.
pub fn train_tagger(
    split: &DatasetSplit,
    targets: &[TokenTargets],
    embed_dim: usize,
    tcfg: &TrainConfig,
) -> Result<TaggerParams> {
    tcfg.validate()?;
    if targets.len() != split.len()
        || targets
            .iter()
            .zip(split.documents())
            .any(|(t, d)| t.doc_id != d.id || t.labels.len() != d.len())
    {
        return Err(Error::Shape("targets are not aligned with the split".into()));
    }
    let config = TaggerConfig {
        vocab_size: split.vocab().len(),
        embed_dim,
        window: DEFAULT_WINDOW,
    };
    let mut params = TaggerParams::init(config, tcfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut grads = TaggerParams::zeros(config);
    let mut next_order = shuffled_epochs(tcfg.seed, split.len());
    for epoch in 0..tcfg.epochs {
        for (batch_no, batch) in next_order().chunks(tcfg.batch_size).enumerate() {
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += bce_step(&params, &split.encoded()[i], &targets[i].labels, scale, &mut grads)
                    .map_err(|e| e.in_document(&targets[i].doc_id))?;
            }
            grads.add_scaled(&params, 2.0 * tcfg.l2);
            if !loss.is_finite() || grads.check_finite().is_err() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                });
            }
            clip_global_norm(&mut grads, tcfg.clip_norm);
            adam.step(&mut params, &grads, tcfg.learning_rate);
        }
    }
    Ok(params)
}

/// Decode a fixed-budget rationale from tagger probabilities.
pub fn decode_probabilities(doc_id: &str, probs: &[f64], spec: &BudgetSpec) -> Result<RationaleMask> {
    if spec.scope != Scope::Instance {
        return Err(Error::Config("tagger decoding requires an instance-scope budget".into()));
    }
    spec.validate()?;
    let k = resolve_k(probs.len(), spec.ratio);
    let mut mask = match spec.strategy {
        Strategy::TopK => RationaleMask::new(doc_id, top_k_indices(probs, k)?, false, None),
        Strategy::Contiguous => {
            let (start, _) = best_window(probs, k)?;
            RationaleMask::new(doc_id, start..start + k, true, None)
        }
    };
    mask.budget.ratio = Some(spec.ratio);
    Ok(mask)
}

pub fn tag_and_decode(params: &TaggerParams, doc_id: &str, doc: &EncodedDoc, spec: &BudgetSpec) -> Result<RationaleMask> {
    decode_probabilities(doc_id, &tagger_probabilities(params, doc)?, spec)
}

pub fn tag_split(params: &TaggerParams, split: &DatasetSplit, spec: &BudgetSpec) -> Result<Vec<RationaleMask>> {
    split
        .documents()
        .par_iter()
        .zip(split.encoded().par_iter())
        .map(|(d, enc)| tag_and_decode(params, &d.id, enc, spec).map_err(|e| e.in_document(&d.id)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Token-level overlap with a gold rationale; `None` when the gold set is
/// empty.
pub fn rationale_agreement(pred: &RationaleMask, gold: &BTreeSet<usize>) -> Option<Agreement> {
    if gold.is_empty() {
        return None;
    }
    let hits = pred.selected.iter().filter(|i| gold.contains(i)).count() as f64;
    let precision = if pred.is_empty() {
        0.0
    } else {
        hits / pred.len() as f64
    };
    let recall = hits / gold.len() as f64;
    let f1 = if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some(Agreement {
        precision,
        recall,
        f1,
    })
}

/// Mean agreement over the documents of `split` that carry a gold
/// rationale, with the number of documents that counted.
pub fn mean_agreement(masks: &[RationaleMask], split: &DatasetSplit) -> Option<(Agreement, usize)> {
    let scored: Vec<Agreement> = masks
        .iter()
        .zip(split.documents())
        .filter_map(|(m, d)| d.gold_rationale.as_ref().and_then(|g| rationale_agreement(m, g)))
        .collect();
    if scored.is_empty() {
        return None;
    }
    let n = scored.len() as f64;
    let mean = |f: fn(&Agreement) -> f64| scored.iter().map(f).sum::<f64>() / n;
    Some((
        Agreement {
            precision: mean(|a| a.precision),
            recall: mean(|a| a.recall),
            f1: mean(|a| a.f1),
        },
        scored.len(),
    ))
}

/// Targets in the mask JSONL format with a `"source"` field.
pub fn write_targets(path: &Path, targets: &[TokenTargets]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in targets {
        let tmp = target_line(t)?;
        out.write_all(tmp.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn target_line(t: &TokenTargets) -> Result<String> {
    let selected: Vec<usize> = t.positives().collect();
    let contiguous = selected.windows(2).all(|w| w[1] == w[0] + 1);
    let value = serde_json::json!({
        "id": t.doc_id,
        "selected": selected,
        "contiguous": contiguous,
        "k": selected.len(),
        "source": t.source.as_str(),
    });
    Ok(format!("{value}\n"))
}

/// Read targets written by [`write_targets`], aligned to `split`.
pub fn read_targets(path: &Path, split: &DatasetSplit) -> Result<Vec<TokenTargets>> {
    let text = std::fs::read_to_string(path)?;
    let mut sources = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        sources.push(match v.get("source").and_then(|s| s.as_str()) {
            Some("human") => TargetSource::Human,
            _ => TargetSource::Pseudo,
        });
    }
    let masks = read_masks(path)?;
    let by_id: HashMap<&str, (&RationaleMask, TargetSource)> = masks
        .iter()
        .zip(sources)
        .map(|(m, s)| (m.doc_id.as_str(), (m, s)))
        .collect();
    split
        .documents()
        .iter()
        .map(|d| {
            let (m, source) = by_id
                .get(d.id.as_str())
                .ok_or_else(|| Error::Selection(format!("no targets for document `{}`", d.id)))?;
            Ok(TokenTargets {
                doc_id: d.id.clone(),
                labels: m.to_binary(d.len()),
                source: *source,
            })
        })
        .collect()
}

pub fn write_decoded(path: &Path, masks: &[RationaleMask]) -> Result<()> {
    write_masks(path, masks, Some("tagger"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, SplitName, Token, Vocabulary};
    use std::sync::Arc;

    fn split_with_gold(n: usize) -> DatasetSplit {
        let vocab = Arc::new(Vocabulary::from_pieces(["a", "b", "c"]));
        let docs = (0..n)
            .map(|i| Document {
                id: format!("d{i}"),
                tokens: ["a", "b", "c"]
                    .iter()
                    .map(|s| Token {
                        surface: s.to_string(),
                        pieces: vec![s.to_string()],
                    })
                    .collect(),
                query: None,
                label: i % 2,
                gold_rationale: Some([1].into_iter().collect()),
            })
            .collect();
        DatasetSplit::new(SplitName::Train, docs, 2, vocab).unwrap()
    }

    #[test]
    fn pseudo_targets_from_masks() {
        let split = split_with_gold(1);
        let t = make_pseudo_targets(&[RationaleMask::new("d0", [0, 2], false, None)], &split).unwrap();
        assert_eq!(t[0].labels, vec![true, false, true]);
        assert_eq!(t[0].source, TargetSource::Pseudo);
        let full = make_pseudo_targets(&[RationaleMask::new("d0", 0..3, true, None)], &split).unwrap();
        assert!(full[0].labels.iter().all(|&l| l));
        assert!(make_pseudo_targets(&[], &split).is_err());
    }

    #[test]
    fn supervision_mixing_counts() {
        let split = split_with_gold(10);
        let masks: Vec<_> = (0..10).map(|i| RationaleMask::new(format!("d{i}"), [0], false, None)).collect();
        let pseudo = make_pseudo_targets(&masks, &split).unwrap();
        assert_eq!(mix_supervision(&pseudo, &split, 0.0, 1).unwrap(), pseudo);

        let all = mix_supervision(&pseudo, &split, 1.0, 1).unwrap();
        assert!(all.iter().all(|t| t.source == TargetSource::Human && t.labels == vec![false, true, false]));

        let half = mix_supervision(&pseudo, &split, 0.5, 7).unwrap();
        let human: Vec<_> = half.iter().enumerate().filter(|(_, t)| t.source == TargetSource::Human).map(|(i, _)| i).collect();
        assert_eq!(human.len(), 5);
        let again = mix_supervision(&pseudo, &split, 0.5, 7).unwrap();
        assert_eq!(half, again);
        for (i, t) in half.iter().enumerate() {
            if !human.contains(&i) {
                assert_eq!(t, &pseudo[i]);
            }
        }
    }

    #[test]
    fn supervision_needs_gold() {
        let vocab = Arc::new(Vocabulary::from_pieces(["a"]));
        let doc = Document {
            id: "x".into(),
            tokens: vec![Token {
                surface: "a".into(),
                pieces: vec!["a".into()],
            }],
            query: None,
            label: 0,
            gold_rationale: None,
        };
        let split = DatasetSplit::new(SplitName::Train, vec![doc], 2, vocab).unwrap();
        let pseudo = make_pseudo_targets(&[RationaleMask::new("x", [0], false, None)], &split).unwrap();
        assert!(matches!(mix_supervision(&pseudo, &split, 0.2, 0), Err(Error::Config(_))));
        assert!(mix_supervision(&pseudo, &split, 0.0, 0).is_ok());
    }

    #[test]
    fn decoding_examples() {
        let spec = BudgetSpec {
            ratio: 2.0 / 3.0,
            ..BudgetSpec::default()
        };
        assert_eq!(decode_probabilities("d", &[0.9, 0.1, 0.8], &spec).unwrap().selected, vec![0, 2]);
        let contiguous = BudgetSpec {
            strategy: Strategy::Contiguous,
            ..spec
        };
        let m = decode_probabilities("d", &[0.5, 0.5, 0.5], &contiguous).unwrap();
        assert_eq!(m.selected, vec![0, 1]);
        assert!(m.contiguous);
        let global = BudgetSpec {
            scope: Scope::Global,
            ..spec
        };
        assert!(decode_probabilities("d", &[0.5, 0.5, 0.5], &global).is_err());
    }

    #[test]
    fn agreement_arithmetic() {
        let gold: BTreeSet<usize> = [1, 2].into_iter().collect();
        let same = RationaleMask::new("d", [1, 2], true, None);
        assert_eq!(rationale_agreement(&same, &gold).unwrap().f1, 1.0);
        let disjoint = RationaleMask::new("d", [0, 3], false, None);
        assert_eq!(rationale_agreement(&disjoint, &gold).unwrap().f1, 0.0);
        let half = rationale_agreement(&RationaleMask::new("d", [0, 1], true, None), &gold).unwrap();
        assert_eq!((half.precision, half.recall, half.f1), (0.5, 0.5, 0.5));
        assert!(rationale_agreement(&same, &BTreeSet::new()).is_none());
    }

    #[test]
    fn targets_roundtrip() {
        let split = split_with_gold(3);
        let masks: Vec<_> = (0..3).map(|i| RationaleMask::new(format!("d{i}"), [i % 3], false, None)).collect();
        let pseudo = make_pseudo_targets(&masks, &split).unwrap();
        let mixed = mix_supervision(&pseudo, &split, 0.5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_targets(&path, &mixed).unwrap();
        assert_eq!(read_targets(&path, &split).unwrap(), mixed);
    }

    #[test]
    fn tagger_gradient_matches_finite_differences() {
        let split = split_with_gold(1);
        let config = TaggerConfig {
            vocab_size: split.vocab().len(),
            embed_dim: 3,
            window: 1,
        };
        let mut params = TaggerParams::init(config, 11).unwrap();
        params.position_weight[0] = 0.3;
        let doc = &split.encoded()[0];
        let labels = [true, false, true];
        let mut grads = TaggerParams::zeros(config);
        bce_step(&params, doc, &labels, 1.0, &mut grads).unwrap();
        let loss = |p: &TaggerParams| {
            let mut scratch = TaggerParams::zeros(config);
            bce_step(p, doc, &labels, 1.0, &mut scratch).unwrap()
        };
        let h = 1e-5;
        let n_tensors = params.tensors().len();
        for t in 0..n_tensors {
            let len = params.tensors()[t].1.len();
            for j in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[t].1[j] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t].1[j] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grads.tensors()[t].1[j];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * numeric.abs().max(analytic.abs()) + 1e-9,
                    "tensor {t} entry {j}: {numeric} vs {analytic}"
                );
            }
        }
    }
}
