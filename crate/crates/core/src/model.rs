//! Compact attention classifier with exact hand-written gradients.
//!
//! The input sequence is `query pieces ++ [SEP] ++ document pieces` (just the
//! document pieces when there is no query). Each head `h` owns a learned
//! pooling query `q_h` and a key projection `K_h` (`E x d`, `d = E / H`):
//!
//! ```text
//! s_hj  = q_h . (K_h^T e_j) / sqrt(d)
//! a_h   = softmax_j(s_hj)
//! c_h   = sum_j a_hj e_j[h*d .. (h+1)*d]
//! logit = W_out^T [c_1; ...; c_H] + b
//! ```
//!
//! Masked-out document tokens are dropped from the sequence rather than
//! zeroed, so a masked forward pass is the forward pass of the reduced
//! document.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{DatasetSplit, EncodedDoc, PAD_ID, SEP_ID};
use crate::discretize::{RationaleMask, SplitMasks};
use crate::error::{Error, Result};
use crate::metrics::{argmax, classification_metrics, Metrics};
use crate::optim::{clip_global_norm, Adam, Parameters};

/// Architecture hyperparameters that do not depend on the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 32,
            num_heads: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub sep_id: usize,
    pub pad_id: usize,
}

impl ModelConfig {
    pub fn new(arch: ArchConfig, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: arch.embed_dim,
            num_heads: arch.num_heads,
            num_classes,
            sep_id: SEP_ID,
            pad_id: PAD_ID,
        }
    }

    pub fn for_split(arch: ArchConfig, split: &DatasetSplit) -> ModelConfig {
        Self::new(arch, split.vocab().len(), split.num_classes())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.sep_id >= self.vocab_size || self.pad_id >= self.vocab_size {
            return Err(Error::Config("special ids outside the vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab x E`
    pub embeddings: Vec<f64>,
    /// `H x d`
    pub head_queries: Vec<f64>,
    /// `H x E x d`
    pub key_proj: Vec<f64>,
    /// `E x C`
    pub out_proj: Vec<f64>,
    /// `C`
    pub out_bias: Vec<f64>,
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embeddings", &self.embeddings),
            ("head_queries", &self.head_queries),
            ("key_proj", &self.key_proj),
            ("out_proj", &self.out_proj),
            ("out_bias", &self.out_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embeddings", &mut self.embeddings),
            ("head_queries", &mut self.head_queries),
            ("key_proj", &mut self.key_proj),
            ("out_proj", &mut self.out_proj),
            ("out_bias", &mut self.out_bias),
        ]
    }
}

impl Checkpoint for ModelParams {
    const KIND: &'static str = "classifier";
    type Config = ModelConfig;

    fn config(&self) -> ModelConfig {
        self.config
    }

    fn shapes(c: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (e, h, d) = (c.embed_dim, c.num_heads, c.head_dim());
        vec![
            ("embeddings", vec![c.vocab_size, e]),
            ("head_queries", vec![h, d]),
            ("key_proj", vec![h, e, d]),
            ("out_proj", vec![e, c.num_classes]),
            ("out_bias", vec![c.num_classes]),
        ]
    }

    fn zeros(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        Ok(ModelParams::zeros(*config))
    }
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> ModelParams {
        let (e, h, d, c) = (
            config.embed_dim,
            config.num_heads,
            config.head_dim(),
            config.num_classes,
        );
        ModelParams {
            config,
            embeddings: vec![0.0; config.vocab_size * e],
            head_queries: vec![0.0; h * d],
            key_proj: vec![0.0; h * e * d],
            out_proj: vec![0.0; e * c],
            out_bias: vec![0.0; c],
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams::zeros(self.config)
    }

    fn embedding(&self, id: usize) -> &[f64] {
        let e = self.config.embed_dim;
        &self.embeddings[id * e..(id + 1) * e]
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, values: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in values {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Deterministic initialization: every weight is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the bias starts at zero. The fan-in
/// of an embedding row is taken to be `E`.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(config);
    let e = config.embed_dim;
    fill_uniform(&mut rng, &mut p.embeddings, e);
    fill_uniform(&mut rng, &mut p.head_queries, config.head_dim());
    fill_uniform(&mut rng, &mut p.key_proj, e);
    fill_uniform(&mut rng, &mut p.out_proj, e);
    Ok(p)
}

/// The piece sequence the classifier reads for a document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    /// Position of the first document piece.
    pub doc_start: usize,
    /// Original token index of every document piece, in sequence order.
    pub piece_tokens: Vec<usize>,
}

/// Build `query ++ [SEP] ++ selected pieces`. A mask, when given, must
/// select at least one valid token.
pub fn input_sequence(doc: &EncodedDoc, mask: Option<&RationaleMask>) -> Result<ModelInput> {
    let mut ids = Vec::with_capacity(doc.pieces.len() + 1);
    if let Some(query) = &doc.query {
        ids.extend_from_slice(query);
        ids.push(SEP_ID);
    }
    let doc_start = ids.len();
    let mut piece_tokens = Vec::with_capacity(doc.pieces.len());
    let mut push_token = |t: usize| {
        for &id in doc.token_pieces(t) {
            ids.push(id);
            piece_tokens.push(t);
        }
    };
    match mask {
        None => (0..doc.num_tokens()).for_each(&mut push_token),
        Some(mask) => {
            mask.validate(doc.num_tokens())?;
            mask.selected.iter().copied().for_each(&mut push_token);
        }
    }
    if piece_tokens.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(ModelInput {
        ids,
        doc_start,
        piece_tokens,
    })
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: ModelInput,
    /// `[head][position]`, each row a probability distribution.
    pub attention: Vec<Vec<f64>>,
    /// `K_h q_h` per head, `H x E`.
    head_keys: Vec<f64>,
    pub context: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / total).collect()
}

fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    values[index] - lse
}

pub fn forward(params: &ModelParams, doc: &EncodedDoc, mask: Option<&RationaleMask>) -> Result<ForwardTrace> {
    forward_input(params, input_sequence(doc, mask)?)
}

pub fn forward_input(params: &ModelParams, input: ModelInput) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let (e, h, d, c) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim(), cfg.num_classes);
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "piece id {bad} outside a vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();

    let mut head_keys = vec![0.0; h * e];
    for head in 0..h {
        let q = &params.head_queries[head * d..(head + 1) * d];
        let k = &params.key_proj[head * e * d..(head + 1) * e * d];
        for row in 0..e {
            head_keys[head * e + row] = k[row * d..(row + 1) * d]
                .iter()
                .zip(q)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    let mut attention = Vec::with_capacity(h);
    let mut context = vec![0.0; e];
    for head in 0..h {
        let u = &head_keys[head * e..(head + 1) * e];
        let scores: Vec<f64> = input
            .ids
            .iter()
            .map(|&id| scale * dot(u, params.embedding(id)))
            .collect();
        let weights = softmax(&scores);
        let slice = &mut context[head * d..(head + 1) * d];
        for (&id, &w) in input.ids.iter().zip(&weights) {
            let v = &params.embedding(id)[head * d..(head + 1) * d];
            for (acc, x) in slice.iter_mut().zip(v) {
                *acc += w * x;
            }
        }
        attention.push(weights);
    }

    let mut logits = params.out_bias.clone();
    for (row, &x) in context.iter().enumerate() {
        for (cls, logit) in logits.iter_mut().enumerate() {
            *logit += params.out_proj[row * c + cls] * x;
        }
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric {
            tensor: "logits".into(),
        });
    }
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        input,
        attention,
        head_keys,
        context,
        logits,
        probs,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backpropagate `dL/dlogits` through the trace, accumulating parameter
/// gradients into `grads`. When `position_grads` is given it receives the
/// gradient with respect to the embedding at every sequence position,
/// row-major `positions x E`.
pub fn backprop(
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
    grads: &mut ModelParams,
    mut position_grads: Option<&mut Vec<f64>>,
) {
    let cfg = &params.config;
    let (e, h, d, c) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim(), cfg.num_classes);
    let ids = &trace.input.ids;
    let scale = 1.0 / (d as f64).sqrt();
    if let Some(pg) = position_grads.as_deref_mut() {
        pg.clear();
        pg.resize(ids.len() * e, 0.0);
    }

    for (cls, g) in dlogits.iter().enumerate() {
        grads.out_bias[cls] += g;
    }
    let mut dcontext = vec![0.0; e];
    for row in 0..e {
        let w = &params.out_proj[row * c..(row + 1) * c];
        let gw = &mut grads.out_proj[row * c..(row + 1) * c];
        for cls in 0..c {
            gw[cls] += trace.context[row] * dlogits[cls];
        }
        dcontext[row] = dot(w, dlogits);
    }

    for head in 0..h {
        let weights = &trace.attention[head];
        let u = &trace.head_keys[head * e..(head + 1) * e];
        let dctx = &dcontext[head * d..(head + 1) * d];
        let dweights: Vec<f64> = ids
            .iter()
            .map(|&id| dot(dctx, &params.embedding(id)[head * d..(head + 1) * d]))
            .collect();
        let mean: f64 = weights.iter().zip(&dweights).map(|(a, g)| a * g).sum();
        let mut du = vec![0.0; e];
        for (pos, &id) in ids.iter().enumerate() {
            let ds = weights[pos] * (dweights[pos] - mean) * scale;
            let emb = params.embedding(id);
            for row in 0..e {
                du[row] += ds * emb[row];
            }
            let mut de = vec![0.0; e];
            for row in 0..e {
                de[row] = ds * u[row];
            }
            for j in 0..d {
                de[head * d + j] += weights[pos] * dctx[j];
            }
            let gemb = &mut grads.embeddings[id * e..(id + 1) * e];
            for row in 0..e {
                gemb[row] += de[row];
            }
            if let Some(pg) = position_grads.as_deref_mut() {
                for row in 0..e {
                    pg[pos * e + row] += de[row];
                }
            }
        }
        let q = &params.head_queries[head * d..(head + 1) * d];
        let k = &params.key_proj[head * e * d..(head + 1) * e * d];
        let gk = &mut grads.key_proj[head * e * d..(head + 1) * e * d];
        let gq = &mut grads.head_queries[head * d..(head + 1) * d];
        for row in 0..e {
            for j in 0..d {
                gk[row * d + j] += du[row] * q[j];
                gq[j] += k[row * d + j] * du[row];
            }
        }
    }
}

/// Cross-entropy gradient with respect to the logits.
fn cross_entropy_dlogits(trace: &ForwardTrace, label: usize) -> Vec<f64> {
    let mut g = trace.probs.clone();
    g[label] -= 1.0;
    g
}

/// `-log p(label) + l2 * ||theta||^2` and its exact gradient.
pub fn loss_and_grads(
    params: &ModelParams,
    trace: &ForwardTrace,
    label: usize,
    l2: f64,
) -> Result<(f64, ModelParams)> {
    if label >= params.config.num_classes {
        return Err(Error::Shape(format!("label {label} outside the class range")));
    }
    let nll = -log_softmax_at(&trace.logits, label);
    let loss = nll + l2 * params.squared_norm();
    if !loss.is_finite() {
        return Err(Error::Numeric {
            tensor: "loss".into(),
        });
    }
    let mut grads = params.zeros_like();
    backprop(params, trace, &cross_entropy_dlogits(trace, label), &mut grads, None);
    grads.add_scaled(params, 2.0 * l2);
    grads.check_finite()?;
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            epochs: 20,
            batch_size: 32,
            l2: 1e-3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Epoch order for minibatch training, fixed by the seed.
pub(crate) fn shuffled_epochs(seed: u64, n: usize) -> impl FnMut() -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    move || {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Dev macro-F1 after every epoch.
    pub history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Minibatch Adam with per-batch global-norm clipping. Keeps the epoch with
/// the best dev macro-F1 (earliest on ties). `masks`, when given, restricts
/// every train and dev document to its rationale.
pub fn train(
    train: &DatasetSplit,
    dev: &DatasetSplit,
    config: ModelConfig,
    tcfg: &TrainConfig,
    masks: Option<&SplitMasks>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if train.num_classes() != config.num_classes
        || dev.num_classes() != config.num_classes
        || train.vocab() != dev.vocab()
        || train.vocab().len() != config.vocab_size
    {
        return Err(Error::Shape(
            "train and dev must share the model's vocabulary and classes".into(),
        ));
    }
    let mut params = init_params(config, tcfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut grads = params.zeros_like();
    let mut next_order = shuffled_epochs(tcfg.seed, train.len());
    let train_masks = masks.map(|m| &m.train[..]);
    let dev_masks = masks.map(|m| &m.dev[..]);

    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..tcfg.epochs {
        for (batch_no, batch) in next_order().chunks(tcfg.batch_size).enumerate() {
            grads.zero();
            let mut loss = 0.0;
            for &i in batch {
                let doc = &train.documents()[i];
                let mask = train_masks.map(|m| &m[i]);
                let trace = forward(&params, &train.encoded()[i], mask)
                    .map_err(|e| e.in_document(&doc.id))?;
                loss -= log_softmax_at(&trace.logits, doc.label);
                backprop(&params, &trace, &cross_entropy_dlogits(&trace, doc.label), &mut grads, None);
            }
            grads.scale(1.0 / batch.len() as f64);
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
        let f1 = evaluate(&params, dev, dev_masks)?.macro_f1;
        history.push(f1);
        if best.as_ref().map_or(true, |(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, params.clone()));
        }
    }
    Ok(match best {
        Some((_, epoch, best_params)) => TrainOutcome {
            params: best_params,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params,
            history,
            best_epoch: None,
        },
    })
}

pub fn predict(params: &ModelParams, doc: &EncodedDoc, mask: Option<&RationaleMask>) -> Result<usize> {
    Ok(argmax(&forward(params, doc, mask)?.probs))
}

pub fn evaluate(
    params: &ModelParams,
    split: &DatasetSplit,
    masks: Option<&[RationaleMask]>,
) -> Result<Metrics> {
    if split.vocab().len() != params.config.vocab_size
        || split.num_classes() != params.config.num_classes
    {
        return Err(Error::Shape(
            "split vocabulary or classes do not match the model".into(),
        ));
    }
    if let Some(m) = masks {
        if m.len() != split.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} documents",
                m.len(),
                split.len()
            )));
        }
    }
    let predicted = (0..split.len())
        .into_par_iter()
        .map(|i| {
            predict(params, &split.encoded()[i], masks.map(|m| &m[i]))
                .map_err(|e| e.in_document(&split.documents()[i].id))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(classification_metrics(
        &predicted,
        &split.labels(),
        split.num_classes(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            embed_dim: 4,
            num_heads: 2,
            num_classes: 3,
            sep_id: SEP_ID,
            pad_id: PAD_ID,
        }
    }

    fn encoded(pieces: &[usize], token_starts: &[usize], query: Option<Vec<usize>>) -> EncodedDoc {
        EncodedDoc {
            query,
            pieces: pieces.to_vec(),
            token_starts: token_starts.to_vec(),
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(tiny_config(), 9).unwrap();
        let b = init_params(tiny_config(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.out_bias.iter().all(|&x| x == 0.0));
        assert_ne!(a, init_params(tiny_config(), 10).unwrap());
    }

    #[test]
    fn embedding_spread_matches_uniform_std() {
        let cfg = ModelConfig::new(
            ArchConfig {
                embed_dim: 32,
                num_heads: 2,
            },
            500,
            2,
        );
        let p = init_params(cfg, 1).unwrap();
        let n = p.embeddings.len() as f64;
        let mean = p.embeddings.iter().sum::<f64>() / n;
        let std = (p.embeddings.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        // U(-a, a) has standard deviation a / sqrt(3).
        let expected = 1.0 / 32f64.sqrt() / 3f64.sqrt();
        assert!((std - expected).abs() < 0.1 * expected, "{std} vs {expected}");
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(init_params(cfg, 0).is_err());
    }

    #[test]
    fn identical_embeddings_split_attention() {
        let mut cfg = tiny_config();
        cfg.num_heads = 1;
        let p = init_params(cfg, 2).unwrap();
        let doc = encoded(&[4, 4], &[0, 1, 2], None);
        let trace = forward(&p, &doc, None).unwrap();
        assert_eq!(trace.attention[0], vec![0.5, 0.5]);
    }

    #[test]
    fn full_mask_equals_no_mask() {
        let p = init_params(tiny_config(), 3).unwrap();
        let doc = encoded(&[3, 4, 5, 3], &[0, 2, 3, 4], Some(vec![5]));
        let mask = RationaleMask::new("d", 0..3, true, None);
        let a = forward(&p, &doc, None).unwrap();
        let b = forward(&p, &doc, Some(&mask)).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for row in &a.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sequence_layout_with_query() {
        let doc = encoded(&[3, 4, 5], &[0, 2, 3], Some(vec![5, 4]));
        let input = input_sequence(&doc, None).unwrap();
        assert_eq!(input.ids, vec![5, 4, SEP_ID, 3, 4, 5]);
        assert_eq!(input.doc_start, 3);
        assert_eq!(input.piece_tokens, vec![0, 0, 1]);
        let masked = input_sequence(&doc, Some(&RationaleMask::new("d", [1], false, None))).unwrap();
        assert_eq!(masked.ids, vec![5, 4, SEP_ID, 5]);
        assert!(input_sequence(&doc, Some(&RationaleMask::new("d", Vec::new(), false, None))).is_err());
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let mut p = ModelParams::zeros(tiny_config());
        p.out_bias = vec![800.0, 0.0, 0.0];
        let doc = encoded(&[3], &[0, 1], None);
        let trace = forward(&p, &doc, None).unwrap();
        let (loss, grads) = loss_and_grads(&p, &trace, 0, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.out_bias.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l2_term_is_linear_in_weight() {
        let p = init_params(tiny_config(), 4).unwrap();
        let doc = encoded(&[3, 4], &[0, 1, 2], None);
        let trace = forward(&p, &doc, None).unwrap();
        let (base, _) = loss_and_grads(&p, &trace, 1, 0.0).unwrap();
        let (one, _) = loss_and_grads(&p, &trace, 1, 0.01).unwrap();
        let (two, _) = loss_and_grads(&p, &trace, 1, 0.02).unwrap();
        assert!(((two - base) - 2.0 * (one - base)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let p = init_params(tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }
}
