//! End-to-end rationalization baseline: a Bernoulli mask generator and an
//! encoder trained jointly, the generator through the score-function
//! (REINFORCE) estimator.
//!
//! Per sampled mask `z` the loss is the encoder cross-entropy on the
//! mask-reduced document plus
//!
//! ```text
//! omega(z) = l1 * max(0, |z|/L - d) + l2 * sum_{t=1}^{L-1} |z_t - z_{t-1}| / (L - 1)
//! ```
//!
//! The generator gradient is `(loss - b) * grad log p(z)` with `b` an
//! exponential moving average of past batch losses.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, EncodedDoc, Splits};
use crate::discretize::{resolve_k, RationaleMask};
use crate::error::{Error, Result};
use crate::extractor::{
    bce_step, sigmoid, softplus, supervised_subset, tagger_backprop, tagger_forward, TaggerConfig,
    TaggerParams, DEFAULT_WINDOW,
};
use crate::metrics::Metrics;
use crate::model::{
    backprop, evaluate, forward, init_params, shuffled_epochs, ArchConfig, ModelConfig, ModelParams,
    TrainConfig,
};
use crate::optim::{clip_global_norm, Adam, Parameters};

/// The generator shares the tagger architecture: one Bernoulli logit per
/// token.
pub type GeneratorParams = TaggerParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    /// Conciseness weight.
    pub lambda1: f64,
    /// Contiguity weight.
    pub lambda2: f64,
    /// Desired rationale length ratio `d`; no conciseness penalty below it.
    pub desired_ratio: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda1: 0.1,
            lambda2: 0.5,
            desired_ratio: 0.2,
        }
    }
}

/// The conciseness/contiguity penalty of a binary mask. The contiguity sum
/// runs over interior transitions only; for `L = 1` it is zero.
pub fn omega(z: &[bool], rcfg: &RegularizerConfig) -> f64 {
    let len = z.len();
    if len == 0 {
        return 0.0;
    }
    let selected = z.iter().filter(|&&b| b).count() as f64;
    let concise = (selected / len as f64 - rcfg.desired_ratio).max(0.0);
    let contiguity = if len < 2 {
        0.0
    } else {
        let transitions = z.windows(2).filter(|w| w[0] != w[1]).count() as f64;
        transitions / (len - 1) as f64
    };
    rcfg.lambda1 * concise + rcfg.lambda2 * contiguity
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2EConfig {
    pub regularizer: RegularizerConfig,
    /// Masks sampled per document per step.
    pub samples: usize,
    pub baseline_momentum: f64,
    pub encoder_arch: ArchConfig,
    pub generator_embed_dim: usize,
    pub train: TrainConfig,
    /// Inference-time rationale length ratio.
    pub truncation_ratio: f64,
}

impl Default for E2EConfig {
    fn default() -> Self {
        E2EConfig {
            regularizer: RegularizerConfig::default(),
            samples: 1,
            baseline_momentum: 0.9,
            encoder_arch: ArchConfig::default(),
            generator_embed_dim: 16,
            train: TrainConfig::default(),
            truncation_ratio: 0.2,
        }
    }
}

impl E2EConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.regularizer;
        if !(r.lambda1 >= 0.0 && r.lambda2 >= 0.0) {
            return Err(Error::Config("regularizer weights must be nonnegative".into()));
        }
        if !(r.desired_ratio > 0.0 && r.desired_ratio <= 1.0) {
            return Err(Error::Config("desired ratio must lie in (0, 1]".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("at least one sample per document is required".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(Error::Config("baseline momentum must lie in [0, 1)".into()));
        }
        if !(self.truncation_ratio > 0.0 && self.truncation_ratio <= 1.0) {
            return Err(Error::Config("truncation ratio must lie in (0, 1]".into()));
        }
        self.train.validate()
    }
}

/// Joint log-probability of `z` under independent Bernoulli logits.
pub fn mask_log_prob(logits: &[f64], z: &[bool]) -> f64 {
    logits
        .iter()
        .zip(z)
        .map(|(&a, &zi)| if zi { -softplus(-a) } else { -softplus(a) })
        .sum()
}

/// Draw one mask token by token and return it with its log-probability.
pub fn sample_mask(gen: &GeneratorParams, doc: &EncodedDoc, rng: &mut ChaCha8Rng) -> Result<(Vec<bool>, f64)> {
    let trace = tagger_forward(gen, doc)?;
    let z: Vec<bool> = trace
        .logits
        .iter()
        .map(|&a| rng.gen::<f64>() < sigmoid(a))
        .collect();
    let log_prob = mask_log_prob(&trace.logits, &z);
    Ok((z, log_prob))
}

/// Force a mask to exactly `min(k, L)` tokens: drop the least probable
/// selected tokens, or add the most probable unselected ones. Ties go to
/// the lower index.
pub fn truncate_rationale(doc_id: &str, z: &[bool], probs: &[f64], k: usize) -> RationaleMask {
    let target = k.min(z.len());
    let by_prob = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    let mut chosen: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
    if chosen.len() > target {
        chosen.sort_by(by_prob);
        chosen.truncate(target);
    } else if chosen.len() < target {
        let mut rest: Vec<usize> = (0..z.len()).filter(|&i| !z[i]).collect();
        rest.sort_by(by_prob);
        chosen.extend(rest.into_iter().take(target - chosen.len()));
    }
    RationaleMask::new(doc_id, chosen, false, None)
}

/// Loss statistics of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_loss: f64,
    pub mean_cross_entropy: f64,
    pub mean_omega: f64,
    /// Mean `|z| / L` of the sampled masks, before the empty-mask guard.
    pub mean_selected_ratio: f64,
    /// Baseline used for this step's generator gradient.
    pub baseline: f64,
}

/// Joint generator/encoder training state.
#[derive(Clone, Debug)]
pub struct E2ETrainer {
    pub generator: GeneratorParams,
    pub encoder: ModelParams,
    pub baseline: f64,
    cfg: E2EConfig,
    gen_adam: Adam,
    enc_adam: Adam,
    rng: ChaCha8Rng,
}

impl E2ETrainer {
    pub fn new(train: &DatasetSplit, cfg: &E2EConfig, seed: u64) -> Result<E2ETrainer> {
        cfg.validate()?;
        let encoder = init_params(ModelConfig::for_split(cfg.encoder_arch, train), seed)?;
        let generator = TaggerParams::init(
            TaggerConfig {
                vocab_size: train.vocab().len(),
                embed_dim: cfg.generator_embed_dim,
                window: DEFAULT_WINDOW,
            },
            seed.wrapping_add(1),
        )?;
        Ok(Self::from_parts(generator, encoder, cfg, seed))
    }

    pub fn from_parts(generator: GeneratorParams, encoder: ModelParams, cfg: &E2EConfig, seed: u64) -> E2ETrainer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        E2ETrainer {
            gen_adam: Adam::new(&generator),
            enc_adam: Adam::new(&encoder),
            generator,
            encoder,
            baseline: 0.0,
            cfg: *cfg,
            rng,
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Gradients of one batch without applying them.
    pub fn batch_gradients(
        &mut self,
        split: &DatasetSplit,
        batch: &[usize],
        supervised: &HashSet<usize>,
    ) -> Result<(GeneratorParams, ModelParams, StepStats)> {
        let cfg = self.cfg;
        let mut gen_grads = TaggerParams::zeros(self.generator.config);
        let mut enc_grads = self.encoder.zeros_like();
        let scale = 1.0 / (batch.len() * cfg.samples) as f64;
        let mut stats = StepStats {
            baseline: self.baseline,
            ..StepStats::default()
        };
        for &i in batch {
            let doc = &split.documents()[i];
            let enc_doc = &split.encoded()[i];
            let trace = tagger_forward(&self.generator, enc_doc).map_err(|e| e.in_document(&doc.id))?;
            let probs = trace.probabilities();
            for _ in 0..cfg.samples {
                let mut z: Vec<bool> = probs.iter().map(|&p| self.rng.gen::<f64>() < p).collect();
                stats.mean_selected_ratio += z.iter().filter(|&&b| b).count() as f64 / z.len() as f64 * scale;
                if !z.iter().any(|&b| b) {
                    let top = crate::metrics::argmax(&probs);
                    z[top] = true;
                }
                let mask = RationaleMask::new(
                    doc.id.clone(),
                    (0..z.len()).filter(|&t| z[t]),
                    false,
                    None,
                );
                let enc_trace = forward(&self.encoder, enc_doc, Some(&mask)).map_err(|e| e.in_document(&doc.id))?;
                let cross_entropy = -enc_trace.probs[doc.label].max(f64::MIN_POSITIVE).ln();
                let penalty = omega(&z, &cfg.regularizer);
                let loss = cross_entropy + penalty;
                stats.mean_loss += loss * scale;
                stats.mean_cross_entropy += cross_entropy * scale;
                stats.mean_omega += penalty * scale;

                let mut dlogits = enc_trace.probs.clone();
                dlogits[doc.label] -= 1.0;
                dlogits.iter_mut().for_each(|g| *g *= scale);
                backprop(&self.encoder, &enc_trace, &dlogits, &mut enc_grads, None);

                let advantage = (loss - self.baseline) * scale;
                let gen_dlogits: Vec<f64> = z
                    .iter()
                    .zip(&probs)
                    .map(|(&zi, &p)| advantage * (if zi { 1.0 } else { 0.0 } - p))
                    .collect();
                tagger_backprop(&self.generator, enc_doc, &trace, &gen_dlogits, &mut gen_grads);
            }
            if supervised.contains(&i) {
                let gold = doc.gold_rationale.as_ref().expect("supervised documents carry gold");
                let labels: Vec<bool> = (0..doc.len()).map(|t| gold.contains(&t)).collect();
                bce_step(&self.generator, enc_doc, &labels, 1.0 / batch.len() as f64, &mut gen_grads)?;
            }
        }
        Ok((gen_grads, enc_grads, stats))
    }

    /// One joint update on `batch` (indices into `split`).
    pub fn step(&mut self, split: &DatasetSplit, batch: &[usize], supervised: &HashSet<usize>) -> Result<StepStats> {
        let (mut gen_grads, mut enc_grads, stats) = self.batch_gradients(split, batch, supervised)?;
        let l2 = self.cfg.train.l2;
        gen_grads.add_scaled(&self.generator, 2.0 * l2);
        enc_grads.add_scaled(&self.encoder, 2.0 * l2);
        if !stats.mean_loss.is_finite() {
            return Err(Error::Numeric {
                tensor: "e2e loss".into(),
            });
        }
        gen_grads.check_finite()?;
        enc_grads.check_finite()?;
        clip_global_norm(&mut gen_grads, self.cfg.train.clip_norm);
        clip_global_norm(&mut enc_grads, self.cfg.train.clip_norm);
        let lr = self.cfg.train.learning_rate;
        self.gen_adam.step(&mut self.generator, &gen_grads, lr);
        self.enc_adam.step(&mut self.encoder, &enc_grads, lr);
        let m = self.cfg.baseline_momentum;
        self.baseline = m * self.baseline + (1.0 - m) * stats.mean_loss;
        Ok(stats)
    }
}

/// Deterministic inference masks: threshold the generator at 0.5, then
/// truncate or pad to `resolve_k(l, ratio)` tokens.
pub fn e2e_masks(gen: &GeneratorParams, split: &DatasetSplit, ratio: f64) -> Result<Vec<RationaleMask>> {
    split
        .documents()
        .par_iter()
        .zip(split.encoded().par_iter())
        .map(|(d, enc)| {
            let probs = tagger_forward(gen, enc).map_err(|e| e.in_document(&d.id))?.probabilities();
            let z: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
            let mut mask = truncate_rationale(&d.id, &z, &probs, resolve_k(d.len(), ratio));
            mask.budget.ratio = Some(ratio);
            Ok(mask)
        })
        .collect()
}

/// Mean `|z| / L` of the thresholded generator masks before truncation.
pub fn mean_generator_ratio(gen: &GeneratorParams, split: &DatasetSplit) -> Result<f64> {
    let ratios = split
        .encoded()
        .par_iter()
        .map(|enc| {
            let probs = tagger_forward(gen, enc)?.probabilities();
            Ok(probs.iter().filter(|&&p| p >= 0.5).count() as f64 / probs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.iter().sum::<f64>() / ratios.len().max(1) as f64)
}

/// Mean generator probability, i.e. the expected `|z| / L` of a sample.
pub fn mean_expected_ratio(gen: &GeneratorParams, split: &DatasetSplit) -> Result<f64> {
    let ratios = split
        .encoded()
        .par_iter()
        .map(|enc| {
            let probs = tagger_forward(gen, enc)?.probabilities();
            Ok(probs.iter().sum::<f64>() / probs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.iter().sum::<f64>() / ratios.len().max(1) as f64)
}

pub fn evaluate_e2e(gen: &GeneratorParams, enc: &ModelParams, split: &DatasetSplit, ratio: f64) -> Result<(Metrics, Vec<RationaleMask>)> {
    let masks = e2e_masks(gen, split, ratio)?;
    let metrics = evaluate(enc, split, Some(&masks))?;
    Ok((metrics, masks))
}

#[derive(Clone, Debug)]
pub struct E2EOutcome {
    pub generator: GeneratorParams,
    pub encoder: ModelParams,
    /// Dev macro-F1 on truncated rationales after every epoch.
    pub history: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epoch_stats: Vec<StepStats>,
}

/// Train the baseline. With `supervision > 0` a seeded subset of the
/// gold-bearing training documents adds a binary cross-entropy term between
/// the generator probabilities and the gold token labels.
pub fn train_e2e(data: &Splits, cfg: &E2EConfig, supervision: f64, seed: u64) -> Result<E2EOutcome> {
    cfg.validate()?;
    let train = &data.train;
    let supervised: HashSet<usize> = supervised_subset(train, supervision, seed)?.into_iter().collect();
    let mut trainer = E2ETrainer::new(train, cfg, seed)?;
    let mut next_order = shuffled_epochs(seed, train.len());
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut epoch_stats = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(f64, usize, GeneratorParams, ModelParams)> = None;
    for epoch in 0..cfg.train.epochs {
        let mut totals = StepStats::default();
        let order = next_order();
        let batches: Vec<&[usize]> = order.chunks(cfg.train.batch_size).collect();
        for (batch_no, batch) in batches.iter().enumerate() {
            let stats = trainer.step(train, batch, &supervised).map_err(|e| match e {
                Error::Numeric { .. } => Error::Diverged { epoch, batch: batch_no },
                other => other,
            })?;
            let w = 1.0 / batches.len() as f64;
            totals.mean_loss += stats.mean_loss * w;
            totals.mean_cross_entropy += stats.mean_cross_entropy * w;
            totals.mean_omega += stats.mean_omega * w;
            totals.mean_selected_ratio += stats.mean_selected_ratio * w;
        }
        totals.baseline = trainer.baseline;
        epoch_stats.push(totals);
        let (dev, _) = evaluate_e2e(&trainer.generator, &trainer.encoder, &data.dev, cfg.truncation_ratio)?;
        history.push(dev.macro_f1);
        if best.as_ref().map_or(true, |b| dev.macro_f1 > b.0) {
            best = Some((dev.macro_f1, epoch, trainer.generator.clone(), trainer.encoder.clone()));
        }
    }
    let (best_epoch, generator, encoder) = match best {
        Some((_, e, g, m)) => (Some(e), g, m),
        None => (None, trainer.generator, trainer.encoder),
    };
    Ok(E2EOutcome {
        generator,
        encoder,
        history,
        best_epoch,
        epoch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn omega_worked_example() {
        let r = RegularizerConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            desired_ratio: 0.25,
        };
        let expected = 0.25 + 2.0 / 3.0;
        assert!((omega(&z(&[0, 1, 1, 0]), &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn omega_vanishing_terms() {
        let r = RegularizerConfig {
            lambda1: 2.0,
            lambda2: 3.0,
            desired_ratio: 0.5,
        };
        assert_eq!(omega(&z(&[0, 0, 0, 0]), &r), 0.0);
        let ones = RegularizerConfig {
            lambda1: 0.0,
            ..r
        };
        assert_eq!(omega(&z(&[1, 1, 1]), &ones), 0.0);
        assert_eq!(omega(&z(&[1]), &RegularizerConfig { desired_ratio: 1.0, ..r }), 0.0);
    }

    #[test]
    fn truncation_contract() {
        let probs = [0.9, 0.1, 0.8, 0.3, 0.7, 0.6, 0.2];
        let six = z(&[1, 1, 1, 1, 1, 1, 0]);
        assert_eq!(truncate_rationale("d", &six, &probs, 4).selected, vec![0, 2, 4, 5]);
        let empty = vec![false; 7];
        assert_eq!(truncate_rationale("d", &empty, &probs, 2).selected, vec![0, 2]);
        let exact = z(&[0, 1, 0, 1, 0, 0, 0]);
        assert_eq!(truncate_rationale("d", &exact, &probs, 2).selected, vec![1, 3]);
        assert_eq!(truncate_rationale("d", &exact, &probs, 20).len(), 7);
    }

    #[test]
    fn log_prob_of_certain_and_fair_masks() {
        assert_eq!(mask_log_prob(&[1e3, 1e3], &[true, true]), 0.0);
        let lp = mask_log_prob(&[0.0, 0.0, 0.0], &[true, false, true]);
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    /// On one token with logit `a`, `E[L] = p L1 + (1 - p) L0`, whose
    /// derivative is `p (1 - p) (L1 - L0)`. The estimator `L(z) (z - p)`
    /// must agree in expectation.
    #[test]
    fn score_function_estimator_is_unbiased() {
        let a = 0.4f64;
        let p = sigmoid(a);
        let (l1, l0) = (0.3, 1.7);
        let analytic = p * (1.0 - p) * (l1 - l0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let zi = rng.gen::<f64>() < p;
                let loss = if zi { l1 } else { l0 };
                loss * (if zi { 1.0 } else { 0.0 } - p)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic} (se {se})");
    }
}
