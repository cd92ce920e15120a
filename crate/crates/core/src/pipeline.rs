//! The three-stage procedure: a support model trained on full text scores
//! tokens, the scores are discretized into rationales, and an independent
//! classifier is trained and evaluated on the rationales alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Document, SplitName, Splits, SEP_ID};
use crate::discretize::{apply_rationale, discretize_split, BudgetSpec, RationaleMask, SplitMasks};
use crate::error::{Error, Result};
use crate::extractor::{
    make_pseudo_targets, mean_agreement, mix_supervision, tag_split, train_tagger, Agreement,
    TaggerParams,
};
use crate::metrics::Metrics;
use crate::model::{self, evaluate, input_sequence, ArchConfig, ModelConfig, ModelParams, TrainConfig};
use crate::saliency::{score_corpus, Scorer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    /// Discretize the support model's scores directly.
    #[default]
    Heuristic,
    /// Train a tagger on the discretized scores and decode its predictions.
    Tagger,
}

impl ExtractorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorMode::Heuristic => "heuristic",
            ExtractorMode::Tagger => "tagger",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreshConfig {
    pub scorer: Scorer,
    pub budget: BudgetSpec,
    pub extractor: ExtractorMode,
    /// Fraction of gold-bearing training documents whose tagger targets are
    /// replaced by human rationales. Tagger mode only.
    pub supervision: f64,
    pub support_arch: ArchConfig,
    pub support_train: TrainConfig,
    pub classifier_arch: ArchConfig,
    pub classifier_train: TrainConfig,
    pub tagger_embed_dim: usize,
    pub tagger_train: TrainConfig,
    /// Overrides the seeds of every stage.
    pub seed: u64,
}

impl Default for FreshConfig {
    fn default() -> Self {
        FreshConfig {
            scorer: Scorer::Attention,
            budget: BudgetSpec::default(),
            extractor: ExtractorMode::Heuristic,
            supervision: 0.0,
            support_arch: ArchConfig::default(),
            support_train: TrainConfig::default(),
            classifier_arch: ArchConfig::default(),
            classifier_train: TrainConfig::default(),
            tagger_embed_dim: 16,
            tagger_train: TrainConfig {
                epochs: 10,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl FreshConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.extractor == ExtractorMode::Heuristic && self.supervision != 0.0 {
            return Err(Error::Config(
                "rationale supervision requires the tagger extractor".into(),
            ));
        }
        if self.extractor == ExtractorMode::Tagger && self.budget.scope != crate::discretize::Scope::Instance {
            return Err(Error::Config(
                "the tagger extractor decodes with an instance-scope budget".into(),
            ));
        }
        self.support_train.validate()?;
        self.classifier_train.validate()?;
        self.tagger_train.validate()
    }

    fn seeded(&self, train: &TrainConfig, offset: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(offset),
            ..*train
        }
    }

    pub fn support_train_config(&self) -> TrainConfig {
        self.seeded(&self.support_train, 0)
    }

    pub fn classifier_train_config(&self) -> TrainConfig {
        self.seeded(&self.classifier_train, 0)
    }

    pub fn tagger_train_config(&self) -> TrainConfig {
        self.seeded(&self.tagger_train, 1)
    }
}

/// What the classifier stage produced from a fixed set of masks.
#[derive(Clone, Debug)]
pub struct ClassifierRun {
    /// The rationale-only splits the classifier was trained and tested on.
    pub reduced: Splits,
    pub params: ModelParams,
    pub history: Vec<f64>,
    pub dev: Metrics,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessAudit {
    pub checked: usize,
    pub violations: Vec<String>,
    /// Rationale length in tokens -> number of documents.
    pub length_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug)]
pub struct FreshResult {
    pub support: ModelParams,
    pub support_history: Vec<f64>,
    pub tagger: Option<TaggerParams>,
    pub masks: SplitMasks,
    pub classifier: ClassifierRun,
    /// The support model on full text, the reference point.
    pub full_text_dev: Metrics,
    pub full_text_test: Metrics,
    /// Test-split overlap with gold rationales, when any exist.
    pub agreement: Option<Agreement>,
    /// Mean `|rationale| / l` over the test split.
    pub mean_rationale_ratio: f64,
    pub audit: FaithfulnessAudit,
}

fn reduce_split(split: &DatasetSplit, masks: &[RationaleMask]) -> Result<DatasetSplit> {
    if masks.len() != split.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} documents of `{}`",
            masks.len(),
            split.len(),
            split.name()
        )));
    }
    let docs = split
        .documents()
        .iter()
        .zip(masks)
        .map(|(d, m)| apply_rationale(d, m).map_err(|e| e.in_document(&d.id)))
        .collect::<Result<Vec<Document>>>()?;
    split.with_documents(docs)
}

/// Build the rationale-only dataset and train/evaluate a classifier on it.
/// Depends on nothing but the data and the masks.
pub fn train_classifier_on_masks(
    data: &Splits,
    masks: &SplitMasks,
    arch: ArchConfig,
    tcfg: &TrainConfig,
) -> Result<ClassifierRun> {
    let reduced = Splits::new(
        reduce_split(&data.train, &masks.train)?,
        reduce_split(&data.dev, &masks.dev)?,
        reduce_split(&data.test, &masks.test)?,
    )?;
    let config = ModelConfig::for_split(arch, &reduced.train);
    let outcome = model::train(&reduced.train, &reduced.dev, config, tcfg, None)?;
    let dev = evaluate(&outcome.params, &reduced.dev, None)?;
    let test = evaluate(&outcome.params, &reduced.test, None)?;
    Ok(ClassifierRun {
        reduced,
        params: outcome.params,
        history: outcome.history,
        dev,
        test,
    })
}

/// Train the support model on full text.
pub fn train_support(data: &Splits, cfg: &FreshConfig) -> Result<model::TrainOutcome> {
    let config = ModelConfig::for_split(cfg.support_arch, &data.train);
    model::train(&data.train, &data.dev, config, &cfg.support_train_config(), None)
}

/// Masks for every split from a trained support model, either by direct
/// discretization or through a tagger fit on the training masks.
pub fn extract_masks(
    data: &Splits,
    support: &ModelParams,
    cfg: &FreshConfig,
) -> Result<(SplitMasks, Option<TaggerParams>)> {
    let mut heuristic = SplitMasks::default();
    for split in data.iter() {
        let scores = score_corpus(support, split, cfg.scorer)?;
        *heuristic.get_mut(split.name()) = discretize_split(&scores, &cfg.budget)?;
        if cfg.extractor == ExtractorMode::Tagger {
            // Only the training masks are needed as targets.
            break;
        }
    }
    match cfg.extractor {
        ExtractorMode::Heuristic => Ok((heuristic, None)),
        ExtractorMode::Tagger => {
            let pseudo = make_pseudo_targets(&heuristic.train, &data.train)?;
            let targets = mix_supervision(&pseudo, &data.train, cfg.supervision, cfg.seed)?;
            let tagger = train_tagger(&data.train, &targets, cfg.tagger_embed_dim, &cfg.tagger_train_config())?;
            let mut masks = SplitMasks::default();
            for split in data.iter() {
                *masks.get_mut(split.name()) = tag_split(&tagger, split, &cfg.budget)?;
            }
            Ok((masks, Some(tagger)))
        }
    }
}

pub fn run_fresh(data: &Splits, cfg: &FreshConfig) -> Result<FreshResult> {
    cfg.validate()?;
    let support = train_support(data, cfg).map_err(|e| e.in_stage("support"))?;
    let full_text_dev = evaluate(&support.params, &data.dev, None).map_err(|e| e.in_stage("support"))?;
    let full_text_test = evaluate(&support.params, &data.test, None).map_err(|e| e.in_stage("support"))?;

    let (masks, tagger) = extract_masks(data, &support.params, cfg).map_err(|e| e.in_stage("extract"))?;

    let classifier = train_classifier_on_masks(data, &masks, cfg.classifier_arch, &cfg.classifier_train_config())
        .map_err(|e| e.in_stage("classifier"))?;

    let agreement = mean_agreement(&masks.test, &data.test).map(|(a, _)| a);
    let mean_rationale_ratio = masks
        .test
        .iter()
        .zip(data.test.documents())
        .map(|(m, d)| m.len() as f64 / d.len() as f64)
        .sum::<f64>()
        / data.test.len().max(1) as f64;

    let mut result = FreshResult {
        support: support.params,
        support_history: support.history,
        tagger,
        masks,
        classifier,
        full_text_dev,
        full_text_test,
        agreement,
        mean_rationale_ratio,
        audit: FaithfulnessAudit {
            checked: 0,
            violations: Vec::new(),
            length_histogram: BTreeMap::new(),
        },
    };
    result.audit = verify_faithfulness(&result, data).map_err(|e| e.in_stage("audit"))?;
    Ok(result)
}

/// The piece ids the classifier must read for `doc` under `mask`, built
/// from the original token strings.
fn expected_input(doc: &Document, mask: &RationaleMask, split: &DatasetSplit) -> Vec<usize> {
    let vocab = split.vocab();
    let mut ids = Vec::new();
    if let Some(query) = &doc.query {
        ids.extend(query.iter().flat_map(|t| t.pieces.iter().map(|p| vocab.id(p))));
        ids.push(SEP_ID);
    }
    for &i in &mask.selected {
        if let Some(token) = doc.tokens.get(i) {
            ids.extend(token.pieces.iter().map(|p| vocab.id(p)));
        }
    }
    ids
}

/// Check, for every document of every split, that the classifier's input is
/// exactly the query, the separator and the mask-selected tokens.
pub fn audit_faithfulness(result: &FreshResult, data: &Splits) -> Result<FaithfulnessAudit> {
    let mut audit = FaithfulnessAudit {
        checked: 0,
        violations: Vec::new(),
        length_histogram: BTreeMap::new(),
    };
    for name in SplitName::ALL {
        let original = data.get(name);
        let reduced = result.classifier.reduced.get(name);
        let masks = result.masks.get(name);
        if reduced.len() != original.len() || masks.len() != original.len() {
            return Err(Error::Shape(format!("split `{name}` sizes disagree")));
        }
        for (i, doc) in original.documents().iter().enumerate() {
            audit.checked += 1;
            let seen = input_sequence(&reduced.encoded()[i], None).map(|input| input.ids);
            let faithful = masks[i].doc_id == doc.id
                && reduced.documents()[i].id == doc.id
                && masks[i].validate(doc.len()).is_ok()
                && seen.is_ok_and(|ids| ids == expected_input(doc, &masks[i], original));
            if !faithful {
                audit.violations.push(doc.id.clone());
            }
            *audit
                .length_histogram
                .entry(reduced.documents()[i].len())
                .or_insert(0) += 1;
        }
    }
    Ok(audit)
}

/// [`audit_faithfulness`], failing hard on any violation.
pub fn verify_faithfulness(result: &FreshResult, data: &Splits) -> Result<FaithfulnessAudit> {
    let audit = audit_faithfulness(result, data)?;
    if !audit.violations.is_empty() {
        return Err(Error::Faithfulness {
            doc_ids: audit.violations,
        });
    }
    Ok(audit)
}

/// Rationale-only evaluation of an arbitrary classifier: the model reads
/// only the selected tokens of each document.
pub fn evaluate_on_masks(params: &ModelParams, split: &DatasetSplit, masks: &[RationaleMask]) -> Result<Metrics> {
    evaluate(params, split, Some(masks))
}
