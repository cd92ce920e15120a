//! Turning continuous token scores into discrete rationales.
//!
//! Instance-scope selectors pick `k = resolve_k(l, p)` tokens per document,
//! either the `k` highest-scoring tokens or the highest-mass window of
//! length `k`. Global selectors spend one token budget
//! `B = floor(p * sum(l_i))` over a whole split. Ties always resolve to the
//! lowest document ordinal and then the lowest token index.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SplitName};
use crate::error::{Error, Result};
use crate::saliency::ScoreVector;

const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// The ratio the length was resolved from, if any.
    pub ratio: Option<f64>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleMask {
    pub doc_id: String,
    /// Sorted, distinct token indices.
    pub selected: Vec<usize>,
    pub contiguous: bool,
    pub budget: Budget,
}

impl RationaleMask {
    pub fn new(
        doc_id: impl Into<String>,
        selected: impl IntoIterator<Item = usize>,
        contiguous: bool,
        ratio: Option<f64>,
    ) -> RationaleMask {
        let selected: Vec<usize> = selected
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let k = selected.len();
        RationaleMask {
            doc_id: doc_id.into(),
            selected,
            contiguous,
            budget: Budget { ratio, k },
        }
    }

    pub fn full(doc: &Document) -> RationaleMask {
        RationaleMask::new(doc.id.clone(), 0..doc.len(), true, Some(1.0))
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }

    pub fn to_binary(&self, len: usize) -> Vec<bool> {
        let mut z = vec![false; len];
        for &i in &self.selected {
            if i < len {
                z[i] = true;
            }
        }
        z
    }

    /// Check the mask invariants against a document of `len` tokens.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.selected.is_empty() {
            return Err(Error::Selection(format!("mask for `{}` is empty", self.doc_id)));
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Selection(format!(
                "mask for `{}` is not sorted and distinct",
                self.doc_id
            )));
        }
        if let Some(&last) = self.selected.last() {
            if last >= len {
                return Err(Error::Selection(format!(
                    "mask for `{}` selects token {last} of a {len}-token document",
                    self.doc_id
                )));
            }
        }
        if self.contiguous {
            let span = self.selected[self.selected.len() - 1] - self.selected[0] + 1;
            if span != self.selected.len() {
                return Err(Error::Selection(format!(
                    "mask for `{}` is flagged contiguous but has gaps",
                    self.doc_id
                )));
            }
        }
        Ok(())
    }
}

/// Masks for every split of a corpus, aligned with the split documents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitMasks {
    pub train: Vec<RationaleMask>,
    pub dev: Vec<RationaleMask>,
    pub test: Vec<RationaleMask>,
}

impl SplitMasks {
    pub fn get(&self, name: SplitName) -> &[RationaleMask] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut Vec<RationaleMask> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Dev => &mut self.dev,
            SplitName::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Instance,
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    #[serde(rename = "topk")]
    TopK,
    Contiguous,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Instance => "instance",
            Scope::Global => "global",
        }
    }
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TopK => "topk",
            Strategy::Contiguous => "contiguous",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSpec {
    pub ratio: f64,
    pub scope: Scope,
    pub strategy: Strategy,
    /// Per-document floor ratio `q < p`, global scope only.
    pub floor: f64,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec {
            ratio: 0.2,
            scope: Scope::Instance,
            strategy: Strategy::TopK,
            floor: 0.0,
        }
    }
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "budget ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if !(self.floor >= 0.0 && self.floor < self.ratio) {
            return Err(Error::Config(format!(
                "floor ratio {} must satisfy 0 <= q < p = {}",
                self.floor, self.ratio
            )));
        }
        Ok(())
    }
}

/// `max(1, round(p * l))` with halves rounded up, capped at `l`.
pub fn resolve_k(len: usize, ratio: f64) -> usize {
    let k = (ratio * len as f64 + 0.5 + ROUNDING_SLACK).floor() as usize;
    k.clamp(1, len.max(1))
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::Selection(format!(
            "k = {k} outside 1..={len}"
        )));
    }
    Ok(())
}

/// Order by descending score, then ascending index.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` highest-scoring indices in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(scores.len(), k)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(by_score_desc(scores));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Start and mass of the first length-`k` window of maximal total score,
/// found with one sliding pass.
pub fn best_window(scores: &[f64], k: usize) -> Result<(usize, f64)> {
    check_k(scores.len(), k)?;
    let mut sum: f64 = scores[..k].iter().sum();
    let (mut best_start, mut best_sum) = (0, sum);
    for start in 1..=scores.len() - k {
        sum += scores[start + k - 1] - scores[start - 1];
        if sum > best_sum {
            best_start = start;
            best_sum = sum;
        }
    }
    // Recompute the winner exactly so that masses do not carry drift from
    // the running sum.
    Ok((best_start, scores[best_start..best_start + k].iter().sum()))
}

pub fn topk_instance(scores: &ScoreVector, k: usize) -> Result<RationaleMask> {
    let selected = top_k_indices(&scores.scores, k)?;
    Ok(RationaleMask::new(scores.doc_id.clone(), selected, false, None))
}

pub fn best_span(scores: &ScoreVector, k: usize) -> Result<RationaleMask> {
    let (start, _) = best_window(&scores.scores, k)?;
    Ok(RationaleMask::new(
        scores.doc_id.clone(),
        start..start + k,
        true,
        None,
    ))
}

/// Instance-scope selection with `k = resolve_k(l, p)`.
pub fn select_instance(scores: &ScoreVector, ratio: f64, strategy: Strategy) -> Result<RationaleMask> {
    let k = resolve_k(scores.len(), ratio);
    let mut mask = match strategy {
        Strategy::TopK => topk_instance(scores, k)?,
        Strategy::Contiguous => best_span(scores, k)?,
    };
    mask.budget.ratio = Some(ratio);
    Ok(mask)
}

/// Corpus-wide token budget with per-document minimum lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalBudget {
    pub total: usize,
    pub minimums: Vec<usize>,
    pub consumed: usize,
}

impl GlobalBudget {
    pub fn new(lengths: &[usize], ratio: f64, minimums: Vec<usize>) -> Result<GlobalBudget> {
        if lengths.is_empty() {
            return Err(Error::Config("global selection needs a nonempty corpus".into()));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("budget ratio {ratio} outside (0, 1]")));
        }
        let sum: usize = lengths.iter().sum();
        let total = (ratio * sum as f64 + ROUNDING_SLACK).floor() as usize;
        let floor_total: usize = minimums.iter().sum();
        if floor_total > total {
            return Err(Error::Config(format!(
                "budget of {total} tokens cannot cover the per-document minimum of {floor_total}"
            )));
        }
        Ok(GlobalBudget {
            total,
            consumed: floor_total,
            minimums,
        })
    }

    pub fn remaining(&self) -> usize {
        self.total - self.consumed
    }
}

/// Per-document floor lengths for a floor ratio `q`; `q = 0` still grants
/// every document one token.
pub fn floor_lengths(lengths: &[usize], floor_ratio: f64) -> Vec<usize> {
    lengths
        .iter()
        .map(|&l| {
            if floor_ratio > 0.0 {
                resolve_k(l, floor_ratio)
            } else {
                1
            }
        })
        .collect()
}

/// Global top-k: each document first takes its top `resolve_k(l_i, q)`
/// tokens, then the rest of `floor(p * sum(l_i))` goes to the best remaining
/// tokens of the whole corpus.
pub fn global_topk(corpus: &[ScoreVector], ratio: f64, floor_ratio: f64) -> Result<Vec<RationaleMask>> {
    if !(floor_ratio >= 0.0 && floor_ratio < ratio) {
        return Err(Error::Config(format!(
            "floor ratio {floor_ratio} must satisfy 0 <= q < p = {ratio}"
        )));
    }
    let lengths: Vec<usize> = corpus.iter().map(ScoreVector::len).collect();
    let mut budget = GlobalBudget::new(&lengths, ratio, floor_lengths(&lengths, floor_ratio))?;

    let mut selected: Vec<Vec<bool>> = lengths.iter().map(|&l| vec![false; l]).collect();
    for (d, sv) in corpus.iter().enumerate() {
        for i in top_k_indices(&sv.scores, budget.minimums[d])? {
            selected[d][i] = true;
        }
    }

    let mut pool: Vec<(usize, usize)> = selected
        .iter()
        .enumerate()
        .flat_map(|(d, sel)| {
            sel.iter()
                .enumerate()
                .filter(|(_, s)| !**s)
                .map(move |(i, _)| (d, i))
        })
        .collect();
    pool.sort_by(|&(da, ia), &(db, ib)| {
        corpus[db].scores[ib]
            .total_cmp(&corpus[da].scores[ia])
            .then(da.cmp(&db))
            .then(ia.cmp(&ib))
    });
    for &(d, i) in pool.iter().take(budget.remaining()) {
        selected[d][i] = true;
        budget.consumed += 1;
    }
    debug_assert_eq!(budget.consumed, budget.total);

    Ok(corpus
        .iter()
        .zip(selected)
        .map(|(sv, sel)| {
            let idx = sel.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i);
            RationaleMask::new(sv.doc_id.clone(), idx, false, Some(ratio))
        })
        .collect())
}

/// Max-heap entry: largest gain first, lowest document ordinal on ties.
#[derive(Debug, PartialEq)]
struct Gain {
    value: f64,
    doc: usize,
}

impl Eq for Gain {}

impl Ord for Gain {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then(other.doc.cmp(&self.doc))
    }
}

impl PartialOrd for Gain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Global contiguous selection. Every document starts from its best span of
/// its minimum length; then, one token at a time, the document whose best
/// `(k+1)`-span beats its best `k`-span by the most grows by one. Each final
/// mask is the best span at the document's final length.
///
/// Minimum lengths are clamped to `[1, l_i]`.
pub fn global_contig(corpus: &[ScoreVector], ratio: f64, min_len: &[usize]) -> Result<Vec<RationaleMask>> {
    if min_len.len() != corpus.len() {
        return Err(Error::Shape(format!(
            "{} minimum lengths for {} documents",
            min_len.len(),
            corpus.len()
        )));
    }
    let lengths: Vec<usize> = corpus.iter().map(ScoreVector::len).collect();
    let minimums: Vec<usize> = min_len
        .iter()
        .zip(&lengths)
        .map(|(&m, &l)| m.clamp(1, l))
        .collect();
    let mut budget = GlobalBudget::new(&lengths, ratio, minimums)?;

    let mut current: Vec<usize> = budget.minimums.clone();
    let mut mass: Vec<f64> = Vec::with_capacity(corpus.len());
    let mut heap = BinaryHeap::with_capacity(corpus.len());
    for (d, sv) in corpus.iter().enumerate() {
        let (_, m) = best_window(&sv.scores, current[d])?;
        mass.push(m);
        if current[d] < lengths[d] {
            let (_, next) = best_window(&sv.scores, current[d] + 1)?;
            heap.push(Gain { value: next - m, doc: d });
        }
    }

    while budget.consumed < budget.total {
        let Gain { doc, .. } = heap
            .pop()
            .ok_or_else(|| Error::Config("budget exceeds corpus size".into()))?;
        current[doc] += 1;
        budget.consumed += 1;
        let scores = &corpus[doc].scores;
        mass[doc] = best_window(scores, current[doc])?.1;
        if current[doc] < lengths[doc] {
            let (_, next) = best_window(scores, current[doc] + 1)?;
            heap.push(Gain { value: next - mass[doc], doc });
        }
    }

    corpus
        .iter()
        .zip(&current)
        .map(|(sv, &k)| {
            let mut mask = best_span(sv, k)?;
            mask.budget.ratio = Some(ratio);
            Ok(mask)
        })
        .collect()
}

/// Discretize a whole split according to `spec`.
pub fn discretize_split(corpus: &[ScoreVector], spec: &BudgetSpec) -> Result<Vec<RationaleMask>> {
    spec.validate()?;
    match spec.scope {
        Scope::Instance => corpus
            .iter()
            .map(|sv| select_instance(sv, spec.ratio, spec.strategy))
            .collect(),
        Scope::Global => match spec.strategy {
            Strategy::TopK => global_topk(corpus, spec.ratio, spec.floor),
            Strategy::Contiguous => {
                let lengths: Vec<usize> = corpus.iter().map(ScoreVector::len).collect();
                global_contig(corpus, spec.ratio, &floor_lengths(&lengths, spec.floor))
            }
        },
    }
}

/// Reduce a document to its selected tokens. Unselected tokens are removed,
/// the query and label are kept, and the gold rationale is re-indexed onto
/// the surviving tokens.
pub fn apply_rationale(doc: &Document, mask: &RationaleMask) -> Result<Document> {
    if doc.id != mask.doc_id {
        return Err(Error::Selection(format!(
            "mask for `{}` applied to document `{}`",
            mask.doc_id, doc.id
        )));
    }
    mask.validate(doc.len())?;
    let tokens = mask.selected.iter().map(|&i| doc.tokens[i].clone()).collect();
    let gold_rationale = doc.gold_rationale.as_ref().map(|gold| {
        mask.selected
            .iter()
            .enumerate()
            .filter(|(_, i)| gold.contains(i))
            .map(|(new, _)| new)
            .collect()
    });
    Ok(Document {
        id: doc.id.clone(),
        tokens,
        query: doc.query.clone(),
        label: doc.label,
        gold_rationale,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    id: String,
    selected: Vec<usize>,
    contiguous: bool,
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// Write masks as JSONL: `{"id", "selected", "contiguous", "k"}` plus an
/// optional `"source"` tag.
pub fn write_masks(path: &Path, masks: &[RationaleMask], source: Option<&str>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for m in masks {
        let record = MaskRecord {
            id: m.doc_id.clone(),
            selected: m.selected.clone(),
            contiguous: m.contiguous,
            k: m.budget.k,
            ratio: m.budget.ratio,
            source: source.map(str::to_string),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_masks(path: &Path) -> Result<Vec<RationaleMask>> {
    let reader = BufReader::new(File::open(path)?);
    let mut masks = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MaskRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let mut mask = RationaleMask::new(r.id, r.selected, r.contiguous, r.ratio);
        mask.budget.k = r.k;
        masks.push(mask);
    }
    Ok(masks)
}
