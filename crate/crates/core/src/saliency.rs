//! Word-level importance scores from a trained support model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, EncodedDoc};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{backprop, forward, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    #[default]
    Attention,
    Gradient,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Attention => "attention",
            Scorer::Gradient => "gradient",
        }
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scorer> {
        match s {
            "attention" => Ok(Scorer::Attention),
            "gradient" => Ok(Scorer::Gradient),
            other => Err(Error::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub scores: Vec<f64>,
    pub scorer: Scorer,
}

impl ScoreVector {
    pub fn new(doc_id: impl Into<String>, scores: Vec<f64>, scorer: Scorer) -> ScoreVector {
        ScoreVector {
            doc_id: doc_id.into(),
            scores,
            scorer,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self, num_tokens: usize) -> Result<()> {
        if self.scores.len() != num_tokens {
            return Err(Error::Shape(format!(
                "{} scores for {num_tokens} tokens of `{}`",
                self.scores.len(),
                self.doc_id
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Numeric {
                tensor: format!("scores of `{}`", self.doc_id),
            });
        }
        Ok(())
    }
}

/// Head-averaged attention of every document token: attention weights of a
/// token's pieces are summed per head, then averaged over heads. Query and
/// separator weights are dropped without renormalizing.
pub fn attention_scores(params: &ModelParams, doc_id: &str, doc: &EncodedDoc) -> Result<ScoreVector> {
    let trace = forward(params, doc, None)?;
    let input = &trace.input;
    let heads = trace.attention.len() as f64;
    let mut scores = vec![0.0; doc.num_tokens()];
    for weights in &trace.attention {
        for (&token, w) in input.piece_tokens.iter().zip(&weights[input.doc_start..]) {
            scores[token] += w;
        }
    }
    scores.iter_mut().for_each(|s| *s /= heads);
    Ok(ScoreVector::new(doc_id, scores, Scorer::Attention))
}

/// Input-gradient saliency: the norm of the gradient of the predicted-class
/// logit with respect to each document piece embedding, summed per token.
pub fn gradient_scores(params: &ModelParams, doc_id: &str, doc: &EncodedDoc) -> Result<ScoreVector> {
    let trace = forward(params, doc, None)?;
    let predicted = argmax(&trace.probs);
    let mut dlogits = vec![0.0; params.config.num_classes];
    dlogits[predicted] = 1.0;
    let mut scratch = params.zeros_like();
    let mut position_grads = Vec::new();
    backprop(params, &trace, &dlogits, &mut scratch, Some(&mut position_grads));

    let e = params.config.embed_dim;
    let input = &trace.input;
    let mut scores = vec![0.0; doc.num_tokens()];
    for (offset, &token) in input.piece_tokens.iter().enumerate() {
        let pos = input.doc_start + offset;
        let g = &position_grads[pos * e..(pos + 1) * e];
        scores[token] += g.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let sv = ScoreVector::new(doc_id, scores, Scorer::Gradient);
    sv.validate(doc.num_tokens())?;
    Ok(sv)
}

pub fn score_document(params: &ModelParams, doc_id: &str, doc: &EncodedDoc, scorer: Scorer) -> Result<ScoreVector> {
    match scorer {
        Scorer::Attention => attention_scores(params, doc_id, doc),
        Scorer::Gradient => gradient_scores(params, doc_id, doc),
    }
}

/// One score vector per document, in document order.
pub fn score_corpus(params: &ModelParams, split: &DatasetSplit, scorer: Scorer) -> Result<Vec<ScoreVector>> {
    split
        .documents()
        .par_iter()
        .zip(split.encoded().par_iter())
        .map(|(doc, enc)| {
            let sv = score_document(params, &doc.id, enc, scorer).map_err(|e| e.in_document(&doc.id))?;
            sv.validate(doc.len()).map_err(|e| e.in_document(&doc.id))?;
            Ok(sv)
        })
        .collect()
}

/// JSONL, one `{"id", "scores", "scorer"}` object per line.
pub fn write_scores(path: &Path, scores: &[ScoreVector]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for sv in scores {
        serde_json::to_writer(&mut out, sv)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreVector>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sv: ScoreVector = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(sv);
    }
    Ok(out)
}
