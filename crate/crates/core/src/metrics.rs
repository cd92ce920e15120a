use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
}

/// Accuracy and per-class / macro F1. A class that never occurs in either
/// the predictions or the gold labels gets an F1 of 0.
pub fn classification_metrics(predicted: &[usize], gold: &[usize], num_classes: usize) -> Metrics {
    assert_eq!(predicted.len(), gold.len(), "prediction/gold length mismatch");
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &g) in predicted.iter().zip(gold) {
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
            correct += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = pred_count[c] + gold_count[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / num_classes as f64;
    let accuracy = if gold.is_empty() {
        0.0
    } else {
        correct as f64 / gold.len() as f64
    };
    Metrics {
        macro_f1,
        accuracy,
        per_class_f1,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
