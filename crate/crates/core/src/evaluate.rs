//! Prediction and known / unknown / all top-1 accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::logits;
use crate::model::{argmax, ModelState};
use crate::numkit::Matrix;
use crate::synth::UnlabeledDataset;

/// Per-instance (micro-averaged) accuracies. A group with no instances
/// reports 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub known: f64,
    pub unknown: f64,
    pub all: f64,
    pub n_known: usize,
    pub n_unknown: usize,
    /// Share of unknown-class instances predicted as some known class.
    pub unknown_as_known: f64,
}

impl AccuracyTriple {
    /// One table row in percent: `Known Unknown All`.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name:<24} {:>7.1} {:>7.1} {:>7.1}",
            100.0 * self.known,
            100.0 * self.unknown,
            100.0 * self.all
        )
    }

    pub fn table_header() -> String {
        format!("{:<24} {:>7} {:>7} {:>7}", "", "Known", "Unknown", "All")
    }
}

pub fn predict_features(state: &ModelState, raw: &Matrix) -> Result<Vec<usize>> {
    let z = logits(&state.encoder.encode(raw)?, &state.head)?;
    Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
}

/// Argmax of the classifier responses; ties go to the lowest class index.
pub fn predict(state: &ModelState, data: &UnlabeledDataset) -> Result<Vec<usize>> {
    predict_features(state, &data.features)
}

pub fn accuracy_triple(
    preds: &[usize],
    eval_labels: &[usize],
    known_count: usize,
) -> Result<AccuracyTriple> {
    if preds.len() != eval_labels.len() {
        return Err(Error::dims(
            "accuracy_triple",
            format!(
                "{} predictions for {} labels",
                preds.len(),
                eval_labels.len()
            ),
        ));
    }
    let (mut n_known, mut n_unknown, mut ok_known, mut ok_unknown) =
        (0usize, 0usize, 0usize, 0usize);
    let mut collapsed = 0usize;
    for (&p, &y) in preds.iter().zip(eval_labels) {
        let hit = usize::from(p == y);
        if y < known_count {
            n_known += 1;
            ok_known += hit;
        } else {
            n_unknown += 1;
            ok_unknown += hit;
            collapsed += usize::from(p < known_count);
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AccuracyTriple {
        known: frac(ok_known, n_known),
        unknown: frac(ok_unknown, n_unknown),
        all: frac(ok_known + ok_unknown, n_known + n_unknown),
        n_known,
        n_unknown,
        unknown_as_known: frac(collapsed, n_unknown),
    })
}

pub fn evaluate(state: &ModelState, data: &UnlabeledDataset) -> Result<AccuracyTriple> {
    accuracy_triple(
        &predict(state, data)?,
        &data.eval_labels,
        state.head.known_count,
    )
}

/// Final metrics document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub known: f64,
    pub unknown: f64,
    pub all: f64,
    pub n_known: usize,
    pub n_unknown: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl Metrics {
    pub fn new(acc: AccuracyTriple, config_hash: &str, seed: u64) -> Self {
        Self {
            known: acc.known,
            unknown: acc.unknown,
            all: acc.all,
            n_known: acc.n_known,
            n_unknown: acc.n_unknown,
            config_hash: config_hash.to_string(),
            seed,
        }
    }
}
