//! Out-of-fold prediction for stacked denoisers.
//!
//! Sequences are split into two training folds `P1`, `P2` and a test group.
//! Three first-level models are trained (`M1_1` on `P1`, `M1_2` on `P2`, `M1`
//! on both) and every sequence is predicted by a model that never saw it, which
//! yields a second-level training set as large as the original.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::Denoiser;
use crate::geometry::DepthImage;
use crate::sequence_io::{save_paired_dataset, Frame, PairedDataset, PairedRecord};

/// Default number of held-out test sequences.
pub const DEFAULT_TEST_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    /// Trained on `P1`.
    #[serde(rename = "M1_1")]
    FoldOne,
    /// Trained on `P2`.
    #[serde(rename = "M1_2")]
    FoldTwo,
    /// Trained on `P1 ∪ P2`.
    #[serde(rename = "M1")]
    Full,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::FoldOne, ModelId::FoldTwo, ModelId::Full];
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::FoldOne => "M1_1",
            ModelId::FoldTwo => "M1_2",
            ModelId::Full => "M1",
        })
    }
}

/// How many sequences to hold out for testing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestSplit {
    /// `round(n * f)` sequences.
    Fraction(f64),
    Count(usize),
}

impl Default for TestSplit {
    fn default() -> Self {
        TestSplit::Count(DEFAULT_TEST_COUNT)
    }
}

/// Partition of sequence ids; serialized as `folds.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    #[serde(rename = "P1")]
    pub p1: Vec<String>,
    #[serde(rename = "P2")]
    pub p2: Vec<String>,
    #[serde(rename = "P_test")]
    pub p_test: Vec<String>,
    pub seed: u64,
}

impl FoldPlan {
    /// Ids the given model is trained on.
    pub fn training_set(&self, model: ModelId) -> Vec<&str> {
        let ids: Box<dyn Iterator<Item = &String>> = match model {
            ModelId::FoldOne => Box::new(self.p1.iter()),
            ModelId::FoldTwo => Box::new(self.p2.iter()),
            ModelId::Full => Box::new(self.p1.iter().chain(&self.p2)),
        };
        ids.map(String::as_str).collect()
    }

    /// The model that predicts sequence `id`.
    pub fn route(&self, id: &str) -> Option<ModelId> {
        if self.p2.iter().any(|s| s == id) {
            Some(ModelId::FoldOne)
        } else if self.p1.iter().any(|s| s == id) {
            Some(ModelId::FoldTwo)
        } else if self.p_test.iter().any(|s| s == id) {
            Some(ModelId::Full)
        } else {
            None
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.p1.iter().chain(&self.p2).chain(&self.p_test).map(String::as_str)
    }

    /// Checks disjointness, non-empty training folds and that no sequence is
    /// routed to a model trained on it.
    pub fn validate(&self) -> Result<()> {
        if self.p1.is_empty() || self.p2.is_empty() {
            return Err(Error::invalid("both training folds must be non-empty"));
        }
        let mut seen = BTreeSet::new();
        for id in self.ids() {
            if !seen.insert(id) {
                return Err(Error::invalid(format!(
                    "sequence `{id}` appears in more than one group"
                )));
            }
        }
        for id in self.ids() {
            let model = self.route(id).expect("every listed id is routed");
            if self.training_set(model).contains(&id) {
                return Err(Error::invalid(format!(
                    "sequence `{id}` is predicted by {model}, which is trained on it"
                )));
            }
        }
        Ok(())
    }
}

/// Shuffles the ids (sorted first, so input order does not matter) with a
/// seeded generator, carves off the test group, then splits the rest into
/// `P1` and `P2`, with `P1` taking the extra sequence on odd counts.
pub fn make_fold_plan(ids: &[String], test: TestSplit, seed: u64) -> Result<FoldPlan> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::invalid(format!("fold plan needs at least 3 sequences, got {n}")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("sequence ids must be unique"));
    }
    let n_test = match test {
        TestSplit::Fraction(f) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid(format!("test fraction must be in [0, 1), got {f}")));
            }
            (n as f64 * f).round() as usize
        }
        TestSplit::Count(c) => c,
    }
    .min(n - 2);
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let p_test = sorted.split_off(n - n_test);
    let p2 = sorted.split_off(sorted.len().div_ceil(2));
    let plan = FoldPlan {
        p1: sorted,
        p2,
        p_test,
        seed,
    };
    plan.validate()?;
    Ok(plan)
}

/// A sequence's paired data, keyed by sequence id.
#[derive(Debug, Clone)]
pub struct NamedDataset {
    pub id: String,
    pub dataset: PairedDataset,
}

/// Predictions for one sequence, in record order.
#[derive(Debug, Clone)]
pub struct SequencePrediction {
    pub id: String,
    pub model: ModelId,
    pub depths: Vec<DepthImage>,
}

/// Trains the three models and predicts every sequence with the model routed
/// to it. Output order follows `sequences`. The trainer should be
/// deterministic in its input for the result to be reproducible.
pub fn run_out_of_fold<F>(plan: &FoldPlan, sequences: &[NamedDataset], trainer: F) -> Result<Vec<SequencePrediction>>
where
    F: Fn(ModelId, &[&PairedDataset]) -> Result<Box<dyn Denoiser>> + Sync,
{
    plan.validate()?;
    let given: BTreeSet<&str> = sequences.iter().map(|s| s.id.as_str()).collect();
    let planned: BTreeSet<&str> = plan.ids().collect();
    if given.len() != sequences.len() || given != planned {
        return Err(Error::invalid(
            "sequences must match the fold plan's ids exactly, once each",
        ));
    }
    let by_id = |id: &str| &sequences.iter().find(|s| s.id == id).expect("checked above").dataset;

    let models = ModelId::ALL
        .par_iter()
        .map(|&model| {
            let train: Vec<&PairedDataset> = plan.training_set(model).into_iter().map(by_id).collect();
            trainer(model, &train).map_err(|e| Error::Training {
                model: model.to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    sequences
        .par_iter()
        .map(|s| {
            let model = plan.route(&s.id).expect("checked above");
            let den = &models[ModelId::ALL.iter().position(|m| *m == model).expect("listed")];
            let frames: Vec<Frame> = s.dataset.records().iter().map(|r| r.lq.clone()).collect();
            let depths = den.denoise_sequence(&frames)?;
            if depths.len() != frames.len() {
                return Err(Error::invalid(format!(
                    "model {model} returned {} predictions for {} frames",
                    depths.len(),
                    frames.len()
                )));
            }
            Ok(SequencePrediction {
                id: s.id.clone(),
                model,
                depths,
            })
        })
        .collect()
}

/// The paired dataset with each LQ depth replaced by its out-of-fold
/// prediction: the input of a second-level model.
pub fn second_level_dataset(source: &PairedDataset, prediction: &SequencePrediction) -> Result<PairedDataset> {
    if prediction.depths.len() != source.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} records of `{}`",
            prediction.depths.len(),
            source.len(),
            prediction.id
        )));
    }
    let mut out = PairedDataset::new(source.intrinsics, source.shift_ms, source.transform, source.max_gap_ms)?;
    for (r, d) in source.records().iter().zip(&prediction.depths) {
        let mut lq = r.lq.clone();
        lq.depth = d.clone();
        out.push(PairedRecord { lq, ..r.clone() })?;
    }
    Ok(out)
}

/// Writes `folds.json` and one second-level paired dataset per sequence under
/// `dir/<id>/`.
pub fn save_second_level(
    plan: &FoldPlan,
    sequences: &[NamedDataset],
    predictions: &[SequencePrediction],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    let datasets = sequences
        .iter()
        .map(|s| {
            let p = predictions
                .iter()
                .find(|p| p.id == s.id)
                .ok_or_else(|| Error::invalid(format!("no prediction for `{}`", s.id)))?;
            second_level_dataset(&s.dataset, p)
        })
        .collect::<Result<Vec<_>>>()?;
    save_fold_plan(plan, dir.join("folds.json"))?;
    for (s, d) in sequences.iter().zip(&datasets) {
        save_paired_dataset(d, dir.join(&s.id))?;
    }
    Ok(())
}

pub fn save_fold_plan(plan: &FoldPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::write(parent, e))?;
    }
    let json = serde_json::to_string_pretty(plan).expect("plan serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::write(path, e))
}
