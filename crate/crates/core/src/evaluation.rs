//! Odd-one-out accuracy, paired bootstrap comparisons, and the class-level
//! upper-bound estimate.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{ClassMap, ContextTriplet};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::model::{baseline_predict, Baseline, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub triplet_id: usize,
    pub predicted: usize,
    pub correct: bool,
}

/// Predictions aligned with an evaluation triplet list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionVector(pub Vec<Prediction>);

impl PredictionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prediction> {
        self.0.iter()
    }

    fn aligned_with(&self, other: &PredictionVector) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.triplet_id == b.triplet_id)
    }
}

impl FromIterator<Prediction> for PredictionVector {
    fn from_iter<T: IntoIterator<Item = Prediction>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// What produces a prediction for a triplet.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a ModelParams),
    Baseline(Baseline<'a>),
}

/// Predict every triplet; `triplet_id` is the position in `triplets`.
pub fn predict_all(
    predictor: Predictor<'_>,
    triplets: &[ContextTriplet],
    store: &EmbeddingStore,
) -> Result<PredictionVector> {
    triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let predicted = match predictor {
                Predictor::Model(p) => p.predict(store, t)?,
                Predictor::Baseline(b) => baseline_predict(store, t, b)?,
            };
            Ok(Prediction {
                triplet_id: i,
                predicted,
                correct: predicted == t.oddball_index,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(PredictionVector)
}

pub fn accuracy(preds: &PredictionVector) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::validation("accuracy of an empty prediction vector"));
    }
    let correct = preds.iter().filter(|p| p.correct).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    pub delta_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
    pub seed: u64,
}

impl fmt::Display for BootstrapResult {
    /// `Δ = 0.054 [0.052, 0.057]`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Δ = {:.3} [{:.3}, {:.3}]",
            self.delta_mean, self.ci_low, self.ci_high
        )
    }
}

pub const DEFAULT_N_BOOT: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of `acc(b) − acc(a)` over resampled trial indices.
///
/// Resample `i` draws from its own ChaCha stream `(seed, i)`, so the result
/// does not depend on how resamples are scheduled.
pub fn paired_bootstrap(
    preds_a: &PredictionVector,
    preds_b: &PredictionVector,
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if preds_a.is_empty() {
        return Err(Error::validation("empty prediction vectors"));
    }
    if !preds_a.aligned_with(preds_b) {
        return Err(Error::validation(
            "prediction vectors are not aligned on the same triplets",
        ));
    }
    if n_boot == 0 {
        return Err(Error::validation("n_boot must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must lie in (0, 1)"));
    }
    // per-trial difference in correctness: -1, 0, or +1
    let diff: Vec<i32> = preds_a
        .iter()
        .zip(preds_b.iter())
        .map(|(a, b)| i32::from(b.correct) - i32::from(a.correct))
        .collect();
    let n = diff.len();
    let mut deltas: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sum: i64 = (0..n).map(|_| diff[rng.random_range(0..n)] as i64).sum();
            sum as f64 / n as f64
        })
        .collect();
    // summed in resample order for a schedule-independent mean
    let delta_mean = deltas.iter().sum::<f64>() / n_boot as f64;
    deltas.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        delta_mean,
        ci_low: quantile_sorted(&deltas, alpha / 2.0),
        ci_high: quantile_sorted(&deltas, 1.0 - alpha / 2.0),
        n_boot,
        seed,
    })
}

/// Class-level identity of a triplet trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassTrialKey {
    pub context_class: i64,
    /// Triplet classes in ascending order; response positions index this.
    pub triplet_classes: [i64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTrialGroup {
    pub key: ClassTrialKey,
    pub counts: [usize; 3],
}

impl ClassTrialGroup {
    pub fn n_responses(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Empirical oddball distribution over the sorted class positions.
    pub fn distribution(&self) -> [f64; 3] {
        let n = self.n_responses() as f64;
        self.counts.map(|c| c as f64 / n)
    }

    pub fn max_probability(&self) -> f64 {
        self.distribution().into_iter().fold(0.0, f64::max)
    }
}

/// Group triplets by class-level key and count oddball responses per position.
pub fn group_by_class(
    triplets: &[ContextTriplet],
    classes: &ClassMap,
) -> Result<Vec<ClassTrialGroup>> {
    let mut groups: BTreeMap<ClassTrialKey, [usize; 3]> = BTreeMap::new();
    for t in triplets {
        let [a, b, c] = t.image_ids.map(|id| classes.class_of(id));
        let labels = [a?, b?, c?];
        let mut sorted = labels;
        sorted.sort_unstable();
        let odd_class = labels[t.oddball_index];
        let pos = sorted.iter().position(|&c| c == odd_class).unwrap();
        let key = ClassTrialKey {
            context_class: classes.class_of(t.context_id)?,
            triplet_classes: sorted,
        };
        groups.entry(key).or_default()[pos] += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(key, counts)| ClassTrialGroup { key, counts })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBoundEstimate {
    /// Unweighted mean of `max_i p_i` over retained groups.
    pub group_mean: f64,
    /// Mean of `max_i p_i` weighted by each group's response count.
    pub response_weighted_mean: f64,
    pub groups_total: usize,
    pub groups_retained: usize,
    pub responses_retained: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpperBound {
    Estimate(UpperBoundEstimate),
    /// No class-level group has two or more responses.
    InsufficientData { groups_total: usize },
}

impl UpperBound {
    pub fn value(&self) -> Option<f64> {
        match self {
            UpperBound::Estimate(e) => Some(e.group_mean),
            UpperBound::InsufficientData { .. } => None,
        }
    }
}

/// Mean best-achievable accuracy over class-level groups with ≥2 responses.
pub fn upper_bound(triplets: &[ContextTriplet], classes: &ClassMap) -> Result<UpperBound> {
    let groups = group_by_class(triplets, classes)?;
    let groups_total = groups.len();
    let retained: Vec<_> = groups.iter().filter(|g| g.n_responses() >= 2).collect();
    if retained.is_empty() {
        return Ok(UpperBound::InsufficientData { groups_total });
    }
    let responses: usize = retained.iter().map(|g| g.n_responses()).sum();
    let group_mean =
        retained.iter().map(|g| g.max_probability()).sum::<f64>() / retained.len() as f64;
    let weighted = retained
        .iter()
        .map(|g| g.max_probability() * g.n_responses() as f64)
        .sum::<f64>()
        / responses as f64;
    Ok(UpperBound::Estimate(UpperBoundEstimate {
        group_mean,
        response_weighted_mean: weighted,
        groups_total,
        groups_retained: retained.len(),
        responses_retained: responses,
    }))
}
