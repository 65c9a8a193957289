//! Minibatch SGD training and hyperparameter grid search.

mod gradient;

pub use gradient::{
    batch_gradients, batch_loss, sgd_step, Exec, GradientSet, LossBreakdown, Objective,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::ContextTriplet;
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::model::{
    default_init_sigma, init_params_with, ModelKind, ModelOptions, ModelParams,
};

/// Optimizer and model settings. Defaults: 50 epochs, lr 0.001, batch 128.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rank: usize,
    pub tau: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub kind: ModelKind,
    pub options: ModelOptions,
    /// Mapper init scale; `None` means `1e-2 / √d`.
    pub init_sigma: Option<f64>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.001,
            batch_size: 128,
            lambda1: 1e-4,
            lambda2: 1e-5,
            rank: 16,
            tau: 1.0,
            seed: 0,
            shuffle: true,
            kind: ModelKind::ContextSensitive,
            options: ModelOptions::default(),
            init_sigma: None,
            exec: Exec::Serial,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::validation("regularization strengths must be nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation("temperature must be positive"));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.lambda1, self.lambda2)
    }

    /// Initial parameters for an embedding dimension `dim`.
    pub fn init(&self, dim: usize) -> Result<ModelParams> {
        match self.kind {
            ModelKind::ContextSensitive => init_params_with(
                dim,
                self.rank,
                self.tau,
                self.seed,
                self.init_sigma.unwrap_or_else(|| default_init_sigma(dim)),
                self.options,
            ),
            ModelKind::ContextInsensitive => ModelParams::context_insensitive(dim, self.tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub reg_w: f64,
    pub reg_a: f64,
    pub val_accuracy: f64,
}

/// Per-epoch statistics. Entry 0 is measured at initialization over the full
/// training set; later entries average the minibatch losses seen during the
/// epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs.get(self.best_epoch)
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// `epoch,loss,nll,reg_w,reg_a,val_acc`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,nll,reg_w,reg_a,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.loss, e.nll, e.reg_w, e.reg_a, e.val_accuracy
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ModelParams,
    /// Parameters after the last epoch.
    pub final_params: ModelParams,
    pub history: TrainHistory,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged in epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        last_finite: Box<ModelParams>,
        history: TrainHistory,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Error::Divergence(e.to_string()),
            TrainError::Other(e) => e,
        }
    }
}

/// Fraction of `triplets` whose oddball `params` predicts.
pub fn model_accuracy(
    params: &ModelParams,
    triplets: &[ContextTriplet],
    store: &EmbeddingStore,
    exec: Exec,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::validation("no triplets to evaluate"));
    }
    let hit = |t: &ContextTriplet| -> Result<usize> {
        Ok(usize::from(params.predict(store, t)? == t.oddball_index))
    };
    let correct: usize = match exec {
        Exec::Serial => triplets.iter().map(hit).sum::<Result<usize>>()?,
        _ => triplets.par_iter().map(hit).sum::<Result<usize>>()?,
    };
    Ok(correct as f64 / triplets.len() as f64)
}

fn check_coverage(store: &EmbeddingStore, triplets: &[ContextTriplet]) -> Result<()> {
    for t in triplets {
        for id in t.image_ids.iter().chain(std::iter::once(&t.context_id)) {
            if !store.contains(*id) {
                return Err(Error::MissingId(*id));
            }
        }
    }
    Ok(())
}

/// Train from scratch with minibatch SGD.
///
/// Every epoch reshuffles the training order with a generator derived from
/// `config.seed`; the final short batch is kept. Serial execution is fully
/// deterministic in the seed.
pub fn train(
    config: &TrainConfig,
    train_set: &[ContextTriplet],
    val_set: &[ContextTriplet],
    store: &EmbeddingStore,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("empty training set").into());
    }
    check_coverage(store, train_set)?;
    check_coverage(store, val_set)?;
    let objective = config.objective();
    let mut params = config.init(store.dim())?;

    let val_acc = |p: &ModelParams| -> Result<f64> {
        if val_set.is_empty() {
            Ok(f64::NAN)
        } else {
            model_accuracy(p, val_set, store, config.exec)
        }
    };

    // epoch 0: full pass at initialization
    let mut init = LossBreakdown::default();
    for chunk in train_set.chunks(config.batch_size.max(1024)) {
        let l = objective.loss(&params, chunk, store)?;
        let w = chunk.len() as f64 / train_set.len() as f64;
        init.nll += l.nll * w;
        init.reg_a += l.reg_a * w;
        init.reg_w = l.reg_w;
    }
    init.total = init.nll + init.reg_w + init.reg_a;
    let mut history = TrainHistory {
        epochs: vec![EpochStats {
            epoch: 0,
            loss: init.total,
            nll: init.nll,
            reg_w: init.reg_w,
            reg_a: init.reg_a,
            val_accuracy: val_acc(&params)?,
        }],
        best_epoch: 0,
    };
    let mut best = params.clone();
    let mut best_acc = history.epochs[0].val_accuracy;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = LossBreakdown::default();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i].clone()));
            let diverged = |reason: String, params: &ModelParams, history: &TrainHistory| {
                TrainError::Diverged {
                    epoch,
                    batch: b,
                    reason,
                    last_finite: Box::new(params.clone()),
                    history: history.clone(),
                }
            };
            let (loss, grads) =
                match objective.loss_and_gradients(&params, &batch, store, config.exec) {
                    Ok(v) => v,
                    Err(Error::DegenerateVector { norm, .. }) => {
                        return Err(diverged(
                            format!("embedding transform collapsed (norm {norm:e})"),
                            &params,
                            &history,
                        ))
                    }
                    Err(e) => return Err(e.into()),
                };
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss is {}", loss.total), &params, &history));
            }
            params = match sgd_step(&params, &grads, config.learning_rate) {
                Ok(p) => p,
                Err(Error::Divergence(reason)) => {
                    return Err(diverged(reason, &params, &history))
                }
                Err(e) => return Err(e.into()),
            };
            let w = batch.len() as f64;
            sums.total += loss.total * w;
            sums.nll += loss.nll * w;
            sums.reg_w += loss.reg_w * w;
            sums.reg_a += loss.reg_a * w;
        }
        let n = train_set.len() as f64;
        let acc = val_acc(&params)?;
        history.epochs.push(EpochStats {
            epoch,
            loss: sums.total / n,
            nll: sums.nll / n,
            reg_w: sums.reg_w / n,
            reg_a: sums.reg_a / n,
            val_accuracy: acc,
        });
        if acc > best_acc || (best_acc.is_nan() && !acc.is_nan()) {
            best_acc = acc;
            best = params.clone();
            history.best_epoch = epoch;
        }
    }
    if val_set.is_empty() {
        best = params.clone();
        history.best_epoch = config.epochs;
    }
    Ok(TrainOutcome {
        params: best,
        final_params: params,
        history,
    })
}

/// Candidate values per hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub ranks: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for Grid {
    /// r ∈ {16, 32}, λ₁ ∈ {1e-4, 1e-3}, λ₂ ∈ {1e-5, 1e-4, 1e-3}, τ ∈ {1, 5, 7.5}.
    fn default() -> Self {
        Self {
            ranks: vec![16, 32],
            lambda1: vec![1e-4, 1e-3],
            lambda2: vec![1e-5, 1e-4, 1e-3],
            tau: vec![1.0, 5.0, 7.5],
        }
    }
}

impl Grid {
    pub fn singleton(config: &TrainConfig) -> Self {
        Self {
            ranks: vec![config.rank],
            lambda1: vec![config.lambda1],
            lambda2: vec![config.lambda2],
            tau: vec![config.tau],
        }
    }

    /// All combinations, rank outermost and temperature innermost.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &rank in &self.ranks {
            for &lambda1 in &self.lambda1 {
                for &lambda2 in &self.lambda2 {
                    for &tau in &self.tau {
                        out.push(TrainConfig {
                            rank,
                            lambda1,
                            lambda2,
                            tau,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ranks.len() * self.lambda1.len() * self.lambda2.len() * self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub config: TrainConfig,
    pub val_accuracy: Option<f64>,
    pub status: RunStatus,
    pub outcome: Option<TrainOutcome>,
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    pub results: Vec<GridResult>,
    /// Index into `results` of the run with the highest validation accuracy.
    pub best: Option<usize>,
}

impl GridSearch {
    pub fn best_result(&self) -> Option<&GridResult> {
        self.best.map(|i| &self.results[i])
    }

    /// `r,lambda1,lambda2,tau,val_acc,status`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,lambda1,lambda2,tau,val_acc,status\n");
        for r in &self.results {
            let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let status = match &r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.config.rank, r.config.lambda1, r.config.lambda2, r.config.tau, acc, status
            );
        }
        out
    }
}

/// Train one model per grid point and pick the highest validation accuracy
/// (first wins on ties). Failed runs are recorded and skipped.
///
/// With `parallel_runs`, grid points train concurrently; each run is still
/// serial internally, so results do not depend on scheduling.
pub fn grid_search(
    base: &TrainConfig,
    grid: &Grid,
    train_set: &[ContextTriplet],
    val_set: &[ContextTriplet],
    store: &EmbeddingStore,
    parallel_runs: bool,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::validation("every grid axis needs at least one value"));
    }
    if val_set.is_empty() {
        return Err(Error::validation("grid search needs a validation set"));
    }
    let run = |config: TrainConfig| -> GridResult {
        match train(&config, train_set, val_set, store) {
            Ok(outcome) => GridResult {
                val_accuracy: outcome.history.best().map(|e| e.val_accuracy),
                config,
                status: RunStatus::Ok,
                outcome: Some(outcome),
            },
            Err(e) => GridResult {
                config,
                val_accuracy: None,
                status: RunStatus::Failed(e.to_string()),
                outcome: None,
            },
        }
    };
    let configs = grid.configs(base);
    let results: Vec<GridResult> = if parallel_runs {
        configs.into_par_iter().map(run).collect()
    } else {
        configs.into_iter().map(run).collect()
    };
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if let Some(acc) = r.val_accuracy {
            if best.map_or(true, |b| acc > results[b].val_accuracy.unwrap()) {
                best = Some(i);
            }
        }
    }
    Ok(GridSearch { results, best })
}
