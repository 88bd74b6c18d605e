use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::episode::{sample_episode, ClassIndex, EpisodeError};
use super::eval::{evaluate_on_index, EvalError};
use super::protocol::ProtocolSplit;
use crate::autodiff::{Gradients, ParamStore, Tensor};
use crate::model::{sequence_tensor, EpisodeBatch, Model, ModelError};
use crate::skeleton::SkeletonSequence;

const VALIDATION_EPISODES: usize = 50;
const VALIDATION_SEED_SALT: u64 = 0x5641_4c49_4441_5445;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ways: usize,
    /// Defaults to `ways`, one query per class.
    pub queries_per_episode: Option<usize>,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint after every `n` epochs.
    pub checkpoint_every: Option<usize>,
    /// Wall-clock times make logs differ between runs, so they are opt-in.
    pub record_wall_time: bool,
    pub workers: usize,
    /// Fraction of each training class held out for episodic validation.
    pub validation_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            queries_per_episode: None,
            episodes_per_epoch: 200,
            epochs: 300,
            learning_rate: 0.1,
            decay_epochs: vec![100, 200],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: None,
            record_wall_time: false,
            workers: 1,
            validation_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn queries(&self) -> usize {
        self.queries_per_episode.unwrap_or(self.ways)
    }

    /// Field-level validation; every problem found is reported.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if self.ways == 0 {
            problems.push("ways must be at least 1".to_string());
        }
        if self.queries_per_episode == Some(0) {
            problems.push("queries_per_episode must be at least 1".into());
        }
        if self.episodes_per_epoch == 0 {
            problems.push("episodes_per_epoch must be at least 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            problems.push("learning_rate must be finite and non-negative".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            problems.push("decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            problems.push("decay_epochs must be below epochs".into());
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            problems.push("decay_factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push("momentum must be in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push("weight_decay must be non-negative".into());
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be at least 1".into());
        }
        if self.workers == 0 {
            problems.push("workers must be at least 1".into());
        }
        if self
            .validation_fraction
            .is_some_and(|f| !(f > 0.0 && f < 1.0))
        {
            problems.push("validation_fraction must be in (0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems))
        }
    }
}

/// Step schedule: the base rate divided (or multiplied) once per decay
/// epoch already reached.
///
/// A factor whose reciprocal is an integer is applied by division, so the
/// default trace is exactly `0.1, 0.01, 0.001` rather than accumulating
/// rounding error.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let n = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    let inv = 1.0 / cfg.decay_factor;
    if (inv - inv.round()).abs() < 1e-9 {
        cfg.learning_rate / inv.round().powi(n)
    } else {
        cfg.learning_rate * cfg.decay_factor.powi(n)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μv + g + λw`, `w ← w − ηv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let g = grads.get(id).data();
            let w = store.get_mut(id).data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.data_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("no training samples for the split's training classes")]
    NoTrainData,
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite {what} at epoch {epoch}, episode {episode} (parameter norm {param_norm})")]
    NonFinite {
        what: String,
        epoch: usize,
        episode: usize,
        param_norm: f64,
    },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("observer: {0}")]
    Observer(String),
}

/// Hooks for logging and checkpointing during [`train`].
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<(), String> {
        Ok(())
    }

    /// Called after `epoch` (0-based) when the checkpoint cadence is due.
    fn on_checkpoint(&mut self, _epoch: usize, _model: &Model) -> Result<(), String> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub episodes: usize,
}

/// Splits each training class's positions into (train, validation).
fn hold_out(index: &ClassIndex, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SEED_SALT);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..index.len() {
        let mut m = index.members(c).to_vec();
        m.shuffle(&mut rng);
        let n_val = (m.len() as f64 * fraction).round() as usize;
        // keep at least two samples on each side, or skip the class
        let n_val = if n_val >= 2 && m.len() - n_val >= 2 { n_val } else { 0 };
        val.extend_from_slice(&m[..n_val]);
        train.extend_from_slice(&m[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn restricted_index(dataset: &[SkeletonSequence], keep: &[usize], classes: &[String]) -> ClassIndex {
    let labels = dataset.iter().enumerate().map(|(i, s)| {
        if keep.binary_search(&i).is_ok() {
            s.label.as_deref().unwrap_or("")
        } else {
            ""
        }
    });
    ClassIndex::new(labels, Some(classes))
}

/// Episodic meta-training on the split's training classes.
///
/// Every random draw comes from one generator seeded with `cfg.seed`, and
/// gradients are reduced in a fixed order, so runs are bitwise
/// reproducible for any worker count.
pub fn train(
    model: &mut Model,
    dataset: &[SkeletonSequence],
    split: &ProtocolSplit,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    train_inner(model, dataset, split, cfg, observer, &pool)
}

fn train_inner(
    model: &mut Model,
    dataset: &[SkeletonSequence],
    split: &ProtocolSplit,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
    pool: &rayon::ThreadPool,
) -> Result<TrainOutcome, TrainError> {
    let full = ClassIndex::new(
        dataset.iter().map(|s| s.label.as_deref().unwrap_or("")),
        Some(&split.train_classes),
    );
    if full.is_empty() {
        return Err(TrainError::NoTrainData);
    }
    let (index, val_index) = match cfg.validation_fraction {
        Some(f) => {
            let (tr, va) = hold_out(&full, f, cfg.seed);
            let vi = restricted_index(dataset, &va, &split.train_classes);
            (restricted_index(dataset, &tr, &split.train_classes), Some(vi))
        }
        None => (full, None),
    };
    let tensors: Vec<Option<Tensor>> = {
        let mut used = vec![false; dataset.len()];
        for c in 0..index.len() {
            for &i in index.members(c) {
                used[i] = true;
            }
        }
        dataset
            .iter()
            .zip(used)
            .map(|(s, u)| u.then(|| sequence_tensor(s)))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.epochs);
    let queries = cfg.queries();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = learning_rate_at(cfg, epoch);
        let mut loss_sum = 0.0;
        for episode in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(&index, cfg.ways, queries, &mut rng)?;
            let tensor = |i: usize| tensors[i].as_ref().expect("indexed sample has a tensor");
            let supports: Vec<&Tensor> = ep.support.iter().map(|&i| tensor(i)).collect();
            let qs: Vec<(&Tensor, usize)> = ep.queries.iter().map(|&(i, c)| (tensor(i), c)).collect();
            let non_finite = |what: &str, model: &Model| TrainError::NonFinite {
                what: what.to_string(),
                epoch,
                episode,
                param_norm: model.params().global_norm(),
            };
            let batch = EpisodeBatch {
                supports: &supports,
                queries: &qs,
            };
            let (loss, grads) = match pool.install(|| model.loss_and_grads(batch)) {
                Ok(v) => v,
                Err(ModelError::NonFinite(what)) => return Err(non_finite(what, model)),
                Err(e) => return Err(e.into()),
            };
            sgd.step(model.params_mut(), &grads, lr);
            if !model.params().iter().all(|(_, _, t)| t.is_finite()) {
                return Err(non_finite("parameter", model));
            }
            loss_sum += loss;
        }
        let val_accuracy = match &val_index {
            Some(vi) if !vi.is_empty() => {
                let ways = cfg.ways.min(vi.len());
                let seed = cfg.seed.wrapping_add(epoch as u64);
                Some(pool.install(|| evaluate_on_index(&*model, dataset, vi, ways, ways, VALIDATION_EPISODES, seed))?.accuracy)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / cfg.episodes_per_epoch as f64,
            lr,
            wall_ms: cfg
                .record_wall_time
                .then(|| started.elapsed().as_millis() as u64),
            val_accuracy,
        };
        log::debug!("epoch {epoch}: loss {:.6} lr {lr}", record.mean_loss);
        observer.on_epoch(&record).map_err(TrainError::Observer)?;
        if cfg.checkpoint_every.is_some_and(|n| (epoch + 1) % n == 0) {
            observer
                .on_checkpoint(epoch, model)
                .map_err(TrainError::Observer)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        episodes: cfg.epochs * cfg.episodes_per_epoch,
    })
}
