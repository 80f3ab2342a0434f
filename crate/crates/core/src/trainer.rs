//! Minibatch momentum SGD over the collaborative objective.
//!
//! Each epoch visits the training set in an order shuffled by
//! `RngState::new(seed).fork(SHUFFLE_STREAM + epoch)`, so the order depends on
//! the seed and epoch only. With `threads == 1` every floating-point operation
//! happens in a fixed sequence and runs are bit-identical. With more threads a
//! minibatch is cut into `threads` contiguous chunks whose gradients are summed
//! in chunk order: still deterministic for a given thread count, but not
//! bit-identical to the single-threaded result.

use std::time::Instant;

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backprop::{self, GradientSet};
use crate::data::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::inference;
use crate::loss::{self, LossConfig};
use crate::network::Model;
use crate::rng::RngState;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant { rate: f64 },
    /// `rate · drop_factor^⌊(epoch − 1) / drop_every⌋` for 1-based `epoch`.
    Step { rate: f64, drop_factor: f64, drop_every: usize },
}

impl Schedule {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::Step { rate, drop_factor, drop_every } => {
                rate * drop_factor.powi((epoch.saturating_sub(1) / drop_every.max(1)) as i32)
            }
        }
    }
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r >= 0.0 && r.is_finite();
        match self.schedule {
            Schedule::Constant { rate } if !rate_ok(rate) => {
                return Err(Error::Config(format!("learning rate must be finite and >= 0, got {rate}")))
            }
            Schedule::Step { rate, drop_factor, drop_every }
                if !rate_ok(rate) || !(drop_factor > 0.0 && drop_factor <= 1.0) || drop_every == 0 =>
            {
                return Err(Error::Config(
                    "step schedule needs rate >= 0, 0 < drop_factor <= 1 and drop_every >= 1".into(),
                ));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch objective, decay included.
    pub total_loss: f64,
    /// Mean `ℓ_m` per head.
    pub head_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub val_combined_accuracy: f64,
    pub mean_modulation: Vec<f64>,
    pub seconds: f64,
}

/// Optimizer state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Congruent with [`Model::tensors`].
    pub velocity: Vec<Tensor>,
}

impl TrainState {
    pub fn fresh(model: &Model) -> TrainState {
        TrainState {
            epoch: 0,
            velocity: model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v ← μv − rate·g`, `w ← w + v`.
pub fn sgd_step(weights: &mut [&mut Tensor], grads: &[&Tensor], velocity: &mut [Tensor], rate: f64, momentum: f64) {
    for ((w, g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        assert_eq!(w.shape(), g.shape(), "weight/gradient shape");
        for ((wv, gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv - rate * gv;
            *wv += *vv;
        }
    }
}

#[derive(Debug, Clone)]
struct Accum {
    samples: usize,
    data_sum: f64,
    head_loss: Vec<f64>,
    modulation: Vec<f64>,
    correct: Vec<usize>,
}

impl Accum {
    fn new(heads: usize) -> Accum {
        Accum {
            samples: 0,
            data_sum: 0.0,
            head_loss: vec![0.0; heads],
            modulation: vec![0.0; heads],
            correct: vec![0; heads],
        }
    }

    fn merge(&mut self, o: &Accum) {
        self.samples += o.samples;
        self.data_sum += o.data_sum;
        for m in 0..self.head_loss.len() {
            self.head_loss[m] += o.head_loss[m];
            self.modulation[m] += o.modulation[m];
            self.correct[m] += o.correct[m];
        }
    }
}

/// Forward, statistics and `scale`-weighted data gradient for one chunk.
fn chunk_gradient(model: &Model, x: Tensor, y: &[Label], cfg: &LossConfig, scale: f64) -> Result<(GradientSet, Accum)> {
    let cache = model.forward(x)?;
    let mut acc = Accum::new(model.head_count());
    let mut t_bar = Vec::with_capacity(y.len());
    for (b, &label) in y.iter().enumerate() {
        let s = cache.scores(b);
        let bd = loss::breakdown(&s, label, cfg, 0.0);
        acc.samples += 1;
        acc.data_sum += bd.data_term;
        for (m, h) in bd.heads.iter().enumerate() {
            acc.head_loss[m] += h.loss;
            acc.modulation[m] += h.modulation;
            let row = s.row(m);
            let best = (0..row.len()).fold(0, |a, k| if row[k] > row[a] { k } else { a });
            if best == label.index() {
                acc.correct[m] += 1;
            }
        }
        t_bar.push(bd.heads.iter().map(|h| h.modulation).collect::<Vec<_>>());
    }
    let mut grads = GradientSet::zeros_for(model);
    backprop::accumulate_data_gradient(model, &cache, y, cfg, &t_bar, scale, &|_| true, &mut grads)?;
    Ok((grads, acc))
}

fn slice_batch(x: &Tensor, lo: usize, hi: usize) -> Tensor {
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, x.data()[lo * per..hi * per].to_vec()).expect("chunk shape")
}

fn minibatch_gradient(
    model: &Model,
    x: Tensor,
    y: &[Label],
    cfg: &LossConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(GradientSet, Accum)> {
    let scale = 1.0 / y.len() as f64;
    let Some(pool) = pool else {
        return chunk_gradient(model, x, y, cfg, scale);
    };
    let parts = pool.current_num_threads().min(y.len());
    let size = y.len().div_ceil(parts);
    let bounds: Vec<(usize, usize)> = (0..y.len()).step_by(size).map(|lo| (lo, (lo + size).min(y.len()))).collect();
    let results: Vec<Result<(GradientSet, Accum)>> = pool.install(|| {
        bounds
            .par_iter()
            .map(|&(lo, hi)| chunk_gradient(model, slice_batch(&x, lo, hi), &y[lo..hi], cfg, scale))
            .collect()
    });
    let mut iter = results.into_iter();
    let (mut grads, mut acc) = iter.next().expect("at least one chunk")?;
    for r in iter {
        let (g, a) = r?;
        grads.add_assign(&g);
        acc.merge(&a);
    }
    Ok((grads, acc))
}

/// Per-head and combined accuracy on `data`.
pub fn evaluate(model: &Model, data: &LabeledDataset, cfg: &LossConfig) -> Result<(Vec<f64>, f64)> {
    let r = inference::specialization_report(model, data, cfg)?;
    Ok((r.head_accuracy, r.combined_accuracy))
}

fn check_dataset(model: &Model, data: &LabeledDataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Consistency(format!("{what} set is empty")));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "{what} samples {:?} do not match model input {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    if data.classes() > model.classes() {
        return Err(Error::Consistency(format!(
            "{what} set has {} classes, model {}",
            data.classes(),
            model.classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place, starting after `state.epoch` completed epochs.
/// `on_epoch` runs after every epoch with the updated model and state.
pub fn train(
    model: &mut Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    loss_cfg.validate(model.head_count())?;
    check_dataset(model, train, "training")?;
    check_dataset(model, val, "validation")?;
    if state.velocity.len() != model.tensors().len() {
        return Err(Error::Consistency("optimizer state does not match model".into()));
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let heads = model.head_count();
    let root = RngState::new(cfg.seed);
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let last_good = (epoch > 1).then_some(epoch - 1);
        let start = Instant::now();
        let rate = cfg.schedule.rate_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);

        let mut acc = Accum::new(heads);
        let mut total_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(idx);
            let (mut grads, a) = minibatch_gradient(model, x, &y, loss_cfg, pool.as_ref())?;
            let wsq = loss::squared_weight_norm(model.tensors());
            let batch_obj = a.data_sum / a.samples as f64 + loss_cfg.alpha * wsq;
            backprop::add_decay(model, loss_cfg.alpha, &mut grads);
            if !batch_obj.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good,
                    msg: format!("objective {batch_obj} on a minibatch"),
                });
            }
            total_sum += batch_obj * a.samples as f64;
            acc.merge(&a);
            let g = grads.tensors();
            sgd_step(&mut model.tensors_mut(), &g, &mut state.velocity, rate, cfg.momentum);
        }
        if model.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                last_good,
                msg: "non-finite weights after update".into(),
            });
        }
        let (val_accuracy, val_combined_accuracy) = evaluate(model, val, loss_cfg)?;
        let n = acc.samples as f64;
        let metrics = EpochMetrics {
            epoch,
            total_loss: total_sum / n,
            head_loss: acc.head_loss.iter().map(|v| v / n).collect(),
            train_accuracy: acc.correct.iter().map(|&c| c as f64 / n).collect(),
            val_accuracy,
            val_combined_accuracy,
            mean_modulation: acc.modulation.iter().map(|v| v / n).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        state.epoch = epoch;
        on_epoch(&metrics, model, state)?;
        history.push(metrics);
    }
    Ok(history)
}
