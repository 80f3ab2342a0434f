//! Analytic gradients with the modulation held fixed, and a central-difference
//! checker.
//!
//! For a minibatch of size `B` the differentiated objective is
//!
//! ```text
//! F(W) = (1/B) Σ_b Σ_m λ_m T̄_bm C_m(x_b, y_b; W) + α Σ‖W‖²
//! ```
//!
//! where `T̄_bm` is the modulation evaluated at the current scores and then
//! treated as a constant. Since every head ends in a softmax, the gradient
//! w.r.t. head `m`'s logits is `(λ_m T̄_bm / B)(p − e_y)`, which is zero when
//! `p_y` sits outside the clamp interval. Head `m` sends gradient into the
//! body only at its attach point, so body layers above `r_m` never see it.

use crate::data::Label;
use crate::error::{Error, Result};
use crate::loss::{self, clamp_prob, LossConfig};
use crate::network::{Model, Param, TapeCache};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Gradients congruent with [`Model::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    body: Vec<Param>,
    heads: Vec<Vec<Param>>,
}

impl GradientSet {
    pub fn zeros_for(model: &Model) -> GradientSet {
        GradientSet {
            body: model.body().params().iter().map(Param::zeros_like).collect(),
            heads: model
                .heads()
                .iter()
                .map(|h| h.params().iter().map(Param::zeros_like).collect())
                .collect(),
        }
    }

    pub fn body(&self) -> &[Param] {
        &self.body
    }

    pub fn head(&self, m: usize) -> &[Param] {
        &self.heads[m]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.body
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.body
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }
}

/// `T̄[b][m]` for every sample of a cached batch.
pub fn modulation_matrix(cache: &TapeCache, labels: &[Label], cfg: &LossConfig) -> Vec<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let s = cache.scores(b);
            (0..s.heads())
                .map(|m| loss::modulation(m, &s, y, cfg.mode, cfg.epsilon))
                .collect()
        })
        .collect()
}

fn check_cache(model: &Model, cache: &TapeCache, labels: &[Label], t_bar: &[Vec<f64>]) -> Result<()> {
    if cache.version != model.version() {
        return Err(Error::Consistency(format!(
            "cache from model version {} used with version {}",
            cache.version,
            model.version()
        )));
    }
    if cache.heads.len() != model.head_count() {
        return Err(Error::Consistency("cache head count differs from model".into()));
    }
    let batch = cache.batch();
    if labels.len() != batch || t_bar.len() != batch {
        return Err(Error::Consistency(format!(
            "batch of {batch} with {} labels and {} modulation rows",
            labels.len(),
            t_bar.len()
        )));
    }
    if t_bar.iter().any(|row| row.len() != model.head_count()) {
        return Err(Error::Consistency("modulation rows must have one entry per head".into()));
    }
    if let Some(y) = labels.iter().find(|y| y.get() > model.classes()) {
        return Err(Error::Consistency(format!("label {y} exceeds {} classes", model.classes())));
    }
    Ok(())
}

/// Adds `scale · Σ_b Σ_{m ∈ heads} λ_m T̄_bm ∇C_m` into `out`.
pub fn accumulate_data_gradient(
    model: &Model,
    cache: &TapeCache,
    labels: &[Label],
    cfg: &LossConfig,
    t_bar: &[Vec<f64>],
    scale: f64,
    heads: &dyn Fn(usize) -> bool,
    out: &mut GradientSet,
) -> Result<()> {
    check_cache(model, cache, labels, t_bar)?;
    let k = model.classes();
    let eps = cfg.epsilon;
    let mut head_dx: Vec<Option<Tensor>> = vec![None; model.head_count()];
    for (m, head) in model.heads().iter().enumerate() {
        if !heads(m) || cfg.lambda[m] == 0.0 {
            continue;
        }
        let acts = &cache.heads[m];
        let probs = acts.last().expect("head output").data();
        let mut dlogits = Tensor::zeros(&[labels.len(), k]);
        let mut any = false;
        for (b, (row, &y)) in dlogits.data_mut().chunks_exact_mut(k).zip(labels).enumerate() {
            let p = &probs[b * k..(b + 1) * k];
            let py = p[y.index()];
            let coef = scale * cfg.lambda[m] * t_bar[b][m];
            if coef == 0.0 || clamp_prob(py, eps) != py {
                continue;
            }
            any = true;
            for (d, &pv) in row.iter_mut().zip(p) {
                *d = coef * pv;
            }
            row[y.index()] = coef * (py - 1.0);
        }
        if !any {
            continue;
        }
        let top = acts.len() - 1;
        head_dx[m] = head
            .stack()
            .backward_range(acts, 0, top - 1, dlogits, &mut out.heads[m], true);
    }

    let body = model.body();
    let mut grad: Option<Tensor> = None;
    let mut cur = body.stack().len();
    for m in (0..model.head_count()).rev() {
        let Some(dx) = head_dx[m].take() else { continue };
        let at = body.block_output(model.heads()[m].attach);
        let g = match grad.take() {
            Some(g) => {
                let mut g = body
                    .stack()
                    .backward_range(&cache.body, at, cur, g, &mut out.body, true)
                    .expect("input gradient requested");
                g.add_scaled(&dx, 1.0);
                g
            }
            None => dx,
        };
        grad = Some(g);
        cur = at;
    }
    if let Some(g) = grad {
        if cur > 0 {
            body.stack().backward_range(&cache.body, 0, cur, g, &mut out.body, false);
        }
    }
    Ok(())
}

/// Adds `2αW` to every gradient tensor.
pub fn add_decay(model: &Model, alpha: f64, out: &mut GradientSet) {
    if alpha == 0.0 {
        return;
    }
    for (g, w) in out.tensors_mut().into_iter().zip(model.tensors()) {
        g.add_scaled(w, 2.0 * alpha);
    }
}

/// Gradient of the minibatch objective with `T̄` taken from the cached scores.
pub fn backward(model: &Model, cache: &TapeCache, labels: &[Label], cfg: &LossConfig) -> Result<GradientSet> {
    cfg.validate(model.head_count())?;
    let t_bar = modulation_matrix(cache, labels, cfg);
    backward_with_modulation(model, cache, labels, cfg, &t_bar)
}

/// Gradient of [`frozen_objective`] for an externally supplied `T̄`.
pub fn backward_with_modulation(
    model: &Model,
    cache: &TapeCache,
    labels: &[Label],
    cfg: &LossConfig,
    t_bar: &[Vec<f64>],
) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_for(model);
    let scale = 1.0 / labels.len().max(1) as f64;
    accumulate_data_gradient(model, cache, labels, cfg, t_bar, scale, &|_| true, &mut out)?;
    add_decay(model, cfg.alpha, &mut out);
    Ok(out)
}

/// Data-term gradient of head `m` alone (no decay).
pub fn head_contribution(
    model: &Model,
    cache: &TapeCache,
    labels: &[Label],
    cfg: &LossConfig,
    t_bar: &[Vec<f64>],
    m: usize,
) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_for(model);
    let scale = 1.0 / labels.len().max(1) as f64;
    accumulate_data_gradient(model, cache, labels, cfg, t_bar, scale, &|h| h == m, &mut out)?;
    Ok(out)
}

fn frozen_data_term(model: &Model, x: &Tensor, labels: &[Label], cfg: &LossConfig, t_bar: &[Vec<f64>]) -> Result<f64> {
    let cache = model.forward(x.clone())?;
    let mut sum = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let s = cache.scores(b);
        for m in 0..s.heads() {
            sum += cfg.lambda[m] * t_bar[b][m] * loss::confidence(m, &s, y, cfg.epsilon);
        }
    }
    Ok(sum / labels.len().max(1) as f64)
}

fn raw_data_term(model: &Model, x: &Tensor, labels: &[Label], cfg: &LossConfig) -> Result<f64> {
    let cache = model.forward(x.clone())?;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| loss::breakdown(&cache.scores(b), y, cfg, 0.0).data_term)
        .sum();
    Ok(sum / labels.len().max(1) as f64)
}

/// `(1/B) Σ_b Σ_m λ_m T̄_bm C_m + α Σ‖W‖²` with `T̄` fixed.
pub fn frozen_objective(model: &Model, x: &Tensor, labels: &[Label], cfg: &LossConfig, t_bar: &[Vec<f64>]) -> Result<f64> {
    if t_bar.len() != labels.len() || t_bar.iter().any(|r| r.len() != model.head_count()) {
        return Err(Error::Consistency("modulation matrix must be B × M".into()));
    }
    let data = frozen_data_term(model, x, labels, cfg, t_bar)?;
    Ok(data + cfg.alpha * loss::squared_weight_norm(model.tensors()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Central difference of the objective with `T` recomputed at each perturbation.
    pub raw_numeric: f64,
    pub raw_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// How far the analytic gradient is from the derivative of the
    /// un-detached objective; large for modulated modes with several heads.
    pub raw_max_rel_err: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares [`backward`] against central differences of [`frozen_objective`]
/// on `trials` coordinates drawn uniformly from all parameters. The model is
/// restored bit-for-bit afterwards.
pub fn finite_diff_check(
    model: &mut Model,
    x: &Tensor,
    labels: &[Label],
    cfg: &LossConfig,
    delta: f64,
    trials: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    if !(delta > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    cfg.validate(model.head_count())?;
    let cache = model.forward(x.clone())?;
    let t_bar = modulation_matrix(&cache, labels, cfg);
    let grads = backward_with_modulation(model, &cache, labels, cfg, &t_bar)?;
    drop(cache);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    let names = model.tensor_names();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();

    let mut coordinates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut flat = rng.below(total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let i = flat;
        let orig = model.tensors()[t].data()[i];
        let coordinate = || format!("{}[{i}]", names[t]);

        let mut eval = |w: f64| -> Result<(f64, f64)> {
            model.tensors_mut()[t].data_mut()[i] = w;
            let f = frozen_data_term(model, x, labels, cfg, &t_bar)?;
            let r = raw_data_term(model, x, labels, cfg)?;
            Ok((f, r))
        };
        let plus = eval(orig + delta);
        let minus = eval(orig - delta);
        model.tensors_mut()[t].data_mut()[i] = orig;
        let ((fp, rp), (fm, rm)) = (plus?, minus?);
        if ![fp, fm, rp, rm].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { coordinate: coordinate() });
        }
        let decay = cfg.alpha * ((orig + delta).powi(2) - (orig - delta).powi(2)) / (2.0 * delta);
        let numeric = (fp - fm) / (2.0 * delta) + decay;
        let raw_numeric = (rp - rm) / (2.0 * delta) + decay;
        let a = analytic[t][i];
        coordinates.push(CoordinateCheck {
            name: names[t].clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
            raw_numeric,
            raw_rel_err: relative_error(a, raw_numeric),
        });
    }
    let max_of = |f: fn(&CoordinateCheck) -> f64| coordinates.iter().map(f).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err: max_of(|c| c.rel_err),
        raw_max_rel_err: max_of(|c| c.raw_rel_err),
        coordinates,
    })
}
