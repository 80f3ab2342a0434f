//! Label prediction by minimizing the weighted collaborative objective, top-k
//! ranking, the head-assignment posterior and per-head diagnostics.
//!
//! For candidate label `y` the decision value is
//! `D(y) = Σ_m λ_m T_m(y) C_m(y)`, with `T` and `C` evaluated as if `y` were
//! the true label. The weight-decay term does not depend on `y` and is left
//! out. Everything is computed from the `M × K` score matrix alone.

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::data::{Label, LabeledDataset, Tier};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossMode, ScoreMatrix};
use crate::network::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub label: Label,
    /// `D(y)` for `y = 1..=K`.
    pub objective: Vec<f64>,
    /// `P_m(ŷ)` for every head.
    pub head_scores: Vec<f64>,
    /// 0-based head with the largest `P_m(ŷ)`.
    pub winning_head: usize,
    pub posterior: Vec<f64>,
}

/// `D(y)` for every label.
pub fn decision_values(scores: &ScoreMatrix, cfg: &LossConfig) -> Vec<f64> {
    (0..scores.classes())
        .map(|k| {
            let y = Label::from_index(k);
            (0..scores.heads())
                .map(|m| cfg.lambda[m] * loss::per_head_loss(m, scores, y, cfg.mode, cfg.epsilon).loss)
                .sum()
        })
        .collect()
}

/// First index of the maximum (strictly greater wins).
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn infer(scores: &ScoreMatrix, cfg: &LossConfig) -> PredictionRecord {
    let objective = decision_values(scores, cfg);
    let label = Label::from_index(argmax(objective.iter().map(|d| -d)));
    let head_scores: Vec<f64> = (0..scores.heads()).map(|m| scores.prob(m, label)).collect();
    PredictionRecord {
        label,
        winning_head: argmax(head_scores.iter().copied()),
        posterior: assignment_posterior(scores, label, cfg.epsilon),
        objective,
        head_scores,
    }
}

/// The `k` labels with the smallest `D(y)`, ties broken by label.
pub fn top_k(scores: &ScoreMatrix, cfg: &LossConfig, k: usize) -> Result<Vec<Label>> {
    if k == 0 || k > scores.classes() {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            scores.classes()
        )));
    }
    let d = decision_values(scores, cfg);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(Label::from_index).collect())
}

/// Distribution over heads proportional to each head's modulation `T_m(y)`
/// (leave-one-out geometric mean). A single head gets probability 1.
pub fn assignment_posterior(scores: &ScoreMatrix, y: Label, eps: f64) -> Vec<f64> {
    let t: Vec<f64> = (0..scores.heads())
        .map(|m| loss::modulation(m, scores, y, LossMode::Cldl, eps))
        .collect();
    let z: f64 = t.iter().sum();
    t.iter().map(|v| v / z).collect()
}

/// Outcome of an upper-tail binomial test of a head's win rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinRateTest {
    pub wins: usize,
    pub trials: usize,
    pub rate: f64,
    pub baseline: f64,
    /// `P(X ≥ wins)` for `X ~ Binomial(trials, baseline)`.
    pub p_value: f64,
}

pub fn binomial_upper_tail(successes: usize, trials: usize, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let dist = Binomial::new(p, trials as u64).expect("probability in [0, 1]");
    dist.sf(successes as u64 - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecializationReport {
    pub heads: usize,
    pub classes: usize,
    /// 0-based head maximizing `P_m(y_true)`, per sample.
    pub winners: Vec<usize>,
    /// Argmax accuracy of each head alone.
    pub head_accuracy: Vec<f64>,
    /// Accuracy of [`infer`].
    pub combined_accuracy: f64,
    /// `[class][head]` win counts.
    pub class_histogram: Vec<Vec<usize>>,
    /// Win counts per tier, in first-seen order.
    pub tier_histogram: Vec<(Tier, Vec<usize>)>,
    /// Argmax accuracy of each head per tier, same order as `tier_histogram`.
    pub tier_accuracy: Vec<(Tier, Vec<f64>)>,
}

impl SpecializationReport {
    pub fn tier_counts(&self, tier: Tier) -> Option<&[usize]> {
        self.tier_histogram
            .iter()
            .find(|(t, _)| *t == tier)
            .map(|(_, c)| c.as_slice())
    }

    /// Tests whether the heads in `heads` together win `tier` samples more
    /// often than `baseline`.
    pub fn win_rate_test(&self, tier: Tier, heads: &[usize], baseline: f64) -> Option<WinRateTest> {
        let counts = self.tier_counts(tier)?;
        let trials: usize = counts.iter().sum();
        let wins: usize = heads.iter().map(|&m| counts[m]).sum();
        Some(WinRateTest {
            wins,
            trials,
            rate: wins as f64 / trials.max(1) as f64,
            baseline,
            p_value: binomial_upper_tail(wins, trials, baseline),
        })
    }
}

pub fn report_from_scores(
    scores: &[ScoreMatrix],
    labels: &[Label],
    tiers: Option<&[Tier]>,
    cfg: &LossConfig,
) -> Result<SpecializationReport> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Consistency("no samples to report on".into()))?;
    let (heads, classes) = (first.heads(), first.classes());
    if labels.len() != scores.len() || tiers.is_some_and(|t| t.len() != scores.len()) {
        return Err(Error::Consistency("scores, labels and tiers differ in length".into()));
    }
    let mut winners = Vec::with_capacity(scores.len());
    let mut correct = vec![0usize; heads];
    let mut combined = 0usize;
    let mut class_histogram = vec![vec![0usize; heads]; classes];
    let mut tier_histogram: Vec<(Tier, Vec<usize>)> = Vec::new();
    let mut tier_correct: Vec<Vec<usize>> = Vec::new();
    for (i, (s, &y)) in scores.iter().zip(labels).enumerate() {
        let w = argmax((0..heads).map(|m| s.prob(m, y)));
        winners.push(w);
        class_histogram[y.index()][w] += 1;
        let slot = tiers.map(|tiers| match tier_histogram.iter().position(|(t, _)| *t == tiers[i]) {
            Some(p) => p,
            None => {
                tier_histogram.push((tiers[i], vec![0; heads]));
                tier_correct.push(vec![0; heads]);
                tier_histogram.len() - 1
            }
        });
        if let Some(slot) = slot {
            tier_histogram[slot].1[w] += 1;
        }
        for (m, c) in correct.iter_mut().enumerate() {
            if argmax(s.row(m).iter().copied()) == y.index() {
                *c += 1;
                if let Some(slot) = slot {
                    tier_correct[slot][m] += 1;
                }
            }
        }
        if infer(s, cfg).label == y {
            combined += 1;
        }
    }
    let n = scores.len() as f64;
    let tier_accuracy = tier_histogram
        .iter()
        .zip(&tier_correct)
        .map(|((t, wins), c)| {
            let total = wins.iter().sum::<usize>() as f64;
            (*t, c.iter().map(|&k| k as f64 / total).collect())
        })
        .collect();
    Ok(SpecializationReport {
        heads,
        classes,
        winners,
        head_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        combined_accuracy: combined as f64 / n,
        class_histogram,
        tier_histogram,
        tier_accuracy,
    })
}

pub fn specialization_report(model: &Model, dataset: &LabeledDataset, cfg: &LossConfig) -> Result<SpecializationReport> {
    let scores = model.predict_scores(dataset.samples(), 256)?;
    report_from_scores(&scores, dataset.labels(), dataset.tiers(), cfg)
}
