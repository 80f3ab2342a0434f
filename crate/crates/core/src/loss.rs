//! Collaborative per-head loss: a modulation factor from the companion heads
//! times the head's own cross-entropy, summed with per-head weights plus an
//! L2 weight penalty.
//!
//! For head `m` of `M` on a sample with true label `y`:
//!
//! ```text
//! T(m) = Π_{t≠m} (1 − P_t(y))^(1/(M−1))     collaborative
//! T(m) = Π_{t<m} (1 − P_t(y))^(1/(m−1))     cascade (lower heads only), T(1) = 1
//! T(m) = 1                                  independent deep supervision / single head
//! C(m) = −log P_m(y)
//! ℓ(m) = T(m) · C(m)
//! objective = Σ_m λ_m ℓ(m) + α Σ_W ‖W‖²
//! ```
//!
//! Every probability is clamped to `[ε, 1 − ε]` before it enters a log or a
//! `1 − p` factor.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Per-head class distributions for one sample, `heads × classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    heads: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    /// Checks that every row is a distribution (entries in `[0, 1]`, sum `1 ± 1e-10`).
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let heads = rows.len();
        let classes = rows.first().map_or(0, Vec::len);
        if heads == 0 || classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Dimension(
                "score matrix rows must be nonempty and equally long".into(),
            ));
        }
        Self::from_flat(heads, classes, rows.concat())
    }

    pub fn from_flat(heads: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || classes == 0 || data.len() != heads * classes {
            return Err(Error::Dimension(format!(
                "score matrix {heads}x{classes} with {} values",
                data.len()
            )));
        }
        for (m, row) in data.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Consistency(format!(
                    "head {} scores are not a distribution (sum {sum})",
                    m + 1
                )));
            }
        }
        Ok(ScoreMatrix {
            heads,
            classes,
            data,
        })
    }

    pub(crate) fn from_flat_unchecked(heads: usize, classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), heads * classes);
        ScoreMatrix {
            heads,
            classes,
            data,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Distribution of head `m` (0-based).
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.classes..(m + 1) * self.classes]
    }

    pub fn prob(&self, m: usize, y: Label) -> f64 {
        self.data[m * self.classes + y.index()]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Each head modulated by all of its companions.
    Cldl,
    /// Each head modulated by the heads below it only.
    CldlMinus,
    /// Plain cross-entropy on every head.
    DsnStar,
    /// One head, plain cross-entropy.
    Single,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::Cldl,
        LossMode::CldlMinus,
        LossMode::DsnStar,
        LossMode::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Cldl => "cldl",
            LossMode::CldlMinus => "cldl-minus",
            LossMode::DsnStar => "dsn-star",
            LossMode::Single => "single",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Per-head weights, one per head.
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// 0.3 on every lower head and 1.0 on the top head.
pub fn default_lambda(heads: usize) -> Vec<f64> {
    let mut l = vec![0.3; heads];
    if let Some(top) = l.last_mut() {
        *top = 1.0;
    }
    l
}

impl LossConfig {
    pub fn new(mode: LossMode, heads: usize) -> Self {
        LossConfig {
            mode,
            lambda: default_lambda(heads),
            alpha: 0.0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn heads(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.lambda.len() != heads {
            return Err(Error::Config(format!(
                "loss.lambda has {} entries for {heads} heads",
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss.lambda entries must be finite and >= 0".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config("loss.alpha must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("loss.epsilon must lie in (0, 0.5)".into()));
        }
        if self.mode == LossMode::Single && heads != 1 {
            return Err(Error::Config(format!(
                "loss mode 'single' needs exactly one head, got {heads}"
            )));
        }
        Ok(())
    }
}

pub fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.max(eps).min(1.0 - eps)
}

/// Modulation factor `T` of head `m` (0-based).
pub fn modulation(m: usize, scores: &ScoreMatrix, y: Label, mode: LossMode, eps: f64) -> f64 {
    let miss = |t: usize| 1.0 - clamp_prob(scores.prob(t, y), eps);
    match mode {
        LossMode::Cldl => {
            let heads = scores.heads();
            if heads == 1 {
                return 1.0;
            }
            let prod: f64 = (0..heads).filter(|&t| t != m).map(miss).product();
            prod.powf(1.0 / (heads - 1) as f64)
        }
        LossMode::CldlMinus => {
            if m == 0 {
                return 1.0;
            }
            let prod: f64 = (0..m).map(miss).product();
            prod.powf(1.0 / m as f64)
        }
        LossMode::DsnStar | LossMode::Single => 1.0,
    }
}

/// Confidence term `C = −log P_m(y)` on the clamped probability.
pub fn confidence(m: usize, scores: &ScoreMatrix, y: Label, eps: f64) -> f64 {
    -clamp_prob(scores.prob(m, y), eps).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss {
    pub modulation: f64,
    pub confidence: f64,
    /// Always exactly `modulation * confidence`.
    pub loss: f64,
}

pub fn per_head_loss(m: usize, scores: &ScoreMatrix, y: Label, mode: LossMode, eps: f64) -> HeadLoss {
    let t = modulation(m, scores, y, mode, eps);
    let c = confidence(m, scores, y, eps);
    HeadLoss {
        modulation: t,
        confidence: c,
        loss: t * c,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub heads: Vec<HeadLoss>,
    /// `Σ λ_m ℓ(m)`.
    pub data_term: f64,
    /// `α Σ‖W‖²`.
    pub decay_term: f64,
    pub total: f64,
}

pub fn squared_weight_norm<'a>(weights: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    weights.into_iter().map(Tensor::squared_norm).sum()
}

pub fn total_objective<'a>(
    heads: &[HeadLoss],
    lambda: &[f64],
    alpha: f64,
    weights: impl IntoIterator<Item = &'a Tensor>,
) -> f64 {
    data_term(heads, lambda) + alpha * squared_weight_norm(weights)
}

pub(crate) fn data_term(heads: &[HeadLoss], lambda: &[f64]) -> f64 {
    debug_assert_eq!(heads.len(), lambda.len());
    heads.iter().zip(lambda).map(|(h, l)| l * h.loss).sum()
}

/// Full per-sample breakdown given a precomputed `Σ‖W‖²`.
pub fn breakdown(scores: &ScoreMatrix, y: Label, cfg: &LossConfig, weight_sq_norm: f64) -> LossBreakdown {
    let heads: Vec<HeadLoss> = (0..scores.heads())
        .map(|m| per_head_loss(m, scores, y, cfg.mode, cfg.epsilon))
        .collect();
    let data = data_term(&heads, &cfg.lambda);
    let decay = cfg.alpha * weight_sq_norm;
    LossBreakdown {
        heads,
        data_term: data,
        decay_term: decay,
        total: data + decay,
    }
}
