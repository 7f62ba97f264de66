//! Set-wise loss kernels over cosine scores.
//!
//! Every kernel sees one positive score and `N` negative scores per example
//! and returns the batch-mean loss together with `dL/ds` for every score.
//! Hinges use a one-sided subgradient: exactly at the kink the gradient is 0.
//!
//! Distance-based losses use `d = sqrt(max(0, 2 - 2s))`, the distance between
//! the unit-normalized vectors, so `d² = 2 - 2s` exactly.

use serde::{Deserialize, Serialize};

use crate::encoder::distance_from_score;
use crate::error::{Error, Result};

/// Positive and negative scores for a batch; negatives are stored flat,
/// `num_negatives` per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pos: Vec<f64>,
    neg: Vec<f64>,
    num_negatives: usize,
}

impl Scores {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>, num_negatives: usize) -> Result<Self> {
        if neg.len() != pos.len() * num_negatives {
            return Err(Error::invalid(format!(
                "{} negative scores for {} examples x {num_negatives}",
                neg.len(),
                pos.len()
            )));
        }
        Ok(Self {
            pos,
            neg,
            num_negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn num_negatives(&self) -> usize {
        self.num_negatives
    }

    pub fn pos(&self, b: usize) -> f64 {
        self.pos[b]
    }

    pub fn negs(&self, b: usize) -> &[f64] {
        &self.neg[b * self.num_negatives..(b + 1) * self.num_negatives]
    }

    pub fn pos_scores(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg_scores(&self) -> &[f64] {
        &self.neg
    }
}

/// Batch loss (mean over examples) and its gradient with respect to every
/// score, laid out like [`Scores`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

/// Positive-side term of the generalized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveTerm {
    /// `1 - s(u,i)`
    OneMinusScore,
    /// `d(u,i)²`
    SquaredDistance,
}

/// Hinged per-negative term of the generalized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerTerm {
    /// `s(u,j)`, no margin
    Score,
    /// `s(u,j) - m`
    ScoreMinusMargin,
    /// `m - d(u,j)`
    MarginMinusDistance,
    /// `d(u,i) - d(u,j) + m`
    TripletDistance,
}

impl InnerTerm {
    fn uses_margin(self) -> bool {
        !matches!(self, InnerTerm::Score)
    }

    fn is_similarity(self) -> bool {
        matches!(self, InnerTerm::Score | InnerTerm::ScoreMinusMargin)
    }
}

fn one() -> f64 {
    1.0
}

/// Loss selection and parameters, tagged by `kind` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// Multi-margin cosine loss. The effective weight of margin `k` is
    /// `margin_weights[k] * neg_ratio`, so a `1:R` positive/negative ratio is
    /// written as `pos_weight = 1, neg_ratio = R`.
    Mmcl {
        margins: Vec<f64>,
        margin_weights: Vec<f64>,
        #[serde(default = "one")]
        pos_weight: f64,
        #[serde(default = "one")]
        neg_ratio: f64,
    },
    Ccl {
        margin: f64,
        #[serde(default = "one")]
        neg_weight: f64,
    },
    Contrastive {
        margin: f64,
    },
    Triplet {
        margin: f64,
    },
    InfoNce,
    Bsl {
        #[serde(default = "one")]
        tau_pos: f64,
        tau_neg: f64,
    },
    Bpr,
    PairwiseHinge {
        margin: f64,
    },
    SoftmaxCe,
    Mse,
    Generalized {
        pos_weight: f64,
        neg_weight: f64,
        pos_term: PositiveTerm,
        inner: InnerTerm,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        margin: Option<f64>,
    },
}

impl LossSpec {
    pub fn mmcl(margins: Vec<f64>, margin_weights: Vec<f64>) -> Self {
        Self::mmcl_with_ratio(margins, margin_weights, 1.0)
    }

    /// MMCL with `w_p : w_n = 1 : ratio`.
    pub fn mmcl_with_ratio(margins: Vec<f64>, margin_weights: Vec<f64>, ratio: f64) -> Self {
        LossSpec::Mmcl {
            margins,
            margin_weights,
            pos_weight: 1.0,
            neg_ratio: ratio,
        }
    }

    pub fn ccl(margin: f64, neg_weight: f64) -> Self {
        LossSpec::Ccl { margin, neg_weight }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LossSpec::Mmcl { .. } => "mmcl",
            LossSpec::Ccl { .. } => "ccl",
            LossSpec::Contrastive { .. } => "contrastive",
            LossSpec::Triplet { .. } => "triplet",
            LossSpec::InfoNce => "info_nce",
            LossSpec::Bsl { .. } => "bsl",
            LossSpec::Bpr => "bpr",
            LossSpec::PairwiseHinge { .. } => "pairwise_hinge",
            LossSpec::SoftmaxCe => "softmax_ce",
            LossSpec::Mse => "mse",
            LossSpec::Generalized { .. } => "generalized",
        }
    }

    /// Checks parameter invariants. Errors carry the config key path
    /// (`loss.<field>`).
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("loss.{field}"), msg));
        match self {
            LossSpec::Mmcl {
                margins,
                margin_weights,
                pos_weight,
                neg_ratio,
            } => {
                if margins.is_empty() {
                    return err("margins", "must contain at least one margin".into());
                }
                if let Some(m) = margins.iter().find(|m| !(-1.0..=1.0).contains(*m)) {
                    return err("margins", format!("margin {m} outside [-1, 1]"));
                }
                if margins.windows(2).any(|w| w[0] >= w[1]) {
                    return err("margins", "must be strictly ascending".into());
                }
                if margin_weights.len() != margins.len() {
                    return err(
                        "margin_weights",
                        format!("expected {} weights, got {}", margins.len(), margin_weights.len()),
                    );
                }
                if let Some(w) = margin_weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
                    return err("margin_weights", format!("weight {w} must be finite and >= 0"));
                }
                if !(*pos_weight > 0.0 && pos_weight.is_finite()) {
                    return err("pos_weight", format!("must be > 0, got {pos_weight}"));
                }
                if !(*neg_ratio > 0.0 && neg_ratio.is_finite()) {
                    return err("neg_ratio", format!("must be > 0, got {neg_ratio}"));
                }
            }
            LossSpec::Ccl { margin, neg_weight } => {
                if !(-1.0..=1.0).contains(margin) {
                    return err("margin", format!("{margin} outside [-1, 1]"));
                }
                if !(*neg_weight >= 0.0 && neg_weight.is_finite()) {
                    return err("neg_weight", format!("must be >= 0, got {neg_weight}"));
                }
            }
            LossSpec::Contrastive { margin }
            | LossSpec::Triplet { margin }
            | LossSpec::PairwiseHinge { margin } => {
                if !(*margin >= 0.0 && margin.is_finite()) {
                    return err("margin", format!("must be >= 0, got {margin}"));
                }
            }
            LossSpec::Bsl { tau_pos, tau_neg } => {
                if !(*tau_pos > 0.0 && tau_pos.is_finite()) {
                    return err("tau_pos", format!("temperature must be > 0, got {tau_pos}"));
                }
                if !(*tau_neg > 0.0 && tau_neg.is_finite()) {
                    return err("tau_neg", format!("temperature must be > 0, got {tau_neg}"));
                }
            }
            LossSpec::InfoNce | LossSpec::Bpr | LossSpec::SoftmaxCe | LossSpec::Mse => {}
            LossSpec::Generalized {
                pos_weight,
                neg_weight,
                pos_term,
                inner,
                margin,
            } => {
                if !(*pos_weight >= 0.0 && pos_weight.is_finite()) {
                    return err("pos_weight", format!("must be >= 0, got {pos_weight}"));
                }
                if !(*neg_weight >= 0.0 && neg_weight.is_finite()) {
                    return err("neg_weight", format!("must be >= 0, got {neg_weight}"));
                }
                match (inner.uses_margin(), margin) {
                    (true, None) => return err("margin", format!("{inner:?} requires a margin")),
                    (false, Some(_)) => return err("margin", format!("{inner:?} does not take a margin")),
                    _ => {}
                }
                let pos_is_similarity = *pos_term == PositiveTerm::OneMinusScore;
                if pos_is_similarity != inner.is_similarity() {
                    return err(
                        "inner",
                        format!("{inner:?} cannot be combined with positive term {pos_term:?}"),
                    );
                }
            }
        }
        Ok(())
    }

    /// Batch-mean loss and score gradients.
    pub fn evaluate(&self, scores: &Scores) -> Result<LossGrad> {
        self.validate()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = scores.num_negatives();
        if n == 0 {
            return Err(Error::invalid("losses need at least one negative per example"));
        }
        let b = scores.len();
        let mut out = LossGrad {
            loss: 0.0,
            d_pos: vec![0.0; b],
            d_neg: vec![0.0; b * n],
        };
        if b == 0 {
            return Ok(out);
        }
        let kernel = Kernel::from_spec(self);
        for e in 0..b {
            let d_neg = &mut out.d_neg[e * n..(e + 1) * n];
            let (loss, d_pos) = kernel.example(scores.pos(e), scores.negs(e), d_neg);
            out.loss += loss;
            out.d_pos[e] = d_pos;
        }
        let inv_b = 1.0 / b as f64;
        out.loss *= inv_b;
        out.d_pos.iter_mut().for_each(|g| *g *= inv_b);
        out.d_neg.iter_mut().for_each(|g| *g *= inv_b);
        Ok(out)
    }
}

/// Resolved kernel parameters; MMCL weights are already multiplied by the ratio.
enum Kernel {
    Mmcl {
        margins: Vec<f64>,
        weights: Vec<f64>,
        pos_weight: f64,
    },
    Ccl {
        margin: f64,
        weight: f64,
    },
    Contrastive {
        margin: f64,
    },
    Triplet {
        margin: f64,
    },
    Softmax,
    Bsl {
        tau_neg: f64,
    },
    Bpr,
    Hinge {
        margin: f64,
    },
    Mse,
    Generalized {
        pos_weight: f64,
        neg_weight: f64,
        pos_term: PositiveTerm,
        inner: InnerTerm,
        margin: f64,
    },
}

impl Kernel {
    fn from_spec(spec: &LossSpec) -> Self {
        match spec {
            LossSpec::Mmcl {
                margins,
                margin_weights,
                pos_weight,
                neg_ratio,
            } => Kernel::Mmcl {
                margins: margins.clone(),
                weights: margin_weights.iter().map(|w| w * neg_ratio).collect(),
                pos_weight: *pos_weight,
            },
            LossSpec::Ccl { margin, neg_weight } => Kernel::Ccl {
                margin: *margin,
                weight: *neg_weight,
            },
            LossSpec::Contrastive { margin } => Kernel::Contrastive { margin: *margin },
            LossSpec::Triplet { margin } => Kernel::Triplet { margin: *margin },
            LossSpec::InfoNce | LossSpec::SoftmaxCe => Kernel::Softmax,
            LossSpec::Bsl { tau_neg, .. } => Kernel::Bsl { tau_neg: *tau_neg },
            LossSpec::Bpr => Kernel::Bpr,
            LossSpec::PairwiseHinge { margin } => Kernel::Hinge { margin: *margin },
            LossSpec::Mse => Kernel::Mse,
            LossSpec::Generalized {
                pos_weight,
                neg_weight,
                pos_term,
                inner,
                margin,
            } => Kernel::Generalized {
                pos_weight: *pos_weight,
                neg_weight: *neg_weight,
                pos_term: *pos_term,
                inner: *inner,
                margin: margin.unwrap_or(0.0),
            },
        }
    }

    /// Per-example loss; writes `dL/ds_j` into `d_neg` and returns
    /// `(loss, dL/ds_pos)`.
    fn example(&self, pos: f64, negs: &[f64], d_neg: &mut [f64]) -> (f64, f64) {
        let inv_n = 1.0 / negs.len() as f64;
        match self {
            Kernel::Mmcl {
                margins,
                weights,
                pos_weight,
            } => {
                let mut neg_sum = 0.0;
                for (&m, &w) in margins.iter().zip(weights) {
                    neg_sum += w * negs.iter().map(|&s| (s - m).max(0.0)).sum::<f64>();
                }
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    let mut active = 0.0;
                    for (&m, &w) in margins.iter().zip(weights) {
                        if s > m {
                            active += w;
                        }
                    }
                    *g = active * inv_n;
                }
                (pos_weight * (1.0 - pos) + neg_sum * inv_n, -pos_weight)
            }
            Kernel::Ccl { margin, weight } => {
                let hinge: f64 = negs.iter().map(|&s| (s - margin).max(0.0)).sum();
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    *g = if s > *margin { weight * inv_n } else { 0.0 };
                }
                ((1.0 - pos) + weight * hinge * inv_n, -1.0)
            }
            Kernel::Contrastive { margin } => {
                let pos_sq = (2.0 - 2.0 * pos).max(0.0);
                let mut neg_sum = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    let d = distance_from_score(s);
                    let h = margin - d;
                    *g = 0.0;
                    if h > 0.0 {
                        neg_sum += h * h;
                        // d(h²)/ds = 2h · (-dd/ds) = 2h / d
                        if d > 0.0 {
                            *g = 0.5 * inv_n * 2.0 * h / d;
                        }
                    }
                }
                (0.5 * (pos_sq + neg_sum * inv_n), -1.0)
            }
            Kernel::Triplet { margin } => {
                let mut loss = 0.0;
                let mut d_pos = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    let h = 2.0 * s - 2.0 * pos + margin;
                    if h > 0.0 {
                        loss += h;
                        *g = 2.0 * inv_n;
                        d_pos -= 2.0 * inv_n;
                    } else {
                        *g = 0.0;
                    }
                }
                (loss * inv_n, d_pos)
            }
            Kernel::Softmax => {
                let max = negs.iter().copied().fold(pos, f64::max);
                let e_pos = (pos - max).exp();
                let mut z = e_pos;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    *g = (s - max).exp();
                    z += *g;
                }
                d_neg.iter_mut().for_each(|g| *g /= z);
                let lse = max + z.ln();
                (lse - pos, e_pos / z - 1.0)
            }
            Kernel::Bsl { tau_neg } => {
                let max = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau_neg;
                let mut z = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    *g = (s / tau_neg - max).exp();
                    z += *g;
                }
                d_neg.iter_mut().for_each(|g| *g /= z);
                let log_mean_exp = max + z.ln() + inv_n.ln();
                (-pos + tau_neg * log_mean_exp, -1.0)
            }
            Kernel::Bpr => {
                let mut loss = 0.0;
                let mut d_pos = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    let x = s - pos;
                    loss += softplus(x);
                    let sig = sigmoid(x);
                    *g = sig * inv_n;
                    d_pos -= sig * inv_n;
                }
                (loss * inv_n, d_pos)
            }
            Kernel::Hinge { margin } => {
                let mut loss = 0.0;
                let mut d_pos = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    let h = margin - (pos - s);
                    if h > 0.0 {
                        loss += h;
                        *g = inv_n;
                        d_pos -= inv_n;
                    } else {
                        *g = 0.0;
                    }
                }
                (loss * inv_n, d_pos)
            }
            Kernel::Mse => {
                let mut neg = 0.0;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    neg += s * s;
                    *g = 2.0 * s * inv_n;
                }
                ((pos - 1.0).powi(2) + neg * inv_n, 2.0 * (pos - 1.0))
            }
            Kernel::Generalized {
                pos_weight,
                neg_weight,
                pos_term,
                inner,
                margin,
            } => {
                let (pos_val, pos_grad) = match pos_term {
                    PositiveTerm::OneMinusScore => (1.0 - pos, -1.0),
                    PositiveTerm::SquaredDistance => ((2.0 - 2.0 * pos).max(0.0), -2.0),
                };
                let d_p = distance_from_score(pos);
                let scale = neg_weight * inv_n;
                let mut neg_sum = 0.0;
                let mut d_pos = pos_weight * pos_grad;
                for (g, &s) in d_neg.iter_mut().zip(negs) {
                    // (value, d/ds_j, d/ds_pos)
                    let (h, dh_dneg, dh_dpos) = match inner {
                        InnerTerm::Score => (s, 1.0, 0.0),
                        InnerTerm::ScoreMinusMargin => (s - margin, 1.0, 0.0),
                        InnerTerm::MarginMinusDistance => {
                            let d = distance_from_score(s);
                            (margin - d, inv_or_zero(d), 0.0)
                        }
                        InnerTerm::TripletDistance => {
                            let d = distance_from_score(s);
                            (d_p - d + margin, inv_or_zero(d), -inv_or_zero(d_p))
                        }
                    };
                    if h > 0.0 {
                        neg_sum += h;
                        *g = scale * dh_dneg;
                        d_pos += scale * dh_dpos;
                    } else {
                        *g = 0.0;
                    }
                }
                (pos_weight * pos_val + neg_weight * neg_sum * inv_n, d_pos)
            }
        }
    }
}

/// `-dd/ds = 1/d` for `d = sqrt(2 - 2s)`; zero at the singular point `d = 0`.
fn inv_or_zero(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
