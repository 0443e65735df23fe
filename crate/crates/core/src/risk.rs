//! Density-ratio risks and the pairwise baseline.
//!
//! All pairwise risks consume a score block `r̂` over `U_B × I_B` and return
//! the loss together with `∂loss/∂r̂`. Weights and inclusion probabilities
//! are constants; nothing is differentiated through them.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::model::{sigmoid, softplus, ScorerModel};
use crate::sampler::MiniBatch;
use crate::weighting::Weighting;

/// Strictly convex generator `f` of a Bregman divergence.
pub trait BregmanGenerator {
    fn name(&self) -> &'static str;
    fn f(&self, t: f64) -> f64;
    fn df(&self, t: f64) -> f64;
    fn in_domain(&self, t: f64) -> bool;

    /// `f(t) − f(t̂) − f'(t̂)(t − t̂)`. Generators with a closed form should
    /// override this, since the generic expression cancels badly when
    /// `t ≈ t̂`.
    fn divergence(&self, t: f64, t_hat: f64) -> f64 {
        self.f(t) - self.f(t_hat) - self.df(t_hat) * (t - t_hat)
    }
}

/// `f(t) = (t − 1)² / 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Ulsif;

impl BregmanGenerator for Ulsif {
    fn name(&self) -> &'static str {
        "ulsif"
    }

    fn f(&self, t: f64) -> f64 {
        0.5 * (t - 1.0) * (t - 1.0)
    }

    fn df(&self, t: f64) -> f64 {
        t - 1.0
    }

    fn in_domain(&self, t: f64) -> bool {
        t.is_finite() && t >= 0.0
    }

    fn divergence(&self, t: f64, t_hat: f64) -> f64 {
        let d = t - t_hat;
        0.5 * d * d
    }
}

/// `BR_f(t ‖ t̂) = f(t) − f(t̂) − f'(t̂)(t − t̂)`.
pub fn bregman_div<G: BregmanGenerator + ?Sized>(gen: &G, t: f64, t_hat: f64) -> Result<f64> {
    for v in [t, t_hat] {
        if !gen.in_domain(v) {
            return Err(Error::Domain {
                generator: gen.name(),
                value: v,
            });
        }
    }
    Ok(gen.divergence(t, t_hat))
}

/// `(ℓ₊(r̂), ℓ±(r̂)) = (−f'(r̂), f'(r̂)·r̂ − f(r̂))`, additive constants kept.
pub fn pointwise_losses<G: BregmanGenerator + ?Sized>(gen: &G, r_hat: f64) -> (f64, f64) {
    let d = gen.df(r_hat);
    (-d, d * r_hat - gen.f(r_hat))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskFamily {
    RankingUlsif,
    PuRegression,
    Bpr,
}

impl FromStr for RiskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking_ulsif" | "ulsif" => Ok(RiskFamily::RankingUlsif),
            "pu_regression" | "pu" => Ok(RiskFamily::PuRegression),
            "bpr" => Ok(RiskFamily::Bpr),
            other => Err(Error::Config(format!("unknown risk family `{other}`"))),
        }
    }
}

impl fmt::Display for RiskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskFamily::RankingUlsif => "ranking_ulsif",
            RiskFamily::PuRegression => "pu_regression",
            RiskFamily::Bpr => "bpr",
        })
    }
}

/// Risk selection and its hyper-parameters. Serialises as a flat key-value
/// table with keys `family`, `weighting`, `is_correction`, `nn_correction`,
/// `d_bar`, `lambda`, `c0`, `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub family: RiskFamily,
    pub weighting: Weighting,
    pub is_correction: bool,
    pub nn_correction: bool,
    /// Upper bound `D̄` of the density ratio used by the non-negative correction.
    pub d_bar: f64,
    /// L2 strength λ.
    pub lambda: f64,
    pub c0: f64,
    pub alpha: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            family: RiskFamily::RankingUlsif,
            weighting: Weighting::HardAdaptive,
            is_correction: true,
            nn_correction: true,
            d_bar: 50.0,
            lambda: 0.05,
            c0: 64.0,
            alpha: 0.5,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nn_correction && !(self.d_bar > 0.0 && self.d_bar.is_finite()) {
            return Err(Error::Config(format!(
                "d_bar must be positive when nn_correction is on, got {}",
                self.d_bar
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.weighting == Weighting::Popularity && !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::Config(format!("c0 must be positive, got {}", self.c0)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RiskConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a pairwise risk needs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLossInput<'a> {
    /// `r̂` over `U_B × I_B`.
    pub scores: ArrayView2<'a, f64>,
    pub pos_mask: ArrayView2<'a, bool>,
    /// π_u⁺ per batch row.
    pub priors: &'a [f64],
    pub weights_pos: ArrayView2<'a, f64>,
    pub weights_neg: ArrayView2<'a, f64>,
    /// `s(i)` per batch column; only read under importance-sampling correction.
    pub item_sampling_prob: Option<&'a [f64]>,
}

impl BatchLossInput<'_> {
    fn check_shapes(&self) -> Result<()> {
        let dim = self.scores.dim();
        let ok = self.pos_mask.dim() == dim
            && self.weights_pos.dim() == dim
            && self.weights_neg.dim() == dim
            && self.priors.len() == dim.0
            && self.item_sampling_prob.is_none_or(|s| s.len() == dim.1);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("batch loss input shapes disagree".into()))
        }
    }
}

/// Per-user pieces of a pairwise risk, before averaging over users.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserTerms {
    /// `R̂_u^{+,1}`; for PU regression the `(w⁺ − w⁻)r̂²` part.
    pub pos_sq_wpos: f64,
    /// `R̂_u^{+,2}`; zero for PU regression.
    pub pos_sq_wneg: f64,
    /// `R̂_u^{+,3}`; for PU regression the `2w⁺r̂` part.
    pub pos_linear: f64,
    /// `R̂_u^{±}`.
    pub unlabelled: f64,
    /// `R̂_u^{cor}` when the non-negative correction is on.
    pub correction: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RiskEval {
    pub loss: f64,
    pub per_user: Vec<UserTerms>,
    /// `∂loss/∂r̂`, same shape as the score block.
    pub grad_scores: Array2<f64>,
}

fn row<'a, T: Clone>(block: ArrayView2<'a, T>, a: usize) -> Cow<'a, [T]> {
    let r = block.index_axis_move(Axis(0), a);
    match r.to_slice() {
        Some(slice) => Cow::Borrowed(slice),
        None => Cow::Owned(r.to_vec()),
    }
}

fn positive_sum(x: f64, what: &str, row: usize) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::InvalidInput(format!(
            "sum of {what} for batch row {row} is {x}; must be positive"
        )))
    }
}

/// Self-normalised ranking-uLSIF empirical risk with optional
/// importance-sampling and non-negative corrections.
pub fn ranking_ulsif(b: &BatchLossInput<'_>, cfg: &RiskConfig) -> Result<RiskEval> {
    b.check_shapes()?;
    let (rows, cols) = b.scores.dim();
    if rows == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if cfg.nn_correction && (cfg.d_bar.is_nan() || cfg.d_bar <= 0.0) {
        return Err(Error::Config("d_bar must be positive".into()));
    }
    let is_probs = if cfg.is_correction {
        let s = b
            .item_sampling_prob
            .ok_or_else(|| Error::InvalidInput("importance-sampling correction needs s(i)".into()))?;
        if let Some(bad) = s.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidInput(format!("sampling probability {bad} not in (0,1]")));
        }
        Some(s)
    } else {
        None
    };

    let scale = 1.0 / rows as f64;
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let mut per_user = Vec::with_capacity(rows);
    let mut loss = 0.0;
    let mut v = vec![0.0; cols];
    for a in 0..rows {
        let (r, mask) = (row(b.scores, a), row(b.pos_mask, a));
        let (wp, wn) = (row(b.weights_pos, a), row(b.weights_neg, a));
        let prior = b.priors[a];

        let mut n_pos = 0usize;
        let (mut sum_wp, mut sum_wn) = (0.0, 0.0);
        let (mut acc1, mut acc2, mut acc3) = (0.0, 0.0, 0.0);
        for j in 0..cols {
            if mask[j] {
                n_pos += 1;
                sum_wp += wp[j];
                sum_wn += wn[j];
                acc1 += wp[j] * r[j] * r[j];
                acc2 += wn[j] * r[j] * r[j];
                acc3 += wp[j] * r[j];
            }
        }
        if n_pos == 0 {
            return Err(Error::InvalidInput(format!("batch row {a} has no positives")));
        }
        let sum_wp = positive_sum(sum_wp, "positive weights", a)?;
        let sum_wn = positive_sum(sum_wn, "unlabelled weights on positives", a)?;

        match is_probs {
            Some(s) => v.iter_mut().zip(wn.iter()).zip(s).for_each(|((v, w), p)| *v = w / p),
            None => v.copy_from_slice(&wn),
        }
        let sum_v: f64 = v.iter().sum();
        let acc_v: f64 = v.iter().zip(r.iter()).map(|(v, r)| v * r * r).sum();
        let sum_v = positive_sum(sum_v, "unlabelled weights", a)?;

        let pos1 = prior * acc1 / (2.0 * sum_wp);
        let pos2 = prior * acc2 / (2.0 * sum_wn);
        let pos3 = acc3 / sum_wp;
        let unl = acc_v / (2.0 * sum_v);

        let (total, correction, unl_active, cor_coef) = if cfg.nn_correction {
            let cor = acc1 / (2.0 * cfg.d_bar * sum_wp);
            let gap = unl - cor;
            let active = gap > 0.0;
            let total = pos1 - pos2 - pos3 + cor + gap.max(0.0);
            // When the clamp is active R^cor cancels out of the gradient.
            let cor_coef = if active { 0.0 } else { 1.0 };
            (total, Some(cor), active, cor_coef)
        } else {
            (pos1 - pos2 - pos3 + unl, None, true, 0.0)
        };

        let mut g = grad.row_mut(a);
        let g = g.as_slice_mut().expect("fresh standard-layout block");
        let unl_coef = if unl_active { 1.0 / sum_v } else { 0.0 };
        for j in 0..cols {
            let mut d = unl_coef * v[j] * r[j];
            if mask[j] {
                d += prior * wp[j] * r[j] / sum_wp;
                d -= prior * wn[j] * r[j] / sum_wn;
                d -= wp[j] / sum_wp;
                d += cor_coef * wp[j] * r[j] / (cfg.d_bar * sum_wp);
            }
            g[j] = d * scale;
        }

        loss += total;
        per_user.push(UserTerms {
            pos_sq_wpos: pos1,
            pos_sq_wneg: pos2,
            pos_linear: pos3,
            unlabelled: unl,
            correction,
            total,
        });
    }
    Ok(RiskEval {
        loss: loss * scale,
        per_user,
        grad_scores: grad,
    })
}

/// Loss value and per-user terms of [`ranking_ulsif`].
pub fn ranking_ulsif_loss(b: &BatchLossInput<'_>, cfg: &RiskConfig) -> Result<(f64, Vec<UserTerms>)> {
    ranking_ulsif(b, cfg).map(|e| (e.loss, e.per_user))
}

/// Weighted PU-regression risk:
/// `(π/|I_u⁺|) Σ_{I_u⁺} ((w⁺−w⁻)r̂² − 2w⁺r̂) + (1/|I_B|) Σ_{I_B} w⁻r̂²`,
/// averaged over batch users.
pub fn pu_regression(b: &BatchLossInput<'_>, _cfg: &RiskConfig) -> Result<RiskEval> {
    b.check_shapes()?;
    let (rows, cols) = b.scores.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / rows as f64;
    let inv_cols = 1.0 / cols as f64;
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let mut per_user = Vec::with_capacity(rows);
    let mut loss = 0.0;
    for a in 0..rows {
        let (r, mask) = (row(b.scores, a), row(b.pos_mask, a));
        let (wp, wn) = (row(b.weights_pos, a), row(b.weights_neg, a));
        let n_pos = mask.iter().filter(|&&m| m).count();
        if n_pos == 0 {
            return Err(Error::InvalidInput(format!("batch row {a} has no positives")));
        }
        let c = b.priors[a] / n_pos as f64;
        let (mut sq, mut lin, mut unl) = (0.0, 0.0, 0.0);
        let mut g = grad.row_mut(a);
        let g = g.as_slice_mut().expect("fresh standard-layout block");
        for j in 0..cols {
            let mut d = 2.0 * wn[j] * r[j] * inv_cols;
            unl += wn[j] * r[j] * r[j];
            if mask[j] {
                sq += (wp[j] - wn[j]) * r[j] * r[j];
                lin += 2.0 * wp[j] * r[j];
                d += c * (2.0 * (wp[j] - wn[j]) * r[j] - 2.0 * wp[j]);
            }
            g[j] = d * scale;
        }
        let (sq, lin, unl) = (c * sq, c * lin, unl * inv_cols);
        let total = sq - lin + unl;
        loss += total;
        per_user.push(UserTerms {
            pos_sq_wpos: sq,
            pos_sq_wneg: 0.0,
            pos_linear: lin,
            unlabelled: unl,
            correction: None,
            total,
        });
    }
    Ok(RiskEval {
        loss: loss * scale,
        per_user,
        grad_scores: grad,
    })
}

pub fn pu_regression_loss(b: &BatchLossInput<'_>, cfg: &RiskConfig) -> Result<f64> {
    pu_regression(b, cfg).map(|e| e.loss)
}

/// Mean of `−ln σ(pos − neg)` over paired raw inner products.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    assert_eq!(pos_scores.len(), neg_scores.len(), "unpaired BPR scores");
    if pos_scores.is_empty() {
        return 0.0;
    }
    let sum: f64 = pos_scores.iter().zip(neg_scores).map(|(p, n)| softplus(n - p)).sum();
    sum / pos_scores.len() as f64
}

/// `∂bpr_loss/∂pos` per pair; the gradient for `neg` is its negation.
pub fn bpr_grad(pos_scores: &[f64], neg_scores: &[f64]) -> Vec<f64> {
    let n = pos_scores.len().max(1) as f64;
    pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, q)| -sigmoid(q - p) / n)
        .collect()
}

/// `λ · ½ Σ ‖e‖²` over the layer-0 rows of the given users and items.
pub fn l2_penalty_rows(model: &ScorerModel, users: &[UserId], items: &[ItemId], lambda: f64) -> f64 {
    let sq = |row: ndarray::ArrayView1<'_, f64>| row.dot(&row);
    let u: f64 = users.iter().map(|&u| sq(model.user_embed.row(u as usize))).sum();
    let i: f64 = items.iter().map(|&i| sq(model.item_embed.row(i as usize))).sum();
    lambda * 0.5 * (u + i)
}

/// Batch-local L2 regularisation of the raw embedding tables.
pub fn l2_penalty(model: &ScorerModel, batch: &MiniBatch, lambda: f64) -> f64 {
    l2_penalty_rows(model, &batch.users, &batch.items, lambda)
}
