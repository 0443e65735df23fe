//! Class-dependent sample weights `(w⁺, w⁻)` over a batch block.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};
use crate::model::{score_block, PropagationGraph, ScorerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Popularity,
    /// `w⁺ = 1/r̂`, `w⁻ = r̂` from the current model, recomputed every step.
    HardAdaptive,
    /// The same formulas evaluated on a frozen reference model.
    HardStatic,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "popularity" => Ok(Weighting::Popularity),
            "hard_adaptive" | "hard" => Ok(Weighting::HardAdaptive),
            "hard_static" | "static" => Ok(Weighting::HardStatic),
            other => Err(Error::Config(format!("unknown weighting `{other}`"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::Popularity => "popularity",
            Weighting::HardAdaptive => "hard_adaptive",
            Weighting::HardStatic => "hard_static",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrices {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
}

pub fn uniform_weights(rows: usize, cols: usize) -> WeightMatrices {
    WeightMatrices {
        pos: Array2::ones((rows, cols)),
        neg: Array2::ones((rows, cols)),
    }
}

/// Per-item unlabelled weights `c0·pop(i)^α / Σ_{j∈I} pop(j)^α` over the
/// whole corpus.
pub fn popularity_column_weights(ds: &InteractionDataset, c0: f64, alpha: f64) -> Result<Vec<f64>> {
    if c0.is_nan() || c0 <= 0.0 {
        return Err(Error::Config(format!("c0 must be positive, got {c0}")));
    }
    let pop = ds.item_popularity();
    if alpha < 0.0 && pop.contains(&0) {
        return Err(Error::InvalidInput(
            "negative alpha is undefined for items without interactions".into(),
        ));
    }
    let powered: Vec<f64> = pop.iter().map(|&p| (p as f64).powf(alpha)).collect();
    let denom: f64 = powered.iter().sum();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::InvalidInput(
            "popularity weights need at least one interacted item".into(),
        ));
    }
    Ok(powered.into_iter().map(|p| c0 * p / denom).collect())
}

/// `w⁺ = 1` and identical rows of popularity-based `w⁻` for the batch items.
pub fn popularity_weights(
    ds: &InteractionDataset,
    rows: usize,
    items: &[ItemId],
    c0: f64,
    alpha: f64,
) -> Result<WeightMatrices> {
    let column = popularity_column_weights(ds, c0, alpha)?;
    Ok(popularity_from_column(&column, rows, items))
}

pub(crate) fn popularity_from_column(column: &[f64], rows: usize, items: &[ItemId]) -> WeightMatrices {
    let cols = items.len();
    let neg = Array2::from_shape_fn((rows, cols), |(_, b)| column[items[b] as usize]);
    WeightMatrices {
        pos: Array2::ones((rows, cols)),
        neg,
    }
}

/// `w⁺ = 1/r̂`, `w⁻ = r̂` entrywise, with the per-user constants set to 1.
pub fn hard_sample_weights(scores: ArrayView2<'_, f64>) -> Result<WeightMatrices> {
    if let Some(bad) = scores.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "hard-sample weights need positive finite scores, got {bad}"
        )));
    }
    Ok(WeightMatrices {
        pos: scores.mapv(|r| 1.0 / r),
        neg: scores.to_owned(),
    })
}

/// Propagated outputs of a frozen model, used as the source of static
/// hard-sample weights.
#[derive(Clone, Debug)]
pub struct ReferenceScorer {
    user_out: Array2<f64>,
    item_out: Array2<f64>,
}

impl ReferenceScorer {
    pub fn new(model: &ScorerModel, graph: &PropagationGraph) -> Self {
        let (user_out, item_out) = model.propagate(graph);
        ReferenceScorer { user_out, item_out }
    }

    pub fn scores(&self, users: &[UserId], items: &[ItemId]) -> Array2<f64> {
        score_block(&self.user_out, &self.item_out, users, items)
    }
}

/// Hard-sample weights computed from a frozen reference model.
pub fn static_hard_weights(
    reference: Option<&ReferenceScorer>,
    users: &[UserId],
    items: &[ItemId],
) -> Result<WeightMatrices> {
    let reference = reference.ok_or(Error::MissingReference)?;
    hard_sample_weights(reference.scores(users, items).view())
}
