//! User-averaged Recall@K and nDCG@K with binary relevance.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, Split, UserId};
use crate::error::{Error, Result};
use crate::model::top_k;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub users_evaluated: usize,
}

/// `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// DCG over the top-K divided by the ideal DCG of `min(K, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    dcg / idcg
}

/// Items a user may be recommended when evaluating on `split`: everything
/// except train positives, and for the test split also validation positives.
pub fn excluded_mask(ds: &InteractionDataset, user: UserId, split: Split) -> Vec<bool> {
    let mut mask = vec![false; ds.num_items()];
    for &i in ds.train_items(user) {
        mask[i as usize] = true;
    }
    if split == Split::Test {
        for &i in ds.validation_items(user) {
            mask[i as usize] = true;
        }
    }
    mask
}

/// Evaluates an arbitrary scorer. `score_user` fills one score per item.
pub fn evaluate_scorer<F>(ds: &InteractionDataset, split: Split, k: usize, mut score_user: F) -> Result<MetricReport>
where
    F: FnMut(UserId, &mut [f64]),
{
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    let mut scores = vec![0.0; ds.num_items()];
    let (mut recall, mut ndcg, mut n) = (0.0, 0.0, 0usize);
    for u in 0..ds.num_users() as UserId {
        let relevant = ds.split_items(split, u);
        if relevant.is_empty() {
            continue;
        }
        score_user(u, &mut scores);
        let ranked = top_k(&scores, &excluded_mask(ds, u, split), k);
        recall += recall_at_k(&ranked, relevant, k);
        ndcg += ndcg_at_k(&ranked, relevant, k);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput(format!("{split:?} split is empty")));
    }
    Ok(MetricReport {
        recall_at_k: recall / n as f64,
        ndcg_at_k: ndcg / n as f64,
        k,
        users_evaluated: n,
    })
}

/// Evaluates propagated embeddings by raw inner product.
pub fn evaluate(
    user_out: &Array2<f64>,
    item_out: &Array2<f64>,
    ds: &InteractionDataset,
    split: Split,
    k: usize,
) -> Result<MetricReport> {
    evaluate_scorer(ds, split, k, |u, scores| {
        let row = user_out.row(u as usize);
        for (s, item) in scores.iter_mut().zip(item_out.rows()) {
            *s = item.dot(&row);
        }
    })
}
