//! Embedding scorers producing non-negative density-ratio estimates
//! `r̂(i|u) = softplus(⟨e_u, e_i⟩)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Raw embedding tables.
    Mf,
    /// Light graph convolution: symmetric-normalised neighbour sums
    /// averaged over layers `0..=num_layers`.
    Lightgc,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Backbone::Mf),
            "lightgc" | "lightgcn" => Ok(Backbone::Lightgc),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Mf => "mf",
            Backbone::Lightgc => "lightgc",
        })
    }
}

/// Backbone shape and initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub dim: usize,
    pub num_layers: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Lightgc,
            dim: DEFAULT_DIM,
            num_layers: DEFAULT_LAYERS,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, num_users: usize, num_items: usize, seed: u64) -> Result<ScorerModel> {
        ScorerModel::init(
            self.backbone,
            num_users,
            num_items,
            self.dim,
            self.num_layers,
            self.init_std,
            seed,
        )
    }
}

/// `(softplus(x), sigmoid(x))` sharing one exponential.
#[inline]
pub fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// User and item embedding tables plus the backbone that turns them into
/// output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerModel {
    pub backbone: Backbone,
    pub num_layers: usize,
    pub user_embed: Array2<f64>,
    pub item_embed: Array2<f64>,
}

impl ScorerModel {
    /// Tables drawn i.i.d. from `N(0, init_std²)` with a seeded generator,
    /// users first, row-major.
    pub fn init(
        backbone: Backbone,
        num_users: usize,
        num_items: usize,
        dim: usize,
        num_layers: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let normal =
            Normal::new(0.0, init_std).map_err(|e| Error::Config(format!("invalid init_std {init_std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_embed = Array2::from_shape_simple_fn((num_users, dim), || normal.sample(&mut rng));
        let item_embed = Array2::from_shape_simple_fn((num_items, dim), || normal.sample(&mut rng));
        Ok(ScorerModel {
            backbone,
            num_layers,
            user_embed,
            item_embed,
        })
    }

    pub fn dim(&self) -> usize {
        self.user_embed.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.user_embed.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_embed.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.user_embed
            .iter()
            .chain(self.item_embed.iter())
            .all(|v| v.is_finite())
    }

    /// Output embeddings. For `mf` these are copies of the raw tables.
    pub fn propagate(&self, graph: &PropagationGraph) -> (Array2<f64>, Array2<f64>) {
        match self.backbone {
            Backbone::Mf => (self.user_embed.clone(), self.item_embed.clone()),
            Backbone::Lightgc => graph.layer_mean(&self.user_embed, &self.item_embed, self.num_layers),
        }
    }

    /// Maps gradients with respect to output embeddings back onto the raw
    /// tables. The propagation operator is symmetric, so this is the same
    /// layer-mean applied to the gradients.
    pub fn backpropagate(
        &self,
        graph: &PropagationGraph,
        grad_user_out: Array2<f64>,
        grad_item_out: Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        match self.backbone {
            Backbone::Mf => (grad_user_out, grad_item_out),
            Backbone::Lightgc => graph.layer_mean(&grad_user_out, &grad_item_out, self.num_layers),
        }
    }
}

/// Bipartite train graph with edge weights `1/sqrt(deg(u)·deg(i))`.
#[derive(Clone, Debug)]
pub struct PropagationGraph {
    num_users: usize,
    num_items: usize,
    user_adj: Vec<Vec<(ItemId, f64)>>,
    item_adj: Vec<Vec<(UserId, f64)>>,
}

impl PropagationGraph {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        Self::from_lists(ds.num_users(), ds.num_items(), ds.train())
    }

    pub fn from_lists(num_users: usize, num_items: usize, lists: &[Vec<ItemId>]) -> Self {
        let mut item_deg = vec![0usize; num_items];
        for items in lists {
            for &i in items {
                item_deg[i as usize] += 1;
            }
        }
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for (u, items) in lists.iter().enumerate() {
            let du = items.len() as f64;
            for &i in items {
                let w = 1.0 / (du * item_deg[i as usize] as f64).sqrt();
                user_adj[u].push((i, w));
                item_adj[i as usize].push((u as UserId, w));
            }
        }
        PropagationGraph {
            num_users,
            num_items,
            user_adj,
            item_adj,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (UserId, ItemId, f64)> + '_ {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.iter().map(move |&(i, w)| (u as UserId, i, w)))
    }

    /// One hop: users gather from items and items gather from users.
    fn hop(&self, users: &Array2<f64>, items: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let dim = users.ncols();
        let next_u = spmm(&self.user_adj, &items.view(), self.num_users, dim);
        let next_i = spmm(&self.item_adj, &users.view(), self.num_items, dim);
        (next_u, next_i)
    }

    /// Mean of layers `0..=num_layers`, layer 0 being the inputs.
    pub fn layer_mean(
        &self,
        users: &Array2<f64>,
        items: &Array2<f64>,
        num_layers: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(users.nrows(), self.num_users, "user table / graph mismatch");
        assert_eq!(items.nrows(), self.num_items, "item table / graph mismatch");
        let mut sum_u = users.clone();
        let mut sum_i = items.clone();
        let mut cur = (users.clone(), items.clone());
        for _ in 0..num_layers {
            cur = self.hop(&cur.0, &cur.1);
            sum_u += &cur.0;
            sum_i += &cur.1;
        }
        let scale = 1.0 / (num_layers as f64 + 1.0);
        sum_u *= scale;
        sum_i *= scale;
        (sum_u, sum_i)
    }
}

/// `out[r] = Σ w · src[c]` over the adjacency list of row `r`.
fn spmm(adj: &[Vec<(u32, f64)>], src: &ArrayView2<'_, f64>, rows: usize, dim: usize) -> Array2<f64> {
    let src = src.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; rows * dim];
    for (row, list) in out.chunks_exact_mut(dim.max(1)).zip(adj) {
        for &(c, w) in list {
            let from = &src[c as usize * dim..(c as usize + 1) * dim];
            for (o, x) in row.iter_mut().zip(from) {
                *o += w * x;
            }
        }
    }
    Array2::from_shape_vec((rows, dim), out).expect("shape matches")
}

/// Raw inner products `⟨user_out[users[a]], item_out[items[b]]⟩`.
pub fn logit_block(user_out: &Array2<f64>, item_out: &Array2<f64>, users: &[UserId], items: &[ItemId]) -> Array2<f64> {
    let ub = gather(user_out, users);
    let ib = gather(item_out, items);
    ub.dot(&ib.t())
}

/// `r̂` for every pair in `users × items`.
pub fn score_block(user_out: &Array2<f64>, item_out: &Array2<f64>, users: &[UserId], items: &[ItemId]) -> Array2<f64> {
    logit_block(user_out, item_out, users, items).mapv_into(softplus)
}

pub(crate) fn gather(table: &Array2<f64>, ids: &[u32]) -> Array2<f64> {
    let dim = table.ncols();
    let src = table.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        out.extend_from_slice(&src[i as usize * dim..(i as usize + 1) * dim]);
    }
    Array2::from_shape_vec((ids.len(), dim), out).expect("shape matches")
}

/// Top-`k` items of `scores` skipping `excluded[i] == true`; ties go to the
/// smaller id. Returns fewer than `k` items when not enough remain.
pub fn top_k(scores: &[f64], excluded: &[bool], k: usize) -> Vec<ItemId> {
    let mut candidates: Vec<ItemId> = (0..scores.len() as ItemId)
        .filter(|&i| !excluded.get(i as usize).copied().unwrap_or(false))
        .collect();
    let cmp = |a: &ItemId, b: &ItemId| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b));
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates
}

/// Ranks all items for one user by raw inner product (softplus is strictly
/// increasing, so the order is the same as under `r̂`).
pub fn rank_items(
    user_out: &Array2<f64>,
    item_out: &Array2<f64>,
    user: UserId,
    exclude: &[ItemId],
    k: usize,
) -> Vec<ItemId> {
    let scores = item_scores(item_out, user_out.row(user as usize));
    let mut excluded = vec![false; item_out.nrows()];
    for &i in exclude {
        if let Some(slot) = excluded.get_mut(i as usize) {
            *slot = true;
        }
    }
    top_k(scores.as_slice().expect("contiguous"), &excluded, k)
}

pub(crate) fn item_scores(item_out: &Array2<f64>, user_vec: ArrayView1<'_, f64>) -> ndarray::Array1<f64> {
    item_out.dot(&user_vec)
}
