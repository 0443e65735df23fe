//! User-based mini-batches: draw users uniformly without replacement and
//! take the union of their train positives as the item block.

use libm::lgamma as ln_gamma;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    /// `U_B`, in draw order.
    pub users: Vec<UserId>,
    /// `I_B`, sorted ascending.
    pub items: Vec<ItemId>,
    pub pos_mask: Array2<bool>,
    /// π_u⁺ aligned with `users`.
    pub priors: Vec<f64>,
    /// `s(i)` aligned with `items`.
    pub item_sampling_prob: Vec<f64>,
}

impl MiniBatch {
    /// Assembles the batch for a fixed user block. `inclusion` holds `s(i)`
    /// for every item of the corpus.
    pub fn for_users(ds: &InteractionDataset, users: Vec<UserId>, inclusion: &[f64]) -> Self {
        let mut items: Vec<ItemId> = users.iter().flat_map(|&u| ds.train_items(u).iter().copied()).collect();
        items.sort_unstable();
        items.dedup();
        let mut pos_mask = Array2::from_elem((users.len(), items.len()), false);
        for (a, &u) in users.iter().enumerate() {
            for i in ds.train_items(u) {
                let b = items.binary_search(i).expect("positive is in the union");
                pos_mask[[a, b]] = true;
            }
        }
        let priors = users.iter().map(|&u| ds.user_prior()[u as usize]).collect();
        let item_sampling_prob = items.iter().map(|&i| inclusion[i as usize]).collect();
        MiniBatch {
            users,
            items,
            pos_mask,
            priors,
            item_sampling_prob,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.users.len(), self.items.len())
    }
}

/// `P(item appears in a batch)` when `batch` of `eligible` users are drawn
/// without replacement and `holders` of them have the item as a positive:
/// `1 − C(eligible − holders, batch) / C(eligible, batch)`, evaluated in
/// log space.
pub fn inclusion_prob(holders: usize, eligible: usize, batch: usize) -> f64 {
    if holders == 0 || batch == 0 {
        return 0.0;
    }
    let without = eligible.saturating_sub(holders);
    if without < batch {
        return 1.0;
    }
    let ln_choose =
        |n: usize, k: usize| ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    let ratio = (ln_choose(without, batch) - ln_choose(eligible, batch)).exp();
    (1.0 - ratio).clamp(0.0, 1.0)
}

/// `s(i)` for one item given the number of users per batch.
pub fn item_inclusion_prob(ds: &InteractionDataset, item: ItemId, batch_users: usize) -> f64 {
    let eligible = ds.eligible_users().len();
    let holders = ds.item_popularity()[item as usize] as usize;
    inclusion_prob(holders, eligible, batch_users.min(eligible))
}

/// `s(i)` for every item of the corpus.
pub fn inclusion_table(ds: &InteractionDataset, batch_users: usize) -> Vec<f64> {
    let eligible = ds.eligible_users().len();
    let batch = batch_users.min(eligible);
    let mut cache = std::collections::HashMap::new();
    ds.item_popularity()
        .iter()
        .map(|&p| {
            *cache
                .entry(p)
                .or_insert_with(|| inclusion_prob(p as usize, eligible, batch))
        })
        .collect()
}

fn check_batch_size(batch_users: usize, eligible: usize) -> Result<()> {
    if batch_users == 0 || batch_users > eligible {
        return Err(Error::InvalidInput(format!(
            "batch_users must lie in 1..={eligible}, got {batch_users}"
        )));
    }
    Ok(())
}

/// One batch of `batch_users` users drawn uniformly without replacement
/// from the users that have train positives.
pub fn sample_batch<R: Rng + ?Sized>(ds: &InteractionDataset, batch_users: usize, rng: &mut R) -> Result<MiniBatch> {
    let eligible = ds.eligible_users();
    check_batch_size(batch_users, eligible.len())?;
    let picked = rand::seq::index::sample(rng, eligible.len(), batch_users);
    let users = picked.iter().map(|k| eligible[k]).collect();
    let table = inclusion_table(ds, batch_users);
    Ok(MiniBatch::for_users(ds, users, &table))
}

/// Epoch schedule: a fresh shuffle of the eligible users each epoch, cut
/// into consecutive blocks, so every user is visited once per epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    eligible: Vec<UserId>,
    batch_users: usize,
    inclusion: Vec<f64>,
    order: Vec<UserId>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(ds: &InteractionDataset, batch_users: usize) -> Result<Self> {
        let eligible = ds.eligible_users();
        check_batch_size(batch_users, eligible.len())?;
        Ok(EpochSampler {
            inclusion: inclusion_table(ds, batch_users),
            order: Vec::new(),
            eligible,
            batch_users,
            cursor: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.eligible.len().div_ceil(self.batch_users)
    }

    pub fn inclusion(&self) -> &[f64] {
        &self.inclusion
    }

    /// All batches of one epoch, in order.
    pub fn epoch<R: Rng + ?Sized>(&mut self, ds: &InteractionDataset, rng: &mut R) -> Vec<MiniBatch> {
        self.order.clone_from(&self.eligible);
        self.order.shuffle(rng);
        self.cursor = 0;
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        while self.cursor < self.order.len() {
            let end = (self.cursor + self.batch_users).min(self.order.len());
            let users = self.order[self.cursor..end].to_vec();
            self.cursor = end;
            out.push(MiniBatch::for_users(ds, users, &self.inclusion));
        }
        out
    }
}
