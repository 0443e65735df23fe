//! Synthetic implicit-feedback corpora with a known ground-truth density
//! ratio.
//!
//! Each user has a preference distribution `p(i|u, y=+1) = softmax_i(ℓ_ui)`
//! over low-rank logits `ℓ_ui = scale·⟨a_u, b_i⟩ + c_i`, where `c_i` is an
//! item popularity offset. Positives are drawn per user without replacement
//! proportionally to `p(i|u, y=+1)` (Gumbel top-k). With a uniform item
//! marginal `p(i|u) = 1/|I|`, the true ratio is `|I|·p(i|u, y=+1)`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_adjacency_lists, InteractionDataset, ItemId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Positives drawn per user (upper end when `min_positives` is set).
    pub positives: usize,
    /// When set, each user draws uniformly between this and `positives`.
    pub min_positives: Option<usize>,
    /// Multiplier on the low-rank part of the logits.
    pub logit_scale: f64,
    /// Standard deviation of the per-item popularity offset.
    pub popularity_std: f64,
    /// Fraction of each user's positives moved to the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 100,
            latent_dim: 4,
            positives: 40,
            min_positives: None,
            logit_scale: 2.0,
            popularity_std: 0.0,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Desk-scale benchmark: a sparse corpus (about 1% density) with
    /// popularity-skewed items, users of varying activity and a held-out
    /// test split.
    pub fn benchmark(seed: u64) -> Self {
        SynthConfig {
            users: 1000,
            items: 2000,
            latent_dim: 8,
            positives: 40,
            min_positives: Some(10),
            logit_scale: 2.0,
            popularity_std: 1.0,
            test_fraction: 0.2,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: InteractionDataset,
    /// `p(i|u, y=+1)`, rows sum to one.
    pub preference: Array2<f64>,
}

impl SyntheticCorpus {
    /// `r(i|u) = p(i|u, y=+1) / p(i|u)` with uniform `p(i|u)`.
    pub fn true_ratio(&self) -> Array2<f64> {
        let n = self.preference.ncols() as f64;
        self.preference.mapv(|p| p * n)
    }

    /// Writes `train.txt`, `test.txt` and `ratio.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_adjacency_lists(&dir.join("train.txt"), self.dataset.train())?;
        let test: Vec<Vec<ItemId>> = (0..self.dataset.num_users() as u32)
            .map(|u| self.dataset.test_items(u).to_vec())
            .collect();
        write_adjacency_lists(&dir.join("test.txt"), &test)?;

        let path = dir.join("ratio.tsv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let ratio = self.true_ratio();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "user\titem\tp_pos\tratio")?;
            for ((u, i), p) in self.preference.indexed_iter() {
                writeln!(w, "{u}\t{i}\t{p}\t{}", ratio[[u, i]])?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&path, e))
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.positives > cfg.items {
        return Err(Error::Config(format!(
            "cannot draw {} positives from {} items",
            cfg.positives, cfg.items
        )));
    }
    if cfg.min_positives.is_some_and(|m| m > cfg.positives) {
        return Err(Error::Config("min_positives exceeds positives".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    if cfg.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let users = Array2::from_shape_simple_fn((cfg.users, k), &mut normal);
    let items = Array2::from_shape_simple_fn((cfg.items, k), &mut normal);
    let pop = Normal::new(0.0, cfg.popularity_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let offsets: Vec<f64> = (0..cfg.items).map(|_| pop.sample(&mut rng)).collect();

    let mut logits = users.dot(&items.t()) * (cfg.logit_scale * scale);
    for mut row in logits.rows_mut() {
        for (v, c) in row.iter_mut().zip(&offsets) {
            *v += c;
        }
    }
    let preference = softmax_rows(&logits);

    let mut train = Vec::with_capacity(cfg.users);
    let mut test = Vec::with_capacity(cfg.users);
    for row in logits.rows() {
        let n = match cfg.min_positives {
            Some(lo) => rng.random_range(lo..=cfg.positives),
            None => cfg.positives,
        };
        let mut keyed: Vec<(f64, ItemId)> = row
            .iter()
            .enumerate()
            .map(|(i, &l)| (l + gumbel(&mut rng), i as ItemId))
            .collect();
        keyed.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut drawn: Vec<ItemId> = keyed.iter().take(n).map(|&(_, i)| i).collect();
        drawn.shuffle(&mut rng);
        let n_test = (cfg.test_fraction * n as f64).floor() as usize;
        let n_test = if n > 1 { n_test.min(n - 1) } else { 0 };
        test.push(drawn.split_off(n - n_test));
        train.push(drawn);
    }
    let dataset = InteractionDataset::from_splits(cfg.users, cfg.items, train, Vec::new(), test)?;
    Ok(SyntheticCorpus { dataset, preference })
}
