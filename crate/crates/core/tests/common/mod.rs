#![allow(dead_code)]

use dre_rank::data::{InteractionDataset, ItemId};
use dre_rank::risk::{BatchLossInput, RiskConfig, RiskFamily};
use dre_rank::weighting::Weighting;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random train lists where every user holds between `lo` and `hi` items.
pub fn random_dataset(users: usize, items: usize, lo: usize, hi: usize, seed: u64) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lists: Vec<Vec<ItemId>> = (0..users)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            rand::seq::index::sample(&mut rng, items, n)
                .into_iter()
                .map(|i| i as ItemId)
                .collect()
        })
        .collect();
    InteractionDataset::from_splits(users, items, lists, Vec::new(), Vec::new()).unwrap()
}

pub fn random_block(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Term-by-term evaluation of the self-normalised ranking-uLSIF risk for
/// one user, written directly from the definitions.
pub struct OracleUser<'a> {
    pub r: &'a [f64],
    pub positive: &'a [bool],
    pub w_pos: &'a [f64],
    pub w_neg: &'a [f64],
    pub s: Option<&'a [f64]>,
    pub prior: f64,
}

pub fn oracle_user_loss(u: &OracleUser<'_>, nn: Option<f64>) -> f64 {
    let pos: Vec<usize> = (0..u.r.len()).filter(|&j| u.positive[j]).collect();
    let norm_p: f64 = pos.iter().map(|&j| u.w_pos[j]).sum();
    let norm_n: f64 = pos.iter().map(|&j| u.w_neg[j]).sum();
    let r1 = u.prior
        * pos
            .iter()
            .map(|&j| u.w_pos[j] / norm_p * u.r[j].powi(2) / 2.0)
            .sum::<f64>();
    let r2 = u.prior
        * pos
            .iter()
            .map(|&j| u.w_neg[j] / norm_n * u.r[j].powi(2) / 2.0)
            .sum::<f64>();
    let r3 = pos.iter().map(|&j| u.w_pos[j] / norm_p * u.r[j]).sum::<f64>();
    let v: Vec<f64> = (0..u.r.len())
        .map(|j| match u.s {
            Some(s) => u.w_neg[j] / s[j],
            None => u.w_neg[j],
        })
        .collect();
    let norm_v: f64 = v.iter().sum();
    let rpm = (0..u.r.len())
        .map(|j| v[j] / norm_v * u.r[j].powi(2) / 2.0)
        .sum::<f64>();
    match nn {
        None => r1 - r2 - r3 + rpm,
        Some(d_bar) => {
            let cor = pos
                .iter()
                .map(|&j| u.w_pos[j] / norm_p * u.r[j].powi(2) / 2.0)
                .sum::<f64>()
                / d_bar;
            r1 - r2 - r3 + cor + (rpm - cor).max(0.0)
        }
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut out = vec![0.0; x.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut m = k;
            while m + 1 < idx.len() && x[idx[m + 1]] == x[idx[k]] {
                m += 1;
            }
            let avg = (k + m) as f64 / 2.0;
            for &i in &idx[k..=m] {
                out[i] = avg;
            }
            k = m + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn ulsif_cfg(is: bool, nn: bool) -> RiskConfig {
    RiskConfig {
        family: RiskFamily::RankingUlsif,
        weighting: Weighting::Uniform,
        is_correction: is,
        nn_correction: nn,
        d_bar: 3.0,
        lambda: 0.0,
        ..RiskConfig::default()
    }
}

pub struct Fixture {
    pub scores: Array2<f64>,
    pub mask: Array2<bool>,
    pub priors: Vec<f64>,
    pub wp: Array2<f64>,
    pub wn: Array2<f64>,
    pub s: Vec<f64>,
}

impl Fixture {
    pub fn input(&self) -> BatchLossInput<'_> {
        BatchLossInput {
            scores: self.scores.view(),
            pos_mask: self.mask.view(),
            priors: &self.priors,
            weights_pos: self.wp.view(),
            weights_neg: self.wn.view(),
            item_sampling_prob: Some(&self.s),
        }
    }

    pub fn oracle(&self, is: bool, nn: Option<f64>) -> f64 {
        let rows = self.scores.nrows();
        let total: f64 = (0..rows)
            .map(|a| {
                let r = self.scores.row(a).to_vec();
                let p = self.mask.row(a).to_vec();
                let wp = self.wp.row(a).to_vec();
                let wn = self.wn.row(a).to_vec();
                oracle_user_loss(
                    &OracleUser {
                        r: &r,
                        positive: &p,
                        w_pos: &wp,
                        w_neg: &wn,
                        s: is.then_some(self.s.as_slice()),
                        prior: self.priors[a],
                    },
                    nn,
                )
            })
            .sum();
        total / rows as f64
    }
}

/// Three users over four items: a fixed mask exercising shared, private and
/// unlabelled columns, with scores and weights drawn from `seed`.
pub fn exhaustive(seed: u64, score_hi: f64) -> Fixture {
    Fixture {
        scores: random_block(3, 4, 0.05, score_hi, seed),
        mask: array![
            [true, false, true, false],
            [false, true, true, false],
            [true, true, false, true]
        ],
        priors: vec![0.5, 0.5, 0.75],
        wp: random_block(3, 4, 0.2, 2.0, seed + 100),
        wn: random_block(3, 4, 0.2, 2.0, seed + 200),
        s: vec![0.9, 0.4, 1.0, 0.25],
    }
}

/// Analytic gradients against central finite differences, weights and BPR
/// negatives held fixed.
pub mod gradients {
    use dre_rank::data::InteractionDataset;
    use dre_rank::model::{Backbone, PropagationGraph, ScorerModel};
    use dre_rank::risk::{RiskConfig, RiskFamily};
    use dre_rank::sampler::{inclusion_table, MiniBatch};
    use dre_rank::trainer::{forward, loss_and_grad, sample_bpr_triples, Frozen, WeightSource};
    use dre_rank::weighting::{ReferenceScorer, Weighting};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-6;

    pub struct Setup {
        ds: InteractionDataset,
        graph: PropagationGraph,
        batch: MiniBatch,
    }

    pub fn setup() -> Setup {
        let ds = super::random_dataset(5, 8, 2, 4, 11);
        let graph = PropagationGraph::from_dataset(&ds);
        // s(i) for a 3-of-5 sampler so the IS path sees probabilities below one.
        let batch = MiniBatch::for_users(&ds, vec![0, 1, 2, 3, 4], &inclusion_table(&ds, 3));
        Setup { ds, graph, batch }
    }

    pub fn model(backbone: Backbone, seed: u64) -> ScorerModel {
        ScorerModel::init(backbone, 5, 8, 4, 3, 0.5, seed).unwrap()
    }

    fn objective(m: &ScorerModel, s: &Setup, cfg: &RiskConfig, frozen: &Frozen) -> f64 {
        loss_and_grad(m, &s.graph, &s.batch, cfg, frozen).unwrap().0.total()
    }

    fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff: f64 = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    pub fn check(cfg: &RiskConfig, backbone: Backbone, seed: u64) -> f64 {
        let s = setup();
        let m = model(backbone, seed);
        let frozen = match cfg.family {
            RiskFamily::Bpr => Frozen::Bpr(sample_bpr_triples(
                &s.ds,
                &s.batch,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )),
            _ => {
                let reference = ReferenceScorer::new(&model(backbone, seed + 99), &s.graph);
                let source = WeightSource::new(&s.ds, cfg, Some(reference)).unwrap();
                let fwd = forward(&m, &s.graph, &s.batch);
                Frozen::Weights(source.weights(&s.batch, &fwd.scores).unwrap())
            }
        };
        let (terms, grads) = loss_and_grad(&m, &s.graph, &s.batch, cfg, &frozen).unwrap();
        if cfg.family == RiskFamily::RankingUlsif && cfg.nn_correction {
            let active = terms
                .per_user
                .iter()
                .filter(|t| t.unlabelled > t.correction.unwrap())
                .count();
            let expected = if cfg.d_bar < 1.0 { 0 } else { terms.per_user.len() };
            assert_eq!(active, expected, "clamp branch for d_bar {}", cfg.d_bar);
        }

        let mut fd_user = Array2::zeros(m.user_embed.raw_dim());
        let mut fd_item = Array2::zeros(m.item_embed.raw_dim());
        for (table, out) in [(0, &mut fd_user), (1, &mut fd_item)] {
            let shape = out.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    if table == 0 {
                        plus.user_embed[[r, c]] += H;
                        minus.user_embed[[r, c]] -= H;
                    } else {
                        plus.item_embed[[r, c]] += H;
                        minus.item_embed[[r, c]] -= H;
                    }
                    out[[r, c]] =
                        (objective(&plus, &s, cfg, &frozen) - objective(&minus, &s, cfg, &frozen)) / (2.0 * H);
                }
            }
        }
        relative_error(&grads.user, &fd_user).max(relative_error(&grads.item, &fd_item))
    }

    pub fn risk(family: RiskFamily, weighting: Weighting, is: bool, nn: bool, d_bar: f64) -> RiskConfig {
        RiskConfig {
            family,
            weighting,
            is_correction: is,
            nn_correction: nn,
            d_bar,
            lambda: 0.03,
            ..RiskConfig::default()
        }
    }

    pub fn all_configs() -> Vec<(String, RiskConfig)> {
        let mut out = Vec::new();
        for w in [
            Weighting::Uniform,
            Weighting::Popularity,
            Weighting::HardAdaptive,
            Weighting::HardStatic,
        ] {
            for (is, nn) in [(false, false), (true, false), (false, true), (true, true)] {
                // d_bar = 0.2 keeps the clamp inactive, 50 keeps it active.
                for d_bar in [0.2, 50.0] {
                    if !nn && d_bar != 50.0 {
                        continue;
                    }
                    out.push((
                        format!("ulsif/{w}/is={is}/nn={nn}/dbar={d_bar}"),
                        risk(RiskFamily::RankingUlsif, w, is, nn, d_bar),
                    ));
                }
            }
            out.push((format!("pu/{w}"), risk(RiskFamily::PuRegression, w, false, false, 50.0)));
        }
        out.push((
            "bpr".into(),
            risk(RiskFamily::Bpr, Weighting::Uniform, false, false, 50.0),
        ));
        out
    }
}
