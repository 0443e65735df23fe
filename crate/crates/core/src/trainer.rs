//! Mini-batch training loop: sample → propagate → score → weight → risk +
//! L2 → gradient step, with periodic validation and early stopping.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, Split, UserId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::model::{gather, logit_block, softplus_with_slope, PropagationGraph, ScorerModel};
use crate::risk::{
    bpr_grad, bpr_loss, l2_penalty_rows, pu_regression, ranking_ulsif, BatchLossInput, RiskConfig, RiskEval,
    RiskFamily, UserTerms,
};
use crate::sampler::{EpochSampler, MiniBatch};
use crate::weighting::{
    hard_sample_weights, popularity_column_weights, popularity_from_column, static_hard_weights, uniform_weights,
    ReferenceScorer, WeightMatrices, Weighting,
};

/// `π_u⁺ = |I_u⁺| / |I|` from train positives.
pub fn estimate_priors(ds: &InteractionDataset) -> Vec<f64> {
    let n = ds.num_items();
    ds.train()
        .iter()
        .map(|items| if n == 0 { 0.0 } else { items.len() as f64 / n as f64 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub batch_users: usize,
    /// Ranking cutoff for validation metrics.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 100,
            eval_every: 1,
            early_stop_patience: 10,
            seed: 0,
            batch_users: 256,
            k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.batch_users == 0 {
            return Err(Error::Config("batch_users must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradients with respect to the raw embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

/// One sampled `(user row, positive, negative)` triple of the pairwise baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BprTriple {
    pub row: usize,
    pub pos: ItemId,
    pub neg: ItemId,
}

/// Per-step quantities held constant while differentiating.
#[derive(Clone, Debug)]
pub enum Frozen {
    Weights(WeightMatrices),
    Bpr(Vec<BprTriple>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTerms {
    pub risk: f64,
    pub l2: f64,
    pub per_user: Vec<UserTerms>,
}

impl StepTerms {
    pub fn total(&self) -> f64 {
        self.risk + self.l2
    }
}

/// Output embeddings and the batch score block.
pub struct Forward {
    pub user_out: Array2<f64>,
    pub item_out: Array2<f64>,
    pub logits: Array2<f64>,
    pub scores: Array2<f64>,
    /// `∂r̂/∂logit = σ(logit)`.
    pub slopes: Array2<f64>,
}

pub fn forward(model: &ScorerModel, graph: &PropagationGraph, batch: &MiniBatch) -> Forward {
    let (user_out, item_out) = model.propagate(graph);
    let logits = logit_block(&user_out, &item_out, &batch.users, &batch.items);
    let mut scores = Array2::zeros(logits.raw_dim());
    let mut slopes = Array2::zeros(logits.raw_dim());
    ndarray::Zip::from(&mut scores)
        .and(&mut slopes)
        .and(&logits)
        .for_each(|s, d, &x| (*s, *d) = softplus_with_slope(x));
    Forward {
        user_out,
        item_out,
        logits,
        scores,
        slopes,
    }
}

/// One uniformly drawn unobserved item per train positive of every batch
/// user. Users holding every item contribute no triples.
pub fn sample_bpr_triples<R: Rng + ?Sized>(ds: &InteractionDataset, batch: &MiniBatch, rng: &mut R) -> Vec<BprTriple> {
    let n = ds.num_items() as ItemId;
    let mut out = Vec::new();
    for (row, &u) in batch.users.iter().enumerate() {
        let positives = ds.train_items(u);
        if positives.len() >= n as usize {
            continue;
        }
        for &pos in positives {
            let neg = loop {
                let j = rng.random_range(0..n);
                if positives.binary_search(&j).is_err() {
                    break j;
                }
            };
            out.push(BprTriple { row, pos, neg });
        }
    }
    out
}

fn scatter_add(target: &mut Array2<f64>, ids: &[u32], rows: &Array2<f64>) {
    let dim = target.ncols();
    let rows = rows.as_standard_layout();
    let src = rows.as_slice().expect("standard layout");
    let dst = target.as_slice_mut().expect("owned tables are standard layout");
    for (&id, from) in ids.iter().zip(src.chunks_exact(dim.max(1))) {
        let to = &mut dst[id as usize * dim..(id as usize + 1) * dim];
        for (t, f) in to.iter_mut().zip(from) {
            *t += f;
        }
    }
}

fn unique_items(batch_items: &[ItemId], extra: impl Iterator<Item = ItemId>) -> Vec<ItemId> {
    let mut all: Vec<ItemId> = batch_items.iter().copied().chain(extra).collect();
    all.sort_unstable();
    all.dedup();
    all
}

fn add_l2_grad(model: &ScorerModel, grads: &mut Gradients, users: &[UserId], items: &[ItemId], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for &u in users {
        grads
            .user
            .row_mut(u as usize)
            .scaled_add(lambda, &model.user_embed.row(u as usize));
    }
    for &i in items {
        grads
            .item
            .row_mut(i as usize)
            .scaled_add(lambda, &model.item_embed.row(i as usize));
    }
}

/// Evaluates the configured pairwise risk on a forward pass.
pub fn pairwise_risk(fwd: &Forward, batch: &MiniBatch, cfg: &RiskConfig, weights: &WeightMatrices) -> Result<RiskEval> {
    let input = BatchLossInput {
        scores: fwd.scores.view(),
        pos_mask: batch.pos_mask.view(),
        priors: &batch.priors,
        weights_pos: weights.pos.view(),
        weights_neg: weights.neg.view(),
        item_sampling_prob: Some(&batch.item_sampling_prob),
    };
    match cfg.family {
        RiskFamily::RankingUlsif => ranking_ulsif(&input, cfg),
        RiskFamily::PuRegression => pu_regression(&input, cfg),
        RiskFamily::Bpr => Err(Error::Config("bpr is not a pairwise-block risk".into())),
    }
}

/// Total objective (risk + batch-local L2) and its gradient with respect to
/// the raw tables, for a forward pass already computed on `model`.
pub fn loss_and_grad_from(
    model: &ScorerModel,
    graph: &PropagationGraph,
    batch: &MiniBatch,
    cfg: &RiskConfig,
    fwd: &Forward,
    frozen: &Frozen,
) -> Result<(StepTerms, Gradients)> {
    let mut grad_uo = Array2::<f64>::zeros(fwd.user_out.raw_dim());
    let mut grad_io = Array2::<f64>::zeros(fwd.item_out.raw_dim());
    let (risk, per_user, reg_items) = match frozen {
        Frozen::Weights(w) => {
            let eval = pairwise_risk(fwd, batch, cfg, w)?;
            let g = &eval.grad_scores * &fwd.slopes;
            let ub = gather(&fwd.user_out, &batch.users);
            let ib = gather(&fwd.item_out, &batch.items);
            scatter_add(&mut grad_uo, &batch.users, &g.dot(&ib));
            scatter_add(&mut grad_io, &batch.items, &g.t().dot(&ub));
            (eval.loss, eval.per_user, batch.items.clone())
        }
        Frozen::Bpr(triples) => {
            let mut pos = Vec::with_capacity(triples.len());
            let mut neg = Vec::with_capacity(triples.len());
            for t in triples {
                let u = fwd.user_out.row(batch.users[t.row] as usize);
                pos.push(u.dot(&fwd.item_out.row(t.pos as usize)));
                neg.push(u.dot(&fwd.item_out.row(t.neg as usize)));
            }
            let loss = bpr_loss(&pos, &neg);
            for (t, g) in triples.iter().zip(bpr_grad(&pos, &neg)) {
                let user = batch.users[t.row] as usize;
                let diff = &fwd.item_out.row(t.pos as usize) - &fwd.item_out.row(t.neg as usize);
                grad_uo.row_mut(user).scaled_add(g, &diff);
                let u = fwd.user_out.row(user);
                grad_io.row_mut(t.pos as usize).scaled_add(g, &u);
                grad_io.row_mut(t.neg as usize).scaled_add(-g, &u);
            }
            let items = unique_items(&batch.items, triples.iter().map(|t| t.neg));
            (loss, Vec::new(), items)
        }
    };
    let (user, item) = model.backpropagate(graph, grad_uo, grad_io);
    let mut grads = Gradients { user, item };
    add_l2_grad(model, &mut grads, &batch.users, &reg_items, cfg.lambda);
    let l2 = l2_penalty_rows(model, &batch.users, &reg_items, cfg.lambda);
    Ok((StepTerms { risk, l2, per_user }, grads))
}

/// Convenience wrapper running the forward pass first.
pub fn loss_and_grad(
    model: &ScorerModel,
    graph: &PropagationGraph,
    batch: &MiniBatch,
    cfg: &RiskConfig,
    frozen: &Frozen,
) -> Result<(StepTerms, Gradients)> {
    let fwd = forward(model, graph, batch);
    loss_and_grad_from(model, graph, batch, cfg, &fwd, frozen)
}

/// Source of per-step weights for the configured strategy.
#[derive(Clone, Debug)]
pub struct WeightSource {
    strategy: Weighting,
    popularity: Option<Vec<f64>>,
    reference: Option<ReferenceScorer>,
}

impl WeightSource {
    pub fn new(ds: &InteractionDataset, cfg: &RiskConfig, reference: Option<ReferenceScorer>) -> Result<Self> {
        let popularity = match cfg.weighting {
            Weighting::Popularity => Some(popularity_column_weights(ds, cfg.c0, cfg.alpha)?),
            _ => None,
        };
        if cfg.weighting == Weighting::HardStatic && reference.is_none() {
            return Err(Error::MissingReference);
        }
        Ok(WeightSource {
            strategy: cfg.weighting,
            popularity,
            reference,
        })
    }

    pub fn weights(&self, batch: &MiniBatch, scores: &Array2<f64>) -> Result<WeightMatrices> {
        let (rows, cols) = batch.shape();
        match self.strategy {
            Weighting::Uniform => Ok(uniform_weights(rows, cols)),
            Weighting::Popularity => Ok(popularity_from_column(
                self.popularity.as_deref().expect("built for popularity"),
                rows,
                &batch.items,
            )),
            Weighting::HardAdaptive => hard_sample_weights(scores.view()),
            Weighting::HardStatic => static_hard_weights(self.reference.as_ref(), &batch.users, &batch.items),
        }
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    moments: Option<[Array2<f64>; 4]>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, model: &ScorerModel) -> Self {
        let moments = (kind == OptimizerKind::Adam).then(|| {
            let u = Array2::zeros(model.user_embed.raw_dim());
            let i = Array2::zeros(model.item_embed.raw_dim());
            [u.clone(), u, i.clone(), i]
        });
        Optimizer {
            kind,
            lr,
            t: 0,
            moments,
        }
    }

    fn apply(&mut self, model: &mut ScorerModel, grads: &Gradients) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                model.user_embed.scaled_add(-self.lr, &grads.user);
                model.item_embed.scaled_add(-self.lr, &grads.item);
            }
            OptimizerKind::Adam => {
                let [mu, vu, mi, vi] = self.moments.as_mut().expect("adam moments");
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                let step = |param: &mut Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>| {
                    ndarray::Zip::from(param).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                        *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                    });
                };
                step(&mut model.user_embed, mu, vu, &grads.user);
                step(&mut model.item_embed, mi, vi, &grads.item);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub terms: StepTerms,
}

/// One validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub seconds: f64,
    pub train_loss: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub k: usize,
    pub records: Vec<LogRecord>,
    /// Epoch of the returned checkpoint.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,iteration,seconds,train_loss,recall,ndcg")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                r.iteration,
                r.seconds,
                r.train_loss,
                opt(r.val_recall),
                opt(r.val_ndcg)
            )?;
        }
        Ok(())
    }
}

/// Stateful trainer; [`train`] drives it to completion.
pub struct Trainer<'a> {
    ds: &'a InteractionDataset,
    graph: PropagationGraph,
    model: ScorerModel,
    risk: RiskConfig,
    cfg: TrainConfig,
    sampler: EpochSampler,
    weights: WeightSource,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    iteration: u64,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ds: &'a InteractionDataset,
        model: ScorerModel,
        risk: RiskConfig,
        cfg: TrainConfig,
        reference: Option<&ScorerModel>,
    ) -> Result<Self> {
        risk.validate()?;
        cfg.validate()?;
        if ds.train_interactions() == 0 {
            return Err(Error::InvalidInput("dataset has no train interactions".into()));
        }
        if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
            return Err(Error::InvalidInput(format!(
                "model is {}x{} but dataset is {}x{}",
                model.num_users(),
                model.num_items(),
                ds.num_users(),
                ds.num_items()
            )));
        }
        let graph = PropagationGraph::from_dataset(ds);
        let eligible = ds.eligible_users().len();
        let sampler = EpochSampler::new(ds, cfg.batch_users.min(eligible))?;
        let reference = match (risk.weighting, reference) {
            (Weighting::HardStatic, Some(m)) => Some(ReferenceScorer::new(m, &graph)),
            _ => None,
        };
        let weights = WeightSource::new(ds, &risk, reference)?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
        Ok(Trainer {
            ds,
            graph,
            model,
            risk,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            sampler,
            weights,
            optimizer,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &ScorerModel {
        &self.model
    }

    pub fn into_model(self) -> ScorerModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &PropagationGraph {
        &self.graph
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    /// Determines the frozen per-step quantities for `batch`.
    pub fn freeze(&mut self, batch: &MiniBatch, fwd: &Forward) -> Result<Frozen> {
        if self.risk.family == RiskFamily::Bpr {
            Ok(Frozen::Bpr(sample_bpr_triples(self.ds, batch, &mut self.rng)))
        } else {
            Ok(Frozen::Weights(self.weights.weights(batch, &fwd.scores)?))
        }
    }

    /// One gradient step on `batch`.
    pub fn step(&mut self, batch: &MiniBatch) -> Result<StepReport> {
        let fwd = forward(&self.model, &self.graph, batch);
        let frozen = self.freeze(batch, &fwd)?;
        let (terms, grads) = loss_and_grad_from(&self.model, &self.graph, batch, &self.risk, &fwd, &frozen)?;
        self.iteration += 1;
        let grads_finite = grads.user.iter().chain(grads.item.iter()).all(|g| g.is_finite());
        if !terms.total().is_finite() || !grads_finite {
            let worst = terms
                .per_user
                .iter()
                .find(|t| !t.total.is_finite())
                .map(|t| format!("{t:?}"))
                .unwrap_or_default();
            return Err(Error::NonFinite {
                step: self.iteration,
                detail: format!("risk={} l2={} finite_grad={grads_finite} {worst}", terms.risk, terms.l2),
            });
        }
        self.optimizer.apply(&mut self.model, &grads);
        Ok(StepReport {
            iteration: self.iteration,
            terms,
        })
    }

    /// Runs one epoch and returns the mean total loss over its steps.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let batches = self.sampler.epoch(self.ds, &mut self.rng);
        let mut total = 0.0;
        for batch in &batches {
            total += self.step(batch)?.terms.total();
        }
        self.epoch += 1;
        Ok(total / batches.len().max(1) as f64)
    }

    pub fn evaluate(&self, split: Split, k: usize) -> Result<MetricReport> {
        let (u, i) = self.model.propagate(&self.graph);
        evaluate(&u, &i, self.ds, split, k)
    }
}

/// Trains until the epoch budget is spent or validation nDCG@K stops
/// improving for `early_stop_patience` evaluations. Returns the
/// best-validation model (the final one when there is no validation split).
pub fn train(
    ds: &InteractionDataset,
    model: ScorerModel,
    risk: &RiskConfig,
    cfg: &TrainConfig,
) -> Result<(ScorerModel, TrainLog)> {
    train_with_reference(ds, model, risk, cfg, None)
}

pub fn train_with_reference(
    ds: &InteractionDataset,
    model: ScorerModel,
    risk: &RiskConfig,
    cfg: &TrainConfig,
    reference: Option<&ScorerModel>,
) -> Result<(ScorerModel, TrainLog)> {
    train_full(ds, model, risk, cfg, reference).map(|o| (o.best, o.log))
}

/// Best-validation and last-epoch models plus the log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ScorerModel,
    pub last: ScorerModel,
    pub log: TrainLog,
}

pub fn train_full(
    ds: &InteractionDataset,
    model: ScorerModel,
    risk: &RiskConfig,
    cfg: &TrainConfig,
    reference: Option<&ScorerModel>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, model, risk.clone(), cfg.clone(), reference)?;
    let validate = cfg.eval_every > 0 && ds.has_split(Split::Validation);
    let start = Instant::now();
    let mut log = TrainLog {
        k: cfg.k,
        ..TrainLog::default()
    };
    let mut best: Option<(f64, ScorerModel)> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let epoch_loss = trainer.run_epoch()?;
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        if !due && epoch != cfg.epochs {
            continue;
        }
        let report = if validate {
            Some(trainer.evaluate(Split::Validation, cfg.k)?)
        } else {
            None
        };
        log.records.push(LogRecord {
            epoch,
            iteration: trainer.iteration(),
            seconds: start.elapsed().as_secs_f64(),
            train_loss: epoch_loss,
            val_recall: report.as_ref().map(|r| r.recall_at_k),
            val_ndcg: report.as_ref().map(|r| r.ndcg_at_k),
        });
        log::debug!("epoch {epoch} loss {epoch_loss:.6} {report:?}");
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(b, _)| r.ndcg_at_k > *b) {
                best = Some((r.ndcg_at_k, trainer.model().clone()));
                log.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    let last = trainer.into_model();
    let best = match best {
        Some((_, m)) => m,
        None => {
            log.best_epoch = log.records.last().map(|r| r.epoch);
            last.clone()
        }
    };
    Ok(TrainOutcome { best, last, log })
}
