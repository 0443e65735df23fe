//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criterion 11 needs the full Gowalla corpus. It runs only when
//! `DRE_RANK_GOWALLA` names the dataset directory and the target is invoked
//! with `--ignored` or `--include-ignored`.

mod common;

use std::time::{Duration, Instant};

use common::gradients::{all_configs, check};
use common::{exhaustive, random_block, spearman, ulsif_cfg};
use dre_rank::curves::iterations_to_fraction;
use dre_rank::data::{load_dataset, InputFormat, InteractionDataset, ItemId, Split};
use dre_rank::eval::evaluate;
use dre_rank::model::{softplus, Backbone, ModelConfig, PropagationGraph, ScorerModel};
use dre_rank::risk::{bregman_div, ranking_ulsif_loss, RiskConfig, RiskFamily, Ulsif};
use dre_rank::sampler::{inclusion_table, item_inclusion_prob, sample_batch, MiniBatch};
use dre_rank::synth::{generate, SynthConfig};
use dre_rank::trainer::{train_full, OptimizerKind, TrainConfig, TrainLog, Trainer};
use dre_rank::weighting::Weighting;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_bregman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut sign_ok = true;
    for _ in 0..10_000 {
        let t: f64 = rng.random_range(0.0..100.0);
        let th: f64 = rng.random_range(0.0..100.0);
        let got = bregman_div(&Ulsif, t, th).unwrap();
        let want = (t - th).powi(2) / 2.0;
        sign_ok &= got > 0.0 || t == th;
        worst = worst.max(((got - want) / want).abs());
    }
    let diagonal = (0..100).all(|k| bregman_div(&Ulsif, k as f64 * 0.37, k as f64 * 0.37).unwrap() == 0.0);
    outcome(
        worst < 1e-12 && sign_ok && diagonal,
        format!("max relative error {worst:.2e} over 10^4 pairs, zero on diagonal: {diagonal}"),
    )
}

fn c2_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        for hi in [0.06, 3.0, 8.0] {
            let f = exhaustive(seed, hi);
            for (is, nn) in [(false, false), (true, false), (false, true), (true, true)] {
                let got = ranking_ulsif_loss(&f.input(), &ulsif_cfg(is, nn)).unwrap().0;
                let want = f.oracle(is, nn.then_some(3.0));
                worst = worst.max((got - want).abs());
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("max |loss - oracle| {worst:.2e} on 3x4 fixtures, all four configurations"),
    )
}

fn c3_gradients() -> Outcome {
    let mut worst = (0.0f64, String::new());
    for (backbone, seed) in [(Backbone::Lightgc, 3), (Backbone::Mf, 4)] {
        for (name, cfg) in all_configs() {
            let err = check(&cfg, backbone, seed);
            if err > worst.0 {
                worst = (err, format!("{backbone}/{name}"));
            }
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!("max relative error {:.2e} ({}) on 5x8, d=4", worst.0, worst.1),
    )
}

fn c4_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        for (is, nn) in [(false, false), (true, false), (false, true), (true, true)] {
            let f = exhaustive(seed, 3.0);
            let base = ranking_ulsif_loss(&f.input(), &ulsif_cfg(is, nn)).unwrap().0;
            let mut g = exhaustive(seed, 3.0);
            for a in 0..3 {
                let c1: f64 = rng.random_range(1e-3..1e3);
                let c2: f64 = rng.random_range(1e-3..1e3);
                g.wp.row_mut(a).mapv_inplace(|w| w * c1);
                g.wn.row_mut(a).mapv_inplace(|w| w * c2);
            }
            let scaled = ranking_ulsif_loss(&g.input(), &ulsif_cfg(is, nn)).unwrap().0;
            worst = worst.max((scaled - base).abs());
        }
    }
    // Extreme rescaling on larger scores.
    for seed in 0..10 {
        let mut f = exhaustive(seed, 3.0);
        f.scores = random_block(3, 4, 0.0, 50.0, seed + 7);
        let base = ranking_ulsif_loss(&f.input(), &ulsif_cfg(true, true)).unwrap().0;
        f.wp.mapv_inplace(|w| w * 1e6);
        f.wn.mapv_inplace(|w| w * 1e-6);
        let scaled = ranking_ulsif_loss(&f.input(), &ulsif_cfg(true, true)).unwrap().0;
        worst = worst.max((scaled - base).abs());
    }
    outcome(
        worst < 1e-12,
        format!("max |change| {worst:.2e} under per-user rescaling"),
    )
}

fn c5_sampling() -> Outcome {
    let ds = common::random_dataset(50, 30, 0, 6, 21);
    let b = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hits = vec![0usize; 30];
    let rounds = 10_000;
    for _ in 0..rounds {
        for &i in &sample_batch(&ds, b, &mut rng).unwrap().items {
            hits[i as usize] += 1;
        }
    }
    let worst = (0..30)
        .map(|i| (hits[i] as f64 / rounds as f64 - item_inclusion_prob(&ds, i as ItemId, b)).abs())
        .fold(0.0, f64::max);
    outcome(
        worst < 0.02,
        format!("max |empirical - s(i)| {worst:.4} over 10^4 batches of 10 users"),
    )
}

fn c6_recovery() -> Outcome {
    let corpus = generate(&SynthConfig {
        users: 200,
        items: 100,
        positives: 40,
        seed: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = &corpus.dataset;
    let truth = corpus.true_ratio();
    let model = ModelConfig {
        backbone: Backbone::Lightgc,
        dim: 4,
        num_layers: 2,
        init_std: 0.1,
    }
    .build(200, 100, 1)
    .unwrap();
    let risk = RiskConfig {
        family: RiskFamily::RankingUlsif,
        weighting: Weighting::Uniform,
        is_correction: false,
        nn_correction: false,
        lambda: 0.0,
        ..RiskConfig::default()
    };
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.01,
        epochs: 300,
        eval_every: 0,
        batch_users: 50,
        seed: 1,
        ..TrainConfig::default()
    };
    let trained = train_full(ds, model, &risk, &cfg, None).unwrap().last;
    let (u, i) = trained.propagate(&PropagationGraph::from_dataset(ds));
    let ratio_hat = u.dot(&i.t()).mapv(softplus);
    let rho = (0..200)
        .map(|a| spearman(&ratio_hat.row(a).to_vec(), &truth.row(a).to_vec()))
        .sum::<f64>()
        / 200.0;
    outcome(
        rho > 0.9,
        format!("mean per-user Spearman {rho:.4} (200 users, 100 items)"),
    )
}

fn bench_model() -> ModelConfig {
    ModelConfig {
        backbone: Backbone::Lightgc,
        dim: 32,
        num_layers: 2,
        init_std: 0.1,
    }
}

fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.01,
        epochs: 60,
        eval_every: 5,
        early_stop_patience: 100,
        batch_users: 100,
        seed,
        k: 20,
    }
}

fn bench_risk(family: RiskFamily, weighting: Weighting, corrections: bool) -> RiskConfig {
    RiskConfig {
        family,
        weighting,
        is_correction: corrections,
        nn_correction: corrections,
        d_bar: 50.0,
        lambda: 1e-4,
        ..RiskConfig::default()
    }
}

fn bench_data(seed: u64) -> InteractionDataset {
    generate(&SynthConfig::benchmark(seed))
        .unwrap()
        .dataset
        .split_holdout(0.1, seed)
        .unwrap()
}

fn test_ndcg(ds: &InteractionDataset, m: &ScorerModel) -> f64 {
    let (u, i) = m.propagate(&PropagationGraph::from_dataset(ds));
    evaluate(&u, &i, ds, Split::Test, 20).unwrap().ndcg_at_k
}

fn fit(
    ds: &InteractionDataset,
    risk: &RiskConfig,
    cfg: &TrainConfig,
    reference: Option<&ScorerModel>,
) -> (ScorerModel, TrainLog) {
    let init = bench_model().build(ds.num_users(), ds.num_items(), cfg.seed).unwrap();
    let out = train_full(ds, init, risk, cfg, reference).unwrap();
    (out.best, out.log)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

const SEEDS: u64 = 5;

fn c7_ablation() -> Outcome {
    let variants = [
        bench_risk(RiskFamily::PuRegression, Weighting::Uniform, false),
        bench_risk(RiskFamily::RankingUlsif, Weighting::Uniform, false),
        bench_risk(RiskFamily::RankingUlsif, Weighting::HardAdaptive, true),
    ];
    let mut scores = vec![Vec::new(); 3];
    for seed in 0..SEEDS {
        let ds = bench_data(seed);
        for (v, risk) in variants.iter().enumerate() {
            let (m, _) = fit(&ds, risk, &bench_train(seed), None);
            scores[v].push(test_ndcg(&ds, &m));
        }
    }
    let (pu, dre, full) = (mean(&scores[0]), mean(&scores[1]), mean(&scores[2]));
    let paired = scores[2].iter().zip(&scores[0]).all(|(h, a)| h > a);
    outcome(
        pu <= dre && dre <= full && full - pu > 0.0 && paired,
        format!(
            "test nDCG@20 means: PU {pu:.4} <= DRE-uniform {dre:.4} <= full {full:.4}; per-seed full [{}] vs PU [{}]",
            fmt(&scores[2]),
            fmt(&scores[0])
        ),
    )
}

fn c8_efficiency() -> Outcome {
    let ds = bench_data(0);
    let cfg = TrainConfig {
        epochs: 200,
        eval_every: 1,
        early_stop_patience: 10,
        ..bench_train(0)
    };
    let full = bench_risk(RiskFamily::RankingUlsif, Weighting::HardAdaptive, true);
    let bpr = bench_risk(RiskFamily::Bpr, Weighting::Uniform, false);
    let (_, full_log) = fit(&ds, &full, &cfg, None);
    let (_, bpr_log) = fit(&ds, &bpr, &cfg, None);
    let a = iterations_to_fraction("ranking-ulsif", &full_log.records, 0.95).unwrap();
    let b = iterations_to_fraction("bpr", &bpr_log.records, 0.95).unwrap();
    outcome(
        a.iteration < b.iteration,
        format!(
            "iterations to 95% of final val recall@20: ranking-uLSIF {} (final {:.4}) vs BPR {} (final {:.4})",
            a.iteration, a.final_recall, b.iteration, b.final_recall
        ),
    )
}

fn c9_nn_bound() -> Outcome {
    // User 0 holds a single popular item; user 1 holds 100 rare ones.
    let m = 101usize;
    let mut lists: Vec<Vec<ItemId>> = vec![vec![0], (1..m as ItemId).collect()];
    lists.extend((0..98).map(|_| vec![0]));
    let ds = InteractionDataset::from_splits(100, m, lists, vec![], vec![]).unwrap();
    let batch = MiniBatch::for_users(&ds, vec![0, 1], &inclusion_table(&ds, 2));
    let d_bar = 50.0;
    let mut result = Vec::new();
    for nn in [false, true] {
        let risk = RiskConfig {
            family: RiskFamily::RankingUlsif,
            weighting: Weighting::Uniform,
            is_correction: true,
            nn_correction: nn,
            d_bar,
            lambda: 0.0,
            ..RiskConfig::default()
        };
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.05,
            epochs: 1,
            eval_every: 0,
            batch_users: 2,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            backbone: Backbone::Mf,
            dim: 4,
            num_layers: 0,
            init_std: 0.1,
        }
        .build(100, m, 0)
        .unwrap();
        let mut tr = Trainer::new(&ds, model, risk, cfg, None).unwrap();
        let mut min = f64::INFINITY;
        for _ in 0..10_000 {
            min = min.min(tr.step(&batch).unwrap().terms.risk);
        }
        result.push(min);
    }
    // With uniform weights each user's corrected risk is at least -D̄/2.
    let bound = -d_bar / 2.0;
    outcome(
        result[0] < -1e3 && result[1] >= bound,
        format!(
            "min loss over 10^4 steps: {:.2} without NN, {:.2} with NN (bound {bound})",
            result[0], result[1]
        ),
    )
}

fn c10_static() -> Outcome {
    let mut stat = Vec::new();
    let mut adapt = Vec::new();
    for seed in 0..SEEDS {
        let ds = bench_data(seed);
        let uniform = bench_risk(RiskFamily::RankingUlsif, Weighting::Uniform, true);
        let (reference, _) = fit(&ds, &uniform, &bench_train(seed), None);
        let st = bench_risk(RiskFamily::RankingUlsif, Weighting::HardStatic, true);
        let (m, _) = fit(&ds, &st, &bench_train(seed), Some(&reference));
        stat.push(test_ndcg(&ds, &m));
        let ad = bench_risk(RiskFamily::RankingUlsif, Weighting::HardAdaptive, true);
        let (m, _) = fit(&ds, &ad, &bench_train(seed), None);
        adapt.push(test_ndcg(&ds, &m));
    }
    let (s, a) = (mean(&stat), mean(&adapt));
    outcome(
        s < a,
        format!(
            "test nDCG@20 means: static {s:.4} < adaptive {a:.4}; static [{}] adaptive [{}]",
            fmt(&stat),
            fmt(&adapt)
        ),
    )
}

fn c11_gowalla() -> Option<Outcome> {
    let dir = std::env::var_os("DRE_RANK_GOWALLA")?;
    let ds = load_dataset(dir.as_ref(), InputFormat::AdjacencyText).unwrap();
    let ds = if ds.has_split(Split::Validation) {
        ds
    } else {
        ds.split_holdout(0.1, 0).unwrap()
    };
    let lr = std::env::var("DRE_RANK_GOWALLA_LR")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    let model = ModelConfig {
        backbone: Backbone::Lightgc,
        dim: 64,
        num_layers: 3,
        init_std: 0.1,
    }
    .build(ds.num_users(), ds.num_items(), 0)
    .unwrap();
    let risk = RiskConfig {
        lambda: 0.05,
        ..bench_risk(RiskFamily::RankingUlsif, Weighting::HardAdaptive, true)
    };
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: lr,
        epochs: 1000,
        eval_every: 10,
        early_stop_patience: 5,
        batch_users: 9500,
        seed: 0,
        k: 20,
    };
    let best = train_full(&ds, model, &risk, &cfg, None).unwrap().best;
    let (u, i) = best.propagate(&PropagationGraph::from_dataset(&ds));
    let recall = evaluate(&u, &i, &ds, Split::Test, 20).unwrap().recall_at_k;
    let target = 0.1810;
    Some(outcome(
        (recall - target).abs() <= 0.15 * target,
        format!("test recall@20 {recall:.4} vs {target} +/- 15%"),
    ))
}

fn report(n: u32, name: &str, elapsed: Duration, limit: Option<u64>, o: &Outcome) -> bool {
    let in_time = limit.is_none_or(|l| elapsed <= Duration::from_secs(l));
    let pass = o.pass && in_time;
    let limit = limit.map(|l| format!(", limit {l}s")).unwrap_or_default();
    println!(
        "{} criterion {n:>2} {name}: {} [{:.1}s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
    );
    pass
}

type Check = fn() -> Outcome;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let with_ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let checks: [(u32, &str, u64, Check); 10] = [
        (1, "bregman-ulsif", 1, c1_bregman),
        (2, "risk-oracle", 1, c2_oracle),
        (3, "gradient-check", 10, c3_gradients),
        (4, "self-normalisation", 1, c4_invariance),
        (5, "inclusion-probability", 30, c5_sampling),
        (6, "dre-recovery", 300, c6_recovery),
        (7, "ablation-direction", 1800, c7_ablation),
        (8, "efficiency-direction", 1800, c8_efficiency),
        (9, "nn-boundedness", 60, c9_nn_bound),
        (10, "static-vs-adaptive", 1800, c10_static),
    ];
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    for (n, name, limit, run) in checks {
        if !selected(name) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        if !report(n, name, start.elapsed(), Some(limit), &o) {
            failed += 1;
        }
    }
    if selected("gowalla") {
        let start = Instant::now();
        match with_ignored.then(c11_gowalla) {
            Some(Some(o)) => {
                if !report(11, "gowalla", start.elapsed(), None, &o) {
                    failed += 1;
                }
            }
            Some(None) => println!("SKIP criterion 11 gowalla: DRE_RANK_GOWALLA is not set"),
            None => {
                println!("IGNORED criterion 11 gowalla: expected-slow, run with --ignored and DRE_RANK_GOWALLA=<dir>")
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
