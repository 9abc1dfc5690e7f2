//! Every headline acceptance criterion, one PASS/FAIL line each.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use trialigner::eval::{
    evaluate, recall_at_k, success_at_k, EvalOptions, EvalScope, RankedFact, RetrievalMode,
    RetrievalRun, POOLED,
};
use trialigner::gateway::{
    apply_rerank, build_rerank_inputs, rerank_many, FnTransport, GatewayConfig,
    IdentityRerankTransport,
};
use trialigner::linalg::Matrix;
use trialigner::mining::mine_hard_negatives;
use trialigner::model::{
    assemble_tiles, blockwise_scores, fuse_scores, score_matrix, FusionParams, ModelConfig,
    ModelParams, SideInputs, SimilarityTriple,
};
use trialigner::store::{load_matrix, save_matrix, EmbeddingMatrix, PairSet, PostPairs, SourceTag, SplitRole};
use trialigner::synth::{generate, SynthConfig};
use trialigner::train::{symmetric_contrastive_loss, train, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut models = 0;
    for from_normalized in [false, true] {
        let (fixtures, _) = common::sharp_fixtures(4, from_normalized);
        for fx in &fixtures {
            let r = fx.check(common::GRAD_H);
            ensure!(
                r.max_rel_error <= common::GRAD_TOL,
                "seed {} {}: {:.3e} on {}",
                fx.seed, from_normalized, r.max_rel_error, r.worst
            );
            worst = worst.max(r.max_rel_error);
            models += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{models} models, worst tensor rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn loss_closed_forms() -> Outcome {
    let mut r = common::rng(1);
    for _ in 0..5 {
        let v = r.gen_range(-1e3..1e3);
        let (l, _) = symmetric_contrastive_loss(&Matrix::from_rows(&[vec![v]])).unwrap();
        ensure!(l == 0.0, "N=1 loss {l}");
    }
    for n in [2usize, 4, 8] {
        let v = r.gen_range(-5.0..5.0);
        let (l, _) = symmetric_contrastive_loss(&Matrix::from_fn(n, n, |_, _| v)).unwrap();
        ensure!((l - (n as f64).ln()).abs() <= 1e-9, "uniform N={n}: {l}");
    }
    let mut shift_worst = 0.0f64;
    for trial in 0..200 {
        let n = r.gen_range(1..16);
        let x = common::random_matrix(&mut r, n, n).scale(10.0);
        let c = r.gen_range(-100.0..100.0);
        let (a, _) = symmetric_contrastive_loss(&x).unwrap();
        let (b, _) = symmetric_contrastive_loss(&x.map(|v| v + c)).unwrap();
        shift_worst = shift_worst.max((a - b).abs());
        ensure!((a - b).abs() <= 1e-9, "shift trial {trial}: {a} vs {b}");
        let (t, _) = symmetric_contrastive_loss(&x.transpose()).unwrap();
        ensure!(a.to_bits() == t.to_bits(), "transpose trial {trial}: {a} vs {t}");
    }
    Ok(format!("worst shift gap {shift_worst:.1e}"))
}

fn fusion_reference() -> Outcome {
    let mut r = common::rng(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let tri = SimilarityTriple {
            a: common::random_matrix(&mut r, 16, 16),
            b: common::random_matrix(&mut r, 16, 16),
            c: common::random_matrix(&mut r, 16, 16),
        };
        let lambda = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let log_scale = [r.gen_range(-1.0..3.0), r.gen_range(-1.0..3.0), r.gen_range(-1.0..3.0)];
        let x = fuse_scores(&tri, &FusionParams { lambda, log_scale }).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let want = common::fused_reference(lambda, log_scale, tri.a.get(i, j), tri.b.get(i, j), tri.c.get(i, j));
                worst = worst.max((x.get(i, j) - want).abs());
            }
        }
        let ablated = fuse_scores(&tri, &FusionParams { lambda: [lambda[0], 0.0, 0.0], log_scale }).unwrap();
        let c1 = lambda[0] * log_scale[0].exp();
        ensure!(ablated == tri.a.map(|v| c1 * v), "concat-only ablation is not exact");
    }
    ensure!(worst <= 1e-7, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

fn blockwise_equivalence() -> Outcome {
    let model = ModelParams::init(
        &ModelConfig { d_native: 9, d_english: 11, hidden: 8, dropout_p: 0.2, concat_from_normalized: false },
        3,
    );
    let mut r = common::rng(3);
    let fnat = common::random_matrix(&mut r, 37, 9);
    let feng = common::random_matrix(&mut r, 37, 11);
    let pnat = common::random_matrix(&mut r, 23, 9);
    let peng = common::random_matrix(&mut r, 23, 11);
    let facts = SideInputs { native: &fnat, english: &feng };
    let posts = SideInputs { native: &pnat, english: &peng };
    let mono = score_matrix(&model, facts, posts).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (fb, pb) = (r.gen_range(1..=37), r.gen_range(1..=23));
        let tiles = blockwise_scores(&model, facts, posts, fb, pb).unwrap();
        let d = mono.max_abs_diff(&assemble_tiles(37, 23, &tiles));
        ensure!(d <= 1e-6, "tiling {fb}x{pb}: {d:e}");
        worst = worst.max(d);
    }
    Ok(format!("10 tilings, max deviation {worst:.1e}"))
}

fn metrics_oracle() -> Outcome {
    let mut r = common::rng(4);
    for trial in 0..50 {
        let k_max = r.gen_range(1..=25);
        let (run, pairs) = common::random_run(&mut r, k_max);
        let mut prev = (0.0, 0.0);
        for k in 1..=k_max {
            let s = success_at_k(&run, &pairs, k).unwrap();
            let rc = recall_at_k(&run, &pairs, k).unwrap();
            let (os, orc) = common::metric_oracle(&run, &pairs, k);
            ensure!(s.to_bits() == os.to_bits() && rc.to_bits() == orc.to_bits(), "trial {trial} k {k}");
            ensure!(s >= prev.0 && rc >= prev.1, "trial {trial}: not monotone at k {k}");
            ensure!(rc <= s, "trial {trial}: recall above success at k {k}");
            prev = (s, rc);
        }
    }
    // two relevant fact-checks, one of them retrieved in the top K
    let mut run = RetrievalRun::new(RetrievalMode::Monolingual, 10);
    run.entries.insert(
        "p".into(),
        (0..10)
            .map(|i| RankedFact { fact_id: format!("f{i}"), score: -(i as f64) })
            .collect(),
    );
    let pairs = PairSet::new(
        vec![PostPairs { post_id: "p".into(), fact_ids: vec!["f3".into(), "f99".into()], lang: "eng".into() }],
        BTreeMap::new(),
    );
    let rc = recall_at_k(&run, &pairs, 10).unwrap();
    let s = success_at_k(&run, &pairs, 10).unwrap();
    ensure!(rc == 0.5 && s == 1.0, "worked case gave recall {rc}, success {s}");
    Ok("50 runs exact, worked case recall 0.5".into())
}

struct Trained {
    data: trialigner::synth::SynthData,
    model: ModelParams,
    elapsed: Duration,
    epochs: usize,
}

fn trained() -> &'static Trained {
    static CELL: std::sync::OnceLock<Trained> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        let model = ModelParams::init(
            &ModelConfig { d_native: 64, d_english: 64, hidden: 256, dropout_p: 0.2, concat_from_normalized: false },
            cfg.seed,
        );
        let t = Instant::now();
        let out = train(
            model,
            &data.bundle,
            &TrainConfig { batch_size: 32, max_epochs: 30, seed: cfg.seed, ..Default::default() },
            None,
        )
        .unwrap();
        Trained { data, model: out.best, elapsed: t.elapsed(), epochs: out.log.len() }
    })
}

fn dev_success10(model: &ModelParams, bundle: &trialigner::store::DatasetBundle, mode: RetrievalMode) -> (f64, RetrievalRun) {
    let opts = EvalOptions { mode, k_max: 20, scope: EvalScope::Dev, ..Default::default() };
    let (run, report) = evaluate(model, bundle, &opts).unwrap();
    (report.get(mode, POOLED, 10).unwrap().success, run)
}

fn synthetic_end_to_end() -> Outcome {
    let t = trained();
    let (mono, _) = dev_success10(&t.model, &t.data.bundle, RetrievalMode::Monolingual);
    let (cross, _) = dev_success10(&t.model, &t.data.bundle, RetrievalMode::Crosslingual);
    let detail = format!(
        "dev S@10 mono {mono:.3} cross {cross:.3}, {} epochs in {:.1}s",
        t.epochs,
        t.elapsed.as_secs_f64()
    );
    ensure!(mono >= 0.95, "{detail}");
    ensure!(cross >= 0.85, "{detail}");
    ensure!(t.epochs <= 30 && t.elapsed < Duration::from_secs(300), "{detail}");
    Ok(detail)
}

fn choose_ratio(n: usize, r: usize, k: usize) -> f64 {
    // C(n - r, k) / C(n, k)
    (0..r).map(|i| (n - k - i) as f64 / (n - i) as f64).product()
}

fn random_baseline() -> Outcome {
    let t = trained();
    let bundle = &t.data.bundle;
    let dev = bundle.posts_in(SplitRole::Dev);
    let n = bundle.fact_english.rows();
    let analytic: f64 =
        dev.iter().map(|p| 1.0 - choose_ratio(n, p.fact_ids.len(), 10)).sum::<f64>() / dev.len() as f64;
    let fact_ids = bundle.fact_english.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rounds = 400;
    let mut total = 0.0;
    for _ in 0..rounds {
        let mut run = RetrievalRun::new(RetrievalMode::Crosslingual, 10);
        for p in &dev {
            let picks = rand::seq::index::sample(&mut rng, n, 10);
            run.entries.insert(
                p.post_id.clone(),
                picks
                    .iter()
                    .enumerate()
                    .map(|(i, f)| RankedFact { fact_id: fact_ids[f].clone(), score: -(i as f64) })
                    .collect(),
            );
        }
        total += success_at_k(&run, &bundle.pairs, 10).unwrap();
    }
    let empirical = total / rounds as f64;
    let se = (analytic * (1.0 - analytic) / (dev.len() * rounds) as f64).sqrt();
    let detail = format!("analytic {analytic:.4}, empirical {empirical:.4}, 10/N {:.4}", 10.0 / n as f64);
    ensure!((empirical - analytic).abs() <= 4.0 * se, "{detail}");
    ensure!(analytic >= 10.0 / n as f64 && analytic <= 2.0 * 10.0 / n as f64, "{detail}");
    Ok(detail)
}

fn permuting_transport() -> FnTransport<impl Fn(&trialigner::gateway::ChatRequest) -> Result<String, trialigner::gateway::GatewayError> + Send + Sync> {
    FnTransport(|req: &trialigner::gateway::ChatRequest| {
        let v: Value = serde_json::from_str(&req.user_payload).unwrap();
        let post = v["post"]["post_id"].as_str().unwrap().to_owned();
        let mut ids: Vec<String> = v["factChecks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["fact_id"].as_str().unwrap().to_owned())
            .collect();
        let seed = post.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.truncate(10);
        Ok(json!({ post: ids }).to_string())
    })
}

fn rerank_invariance() -> Outcome {
    let t = trained();
    let bundle = &t.data.bundle;
    let cfg = GatewayConfig::default();
    let mut checked = 0;
    for mode in [RetrievalMode::Monolingual, RetrievalMode::Crosslingual] {
        let (_, run) = dev_success10(&t.model, bundle, mode);
        let (inputs, skipped) = build_rerank_inputs(&run, &t.data.post_texts, &t.data.fact_texts).unwrap();
        ensure!(skipped.is_empty(), "{} posts skipped", skipped.len());
        for (name, outputs) in [
            ("permutation", rerank_many(&inputs, &permuting_transport(), &cfg).unwrap()),
            ("identity", rerank_many(&inputs, &IdentityRerankTransport, &cfg).unwrap()),
        ] {
            let after = apply_rerank(&run, &outputs).unwrap();
            let k20 = |r: &RetrievalRun| {
                (
                    success_at_k(r, &bundle.pairs, 20).unwrap().to_bits(),
                    recall_at_k(r, &bundle.pairs, 20).unwrap().to_bits(),
                )
            };
            ensure!(k20(&run) == k20(&after), "{name} rerank changed K=20 metrics in {mode}");
            checked += 1;
        }
    }

    // positive at rank 7 promoted to the top
    let mut run = RetrievalRun::new(RetrievalMode::Crosslingual, 20);
    run.entries.insert(
        "p".into(),
        (0..20).map(|i| RankedFact { fact_id: format!("f{i}"), score: 1.0 - i as f64 / 20.0 }).collect(),
    );
    let pairs = PairSet::new(
        vec![PostPairs { post_id: "p".into(), fact_ids: vec!["f6".into()], lang: "eng".into() }],
        BTreeMap::new(),
    );
    let positives: HashSet<String> = ["f6".to_string()].into();
    let promote = FnTransport(move |req: &trialigner::gateway::ChatRequest| {
        let v: Value = serde_json::from_str(&req.user_payload).unwrap();
        let mut ids: Vec<String> = v["factChecks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["fact_id"].as_str().unwrap().to_owned())
            .collect();
        ids.sort_by_key(|id| !positives.contains(id));
        ids.truncate(10);
        Ok(json!({ v["post"]["post_id"].as_str().unwrap(): ids }).to_string())
    });
    let texts: HashMap<String, String> = (0..20).map(|i| (format!("f{i}"), format!("fact {i}"))).collect();
    let post_texts: HashMap<String, String> = [("p".to_string(), "post".to_string())].into();
    let (inputs, _) = build_rerank_inputs(&run, &post_texts, &texts).unwrap();
    let after = apply_rerank(&run, &rerank_many(&inputs, &promote, &cfg).unwrap()).unwrap();
    let before_s1 = success_at_k(&run, &pairs, 1).unwrap();
    let after_s1 = success_at_k(&after, &pairs, 1).unwrap();
    ensure!(before_s1 == 0.0 && after_s1 == 1.0, "S@1 {before_s1} -> {after_s1}");
    ensure!(
        success_at_k(&after, &pairs, 20).unwrap() == success_at_k(&run, &pairs, 20).unwrap(),
        "promotion changed S@20"
    );
    Ok(format!("{checked} rerank passes bit-identical at K=20, S@1 0 -> 1 on promotion"))
}

fn mining_oracle() -> Outcome {
    let (posts, facts, pairs) = common::mining_fixture(6, 20, 100, 16);
    let mut compared = 0;
    for m in [1, 5, 20] {
        let mined = mine_hard_negatives(&posts, &facts, &pairs, m, None).unwrap();
        for (pid, expect) in common::mining_oracle(&posts, &facts, &pairs, m) {
            let got: Vec<(String, f64)> = mined.get(&pid).unwrap().iter().map(|n| (n.fact_id.clone(), n.score)).collect();
            ensure!(got == expect, "post {pid} m={m} differs from brute force");
            let pos: HashSet<&str> = pairs.get(&pid).unwrap().fact_ids.iter().map(String::as_str).collect();
            ensure!(got.iter().all(|(f, _)| !pos.contains(f.as_str())), "positive mined for {pid}");
            compared += 1;
        }
    }
    Ok(format!("{compared} negative lists equal brute force"))
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.taln");
    let mut r = common::rng(7);
    for trial in 0..1000 {
        let rows = r.gen_range(0..20);
        let cols = r.gen_range(1..40);
        let ids = (0..rows).map(|i| format!("{trial}-{i}-{}", r.gen::<u16>())).collect();
        let data = (0..rows * cols)
            .map(|_| loop {
                let x = f32::from_bits(r.gen());
                if x.is_finite() {
                    break x;
                }
            })
            .collect();
        let source = SourceTag::from_code(r.gen_range(0..4)).unwrap();
        let m = EmbeddingMatrix::new(ids, data, cols, source).unwrap();
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        let bits = |e: &EmbeddingMatrix| e.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(
            back.ids() == m.ids() && back.cols() == m.cols() && back.source() == m.source() && bits(&back) == bits(&m),
            "trial {trial} ({rows}x{cols}) differs after reload"
        );
    }
    Ok("1000 matrices bit-exact".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("loss closed forms", loss_closed_forms),
        ("fusion reference and ablation", fusion_reference),
        ("blockwise equals monolithic", blockwise_equivalence),
        ("metrics oracle", metrics_oracle),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("random-ranking baseline", random_baseline),
        ("rerank invariance", rerank_invariance),
        ("mining oracle", mining_oracle),
        ("format round-trip", format_round_trip),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
