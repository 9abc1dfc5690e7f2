#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trialigner::eval::{RankedFact, RetrievalMode, RetrievalRun};
use trialigner::linalg::Matrix;
use trialigner::model::{forward_train, Mode, ModelConfig, ModelParams, SideInputs};
use trialigner::store::{
    DatasetBundle, EmbeddingMatrix, PairSet, PostPairs, SourceTag, SplitRole,
};
use trialigner::train::{backward, symmetric_contrastive_loss};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Adds `delta` to the `idx`-th trainable scalar.
pub fn nudge(model: &mut ModelParams, idx: usize, delta: f64) {
    let mut k = 0;
    model.visit_trainable_mut(&mut |_, t| {
        if idx >= k && idx < k + t.len() {
            t[idx - k] += delta;
        }
        k += t.len();
    });
}

/// Tensor name owning each flattened trainable index.
pub fn scalar_names(model: &mut ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    model.visit_trainable_mut(&mut |name, t| {
        for i in 0..t.len() {
            names.push(format!("{name}[{i}]"));
        }
    });
    names
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub tensors: usize,
}

pub const GRAD_H: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
/// Tensors with both gradient norms below this are compared absolutely.
pub const GRAD_ZERO: f64 = 1e-9;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap for a tensor whose
/// gradient is zero on both sides.
pub fn tensor_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gap = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < GRAD_ZERO {
        gap
    } else {
        gap / scale
    }
}

/// Flat index ranges of each trainable tensor.
pub fn tensor_ranges(model: &mut ModelParams) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut k = 0;
    model.visit_trainable_mut(&mut |name, t| {
        out.push((name.to_string(), k..k + t.len()));
        k += t.len();
    });
    out
}

fn worst_tensor(ranges: &[(String, std::ops::Range<usize>)], a: &[f64], b: &[f64]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, r) in ranges {
        let e = tensor_rel_error(&a[r.clone()], &b[r.clone()]);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }
    worst
}

pub struct GradFixture {
    pub model: ModelParams,
    pub fact_native: Matrix,
    pub fact_english: Matrix,
    pub post_native: Matrix,
    pub post_english: Matrix,
    pub seed: u64,
}

impl GradFixture {
    /// D_in = 6, H = 4, N = 5, train mode with dropout.
    pub fn new(seed: u64, concat_from_normalized: bool) -> Self {
        let cfg = ModelConfig {
            d_native: 6,
            d_english: 6,
            hidden: 4,
            dropout_p: 0.2,
            concat_from_normalized,
        };
        let mut r = rng(seed ^ 0xabcdef);
        Self {
            model: ModelParams::init(&cfg, seed),
            fact_native: random_matrix(&mut r, 5, 6),
            fact_english: random_matrix(&mut r, 5, 6),
            post_native: random_matrix(&mut r, 5, 6),
            post_english: random_matrix(&mut r, 5, 6),
            seed,
        }
    }

    pub fn loss(&self, model: &ModelParams) -> f64 {
        let (x, _) = forward_train(
            model,
            SideInputs {
                native: &self.fact_native,
                english: &self.fact_english,
            },
            SideInputs {
                native: &self.post_native,
                english: &self.post_english,
            },
            Mode::Train,
            self.seed,
            3,
        )
        .expect("forward");
        symmetric_contrastive_loss(&x).expect("loss").0
    }

    pub fn analytic(&self) -> Vec<f64> {
        let (x, cache) = forward_train(
            &self.model,
            SideInputs {
                native: &self.fact_native,
                english: &self.fact_english,
            },
            SideInputs {
                native: &self.post_native,
                english: &self.post_english,
            },
            Mode::Train,
            self.seed,
            3,
        )
        .expect("forward");
        let (_, d) = symmetric_contrastive_loss(&x).expect("loss");
        backward(&self.model, &cache, &d).expect("backward").flatten()
    }

    pub fn central(&self, i: usize, h: f64) -> f64 {
        let mut plus = self.model.clone();
        nudge(&mut plus, i, h);
        let mut minus = self.model.clone();
        nudge(&mut minus, i, -h);
        (self.loss(&plus) - self.loss(&minus)) / (2.0 * h)
    }

    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let n = self.analytic().len();
        (0..n).map(|i| self.central(i, h)).collect()
    }

    /// Worst per-tensor relative error of backprop against central
    /// differences with step `h`.
    pub fn check(&self, h: f64) -> GradCheck {
        let analytic = self.analytic();
        let numeric = self.numeric(h);
        let ranges = tensor_ranges(&mut self.model.clone());
        let (max_rel_error, worst) = worst_tensor(&ranges, &analytic, &numeric);
        GradCheck {
            max_rel_error,
            worst,
            tensors: ranges.len(),
        }
    }

    /// Whether central differences at `h` are accurate to `tol` on every
    /// tensor, judged against the same estimate at `h / 2`. Kinks and strong
    /// curvature inside the step make the estimate itself wrong. Uses no
    /// backprop output.
    pub fn oracle_is_sharp(&self, h: f64, tol: f64) -> bool {
        let ranges = tensor_ranges(&mut self.model.clone());
        worst_tensor(&ranges, &self.numeric(h), &self.numeric(h / 2.0)).0 <= tol
    }
}

/// First `count` models, scanning seeds upward, on which the oracle is sharp.
/// Returns the fixtures and how many seeds were scanned.
pub fn sharp_fixtures(count: usize, concat_from_normalized: bool) -> (Vec<GradFixture>, u64) {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        seed += 1;
        assert!(seed < 200, "no sharp fixtures found");
        let fx = GradFixture::new(seed, concat_from_normalized);
        if fx.oracle_is_sharp(GRAD_H, GRAD_TOL / 4.0) {
            out.push(fx);
        }
    }
    (out, seed)
}

/// Scalar-loop reference for the fused score of one (fact, post) cell.
pub fn fused_reference(
    lambda: [f64; 3],
    log_scale: [f64; 3],
    a: f64,
    b: f64,
    c: f64,
) -> f64 {
    lambda[0] * log_scale[0].exp() * a
        + lambda[1] * log_scale[1].exp() * b
        + lambda[2] * log_scale[2].exp() * c
}

/// Brute-force S@K and R@K by set intersection, summed in run order.
pub fn metric_oracle(run: &RetrievalRun, pairs: &PairSet, k: usize) -> (f64, f64) {
    let mut s = 0.0;
    let mut r = 0.0;
    for (post, list) in &run.entries {
        let pos: HashSet<&str> = pairs
            .get(post)
            .expect("post in pairs")
            .fact_ids
            .iter()
            .map(String::as_str)
            .collect();
        let top: HashSet<&str> = list.iter().take(k).map(|f| f.fact_id.as_str()).collect();
        let inter = top.intersection(&pos).count();
        s += if inter > 0 { 1.0 } else { 0.0 };
        r += inter as f64 / pos.len() as f64;
    }
    let n = run.entries.len() as f64;
    (s / n, r / n)
}

/// Random run over a pool of facts with random positives per post.
pub fn random_run(rng: &mut ChaCha8Rng, k_max: usize) -> (RetrievalRun, PairSet) {
    let n_posts = rng.gen_range(1..30);
    let n_facts = rng.gen_range(k_max..k_max + 40);
    let mut run = RetrievalRun::new(RetrievalMode::Crosslingual, k_max);
    let mut entries = Vec::new();
    for p in 0..n_posts {
        let post_id = format!("p{p}");
        let mut facts: Vec<usize> = (0..n_facts).collect();
        for i in 0..n_facts {
            let j = rng.gen_range(i..n_facts);
            facts.swap(i, j);
        }
        let list = facts[..k_max]
            .iter()
            .enumerate()
            .map(|(rank, f)| RankedFact {
                fact_id: format!("f{f}"),
                score: -(rank as f64),
            })
            .collect();
        run.entries.insert(post_id.clone(), list);
        let n_pos = rng.gen_range(1..5);
        let pos: Vec<String> = (0..n_pos)
            .map(|_| format!("f{}", rng.gen_range(0..n_facts)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        entries.push(PostPairs {
            post_id,
            fact_ids: pos,
            lang: ["eng", "spa", "deu"][p % 3].into(),
        });
    }
    (run, PairSet::new(entries, BTreeMap::new()))
}

/// Small valid bundle: `n_posts` posts each matched to one of `n_facts` facts,
/// every row a random vector; the first `n_dev` posts go to dev.
pub fn tiny_bundle(seed: u64, n_posts: usize, n_facts: usize, dim: usize, n_dev: usize) -> DatasetBundle {
    let mut r = rng(seed);
    let row = |r: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect() };
    let post_ids: Vec<String> = (0..n_posts).map(|i| format!("p{i}")).collect();
    let fact_ids: Vec<String> = (0..n_facts).map(|i| format!("f{i}")).collect();
    let pn: Vec<Vec<f32>> = (0..n_posts).map(|_| row(&mut r)).collect();
    let pe: Vec<Vec<f32>> = (0..n_posts).map(|_| row(&mut r)).collect();
    let fna: Vec<Vec<f32>> = (0..n_facts).map(|_| row(&mut r)).collect();
    let fen: Vec<Vec<f32>> = (0..n_facts).map(|_| row(&mut r)).collect();
    let entries = (0..n_posts)
        .map(|i| PostPairs {
            post_id: post_ids[i].clone(),
            fact_ids: vec![fact_ids[i % n_facts].clone()],
            lang: "eng".into(),
        })
        .collect();
    let langs = fact_ids.iter().map(|f| (f.clone(), "eng".to_string())).collect();
    let split = post_ids
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), if i < n_dev { SplitRole::Dev } else { SplitRole::Train }))
        .collect();
    DatasetBundle {
        post_native: EmbeddingMatrix::from_rows(post_ids.clone(), &pn, SourceTag::PostNative).unwrap(),
        post_english: EmbeddingMatrix::from_rows(post_ids, &pe, SourceTag::PostEnglish).unwrap(),
        fact_native: EmbeddingMatrix::from_rows(fact_ids.clone(), &fna, SourceTag::FactNative).unwrap(),
        fact_english: EmbeddingMatrix::from_rows(fact_ids, &fen, SourceTag::FactEnglish).unwrap(),
        pairs: PairSet::new(entries, langs),
        split,
    }
}

/// Brute-force hard negatives: score every fact by a sequential f64 dot
/// product, drop positives, stable-sort by score descending.
pub fn mining_oracle(
    posts: &EmbeddingMatrix,
    facts: &EmbeddingMatrix,
    pairs: &PairSet,
    m: usize,
) -> BTreeMap<String, Vec<(String, f64)>> {
    let mut out = BTreeMap::new();
    for (pi, pid) in posts.ids().iter().enumerate() {
        let Some(entry) = pairs.get(pid) else { continue };
        let pos: HashSet<&str> = entry.fact_ids.iter().map(String::as_str).collect();
        let mut scored: Vec<(usize, f64)> = (0..facts.rows())
            .filter(|&fi| !pos.contains(facts.ids()[fi].as_str()))
            .map(|fi| {
                let mut s = 0.0;
                for (a, b) in posts.row(pi).iter().zip(facts.row(fi)) {
                    s += f64::from(*a) * f64::from(*b);
                }
                (fi, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        out.insert(
            pid.clone(),
            scored
                .into_iter()
                .take(m)
                .map(|(fi, s)| (facts.ids()[fi].clone(), s))
                .collect(),
        );
    }
    out
}

pub fn random_embeddings(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    rows: usize,
    cols: usize,
    source: SourceTag,
) -> EmbeddingMatrix {
    let ids = (0..rows).map(|i| format!("{prefix}{i}")).collect();
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(ids, data, cols, source).unwrap()
}

/// Mining fixture: posts `p*`, facts `f*`, one to three positives per post.
pub fn mining_fixture(seed: u64, n_posts: usize, n_facts: usize, dim: usize) -> (EmbeddingMatrix, EmbeddingMatrix, PairSet) {
    let mut r = rng(seed);
    let posts = random_embeddings(&mut r, "p", n_posts, dim, SourceTag::PostEnglish);
    let facts = random_embeddings(&mut r, "f", n_facts, dim, SourceTag::FactEnglish);
    let entries = (0..n_posts)
        .map(|i| {
            let k = r.gen_range(1..=3);
            let ids: std::collections::BTreeSet<String> =
                (0..k).map(|_| format!("f{}", r.gen_range(0..n_facts))).collect();
            PostPairs {
                post_id: format!("p{i}"),
                fact_ids: ids.into_iter().collect(),
                lang: "eng".into(),
            }
        })
        .collect();
    (posts, facts, PairSet::new(entries, BTreeMap::new()))
}
