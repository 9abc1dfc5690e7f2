//! Planted synthetic bundles: each post is a noisy copy of its facts' latent
//! vectors, so a retriever that preserves geometry can find them.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{
    split_dataset, DatasetBundle, EmbeddingMatrix, PairSet, PostPairs, SourceTag, StoreError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub posts: usize,
    pub facts: usize,
    pub dim: usize,
    pub languages: usize,
    /// Target cosine between a post and its fact in the English view.
    pub match_cosine: f64,
    /// Chance that a post has a second relevant fact.
    pub second_fact_prob: f64,
    /// Length of the per-language shift added to the native view.
    pub language_shift: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            posts: 500,
            facts: 2000,
            dim: 64,
            languages: 4,
            match_cosine: 0.9,
            second_fact_prob: 0.25,
            language_shift: 0.6,
            dev_fraction: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub bundle: DatasetBundle,
    pub post_texts: HashMap<String, String>,
    pub fact_texts: HashMap<String, String>,
}

pub fn language_code(i: usize) -> String {
    format!("l{i}")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // Box-Muller
    (0..dim)
        .map(|_| {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Unit vector at cosine `c` from unit `u`, in a random direction.
fn perturb(rng: &mut ChaCha8Rng, u: &[f64], c: f64) -> Vec<f64> {
    let g = gaussian(rng, u.len());
    let along: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
    let orth = unit(g.iter().zip(u).map(|(a, b)| a - along * b).collect());
    let s = (1.0 - c * c).max(0.0).sqrt();
    u.iter().zip(&orth).map(|(a, b)| c * a + s * b).collect()
}

fn shifted(v: &[f64], shift: &[f64], len: f64) -> Vec<f32> {
    unit(v.iter().zip(shift).map(|(a, b)| a + len * b).collect())
        .into_iter()
        .map(|x| x as f32)
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, StoreError> {
    assert!(cfg.languages >= 1 && cfg.dim >= 2, "degenerate synthetic config");
    assert!(
        cfg.facts >= 2 * cfg.posts,
        "need at least two facts per post to plant disjoint positives"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shifts: Vec<Vec<f64>> = (0..cfg.languages)
        .map(|_| unit(gaussian(&mut rng, cfg.dim)))
        .collect();

    let fact_ids: Vec<String> = (0..cfg.facts).map(|i| format!("f{i:05}")).collect();
    let fact_lang: Vec<usize> = (0..cfg.facts).map(|i| i % cfg.languages).collect();
    let latent: Vec<Vec<f64>> = (0..cfg.facts)
        .map(|_| unit(gaussian(&mut rng, cfg.dim)))
        .collect();

    // disjoint positives drawn per language
    let mut pools: Vec<Vec<usize>> = (0..cfg.languages)
        .map(|l| (0..cfg.facts).filter(|&i| fact_lang[i] == l).collect())
        .collect();
    for p in &mut pools {
        p.shuffle(&mut rng);
    }

    let mut entries = Vec::with_capacity(cfg.posts);
    let mut post_rows_en = Vec::with_capacity(cfg.posts);
    let mut post_rows_na = Vec::with_capacity(cfg.posts);
    let mut post_texts = HashMap::new();
    for i in 0..cfg.posts {
        let lang = i % cfg.languages;
        let want = if rng.gen::<f64>() < cfg.second_fact_prob { 2 } else { 1 };
        let mut facts = Vec::new();
        for _ in 0..want {
            if let Some(f) = pools[lang].pop() {
                facts.push(f);
            }
        }
        if facts.is_empty() {
            // language pool ran dry; borrow from the largest
            let l = (0..cfg.languages).max_by_key(|&l| pools[l].len()).expect("languages");
            facts.push(pools[l].pop().expect("enough facts"));
        }
        let centre = unit(
            (0..cfg.dim)
                .map(|d| facts.iter().map(|&f| latent[f][d]).sum())
                .collect(),
        );
        let v = perturb(&mut rng, &centre, cfg.match_cosine);
        let post_id = format!("p{i:04}");
        post_rows_en.push(to_f32(&v));
        post_rows_na.push(shifted(&v, &shifts[lang], cfg.language_shift));
        post_texts.insert(
            post_id.clone(),
            format!("synthetic post {post_id} in language {}", language_code(lang)),
        );
        entries.push(PostPairs {
            post_id,
            fact_ids: facts.iter().map(|&f| fact_ids[f].clone()).collect(),
            lang: language_code(lang),
        });
    }

    let fact_en: Vec<Vec<f32>> = latent.iter().map(|v| to_f32(v)).collect();
    let fact_na: Vec<Vec<f32>> = latent
        .iter()
        .zip(&fact_lang)
        .map(|(v, &l)| shifted(v, &shifts[l], cfg.language_shift))
        .collect();
    let fact_languages: BTreeMap<String, String> = fact_ids
        .iter()
        .zip(&fact_lang)
        .map(|(id, &l)| (id.clone(), language_code(l)))
        .collect();
    let fact_texts = fact_ids
        .iter()
        .zip(&fact_lang)
        .map(|(id, &l)| (id.clone(), format!("synthetic fact-check {id} in language {}", language_code(l))))
        .collect();

    let post_ids: Vec<String> = entries.iter().map(|e| e.post_id.clone()).collect();
    let pairs = PairSet::new(entries, fact_languages);
    let split = split_dataset(&pairs, cfg.dev_fraction, cfg.seed)?;
    let bundle = DatasetBundle {
        post_native: EmbeddingMatrix::from_rows(post_ids.clone(), &post_rows_na, SourceTag::PostNative)?,
        post_english: EmbeddingMatrix::from_rows(post_ids, &post_rows_en, SourceTag::PostEnglish)?,
        fact_native: EmbeddingMatrix::from_rows(fact_ids.clone(), &fact_na, SourceTag::FactNative)?,
        fact_english: EmbeddingMatrix::from_rows(fact_ids, &fact_en, SourceTag::FactEnglish)?,
        pairs,
        split,
    };
    Ok(SynthData {
        bundle,
        post_texts,
        fact_texts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::validate_bundle;

    fn small() -> SynthConfig {
        SynthConfig {
            posts: 40,
            facts: 120,
            dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn bundle_is_valid_and_deterministic() {
        let a = generate(&small()).unwrap();
        assert!(validate_bundle(&a.bundle).is_valid());
        let b = generate(&small()).unwrap();
        assert_eq!(a.bundle.post_english, b.bundle.post_english);
        assert_eq!(a.bundle.split, b.bundle.split);
    }

    #[test]
    fn single_fact_posts_sit_at_the_planted_cosine() {
        let d = generate(&small()).unwrap();
        let b = &d.bundle;
        let fidx = b.fact_english.index();
        let mut checked = 0;
        for (i, e) in b.pairs.entries.iter().enumerate() {
            if e.fact_ids.len() != 1 {
                continue;
            }
            let f = fidx[e.fact_ids[0].as_str()];
            let cos: f64 = b
                .post_english
                .row(i)
                .iter()
                .zip(b.fact_english.row(f))
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            assert!((cos - 0.9).abs() < 1e-5, "cos {cos}");
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn positives_share_the_post_language() {
        let d = generate(&small()).unwrap();
        for e in &d.bundle.pairs.entries {
            for f in &e.fact_ids {
                assert_eq!(d.bundle.pairs.fact_languages[f], e.lang);
            }
        }
    }
}
