use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    backward, cosine_anneal_lr, margin_loss, symmetric_contrastive_loss, AdamW, TrainConfig,
    TrainError,
};
use crate::eval::{evaluate, EvalOptions, EvalScope, POOLED};
use crate::fsutil::{read_jsonl, write_jsonl};
use crate::mining::HardNegativeSet;
use crate::model::{forward_train, Mode, ModelParams, SideInputs};
use crate::store::{DatasetBundle, SplitRole};

/// Stream tag mixed into the seed for batch sampling, keeping it apart from
/// parameter init and dropout.
const SAMPLING_STREAM: u64 = 0x5eed_5a3b_1e00_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub monitor_name: String,
    pub monitor_value: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub log: Vec<EpochLog>,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    write_jsonl(path, log)
}

pub fn read_log(path: &Path) -> std::io::Result<Vec<EpochLog>> {
    read_jsonl(path)
}

/// Trains with early stopping on the configured dev Recall@k.
pub fn train(
    model: ModelParams,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    negatives: Option<&HardNegativeSet>,
) -> Result<TrainOutcome, TrainError> {
    if bundle.posts_in(SplitRole::Dev).is_empty() {
        return Err(TrainError::EmptyDevSplit);
    }
    let opts = EvalOptions {
        mode: config.monitor.mode,
        k_max: config.monitor.k,
        scope: EvalScope::Dev,
        fact_block: config.eval_fact_block,
        post_block: config.eval_post_block,
    };
    let k = config.monitor.k;
    let mode = config.monitor.mode;
    train_with_monitor(model, bundle, config, negatives, &mut |m, _| {
        let (_, report) = evaluate(m, bundle, &opts)?;
        Ok(report.get(mode, POOLED, k).map_or(0.0, |c| c.recall))
    })
}

/// Training loop with a caller-supplied monitor `(model, epoch) -> value`;
/// higher is better and only a strict increase resets patience.
pub fn train_with_monitor(
    mut model: ModelParams,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    negatives: Option<&HardNegativeSet>,
    monitor: &mut dyn FnMut(&ModelParams, usize) -> Result<f64, TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let post_rows = bundle.post_native.index();
    let fact_rows = bundle.fact_native.index();

    // (post row, candidate fact rows) per training post
    let train_posts: Vec<(usize, Vec<usize>)> = bundle
        .posts_in(SplitRole::Train)
        .into_iter()
        .filter_map(|p| {
            let facts: Vec<usize> = p
                .fact_ids
                .iter()
                .filter_map(|f| fact_rows.get(f.as_str()).copied())
                .collect();
            let row = post_rows.get(p.post_id.as_str()).copied()?;
            (!facts.is_empty()).then_some((row, facts))
        })
        .collect();
    if train_posts.len() < 2 {
        return Err(TrainError::EmptyTrainSplit);
    }

    // mined negatives as fact rows, keyed by post row
    let neg_rows: HashMap<usize, Vec<usize>> = match negatives {
        Some(set) if config.margin_weight > 0.0 => set
            .entries
            .iter()
            .filter_map(|(pid, list)| {
                let r = post_rows.get(pid.as_str()).copied()?;
                let facts = list
                    .iter()
                    .filter_map(|n| fact_rows.get(n.fact_id.as_str()).copied())
                    .collect();
                Some((r, facts))
            })
            .collect(),
        _ => HashMap::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLING_STREAM);
    let mut opt = AdamW::new(&mut model, config.optimizer);
    let mut global_step: u64 = 0;
    let mut last_finite: Option<f64> = None;
    let mut log = Vec::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = cosine_anneal_lr(
            (epoch - 1) as u64,
            config.max_epochs as u64,
            config.learning_rate,
            config.lr_min,
        )?;

        let mut pairs: Vec<(usize, usize)> = train_posts
            .iter()
            .map(|(p, facts)| (*p, facts[rng.gen_range(0..facts.len())]))
            .collect();
        pairs.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in pairs.chunks(config.batch_size) {
            let mut seen = HashSet::with_capacity(chunk.len());
            let batch: Vec<(usize, usize)> =
                chunk.iter().copied().filter(|&(_, f)| seen.insert(f)).collect();
            if batch.len() < 2 {
                continue;
            }
            let loss = step(
                &mut model,
                &mut opt,
                bundle,
                config,
                &batch,
                &neg_rows,
                lr,
                global_step,
            )
            .map_err(|e| match e {
                TrainError::NonFiniteScores
                | TrainError::Model(_) => TrainError::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                },
                other => other,
            })?;
            if !loss.is_finite() || !model.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            loss_sum += loss;
            batches += 1;
            global_step += 1;
        }
        if batches == 0 {
            return Err(TrainError::EmptyTrainSplit);
        }

        let value = monitor(&model, epoch)?;
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
            monitor_name: config.monitor.name(),
            monitor_value: value,
            seconds: started.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().is_none_or(|b| value > b.2);
        if improved {
            best = Some((model.clone(), epoch, value));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best, best_epoch, best_monitor) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_monitor,
        log,
    })
}

/// One optimizer step on `batch` (post row, fact row) pairs; returns the total loss.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut ModelParams,
    opt: &mut AdamW,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    batch: &[(usize, usize)],
    neg_rows: &HashMap<usize, Vec<usize>>,
    lr: f64,
    global_step: u64,
) -> Result<f64, TrainError> {
    let post_idx: Vec<usize> = batch.iter().map(|b| b.0).collect();
    let fact_idx: Vec<usize> = batch.iter().map(|b| b.1).collect();
    let pn = bundle.post_native.gather_f64(&post_idx);
    let pe = bundle.post_english.gather_f64(&post_idx);
    let fna = bundle.fact_native.gather_f64(&fact_idx);
    let fen = bundle.fact_english.gather_f64(&fact_idx);

    let (x, cache) = forward_train(
        model,
        SideInputs {
            native: &fna,
            english: &fen,
        },
        SideInputs {
            native: &pn,
            english: &pe,
        },
        Mode::Train,
        config.seed,
        global_step,
    )?;
    let (mut loss, mut grad) = symmetric_contrastive_loss(&x)?;

    if config.margin_weight > 0.0 && !neg_rows.is_empty() {
        let pos_in_batch: HashMap<usize, usize> =
            fact_idx.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let negs: Vec<Vec<usize>> = post_idx
            .iter()
            .enumerate()
            .map(|(i, p)| {
                neg_rows
                    .get(p)
                    .map(|list| {
                        list.iter()
                            .filter_map(|f| pos_in_batch.get(f).copied())
                            .filter(|&j| j != i)
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        // posts as rows
        let (m, g) = margin_loss(&x.transpose(), &negs, config.margin)?;
        loss += config.margin_weight * m;
        grad.axpy(config.margin_weight, &g.transpose());
    }

    let grads = backward(model, &cache, &grad)?;
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteScores);
    }
    opt.step(model, &grads, lr)?;
    model.post_native.update_running_stats(&cache.posts.native);
    model.post_english.update_running_stats(&cache.posts.english);
    model.fact_native.update_running_stats(&cache.facts.native);
    model.fact_english.update_running_stats(&cache.facts.english);
    Ok(loss)
}
