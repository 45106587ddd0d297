//! Minibatch Adam training for the pruner and the joint model.

use std::time::Instant;

use hgere_autodiff::{Adam, Graph, ParamSet, Var, WarmupLinear};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::decode::{decode, Prediction};
use crate::error::Result;
use crate::instance::Instance;
use crate::metrics::{evaluate, MetricReport, Prf};
use crate::model::JointModel;
use crate::pruner::{recall_eval, Candidate, Pruner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    /// Evaluate on dev every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 2e-3,
            batch_size: 4,
            warmup_ratio: 0.1,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epoch_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_score: Option<f64>,
}

/// Generic loop: `loss_fn` builds the summed loss of one example, or `None`
/// when the example contributes nothing; `score_fn` rates the current
/// parameters on dev (higher is better).
fn run<L, S>(
    params: &mut ParamSet,
    n_examples: usize,
    cfg: &TrainConfig,
    seed: u64,
    loss_fn: L,
    mut score_fn: S,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport>
where
    L: for<'g> Fn(&'g Graph, &ParamSet, usize) -> Result<Option<Var<'g>>>,
    S: FnMut(&ParamSet) -> Result<Option<f64>>,
{
    let mut report = TrainReport::default();
    if n_examples == 0 || cfg.epochs == 0 {
        return Ok(report);
    }
    let batch = cfg.batch_size.max(1);
    let per_epoch = n_examples.div_ceil(batch);
    let mut adam = Adam::new(params, cfg.lr)
        .with_schedule(WarmupLinear::new(per_epoch * cfg.epochs, cfg.warmup_ratio));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let g = Graph::with_params(params);
            let mut acc: Option<Var<'_>> = None;
            for &i in chunk {
                if let Some(l) = loss_fn(&g, params, i)? {
                    acc = Some(match acc {
                        None => l,
                        Some(a) => a.add(&l)?,
                    });
                }
            }
            let (loss, lr) = match acc {
                Some(l) => {
                    let grads = g.backward(l)?;
                    let lr = adam.step(params, &grads)?;
                    (l.item(), lr)
                }
                None => {
                    let lr = adam.step_with(params, &vec![None; params.len()])?;
                    (0.0, lr)
                }
            };
            total += loss;
            let entry = StepLog {
                step: adam.steps(),
                loss,
                lr,
            };
            log::debug!("step {} loss {:.6} lr {:.3e}", entry.step, entry.loss, entry.lr);
            sink(&entry);
            report.steps.push(entry);
        }
        report.epoch_loss.push(total);
        log::info!("epoch {epoch}: loss {total:.4}");
        let evaluate_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if evaluate_now {
            if let Some(score) = score_fn(params)? {
                log::info!("epoch {epoch}: dev score {score:.4}");
                if best.as_ref().map_or(true, |b| score >= b.0) {
                    best = Some((score, params.clone(), epoch));
                }
            }
        }
    }
    match best {
        Some((score, ps, epoch)) => {
            *params = ps;
            report.best_epoch = epoch;
            report.best_score = Some(score);
        }
        None => report.best_epoch = cfg.epochs,
    }
    Ok(report)
}

/// Top-K candidates for every instance.
pub fn prune_all(pruner: &Pruner, data: &[Instance]) -> Result<Vec<Vec<Candidate>>> {
    data.iter().map(|inst| pruner.predict(inst)).collect()
}

pub fn pruner_recall(pruner: &Pruner, data: &[Instance]) -> Result<Prf> {
    let cands = prune_all(pruner, data)?;
    let spans: Vec<Vec<Span>> = cands.iter().map(|c| c.iter().map(|x| x.span).collect()).collect();
    let golds: Vec<Vec<Span>> = data.iter().map(|i| i.gold_spans()).collect();
    let (_, prf) = recall_eval(spans.iter().map(|s| s.as_slice()).zip(golds.iter().map(|g| g.as_slice())));
    Ok(prf)
}

pub fn train_pruner(
    pruner: &mut Pruner,
    train: &[Instance],
    dev: &[Instance],
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    let mut params = std::mem::take(&mut pruner.params);
    let shell = pruner.clone();
    let result = run(
        &mut params,
        train.len(),
        cfg,
        seed,
        |g, _, i| shell.loss(g, &train[i]),
        |ps| {
            if dev.is_empty() {
                return Ok(None);
            }
            let mut p = shell.clone();
            p.params = ps.clone();
            let prf = pruner_recall(&p, dev)?;
            Ok(Some(prf.recall + 1e-3 * prf.f1))
        },
        sink,
    );
    pruner.params = params;
    result
}

/// A sentence together with the candidate spans the joint model sees.
#[derive(Debug, Clone)]
pub struct JointExample {
    pub instance: Instance,
    pub candidates: Vec<Span>,
}

pub fn joint_examples(data: &[Instance], cands: &[Vec<Candidate>]) -> Vec<JointExample> {
    data.iter()
        .zip(cands)
        .map(|(i, c)| JointExample {
            instance: i.clone(),
            candidates: c.iter().map(|x| x.span).collect(),
        })
        .collect()
}

pub fn predict_joint(model: &JointModel, data: &[JointExample]) -> Result<Vec<Prediction>> {
    data.iter()
        .map(|ex| {
            let probs = model.probabilities(&ex.instance, &ex.candidates)?;
            Ok(decode(&probs, &model.labels))
        })
        .collect()
}

pub fn evaluate_joint(model: &JointModel, data: &[JointExample]) -> Result<MetricReport> {
    let preds = predict_joint(model, data)?;
    let golds: Vec<Instance> = data.iter().map(|e| e.instance.clone()).collect();
    Ok(evaluate(&preds, &golds, &model.labels))
}

/// Dev selection score: Rel+ F1, then Ent F1 as a small tie-breaker.
pub fn selection_score(rep: &MetricReport) -> f64 {
    rep.rel_plus.prf().f1 + 1e-3 * rep.ent.prf().f1
}

pub fn train_joint(
    model: &mut JointModel,
    train: &[JointExample],
    dev: &[JointExample],
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    let mut params = std::mem::take(&mut model.params);
    let shell = model.clone();
    let result = run(
        &mut params,
        train.len(),
        cfg,
        seed,
        |g, _, i| shell.loss(g, &train[i].instance, &train[i].candidates),
        |ps| {
            if dev.is_empty() {
                return Ok(None);
            }
            let mut m = shell.clone();
            m.params = ps.clone();
            Ok(Some(selection_score(&evaluate_joint(&m, dev)?)))
        },
        sink,
    );
    model.params = params;
    result
}

/// Candidate entities processed per second: median over `reps` timed passes
/// after one warm-up pass.
pub fn throughput(model: &JointModel, data: &[JointExample], reps: usize) -> Result<f64> {
    let entities: usize = data.iter().map(|e| e.candidates.len()).sum();
    predict_joint(model, data)?;
    let mut rates = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        predict_joint(model, data)?;
        let secs = t.elapsed().as_secs_f64().max(1e-9);
        rates.push(entities as f64 / secs);
    }
    rates.sort_by(|a, b| a.total_cmp(b));
    Ok(rates[rates.len() / 2])
}
