//! Episodic training with best-on-validation checkpointing, and accuracy
//! evaluation with a 95% confidence interval.

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, Episode, Split};
use crate::error::Result;
use crate::numcore::loss::{argmax, softmax_cross_entropy};
use crate::numcore::{OptimizerConfig, OptimizerKind, OptimizerState, Real, RngStream, Tensor};

use super::model::{FewShotModel, Role, Want};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub k_way: usize,
    pub n_shot: usize,
    /// Queries per episode in total.
    pub n_query: usize,
    pub optimizer: OptimizerConfig,
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            k_way: 5,
            n_shot: 5,
            n_query: 25,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adam(),
                lr: 1e-3,
                weight_decay: 0.0,
                decay: None,
            },
            val_every: 250,
            val_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// `(episode, validation accuracy)` at each checkpoint.
    pub validation: Vec<(usize, f64)>,
    pub best_episode: usize,
    pub best_val: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

/// Anything that labels the queries of an episode.
pub trait EpisodeClassifier {
    fn predict(&self, ds: &Dataset, episode: &Episode) -> Result<Vec<usize>>;
}

impl<F: Real> EpisodeClassifier for FewShotModel<F> {
    fn predict(&self, ds: &Dataset, ep: &Episode) -> Result<Vec<usize>> {
        let support = ds.gather(&ep.support).cast::<F>();
        let query = ds.gather(&ep.query).cast::<F>();
        let logits = self.logits(&support, &ep.support_labels(), ep.k_way(), &query)?;
        Ok((0..logits.batch()).map(|i| argmax(logits.item(i))).collect())
    }
}

/// Images and roles of a full episode, supports first.
pub fn episode_inputs<F: Real>(ds: &Dataset, ep: &Episode) -> (Tensor<F>, Vec<Role>) {
    let ids: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    let roles = ep
        .support_labels()
        .into_iter()
        .map(Role::Support)
        .chain(ep.query_labels.iter().map(|&l| Role::Query(l)))
        .collect();
    (ds.gather(&ids).cast(), roles)
}

/// Trains on `Split::Train` episodes and restores the parameters that scored
/// best on `Split::Val`.
pub fn train_fewshot<F: Real>(
    model: &mut FewShotModel<F>,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainLog> {
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = TrainLog {
        best_val: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.params();
    let mut train_rng = rng.child(0x7a1);
    let val_cfg = EvalConfig {
        episodes: cfg.val_episodes,
        k_way: cfg.k_way,
        n_shot: cfg.n_shot,
        n_query: cfg.n_query,
    };
    let val_every = cfg.val_every.max(1);
    for ep_i in 1..=cfg.episodes {
        let ep = sample_episode(ds, Split::Train, cfg.k_way, cfg.n_shot, cfg.n_query, &mut train_rng)?;
        let (x, roles) = episode_inputs::<F>(ds, &ep);
        let g = model.episode_grads(
            Some((&x, &roles)),
            None,
            cfg.k_way,
            &softmax_cross_entropy,
            Want {
                params: true,
                input: false,
            },
        )?;
        let mut grads = g.encoder.unwrap_or_default();
        grads.extend(g.relation.unwrap_or_default());
        let mut params = model.params();
        opt.step(&mut params, &grads)?;
        model.set_params(params)?;
        log.losses.push(g.loss.to_f64());

        if ep_i % val_every == 0 || ep_i == cfg.episodes {
            // Same validation episodes at every checkpoint.
            let mut vrng = rng.child(0x7a2);
            let acc = eval_accuracy(model, ds, Split::Val, &val_cfg, &mut vrng)?.mean;
            log::debug!("episode {ep_i}: loss {:.4}, val acc {acc:.4}", g.loss.to_f64());
            log.validation.push((ep_i, acc));
            if acc > log.best_val {
                log.best_val = acc;
                log.best_episode = ep_i;
                best = model.params();
            }
        }
    }
    model.set_params(best)?;
    Ok(log)
}

/// Mean query accuracy over `cfg.episodes` episodes from `split`.
pub fn eval_accuracy<C: EpisodeClassifier + ?Sized>(
    clf: &C,
    ds: &Dataset,
    split: Split,
    cfg: &EvalConfig,
    rng: &mut RngStream,
) -> Result<AccuracyReport> {
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let ep = sample_episode(ds, split, cfg.k_way, cfg.n_shot, cfg.n_query, rng)?;
        let pred = clf.predict(ds, &ep)?;
        let correct = pred.iter().zip(&ep.query_labels).filter(|(p, l)| p == l).count();
        per_episode.push(correct as f64 / ep.query.len().max(1) as f64);
    }
    let (mean, ci95) = mean_ci95(&per_episode);
    Ok(AccuracyReport {
        mean,
        ci95,
        per_episode,
    })
}

/// Mean and 1.96·s/√n (sample standard deviation).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}
