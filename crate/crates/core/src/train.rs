//! Hybrid co-training: policy-gradient epochs on the command policy
//! interleaved with supervised realizer steps against expert recovery
//! targets gathered from the same rollouts.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{episode_seed, run_episode_with, EpisodeConfig, Executor, Models, SampleCollection};
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::policy::{reinforce_update, HighPolicyParams, Trajectory};
use crate::realizer::{batch_grad, batch_loss, sgd_step, LossWeights, LowObjective, RealizerParams, RealizerSample};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episode length during training.
    pub max_steps: usize,
    pub high_step: f64,
    pub low_step: f64,
    /// Realizer SGD steps per epoch.
    pub low_steps: usize,
    pub batch_size: usize,
    pub sample_stride: usize,
    pub replay_capacity: usize,
    pub heldout_size: usize,
    /// Gradient norm cap for realizer steps; 0 disables.
    pub grad_clip: f64,
    /// Let the expert drive drifting agents in training rollouts.
    pub recovery: bool,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            episodes_per_epoch: 4,
            max_steps: 300,
            high_step: 0.01,
            low_step: 0.5,
            low_steps: 60,
            batch_size: 16,
            sample_stride: 3,
            replay_capacity: 3000,
            heldout_size: 48,
            grad_clip: 1.0,
            recovery: true,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainCurves {
    /// Realizer loss on the held-out batch before training and after each epoch.
    pub heldout_loss: Vec<f64>,
    /// Mean summed-reward return of the epoch's rollouts.
    pub mean_return: Vec<f64>,
    /// Mean minibatch loss over the epoch's realizer steps.
    pub train_loss: Vec<f64>,
}

pub struct TrainOutcome {
    pub high: HighPolicyParams,
    pub low: RealizerParams,
    pub curves: TrainCurves,
}

fn clip(g: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
}

/// Expert-driven samples from episodes disjoint from the training seeds.
pub fn heldout_batch(
    cfg: &TrainConfig,
    episode: &EpisodeConfig,
    scenarios: &[Scenario],
    high: &HighPolicyParams,
    low: &RealizerParams,
    expert: &ExpertConfig,
) -> Result<Vec<RealizerSample>> {
    let ep = EpisodeConfig {
        executor: Executor::Expert,
        max_steps: cfg.max_steps,
        ..*episode
    };
    let models = Models { high, low, expert };
    let mut all = Vec::new();
    for (k, sc) in scenarios.iter().enumerate() {
        let e = EpisodeConfig {
            seed: episode_seed(cfg.seed ^ 0x5eed, usize::MAX >> 1, k),
            ..ep
        };
        let r = run_episode_with(&e, models, sc, Some(SampleCollection { stride: 1 }), &mut ())?;
        all.extend(r.trace.samples);
    }
    if all.len() <= cfg.heldout_size {
        return Ok(all);
    }
    let step = all.len() as f64 / cfg.heldout_size as f64;
    Ok((0..cfg.heldout_size)
        .map(|i| all[(i as f64 * step) as usize].clone())
        .collect())
}

/// Alternates rollouts, a policy-gradient step and realizer SGD steps for
/// `cfg.epochs` epochs. `on_epoch` sees the parameters after every
/// completed epoch.
pub fn cotrain(
    cfg: &TrainConfig,
    episode: &EpisodeConfig,
    scenarios: &[Scenario],
    expert: &ExpertConfig,
    high: HighPolicyParams,
    low: RealizerParams,
    on_epoch: &mut dyn FnMut(usize, &HighPolicyParams, &RealizerParams, &TrainCurves),
) -> Result<TrainOutcome> {
    if scenarios.is_empty() {
        return Err(Error::InvalidInput("co-training needs at least one scenario".into()));
    }
    episode.validate()?;
    let obj = LowObjective {
        weights: cfg.loss,
        bounds: episode.bounds,
        dt: episode.dt,
    };
    let mut curves = TrainCurves::default();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { high, low, curves });
    }
    let heldout = heldout_batch(cfg, episode, scenarios, &high, &low, expert)?;
    curves.heldout_loss.push(batch_loss(&low, &heldout, &obj)?);

    let (mut high, mut low) = (high, low);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut replay: VecDeque<RealizerSample> = VecDeque::with_capacity(cfg.replay_capacity);
    let train_ep = EpisodeConfig {
        max_steps: cfg.max_steps,
        executor: Executor::Realizer,
        recovery: cfg.recovery,
        ..*episode
    };
    for epoch in 0..cfg.epochs {
        let models = Models {
            high: &high,
            low: &low,
            expert,
        };
        let results = (0..cfg.episodes_per_epoch)
            .into_par_iter()
            .map(|k| {
                let e = EpisodeConfig {
                    seed: episode_seed(cfg.seed, epoch, k),
                    ..train_ep
                };
                let collect = SampleCollection {
                    stride: cfg.sample_stride,
                };
                run_episode_with(&e, models, &scenarios[k % scenarios.len()], Some(collect), &mut ())
            })
            .collect::<Result<Vec<_>>>()?;

        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut ret = 0.0;
        for r in results {
            ret += r.episode_return(episode.gamma);
            trajectories.extend(r.trace.trajectories);
            for s in r.trace.samples {
                if replay.len() == cfg.replay_capacity {
                    replay.pop_front();
                }
                replay.push_back(s);
            }
        }
        curves.mean_return.push(ret / cfg.episodes_per_epoch.max(1) as f64);
        if !trajectories.is_empty() {
            high = reinforce_update(&high, &trajectories, cfg.high_step)?;
        }

        let mut loss_sum = 0.0;
        let steps = if replay.is_empty() { 0 } else { cfg.low_steps };
        for _ in 0..steps {
            let k = cfg.batch_size.min(replay.len());
            let mut idx = sample_indices(&mut rng, replay.len(), k).into_vec();
            idx.sort_unstable();
            let batch: Vec<RealizerSample> = idx.iter().map(|&i| replay[i].clone()).collect();
            let (l, mut g) = batch_grad(&low, &batch, &obj)?;
            clip(&mut g, cfg.grad_clip);
            low = sgd_step(&low, &g, cfg.low_step)?;
            loss_sum += l;
        }
        curves
            .train_loss
            .push(if steps == 0 { 0.0 } else { loss_sum / steps as f64 });
        let held = batch_loss(&low, &heldout, &obj)?;
        if !held.is_finite() {
            return Err(Error::Divergence(format!(
                "held-out realizer loss {held} at epoch {epoch}"
            )));
        }
        curves.heldout_loss.push(held);
        on_epoch(epoch, &high, &low, &curves);
    }
    Ok(TrainOutcome { high, low, curves })
}
