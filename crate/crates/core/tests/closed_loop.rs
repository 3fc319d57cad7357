use std::sync::Arc;

use hsim_core::closed_loop::*;
use hsim_core::policy::{episode_return, HighPolicyDims, HighPolicyParams};
use hsim_core::realizer::{RealizerDims, RealizerParams};
use hsim_core::scenario::{intersection, straight_road, Scenario};
use hsim_core::train::{cotrain, TrainConfig};
use hsim_core::{Control, ExpertConfig};

fn dims(t_f: usize) -> RealizerDims {
    RealizerDims {
        d_z: 8,
        d_c: 4,
        t_h: 4,
        t_f,
        waypoints: 4,
    }
}

fn small_intersection() -> Scenario {
    intersection(4).build().unwrap()
}

fn short(cfg: EpisodeConfig) -> EpisodeConfig {
    EpisodeConfig { max_steps: 150, ..cfg }
}

#[derive(Default)]
struct Probe {
    calls: Vec<(u32, Control)>,
}

impl StepProbe for Probe {
    fn on_integrate(&mut self, agent: u32, control: Control) {
        self.calls.push((agent, control));
    }
}

fn bits(u: Control) -> (u64, u64) {
    (u.accel.to_bits(), u.steer.to_bits())
}

#[test]
fn only_the_first_rollout_step_reaches_the_dynamics() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 1);
    let low = RealizerParams::init(dims(6), 2);
    let expert = ExpertConfig::default();
    let mut probe = Probe::default();
    let cfg = short(EpisodeConfig::default());
    let r = run_episode_with(
        &cfg,
        Models {
            high: &high,
            low: &low,
            expert: &expert,
        },
        &sc,
        None,
        &mut probe,
    )
    .unwrap();
    assert!(!r.records.is_empty());
    let mut calls = probe.calls.iter();
    let mut later_differs = 0;
    for rec in &r.records {
        let rollout = rec.rollout.as_ref().unwrap();
        assert_eq!(rollout.controls.len(), rec.agents.len());
        for (a, us) in rec.agents.iter().zip(&rollout.controls) {
            assert_eq!(bits(a.control), bits(us[0]));
            let &(id, u) = calls.next().expect("one dynamics call per agent");
            assert_eq!(id, a.state.id);
            assert_eq!(bits(u), bits(us[0]));
            if us[1..].iter().all(|v| bits(*v) != bits(us[0])) {
                later_differs += 1;
            }
        }
    }
    assert!(calls.next().is_none());
    assert!(later_differs > 0);
}

#[test]
fn zeroed_head_makes_horizon_irrelevant() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 3);
    let mut long = RealizerParams::init(dims(8), 4);
    long.zero_head_beyond(1);
    let one = long.with_horizon(1).unwrap();
    let expert = ExpertConfig::default();
    let cfg = short(EpisodeConfig::default());
    let a = run_episode(
        &cfg,
        Models {
            high: &high,
            low: &long,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    let b = run_episode(
        &cfg,
        Models {
            high: &high,
            low: &one,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        for (p, q) in x.agents.iter().zip(&y.agents) {
            assert_eq!(bits(p.control), bits(q.control));
            assert_eq!(p.state, q.state);
        }
    }
}

#[test]
fn same_seed_same_records() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 5);
    let low = RealizerParams::init(dims(4), 6);
    let expert = ExpertConfig::default();
    let m = Models {
        high: &high,
        low: &low,
        expert: &expert,
    };
    let cfg = short(EpisodeConfig {
        seed: 9,
        ..Default::default()
    });
    let a = run_episode(&cfg, m, &sc).unwrap();
    let b = run_episode(&cfg, m, &sc).unwrap();
    assert_eq!(a.records, b.records);
    let c = run_episode(&EpisodeConfig { seed: 10, ..cfg }, m, &sc).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn empty_scenario_gives_nothing() {
    let sc = Scenario::empty(Arc::new(hsim_core::RoadNetwork::new(vec![], vec![], vec![]).unwrap()));
    let high = HighPolicyParams::zeros(HighPolicyDims::default());
    let low = RealizerParams::zeros(dims(2));
    let expert = ExpertConfig::default();
    let r = run_episode(
        &EpisodeConfig::default(),
        Models {
            high: &high,
            low: &low,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    assert!(r.records.is_empty());
    assert!(r.rewards.is_empty());
    assert_eq!(r.report.total_distance, 0.0);
    assert_eq!(r.report.collision_per_km, 0.0);
    assert!(r.report.zero_distance);
}

#[test]
fn episode_return_is_discounted_step_rewards() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 7);
    let low = RealizerParams::init(dims(3), 8);
    let expert = ExpertConfig::default();
    let cfg = short(EpisodeConfig {
        gamma: 0.95,
        ..Default::default()
    });
    let r = run_episode(
        &cfg,
        Models {
            high: &high,
            low: &low,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    let summed: Vec<f64> = r
        .records
        .iter()
        .map(|s| s.agents.iter().map(|a| a.reward).sum())
        .collect();
    assert_eq!(r.rewards, summed);
    assert_eq!(r.episode_return(0.95), episode_return(&summed, 0.95));
}

#[test]
fn passive_matches_zero_intention_weights() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 11);
    let mut low = RealizerParams::init(dims(3), 12);
    low.zero_intent_encoder();
    let expert = ExpertConfig::default();
    let m = Models {
        high: &high,
        low: &low,
        expert: &expert,
    };
    let cfg = short(EpisodeConfig::default());
    let a = run_episode(&cfg, m, &sc).unwrap();
    let b = run_episode(&EpisodeConfig { passive: true, ..cfg }, m, &sc).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn held_commands_follow_the_resampling_schedule() {
    let sc = straight_road().build().unwrap();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 13);
    let low = RealizerParams::init(dims(3), 14);
    let expert = ExpertConfig::default();
    let cfg = short(EpisodeConfig {
        hold_k: 4,
        executor: Executor::Expert,
        ..Default::default()
    });
    let r = run_episode(
        &cfg,
        Models {
            high: &high,
            low: &low,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    // re-sampling happens when a new agent appears or k steps have passed
    let mut last = 0;
    let mut changes = 0;
    for t in 1..r.records.len() {
        let (p, q) = (&r.records[t - 1], &r.records[t]);
        let new_agent = q
            .agents
            .iter()
            .any(|a| p.agents.iter().all(|b| b.state.id != a.state.id));
        let scheduled = new_agent || t - last == 4;
        if scheduled {
            last = t;
        }
        for a in &q.agents {
            if let Some(b) = p.agents.iter().find(|b| b.state.id == a.state.id) {
                if a.command != b.command {
                    changes += 1;
                    assert!(scheduled, "agent {} changed command at step {t}", a.state.id);
                }
            }
        }
    }
    assert!(changes > 0);
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let sc = small_intersection();
    let high = HighPolicyParams::init(HighPolicyDims::default(), 15);
    let low = RealizerParams::fresh(dims(3), 16);
    let tc = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = cotrain(
        &tc,
        &EpisodeConfig::default(),
        &[sc],
        &ExpertConfig::default(),
        high.clone(),
        low.clone(),
        &mut |_, _, _, _| {},
    )
    .unwrap();
    assert_eq!(out.high, high);
    assert_eq!(out.low, low);
    assert!(out.curves.heldout_loss.is_empty());
}

fn tiny_train(threads: usize) -> (HighPolicyParams, RealizerParams) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let tc = TrainConfig {
            epochs: 2,
            episodes_per_epoch: 3,
            max_steps: 80,
            low_steps: 5,
            seed: 3,
            ..Default::default()
        };
        let out = cotrain(
            &tc,
            &EpisodeConfig::default(),
            &[small_intersection()],
            &ExpertConfig::default(),
            HighPolicyParams::init(HighPolicyDims::default(), 1),
            RealizerParams::fresh(dims(3), 2),
            &mut |_, _, _, _| {},
        )
        .unwrap();
        (out.high, out.low)
    })
}

#[test]
fn cotraining_is_thread_count_invariant() {
    let a = tiny_train(1);
    let b = tiny_train(4);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn distilled_realizer_reaches_route_end() {
    let mut file = straight_road();
    file.spawns.truncate(1);
    let sc = file.build().unwrap();
    let expert = ExpertConfig::default();
    let tc = TrainConfig {
        epochs: 12,
        episodes_per_epoch: 2,
        max_steps: 200,
        high_step: 0.0,
        seed: 4,
        ..Default::default()
    };
    let high = HighPolicyParams::zeros(HighPolicyDims::default());
    let out = cotrain(
        &tc,
        &EpisodeConfig::default(),
        std::slice::from_ref(&sc),
        &expert,
        high,
        RealizerParams::fresh(dims(4), 5),
        &mut |_, _, _, _| {},
    )
    .unwrap();
    let cfg = EpisodeConfig {
        seed: 77,
        ..Default::default()
    };
    let r = run_episode(
        &cfg,
        Models {
            high: &out.high,
            low: &out.low,
            expert: &expert,
        },
        &sc,
    )
    .unwrap();
    let arrived = r
        .records
        .iter()
        .any(|s| s.events.contains(&Event::Arrived { agent: 0 }));
    assert!(arrived && r.records.len() < cfg.max_steps, "{} steps", r.records.len());
}

#[test]
fn single_junction_returns_improve() {
    let mut file = intersection(2);
    file.name = "junction".into();
    let sc = file.build().unwrap();
    let tc = TrainConfig {
        epochs: 20,
        episodes_per_epoch: 6,
        max_steps: 200,
        high_step: 0.002,
        low_steps: 20,
        seed: 8,
        ..Default::default()
    };
    let out = cotrain(
        &tc,
        &EpisodeConfig::default(),
        &[sc],
        &ExpertConfig::default(),
        HighPolicyParams::init(HighPolicyDims::default(), 9),
        RealizerParams::fresh(dims(4), 10),
        &mut |_, _, _, _| {},
    )
    .unwrap();
    let r = &out.curves.mean_return;
    let windows: Vec<f64> = r.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(windows.last().unwrap() >= windows.first().unwrap(), "{windows:?}");
}
