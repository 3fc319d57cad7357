//! Finite-difference check of the realizer gradient on seeded fixtures.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::command::{Command, Maneuver};
use crate::error::Result;
use crate::expert::RecoveryTarget;
use crate::network::{Lane, Polyline, RoadNetwork};
use crate::realizer::{grad_low, sample_loss, LowObjective, RealizerDims, RealizerParams, RealizerSample};
use crate::scene::{AgentState, SceneHistory, SceneState};

/// Two side-by-side agents inside each other's safety distance with random
/// commands, targets and gates. The output head is enlarged so every loss
/// term carries gradient.
pub fn fixture(seed: u64, dims: RealizerDims, dt: f64) -> Result<(RealizerParams, RealizerSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = |id: &str, y: f64| -> Result<Lane> {
        Ok(Lane {
            id: id.into(),
            centerline: Polyline::new(vec![[-100.0, y], [100.0, y]])?,
            width: 3.5,
            speed_limit: 10.0,
            signal: None,
        })
    };
    let net = Arc::new(RoadNetwork::new(
        vec![lane("a", 0.0)?, lane("b", 2.4)?],
        vec![],
        vec![("a".into(), vec![0]), ("b".into(), vec![1])],
    )?);
    let agents: Vec<AgentState> = (0..2)
        .map(|i| AgentState {
            id: i,
            x: rng.gen_range(-0.3..0.3),
            y: 2.4 * i as f64,
            heading: rng.gen_range(-0.1..0.1),
            speed: rng.gen_range(3.0..8.0),
            wheelbase: 2.7,
            half_length: 2.25,
            half_width: 0.9,
            route: i as usize,
        })
        .collect();
    let mut history = SceneHistory::new(dims.t_h, dt);
    for k in (0..dims.t_h).rev() {
        let back = k as f64 * dt;
        let snap = agents
            .iter()
            .map(|a| AgentState {
                x: a.x - a.speed * a.heading.cos() * back,
                y: a.y - a.speed * a.heading.sin() * back,
                ..*a
            })
            .collect();
        history.push(SceneState::new(-back, snap, net.clone()))?;
    }
    let commands: Vec<Command> = agents
        .iter()
        .map(|a| Command {
            maneuver: Maneuver::from_index(rng.gen_range(0..Maneuver::COUNT)).unwrap(),
            waypoints: (1..=dims.waypoints)
                .map(|w| [a.x + 5.0 * w as f64, a.y + rng.gen_range(-1.0..1.0)])
                .collect(),
        })
        .collect();
    let target = RecoveryTarget {
        positions: agents
            .iter()
            .map(|a| {
                (1..=dims.t_f)
                    .map(|k| {
                        let s = a.speed * dt * k as f64;
                        [a.x + s + rng.gen_range(-0.5..0.5), a.y + rng.gen_range(-0.5..0.5)]
                    })
                    .collect()
            })
            .collect(),
    };
    let gates = vec![rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
    let sample = RealizerSample::new(&history, Some(&commands), target, gates, &dims)?;
    let mut params = RealizerParams::init(dims, seed.wrapping_add(100));
    for b in params.blocks() {
        if b.name == "dec.out_w" || b.name == "dec.out_b" {
            for v in &mut params.values[b.offset..b.offset + b.rows * b.cols] {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    Ok((params, sample))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub seed: u64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub fixtures: usize,
    /// Coordinates with |g| above the floor.
    pub checked: usize,
    pub max_rel: f64,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tolerance && self.checked > 0
    }
}

/// Compares `grad_low` against a five-point central difference with step
/// `h` on `seeds`; coordinates with |g| <= `floor` are skipped.
pub fn run(
    seeds: &[u64],
    dims: RealizerDims,
    obj: &LowObjective,
    h: f64,
    floor: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        fixtures: seeds.len(),
        checked: 0,
        max_rel: 0.0,
        worst: None,
        tolerance,
    };
    for &seed in seeds {
        let (params, sample) = fixture(seed, dims, obj.dt)?;
        let (_, g) = grad_low(&params, &sample, obj)?;
        let numeric: Vec<f64> = (0..params.values.len())
            .into_par_iter()
            .map(|i| {
                let f = |d: f64| {
                    let mut p = params.clone();
                    p.values[i] += d;
                    sample_loss(&p, &sample, obj).map(|l| l.total)
                };
                Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
            })
            .collect::<Result<_>>()?;
        for (index, (&a, &n)) in g.iter().zip(&numeric).enumerate() {
            if a.abs() <= floor {
                continue;
            }
            report.checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs());
            if rel > report.max_rel || report.worst.is_none() {
                report.max_rel = report.max_rel.max(rel);
                report.worst = Some(Mismatch {
                    seed,
                    index,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    Ok(report)
}
