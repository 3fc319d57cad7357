//! Receding-horizon episode engine: sample commands, decode a control
//! rollout, execute its first step, re-plan.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::command::{commanded_lateral, Command};
use crate::context::{lane_contexts, LaneContext, RECOVERY_RADIUS};
use crate::error::{Error, Result};
use crate::expert::{bang_bang, drift_gate, expert_controls_with, expert_rollout, ExpertConfig};
use crate::metrics::{ttc_flagged_pairs, AdeReference, MetricsAccumulator, MetricsReport};
use crate::policy::{
    make_ordering, returns_to_go, sample_commands_with, HighPolicyParams, Observation, Ordering, SubgameState,
    Trajectory,
};
use crate::realizer::{plan, ControlRollout, IntentFeatures, RealizerParams, RealizerSample, SceneFeatures};
use crate::scenario::Scenario;
use crate::scene::{colliding_pairs, integrate_bicycle, AgentState, Control, ControlBounds, SceneHistory, SceneState};

/// Distance from the route end at which an agent counts as arrived.
pub const ARRIVAL_MARGIN: f64 = 1.0;
/// Reward applied per step while an agent is off its route.
pub const OFF_ROUTE_PENALTY: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub progress: f64,
    pub collision: f64,
    pub accel: f64,
    pub ttc: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            progress: 1.0,
            collision: 10.0,
            accel: 0.1,
            ttc: 1.0,
        }
    }
}

/// Who produces the executed control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    #[default]
    Realizer,
    /// Command-following expert.
    Expert,
    /// Expert decisions executed at the control bounds.
    BangBang,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Commands are re-sampled every `hold_k` steps.
    pub hold_k: usize,
    /// Replace the intention embeddings with zeros.
    pub passive: bool,
    /// Keep each agent's place in the ordering from its first step instead
    /// of re-ordering every step. Newcomers join behind existing agents.
    pub freeze_ordering: bool,
    pub executor: Executor,
    /// Execute the expert for agents that drift past the gate thresholds.
    pub recovery: bool,
    pub reward: RewardWeights,
    pub bounds: ControlBounds,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_steps: 600,
            seed: 0,
            gamma: 0.99,
            hold_k: 1,
            passive: false,
            freeze_ordering: false,
            executor: Executor::Realizer,
            recovery: false,
            reward: RewardWeights::default(),
            bounds: ControlBounds::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if self.hold_k == 0 {
            return Err(Error::InvalidInput("hold_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidInput(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        let r = &self.reward;
        if [r.progress, r.collision, r.accel, r.ttc].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("reward weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Spawned { agent: u32 },
    Arrived { agent: u32 },
    HardAccel { agent: u32 },
    SharpTurn { agent: u32 },
    SafetyFlag { a: u32, b: u32 },
    Collision { a: u32, b: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    /// State before the step.
    pub state: AgentState,
    pub control: Control,
    pub command: Option<Command>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub agents: Vec<AgentRecord>,
    pub events: Vec<Event>,
    /// Predicted control rollout, realizer executor only.
    pub rollout: Option<ControlRollout>,
}

/// Observes every call into the dynamics.
pub trait StepProbe {
    fn on_integrate(&mut self, agent: u32, control: Control);
}

impl StepProbe for () {
    fn on_integrate(&mut self, _: u32, _: Control) {}
}

/// Parameters and settings shared by every step of an episode.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub high: &'a HighPolicyParams,
    pub low: &'a RealizerParams,
    pub expert: &'a ExpertConfig,
}

/// What [`step_closed_loop`] produced besides the next scene.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub next: SceneState,
    /// Sampled decisions this step (empty when commands were held).
    pub decisions: Vec<(u32, SubgameState, crate::command::Maneuver)>,
    pub commands: Vec<Command>,
    pub contexts: Vec<LaneContext>,
}

/// Commands held between re-sampling steps, keyed by agent id.
#[derive(Debug, Clone, Default)]
pub struct CommandHold {
    left: usize,
    commands: HashMap<u32, Command>,
    ranks: HashMap<u32, usize>,
}

impl CommandHold {
    fn ordering(&mut self, scene: &SceneState, freeze: bool) -> Ordering {
        let fresh = make_ordering(scene);
        if !freeze {
            return fresh;
        }
        for &i in &fresh.0 {
            let next = self.ranks.len();
            self.ranks.entry(scene.agents[i].id).or_insert(next);
        }
        let mut idx: Vec<usize> = (0..scene.agents.len()).collect();
        idx.sort_by_key(|&i| self.ranks[&scene.agents[i].id]);
        Ordering(idx)
    }
}

fn route_progress(scene: &SceneState, a: &AgentState) -> (f64, f64) {
    let p = scene.network.routes[a.route].path.project(a.position());
    (p.s, p.lateral)
}

/// Advances `history.latest()` by one step. The scene must already be the
/// latest history entry.
pub fn step_closed_loop(
    history: &SceneHistory,
    models: Models<'_>,
    cfg: &EpisodeConfig,
    hold: &mut CommandHold,
    rng: &mut ChaCha8Rng,
    probe: &mut dyn StepProbe,
) -> Result<StepOutput> {
    let scene = history
        .latest()
        .ok_or_else(|| Error::InvalidInput("scene history is empty".into()))?;
    let n = scene.agents.len();
    let contexts = lane_contexts(scene);

    let held = hold.left > 0 && scene.agents.iter().all(|a| hold.commands.contains_key(&a.id));
    let mut decisions = Vec::new();
    let commands: Vec<Command> = if held {
        hold.left -= 1;
        scene.agents.iter().map(|a| hold.commands[&a.id].clone()).collect()
    } else {
        let obs = Observation::with_contexts(scene, contexts.clone());
        let ordering = hold.ordering(scene, cfg.freeze_ordering);
        let s = sample_commands_with(scene, &obs, models.high, &ordering, &models.expert.waypoints, rng)?;
        for d in s.decisions {
            decisions.push((scene.agents[d.agent].id, d.state, d.maneuver));
        }
        hold.left = cfg.hold_k - 1;
        hold.commands = scene
            .agents
            .iter()
            .map(|a| a.id)
            .zip(s.commands.iter().cloned())
            .collect();
        s.commands
    };

    let mut rollout = None;
    let mut controls: Vec<Control> = match cfg.executor {
        Executor::Realizer => {
            let f = SceneFeatures::with_contexts(history, models.low.dims.t_h, &contexts)?;
            let intent = if cfg.passive {
                None
            } else {
                Some(IntentFeatures::new(
                    &scene.agents,
                    &commands,
                    models.low.dims.waypoints,
                )?)
            };
            let r = plan(&f, intent.as_ref(), models.low, &cfg.bounds)?;
            let first = r.first();
            rollout = Some(r);
            first
        }
        Executor::Expert => expert_controls_with(scene, &contexts, models.expert, Some(&commands))?,
        Executor::BangBang => expert_controls_with(scene, &contexts, models.expert, Some(&commands))?
            .into_iter()
            .map(|u| bang_bang(u, &models.expert.bounds))
            .collect(),
    };
    if cfg.recovery && cfg.executor == Executor::Realizer {
        let drifting: Vec<bool> = scene
            .agents
            .iter()
            .zip(&contexts)
            .zip(&commands)
            .map(|((a, c), cmd)| {
                !c.is_off_map()
                    && drift_gate(c, commanded_lateral(&scene.network.routes[a.route], cmd))
                        > crate::expert::GATE_ON_TRACK
            })
            .collect();
        if drifting.iter().any(|&d| d) {
            let expert = expert_controls_with(scene, &contexts, models.expert, Some(&commands))?;
            for i in 0..n {
                if drifting[i] {
                    controls[i] = expert[i];
                }
            }
        }
    }

    let mut next_agents = Vec::with_capacity(n);
    for (a, &u) in scene.agents.iter().zip(&controls) {
        probe.on_integrate(a.id, u);
        next_agents.push(integrate_bicycle(a, u, cfg.dt)?);
    }

    let w = &cfg.reward;
    let mut rewards: Vec<f64> = scene
        .agents
        .iter()
        .zip(&next_agents)
        .zip(&controls)
        .map(|((a, b), u)| {
            let (s0, _) = route_progress(scene, a);
            let (s1, _) = route_progress(scene, b);
            w.progress * (s1 - s0) - w.accel * u.accel.abs()
        })
        .collect();
    for (i, j) in colliding_pairs(&next_agents) {
        rewards[i] -= w.collision;
        rewards[j] -= w.collision;
    }
    let mut flagged = vec![false; n];
    for (i, j) in ttc_flagged_pairs(&scene.agents) {
        flagged[i] = true;
        flagged[j] = true;
    }
    for (r, f) in rewards.iter_mut().zip(&flagged) {
        if *f {
            *r -= w.ttc;
        }
    }

    let mut events = Vec::new();
    let mut survivors = Vec::with_capacity(n);
    for (i, b) in next_agents.into_iter().enumerate() {
        let route = &scene.network.routes[b.route];
        let (s, lat) = route_progress(scene, &b);
        if s >= route.length() - ARRIVAL_MARGIN && lat.abs() <= RECOVERY_RADIUS {
            events.push(Event::Arrived { agent: b.id });
        } else {
            if lat.abs() > RECOVERY_RADIUS {
                rewards[i] += OFF_ROUTE_PENALTY;
            }
            survivors.push(b);
        }
    }

    let agents = scene
        .agents
        .iter()
        .zip(&controls)
        .zip(&commands)
        .zip(&rewards)
        .map(|(((a, &u), c), &r)| AgentRecord {
            state: *a,
            control: u,
            command: Some(c.clone()),
            reward: r,
        })
        .collect();
    let next = scene.with_agents(scene.time + cfg.dt, survivors);
    Ok(StepOutput {
        record: StepRecord {
            time: scene.time,
            agents,
            events,
            rollout,
        },
        next,
        decisions,
        commands,
        contexts,
    })
}

/// Extra products of an episode used by the trainer.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    pub trajectories: Vec<Trajectory>,
    pub samples: Vec<RealizerSample>,
}

/// Knobs for collecting realizer training samples during an episode.
#[derive(Debug, Clone, Copy)]
pub struct SampleCollection {
    /// Keep every `stride`-th step.
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub records: Vec<StepRecord>,
    /// Summed agent reward per recorded step.
    pub rewards: Vec<f64>,
    pub report: MetricsReport,
    pub metrics: crate::metrics::MetricCounts,
    pub trace: EpisodeTrace,
}

impl EpisodeResult {
    pub fn episode_return(&self, gamma: f64) -> f64 {
        crate::policy::episode_return(&self.rewards, gamma)
    }
}

fn spawn_clear(scene: &SceneState, s: &AgentState) -> bool {
    let clearance = 2.0 * s.half_length + 4.0;
    scene
        .agents
        .iter()
        .all(|a| crate::network::dist(a.position(), s.position()) > clearance)
}

pub fn run_episode(cfg: &EpisodeConfig, models: Models<'_>, scenario: &Scenario) -> Result<EpisodeResult> {
    run_episode_with(cfg, models, scenario, None, &mut ())
}

/// Runs one episode. Collects training data when `collect` is set; `probe`
/// sees every call into the dynamics.
pub fn run_episode_with(
    cfg: &EpisodeConfig,
    models: Models<'_>,
    scenario: &Scenario,
    collect: Option<SampleCollection>,
    probe: &mut dyn StepProbe,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    models.low.dims.validate()?;
    let dims = models.low.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = SceneHistory::new(dims.t_h, cfg.dt);
    let mut scene = SceneState::new(0.0, vec![], scenario.network.clone());
    let mut hold = CommandHold::default();
    let mut next_spawn = 0usize;
    let mut pending: Vec<usize> = Vec::new();
    let mut metrics = MetricsAccumulator::new(
        cfg.dt,
        Some(AdeReference {
            network: scenario.network.clone(),
            expert: *models.expert,
            horizon: dims.t_f,
        }),
    );
    let mut records = Vec::new();
    let mut rewards = Vec::new();
    let mut per_agent: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut decisions: Vec<(u32, usize, SubgameState, crate::command::Maneuver)> = Vec::new();
    let mut trace = EpisodeTrace::default();

    for step in 0..cfg.max_steps {
        let time = step as f64 * cfg.dt;
        scene.time = time;
        while next_spawn < scenario.spawns.len() && scenario.spawns[next_spawn].time <= time + 1e-9 {
            pending.push(next_spawn);
            next_spawn += 1;
        }
        let mut spawned = Vec::new();
        pending.retain(|&k| {
            let s = scenario.spawn_state(k);
            if spawn_clear(&scene, &s) {
                scene.agents.push(s);
                spawned.push(s.id);
                false
            } else {
                true
            }
        });
        if scene.agents.is_empty() {
            if pending.is_empty() && next_spawn == scenario.spawns.len() {
                break;
            }
            continue;
        }
        if history
            .latest()
            .is_some_and(|l| (l.time - (time - cfg.dt)).abs() > 1e-9)
        {
            // live set was empty for a while: the window restarts
            history = SceneHistory::new(dims.t_h, cfg.dt);
        }
        history.push(scene.clone())?;

        let out = step_closed_loop(&history, models, cfg, &mut hold, &mut rng, probe)?;
        let mut record = out.record;
        for (id, state, m) in out.decisions {
            decisions.push((id, per_agent.get(&id).map_or(0, Vec::len), state, m));
        }
        for a in &record.agents {
            per_agent.entry(a.state.id).or_default().push(a.reward);
        }
        if let Some(c) = collect {
            if step % c.stride.max(1) == 0 {
                if let Some(s) = training_sample(&history, &out.commands, &out.contexts, models, cfg)? {
                    trace.samples.push(s);
                }
            }
        }
        let mut events: Vec<Event> = spawned.into_iter().map(|agent| Event::Spawned { agent }).collect();
        events.extend(metrics.push(&record)?);
        events.append(&mut record.events);
        record.events = events;
        rewards.push(record.agents.iter().map(|a| a.reward).sum());
        records.push(record);
        scene = out.next;
        if scene.agents.is_empty() && pending.is_empty() && next_spawn == scenario.spawns.len() {
            break;
        }
    }

    let returns: HashMap<u32, Vec<f64>> = per_agent
        .iter()
        .map(|(&id, r)| (id, returns_to_go(r, cfg.gamma)))
        .collect();
    trace.trajectories = decisions
        .into_iter()
        .map(|(id, k, state, m)| Trajectory {
            decisions: vec![(state, m)],
            ret: returns[&id][k],
        })
        .collect();
    let counts = metrics.counts();
    Ok(EpisodeResult {
        records,
        rewards,
        report: counts.report(cfg.dt),
        metrics: counts,
        trace,
    })
}

/// Expert recovery target for the current step; `None` when the expert has
/// no reference for some agent.
fn training_sample(
    history: &SceneHistory,
    commands: &[Command],
    contexts: &[LaneContext],
    models: Models<'_>,
    cfg: &EpisodeConfig,
) -> Result<Option<RealizerSample>> {
    let scene = history.latest().expect("history was just pushed");
    let dims = &models.low.dims;
    let target = match expert_rollout(scene, dims.t_f, models.expert, Some(commands), cfg.dt) {
        Ok(t) => t,
        Err(Error::OffMap { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let gates = scene
        .agents
        .iter()
        .zip(contexts)
        .zip(commands)
        .map(|((a, c), cmd)| drift_gate(c, commanded_lateral(&scene.network.routes[a.route], cmd)))
        .collect();
    let f = SceneFeatures::with_contexts(history, dims.t_h, contexts)?;
    let intent = if cfg.passive {
        None
    } else {
        Some(IntentFeatures::new(&scene.agents, commands, dims.waypoints)?)
    };
    RealizerSample::from_parts(f, intent, scene.agents.clone(), target, gates, dims).map(Some)
}

/// Seed for episode `k` of epoch `epoch`.
pub fn episode_seed(base: u64, epoch: usize, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | k as u64);
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EpisodeConfig::default().validate().is_ok());
        let bad = EpisodeConfig {
            dt: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EpisodeConfig {
            hold_k: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 0, 1));
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 1, 0));
        assert_eq!(episode_seed(1, 2, 3), episode_seed(1, 2, 3));
    }

    #[test]
    fn frozen_ordering_keeps_first_ranks() {
        let net = crate::scenario::intersection(2).build().unwrap().network;
        let car = |id: u32, x: f64| AgentState {
            id,
            x,
            y: -1.75,
            heading: 0.0,
            speed: 5.0,
            wheelbase: 2.7,
            half_length: 2.25,
            half_width: 0.9,
            route: 0,
        };
        let first = SceneState::new(0.0, vec![car(0, -40.0), car(1, -20.0)], net.clone());
        let later = SceneState::new(0.1, vec![car(2, -15.0), car(0, -12.0), car(1, -30.0)], net);
        assert_eq!(make_ordering(&later), Ordering(vec![1, 0, 2]));
        let mut hold = CommandHold::default();
        assert_eq!(hold.ordering(&first, true), Ordering(vec![1, 0]));
        assert_eq!(hold.ordering(&later, true), Ordering(vec![2, 1, 0]));
        assert_eq!(CommandHold::default().ordering(&later, false), make_ordering(&later));
    }
}
