//! Ordered leader-follower command policy.
//!
//! Agents decide in an ordering `H`. Agent `h_i` observes the scene plus the
//! commands already issued by `h_1 .. h_{i-1}` (its sub-game state), so the
//! joint maneuver distribution factorizes into a product of per-agent
//! conditionals. Maneuver scores come from a two-layer tanh network; the
//! waypoint lateral offset comes from a deterministic head on the same
//! hidden layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::command::{Command, Maneuver, WaypointSpec};
use crate::context::{lane_contexts, LaneContext};
use crate::error::{Error, Result};
use crate::network::{dist, Point};
use crate::scene::SceneState;

/// Neighbors described in each agent's scene features.
pub const NEIGHBORS: usize = 3;
const SELF_FEATURES: usize = 8;
const NEIGHBOR_FEATURES: usize = 5;
pub const SCENE_FEATURES: usize = SELF_FEATURES + NEIGHBORS * NEIGHBOR_FEATURES;
/// Per preceding command: one-hot maneuver weighted by proximity, and by the
/// predecessor's closeness to a conflict point.
pub const SLOT_DIM: usize = 2 * Maneuver::COUNT;
/// Range scale of the proximity weight in command slots.
const SLOT_RANGE: f64 = 15.0;
/// Maximum lateral offset emitted by the waypoint head.
const OFFSET_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighPolicyDims {
    pub hidden: usize,
}

impl Default for HighPolicyDims {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

impl HighPolicyDims {
    pub fn input(&self) -> usize {
        SCENE_FEATURES + SLOT_DIM
    }

    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input()
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + Maneuver::COUNT * self.hidden
    }
    fn wo(&self) -> usize {
        self.b2() + Maneuver::COUNT
    }
    fn bo(&self) -> usize {
        self.wo() + self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.bo() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighPolicyParams {
    pub dims: HighPolicyDims,
    pub values: Vec<f64>,
}

impl HighPolicyParams {
    pub fn zeros(dims: HighPolicyDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    /// Small random scoring weights; the offset head starts at zero.
    pub fn init(dims: HighPolicyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let s1 = 1.0 / (dims.input() as f64).sqrt();
        for v in &mut p.values[dims.w1()..dims.b1()] {
            *v = rng.gen_range(-s1..s1);
        }
        let s2 = 0.1 / (dims.hidden as f64).sqrt();
        for v in &mut p.values[dims.w2()..dims.b2()] {
            *v = rng.gen_range(-s2..s2);
        }
        p
    }

    pub fn from_values(dims: HighPolicyDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(Error::Arity {
                expected: dims.param_count(),
                got: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    fn w1(&self, h: usize, i: usize) -> f64 {
        self.values[self.dims.w1() + h * self.dims.input() + i]
    }

    fn w2(&self, m: usize, h: usize) -> f64 {
        self.values[self.dims.w2() + m * self.dims.hidden + h]
    }

    /// Mutable view of the first-layer weights reading command slots.
    pub fn slot_weights_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let d = self.dims;
        let (input, start) = (d.input(), d.w1());
        self.values[start..d.b1()]
            .iter_mut()
            .enumerate()
            .filter(move |(k, _)| k % input >= SCENE_FEATURES)
            .map(|(_, v)| v)
    }
}

/// Priority ordering of agent indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering(pub Vec<usize>);

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Ordering((0..n).collect())
    }

    pub fn is_valid(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.0.len() == n && self.0.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    }
}

/// Agents by ascending Euclidean distance to the nearest network conflict
/// point; ties keep index order.
pub fn make_ordering(scene: &SceneState) -> Ordering {
    let d: Vec<f64> = scene
        .agents
        .iter()
        .map(|a| {
            scene
                .network
                .conflict_points()
                .map(|p| dist(p, a.position()))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    ordering_from_distances(&d)
}

pub fn ordering_from_distances(d: &[f64]) -> Ordering {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ordering(idx)
}

/// Per-scene data shared by every agent's sub-game state.
#[derive(Debug, Clone)]
pub struct Observation {
    pub contexts: Vec<LaneContext>,
    pub features: Vec<[f64; SCENE_FEATURES]>,
    positions: Vec<Point>,
    conflict_proximity: Vec<f64>,
}

impl Observation {
    pub fn new(scene: &SceneState) -> Self {
        let contexts = lane_contexts(scene);
        Self::with_contexts(scene, contexts)
    }

    pub fn with_contexts(scene: &SceneState, contexts: Vec<LaneContext>) -> Self {
        let agents = &scene.agents;
        let conflict_proximity: Vec<f64> = contexts.iter().map(|c| LaneContext::proximity(c.conflict)).collect();
        let mut features = Vec::with_capacity(agents.len());
        for (i, a) in agents.iter().enumerate() {
            let c = &contexts[i];
            let mut f = [0.0; SCENE_FEATURES];
            f[0] = a.speed / 10.0;
            f[1] = c.projection.lateral / 2.0;
            f[2] = c.heading_error;
            f[3] = LaneContext::proximity(c.red_stop);
            f[4] = LaneContext::proximity(c.leader.map(|l| l.gap));
            f[5] = c.leader.map_or(0.0, |l| (a.speed - l.speed) / 10.0);
            f[6] = conflict_proximity[i];
            f[7] = LaneContext::proximity(Some(c.remaining()));
            // k nearest neighbors by distance, ties by id
            let mut others: Vec<(f64, u32, usize)> = agents
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, b)| (dist(a.position(), b.position()), b.id, j))
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let (cs, sn) = (a.heading.cos(), a.heading.sin());
            let va = a.velocity();
            for (k, &(_, _, j)) in others.iter().take(NEIGHBORS).enumerate() {
                let b = &agents[j];
                let (dx, dy) = (b.x - a.x, b.y - a.y);
                let vb = b.velocity();
                let (dvx, dvy) = (vb[0] - va[0], vb[1] - va[1]);
                let base = SELF_FEATURES + k * NEIGHBOR_FEATURES;
                f[base] = (cs * dx + sn * dy) / 20.0;
                f[base + 1] = (-sn * dx + cs * dy) / 20.0;
                f[base + 2] = (cs * dvx + sn * dvy) / 10.0;
                f[base + 3] = (-sn * dvx + cs * dvy) / 10.0;
                f[base + 4] = conflict_proximity[j];
            }
            features.push(f);
        }
        Self {
            contexts,
            features,
            positions: agents.iter().map(|a| a.position()).collect(),
            conflict_proximity,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn slot(&self, agent: usize, predecessor: usize, maneuver: Maneuver) -> [f64; SLOT_DIM] {
        let mut s = [0.0; SLOT_DIM];
        let d = dist(self.positions[agent], self.positions[predecessor]);
        s[maneuver.index()] = (-d / SLOT_RANGE).exp();
        s[Maneuver::COUNT + maneuver.index()] = self.conflict_proximity[predecessor];
        s
    }
}

/// Scene features of one agent plus the embedded commands of its
/// predecessors, zero-padded to `N - 1` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgameState {
    pub features: [f64; SCENE_FEATURES],
    pub slots: Vec<[f64; SLOT_DIM]>,
}

impl SubgameState {
    /// Network input: scene features followed by the slot sum.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(SCENE_FEATURES + SLOT_DIM);
        x.extend_from_slice(&self.features);
        let mut pooled = [0.0; SLOT_DIM];
        for s in &self.slots {
            for (p, v) in pooled.iter_mut().zip(s) {
                *p += v;
            }
        }
        x.extend_from_slice(&pooled);
        x
    }
}

/// Sub-game state of the agent at position `pos` of `ordering`, given the
/// maneuvers already chosen by positions `0..pos`.
pub fn build_subgame_state(
    obs: &Observation,
    ordering: &Ordering,
    preceding: &[Maneuver],
    pos: usize,
) -> Result<SubgameState> {
    let n = obs.len();
    if !ordering.is_valid(n) {
        return Err(Error::InvalidInput(
            "ordering is not a permutation of the agents".into(),
        ));
    }
    if preceding.len() != pos || pos >= n {
        return Err(Error::Arity {
            expected: pos,
            got: preceding.len(),
        });
    }
    let agent = ordering.0[pos];
    let mut slots = vec![[0.0; SLOT_DIM]; n.saturating_sub(1)];
    for (k, &m) in preceding.iter().enumerate() {
        slots[k] = obs.slot(agent, ordering.0[k], m);
    }
    Ok(SubgameState {
        features: obs.features[agent],
        slots,
    })
}

struct Forward {
    hidden: Vec<f64>,
    log_probs: [f64; Maneuver::COUNT],
}

fn forward(params: &HighPolicyParams, x: &[f64]) -> Forward {
    let d = params.dims;
    let mut hidden = vec![0.0; d.hidden];
    for (h, out) in hidden.iter_mut().enumerate() {
        let mut z = params.values[d.b1() + h];
        for (i, xi) in x.iter().enumerate() {
            z += params.w1(h, i) * xi;
        }
        *out = z.tanh();
    }
    let mut logits = [0.0; Maneuver::COUNT];
    for (m, l) in logits.iter_mut().enumerate() {
        let mut z = params.values[d.b2() + m];
        for (h, hv) in hidden.iter().enumerate() {
            z += params.w2(m, h) * hv;
        }
        *l = z;
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let mut log_probs = [0.0; Maneuver::COUNT];
    for (lp, l) in log_probs.iter_mut().zip(&logits) {
        *lp = l - lse;
    }
    Forward { hidden, log_probs }
}

/// Maneuver log-probabilities for one sub-game state.
pub fn maneuver_log_probs(params: &HighPolicyParams, state: &SubgameState) -> [f64; Maneuver::COUNT] {
    forward(params, &state.input()).log_probs
}

/// Lateral waypoint offset emitted by the deterministic head.
pub fn waypoint_offset(params: &HighPolicyParams, state: &SubgameState) -> f64 {
    let d = params.dims;
    let f = forward(params, &state.input());
    let mut z = params.values[d.bo()];
    for (h, hv) in f.hidden.iter().enumerate() {
        z += params.values[d.wo() + h] * hv;
    }
    OFFSET_SCALE * z.tanh()
}

/// Gradient of `log pi(maneuver | state)` with respect to all parameters.
pub fn log_prob_grad(params: &HighPolicyParams, state: &SubgameState, maneuver: Maneuver) -> Vec<f64> {
    let mut g = vec![0.0; params.dims.param_count()];
    add_log_prob_grad(params, state, maneuver, 1.0, &mut g);
    g
}

fn add_log_prob_grad(params: &HighPolicyParams, state: &SubgameState, maneuver: Maneuver, weight: f64, g: &mut [f64]) {
    let d = params.dims;
    let x = state.input();
    let f = forward(params, &x);
    let mut dlogits = [0.0; Maneuver::COUNT];
    for (m, dl) in dlogits.iter_mut().enumerate() {
        let target = if m == maneuver.index() { 1.0 } else { 0.0 };
        *dl = weight * (target - f.log_probs[m].exp());
    }
    let mut dhidden = vec![0.0; d.hidden];
    for (m, dl) in dlogits.iter().enumerate() {
        g[d.b2() + m] += dl;
        for h in 0..d.hidden {
            g[d.w2() + m * d.hidden + h] += dl * f.hidden[h];
            dhidden[h] += dl * params.w2(m, h);
        }
    }
    for h in 0..d.hidden {
        let dz = dhidden[h] * (1.0 - f.hidden[h] * f.hidden[h]);
        g[d.b1() + h] += dz;
        let row = d.w1() + h * d.input();
        for (i, xi) in x.iter().enumerate() {
            g[row + i] += dz * xi;
        }
    }
}

/// One agent's sampled decision, kept for the policy-gradient update.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub agent: usize,
    pub state: SubgameState,
    pub maneuver: Maneuver,
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct CommandSample {
    /// Commands indexed by agent (not by ordering position).
    pub commands: Vec<Command>,
    /// Decisions in ordering order.
    pub decisions: Vec<Decision>,
}

impl CommandSample {
    pub fn log_probs(&self) -> Vec<f64> {
        self.decisions.iter().map(|d| d.log_prob).collect()
    }
}

/// Samples commands autoregressively along `ordering` using `rng`.
pub fn sample_commands_with(
    scene: &SceneState,
    obs: &Observation,
    params: &HighPolicyParams,
    ordering: &Ordering,
    spec: &WaypointSpec,
    rng: &mut impl Rng,
) -> Result<CommandSample> {
    let n = scene.agents.len();
    let mut chosen: Vec<Maneuver> = Vec::with_capacity(n);
    let mut decisions = Vec::with_capacity(n);
    let mut commands = vec![None; n];
    for pos in 0..n {
        let state = build_subgame_state(obs, ordering, &chosen, pos)?;
        let lp = maneuver_log_probs(params, &state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = Maneuver::COUNT - 1;
        for (m, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = m;
                break;
            }
        }
        let maneuver = Maneuver::from_index(pick).unwrap();
        let agent = ordering.0[pos];
        let a = &scene.agents[agent];
        let offset = waypoint_offset(params, &state);
        let route = &scene.network.routes[a.route];
        commands[agent] = Some(Command {
            maneuver,
            waypoints: spec.waypoints(maneuver, a, &obs.contexts[agent], route, offset),
        });
        chosen.push(maneuver);
        decisions.push(Decision {
            agent,
            state,
            maneuver,
            log_prob: lp[pick],
        });
    }
    Ok(CommandSample {
        commands: commands.into_iter().map(Option::unwrap).collect(),
        decisions,
    })
}

/// Seeded convenience wrapper around [`sample_commands_with`].
pub fn sample_commands(
    scene: &SceneState,
    params: &HighPolicyParams,
    ordering: &Ordering,
    spec: &WaypointSpec,
    seed: u64,
) -> Result<CommandSample> {
    let obs = Observation::new(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_commands_with(scene, &obs, params, ordering, spec, &mut rng)
}

/// Per ordering position, the maneuver log-probabilities conditioned on the
/// maneuvers of all earlier positions. `maneuvers` is indexed by agent.
pub fn conditional_log_probs(
    obs: &Observation,
    params: &HighPolicyParams,
    ordering: &Ordering,
    maneuvers: &[Maneuver],
) -> Result<Vec<[f64; Maneuver::COUNT]>> {
    let n = obs.len();
    if maneuvers.len() != n {
        return Err(Error::Arity {
            expected: n,
            got: maneuvers.len(),
        });
    }
    let mut chosen = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for pos in 0..n {
        let state = build_subgame_state(obs, ordering, &chosen, pos)?;
        out.push(maneuver_log_probs(params, &state));
        chosen.push(maneuvers[ordering.0[pos]]);
    }
    Ok(out)
}

/// Sum over the ordering of each agent's conditional maneuver log-prob.
/// `maneuvers` is indexed by agent.
pub fn joint_log_prob(
    obs: &Observation,
    params: &HighPolicyParams,
    ordering: &Ordering,
    maneuvers: &[Maneuver],
) -> Result<f64> {
    let cond = conditional_log_probs(obs, params, ordering, maneuvers)?;
    Ok(cond
        .iter()
        .enumerate()
        .map(|(pos, lp)| lp[maneuvers[ordering.0[pos]].index()])
        .sum())
}

/// Discounted return `sum_t gamma^t r_t`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 0.0;
    for r in rewards.iter().rev() {
        g = r + gamma * g;
    }
    g
}

/// Discounted reward-to-go for every step.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        g = r + gamma * g;
        *o = g;
    }
    out
}

/// A sequence of decisions credited with one return.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub decisions: Vec<(SubgameState, Maneuver)>,
    pub ret: f64,
}

/// REINFORCE with a mean-return baseline: moves the parameters along
/// `mean_k (G_k - mean G) * sum grad log pi` scaled by `step`.
pub fn reinforce_update(params: &HighPolicyParams, batch: &[Trajectory], step: f64) -> Result<HighPolicyParams> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("policy-gradient batch is empty".into()));
    }
    let baseline = batch.iter().map(|t| t.ret).sum::<f64>() / batch.len() as f64;
    let mut g = vec![0.0; params.dims.param_count()];
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let adv = t.ret - baseline;
        if adv == 0.0 {
            continue;
        }
        for (state, m) in &t.decisions {
            add_log_prob_grad(params, state, *m, adv * scale, &mut g);
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite policy gradient".into()));
    }
    let mut out = params.clone();
    for (p, gv) in out.values.iter_mut().zip(&g) {
        *p += step * gv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Junction, Lane, Polyline, RoadNetwork};
    use crate::scene::AgentState;
    use std::sync::Arc;

    pub(crate) fn crossing() -> Arc<RoadNetwork> {
        let lanes = vec![
            Lane {
                id: "ew".into(),
                centerline: Polyline::new(vec![[-100.0, 0.0], [100.0, 0.0]]).unwrap(),
                width: 3.5,
                speed_limit: 10.0,
                signal: None,
            },
            Lane {
                id: "sn".into(),
                centerline: Polyline::new(vec![[0.0, -100.0], [0.0, 100.0]]).unwrap(),
                width: 3.5,
                speed_limit: 10.0,
                signal: None,
            },
        ];
        let j = Junction {
            id: "c".into(),
            conflict_points: vec![[0.0, 0.0]],
            phases: vec![],
        };
        Arc::new(RoadNetwork::new(lanes, vec![j], vec![("ew".into(), vec![0]), ("sn".into(), vec![1])]).unwrap())
    }

    pub(crate) fn agent(id: u32, x: f64, y: f64, heading: f64, route: usize) -> AgentState {
        AgentState {
            id,
            x,
            y,
            heading,
            speed: 6.0,
            wheelbase: 2.7,
            half_length: 2.25,
            half_width: 0.9,
            route,
        }
    }

    #[test]
    fn ordering_contract() {
        assert_eq!(ordering_from_distances(&[4.0]), Ordering(vec![0]));
        assert_eq!(ordering_from_distances(&[5.0, 3.0]), Ordering(vec![1, 0]));
        assert_eq!(ordering_from_distances(&[2.0, 2.0, 1.0]), Ordering(vec![2, 0, 1]));
        let scene = SceneState::new(
            0.0,
            vec![agent(0, -20.0, 0.0, 0.0, 0), agent(1, 0.0, -10.0, 1.57, 1)],
            crossing(),
        );
        assert_eq!(make_ordering(&scene), Ordering(vec![1, 0]));
    }

    #[test]
    fn leader_has_empty_slots_and_follower_sees_leader() {
        let scene = SceneState::new(
            0.0,
            vec![
                agent(0, -20.0, 0.0, 0.0, 0),
                agent(1, 0.0, -10.0, 1.57, 1),
                agent(2, -40.0, 0.0, 0.0, 0),
            ],
            crossing(),
        );
        let obs = Observation::new(&scene);
        let ord = make_ordering(&scene);
        let s0 = build_subgame_state(&obs, &ord, &[], 0).unwrap();
        assert_eq!(s0.slots.len(), 2);
        assert!(s0.slots.iter().flatten().all(|&v| v == 0.0));
        let s1 = build_subgame_state(&obs, &ord, &[Maneuver::Maintain], 1).unwrap();
        assert!(s1.slots[0][Maneuver::Maintain.index()] > 0.0);
        assert!(s1.slots[0]
            .iter()
            .enumerate()
            .all(|(k, &v)| v == 0.0 || k % Maneuver::COUNT == Maneuver::Maintain.index()));
        assert!(s1.slots[1].iter().all(|&v| v == 0.0));
        assert!(matches!(
            build_subgame_state(&obs, &ord, &[], 1),
            Err(Error::Arity { .. })
        ));
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let scene = SceneState::new(0.0, vec![agent(0, -20.0, 0.0, 0.0, 0)], crossing());
        let params = HighPolicyParams::zeros(HighPolicyDims::default());
        let ord = make_ordering(&scene);
        let spec = WaypointSpec::default();
        let mut counts = [0usize; Maneuver::COUNT];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = Observation::new(&scene);
        for _ in 0..20_000 {
            let s = sample_commands_with(&scene, &obs, &params, &ord, &spec, &mut rng).unwrap();
            assert!((s.decisions[0].log_prob - 0.2f64.ln()).abs() < 1e-12);
            counts[s.commands[0].maneuver.index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 20_000.0 - 0.2).abs() < 0.015, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let scene = SceneState::new(
            0.0,
            vec![agent(0, -20.0, 0.0, 0.0, 0), agent(1, 0.0, -10.0, 1.57, 1)],
            crossing(),
        );
        let params = HighPolicyParams::init(HighPolicyDims::default(), 9);
        let ord = make_ordering(&scene);
        let spec = WaypointSpec::default();
        let a = sample_commands(&scene, &params, &ord, &spec, 42).unwrap();
        let b = sample_commands(&scene, &params, &ord, &spec, 42).unwrap();
        assert_eq!(a.commands, b.commands);
        assert_eq!(a.log_probs(), b.log_probs());
        let maneuvers: Vec<Maneuver> = a.commands.iter().map(|c| c.maneuver).collect();
        let total = joint_log_prob(&Observation::new(&scene), &params, &ord, &maneuvers).unwrap();
        assert!((total - a.log_probs().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn returns() {
        assert!((episode_return(&[1.0, 1.0], 0.9) - 1.9).abs() < 1e-12);
        assert_eq!(episode_return(&[0.0; 5], 0.9), 0.0);
        assert!((episode_return(&[1.0, 2.0, 3.0], 0.5) - 2.75).abs() < 1e-12);
        assert_eq!(returns_to_go(&[1.0, 2.0, 3.0], 0.5), vec![2.75, 3.5, 3.0]);
    }

    #[test]
    fn equal_returns_leave_params_unchanged() {
        let params = HighPolicyParams::init(HighPolicyDims::default(), 1);
        let state = SubgameState {
            features: [0.3; SCENE_FEATURES],
            slots: vec![],
        };
        let batch = vec![
            Trajectory {
                decisions: vec![(state.clone(), Maneuver::Yield)],
                ret: 2.0,
            },
            Trajectory {
                decisions: vec![(state, Maneuver::Stop)],
                ret: 2.0,
            },
        ];
        assert_eq!(reinforce_update(&params, &batch, 0.5).unwrap(), params);
        assert!(reinforce_update(&params, &[], 0.5).is_err());
    }
}
