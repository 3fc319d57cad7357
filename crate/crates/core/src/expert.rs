//! Heuristic recovery expert: IDM car-following for the longitudinal axis
//! and pure pursuit toward the commanded lateral offset for steering.
//!
//! The expert's rollouts are the reconstruction targets for the realizer.
//! Commands are optional; without one the expert behaves as under
//! `Maneuver::Maintain` with zero lateral offset.

use serde::{Deserialize, Serialize};

use crate::command::{commanded_lateral, Command, Maneuver, WaypointSpec};
use crate::context::{lane_contexts, LaneContext};
use crate::error::{Error, Result};
use crate::network::Point;
use crate::scene::{integrate_bicycle, AgentState, Control, ControlBounds, SceneState, DEFAULT_DT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Desired speed; `None` uses the lane speed limit.
    pub v0: Option<f64>,
    pub headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: None,
            headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfort_decel: 2.0,
            exponent: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PursuitParams {
    pub lookahead_base: f64,
    pub lookahead_gain: f64,
    /// Extra curvature per radian of heading error, scaled by 1/lookahead.
    /// Plain pure pursuit has damping ratio 1/sqrt(2) on straight paths;
    /// this term raises it to (2 + k) / (2 sqrt(2)).
    pub heading_damping: f64,
}

impl Default for PursuitParams {
    fn default() -> Self {
        Self {
            lookahead_base: 4.0,
            lookahead_gain: 0.6,
            heading_damping: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub idm: IdmParams,
    pub pursuit: PursuitParams,
    pub bounds: ControlBounds,
    pub waypoints: WaypointSpec,
}

/// Expert positions per agent over the rollout horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryTarget {
    pub positions: Vec<Vec<Point>>,
}

impl RecoveryTarget {
    pub fn horizon(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }
}

/// Drift thresholds selecting the full reconstruction weight.
pub const DRIFT_LATERAL: f64 = 0.75;
pub const DRIFT_HEADING: f64 = 0.3;
pub const GATE_DRIFTING: f64 = 1.0;
pub const GATE_ON_TRACK: f64 = 0.2;

/// Reconstruction weight for an agent given its deviation from the
/// commanded lateral offset.
pub fn drift_gate(ctx: &LaneContext, target_lateral: f64) -> f64 {
    if (ctx.projection.lateral - target_lateral).abs() > DRIFT_LATERAL || ctx.heading_error.abs() > DRIFT_HEADING {
        GATE_DRIFTING
    } else {
        GATE_ON_TRACK
    }
}

/// IDM acceleration toward an obstacle `gap` metres ahead moving at
/// `lead_speed`; `None` means free road.
pub fn idm_accel(p: &IdmParams, v0: f64, v: f64, obstacle: Option<(f64, f64)>) -> f64 {
    let free = if v0 > 0.0 {
        1.0 - (v / v0).powf(p.exponent)
    } else if v > 0.0 {
        -1.0
    } else {
        0.0
    };
    let interaction = match obstacle {
        None => 0.0,
        Some((gap, _)) if gap <= 0.0 => return f64::NEG_INFINITY,
        Some((gap, lead_speed)) => {
            let dv = v - lead_speed;
            let desired =
                p.min_gap + (v * p.headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
            (desired / gap).powi(2)
        }
    };
    p.max_accel * (free - interaction)
}

fn longitudinal(agent: &AgentState, ctx: &LaneContext, cfg: &ExpertConfig, maneuver: Maneuver) -> f64 {
    let v = agent.speed;
    let hard = -cfg.bounds.accel_min;
    if maneuver == Maneuver::Stop {
        return -(cfg.idm.comfort_decel.min(v / DEFAULT_DT));
    }
    let v0 = cfg.idm.v0.unwrap_or(ctx.speed_limit);
    let mut obstacles: Vec<(f64, f64)> = Vec::with_capacity(3);
    if let Some(l) = ctx.leader {
        obstacles.push((l.gap, l.speed.max(0.0)));
    }
    // Dilemma zone: a red light that cannot be met within the braking bound
    // is run.
    if let Some(d) = ctx.red_stop {
        if d >= v * v / (2.0 * 0.9 * hard) - 0.5 {
            obstacles.push((d, 0.0));
        }
    }
    if maneuver == Maneuver::Yield {
        if let Some(hold) = cfg.waypoints.yield_point(agent, ctx) {
            let d = hold - ctx.projection.s + cfg.idm.min_gap;
            if d >= v * v / (2.0 * 0.9 * hard) - 0.5 {
                obstacles.push((d, 0.0));
            }
        }
    }
    let mut accel = idm_accel(&cfg.idm, v0, v, None);
    for ob in obstacles {
        accel = accel.min(idm_accel(&cfg.idm, v0, v, Some(ob)));
    }
    accel
}

fn lateral(agent: &AgentState, ctx: &LaneContext, cfg: &ExpertConfig, scene: &SceneState, target: f64) -> f64 {
    let route = &scene.network.routes[agent.route];
    let look = cfg.pursuit.lookahead_base + cfg.pursuit.lookahead_gain * agent.speed;
    let p = route.path.sample_offset(ctx.projection.s + look, target);
    let (dx, dy) = (p[0] - agent.x, p[1] - agent.y);
    let (c, s) = (agent.heading.cos(), agent.heading.sin());
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    let d2 = lx * lx + ly * ly;
    if d2 < 1e-12 {
        return 0.0;
    }
    let curvature = 2.0 * ly / d2 - cfg.pursuit.heading_damping * ctx.heading_error / look;
    (agent.wheelbase * curvature).atan()
}

fn control_from_context(
    scene: &SceneState,
    ctx: &LaneContext,
    agent_index: usize,
    cfg: &ExpertConfig,
    command: Option<&Command>,
) -> Result<Control> {
    let agent = &scene.agents[agent_index];
    if ctx.is_off_map() {
        return Err(Error::OffMap {
            agent: agent.id,
            distance: ctx.projection.lateral.abs(),
        });
    }
    let maneuver = command.map_or(Maneuver::Maintain, |c| c.maneuver);
    let target = match command {
        Some(c) => commanded_lateral(&scene.network.routes[agent.route], c),
        None => 0.0,
    };
    let accel = longitudinal(agent, ctx, cfg, maneuver).min(cfg.idm.max_accel);
    let steer = lateral(agent, ctx, cfg, scene, target);
    Ok(cfg.bounds.clamp(Control::new(accel, steer)))
}

/// Expert control for one agent following its route with no command.
pub fn expert_control(scene: &SceneState, agent: usize, cfg: &ExpertConfig) -> Result<Control> {
    let ctx = lane_contexts(scene);
    control_from_context(scene, &ctx[agent], agent, cfg, None)
}

/// Expert controls for all agents, optionally following per-agent commands.
pub fn expert_controls(scene: &SceneState, cfg: &ExpertConfig, commands: Option<&[Command]>) -> Result<Vec<Control>> {
    let ctx = lane_contexts(scene);
    expert_controls_with(scene, &ctx, cfg, commands)
}

pub fn expert_controls_with(
    scene: &SceneState,
    ctx: &[LaneContext],
    cfg: &ExpertConfig,
    commands: Option<&[Command]>,
) -> Result<Vec<Control>> {
    if let Some(c) = commands {
        if c.len() != scene.agents.len() {
            return Err(Error::Arity {
                expected: scene.agents.len(),
                got: c.len(),
            });
        }
    }
    (0..scene.agents.len())
        .map(|i| control_from_context(scene, &ctx[i], i, cfg, commands.map(|c| &c[i])))
        .collect()
}

/// Iterates the expert jointly for all agents through the bicycle model,
/// holding commands fixed, and returns the post-step positions.
pub fn expert_rollout(
    scene: &SceneState,
    horizon: usize,
    cfg: &ExpertConfig,
    commands: Option<&[Command]>,
    dt: f64,
) -> Result<RecoveryTarget> {
    if horizon == 0 {
        return Err(Error::InvalidInput("expert rollout horizon must be >= 1".into()));
    }
    let mut positions = vec![Vec::with_capacity(horizon); scene.agents.len()];
    let mut cur = scene.clone();
    for step in 1..=horizon {
        let controls = expert_controls(&cur, cfg, commands)?;
        let agents = cur
            .agents
            .iter()
            .zip(&controls)
            .map(|(a, &u)| integrate_bicycle(a, u, dt))
            .collect::<Result<Vec<_>>>()?;
        for (p, a) in positions.iter_mut().zip(&agents) {
            p.push(a.position());
        }
        cur = cur.with_agents(scene.time + step as f64 * dt, agents);
    }
    Ok(RecoveryTarget { positions })
}

/// Bang-bang override: the expert's longitudinal decision executed at the
/// acceleration bounds.
pub fn bang_bang(u: Control, bounds: &ControlBounds) -> Control {
    let accel = if u.accel > 0.0 {
        bounds.accel_max
    } else if u.accel < 0.0 {
        bounds.accel_min
    } else {
        0.0
    };
    Control::new(accel, u.steer)
}
