//! Evaluation metrics: incident rates per kilometre, time-to-collision safety
//! flags, collisions and average displacement against the expert.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::closed_loop::{Event, StepRecord};
use crate::command::{Command, Maneuver};
use crate::context::lane_contexts;
use crate::error::{Error, Result};
use crate::expert::{expert_rollout, ExpertConfig};
use crate::network::{dist, Point, RoadNetwork};
use crate::scene::{colliding_pairs, wrap_angle, AgentState, SceneState};

/// Events fire strictly above these.
pub const HARD_ACCEL: f64 = 2.5;
pub const SHARP_TURN_DEG_S: f64 = 20.0;
/// Safety flag when TTC is strictly below this.
pub const TTC_THRESHOLD: f64 = 1.5;

fn corners(a: &AgentState) -> [Point; 4] {
    let (c, s) = (a.heading.cos(), a.heading.sin());
    let (l, w) = (a.half_length, a.half_width);
    [(l, w), (-l, w), (-l, -w), (l, -w)].map(|(u, v)| [a.x + u * c - v * s, a.y + u * s + v * c])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull without collinear points (monotone chain).
fn convex_hull(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Earliest `t >= 0` at which the two footprints touch when both keep their
/// current velocity; infinite if they never do. Symmetric in its arguments.
pub fn compute_ttc(a: &AgentState, b: &AgentState) -> f64 {
    let key = |s: &AgentState| {
        (
            s.id,
            s.x.to_bits(),
            s.y.to_bits(),
            s.heading.to_bits(),
            s.speed.to_bits(),
        )
    };
    let (a, b) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let (ca, cb) = (corners(a), corners(b));
    let mut diff = Vec::with_capacity(16);
    for q in cb {
        for p in ca {
            diff.push([q[0] - p[0], q[1] - p[1]]);
        }
    }
    let hull = convex_hull(diff);
    let (va, vb) = (a.velocity(), b.velocity());
    // footprints touch when the ray (va - vb) t enters B - A
    let r = [va[0] - vb[0], va[1] - vb[1]];
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for k in 0..hull.len() {
        let p = hull[k];
        let q = hull[(k + 1) % hull.len()];
        let n = [q[1] - p[1], p[0] - q[0]];
        let num = n[0] * p[0] + n[1] * p[1];
        let den = n[0] * r[0] + n[1] * r[1];
        if den == 0.0 {
            if num < 0.0 {
                return f64::INFINITY;
            }
        } else if den > 0.0 {
            hi = hi.min(num / den);
        } else {
            lo = lo.max(num / den);
        }
    }
    if lo <= hi {
        lo
    } else {
        f64::INFINITY
    }
}

/// True when the pair cannot touch within the TTC threshold.
fn ttc_surely_clear(a: &AgentState, b: &AgentState) -> bool {
    let (va, vb) = (a.velocity(), b.velocity());
    let rel = (va[0] - vb[0]).hypot(va[1] - vb[1]);
    let reach = rel * TTC_THRESHOLD + a.half_length.hypot(a.half_width) + b.half_length.hypot(b.half_width);
    dist(a.position(), b.position()) > reach
}

/// Agent index pairs `(i, j)`, `i < j`, whose TTC is below the threshold.
pub fn ttc_flagged_pairs(agents: &[AgentState]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            if !ttc_surely_clear(&agents[i], &agents[j]) && compute_ttc(&agents[i], &agents[j]) < TTC_THRESHOLD {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean Euclidean displacement over agents and steps.
pub fn compute_ade(executed: &[Vec<Point>], reference: &[Vec<Point>]) -> Result<f64> {
    if executed.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} executed trajectories, {} references",
            executed.len(),
            reference.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, r) in executed.iter().zip(reference) {
        if e.len() != r.len() {
            return Err(Error::Shape("trajectory lengths differ".into()));
        }
        for (p, q) in e.iter().zip(r) {
            sum += dist(*p, *q);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Raw event counts; merging is associative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricCounts {
    pub hard_accel: u64,
    pub sharp_turn: u64,
    pub safety_flags: u64,
    pub collisions: u64,
    pub distance_m: f64,
    pub agent_steps: u64,
    pub ade_sum: f64,
    pub ade_count: u64,
}

impl MetricCounts {
    pub fn merge(&self, o: &MetricCounts) -> MetricCounts {
        MetricCounts {
            hard_accel: self.hard_accel + o.hard_accel,
            sharp_turn: self.sharp_turn + o.sharp_turn,
            safety_flags: self.safety_flags + o.safety_flags,
            collisions: self.collisions + o.collisions,
            distance_m: self.distance_m + o.distance_m,
            agent_steps: self.agent_steps + o.agent_steps,
            ade_sum: self.ade_sum + o.ade_sum,
            ade_count: self.ade_count + o.ade_count,
        }
    }

    pub fn report(&self, dt: f64) -> MetricsReport {
        let km = self.distance_m / 1000.0;
        let zero_distance = km <= 0.0;
        let rate = |n: u64| if zero_distance { 0.0 } else { n as f64 / km };
        MetricsReport {
            avg_speed: if self.agent_steps == 0 {
                0.0
            } else {
                self.distance_m / (self.agent_steps as f64 * dt)
            },
            hard_accel_per_km: rate(self.hard_accel),
            sharp_turn_per_km: rate(self.sharp_turn),
            safety_flag_per_km: rate(self.safety_flags),
            collision_per_km: rate(self.collisions),
            ade: if self.ade_count == 0 {
                0.0
            } else {
                self.ade_sum / self.ade_count as f64
            },
            total_distance: km,
            zero_distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub avg_speed: f64,
    pub hard_accel_per_km: f64,
    pub sharp_turn_per_km: f64,
    pub safety_flag_per_km: f64,
    pub collision_per_km: f64,
    pub ade: f64,
    /// Kilometres.
    pub total_distance: f64,
    pub zero_distance: bool,
}

const REPORT_KEYS: [&str; 8] = [
    "avg_speed",
    "hard_accel_per_km",
    "sharp_turn_per_km",
    "safety_flag_per_km",
    "collision_per_km",
    "ade",
    "total_distance",
    "zero_distance",
];

impl MetricsReport {
    /// `key = value` lines in fixed order.
    pub fn to_text(&self) -> String {
        let vals = [
            self.avg_speed,
            self.hard_accel_per_km,
            self.sharp_turn_per_km,
            self.safety_flag_per_km,
            self.collision_per_km,
            self.ade,
            self.total_distance,
        ];
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(vals) {
            writeln!(s, "{k} = {v:?}").unwrap();
        }
        writeln!(s, "zero_distance = {}", self.zero_distance).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad report line '{line}'")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| Error::Parse(format!("missing report key '{k}'")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for '{k}'")))
        };
        let zero = map
            .get("zero_distance")
            .ok_or_else(|| Error::Parse("missing report key 'zero_distance'".into()))?
            .parse()
            .map_err(|_| Error::Parse("bad value for 'zero_distance'".into()))?;
        Ok(Self {
            avg_speed: num("avg_speed")?,
            hard_accel_per_km: num("hard_accel_per_km")?,
            sharp_turn_per_km: num("sharp_turn_per_km")?,
            safety_flag_per_km: num("safety_flag_per_km")?,
            collision_per_km: num("collision_per_km")?,
            ade: num("ade")?,
            total_distance: num("total_distance")?,
            zero_distance: zero,
        })
    }
}

/// What ADE compares executed positions against.
#[derive(Debug, Clone)]
pub struct AdeReference {
    pub network: Arc<RoadNetwork>,
    pub expert: ExpertConfig,
    pub horizon: usize,
}

struct Window {
    next: usize,
    refs: HashMap<u32, Vec<Point>>,
}

/// Streaming metric engine over time-ordered step records.
pub struct MetricsAccumulator {
    dt: f64,
    ade: Option<AdeReference>,
    last_time: Option<f64>,
    prev_heading: HashMap<u32, f64>,
    collisions: HashSet<(u32, u32)>,
    flags: HashSet<(u32, u32)>,
    windows: VecDeque<Window>,
    counts: MetricCounts,
}

fn id_pair(agents: &[AgentState], (i, j): (usize, usize)) -> (u32, u32) {
    let (a, b) = (agents[i].id, agents[j].id);
    (a.min(b), a.max(b))
}

/// Expert commands rebuilt from maneuvers with zero waypoint offset.
pub fn reference_commands(
    scene: &SceneState,
    maneuvers: &[Option<Maneuver>],
    expert: &ExpertConfig,
) -> Option<Vec<Command>> {
    if maneuvers.iter().all(Option::is_none) {
        return None;
    }
    let ctx = lane_contexts(scene);
    Some(
        scene
            .agents
            .iter()
            .zip(maneuvers)
            .zip(&ctx)
            .map(|((a, m), c)| {
                let m = m.unwrap_or(Maneuver::Maintain);
                Command {
                    maneuver: m,
                    waypoints: expert.waypoints.waypoints(m, a, c, &scene.network.routes[a.route], 0.0),
                }
            })
            .collect(),
    )
}

impl MetricsAccumulator {
    pub fn new(dt: f64, ade: Option<AdeReference>) -> Self {
        Self {
            dt,
            ade,
            last_time: None,
            prev_heading: HashMap::new(),
            collisions: HashSet::new(),
            flags: HashSet::new(),
            windows: VecDeque::new(),
            counts: MetricCounts::default(),
        }
    }

    pub fn counts(&self) -> MetricCounts {
        self.counts
    }

    pub fn report(&self) -> MetricsReport {
        self.counts.report(self.dt)
    }

    /// Consumes one record and returns the metric events it triggered.
    pub fn push(&mut self, rec: &StepRecord) -> Result<Vec<Event>> {
        if let Some(prev) = self.last_time {
            if !(rec.time > prev) {
                return Err(Error::Ordering {
                    previous: prev,
                    got: rec.time,
                });
            }
        }
        self.last_time = Some(rec.time);
        let mut events = Vec::new();
        let turn_limit = SHARP_TURN_DEG_S.to_radians() * self.dt;
        let mut headings = HashMap::with_capacity(rec.agents.len());
        for a in &rec.agents {
            let s = &a.state;
            self.counts.distance_m += s.speed * self.dt;
            self.counts.agent_steps += 1;
            if a.control.accel.abs() > HARD_ACCEL {
                self.counts.hard_accel += 1;
                events.push(Event::HardAccel { agent: s.id });
            }
            if let Some(&h0) = self.prev_heading.get(&s.id) {
                if wrap_angle(s.heading - h0).abs() > turn_limit {
                    self.counts.sharp_turn += 1;
                    events.push(Event::SharpTurn { agent: s.id });
                }
            }
            headings.insert(s.id, s.heading);
        }
        self.prev_heading = headings;

        let states: Vec<AgentState> = rec.agents.iter().map(|a| a.state).collect();
        let hits: HashSet<(u32, u32)> = colliding_pairs(&states)
            .into_iter()
            .map(|p| id_pair(&states, p))
            .collect();
        let mut new_hits: Vec<_> = hits.difference(&self.collisions).copied().collect();
        new_hits.sort_unstable();
        for (a, b) in new_hits {
            self.counts.collisions += 1;
            events.push(Event::Collision { a, b });
        }
        self.collisions = hits;

        let flags: HashSet<(u32, u32)> = ttc_flagged_pairs(&states)
            .into_iter()
            .map(|p| id_pair(&states, p))
            .collect();
        let mut new_flags: Vec<_> = flags.difference(&self.flags).copied().collect();
        new_flags.sort_unstable();
        for (a, b) in new_flags {
            self.counts.safety_flags += 1;
            events.push(Event::SafetyFlag { a, b });
        }
        self.flags = flags;

        if let Some(ade) = &self.ade {
            for w in self.windows.iter_mut() {
                for s in &states {
                    if let Some(r) = w.refs.get(&s.id) {
                        self.counts.ade_sum += dist(s.position(), r[w.next]);
                        self.counts.ade_count += 1;
                    }
                }
                w.next += 1;
            }
            while self.windows.front().is_some_and(|w| w.next == ade.horizon) {
                self.windows.pop_front();
            }
            if !states.is_empty() {
                let scene = SceneState::new(rec.time, states.clone(), ade.network.clone());
                let maneuvers: Vec<Option<Maneuver>> = rec
                    .agents
                    .iter()
                    .map(|a| a.command.as_ref().map(|c| c.maneuver))
                    .collect();
                let cmds = reference_commands(&scene, &maneuvers, &ade.expert);
                // agents beyond the recovery radius have no expert reference
                if let Ok(t) = expert_rollout(&scene, ade.horizon, &ade.expert, cmds.as_deref(), self.dt) {
                    let refs = states.iter().map(|s| s.id).zip(t.positions).collect();
                    self.windows.push_back(Window { next: 0, refs });
                }
            }
        }
        Ok(events)
    }
}

/// Metrics over a complete record list.
pub fn accumulate<'a>(
    records: impl IntoIterator<Item = &'a StepRecord>,
    dt: f64,
    ade: Option<AdeReference>,
) -> Result<MetricCounts> {
    let mut acc = MetricsAccumulator::new(dt, ade);
    for r in records {
        acc.push(r)?;
    }
    Ok(acc.counts())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(id: u32, x: f64, y: f64, heading: f64, speed: f64) -> AgentState {
        AgentState {
            id,
            x,
            y,
            heading,
            speed,
            wheelbase: 2.7,
            half_length: 2.25,
            half_width: 0.9,
            route: 0,
        }
    }

    #[test]
    fn ttc_same_lane_closing() {
        let a = car(0, 0.0, 0.0, 0.0, 10.0);
        let b = car(1, 14.5, 0.0, 0.0, 0.0);
        assert!((compute_ttc(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(compute_ttc(&a, &b), compute_ttc(&b, &a));
        let opening = car(1, 14.5, 0.0, 0.0, 12.0);
        assert_eq!(compute_ttc(&a, &opening), f64::INFINITY);
        let same = car(1, 14.5, 0.0, 0.0, 10.0);
        assert_eq!(compute_ttc(&a, &same), f64::INFINITY);
        let overlapping = car(1, 3.0, 0.0, 0.0, 0.0);
        assert_eq!(compute_ttc(&a, &overlapping), 0.0);
    }

    #[test]
    fn ade_examples() {
        let a = vec![vec![[0.0, 0.0], [1.0, 1.0]]];
        assert_eq!(compute_ade(&a, &a).unwrap(), 0.0);
        let b = vec![vec![[1.0, 0.0], [2.0, 1.0]]];
        assert_eq!(compute_ade(&a, &b).unwrap(), 1.0);
        assert!(compute_ade(&a, &[]).is_err());
    }

    #[test]
    fn report_text_round_trips() {
        let r = MetricsReport {
            avg_speed: 7.25,
            hard_accel_per_km: 0.1,
            sharp_turn_per_km: 1.0 / 3.0,
            safety_flag_per_km: 0.0,
            collision_per_km: 2.0,
            ade: 0.4,
            total_distance: 1.5,
            zero_distance: false,
        };
        assert_eq!(MetricsReport::from_text(&r.to_text()).unwrap(), r);
    }
}
