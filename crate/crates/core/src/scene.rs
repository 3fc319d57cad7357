//! World model: agent kinematics, scene snapshots, the bounded history
//! window and disc-based collision geometry.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{Point, RoadNetwork};

pub const DEFAULT_DT: f64 = 0.1;
/// Number of discs used to cover each vehicle body.
pub const DISCS_PER_BODY: usize = 3;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    if a > PI && a <= 3.0 * PI {
        return a - 2.0 * PI;
    }
    if a <= -PI && a > -3.0 * PI {
        return a + 2.0 * PI;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub wheelbase: f64,
    pub half_length: f64,
    pub half_width: f64,
    /// Index into `RoadNetwork::routes`.
    pub route: usize,
}

impl AgentState {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> Point {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }

    fn check(&self) -> Result<()> {
        let fields = [self.x, self.y, self.heading, self.speed, self.wheelbase];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("agent {} has non-finite fields", self.id)));
        }
        if self.wheelbase <= 0.0 {
            return Err(Error::InvalidState(format!("agent {} wheelbase must be > 0", self.id)));
        }
        Ok(())
    }

    /// Disc centers along the body axis and the common disc radius.
    pub fn discs(&self) -> ([Point; DISCS_PER_BODY], f64) {
        let n = DISCS_PER_BODY as f64;
        let seg = self.half_length / n;
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let mut centers = [[0.0; 2]; DISCS_PER_BODY];
        for (k, center) in centers.iter_mut().enumerate() {
            let off = -self.half_length + seg * (2 * k + 1) as f64;
            *center = [self.x + off * c, self.y + off * s];
        }
        (centers, seg.hypot(self.half_width))
    }

    pub fn disc_radius(&self) -> f64 {
        (self.half_length / DISCS_PER_BODY as f64).hypot(self.half_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub accel: f64,
    pub steer: f64,
}

impl Control {
    pub const ZERO: Control = Control { accel: 0.0, steer: 0.0 };

    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            accel_min: -5.0,
            accel_max: 3.0,
            steer_max: 0.5,
        }
    }
}

impl ControlBounds {
    pub fn clamp(&self, u: Control) -> Control {
        Control {
            accel: u.accel.clamp(self.accel_min, self.accel_max),
            steer: u.steer.clamp(-self.steer_max, self.steer_max),
        }
    }

    pub fn contains(&self, u: Control) -> bool {
        u.accel >= self.accel_min && u.accel <= self.accel_max && u.steer.abs() <= self.steer_max
    }
}

/// One forward-Euler step of the kinematic bicycle, derivatives taken at the
/// pre-step state. Speed is floored at zero and heading re-wrapped.
pub fn integrate_bicycle(state: &AgentState, u: Control, dt: f64) -> Result<AgentState> {
    state.check()?;
    if !u.accel.is_finite() || !u.steer.is_finite() {
        return Err(Error::InvalidState(format!(
            "agent {} got a non-finite control",
            state.id
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidState(format!("time step must be > 0, got {dt}")));
    }
    let v = state.speed;
    let mut next = *state;
    next.x = state.x + v * state.heading.cos() * dt;
    next.y = state.y + v * state.heading.sin() * dt;
    next.heading = wrap_angle(state.heading + v * u.steer.tan() / state.wheelbase * dt);
    next.speed = (v + u.accel * dt).max(0.0);
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct SceneState {
    pub time: f64,
    /// Live agents; order is stable while agents remain live.
    pub agents: Vec<AgentState>,
    pub network: Arc<RoadNetwork>,
    /// Current phase index per junction.
    pub signals: Vec<usize>,
}

impl SceneState {
    pub fn new(time: f64, agents: Vec<AgentState>, network: Arc<RoadNetwork>) -> Self {
        let signals = network.signal_phases(time);
        Self {
            time,
            agents,
            network,
            signals,
        }
    }

    pub fn with_agents(&self, time: f64, agents: Vec<AgentState>) -> Self {
        Self::new(time, agents, Arc::clone(&self.network))
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }
}

/// Ring of the most recent scene snapshots, oldest first.
#[derive(Debug, Clone)]
pub struct SceneHistory {
    capacity: usize,
    dt: f64,
    window: VecDeque<SceneState>,
}

impl SceneHistory {
    pub fn new(capacity: usize, dt: f64) -> Self {
        assert!(capacity >= 1, "history capacity must be at least 1");
        Self {
            capacity,
            dt,
            window: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn latest(&self) -> Option<&SceneState> {
        self.window.back()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &SceneState> + ExactSizeIterator {
        self.window.iter()
    }

    pub fn get(&self, i: usize) -> Option<&SceneState> {
        self.window.get(i)
    }

    pub fn push(&mut self, s: SceneState) -> Result<()> {
        if let Some(last) = self.window.back() {
            let expected = last.time + self.dt;
            if (s.time - expected).abs() > 1e-9 * self.dt.max(1.0) {
                return Err(Error::HistoryDiscontinuity { expected, got: s.time });
            }
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(s);
        Ok(())
    }
}

/// Overlapping agent pairs `(i, j)`, `i < j`, sorted lexicographically.
pub fn detect_collisions(scene: &SceneState) -> Vec<(usize, usize)> {
    colliding_pairs(&scene.agents)
}

pub fn colliding_pairs(agents: &[AgentState]) -> Vec<(usize, usize)> {
    let discs: Vec<_> = agents.iter().map(|a| a.discs()).collect();
    let mut out = Vec::new();
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            if bodies_overlap(&agents[i], &discs[i], &agents[j], &discs[j]) {
                out.push((i, j));
            }
        }
    }
    out
}

fn bodies_overlap(
    a: &AgentState,
    (ca, ra): &([Point; DISCS_PER_BODY], f64),
    b: &AgentState,
    (cb, rb): &([Point; DISCS_PER_BODY], f64),
) -> bool {
    let reach = a.half_length + ra + b.half_length + rb;
    if (a.x - b.x).hypot(a.y - b.y) > reach {
        return false;
    }
    let lim = ra + rb;
    ca.iter()
        .any(|p| cb.iter().any(|q| (p[0] - q[0]).hypot(p[1] - q[1]) < lim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn agent(x: f64, y: f64, heading: f64, speed: f64) -> AgentState {
        AgentState {
            id: 0,
            x,
            y,
            heading,
            speed,
            wheelbase: 2.5,
            half_length: 2.0,
            half_width: 1.0,
            route: 0,
        }
    }

    #[test]
    fn zero_dynamics_fixed_point() {
        let s = agent(0.0, 0.0, 0.0, 0.0);
        assert_eq!(integrate_bicycle(&s, Control::ZERO, 0.1).unwrap(), s);
    }

    #[test]
    fn straight_line_step() {
        let s = agent(0.0, 0.0, 0.0, 10.0);
        let n = integrate_bicycle(&s, Control::ZERO, 0.1).unwrap();
        assert_eq!((n.x, n.y, n.heading, n.speed), (1.0, 0.0, 0.0, 10.0));
    }

    #[test]
    fn single_euler_step_matches_hand_computation() {
        let s = agent(0.0, 0.0, 0.0, 5.0);
        let n = integrate_bicycle(&s, Control::new(2.0, 0.1), 0.1).unwrap();
        // x = 5 * cos 0 * 0.1, heading = 5 * tan(0.1) / 2.5 * 0.1, v = 5 + 0.2
        assert!((n.x - 0.5).abs() < 1e-15);
        assert_eq!(n.y, 0.0);
        assert!((n.heading - 0.020_066_934_4).abs() < 1e-10);
        assert!((n.speed - 5.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let mut s = agent(0.0, 0.0, 0.0, 1.0);
        s.x = f64::NAN;
        assert!(matches!(
            integrate_bicycle(&s, Control::ZERO, 0.1),
            Err(Error::InvalidState(_))
        ));
        let s = agent(0.0, 0.0, 0.0, 1.0);
        assert!(integrate_bicycle(&s, Control::new(f64::INFINITY, 0.0), 0.1).is_err());
        assert!(integrate_bicycle(&s, Control::ZERO, 0.0).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn circle_property() {
        let delta: f64 = 0.2;
        let mut s = agent(0.0, 0.0, 0.0, 5.0);
        let radius = s.wheelbase / delta.tan();
        // Euler points are vertices of a regular polygon; the circle of radius
        // R through the first chord's endpoints has its center on the chord's
        // perpendicular bisector.
        let half_chord = 0.5 * s.speed * 0.1;
        let center = [half_chord, (radius * radius - half_chord * half_chord).sqrt()];
        for _ in 0..100 {
            s = integrate_bicycle(&s, Control::new(0.0, delta), 0.1).unwrap();
            let r = (s.x - center[0]).hypot(s.y - center[1]);
            assert!((r - radius).abs() < 1e-2 * radius, "r = {r}, R = {radius}");
        }
    }

    #[test]
    fn single_disc_collisions() {
        let mut a = agent(0.0, 0.0, 0.0, 0.0);
        a.half_length = 0.0;
        let mut b = a;
        b.id = 1;
        b.x = 1.5;
        assert_eq!(colliding_pairs(&[a, b]), vec![(0, 1)]);
        b.x = 2.5;
        assert!(colliding_pairs(&[a, b]).is_empty());
    }

    #[test]
    fn parallel_rectangles_with_small_gap_are_flagged() {
        // 4 x 2 m bodies with a 0.3 m lateral gap: disc radius is
        // sqrt((2/3)^2 + 1) = 1.2019, centers 2.3 m apart < 2.4038.
        let a = agent(0.0, 0.0, 0.0, 0.0);
        let b = agent(0.0, 2.3, 0.0, 0.0);
        assert_eq!(colliding_pairs(&[a, b]), vec![(0, 1)]);
        let c = agent(0.0, 2.5, 0.0, 0.0);
        assert!(colliding_pairs(&[a, c]).is_empty());
    }

    #[test]
    fn history_ring_semantics() {
        let net = Arc::new(RoadNetwork::new(vec![], vec![], vec![]).unwrap());
        let mut h = SceneHistory::new(3, 0.1);
        h.push(SceneState::new(0.0, vec![], net.clone())).unwrap();
        assert_eq!(h.len(), 1);
        for k in 1..5 {
            h.push(SceneState::new(k as f64 * 0.1, vec![], net.clone())).unwrap();
        }
        assert_eq!(h.len(), 3);
        assert!((h.get(0).unwrap().time - 0.2).abs() < 1e-12);
        let err = h.push(SceneState::new(0.6, vec![], net.clone())).unwrap_err();
        assert!(matches!(err, Error::HistoryDiscontinuity { .. }));
    }

    proptest! {
        #[test]
        fn speed_never_negative(v in 0.0f64..20.0, accels in proptest::collection::vec(-5.0f64..3.0, 1..50)) {
            let mut s = agent(0.0, 0.0, 0.0, v);
            for a in accels {
                s = integrate_bicycle(&s, Control::new(a, 0.1), 0.1).unwrap();
                prop_assert!(s.speed >= 0.0);
                prop_assert!(s.heading > -PI && s.heading <= PI);
            }
        }

        #[test]
        fn integration_is_deterministic(x in -50.0f64..50.0, h in -3.0f64..3.0, v in 0.0f64..20.0,
                                         a in -5.0f64..3.0, d in -0.5f64..0.5) {
            let s = agent(x, -x, h, v);
            let u = Control::new(a, d);
            let p = integrate_bicycle(&s, u, 0.1).unwrap();
            let q = integrate_bicycle(&s, u, 0.1).unwrap();
            prop_assert_eq!(p.x.to_bits(), q.x.to_bits());
            prop_assert_eq!(p.heading.to_bits(), q.heading.to_bits());
        }

        #[test]
        fn collisions_are_symmetric(x in -6.0f64..6.0, y in -6.0f64..6.0, h1 in -3.1f64..3.1, h2 in -3.1f64..3.1) {
            let a = agent(0.0, 0.0, h1, 0.0);
            let b = agent(x, y, h2, 0.0);
            prop_assert_eq!(colliding_pairs(&[a, b]).is_empty(), colliding_pairs(&[b, a]).is_empty());
        }
    }
}
