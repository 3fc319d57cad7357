//! Per-agent route context derived from a scene: projection onto the route,
//! the leader ahead, the next red stop line and the next conflict point.

use crate::network::Projection;
use crate::scene::{wrap_angle, SceneState};

/// Look-ahead range for leaders, stop lines and conflicts.
pub const SENSE_RANGE: f64 = 60.0;
/// Agents farther than this from their route centerline are off the map.
pub const RECOVERY_RADIUS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub index: usize,
    /// Bumper-to-bumper gap along the route.
    pub gap: f64,
    /// Leader speed projected on the route tangent.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneContext {
    pub projection: Projection,
    pub heading_error: f64,
    pub speed_limit: f64,
    pub lane_width: f64,
    pub route_length: f64,
    pub leader: Option<Leader>,
    /// Front-bumper distance to the next stop line whose signal is not green.
    pub red_stop: Option<f64>,
    /// Arc distance to the next conflict point ahead.
    pub conflict: Option<f64>,
}

impl LaneContext {
    pub fn remaining(&self) -> f64 {
        self.route_length - self.projection.s
    }

    pub fn is_off_map(&self) -> bool {
        self.projection.lateral.abs() > RECOVERY_RADIUS
    }

    /// 1 at the point, falling linearly to 0 at `SENSE_RANGE`.
    pub fn proximity(d: Option<f64>) -> f64 {
        match d {
            Some(d) => (1.0 - d.max(0.0) / SENSE_RANGE).max(0.0),
            None => 0.0,
        }
    }
}

pub fn lane_contexts(scene: &SceneState) -> Vec<LaneContext> {
    let net = &scene.network;
    let n = scene.agents.len();
    let mut out = Vec::with_capacity(n);
    for (i, a) in scene.agents.iter().enumerate() {
        let route = &net.routes[a.route];
        let pr = route.path.project(a.position());
        let lane_width = net.route_lane_width(a.route, pr.s);
        let mut leader: Option<Leader> = None;
        for (j, b) in scene.agents.iter().enumerate() {
            if j == i {
                continue;
            }
            let ahead = b.position();
            // cheap reject before projecting
            if (ahead[0] - a.x).hypot(ahead[1] - a.y) > SENSE_RANGE + b.half_length + a.half_length {
                continue;
            }
            let pb = route.path.project(ahead);
            let ds = pb.s - pr.s;
            if ds <= 0.0 || pb.lateral.abs() > 0.5 * lane_width + b.half_width {
                continue;
            }
            let align = wrap_angle(b.heading - pb.heading).cos();
            if align < 0.5 {
                continue;
            }
            let gap = ds - a.half_length - b.half_length;
            if gap > SENSE_RANGE {
                continue;
            }
            if leader.is_none_or(|l| gap < l.gap) {
                leader = Some(Leader {
                    index: j,
                    gap,
                    speed: b.speed * align,
                });
            }
        }
        let red_stop = net
            .next_red_stop(a.route, pr.s, &scene.signals)
            .map(|st| st - pr.s - a.half_length)
            .filter(|&d| d < SENSE_RANGE);
        let conflict = route
            .next_conflict(pr.s - a.half_length)
            .map(|c| c - pr.s)
            .filter(|&d| d < SENSE_RANGE);
        out.push(LaneContext {
            projection: pr,
            heading_error: wrap_angle(a.heading - pr.heading),
            speed_limit: net.route_speed_limit(a.route, pr.s),
            lane_width,
            route_length: route.length(),
            leader,
            red_stop,
            conflict,
        });
    }
    out
}
