//! Road network: lane centerlines, routes built from lane sequences,
//! junction conflict points and fixed-cycle signal schedules.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Lateral distance within which a junction conflict point is considered to
/// lie on a route.
const CONFLICT_SNAP: f64 = 0.75;
/// Maximum gap allowed between consecutive lanes of a route.
const LANE_JOIN_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

/// Closest-point projection of a position onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc-length coordinate of the foot point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
    /// Tangent heading at the foot point.
    pub heading: f64,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("polyline has non-finite coordinates".into()));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            if d <= 0.0 {
                return Err(Error::InvalidInput("polyline has repeated points".into()));
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn project(&self, p: Point) -> Projection {
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let seg = [b[0] - a[0], b[1] - a[1]];
            let len2 = seg[0] * seg[0] + seg[1] * seg[1];
            let t = (((p[0] - a[0]) * seg[0] + (p[1] - a[1]) * seg[1]) / len2).clamp(0.0, 1.0);
            let foot = [a[0] + t * seg[0], a[1] + t * seg[1]];
            let d2 = (p[0] - foot[0]).powi(2) + (p[1] - foot[1]).powi(2);
            if d2 < best.0 {
                best = (d2, i, t);
            }
        }
        let (_, i, t) = best;
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = [b[0] - a[0], b[1] - a[1]];
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        let foot = [a[0] + t * seg[0], a[1] + t * seg[1]];
        let cross = seg[0] * (p[1] - foot[1]) - seg[1] * (p[0] - foot[0]);
        let mut s = self.cumulative[i] + t * seg_len;
        // Points beyond the ends are projected onto the extended end segments.
        let along = ((p[0] - foot[0]) * seg[0] + (p[1] - foot[1]) * seg[1]) / seg_len;
        let lateral = if (i == 0 && t == 0.0 && along < 0.0) || (i == self.points.len() - 2 && t == 1.0 && along > 0.0)
        {
            s += along;
            cross / seg_len
        } else {
            cross.signum() * dist(p, foot)
        };
        Projection {
            s,
            lateral,
            heading: seg[1].atan2(seg[0]),
        }
    }

    /// Point and tangent heading at arc length `s`; extrapolates linearly
    /// beyond either end.
    pub fn sample(&self, s: f64) -> (Point, f64) {
        let n = self.points.len();
        let i = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        let t = (s - self.cumulative[i]) / seg_len;
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], heading)
    }

    /// Point at arc length `s` shifted laterally (left positive).
    pub fn sample_offset(&self, s: f64, lateral: f64) -> Point {
        let (p, h) = self.sample(s);
        [p[0] - lateral * h.sin(), p[1] + lateral * h.cos()]
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalRef {
    pub junction: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    pub centerline: Polyline,
    pub width: f64,
    pub speed_limit: f64,
    /// Signal group controlling the stop line at this lane's end.
    pub signal: Option<SignalRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub duration: f64,
    pub green: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: String,
    pub conflict_points: Vec<Point>,
    pub phases: Vec<Phase>,
}

impl Junction {
    pub fn cycle_length(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    pub fn phase_at(&self, time: f64) -> usize {
        if self.phases.is_empty() {
            return 0;
        }
        let mut t = time.rem_euclid(self.cycle_length());
        for (i, p) in self.phases.iter().enumerate() {
            if t < p.duration {
                return i;
            }
            t -= p.duration;
        }
        self.phases.len() - 1
    }

    pub fn is_green(&self, phase: usize, group: usize) -> bool {
        match self.phases.get(phase) {
            Some(p) => p.green.contains(&group),
            None => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLine {
    pub s: f64,
    pub signal: SignalRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: String,
    pub lanes: Vec<usize>,
    pub path: Polyline,
    /// Arc length at the end of each lane of the route.
    pub lane_ends: Vec<f64>,
    pub stop_lines: Vec<StopLine>,
    /// Sorted arc positions of junction conflict points on this route.
    pub conflicts: Vec<f64>,
}

impl Route {
    pub fn lane_at(&self, s: f64) -> usize {
        let k = self.lane_ends.partition_point(|&e| e < s);
        self.lanes[k.min(self.lanes.len() - 1)]
    }

    pub fn length(&self) -> f64 {
        self.path.length()
    }

    /// First conflict arc strictly ahead of `s`.
    pub fn next_conflict(&self, s: f64) -> Option<f64> {
        self.conflicts.iter().copied().find(|&c| c > s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub lanes: Vec<Lane>,
    pub junctions: Vec<Junction>,
    pub routes: Vec<Route>,
}

impl RoadNetwork {
    /// Builds a network; `routes` are (id, lane indices) pairs.
    pub fn new(lanes: Vec<Lane>, junctions: Vec<Junction>, routes: Vec<(String, Vec<usize>)>) -> Result<Self> {
        for lane in &lanes {
            if lane.width <= 0.0 || !lane.width.is_finite() {
                return Err(Error::InvalidInput(format!("lane '{}' width must be > 0", lane.id)));
            }
            if lane.speed_limit <= 0.0 || !lane.speed_limit.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "lane '{}' speed limit must be > 0",
                    lane.id
                )));
            }
            if let Some(sig) = lane.signal {
                if sig.junction >= junctions.len() {
                    return Err(Error::Resolution {
                        kind: "junction",
                        name: sig.junction.to_string(),
                    });
                }
            }
        }
        for j in &junctions {
            if j.phases.iter().any(|p| p.duration <= 0.0 || !p.duration.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "junction '{}' has a non-positive phase",
                    j.id
                )));
            }
        }
        let mut built = Vec::with_capacity(routes.len());
        for (id, lane_ids) in routes {
            built.push(build_route(id, lane_ids, &lanes, &junctions)?);
        }
        Ok(Self {
            lanes,
            junctions,
            routes: built,
        })
    }

    pub fn signal_phases(&self, time: f64) -> Vec<usize> {
        self.junctions.iter().map(|j| j.phase_at(time)).collect()
    }

    pub fn conflict_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.junctions.iter().flat_map(|j| j.conflict_points.iter().copied())
    }

    pub fn route_speed_limit(&self, route: usize, s: f64) -> f64 {
        let r = &self.routes[route];
        self.lanes[r.lane_at(s)].speed_limit
    }

    pub fn route_lane_width(&self, route: usize, s: f64) -> f64 {
        let r = &self.routes[route];
        self.lanes[r.lane_at(s)].width
    }

    /// Nearest stop line ahead of `s` whose signal is not green under
    /// `phases`, as an arc position.
    pub fn next_red_stop(&self, route: usize, s: f64, phases: &[usize]) -> Option<f64> {
        self.routes[route]
            .stop_lines
            .iter()
            .filter(|st| st.s > s)
            .find(|st| {
                let j = &self.junctions[st.signal.junction];
                let phase = phases.get(st.signal.junction).copied().unwrap_or(0);
                !j.is_green(phase, st.signal.group)
            })
            .map(|st| st.s)
    }
}

fn build_route(id: String, lane_ids: Vec<usize>, lanes: &[Lane], junctions: &[Junction]) -> Result<Route> {
    if lane_ids.is_empty() {
        return Err(Error::InvalidInput(format!("route '{id}' has no lanes")));
    }
    let mut points: Vec<Point> = Vec::new();
    let mut lane_ends = Vec::new();
    let mut stop_lines = Vec::new();
    let mut length = 0.0;
    for &li in &lane_ids {
        let lane = lanes.get(li).ok_or_else(|| Error::Resolution {
            kind: "lane",
            name: li.to_string(),
        })?;
        let pts = lane.centerline.points();
        let mut skip_first = false;
        if let Some(&last) = points.last() {
            let gap = dist(last, pts[0]);
            if gap > LANE_JOIN_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "route '{id}': lane '{}' starts {gap:.2} m from the previous lane end",
                    lane.id
                )));
            }
            skip_first = gap < 1e-9;
            if !skip_first {
                length += gap;
            }
        }
        points.extend_from_slice(if skip_first { &pts[1..] } else { pts });
        length += lane.centerline.length();
        lane_ends.push(length);
        if let Some(signal) = lane.signal {
            stop_lines.push(StopLine { s: length, signal });
        }
    }
    let path = Polyline::new(points)?;
    let mut conflicts = Vec::new();
    for p in junctions.iter().flat_map(|j| j.conflict_points.iter()) {
        let pr = path.project(*p);
        if pr.lateral.abs() < CONFLICT_SNAP && pr.s > 0.0 && pr.s < path.length() {
            conflicts.push(pr.s);
        }
    }
    conflicts.sort_by(f64::total_cmp);
    conflicts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    Ok(Route {
        id,
        lanes: lane_ids,
        path,
        lane_ends,
        stop_lines,
        conflicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> Polyline {
        Polyline::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap()
    }

    #[test]
    fn rejects_degenerate_polylines() {
        assert!(Polyline::new(vec![[0.0, 0.0]]).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn projection_signs_and_arc() {
        let p = straight();
        assert_eq!(p.length(), 20.0);
        let pr = p.project([5.0, 1.0]);
        assert!((pr.s - 5.0).abs() < 1e-12);
        assert!((pr.lateral - 1.0).abs() < 1e-12);
        let pr = p.project([11.0, 5.0]);
        assert!((pr.s - 15.0).abs() < 1e-12);
        assert!((pr.lateral + 1.0).abs() < 1e-12);
        // beyond the start
        let pr = p.project([-3.0, 0.5]);
        assert!((pr.s + 3.0).abs() < 1e-12);
        assert!((pr.lateral - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sample_extrapolates() {
        let p = straight();
        let (pt, h) = p.sample(25.0);
        assert!((pt[0] - 10.0).abs() < 1e-12 && (pt[1] - 15.0).abs() < 1e-12);
        assert!((h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let q = p.sample_offset(5.0, 2.0);
        assert!((q[0] - 5.0).abs() < 1e-12 && (q[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn phases_cycle() {
        let j = Junction {
            id: "j".into(),
            conflict_points: vec![],
            phases: vec![
                Phase {
                    duration: 10.0,
                    green: vec![0],
                },
                Phase {
                    duration: 5.0,
                    green: vec![1],
                },
            ],
        };
        assert_eq!(j.phase_at(0.0), 0);
        assert_eq!(j.phase_at(9.99), 0);
        assert_eq!(j.phase_at(10.0), 1);
        assert_eq!(j.phase_at(15.0), 0);
        assert!(j.is_green(0, 0) && !j.is_green(0, 1));
    }

    #[test]
    fn route_joins_lanes_and_finds_conflicts() {
        let lanes = vec![
            Lane {
                id: "a".into(),
                centerline: Polyline::new(vec![[0.0, 0.0], [10.0, 0.0]]).unwrap(),
                width: 3.5,
                speed_limit: 10.0,
                signal: Some(SignalRef { junction: 0, group: 0 }),
            },
            Lane {
                id: "b".into(),
                centerline: Polyline::new(vec![[10.0, 0.0], [30.0, 0.0]]).unwrap(),
                width: 3.5,
                speed_limit: 15.0,
                signal: None,
            },
        ];
        let junctions = vec![Junction {
            id: "j".into(),
            conflict_points: vec![[15.0, 0.1], [15.0, 5.0]],
            phases: vec![Phase {
                duration: 10.0,
                green: vec![1],
            }],
        }];
        let net = RoadNetwork::new(lanes, junctions, vec![("r".into(), vec![0, 1])]).unwrap();
        let r = &net.routes[0];
        assert_eq!(r.length(), 30.0);
        assert_eq!(r.lane_ends, vec![10.0, 30.0]);
        assert_eq!(r.conflicts.len(), 1);
        assert!((r.conflicts[0] - 15.0).abs() < 1e-12);
        assert_eq!(net.route_speed_limit(0, 5.0), 10.0);
        assert_eq!(net.route_speed_limit(0, 12.0), 15.0);
        assert_eq!(net.next_red_stop(0, 2.0, &[0]), Some(10.0));
        assert_eq!(net.next_red_stop(0, 11.0, &[0]), None);
    }

    #[test]
    fn dangling_lane_is_resolution_error() {
        let err = RoadNetwork::new(vec![], vec![], vec![("r".into(), vec![3])]).unwrap_err();
        assert!(matches!(err, Error::Resolution { kind: "lane", .. }));
    }
}
