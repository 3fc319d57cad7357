//! The command interface between the two levels of the hierarchy: a
//! discrete maneuver plus waypoint guidance along the agent's route.

use std::fmt;
use std::str::FromStr;

use crate::context::LaneContext;
use crate::error::Error;
use crate::network::{Point, Route};
use crate::scene::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Maneuver {
    Maintain,
    Yield,
    SwitchLeft,
    SwitchRight,
    Stop,
}

impl Maneuver {
    pub const COUNT: usize = 5;
    pub const ALL: [Maneuver; Maneuver::COUNT] = [
        Maneuver::Maintain,
        Maneuver::Yield,
        Maneuver::SwitchLeft,
        Maneuver::SwitchRight,
        Maneuver::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Maneuver::Maintain => "maintain",
            Maneuver::Yield => "yield",
            Maneuver::SwitchLeft => "switch_left",
            Maneuver::SwitchRight => "switch_right",
            Maneuver::Stop => "stop",
        }
    }

    /// Lateral lane shift requested by the maneuver, in lane widths.
    pub fn lane_shift(self) -> f64 {
        match self {
            Maneuver::SwitchLeft => 1.0,
            Maneuver::SwitchRight => -1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Maneuver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Maneuver::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown maneuver '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub maneuver: Maneuver,
    pub waypoints: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaypointSpec {
    pub count: usize,
    pub spacing: f64,
    /// Distance kept between a yielding vehicle's front and the conflict point.
    pub yield_margin: f64,
}

impl Default for WaypointSpec {
    fn default() -> Self {
        Self {
            count: 4,
            spacing: 5.0,
            yield_margin: 4.0,
        }
    }
}

impl WaypointSpec {
    /// Arc position where a yielding agent should hold, if it has not yet
    /// entered the conflict zone.
    pub fn yield_point(&self, agent: &AgentState, ctx: &LaneContext) -> Option<f64> {
        let d = ctx.conflict?;
        let front_to_conflict = d - agent.half_length;
        if front_to_conflict < 0.5 {
            return None;
        }
        Some(ctx.projection.s + (front_to_conflict - self.yield_margin).max(0.0))
    }

    /// Waypoints along the route for `maneuver`, shifted laterally by the
    /// lane shift plus `offset`.
    pub fn waypoints(
        &self,
        maneuver: Maneuver,
        agent: &AgentState,
        ctx: &LaneContext,
        route: &Route,
        offset: f64,
    ) -> Vec<Point> {
        let s0 = ctx.projection.s;
        let lateral = maneuver.lane_shift() * ctx.lane_width + offset;
        let (spacing, cap) = match maneuver {
            Maneuver::Stop => (0.0, None),
            Maneuver::Yield => (0.5 * self.spacing, self.yield_point(agent, ctx)),
            _ => (self.spacing, None),
        };
        (1..=self.count)
            .map(|k| {
                let mut s = s0 + spacing * k as f64;
                if let Some(c) = cap {
                    s = s.min(c.max(s0));
                }
                route.path.sample_offset(s, lateral)
            })
            .collect()
    }
}

/// Lateral offset of the last waypoint from the route centerline.
pub fn commanded_lateral(route: &Route, cmd: &Command) -> f64 {
    match cmd.waypoints.last() {
        Some(&p) => route.path.project(p).lateral,
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Maneuver::ALL {
            assert_eq!(m.as_str().parse::<Maneuver>().unwrap(), m);
            assert_eq!(Maneuver::from_index(m.index()), Some(m));
        }
        assert!("left".parse::<Maneuver>().is_err());
    }
}
