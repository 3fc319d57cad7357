//! Scenario files: network geometry, signal plans, routes and spawn events.
//!
//! The text form is TOML. Parsing rejects unknown fields and dangling names;
//! serialization is canonical so parse and serialize round-trip byte for
//! byte.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Junction, Lane, Phase, Point, Polyline, RoadNetwork, SignalRef};
use crate::scene::AgentState;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub wheelbase: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            half_length: 2.25,
            half_width: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub junction: String,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSpec {
    pub id: String,
    pub width: f64,
    pub speed_limit: f64,
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub duration: f64,
    pub green: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionSpec {
    pub id: String,
    #[serde(default)]
    pub conflict_points: Vec<Point>,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: String,
    pub lanes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub time: f64,
    pub route: String,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub vehicle: VehicleSpec,
    pub lanes: Vec<LaneSpec>,
    #[serde(default)]
    pub junctions: Vec<JunctionSpec>,
    pub routes: Vec<RouteSpec>,
    #[serde(default)]
    pub spawns: Vec<SpawnSpec>,
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile> {
    // check the version before the schema so other versions get a version error
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
    match table.get("version").map(|v| v.as_integer()) {
        Some(Some(v)) if v == SCENARIO_VERSION as i64 => {}
        Some(Some(v)) => {
            return Err(Error::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                supported: SCENARIO_VERSION,
            })
        }
        _ => return Err(Error::Parse("missing integer field `version`".into())),
    }
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
    file.build()?;
    Ok(file)
}

pub fn serialize_scenario(file: &ScenarioFile) -> Result<String> {
    toml::to_string(file).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spawn {
    pub time: f64,
    pub route: usize,
    pub speed: f64,
}

/// A resolved scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: Arc<RoadNetwork>,
    pub vehicle: VehicleSpec,
    /// Sorted by time; agent ids are spawn indices.
    pub spawns: Vec<Spawn>,
}

impl Scenario {
    /// The state of spawn `k` at the start of its route.
    pub fn spawn_state(&self, k: usize) -> AgentState {
        let sp = self.spawns[k];
        let (p, heading) = self.network.routes[sp.route].path.sample(0.0);
        AgentState {
            id: k as u32,
            x: p[0],
            y: p[1],
            heading,
            speed: sp.speed,
            wheelbase: self.vehicle.wheelbase,
            half_length: self.vehicle.half_length,
            half_width: self.vehicle.half_width,
            route: sp.route,
        }
    }

    pub fn empty(network: Arc<RoadNetwork>) -> Self {
        Self {
            name: "empty".into(),
            network,
            vehicle: VehicleSpec::default(),
            spawns: vec![],
        }
    }
}

impl ScenarioFile {
    /// Resolves names and validates geometry.
    pub fn build(&self) -> Result<Scenario> {
        if self.version != SCENARIO_VERSION {
            return Err(Error::Version {
                found: self.version,
                supported: SCENARIO_VERSION,
            });
        }
        let v = self.vehicle;
        if !(v.wheelbase > 0.0 && v.half_length > 0.0 && v.half_width > 0.0) {
            return Err(Error::InvalidInput("vehicle dimensions must be > 0".into()));
        }
        let junction_idx = index_of(self.junctions.iter().map(|j| j.id.as_str()), "junction")?;
        let lane_idx = index_of(self.lanes.iter().map(|l| l.id.as_str()), "lane")?;
        let route_idx = index_of(self.routes.iter().map(|r| r.id.as_str()), "route")?;
        let mut lanes = Vec::with_capacity(self.lanes.len());
        for l in &self.lanes {
            let signal = match &l.signal {
                Some(s) => Some(SignalRef {
                    junction: resolve(&junction_idx, &s.junction, "junction")?,
                    group: s.group,
                }),
                None => None,
            };
            lanes.push(Lane {
                id: l.id.clone(),
                centerline: Polyline::new(l.points.clone())
                    .map_err(|e| Error::InvalidInput(format!("lane '{}': {e}", l.id)))?,
                width: l.width,
                speed_limit: l.speed_limit,
                signal,
            });
        }
        let junctions = self
            .junctions
            .iter()
            .map(|j| Junction {
                id: j.id.clone(),
                conflict_points: j.conflict_points.clone(),
                phases: j
                    .phases
                    .iter()
                    .map(|p| Phase {
                        duration: p.duration,
                        green: p.green.clone(),
                    })
                    .collect(),
            })
            .collect();
        let routes = self
            .routes
            .iter()
            .map(|r| {
                let ids = r
                    .lanes
                    .iter()
                    .map(|name| resolve(&lane_idx, name, "lane"))
                    .collect::<Result<Vec<_>>>()?;
                Ok((r.id.clone(), ids))
            })
            .collect::<Result<Vec<_>>>()?;
        let network = RoadNetwork::new(lanes, junctions, routes)?;
        let mut spawns = self
            .spawns
            .iter()
            .map(|s| {
                if !(s.time >= 0.0 && s.speed >= 0.0 && s.time.is_finite() && s.speed.is_finite()) {
                    return Err(Error::InvalidInput(
                        "spawn time and speed must be finite and >= 0".into(),
                    ));
                }
                Ok(Spawn {
                    time: s.time,
                    route: resolve(&route_idx, &s.route, "route")?,
                    speed: s.speed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        spawns.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Scenario {
            name: self.name.clone(),
            network: Arc::new(network),
            vehicle: v,
            spawns,
        })
    }
}

fn index_of<'a>(names: impl Iterator<Item = &'a str>, kind: &'static str) -> Result<HashMap<&'a str, usize>> {
    let mut out = HashMap::new();
    for (i, n) in names.enumerate() {
        if out.insert(n, i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate {kind} id '{n}'")));
        }
    }
    Ok(out)
}

fn resolve(map: &HashMap<&str, usize>, name: &str, kind: &'static str) -> Result<usize> {
    map.get(name).copied().ok_or_else(|| Error::Resolution {
        kind,
        name: name.to_string(),
    })
}

const LANE_WIDTH: f64 = 3.5;
const SPEED_LIMIT: f64 = 10.0;
/// Half the junction box side.
const BOX: f64 = 8.0;

fn lane(id: String, a: Point, b: Point, signal: Option<(&str, usize)>) -> LaneSpec {
    LaneSpec {
        id,
        width: LANE_WIDTH,
        speed_limit: SPEED_LIMIT,
        points: vec![a, b],
        signal: signal.map(|(j, g)| SignalSpec {
            junction: j.to_string(),
            group: g,
        }),
    }
}

/// A straight street in direction `dir` driving on the right of the street
/// axis, cut at each junction box. Returns the lanes and the route.
fn street(
    name: &str,
    axis: Point,
    dir: Point,
    from: f64,
    to: f64,
    junctions: &[(f64, &str, usize)],
) -> (Vec<LaneSpec>, RouteSpec) {
    let off = [dir[1] * LANE_WIDTH / 2.0, -dir[0] * LANE_WIDTH / 2.0];
    let at = |s: f64| [axis[0] + dir[0] * s + off[0], axis[1] + dir[1] * s + off[1]];
    let mut lanes = Vec::new();
    let mut s = from;
    for (k, &(c, j, g)) in junctions.iter().enumerate() {
        lanes.push(lane(format!("{name}_{k}"), at(s), at(c - BOX), Some((j, g))));
        lanes.push(lane(format!("{name}_{k}x"), at(c - BOX), at(c + BOX), None));
        s = c + BOX;
    }
    lanes.push(lane(format!("{name}_out"), at(s), at(to), None));
    let route = RouteSpec {
        id: name.to_string(),
        lanes: lanes.iter().map(|l| l.id.clone()).collect(),
    };
    (lanes, route)
}

fn signal_plan() -> Vec<PhaseSpec> {
    vec![
        PhaseSpec {
            duration: 15.0,
            green: vec![0],
        },
        PhaseSpec {
            duration: 3.0,
            green: vec![],
        },
        PhaseSpec {
            duration: 15.0,
            green: vec![1],
        },
        PhaseSpec {
            duration: 3.0,
            green: vec![],
        },
    ]
}

fn junction(id: &str, c: Point) -> JunctionSpec {
    let h = LANE_WIDTH / 2.0;
    JunctionSpec {
        id: id.to_string(),
        conflict_points: vec![
            [c[0] - h, c[1] - h],
            [c[0] + h, c[1] - h],
            [c[0] - h, c[1] + h],
            [c[0] + h, c[1] + h],
        ],
        phases: signal_plan(),
    }
}

/// Two same-direction lanes on a 300 m straight road.
pub fn straight_road() -> ScenarioFile {
    let lanes = vec![
        lane("main".into(), [0.0, 0.0], [300.0, 0.0], None),
        lane("left".into(), [0.0, LANE_WIDTH], [300.0, LANE_WIDTH], None),
    ];
    let routes = vec![
        RouteSpec {
            id: "main".into(),
            lanes: vec!["main".into()],
        },
        RouteSpec {
            id: "left".into(),
            lanes: vec!["left".into()],
        },
    ];
    let spawns = [(0.0, "main", 8.0), (0.0, "left", 6.0), (2.0, "main", 9.0)]
        .map(|(time, route, speed)| SpawnSpec {
            time,
            route: route.into(),
            speed,
        })
        .to_vec();
    ScenarioFile {
        version: SCENARIO_VERSION,
        name: "straight".into(),
        vehicle: VehicleSpec::default(),
        lanes,
        junctions: vec![],
        routes,
        spawns,
    }
}

/// A signalized four-way crossing of two two-way streets with `agents`
/// vehicles spread over the four approaches.
pub fn intersection(agents: usize) -> ScenarioFile {
    let j = [(0.0, "c", 0usize)];
    let jn = [(0.0, "c", 1usize)];
    let mut lanes = Vec::new();
    let mut routes = Vec::new();
    for (name, axis, dir, sig) in [
        ("eb", [0.0, 0.0], [1.0, 0.0], &j),
        ("wb", [0.0, 0.0], [-1.0, 0.0], &j),
        ("nb", [0.0, 0.0], [0.0, 1.0], &jn),
        ("sb", [0.0, 0.0], [0.0, -1.0], &jn),
    ] {
        let (l, r) = street(name, axis, dir, -70.0, 70.0, sig);
        lanes.extend(l);
        routes.push(r);
    }
    let spawns = (0..agents)
        .map(|k| SpawnSpec {
            time: 2.5 * (k / 4) as f64,
            route: routes[k % 4].id.clone(),
            speed: 8.0,
        })
        .collect();
    ScenarioFile {
        version: SCENARIO_VERSION,
        name: "intersection".into(),
        vehicle: VehicleSpec::default(),
        lanes,
        junctions: vec![junction("c", [0.0, 0.0])],
        routes,
        spawns,
    }
}

/// Two east-west and two north-south two-way streets crossing at four
/// signalized junctions 100 m apart.
pub fn grid() -> ScenarioFile {
    let mut lanes = Vec::new();
    let mut routes = Vec::new();
    let mut junctions = Vec::new();
    for (r, y) in [0.0, 100.0].into_iter().enumerate() {
        for (c, x) in [0.0, 100.0].into_iter().enumerate() {
            junctions.push(junction(&format!("j{r}{c}"), [x, y]));
        }
    }
    let names: Vec<String> = junctions.iter().map(|j| j.id.clone()).collect();
    let n = |r: usize, c: usize| names[2 * r + c].as_str();
    for (r, y) in [0.0, 100.0].into_iter().enumerate() {
        let east = [(0.0, n(r, 0), 0), (100.0, n(r, 1), 0)];
        let west = [(-100.0, n(r, 1), 0), (0.0, n(r, 0), 0)];
        let (l, rt) = street(&format!("eb{r}"), [0.0, y], [1.0, 0.0], -60.0, 160.0, &east);
        lanes.extend(l);
        routes.push(rt);
        let (l, rt) = street(&format!("wb{r}"), [0.0, y], [-1.0, 0.0], -160.0, 60.0, &west);
        lanes.extend(l);
        routes.push(rt);
    }
    for (c, x) in [0.0, 100.0].into_iter().enumerate() {
        let north = [(0.0, n(0, c), 1), (100.0, n(1, c), 1)];
        let south = [(-100.0, n(1, c), 1), (0.0, n(0, c), 1)];
        let (l, rt) = street(&format!("nb{c}"), [x, 0.0], [0.0, 1.0], -60.0, 160.0, &north);
        lanes.extend(l);
        routes.push(rt);
        let (l, rt) = street(&format!("sb{c}"), [x, 0.0], [0.0, -1.0], -160.0, 60.0, &south);
        lanes.extend(l);
        routes.push(rt);
    }
    let spawns = routes
        .iter()
        .enumerate()
        .map(|(k, r)| SpawnSpec {
            time: (k % 2) as f64 * 3.0,
            route: r.id.clone(),
            speed: 8.0,
        })
        .collect();
    ScenarioFile {
        version: SCENARIO_VERSION,
        name: "grid".into(),
        vehicle: VehicleSpec::default(),
        lanes,
        junctions,
        routes,
        spawns,
    }
}

/// Bundled scenario by name.
pub fn bundled(name: &str) -> Option<ScenarioFile> {
    match name {
        "straight" => Some(straight_road()),
        "intersection" => Some(intersection(8)),
        "grid" => Some(grid()),
        _ => None,
    }
}
