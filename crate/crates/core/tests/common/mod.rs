#![allow(dead_code)]

use std::sync::Arc;

use hsim_core::network::{Junction, Lane, Polyline, RoadNetwork};
use hsim_core::{AgentState, SceneHistory, SceneState};

pub fn straight_network() -> Arc<RoadNetwork> {
    let lane = |id: &str, y: f64| Lane {
        id: id.into(),
        centerline: Polyline::new(vec![[-200.0, y], [200.0, y]]).unwrap(),
        width: 3.5,
        speed_limit: 10.0,
        signal: None,
    };
    Arc::new(
        RoadNetwork::new(
            vec![lane("a", 0.0), lane("b", 3.5)],
            vec![],
            vec![("a".into(), vec![0]), ("b".into(), vec![1])],
        )
        .unwrap(),
    )
}

pub fn crossing_network() -> Arc<RoadNetwork> {
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

pub fn car(id: u32, x: f64, y: f64, heading: f64, speed: f64, route: usize) -> AgentState {
    AgentState {
        id,
        x,
        y,
        heading,
        speed,
        wheelbase: 2.7,
        half_length: 2.25,
        half_width: 0.9,
        route,
    }
}

/// History of `len` constant-velocity snapshots ending at `agents`.
pub fn history(agents: &[AgentState], network: Arc<RoadNetwork>, len: usize, dt: f64) -> SceneHistory {
    let mut h = SceneHistory::new(len, dt);
    for k in (0..len).rev() {
        let back = k as f64 * dt;
        let snap: Vec<AgentState> = agents
            .iter()
            .map(|a| AgentState {
                x: a.x - a.speed * a.heading.cos() * back,
                y: a.y - a.speed * a.heading.sin() * back,
                ..*a
            })
            .collect();
        h.push(SceneState::new(10.0 - back, snap, network.clone())).unwrap();
    }
    h
}
