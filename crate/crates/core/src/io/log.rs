//! Line-per-(step, agent) CSV trajectory logs. Floats are written with 17
//! significant digits so a parsed log replays bit-exactly.

use std::io::{Read, Write};

use crate::closed_loop::{AgentRecord, StepRecord};
use crate::command::{Command, Maneuver};
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::scene::{AgentState, Control};

pub const LOG_COLUMNS: [&str; 10] = [
    "time", "agent", "x", "y", "heading", "speed", "accel", "steer", "maneuver", "reward",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub time: f64,
    pub agent: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub steer: f64,
    pub maneuver: Option<Maneuver>,
    pub reward: f64,
}

pub fn log_rows(records: &[StepRecord]) -> Vec<LogRow> {
    records
        .iter()
        .flat_map(|r| {
            r.agents.iter().map(move |a| LogRow {
                time: r.time,
                agent: a.state.id,
                x: a.state.x,
                y: a.state.y,
                heading: a.state.heading,
                speed: a.state.speed,
                accel: a.control.accel,
                steer: a.control.steer,
                maneuver: a.command.as_ref().map(|c| c.maneuver),
                reward: a.reward,
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Parse(e.to_string()),
    }
}

pub fn write_rows<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            num(r.time),
            r.agent.to_string(),
            num(r.x),
            num(r.y),
            num(r.heading),
            num(r.speed),
            num(r.accel),
            num(r.steer),
            r.maneuver.map_or(String::new(), |m| m.as_str().to_string()),
            num(r.reward),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    write_rows(&log_rows(records), out)
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<LogRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers().map_err(csv_err)?;
    if header.iter().ne(LOG_COLUMNS) {
        return Err(Error::Parse(format!("log header must be '{}'", LOG_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad {} '{}'", line + 1, LOG_COLUMNS[i], &rec[i])))
        };
        let agent = rec[1]
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad agent '{}'", line + 1, &rec[1])))?;
        let maneuver = match &rec[8] {
            "" => None,
            s => Some(s.parse()?),
        };
        rows.push(LogRow {
            time: f(0)?,
            agent,
            x: f(2)?,
            y: f(3)?,
            heading: f(4)?,
            speed: f(5)?,
            accel: f(6)?,
            steer: f(7)?,
            maneuver,
            reward: f(9)?,
        });
    }
    Ok(rows)
}

/// Rebuilds step records from log rows. Geometry and routes come from the
/// scenario (agent ids are spawn indices); commands keep only the maneuver.
pub fn records_from_rows(rows: &[LogRow], scenario: &Scenario) -> Result<Vec<StepRecord>> {
    let mut out: Vec<StepRecord> = Vec::new();
    for r in rows {
        let spawn = scenario.spawns.get(r.agent as usize).ok_or_else(|| Error::Resolution {
            kind: "agent",
            name: r.agent.to_string(),
        })?;
        let v = &scenario.vehicle;
        let rec = AgentRecord {
            state: AgentState {
                id: r.agent,
                x: r.x,
                y: r.y,
                heading: r.heading,
                speed: r.speed,
                wheelbase: v.wheelbase,
                half_length: v.half_length,
                half_width: v.half_width,
                route: spawn.route,
            },
            control: Control::new(r.accel, r.steer),
            command: r.maneuver.map(|maneuver| Command {
                maneuver,
                waypoints: vec![],
            }),
            reward: r.reward,
        };
        match out.last_mut() {
            Some(last) if last.time.to_bits() == r.time.to_bits() => last.agents.push(rec),
            Some(last) if r.time < last.time => {
                return Err(Error::Ordering {
                    previous: last.time,
                    got: r.time,
                })
            }
            _ => out.push(StepRecord {
                time: r.time,
                agents: vec![rec],
                events: vec![],
                rollout: None,
            }),
        }
    }
    Ok(out)
}
