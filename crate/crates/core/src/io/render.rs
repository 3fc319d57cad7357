//! SVG frames: lanes as polylines, vehicles as oriented rectangles,
//! commanded waypoints as markers and TTC-flagged vehicles outlined in red.

use std::fmt::Write as _;

use crate::closed_loop::StepRecord;
use crate::metrics::ttc_flagged_pairs;
use crate::network::RoadNetwork;
use crate::scene::AgentState;

const MARGIN: f64 = 10.0;

fn bounds(net: &RoadNetwork, records: &[StepRecord]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut add = |x: f64, y: f64| {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    };
    for l in &net.lanes {
        for p in l.centerline.points() {
            add(p[0], p[1]);
        }
    }
    for r in records {
        for a in &r.agents {
            add(a.state.x, a.state.y);
        }
    }
    if !b[0].is_finite() {
        return [-MARGIN, -MARGIN, MARGIN, MARGIN];
    }
    [b[0] - MARGIN, b[1] - MARGIN, b[2] + MARGIN, b[3] + MARGIN]
}

fn frame(net: &RoadNetwork, rec: Option<&StepRecord>, view: [f64; 4]) -> String {
    let mut s = String::new();
    let (w, h) = (view[2] - view[0], view[3] - view[1]);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.3} {:.3} {:.3} {:.3}">"#,
        view[0], -view[3], w, h
    )
    .unwrap();
    if let Some(r) = rec {
        writeln!(s, r#"<title>t={:.3}</title>"#, r.time).unwrap();
    }
    writeln!(s, r#"<g transform="scale(1,-1)">"#).unwrap();
    for l in &net.lanes {
        let pts: Vec<String> = l
            .centerline
            .points()
            .iter()
            .map(|p| format!("{:.3},{:.3}", p[0], p[1]))
            .collect();
        writeln!(
            s,
            r##"<polyline class="lane" points="{}" fill="none" stroke="#bbb" stroke-width="{:.3}"/>"##,
            pts.join(" "),
            l.width
        )
        .unwrap();
    }
    if let Some(r) = rec {
        let states: Vec<AgentState> = r.agents.iter().map(|a| a.state).collect();
        let mut flagged = vec![false; states.len()];
        for (i, j) in ttc_flagged_pairs(&states) {
            flagged[i] = true;
            flagged[j] = true;
        }
        for (a, f) in r.agents.iter().zip(&flagged) {
            let st = &a.state;
            let stroke = if *f { "#d00" } else { "#333" };
            writeln!(
                s,
                r##"<rect class="vehicle" data-agent="{}" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" transform="translate({:.3} {:.3}) rotate({:.3})" fill="#48c" stroke="{stroke}" stroke-width="{}"/>"##,
                st.id,
                -st.half_length,
                -st.half_width,
                2.0 * st.half_length,
                2.0 * st.half_width,
                st.x,
                st.y,
                st.heading.to_degrees(),
                if *f { 0.6 } else { 0.2 },
            )
            .unwrap();
            if let Some(c) = &a.command {
                for p in &c.waypoints {
                    writeln!(
                        s,
                        r##"<circle class="waypoint" data-agent="{}" cx="{:.3}" cy="{:.3}" r="0.4" fill="#e90"/>"##,
                        st.id, p[0], p[1]
                    )
                    .unwrap();
                }
            }
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// One SVG document per `stride` records; an empty log gives a single
/// network-only frame.
pub fn render_frames(records: &[StepRecord], network: &RoadNetwork, stride: usize) -> Vec<String> {
    let stride = stride.max(1);
    let view = bounds(network, records);
    if records.is_empty() {
        return vec![frame(network, None, view)];
    }
    records
        .iter()
        .step_by(stride)
        .map(|r| frame(network, Some(r), view))
        .collect()
}
