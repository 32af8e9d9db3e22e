//! Static top-down SVG of one scenario.

use std::fmt::Write;

use scenflow_core::scene::{ActorState, Scenario};

const MARGIN: f64 = 15.0;
const SCALE: f64 = 4.0;
/// Frames drawn across the whole horizon, oldest faintest.
const SNAPSHOTS: usize = 6;

/// Lane polylines, actor boxes at evenly spaced timesteps with rising
/// opacity, ego in red, and a legend with the actor count.
pub fn svg(s: &Scenario) -> String {
    let frames: Vec<&Vec<ActorState>> = s.history.iter().chain(&s.future).collect();
    let picks = snapshot_indices(frames.len());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for f in &frames {
        for a in f.iter() {
            x0 = x0.min(a.x);
            x1 = x1.max(a.x);
            y0 = y0.min(a.y);
            y1 = y1.max(a.y);
        }
    }
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
    }
    let (x0, y0, x1, y1) = (x0 - MARGIN, y0 - MARGIN, x1 + MARGIN, y1 + MARGIN);
    let (w, h) = ((x1 - x0) * SCALE, (y1 - y0) * SCALE);
    let px = |x: f64| (x - x0) * SCALE;
    let py = |y: f64| (y1 - y) * SCALE;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1}" height="{:.1}" viewBox="0 0 {w:.1} {:.1}">"#,
        h + 24.0,
        h + 24.0
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(out, r##"<g id="lanes" fill="none" stroke="#b0b0b0" stroke-width="1">"##);
    for lane in s.map.lanes() {
        let pts: Vec<String> = lane
            .nodes
            .iter()
            .map(|&i| format!("{:.2},{:.2}", px(s.map.nodes[i].x), py(s.map.nodes[i].y)))
            .collect();
        let _ = writeln!(out, r#"<polyline data-lane="{}" points="{}"/>"#, lane.id, pts.join(" "));
    }
    let _ = writeln!(out, "</g>");
    let ego = s.ego_index();
    let _ = writeln!(out, r##"<g id="actors" stroke="#202020" stroke-width="0.5">"##);
    for (rank, &t) in picks.iter().enumerate() {
        let opacity = (rank + 1) as f64 / picks.len() as f64;
        for (i, a) in frames[t].iter().enumerate() {
            let fill = if Some(i) == ego { "#d62728" } else { "#1f77b4" };
            let _ = writeln!(
                out,
                r#"<rect data-actor="{}" data-t="{t}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="{opacity:.3}" transform="translate({:.2},{:.2}) rotate({:.2})"/>"#,
                s.actors.get(i).copied().unwrap_or(i as u32),
                -0.5 * a.length * SCALE,
                -0.5 * a.width * SCALE,
                a.length * SCALE,
                a.width * SCALE,
                px(a.x),
                py(a.y),
                -a.yaw.to_degrees()
            );
        }
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text id="legend" x="4" y="{:.1}" font-family="monospace" font-size="12">{} actors: {} (ego red), {} history + {} future steps</text>"#,
        h + 16.0,
        escape(&s.id),
        s.n_actors(),
        s.history.len(),
        s.future.len()
    );
    out.push_str("</svg>\n");
    out
}

fn snapshot_indices(n: usize) -> Vec<usize> {
    if n == 0 {
        return vec![];
    }
    let k = SNAPSHOTS.min(n);
    let mut v: Vec<usize> = (0..k)
        .map(|j| if k == 1 { n - 1 } else { j * (n - 1) / (k - 1) })
        .collect();
    v.dedup();
    v
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_cover_both_ends() {
        assert_eq!(snapshot_indices(0), Vec::<usize>::new());
        assert_eq!(snapshot_indices(1), vec![0]);
        assert_eq!(snapshot_indices(31), vec![0, 6, 12, 18, 24, 30]);
    }
}
