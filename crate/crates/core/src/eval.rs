//! Cost statistics and sublayer trajectories.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::model::{core_trace, embed, CoreWeights};
use crate::training::CostLog;

/// Quartiles of the costs of one window of batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    /// Batch index of the first batch in the window.
    pub window_start: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Quantile `q` of ascending `sorted` values, interpolating linearly
/// between the two closest ranks (position `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quartiles over consecutive non-overlapping windows; a trailing partial
/// window is dropped.
pub fn window_stats(log: &CostLog, window: usize) -> Result<Vec<WindowStats>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    Ok(log
        .entries
        .chunks_exact(window)
        .map(|chunk| {
            let mut costs: Vec<f64> = chunk.iter().map(|&(_, c)| c).collect();
            costs.sort_by(f64::total_cmp);
            WindowStats {
                window_start: chunk[0].0,
                median: quantile(&costs, 0.5),
                q1: quantile(&costs, 0.25),
                q3: quantile(&costs, 0.75),
            }
        })
        .collect())
}

pub fn encode_window_stats(stats: &[WindowStats], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "window_start,median,q1,q3")?;
    for s in stats {
        writeln!(w, "{},{},{},{}", s.window_start, s.median, s.q1, s.q3)?;
    }
    Ok(())
}

pub fn write_window_stats(stats: &[WindowStats], path: &Path) -> Result<()> {
    write_atomic(path, |w| encode_window_stats(stats, w))
}

/// `exp(cost)` for a mean cross-entropy cost in nats.
pub fn perplexity(cost: f64) -> f64 {
    cost.exp()
}

/// One row of the running matrix recorded before the core and after every
/// sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub row: usize,
    /// `input`, `L1S1`, `L1S2`, ..., `LmS2`.
    pub stages: Vec<(String, Vec<f64>)>,
}

impl TrajectoryRecord {
    pub fn dim(&self) -> usize {
        self.stages.first().map_or(0, |(_, v)| v.len())
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.stages.iter().map(|(_, v)| v.as_slice())
    }
}

pub fn stage_labels(layers: usize) -> Vec<String> {
    let mut out = vec!["input".to_string()];
    for k in 1..=layers {
        out.push(format!("L{k}S1"));
        out.push(format!("L{k}S2"));
    }
    out
}

/// Follows row `row` (default: the last) of `tokens` through the core.
pub fn trace_trajectory(
    weights: &CoreWeights,
    tokens: &[usize],
    row: Option<usize>,
) -> Result<TrajectoryRecord> {
    let x = embed(tokens, weights)?;
    let row = row.unwrap_or(tokens.len() - 1);
    if row >= tokens.len() {
        return Err(Error::RowOutOfRange {
            row,
            rows: tokens.len(),
        });
    }
    let trace = core_trace(&x, weights)?;
    let stages = stage_labels(weights.config.layers)
        .into_iter()
        .zip(&trace.stages)
        .map(|(label, m)| (label, m.row(row).to_vec()))
        .collect();
    Ok(TrajectoryRecord { row, stages })
}

pub fn encode_trajectory_csv(record: &TrajectoryRecord, w: &mut dyn Write) -> Result<()> {
    let header: Vec<String> = (1..=record.dim()).map(|c| format!("c{c}")).collect();
    writeln!(w, "stage,{}", header.join(","))?;
    for (label, v) in &record.stages {
        let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{label},{}", cells.join(","))?;
    }
    Ok(())
}

/// Plane drawing of a two-dimensional trajectory: one polyline through the
/// stages in order, a dot and a label per stage.
pub fn trajectory_svg(record: &TrajectoryRecord) -> Result<String> {
    if record.dim() != 2 {
        return Err(Error::Unsupported(format!(
            "SVG output needs 2-dimensional rows, got {}",
            record.dim()
        )));
    }
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 40.0;
    let xs: Vec<f64> = record.points().map(|p| p[0]).collect();
    let ys: Vec<f64> = record.points().map(|p| p[1]).collect();
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - x0) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - y0) * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let coords: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| format!("{:.3},{:.3}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        coords.join(" ")
    );
    for ((label, _), (&x, &y)) in record.stages.iter().zip(xs.iter().zip(&ys)) {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="black"/><text x="{:.3}" y="{:.3}" font-size="11">{label}</text>"#,
            px(x),
            py(y),
            px(x) + 5.0,
            py(y) - 5.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Writes the trajectory CSV and, if `svg` is given, its plane drawing.
pub fn emit_trajectory(record: &TrajectoryRecord, csv: &Path, svg: Option<&Path>) -> Result<()> {
    let drawing = svg.map(|_| trajectory_svg(record)).transpose()?;
    write_atomic(csv, |w| encode_trajectory_csv(record, w))?;
    if let (Some(path), Some(doc)) = (svg, drawing) {
        write_atomic(path, |w| Ok(w.write_all(doc.as_bytes())?))?;
    }
    Ok(())
}

/// Parses a trajectory CSV written by [`emit_trajectory`].
pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryRecord> {
    let text = std::fs::read_to_string(path)?;
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let dim = header.split(',').count() - 1;
    if !header.starts_with("stage,") || dim == 0 {
        return Err(malformed(format!("bad header {header:?}")));
    }
    let mut stages = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default().to_string();
        let v: Vec<f64> = cells
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(format!("bad row {line:?}")))?;
        if v.len() != dim {
            return Err(malformed(format!("row {line:?} has {} values", v.len())));
        }
        stages.push((label, v));
    }
    Ok(TrajectoryRecord { row: 0, stages })
}
