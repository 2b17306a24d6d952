//! Per-step safety traces: CSV round trip and SVG trajectory export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub position: [f64; 2],
    pub nominal: [f64; 2],
    pub safe: [f64; 2],
    pub eta: f64,
    /// `h_1 … h_I` at `position`.
    pub barrier_values: Vec<f64>,
    pub composite_h: f64,
    pub reward: f64,
    pub done: bool,
}

impl TraceRow {
    pub fn min_hi(&self) -> f64 {
        self.barrier_values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

const LEADING: [&str; 9] = [
    "episode", "step", "p_x", "p_y", "u_nom_x", "u_nom_y", "u_s_x", "u_s_y", "eta",
];
const TRAILING: [&str; 3] = ["composite_h", "reward", "done"];

/// Header for `count` barriers.
pub fn header(count: usize) -> Vec<String> {
    LEADING
        .iter()
        .map(|s| s.to_string())
        .chain((1..=count).map(|i| format!("h_{i}")))
        .chain(TRAILING.iter().map(|s| s.to_string()))
        .collect()
}

/// Writes rows as CSV. All rows must have the same barrier count, which the first row fixes.
pub fn write_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Parameter {
            name: "traces",
            reason: "no trace rows to write; the header needs a barrier count".into(),
        });
    };
    let count = first.barrier_values.len();
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse {
        what: "trace csv",
        reason: e.to_string(),
    };
    w.write_record(header(count)).map_err(csv_err)?;
    let mut record = Vec::with_capacity(LEADING.len() + count + TRAILING.len());
    for row in rows {
        if row.barrier_values.len() != count {
            return Err(Error::Shape {
                context: "trace row barrier values",
                expected: count,
                actual: row.barrier_values.len(),
            });
        }
        record.clear();
        record.push(row.episode.to_string());
        record.push(row.step.to_string());
        for v in row.position.iter().chain(&row.nominal).chain(&row.safe) {
            record.push(v.to_string());
        }
        record.push(row.eta.to_string());
        record.extend(row.barrier_values.iter().map(f64::to_string));
        record.push(row.composite_h.to_string());
        record.push(row.reward.to_string());
        record.push(u8::from(row.done).to_string());
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse {
        what: "trace csv",
        reason: e.to_string(),
    })
}

fn parse_err(reason: impl Into<String>) -> Error {
    Error::Parse {
        what: "trace csv",
        reason: reason.into(),
    }
}

/// Parses a trace CSV written by [`write_csv`]. The header is checked strictly.
pub fn parse_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let fixed = LEADING.len() + TRAILING.len();
    if headers.len() < fixed + 1 {
        return Err(parse_err(format!(
            "expected at least {} columns, found {}",
            fixed + 1,
            headers.len()
        )));
    }
    let count = headers.len() - fixed;
    let expected = header(count);
    if let Some((i, (got, want))) = headers.iter().zip(&expected).enumerate().find(|(_, (g, w))| g != w) {
        return Err(parse_err(format!("column {i}: expected {want:?}, found {got:?}")));
    }

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let ctx =
            |col: usize, reason: String| parse_err(format!("row {}, column {}: {reason}", line + 1, expected[col]));
        let int = |col: usize| -> Result<usize> {
            record[col]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| ctx(col, e.to_string()))
        };
        let real = |col: usize| -> Result<f64> {
            let v: f64 = record[col]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| ctx(col, e.to_string()))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ctx(col, "non-finite value".into()))
            }
        };
        let done_col = headers.len() - 1;
        let done = match record[done_col].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(ctx(done_col, format!("expected 0 or 1, found {other:?}"))),
        };
        rows.push(TraceRow {
            episode: int(0)?,
            step: int(1)?,
            position: [real(2)?, real(3)?],
            nominal: [real(4)?, real(5)?],
            safe: [real(6)?, real(7)?],
            eta: real(8)?,
            barrier_values: (0..count).map(|i| real(LEADING.len() + i)).collect::<Result<_>>()?,
            composite_h: real(done_col - 2)?,
            reward: real(done_col - 1)?,
            done,
        });
    }
    Ok(rows)
}

/// Trajectory plot: obstacle disks, goal circle, one polyline per episode.
pub fn render_svg(cfg: &EnvConfig, rows: &[TraceRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parameter {
            name: "traces",
            reason: "no trace rows recorded".into(),
        });
    }
    let mut episodes: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
    for row in rows {
        episodes.entry(row.episode).or_default().push(row.position);
    }

    // World bounds cover the scene and every visited point.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let mut grow = |p: [f64; 2], r: f64| {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k] - r);
            hi[k] = hi[k].max(p[k] + r);
        }
    };
    for o in cfg.obstacles.iter() {
        grow(o.center, o.radius);
    }
    grow(cfg.goal_center, cfg.goal_radius);
    grow(cfg.start_box.min, 0.0);
    grow(cfg.start_box.max, 0.0);
    for p in rows.iter().map(|r| r.position) {
        grow(p, 0.0);
    }
    let margin = 0.05 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let (x0, y0) = (lo[0] - margin, lo[1] - margin);
    let (w, h) = (hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin);
    let stroke = 0.004 * w.max(h);

    let mut svg = String::new();
    // The y axis is flipped so the plot reads like a standard x-y chart.
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.4} {:.4} {w:.4} {h:.4}" width="600" height="{:.0}">"#,
        -(y0 + h),
        600.0 * h / w
    );
    let _ = writeln!(svg, r#"<g transform="scale(1,-1)">"#);
    for o in cfg.obstacles.iter() {
        let _ = writeln!(
            svg,
            r##"<circle class="obstacle" cx="{}" cy="{}" r="{}" fill="#d9534f" fill-opacity="0.5"/>"##,
            o.center[0], o.center[1], o.radius
        );
    }
    let _ = writeln!(
        svg,
        r##"<circle class="goal" cx="{}" cy="{}" r="{}" fill="none" stroke="#2a9d38" stroke-width="{stroke}"/>"##,
        cfg.goal_center[0], cfg.goal_center[1], cfg.goal_radius
    );
    let count = episodes.len();
    for (k, points) in episodes.values().enumerate() {
        let hue = 360.0 * k as f64 / count as f64;
        let mut pts = String::with_capacity(points.len() * 16);
        for p in points {
            let _ = write!(pts, "{:.5},{:.5} ", p[0], p[1]);
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="trajectory" points="{}" fill="none" stroke="hsl({hue:.1},70%,45%)" stroke-width="{stroke}"/>"#,
            pts.trim_end()
        );
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

pub const TRACE_CSV: &str = "traces.csv";
pub const TRAJECTORY_SVG: &str = "trajectories.svg";

/// Writes `traces.csv` and `trajectories.svg` into `dir`; returns both paths.
pub fn export_traces(dir: &Path, cfg: &EnvConfig, rows: &[TraceRow]) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Parameter {
            name: "traces",
            reason: "no trace rows recorded; nothing to export".into(),
        });
    }
    let svg = render_svg(cfg, rows)?;
    let csv_path = dir.join(TRACE_CSV);
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))?;
    let svg_path = dir.join(TRAJECTORY_SVG);
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}
