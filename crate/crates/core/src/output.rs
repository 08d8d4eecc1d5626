//! Trace CSV export/import and static SVG line charts.

use std::fmt::Write as _;
use std::io::{Read, Write};

use thiserror::Error;

use crate::closed_loop::Trace;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace table: {0}")]
    Malformed(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("no channels requested")]
    NoChannels,
}

/// Column names of the CSV form of `trace`.
pub fn trace_header(trace: &Trace) -> Vec<String> {
    let m = trace.m;
    let mut h = vec!["t".to_string()];
    for name in ["y", "ym", "e0", "u"] {
        h.extend((1..=m).map(|i| format!("{name}_{i}")));
    }
    h.extend((1..=trace.theta.width).map(|i| format!("theta_{i}")));
    h.extend((1..=m).map(|i| format!("Rmineig_{i}")));
    h
}

/// Column `j` of the CSV form of `trace` (same order as [`trace_header`]).
pub fn trace_column(trace: &Trace, j: usize) -> Option<Vec<f64>> {
    if j == 0 {
        return Some(trace.t.clone());
    }
    let mut j = j - 1;
    for s in [&trace.y, &trace.ym, &trace.e0, &trace.u, &trace.theta, &trace.r_min_eig] {
        if j < s.width {
            return Some(s.column(j));
        }
        j -= s.width;
    }
    None
}

/// Shortest text that still round-trips: 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace_csv<W: Write>(trace: &Trace, w: W) -> Result<(), OutputError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(trace_header(trace))?;
    let mut row = Vec::new();
    for k in 0..trace.len() {
        row.clear();
        row.push(format_f64(trace.t[k]));
        for s in [&trace.y, &trace.ym, &trace.e0, &trace.u, &trace.theta, &trace.r_min_eig] {
            row.extend(s.row(k).iter().map(|v| format_f64(*v)));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &Trace, path: &std::path::Path) -> Result<(), OutputError> {
    write_trace_csv(trace, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// A CSV table read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TraceTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Columns named `prefix_1`, `prefix_2`, ... (e.g. `e0` selects every
    /// `e0_i`); an exact header name selects itself.
    pub fn expand_channel(&self, name: &str) -> Vec<String> {
        if self.column_index(name).is_some() {
            return vec![name.to_string()];
        }
        let prefix = format!("{name}_");
        self.header
            .iter()
            .filter(|h| h.strip_prefix(&prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
            .cloned()
            .collect()
    }
}

/// Reads a trace CSV; checks a constant column count, a leading `t`
/// column and strictly increasing time.
pub fn read_trace_csv<R: Read>(r: R) -> Result<TraceTable, OutputError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(OutputError::Malformed("first column must be `t`".into()));
    }
    let mut rows = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| OutputError::Malformed(format!("row {}: {e}", k + 1)))?;
        if let Some(prev) = rows.last().map(|r: &Vec<f64>| r[0]) {
            if !(row[0] > prev) {
                return Err(OutputError::Malformed(format!("row {}: time not increasing", k + 1)));
            }
        }
        rows.push(row);
    }
    Ok(TraceTable { header, rows })
}

pub fn read_trace_file(path: &std::path::Path) -> Result<TraceTable, OutputError> {
    read_trace_csv(std::fs::File::open(path)?)
}

pub const SVG_WIDTH: f64 = 1200.0;
pub const SVG_HEIGHT: f64 = 600.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Static line chart of `channels` against `t`, one polyline per column.
pub fn plot_svg(table: &TraceTable, channels: &[String]) -> Result<String, OutputError> {
    if channels.is_empty() {
        return Err(OutputError::NoChannels);
    }
    let mut cols = Vec::new();
    for c in channels {
        let names = table.expand_channel(c);
        if names.is_empty() {
            return Err(OutputError::UnknownChannel(c.clone()));
        }
        cols.extend(names);
    }
    let t = table.column("t").unwrap_or_default();
    let series: Vec<(String, Vec<f64>)> = cols
        .into_iter()
        .map(|n| {
            let v = table.column(&n).expect("expanded from the header");
            (n, v)
        })
        .collect();

    let (t0, t1) = (t.first().copied().unwrap_or(0.0), t.last().copied().unwrap_or(1.0));
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 0.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        lo -= 1.0;
        hi += 1.0;
    }
    let span_t = if t1 > t0 { t1 - t0 } else { 1.0 };
    let (pw, ph) = (SVG_WIDTH - 2.0 * MARGIN, SVG_HEIGHT - 2.0 * MARGIN);
    let px = |tv: f64| MARGIN + (tv - t0) / span_t * pw;
    let py = |v: f64| MARGIN + (hi - v) / (hi - lo) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let label = |svg: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{y:.1}" font-size="12" text-anchor="{anchor}">{text}</text>"#);
    };
    label(&mut svg, MARGIN, SVG_HEIGHT - MARGIN + 18.0, "start", format!("{t0:.3}"));
    label(&mut svg, SVG_WIDTH - MARGIN, SVG_HEIGHT - MARGIN + 18.0, "end", format!("{t1:.3}"));
    label(&mut svg, SVG_WIDTH / 2.0, SVG_HEIGHT - 15.0, "middle", "t [s]".into());
    label(&mut svg, MARGIN - 6.0, MARGIN + 4.0, "end", format!("{hi:.3e}"));
    label(&mut svg, MARGIN - 6.0, SVG_HEIGHT - MARGIN, "end", format!("{lo:.3e}"));

    for (k, (name, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts = String::with_capacity(v.len() * 16);
        for (tv, yv) in t.iter().zip(v) {
            if yv.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", px(*tv), py(*yv));
            }
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            pts.trim_end()
        );
        label(&mut svg, SVG_WIDTH - MARGIN - 4.0, MARGIN + 16.0 * (k as f64 + 1.0), "end", name.clone());
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
