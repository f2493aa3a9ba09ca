//! CSV, SVG and metadata emission.
//!
//! CSV files are UTF-8 with a header row and shortest round-trip float
//! formatting (Rust's default `Display` for `f64`). SVG charts are generated
//! directly; the CSV files remain the authoritative output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// A plotted series: either a polyline or scattered circles.
pub struct Series<'a> {
    pub points: Vec<(f64, f64)>,
    pub color: &'a str,
    pub scatter: bool,
    pub dashed: bool,
}

pub fn write_file(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)
}

/// Simple line/scatter chart. Axes are fit to the data with a small margin.
pub fn render_svg(series: &[Series<'_>], title: &str) -> String {
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (50.0, 15.0, 30.0, 35.0);
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = write!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    );
    let _ = write!(svg, "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n", h - mb);
    for i in 0..=4 {
        let xv = xmin + (xmax - xmin) * i as f64 / 4.0;
        let yv = ymin + (ymax - ymin) * i as f64 / 4.0;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{:.2}</text>\n",
            sx(xv),
            h - mb + 14.0,
            xv
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.2}</text>\n",
            ml - 4.0,
            sy(yv) + 3.0,
            yv
        );
    }
    for s in series {
        if s.scatter {
            for &(x, y) in &s.points {
                let _ = write!(
                    svg,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"none\" stroke=\"{}\"/>\n",
                    sx(x),
                    sy(y),
                    s.color
                );
            }
        } else {
            let mut d = String::new();
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
            }
            let dash = if s.dashed { " stroke-dasharray=\"6,4\"" } else { "" };
            let _ = write!(
                svg,
                "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>\n",
                d.trim_end(),
                s.color
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Sidecar recording how a run can be reproduced. The timestamp is the only
/// non-deterministic field and lives nowhere else.
pub fn metadata_json(seed: u64, scale: f64, replications: Option<usize>) -> String {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let reps = replications.map(|r| r.to_string()).unwrap_or_else(|| "null".into());
    format!(
        "{{\n  \"seed\": {seed},\n  \"scale\": {scale},\n  \"replications\": {reps},\n  \"rng\": \"{}\",\n  \"stream_layout\": \"(cell << 40) ^ (replication << 8) ^ role\",\n  \"version\": \"{}\",\n  \"timestamp\": {ts}\n}}\n",
        smoothkit::experiments::RNG_NAME,
        env!("CARGO_PKG_VERSION"),
    )
}
