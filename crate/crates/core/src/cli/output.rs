//! File emission for the experiment runner: CSVs, metadata, gnuplot scripts
//! and small standalone SVG line plots.

use crate::error::Result;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Writes files into one output directory. With timestamps enabled every CSV
/// starts with a `# generated …` line; without them reruns are byte-identical.
pub struct OutDir {
    dir: PathBuf,
    timestamp: bool,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path, timestamp: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutDir { dir: dir.to_path_buf(), timestamp, written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn stamp(&self) -> String {
        if !self.timestamp {
            return String::new();
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        format!("# generated at unix time {secs}\n")
    }

    /// `body` must already start with the header row.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}{body}", self.stamp());
        self.raw(name, &text)
    }

    /// Writes `text` verbatim.
    pub fn raw(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        self.written.push(p.clone());
        Ok(p)
    }

    /// `key = value` metadata file, with the timestamp as a key when enabled.
    pub fn metadata(&mut self, entries: &[(&str, String)]) -> Result<PathBuf> {
        let mut s = String::new();
        if self.timestamp {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            let _ = writeln!(s, "generated_unix = {secs}");
        }
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        self.raw("metadata.txt", &s)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// One line of a plot.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal self-contained SVG line chart with optional log axes.
pub fn svg_line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| (!log_x || *x > 0.0) && (!log_y || *y > 0.0))
        .map(|&(x, y)| (tx(x), ty(y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let lx = if log_x { format!("1e{fx:.1}") } else { format!("{fx:.3}") };
        let ly = if log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{lx}</text>"#, px(fx), h - bottom + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ly}</text>"#, left - 6.0, py(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| (!log_x || *x > 0.0) && (!log_y || *y > 0.0))
            .map(|&(x, y)| format!("{:.2},{:.2}", px(tx(x)), py(ty(y))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            left + 10.0,
            top + 16.0 + 15.0 * i as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One gnuplot panel: a CSV, the columns to plot, and an optional grouping
/// column with the group values to draw as separate lines.
pub struct Panel<'a> {
    pub csv: &'a str,
    pub title: &'a str,
    pub x: usize,
    pub y: usize,
    pub group: Option<(usize, Vec<String>)>,
    pub log: bool,
}

/// gnuplot script rendering each panel to a PNG next to the CSVs.
pub fn gnuplot_script(panels: &[Panel]) -> String {
    let mut s = String::from(
        "# render with: gnuplot plot.gp\nset datafile separator ','\nset datafile commentschars '#'\nset terminal pngcairo size 800,500\n",
    );
    for p in panels {
        let stem = p.csv.trim_end_matches(".csv");
        let _ = writeln!(s, "\nset output '{stem}.png'\nset title '{}'", p.title);
        let _ = writeln!(s, "{}", if p.log { "set logscale xy" } else { "unset logscale" });
        match &p.group {
            None => {
                let _ = writeln!(s, "plot '{}' skip 1 using {}:{} with linespoints notitle", p.csv, p.x, p.y);
            }
            Some((g, values)) => {
                let _ = writeln!(
                    s,
                    "plot for [v in \"{}\"] '{}' skip 1 using {}:(strcol({g}) eq v ? ${} : NaN) with lines title v",
                    values.join(" "),
                    p.csv,
                    p.x,
                    p.y
                );
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_and_handles_log_axes() {
        let ser = [Series { label: "a<b".into(), points: vec![(1e-3, 0.1), (1e-2, 0.3), (0.0, 1.0)] }];
        let svg = svg_line_plot("t", "h", "err", &ser, true, true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let empty = svg_line_plot("t", "x", "y", &[], false, false);
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn timestamp_line_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = OutDir::create(dir.path(), false).unwrap();
        let p = a.csv("x.csv", "h,error\n1,2\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "h,error\n1,2\n");
        let mut b = OutDir::create(dir.path(), true).unwrap();
        let q = b.csv("y.csv", "h,error\n").unwrap();
        assert!(fs::read_to_string(&q).unwrap().starts_with("# generated at unix time "));
        assert_eq!(b.written().len(), 1);
    }
}
