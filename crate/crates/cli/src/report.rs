//! Report files and SVG line charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

/// Plain-text and JSON report built side by side.
#[derive(Debug)]
pub struct Report {
    command: String,
    pub passed: bool,
    text: String,
    json: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report { command: command.into(), passed: true, text: String::new(), json: Map::new() }
    }

    pub fn section(&mut self, title: &str) {
        let _ = writeln!(self.text, "\n[{title}]");
    }

    /// A `key : value` text line; the value is also stored in JSON under `key`.
    pub fn line<T: Serialize + std::fmt::Display>(&mut self, key: &str, value: T) {
        let _ = writeln!(self.text, "{key:<36}: {value}");
        self.data(key, &value);
    }

    pub fn note(&mut self, text: &str) {
        let _ = writeln!(self.text, "{text}");
    }

    pub fn data<T: Serialize + ?Sized>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.json.insert(key.replace(' ', "_"), v);
    }

    /// A named check; a failing check fails the report.
    pub fn verdict(&mut self, name: &str, ok: bool) {
        self.passed &= ok;
        let _ = writeln!(self.text, "{name:<36}: {}", if ok { "PASS" } else { "FAIL" });
        self.data(&format!("{name} ok"), &ok);
    }

    pub fn text(&self) -> String {
        format!(
            "scontract {}\n{}\nresult: {}\n",
            self.command,
            self.text,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }

    pub fn json(&self) -> Value {
        let mut m = Map::new();
        m.insert("command".into(), Value::String(self.command.clone()));
        m.insert("passed".into(), Value::Bool(self.passed));
        m.insert("results".into(), Value::Object(self.json.clone()));
        Value::Object(m)
    }

    /// Write `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("report.txt"), self.text())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.json()).expect("json"))?;
        Ok(())
    }
}

pub fn ensure_dir(dir: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Render series as an SVG line chart; with `log_y` non-positive values are dropped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let map_y = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, map_y(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#, sx(xv), top + ph + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylab}</text>"#, left - 6.0, sy(yv) + 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left + pw, sy(yv), sy(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, path.join(" "));
        }
        if i < 12 {
            let ly = top + 14.0 + 16.0 * i as f64;
            let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 30.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 34.0, ly + 4.0, escape(&ser.name));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_wellformed_with_log_axis() {
        let s = Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 0.1), (2.0, 0.0)] };
        let svg = line_chart("t", "k", "y", &[s], true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn failing_verdict_fails_report() {
        let mut r = Report::new("check");
        r.line("worst margin", 0.5);
        r.verdict("grid", false);
        assert!(!r.passed);
        assert!(r.text().contains("result: FAIL"));
        assert_eq!(r.json()["results"]["worst_margin"], 0.5);
    }
}
