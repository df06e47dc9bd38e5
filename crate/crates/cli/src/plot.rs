//! Static SVG charts rendered straight from run artifacts.
//!
//! Everything is emitted with fixed-precision coordinates so the same CSV
//! always produces byte-identical SVG. No drawing library; the charts are
//! simple enough that a few string-building helpers cover them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 96.0;

const SERIES_COLORS: [&str; 3] = ["#1f6f8b", "#c96a2b", "#5a5a5a"];

/// Two decimal places is plenty for screen coordinates and keeps the
/// output stable across runs.
fn fx(v: f64) -> String {
    format!("{v:.2}")
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
             viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n",
            w = fx(WIDTH),
            h = fx(HEIGHT)
        ));
        body.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
            fx(WIDTH),
            fx(HEIGHT)
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"22\" font-size=\"15\" fill=\"#222222\">{}</text>\n",
            fx(MARGIN_LEFT),
            esc(title)
        ));
        Canvas { body }
    }

    fn plot_width(&self) -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }

    fn plot_height(&self) -> f64 {
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }

    /// Maps a data value in [0, y_max] to a pixel y coordinate.
    fn y_px(&self, v: f64, y_max: f64) -> f64 {
        MARGIN_TOP + self.plot_height() * (1.0 - v / y_max)
    }

    fn axes(&mut self, y_max: f64, y_ticks: usize) {
        let x0 = MARGIN_LEFT;
        let x1 = WIDTH - MARGIN_RIGHT;
        let y1 = HEIGHT - MARGIN_BOTTOM;
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\"/>\n",
            fx(x0),
            fx(MARGIN_TOP),
            fx(x0),
            fx(y1)
        ));
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\"/>\n",
            fx(x0),
            fx(y1),
            fx(x1),
            fx(y1)
        ));
        for i in 0..=y_ticks {
            let v = y_max * i as f64 / y_ticks as f64;
            let y = self.y_px(v, y_max);
            self.body.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
                fx(x0),
                fx(y),
                fx(x1),
                fx(y)
            ));
            self.body.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#444444\">{}</text>\n",
                fx(x0 - 6.0),
                fx(y + 4.0),
                fx(v)
            ));
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn nice_max(values: &[f64]) -> f64 {
    let raw = values.iter().cloned().fold(0.0_f64, f64::max);
    if raw <= 0.0 {
        return 1.0;
    }
    // Round up to 1/2/5 times a power of ten so tick labels stay short.
    let exp = raw.log10().floor();
    let base = 10.0_f64.powf(exp);
    for m in [1.0, 2.0, 5.0, 10.0] {
        if raw <= m * base + 1e-12 {
            return m * base;
        }
    }
    10.0 * base
}

/// Vertical bars, one per label. `series` pairs a legend name with one
/// value per label; bars within a label group sit side by side.
pub fn bar_chart(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> Result<String> {
    if labels.is_empty() || series.is_empty() {
        bail!("bar chart needs at least one label and one series");
    }
    for (name, vals) in series {
        if vals.len() != labels.len() {
            bail!(
                "series '{name}' has {} values for {} labels",
                vals.len(),
                labels.len()
            );
        }
    }
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let y_max = nice_max(&all);

    let mut c = Canvas::new(title);
    c.axes(y_max, 5);
    let group_w = c.plot_width() / labels.len() as f64;
    let bar_w = (group_w * 0.8) / series.len() as f64;
    let y_base = HEIGHT - MARGIN_BOTTOM;

    for (si, (name, vals)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for (li, v) in vals.iter().enumerate() {
            let x = MARGIN_LEFT + group_w * li as f64 + group_w * 0.1 + bar_w * si as f64;
            let y = c.y_px(v.max(0.0), y_max);
            c.body.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                fx(x),
                fx(y),
                fx(bar_w),
                fx(y_base - y),
                color
            ));
        }
        // Legend swatches across the top right.
        let lx = WIDTH - MARGIN_RIGHT - 140.0;
        let ly = 14.0 + 16.0 * si as f64;
        c.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            fx(lx),
            fx(ly),
            color
        ));
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#222222\">{}</text>\n",
            fx(lx + 14.0),
            fx(ly + 9.0),
            esc(name)
        ));
    }

    for (li, label) in labels.iter().enumerate() {
        let x = MARGIN_LEFT + group_w * (li as f64 + 0.5);
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#444444\" \
             transform=\"rotate(-45 {} {})\">{}</text>\n",
            fx(x),
            fx(y_base + 14.0),
            fx(x),
            fx(y_base + 14.0),
            esc(label)
        ));
    }
    Ok(c.finish())
}

/// Polyline chart over an ordered x axis.
pub fn line_chart(
    title: &str,
    x_labels: &[String],
    series: &[(&str, Vec<f64>)],
) -> Result<String> {
    if x_labels.len() < 2 || series.is_empty() {
        bail!("line chart needs at least two x positions and one series");
    }
    for (name, vals) in series {
        if vals.len() != x_labels.len() {
            bail!(
                "series '{name}' has {} values for {} x positions",
                vals.len(),
                x_labels.len()
            );
        }
    }
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let y_max = nice_max(&all);

    let mut c = Canvas::new(title);
    c.axes(y_max, 5);
    let step = c.plot_width() / (x_labels.len() - 1) as f64;
    let y_base = HEIGHT - MARGIN_BOTTOM;

    for (si, (name, vals)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let points: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                format!(
                    "{},{}",
                    fx(MARGIN_LEFT + step * i as f64),
                    fx(c.y_px(v.max(0.0), y_max))
                )
            })
            .collect();
        c.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            points.join(" "),
            color
        ));
        for p in &points {
            let (px, py) = p.split_once(',').unwrap();
            c.body.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let lx = WIDTH - MARGIN_RIGHT - 140.0;
        let ly = 14.0 + 16.0 * si as f64;
        c.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            fx(lx),
            fx(ly),
            color
        ));
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#222222\">{}</text>\n",
            fx(lx + 14.0),
            fx(ly + 9.0),
            esc(name)
        ));
    }

    for (i, label) in x_labels.iter().enumerate() {
        let x = MARGIN_LEFT + step * i as f64;
        c.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#444444\">{}</text>\n",
            fx(x),
            fx(y_base + 16.0),
            esc(label)
        ));
    }
    Ok(c.finish())
}

/// Minimal CSV-with-header reader for our own artifact files. Cells never
/// contain commas, so a plain split is enough.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn load(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .with_context(|| format!("{} is empty", path.display()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column '{name}'"))
    }

    fn f64_col(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.col(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[idx]
                    .parse::<f64>()
                    .with_context(|| format!("row {} column {name}: '{}'", i + 1, r[idx]))
            })
            .collect()
    }

    fn str_col(&self, name: &str) -> Result<Vec<String>> {
        let idx = self.col(name)?;
        Ok(self.rows.iter().map(|r| r[idx].clone()).collect())
    }
}

/// Renders charts for a finished run directory. Always writes
/// `per_segment_error.svg`; also writes `loop_curve.svg` when the segment
/// sequence is a repeated block (a looped schedule).
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = Table::load(&run_dir.join("per_segment.csv"))?;
    let kinds = table.str_col("kind")?;
    let severities = table.str_col("severity")?;
    let labels: Vec<String> = kinds
        .iter()
        .zip(&severities)
        .map(|(k, s)| format!("{k}/s{s}"))
        .collect();
    let mixed = table.f64_col("mixed_error")?;
    let source = table.f64_col("source_error")?;

    let mut written = Vec::new();
    let bars = bar_chart(
        "Error rate per stream segment",
        &labels,
        &[("adapted", mixed.clone()), ("source", source)],
    )?;
    let bar_path = run_dir.join("per_segment_error.svg");
    std::fs::write(&bar_path, bars)?;
    written.push(bar_path);

    if let Some(block) = repeating_block_len(&labels) {
        let loops = labels.len() / block;
        let loop_means: Vec<f64> = (0..loops)
            .map(|l| mixed[l * block..(l + 1) * block].iter().sum::<f64>() / block as f64)
            .collect();
        let x: Vec<String> = (1..=loops).map(|l| format!("loop {l}")).collect();
        let curve = line_chart(
            "Mean error per loop over the repeated stream",
            &x,
            &[("adapted", loop_means)],
        )?;
        let curve_path = run_dir.join("loop_curve.svg");
        std::fs::write(&curve_path, curve)?;
        written.push(curve_path);
    }
    Ok(written)
}

/// Smallest block length b such that the whole sequence is that block
/// repeated at least twice.
fn repeating_block_len(labels: &[String]) -> Option<usize> {
    let n = labels.len();
    (1..=n / 2)
        .filter(|b| n % b == 0)
        .find(|&b| (b..n).all(|i| labels[i] == labels[i % b]))
}

/// Renders `sweep_curve.svg` from a sweep directory's `sweep.csv`,
/// skipping failed points.
pub fn plot_sweep(sweep_dir: &Path) -> Result<PathBuf> {
    let table = Table::load(&sweep_dir.join("sweep.csv"))?;
    let status = table.str_col("status")?;
    let all_labels = table.str_col("label")?;
    let err_idx = table.col("mixed_error")?;

    let mut labels = Vec::new();
    let mut errors = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        if status[i] == "ok" {
            labels.push(all_labels[i].clone());
            errors.push(row[err_idx].parse::<f64>().with_context(|| {
                format!("sweep row {}: bad mixed_error '{}'", i + 1, row[err_idx])
            })?);
        }
    }
    if labels.is_empty() {
        bail!("no successful sweep points to plot");
    }

    let svg = if labels.len() >= 2 {
        line_chart("Mean error across the sweep", &labels, &[("adapted", errors)])?
    } else {
        bar_chart("Mean error across the sweep", &labels, &[("adapted", errors)])?
    };
    let path = sweep_dir.join("sweep_curve.svg");
    std::fs::write(&path, svg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic_and_well_formed() {
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let series = [("x", vec![0.1, 0.4, 0.25]), ("y", vec![0.2, 0.1, 0.3])];
        let one = bar_chart("t", &labels, &series).unwrap();
        let two = bar_chart("t", &labels, &series).unwrap();
        assert_eq!(one, two);
        assert!(one.starts_with("<svg"));
        assert!(one.trim_end().ends_with("</svg>"));
        assert_eq!(one.matches("<rect").count(), 1 + 6 + 2); // bg + bars + legend

        let line = line_chart("t", &labels, &series).unwrap();
        assert_eq!(line.matches("<polyline").count(), 2);
        assert_eq!(line.matches("<circle").count(), 6);
    }

    #[test]
    fn repeated_blocks_are_detected() {
        let seq = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(repeating_block_len(&seq(&["a", "b", "a", "b"])), Some(2));
        assert_eq!(
            repeating_block_len(&seq(&["a", "b", "c", "a", "b", "c"])),
            Some(3)
        );
        assert_eq!(repeating_block_len(&seq(&["a", "b", "c"])), None);
        assert_eq!(repeating_block_len(&seq(&["a", "a", "a"])), Some(1));
        assert_eq!(repeating_block_len(&seq(&["a", "b", "a", "c"])), None);
    }

    #[test]
    fn nice_max_rounds_up_to_tidy_values() {
        assert_eq!(nice_max(&[0.37]), 0.5);
        assert_eq!(nice_max(&[0.85]), 1.0);
        assert_eq!(nice_max(&[1.2]), 2.0);
        assert_eq!(nice_max(&[4.0]), 5.0);
        assert_eq!(nice_max(&[0.0]), 1.0);
    }

    #[test]
    fn escaping_keeps_svg_valid() {
        assert_eq!(esc("a<b&c>d"), "a&lt;b&amp;c&gt;d");
    }
}
