//! Minimal standalone SVG plot writer: line charts for learning curves and
//! box charts for per-dimension distributions. No external renderer; output
//! is deterministic byte for byte for identical input.

use crate::analysis::FiveNum;
use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named line on a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }

    /// Convenience for y-values plotted against 1-based index.
    pub fn from_values(name: impl Into<String>, values: &[f64]) -> Self {
        Series::new(
            name,
            values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect(),
        )
    }
}

/// One labeled box in a box chart.
#[derive(Debug, Clone)]
pub struct BoxSpec {
    pub label: String,
    pub stats: FiveNum,
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Short deterministic tick label.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Result<Range> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if !v.is_finite() {
                return Err(Error::data("plot input contains a non-finite value"));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Err(Error::data("plot input is empty"));
        }
        Ok(Range { lo, hi })
    }

    /// Widens the range so a flat series still spans a visible band.
    fn padded(mut self, frac: f64) -> Range {
        let span = self.hi - self.lo;
        let pad = if span > 0.0 { span * frac } else { self.lo.abs().max(1.0) * frac };
        self.lo -= pad;
        self.hi += pad;
        self
    }

    fn to_px(&self, v: f64, px_lo: f64, px_hi: f64) -> f64 {
        px_lo + (v - self.lo) / (self.hi - self.lo) * (px_hi - px_lo)
    }
}

fn svg_open(out: &mut String) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"));
}

fn draw_frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\" fill=\"#222\">{}</text>\n",
        fmt_coord(WIDTH / 2.0),
        esc(title)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#444\">{}</text>\n",
        fmt_coord(MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0),
        fmt_coord(HEIGHT - 10.0),
        esc(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#444\" \
         transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt_coord(MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0),
        fmt_coord(MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0),
        esc(y_label)
    ));
    // Plot border.
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        fmt_coord(MARGIN_L),
        fmt_coord(MARGIN_T),
        fmt_coord(WIDTH - MARGIN_L - MARGIN_R),
        fmt_coord(HEIGHT - MARGIN_T - MARGIN_B)
    ));
}

fn draw_y_ticks(out: &mut String, range: &Range) {
    for i in 0..=4 {
        let v = range.lo + (range.hi - range.lo) * i as f64 / 4.0;
        let y = range.to_px(v, HEIGHT - MARGIN_B, MARGIN_T);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            fmt_coord(MARGIN_L),
            fmt_coord(y),
            fmt_coord(WIDTH - MARGIN_R),
            fmt_coord(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\" fill=\"#444\">{}</text>\n",
            fmt_coord(MARGIN_L - 6.0),
            fmt_coord(y + 3.5),
            fmt_tick(v)
        ));
    }
}

fn draw_legend(out: &mut String, names: &[&str]) {
    let x = WIDTH - MARGIN_R - 150.0;
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            fmt_coord(x),
            fmt_coord(y - 4.0),
            fmt_coord(x + 22.0),
            fmt_coord(y - 4.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#222\">{}</text>\n",
            fmt_coord(x + 28.0),
            fmt_coord(y),
            esc(name)
        ));
    }
}

/// Renders named series as styled polylines with a legend. Every series
/// must be nonempty and finite.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::data("line plot needs at least one nonempty series"));
    }
    let xr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))?.padded(0.0);
    let xr = if xr.lo == xr.hi { xr.padded(0.05) } else { xr };
    let yr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))?.padded(0.05);

    let mut out = String::new();
    svg_open(&mut out);
    draw_frame(&mut out, title, x_label, y_label);
    draw_y_ticks(&mut out, &yr);
    // X ticks at the quarter marks.
    for i in 0..=4 {
        let v = xr.lo + (xr.hi - xr.lo) * i as f64 / 4.0;
        let x = xr.to_px(v, MARGIN_L, WIDTH - MARGIN_R);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\" fill=\"#444\">{}</text>\n",
            fmt_coord(x),
            fmt_coord(HEIGHT - MARGIN_B + 14.0),
            fmt_tick(v)
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if i % 2 == 1 { " stroke-dasharray=\"6 3\"" } else { "" };
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{},{}",
                    fmt_coord(xr.to_px(x, MARGIN_L, WIDTH - MARGIN_R)),
                    fmt_coord(yr.to_px(y, HEIGHT - MARGIN_B, MARGIN_T))
                )
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>\n",
            points.join(" ")
        ));
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    draw_legend(&mut out, &names);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders labeled five-number summaries as a box chart: whisker line,
/// interquartile box, and median stroke per entry.
pub fn box_plot_svg(title: &str, x_label: &str, y_label: &str, boxes: &[BoxSpec]) -> Result<String> {
    if boxes.is_empty() {
        return Err(Error::data("box plot needs at least one box"));
    }
    let yr = Range::of(boxes.iter().flat_map(|b| [b.stats.min, b.stats.max].into_iter()))?
        .padded(0.05);

    let mut out = String::new();
    svg_open(&mut out);
    draw_frame(&mut out, title, x_label, y_label);
    draw_y_ticks(&mut out, &yr);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = plot_w / boxes.len() as f64;
    let box_w = (slot * 0.6).min(40.0);
    // Label every slot when they fit, otherwise a deterministic subset.
    let label_step = boxes.len().div_ceil(16);
    for (i, b) in boxes.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let y = |v: f64| yr.to_px(v, HEIGHT - MARGIN_B, MARGIN_T);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#555\"/>\n",
            fmt_coord(cx),
            fmt_coord(y(b.stats.min)),
            fmt_coord(y(b.stats.max))
        ));
        out.push_str(&format!(
            "<rect class=\"box\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" \
             fill=\"#9ecae9\" stroke=\"#1f77b4\"/>\n",
            fmt_coord(cx - box_w / 2.0),
            fmt_coord(y(b.stats.q3)),
            fmt_coord(box_w),
            fmt_coord((y(b.stats.q1) - y(b.stats.q3)).max(0.5))
        ));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
            fmt_coord(cx - box_w / 2.0),
            fmt_coord(y(b.stats.median)),
            fmt_coord(cx + box_w / 2.0)
        ));
        if i % label_step == 0 {
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\" fill=\"#444\">{}</text>\n",
                fmt_coord(cx),
                fmt_coord(HEIGHT - MARGIN_B + 14.0),
                esc(&b.label)
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}
