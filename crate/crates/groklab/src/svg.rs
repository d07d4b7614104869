//! Minimal hand-rolled SVG emission: line charts (optionally with a log-10
//! x axis), bar charts, and heatmap panels. SVG keeps the plots
//! dependency-free and diffable.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write_svg(path: &Path, body: &str) -> Result<()> {
    let doc = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n{body}</svg>\n"
    );
    std::fs::write(path, doc).map_err(|e| Error::io(path, e))
}

/// Nice round tick values covering [lo, hi].
fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.0e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Multi-series line chart. With `log_x`, x values must be > 0 (callers map
/// epoch 0 to 1 when plotting on a log axis).
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_x: bool,
) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidConfig("line chart needs at least one point".into()));
    }
    let xs: Vec<f64> = pts
        .iter()
        .map(|&(x, _)| if log_x { x.max(1e-12).log10() } else { x })
        .collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, y)| y).collect();
    let (x_lo, x_hi) = bounds(&xs);
    let (mut y_lo, mut y_hi) = bounds(&ys);
    if y_lo == y_hi {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo).max(1e-12) * plot_w;
    let py = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        esc(title)
    );
    // Axes frame.
    let _ = writeln!(
        body,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>"
    );
    // X ticks.
    if log_x {
        let lo_dec = x_lo.floor() as i64;
        let hi_dec = x_hi.ceil() as i64;
        for dec in lo_dec..=hi_dec {
            let x = dec as f64;
            if x < x_lo - 1e-9 || x > x_hi + 1e-9 {
                continue;
            }
            let gx = px(x);
            let _ = writeln!(
                body,
                "<line x1=\"{gx}\" y1=\"{}\" x2=\"{gx}\" y2=\"{}\" stroke=\"#ccc\"/>\
                 <text x=\"{gx}\" y=\"{}\" text-anchor=\"middle\">1e{dec}</text>",
                MARGIN_T,
                MARGIN_T + plot_h,
                MARGIN_T + plot_h + 18.0
            );
        }
    } else {
        for t in linear_ticks(x_lo, x_hi) {
            let gx = px(t);
            let _ = writeln!(
                body,
                "<line x1=\"{gx}\" y1=\"{}\" x2=\"{gx}\" y2=\"{}\" stroke=\"#ccc\"/>\
                 <text x=\"{gx}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                MARGIN_T,
                MARGIN_T + plot_h,
                MARGIN_T + plot_h + 18.0,
                fmt_tick(t)
            );
        }
    }
    // Y ticks.
    for t in linear_ticks(y_lo, y_hi) {
        let gy = py(t);
        let _ = writeln!(
            body,
            "<line x1=\"{MARGIN_L}\" y1=\"{gy}\" x2=\"{}\" y2=\"{gy}\" stroke=\"#ccc\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN_L + plot_w,
            MARGIN_L - 8.0,
            gy + 4.0,
            fmt_tick(t)
        );
    }
    // Axis labels.
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    );
    let _ = writeln!(
        body,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(y_label)
    );
    // Series and legend.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let gx = px(if log_x { x.max(1e-12).log10() } else { x });
            let gy = py(y.clamp(y_lo, y_hi));
            let _ = write!(d, "{}{gx:.2},{gy:.2} ", if i == 0 { "M" } else { "L" });
        }
        let _ = writeln!(
            body,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            d.trim_end()
        );
        let ly = MARGIN_T + 14.0 + 20.0 * k as f64;
        let _ = writeln!(
            body,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 34.0,
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            esc(&s.name)
        );
    }
    write_svg(path, &body)
}

/// Bar chart over integer-indexed values (e.g. a frequency spectrum).
pub fn bar_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    values: &[f64],
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("bar chart needs at least one value".into()));
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let y_hi = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let bw = plot_w / values.len() as f64;

    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        body,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>"
    );
    for (i, &v) in values.iter().enumerate() {
        let h = (v.max(0.0) / y_hi) * plot_h;
        let x = MARGIN_L + i as f64 * bw;
        let _ = writeln!(
            body,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            x + 0.08 * bw,
            MARGIN_T + plot_h - h,
            0.84 * bw,
            h,
            PALETTE[0]
        );
    }
    // Sparse x labels.
    let step = (values.len() / 10).max(1);
    for i in (0..values.len()).step_by(step) {
        let x = MARGIN_L + (i as f64 + 0.5) * bw;
        let _ = writeln!(
            body,
            "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{i}</text>",
            MARGIN_T + plot_h + 18.0
        );
    }
    for t in linear_ticks(0.0, y_hi) {
        let gy = MARGIN_T + plot_h - t / y_hi * plot_h;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 8.0,
            gy + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    );
    let _ = writeln!(
        body,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(y_label)
    );
    write_svg(path, &body)
}

/// Side-by-side heatmap panels on one shared logarithmic color scale.
/// Exact zeros render white; positive values ramp light-to-dark red over
/// the shared [min positive, max] range. Large matrices are max-pooled to
/// at most 128x128 cells for rendering (the CSV exports keep full data).
pub fn heatmap_panels(path: &Path, title: &str, panels: &[(&str, &Mat)]) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::InvalidConfig("heatmap needs at least one panel".into()));
    }
    // Shared log scale across all panels.
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (_, m) in panels {
        for &v in m.data() {
            let a = v.abs();
            if a > 0.0 {
                lo = lo.min(a);
                hi = hi.max(a);
            }
        }
    }
    let (lo, hi) = if hi == 0.0 { (1e-12, 1.0) } else { (lo, hi.max(lo * 1.0001)) };
    let (log_lo, log_hi) = (lo.ln(), hi.ln());

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let panel_w = plot_w / panels.len() as f64 - 14.0;

    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        WIDTH / 2.0,
        esc(title)
    );
    for (k, (name, m)) in panels.iter().enumerate() {
        let pooled = max_pool(m, 128, 128);
        let x0 = MARGIN_L + k as f64 * (panel_w + 14.0);
        let cw = panel_w / pooled.cols() as f64;
        let ch = plot_h / pooled.rows() as f64;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + panel_w / 2.0,
            MARGIN_T - 8.0,
            esc(name)
        );
        for r in 0..pooled.rows() {
            for c in 0..pooled.cols() {
                let v = pooled.get(r, c).abs();
                let fill = if v == 0.0 {
                    "#ffffff".to_string()
                } else {
                    let u = ((v.ln() - log_lo) / (log_hi - log_lo)).clamp(0.0, 1.0);
                    ramp(u)
                };
                let _ = writeln!(
                    body,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                    x0 + c as f64 * cw,
                    MARGIN_T + r as f64 * ch,
                    cw + 0.3,
                    ch + 0.3
                );
            }
        }
        let _ = writeln!(
            body,
            "<rect x=\"{x0}\" y=\"{MARGIN_T}\" width=\"{panel_w}\" height=\"{plot_h}\" \
             fill=\"none\" stroke=\"black\"/>"
        );
    }
    // Color-scale legend.
    let lx = WIDTH - MARGIN_R + 24.0;
    for i in 0..40 {
        let u = 1.0 - i as f64 / 39.0;
        let _ = writeln!(
            body,
            "<rect x=\"{lx}\" y=\"{:.2}\" width=\"20\" height=\"{:.2}\" fill=\"{}\"/>",
            MARGIN_T + i as f64 * plot_h / 40.0,
            plot_h / 40.0 + 0.3,
            ramp(u)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"{}\">{:.1e}</text><text x=\"{}\" y=\"{}\">{:.1e}</text>",
        lx + 26.0,
        MARGIN_T + 10.0,
        hi,
        lx + 26.0,
        MARGIN_T + plot_h,
        lo
    );
    write_svg(path, &body)
}

/// White-to-dark-red ramp for u in [0, 1].
fn ramp(u: f64) -> String {
    let r = 255.0 - 75.0 * u;
    let g = 235.0 * (1.0 - u);
    let b = 225.0 * (1.0 - u);
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// Max-pools absolute values down to at most (max_r, max_c) cells.
fn max_pool(m: &Mat, max_r: usize, max_c: usize) -> Mat {
    if m.rows() <= max_r && m.cols() <= max_c {
        return m.clone();
    }
    let rows = m.rows().min(max_r);
    let cols = m.cols().min(max_c);
    Mat::from_fn(rows, cols, |r, c| {
        let r0 = r * m.rows() / rows;
        let r1 = ((r + 1) * m.rows() / rows).max(r0 + 1);
        let c0 = c * m.cols() / cols;
        let c1 = ((c + 1) * m.cols() / cols).max(c0 + 1);
        let mut best = 0.0f64;
        for rr in r0..r1 {
            for cc in c0..c1 {
                best = best.max(m.get(rr, cc).abs());
            }
        }
        best
    })
}

fn bounds(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_writes_well_formed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let series = vec![
            Series::new("train", vec![(1.0, 0.1), (10.0, 0.8), (100.0, 1.0)]),
            Series::new("val", vec![(1.0, 0.1), (10.0, 0.15), (100.0, 0.99)]),
        ];
        line_chart(&path, "accuracy", "epoch", "accuracy", &series, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("train") && text.contains("val"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bar_chart_and_heatmap_write() {
        let dir = tempfile::tempdir().unwrap();
        let bars = dir.path().join("bars.svg");
        bar_chart(&bars, "spectrum", "frequency", "norm", &[1.0, 3.0, 0.5]).unwrap();
        assert!(std::fs::read_to_string(&bars).unwrap().contains("<rect"));

        let hm = dir.path().join("heat.svg");
        let m = Mat::from_fn(4, 5, |r, c| if r == 0 && c == 0 { 0.0 } else { (r * 5 + c) as f64 });
        heatmap_panels(&hm, "grads", &[("E", &m), ("W1", &m)]).unwrap();
        let text = std::fs::read_to_string(&hm).unwrap();
        assert!(text.contains("#ffffff")); // the exact zero renders white
    }

    #[test]
    fn max_pool_preserves_peak() {
        let mut m = Mat::zeros(300, 300);
        m.set(250, 250, 7.0);
        let pooled = max_pool(&m, 128, 128);
        assert_eq!(pooled.rows(), 128);
        let peak = pooled.data().iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(peak, 7.0);
    }

    #[test]
    fn linear_ticks_cover_range() {
        let ticks = linear_ticks(0.0, 1.0);
        assert!(ticks.len() >= 3 && ticks.len() <= 7);
        assert!(ticks.iter().all(|&t| (0.0..=1.0).contains(&t)));
    }
}
