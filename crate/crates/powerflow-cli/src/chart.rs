//! Static SVG line charts: linear axes with ticks, one polyline per series,
//! and a legend. The markup is generated directly, so equal inputs yield
//! byte-identical files.

use std::fmt;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }
}

/// Chart preconditions are internal consistency checks: violating them means
/// the caller assembled bad series, so they map to the self-check exit code
/// and no file is written.
#[derive(Debug, Clone, PartialEq)]
pub enum ChartError {
    NoSeries,
    EmptySeries { name: String },
    MismatchedLengths { name: String, len: usize, expected: usize },
    NonFinite { name: String },
}

impl fmt::Display for ChartError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChartError::NoSeries => write!(f, "chart needs at least one series"),
            ChartError::EmptySeries { name } => {
                write!(f, "chart series `{name}` has no points")
            }
            ChartError::MismatchedLengths { name, len, expected } => {
                write!(f, "chart series `{name}` has {len} points, expected {expected}")
            }
            ChartError::NonFinite { name } => {
                write!(f, "chart series `{name}` contains a non-finite coordinate")
            }
        }
    }
}

impl std::error::Error for ChartError {}

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 560.0;
const PLOT_LEFT: f64 = 76.0;
const PLOT_TOP: f64 = 56.0;
const PLOT_W: f64 = 590.0;
const PLOT_H: f64 = 430.0;
const TICKS: usize = 5;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick labels: rounded to four decimals, rendered in the shortest decimal
/// form (so `2000` stays `2000`, not `2000.0000`).
fn fmt_tick(x: f64) -> String {
    let rounded = (x * 1e4).round() / 1e4;
    // Avoid the negative-zero label.
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

fn fmt_coord(x: f64) -> String {
    format!("{x:.2}")
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // Pad 5% each side; give a degenerate (constant) range unit width.
        if lo == hi {
            let pad = lo.abs().max(1.0) * 0.05;
            Range { lo: lo - pad, hi: hi + pad }
        } else {
            let pad = (hi - lo) * 0.05;
            Range { lo: lo - pad, hi: hi + pad }
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn validate(series: &[Series]) -> Result<(), ChartError> {
    if series.is_empty() {
        return Err(ChartError::NoSeries);
    }
    let expected = series[0].points.len();
    for s in series {
        if s.points.is_empty() {
            return Err(ChartError::EmptySeries { name: s.name.clone() });
        }
        if s.points.len() != expected {
            return Err(ChartError::MismatchedLengths {
                name: s.name.clone(),
                len: s.points.len(),
                expected,
            });
        }
        if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(ChartError::NonFinite { name: s.name.clone() });
        }
    }
    Ok(())
}

/// Render a titled line chart of the given series to SVG markup.
pub fn render_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String, ChartError> {
    validate(series)?;
    let xr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let to_px = |x: f64| PLOT_LEFT + xr.frac(x) * PLOT_W;
    let to_py = |y: f64| PLOT_TOP + PLOT_H - yr.frac(y) * PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"18\">{}</text>",
        PLOT_LEFT + PLOT_W / 2.0,
        escape(title)
    );

    // Axes.
    let x0 = PLOT_LEFT;
    let x1 = PLOT_LEFT + PLOT_W;
    let y0 = PLOT_TOP + PLOT_H;
    let y1 = PLOT_TOP;
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\" stroke-width=\"1\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\" stroke-width=\"1\"/>"
    );

    // Ticks and numeric labels.
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let xp = fmt_coord(PLOT_LEFT + f * PLOT_W);
        let _ = writeln!(
            s,
            "<line x1=\"{xp}\" y1=\"{y0}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\" stroke-width=\"1\"/>",
            y0 + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            y0 + 20.0,
            fmt_tick(xv)
        );
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let yp = fmt_coord(PLOT_TOP + PLOT_H - f * PLOT_H);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{x0}\" y2=\"{yp}\" stroke=\"black\" stroke-width=\"1\"/>",
            x0 - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{yp}\" text-anchor=\"end\" dominant-baseline=\"middle\" \
             font-size=\"12\">{}</text>",
            x0 - 9.0,
            fmt_tick(yv)
        );
    }

    // Axis labels.
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        PLOT_LEFT + PLOT_W / 2.0,
        y0 + 44.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"22\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 22 {})\">{}</text>",
        PLOT_TOP + PLOT_H / 2.0,
        PLOT_TOP + PLOT_H / 2.0,
        escape(y_label)
    );

    // Data polylines.
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt_coord(to_px(x)), fmt_coord(to_py(y))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
    }

    // Legend.
    let lx = PLOT_LEFT + PLOT_W + 18.0;
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = PLOT_TOP + 14.0 + 22.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 22.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
            lx + 28.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
