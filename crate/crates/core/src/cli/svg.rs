//! Dependency-free SVG line plots.
//!
//! Every plot declares its data window on the root element
//! (`data-x-min`, `data-x-max`, `data-y-min`, `data-y-max`) together with
//! the pixel rectangle it maps onto (`data-plot-box="left top width
//! height"`), so a point in a polyline can be mapped back to the CSV value
//! it was drawn from. Nothing in the output depends on the clock.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 40.0;
const PLOT_W: f64 = 540.0;
const PLOT_H: f64 = 300.0;
const COLOURS: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Optional vertical error bars `(x, low, high)`.
    pub bars: Vec<(f64, f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
            bars: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Transform applied to the CSV values before plotting (e.g. `ln`),
    /// declared as `data-y-transform`.
    pub y_transform: Option<String>,
    pub series: Vec<Series>,
    pub notes: Vec<String>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Map a data point to pixel coordinates for a given window.
pub fn to_pixel(x: f64, y: f64, xr: (f64, f64), yr: (f64, f64)) -> (f64, f64) {
    (
        LEFT + (x - xr.0) / (xr.1 - xr.0) * PLOT_W,
        TOP + PLOT_H - (y - yr.0) / (yr.1 - yr.0) * PLOT_H,
    )
}

impl Plot {
    pub fn render(&self) -> String {
        let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
        let xr = range(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().filter(finite).map(|p| p.0)),
        );
        let yr = range(self.series.iter().flat_map(|s| {
            s.points
                .iter()
                .filter(finite)
                .map(|p| p.1)
                .chain(s.bars.iter().flat_map(|b| [b.1, b.2]))
        }));
        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{:?}" data-x-max="{:?}" data-y-min="{:?}" data-y-max="{:?}" data-plot-box="{LEFT} {TOP} {PLOT_W} {PLOT_H}"{}>"#,
            xr.0,
            xr.1,
            yr.0,
            yr.1,
            self.y_transform
                .as_ref()
                .map_or(String::new(), |t| format!(r#" data-y-transform="{}""#, escape(t)))
        );
        let _ = writeln!(
            o,
            r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = writeln!(
            o,
            r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            o,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            o,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            LEFT + PLOT_W / 2.0,
            HEIGHT - 20.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
            TOP + PLOT_H / 2.0,
            TOP + PLOT_H / 2.0,
            escape(&self.y_label)
        );
        for (v, anchor, x, y) in [
            (xr.0, "start", LEFT, TOP + PLOT_H + 16.0),
            (xr.1, "end", LEFT + PLOT_W, TOP + PLOT_H + 16.0),
        ] {
            let _ = writeln!(
                o,
                r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{}</text>"#,
                tick(v)
            );
        }
        for (v, y) in [(yr.0, TOP + PLOT_H), (yr.1, TOP + 10.0)] {
            let _ = writeln!(
                o,
                r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
                LEFT - 4.0,
                tick(v)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let colour = COLOURS[i % COLOURS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(finite)
                .map(|&(x, y)| {
                    let (px, py) = to_pixel(x, y, xr, yr);
                    format!("{px:.4},{py:.4}")
                })
                .collect();
            let _ = writeln!(
                o,
                r#"<polyline data-series="{}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                escape(&s.name),
                pts.join(" ")
            );
            for &(x, lo, hi) in &s.bars {
                let (px, p_lo) = to_pixel(x, lo, xr, yr);
                let (_, p_hi) = to_pixel(x, hi, xr, yr);
                let _ = writeln!(
                    o,
                    r#"<line x1="{px:.4}" y1="{p_lo:.4}" x2="{px:.4}" y2="{p_hi:.4}" stroke="{colour}"/>"#
                );
            }
            let _ = writeln!(
                o,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#,
                LEFT + 8.0,
                TOP + 16.0 + 14.0 * i as f64,
                escape(&s.name)
            );
        }
        for (i, n) in self.notes.iter().enumerate() {
            let _ = writeln!(
                o,
                r#"<text class="note" x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
                LEFT + PLOT_W - 8.0,
                TOP + 16.0 + 14.0 * i as f64,
                escape(n)
            );
        }
        o.push_str("</svg>\n");
        o
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// A named polyline read back in data coordinates.
pub type ReadSeries = (String, Vec<(f64, f64)>);

/// Parse the data window and pixel box declared on a rendered plot, and
/// the points of every polyline mapped back to data coordinates.
pub fn read_back(svg: &str) -> Option<Vec<ReadSeries>> {
    let attr = |name: &str| -> Option<&str> {
        let key = format!("{name}=\"");
        let start = svg.find(&key)? + key.len();
        let end = svg[start..].find('"')? + start;
        Some(&svg[start..end])
    };
    let num = |name: &str| attr(name)?.parse::<f64>().ok();
    let (x0, x1, y0, y1) = (
        num("data-x-min")?,
        num("data-x-max")?,
        num("data-y-min")?,
        num("data-y-max")?,
    );
    let bx: Vec<f64> = attr("data-plot-box")?
        .split(' ')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .ok()?;
    let mut out = Vec::new();
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let get = |k: &str| {
            let key = format!("{k}=\"");
            let s = line.find(&key)? + key.len();
            let e = line[s..].find('"')? + s;
            Some(line[s..e].to_string())
        };
        let name = get("data-series")?;
        let pts = get("points")?
            .split_whitespace()
            .map(|p| {
                let (a, b) = p.split_once(',')?;
                let (px, py): (f64, f64) = (a.parse().ok()?, b.parse().ok()?);
                let x = x0 + (px - bx[0]) / bx[2] * (x1 - x0);
                let y = y0 + (bx[1] + bx[3] - py) / bx[3] * (y1 - y0);
                Some((x, y))
            })
            .collect::<Option<Vec<_>>>()?;
        out.push((name, pts));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_map_back() {
        let plot = Plot {
            title: "t".into(),
            series: vec![Series::new("a", vec![(0.0, 1.0), (5.0, -2.0), (10.0, 3.0)])],
            ..Default::default()
        };
        let back = read_back(&plot.render()).unwrap();
        assert_eq!(back[0].0, "a");
        for ((x, y), (bx, by)) in plot.series[0].points.iter().zip(&back[0].1) {
            assert!((x - bx).abs() < 1e-3 && (y - by).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_plot_renders() {
        let svg = Plot::default().render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
