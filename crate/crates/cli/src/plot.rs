//! Static SVG charts. Output depends only on the inputs, so reruns produce
//! identical files.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Padded `[lo, hi]` covering `values`, never empty.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, desc: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<desc>{}</desc>", escape(desc));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y: (f64, f64)) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y0:.1} L{x0:.1},{y1:.1} L{x1:.1},{y1:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
        let py = y1 - (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            py + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3e}")
    }
}

/// Line chart with one polyline per series and a legend on the right.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, desc: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title, desc);
    let x = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    axes(&mut out, x_label, y_label, y);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    for k in [0.0, 0.5, 1.0] {
        let v = x.0 + (x.1 - x.0) * k;
        let px = x0 + (x1 - x0) * k;
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y1 + 16.0, tick(v));
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(vx, vy)| {
                let px = x0 + (x1 - x0) * (vx - x.0) / (x.1 - x.0);
                let py = y1 - (y1 - y0) * (vy - y.0) / (y.1 - y.0);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 + 12.0,
            x1 + 32.0,
            x1 + 38.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart starting at zero, one labelled bar per entry.
pub fn bar_chart(title: &str, y_label: &str, desc: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title, desc);
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let y = (0.0, if top > 0.0 { top * 1.1 } else { 1.0 });
    axes(&mut out, "", y_label, y);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let slot = (x1 - x0) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = if v.is_finite() { (y1 - y0) * v.max(0.0) / (y.1 - y.0) } else { 0.0 };
        let px = x0 + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{px:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            y1 - h,
            slot * 0.7,
            COLORS[i % COLORS.len()],
            px + slot * 0.35,
            y1 + 16.0,
            escape(name),
            px + slot * 0.35,
            y1 - h - 4.0,
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let s = vec![
            Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
            Series { name: "b<c".into(), points: vec![(0.0, 3.0)] },
        ];
        let svg = line_chart("t", "x", "y", "seed=1", &s);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.contains("<desc>seed=1</desc>"));
        assert_eq!(svg, line_chart("t", "x", "y", "seed=1", &s));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        let svg = line_chart("t", "x", "y", "", &[Series { name: "flat".into(), points: vec![(0.0, 0.0), (0.0, 0.0)] }]);
        assert!(!svg.contains("NaN"));
        let bars = bar_chart("t", "y", "", &[("zero".into(), 0.0), ("also".into(), 0.0)]);
        assert_eq!(bars.matches("<rect x=").count(), 2);
        assert!(!bars.contains("NaN"));
    }
}
