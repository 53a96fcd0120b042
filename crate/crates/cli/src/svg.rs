//! Static line charts of risk against time.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub label: &'a str,
    pub times: &'a [f64],
    pub values: &'a [f64],
}

/// Log-scaled y axis when every finite value is positive, linear otherwise.
pub fn line_chart(title: &str, series: &[Series<'_>]) -> String {
    let finite = |v: &f64| v.is_finite();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.values.iter().copied().filter(finite)).collect();
    let xs: Vec<f64> = series.iter().flat_map(|s| s.times.iter().copied().filter(finite)).collect();
    let log_y = !ys.is_empty() && ys.iter().all(|&v| v > 0.0);
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let range = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut xs.iter().copied());
    let (y0, y1) = range(&mut ys.iter().map(|&v| ty(v)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (ty(y) - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<path d="M{left},{top} V{bottom} H{right}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(x0));
    let _ = writeln!(out, r#"<text x="{right}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(x1));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#, WIDTH / 2.0, bottom + 32.0);
    let label_y = |v: f64| if log_y { tick(10f64.powf(v)) } else { tick(v) };
    let _ = writeln!(out, r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#, left - 4.0, label_y(y0));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, label_y(y1));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        if log_y { "risk (log scale)" } else { "risk" }
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = s
            .times
            .iter()
            .zip(s.values)
            .filter(|(t, v)| t.is_finite() && v.is_finite() && (!log_y || **v > 0.0))
            .map(|(&t, &v)| format!("{:.2},{:.2}", px(t), py(v)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#, right, top + 14.0 * i as f64, escape(s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_one_polyline_per_series() {
        let t = [0.0, 1.0, 2.0];
        let a = [1.0, 0.1, 0.01];
        let b = [0.5, -0.2, 0.3];
        let svg = line_chart("x<y", &[Series { label: "a", times: &t, values: &a }, Series { label: "b", times: &t, values: &b }]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("x&lt;y"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn positive_values_use_log_axis() {
        let t = [0.0, 1.0];
        assert!(line_chart("", &[Series { label: "a", times: &t, values: &[1.0, 1e-3] }]).contains("log scale"));
        assert!(!line_chart("", &[Series { label: "a", times: &t, values: &[1.0, 0.0] }]).contains("log scale"));
    }
}
