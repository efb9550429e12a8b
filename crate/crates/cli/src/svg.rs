//! Standalone SVG emitters: a line plot and a value-annotated heat table.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Polyline per series. With `log2_x` the x axis is logarithmic, which
/// suits batch sizes.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log2_x: bool) -> String {
    let tx = |x: f64| if log2_x { x.max(f64::MIN_POSITIVE).log2() } else { x };
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, bottom, right, top) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (v, label) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{label:.3}</text>"#,
            left - 4.0,
            py(v) + 3.0
        );
    }
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{x}</text>"#,
            px(x),
            bottom + 14.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{}</text>"#,
            right - 110.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of cells shaded by value, rows top to bottom, with each value
/// printed in its cell.
pub fn heat_table(title: &str, row_label: &str, col_label: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let cell_w = 64.0;
    let cell_h = 24.0;
    let left = 110.0;
    let top = 64.0;
    let width = left + cell_w * cols.len() as f64 + 20.0;
    let height = top + cell_h * rows.len() as f64 + 40.0;
    let (lo, hi) = bounds(values.iter().flatten().copied().filter(|v| v.is_finite()));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="44" text-anchor="middle" font-size="12">{}</text>"#,
        left + cell_w * cols.len() as f64 / 2.0,
        escape(col_label)
    );
    let _ = writeln!(out, r#"<text x="8" y="{}" font-size="12">{}</text>"#, top - 6.0, escape(row_label));
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            left + cell_w * (j as f64 + 0.5),
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        let _ = writeln!(out, r#"<text x="8" y="{:.1}" font-size="10">{}</text>"#, y + cell_h * 0.65, escape(r));
        for (j, &v) in values[i].iter().enumerate() {
            let x = left + cell_w * j as f64;
            let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
            let shade = (255.0 - 155.0 * t).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w}" height="{cell_h}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.4}</text>"#,
                x + cell_w / 2.0,
                y + cell_h * 0.65
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_escaped() {
        let svg = line_plot(
            "a<b",
            "x",
            "y",
            &[Series {
                label: "gues+tent & co".into(),
                points: vec![(2.0, 0.5), (64.0, 0.7)],
            }],
            true,
        );
        assert!(svg.contains("a&lt;b") && svg.contains("&amp; co"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn heat_table_has_a_cell_per_value() {
        let svg = heat_table("t", "alpha", "beta", &["0.5".into(), "1.0".into()], &["1e-5".into()], &[vec![0.1], vec![0.2]]);
        assert_eq!(svg.matches("<rect").count(), 3);
    }
}
