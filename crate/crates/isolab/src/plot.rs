//! Static SVG charts: a line plot and a matrix heatmap.

use std::fmt::Write as _;

use isolab_core::Matrix;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// A labelled sequence of points drawn in the given order.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Expands a degenerate range so that a single value still gets an axis.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span <= 1e-12 * lo.abs().max(1.0) {
        let pad = 0.5 * lo.abs().max(1e-3);
        return (lo - pad, hi + pad);
    }
    (lo - 0.05 * span, hi + 0.05 * span)
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (x0, x1) = padded_range(all().map(|p| p.0));
        let (y0, y1) = padded_range(all().map(|p| p.1));
        let plot_w = WIDTH - 2.0 * MARGIN;
        let plot_h = HEIGHT - 2.0 * MARGIN;
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * plot_h;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                HEIGHT - MARGIN + 18.0,
                tick(xv)
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 6.0,
                sy(yv) + 4.0,
                tick(yv)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            HEIGHT / 2.0,
            escape(&self.y_label)
        )
        .unwrap();

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .unwrap();
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("formatted as x,y");
                writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#).unwrap();
            }
            let ly = MARGIN + 16.0 + 16.0 * i as f64;
            writeln!(
                s,
                r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
                MARGIN + 8.0,
                escape(&series.label)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Diverging blue-white-red colour for `t` in `[-1, 1]`.
fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Renders `m` as a grid of cells coloured on a symmetric scale from
/// `-scale` to `scale`.
pub fn heatmap_svg(m: &Matrix, title: &str, scale: f64) -> String {
    let cell = (480.0 / m.rows().max(m.cols()).max(1) as f64).clamp(4.0, 40.0);
    let w = 2.0 * MARGIN + cell * m.cols() as f64;
    let h = 2.0 * MARGIN + cell * m.rows() as f64;
    let scale = if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        1.0
    };
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    )
    .unwrap();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m[(r, c)];
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"><title>({r}, {c}) {v}</title></rect>"#,
                MARGIN + cell * c as f64,
                MARGIN + cell * r as f64,
                diverging(v / scale)
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.1}">scale: ±{}</text>"#,
        h - MARGIN / 2.0,
        tick(scale)
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_formed(svg: &str) {
        let doc = roxmltree::Document::parse(svg).expect("valid XML");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn line_plot_escapes_labels() {
        let p = LinePlot {
            title: "a < b & c".into(),
            x_label: "isotropy".into(),
            y_label: "accuracy".into(),
            series: vec![Series {
                label: "λ".into(),
                points: vec![(0.1, 0.5), (0.2, 0.7), (0.3, 0.6)],
            }],
        };
        let svg = p.to_svg();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert_eq!(svg.matches("<circle").count(), 3);
        well_formed(&svg);
    }

    #[test]
    fn single_point_plot_is_finite() {
        let p = LinePlot {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            series: vec![Series {
                label: "one".into(),
                points: vec![(2.0, 2.0)],
            }],
        };
        well_formed(&p.to_svg());
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let m = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { -0.5 });
        let svg = heatmap_svg(&m, "corr", 1.0);
        assert_eq!(svg.matches("<title>").count(), 9);
        assert!(svg.contains(&diverging(1.0)) && svg.contains(&diverging(-0.5)));
        well_formed(&svg);
    }

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), "#ffffff");
        assert_eq!(diverging(1.0), "#b2182b");
        assert_eq!(diverging(-2.0), "#2166ac");
    }
}
