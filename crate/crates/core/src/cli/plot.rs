//! SVG bifurcation diagrams: `ε` on the abscissa, the signed sup norm on the
//! ordinate, colored by Morse index. The output carries no metadata, so it
//! is byte-identical across runs.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

/// A point of the diagram.
#[derive(Debug, Clone, Copy)]
pub struct Mark {
    pub epsilon: f64,
    pub value: f64,
    pub index: usize,
}

/// Curves are drawn as polylines split wherever the index changes; loose
/// points are drawn as dots.
#[derive(Debug, Default)]
pub struct Diagram {
    pub title: String,
    pub curves: Vec<Vec<Mark>>,
    pub points: Vec<Mark>,
}

fn color(index: usize) -> &'static str {
    PALETTE[index.min(PALETTE.len() - 1)]
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-3 * hi.abs().max(1.0));
    (lo - pad, hi + pad)
}

impl Diagram {
    fn marks(&self) -> impl Iterator<Item = &Mark> {
        self.curves.iter().flatten().chain(&self.points)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1) = bounds(self.marks().map(|m| m.epsilon));
        let (y0, y1) = bounds(self.marks().map(|m| m.value));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            right - left,
            bottom - top
        );
        for t in nice_ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
                bottom + 5.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                bottom + 18.0,
                tick_label(t)
            );
        }
        for t in nice_ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/>"#,
                left - 5.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                left - 8.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">ε</text>"#,
            WIDTH / 2.0,
            HEIGHT - 15.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">sign⟨u, φ₁⟩ ‖u‖∞</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        );
        for curve in &self.curves {
            let mut start = 0;
            while start < curve.len() {
                let index = curve[start].index;
                let mut end = start + 1;
                while end < curve.len() && curve[end].index == index {
                    end += 1;
                }
                // the segment runs on to the first point of the next one
                let pts: Vec<String> = curve[start..(end + 1).min(curve.len())]
                    .iter()
                    .map(|m| format!("{:.2},{:.2}", sx(m.epsilon), sy(m.value)))
                    .collect();
                if pts.len() > 1 {
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                        pts.join(" "),
                        color(index)
                    );
                }
                start = end;
            }
        }
        for m in &self.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                sx(m.epsilon),
                sy(m.value),
                color(m.index)
            );
        }
        let mut indices: Vec<usize> = self.marks().map(|m| m.index).collect();
        indices.sort_unstable();
        indices.dedup();
        for (row, k) in indices.iter().enumerate() {
            let y = top + 12.0 + 16.0 * row as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#,
                right - 80.0,
                y - 9.0,
                color(*k)
            );
            let _ = writeln!(s, r#"<text x="{}" y="{y}">index {k}</text>"#, right - 65.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick_label(t: f64) -> String {
    let r = (t * 1e6).round() / 1e6;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mark(epsilon: f64, value: f64, index: usize) -> Mark {
        Mark {
            epsilon,
            value,
            index,
        }
    }

    #[test]
    fn curves_split_by_index() {
        let d = Diagram {
            title: "t".into(),
            curves: vec![vec![
                mark(0.1, 1.0, 0),
                mark(0.2, 0.9, 0),
                mark(0.3, 0.5, 1),
                mark(0.4, 0.2, 1),
            ]],
            points: vec![mark(0.5, 0.0, 2)],
        };
        let svg = d.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains(color(0)) && svg.contains(color(1)) && svg.contains(color(2)));
        assert_eq!(svg, d.to_svg());
    }

    #[test]
    fn ticks_cover_the_range() {
        let t = nice_ticks(0.13, 0.98);
        assert!(t.len() >= 3 && t.len() <= 7, "{t:?}");
        assert!(t.iter().all(|v| (0.13..=0.98).contains(v)));
    }

    #[test]
    fn empty_diagram_renders() {
        assert!(Diagram::default().to_svg().ends_with("</svg>\n"));
    }
}
