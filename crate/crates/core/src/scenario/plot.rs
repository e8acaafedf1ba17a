//! Minimal line plots: standalone SVG (no XML prolog) and gnuplot data blocks.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    /// Join the last point back to the first.
    pub closed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<[f64; 2]>) -> Self {
        Self {
            label: label.into(),
            points,
            closed: false,
        }
    }

    pub fn closed(mut self) -> Self {
        self.closed = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Same scale on both axes, for paths in the plane.
    pub equal_axes: bool,
}

const W: f64 = 800.0;
const H: f64 = 500.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

fn extent(series: &[Series]) -> Option<[f64; 4]> {
    let mut it = series.iter().flat_map(|s| &s.points).filter(|p| p[0].is_finite() && p[1].is_finite());
    let first = it.next()?;
    let mut e = [first[0], first[1], first[0], first[1]];
    for p in it {
        e[0] = e[0].min(p[0]);
        e[1] = e[1].min(p[1]);
        e[2] = e[2].max(p[0]);
        e[3] = e[3].max(p[1]);
    }
    for (lo, hi) in [(0, 2), (1, 3)] {
        if e[hi] - e[lo] < 1e-9 {
            e[lo] -= 0.5;
            e[hi] += 0.5;
        }
    }
    Some(e)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            equal_axes: false,
        }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    pub fn to_svg(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&self.title));
        let Some([mut x0, mut y0, mut x1, mut y1]) = extent(&self.series) else {
            out.push_str("</svg>\n");
            return out;
        };
        let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
        if self.equal_axes {
            let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            (x0, x1) = (cx - scale * pw / 2.0, cx + scale * pw / 2.0);
            (y0, y1) = (cy - scale * ph / 2.0, cy + scale * ph / 2.0);
        }
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * ph;

        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                H - MARGIN + 16.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 6.0,
                sy(yv) + 4.0,
                fmt_tick(yv)
            );
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, esc(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            esc(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p[0].is_finite() && p[1].is_finite())
                .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
                .collect();
            let tag = if s.closed { "polygon" } else { "polyline" };
            let _ = writeln!(
                out,
                r#"<{tag} fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let ly = MARGIN + 16.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
                W - MARGIN - 150.0,
                W - MARGIN - 130.0
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - MARGIN - 125.0, ly + 4.0, esc(&s.label));
        }
        out.push_str("</svg>\n");
        out
    }

    /// One block per series, separated by two blank lines so that gnuplot's
    /// `index` selects them.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.series.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {}", s.label);
            for p in &s.points {
                let _ = writeln!(out, "{} {}", p[0], p[1]);
            }
            if s.closed {
                if let Some(p) = s.points.first() {
                    let _ = writeln!(out, "{} {}", p[0], p[1]);
                }
            }
        }
        out
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Plot {
        Plot::new("a < b", "x", "y")
            .with(Series::new("line", vec![[0.0, 0.0], [1.0, 2.0], [2.0, 1.0]]))
            .with(Series::new("box", vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]).closed())
    }

    #[test]
    fn svg_has_no_prolog_and_one_shape_per_series() {
        let svg = sample().to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(!svg.contains("<?xml"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn gnuplot_blocks_are_separated() {
        let dat = sample().to_gnuplot();
        let blocks: Vec<&str> = dat.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].lines().count(), 4);
        // closed series repeat their first point
        assert_eq!(blocks[1].lines().count(), 5);
    }

    #[test]
    fn empty_plot_is_still_valid() {
        let svg = Plot::new("t", "x", "y").to_svg();
        assert!(svg.ends_with("</svg>\n"));
    }
}
