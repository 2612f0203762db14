//! Minimal standalone SVG writer used by the report and diagnostic plots.

use std::f64::consts::TAU;
use std::fmt::Write;

#[derive(Debug, Clone)]
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
            escape(fill)
        );
        self
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="1"/>"#,
            escape(stroke)
        );
        self
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, width: f64) -> &mut Self {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{width:.2}"/>"#,
            pts.join(" "),
            escape(stroke)
        );
        self
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) -> &mut Self {
        let _ = writeln!(self.body, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{}"/>"#, escape(fill));
        self
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size:.1}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            escape(content)
        );
        self
    }

    /// Pie chart from `(fraction, fill)` slices; fractions should sum to one.
    pub fn pie(&mut self, cx: f64, cy: f64, r: f64, slices: &[(f64, &str)]) -> &mut Self {
        let mut start = -TAU / 4.0;
        for &(frac, fill) in slices {
            if frac <= 0.0 {
                continue;
            }
            if frac >= 1.0 - 1e-12 {
                self.circle(cx, cy, r, fill);
                return self;
            }
            let end = start + frac * TAU;
            let (x0, y0) = (cx + r * start.cos(), cy + r * start.sin());
            let (x1, y1) = (cx + r * end.cos(), cy + r * end.sin());
            let large = u8::from(frac > 0.5);
            let _ = writeln!(
                self.body,
                r#"<path d="M {cx:.2} {cy:.2} L {x0:.2} {y0:.2} A {r:.2} {r:.2} 0 {large} 1 {x1:.2} {y1:.2} Z" fill="{}"/>"#,
                escape(fill)
            );
            start = end;
        }
        self
    }

    pub fn finish(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Maps data coordinates into a plotting box.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Frame {
    pub fn x(&self, v: f64) -> f64 {
        let (a, b) = self.x_range;
        self.left + (v - a) / (b - a) * self.width
    }

    pub fn y(&self, v: f64) -> f64 {
        let (a, b) = self.y_range;
        self.top + self.height - (v - a) / (b - a) * self.height
    }

    pub fn axes(&self, svg: &mut Svg, x_label: &str, y_label: &str) {
        let bottom = self.top + self.height;
        svg.line(self.left, bottom, self.left + self.width, bottom, "black");
        svg.line(self.left, self.top, self.left, bottom, "black");
        for k in 0..=4 {
            let v = self.x_range.0 + (self.x_range.1 - self.x_range.0) * f64::from(k) / 4.0;
            svg.text(self.x(v), bottom + 14.0, 10.0, "middle", &format!("{v:.2}"));
        }
        svg.text(self.left + self.width / 2.0, bottom + 30.0, 12.0, "middle", x_label);
        svg.text(self.left - 8.0, self.top + self.height / 2.0, 12.0, "end", y_label);
    }
}
