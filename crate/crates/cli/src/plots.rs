//! SVG renderings of the posterior predictive tables.

use reefgauge_core::diagnostics::PpcReport;
use reefgauge_core::svg::{Frame, Svg};

/// Observed counts against mean predictions with a 1:1 guide.
pub fn ppc_pairs(ppc: &PpcReport) -> String {
    let max = ppc
        .pairs
        .iter()
        .map(|p| (p.observed as f64).max(p.mean_prediction))
        .fold(1.0, f64::max)
        * 1.05;
    let frame = Frame { left: 60.0, top: 20.0, width: 380.0, height: 380.0, x_range: (0.0, max), y_range: (0.0, max) };
    let mut svg = Svg::new(470.0, 450.0);
    svg.line(frame.x(0.0), frame.y(0.0), frame.x(max), frame.y(max), "gray");
    for p in &ppc.pairs {
        svg.circle(frame.x(p.mean_prediction), frame.y(p.observed as f64), 3.0, "steelblue");
    }
    frame.axes(&mut svg, "mean prediction", "observed");
    svg.finish()
}

fn steps(edges: &[f64], density: &[f64], frame: &Frame) -> Vec<(f64, f64)> {
    density
        .iter()
        .enumerate()
        .flat_map(|(b, d)| [(frame.x(edges[b]), frame.y(*d)), (frame.x(edges[b + 1]), frame.y(*d))])
        .collect()
}

/// Replicate histograms in grey under the observed one in black.
pub fn ppc_density(ppc: &PpcReport) -> String {
    let top = ppc
        .replicate_densities
        .iter()
        .flatten()
        .chain(&ppc.observed_density)
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-12)
        * 1.05;
    let x_max = *ppc.bin_edges.last().unwrap_or(&1.0);
    let frame = Frame { left: 70.0, top: 20.0, width: 400.0, height: 260.0, x_range: (0.0, x_max), y_range: (0.0, top) };
    let mut svg = Svg::new(500.0, 330.0);
    for rep in &ppc.replicate_densities {
        svg.polyline(&steps(&ppc.bin_edges, rep, &frame), "#bbbbbb", 0.5);
    }
    svg.polyline(&steps(&ppc.bin_edges, &ppc.observed_density, &frame), "black", 2.5);
    frame.axes(&mut svg, "summed MaxN", "density");
    svg.finish()
}
