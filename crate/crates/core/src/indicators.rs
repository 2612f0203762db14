//! Fold-change posteriors, category credibilities and status reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::diagnostics::hdi;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::svg::{Frame, Svg};

const DEFAULT_SCHEME_JSON: &str = include_str!("../data/default_scheme.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawCategory {
    label: String,
    lower: f64,
    upper: Option<f64>,
    color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawScheme {
    categories: Vec<RawCategory>,
}

/// One category: fold changes in `[lower, upper)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub color: String,
}

impl Category {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x < self.upper
    }
}

/// Ordered, contiguous categories covering `[0, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct CategoryScheme {
    categories: Vec<Category>,
}

impl TryFrom<RawScheme> for CategoryScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        let n = raw.categories.len();
        let categories = raw
            .categories
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let upper = match c.upper {
                    Some(u) => u,
                    None if i + 1 == n => f64::INFINITY,
                    None => return Err(Error::Config(format!("category '{}' needs an upper bound", c.label))),
                };
                Ok(Category { label: c.label, lower: c.lower, upper, color: c.color })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(categories)
    }
}

impl From<CategoryScheme> for RawScheme {
    fn from(s: CategoryScheme) -> Self {
        RawScheme {
            categories: s
                .categories
                .into_iter()
                .map(|c| RawCategory {
                    label: c.label,
                    lower: c.lower,
                    upper: c.upper.is_finite().then_some(c.upper),
                    color: c.color,
                })
                .collect(),
        }
    }
}

impl CategoryScheme {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(format!("invalid category scheme: {m}")));
        let Some(first) = categories.first() else {
            return bad("no categories".into());
        };
        if first.lower != 0.0 {
            return bad(format!("first lower bound is {}, expected 0", first.lower));
        }
        for (i, c) in categories.iter().enumerate() {
            if !(c.upper > c.lower) {
                return bad(format!("category '{}' is empty", c.label));
            }
            if categories[..i].iter().any(|p| p.label == c.label) {
                return bad(format!("duplicate label '{}'", c.label));
            }
            if let Some(next) = categories.get(i + 1) {
                if next.lower != c.upper {
                    return bad(format!("gap or overlap between '{}' and '{}'", c.label, next.label));
                }
            } else if c.upper != f64::INFINITY {
                return bad(format!("last category '{}' must be unbounded above", c.label));
            }
        }
        Ok(Self { categories })
    }

    /// The traffic-light scheme shipped in `data/default_scheme.json`.
    pub fn traffic_light() -> Self {
        Self::from_json_str(DEFAULT_SCHEME_JSON).expect("bundled scheme is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.label.as_str())
    }

    /// Index of the category holding `x`; values below zero fall in the first.
    pub fn index_of(&self, x: f64) -> usize {
        self.categories.iter().position(|c| x < c.upper).unwrap_or(self.categories.len() - 1)
    }

    pub fn classify(&self, x: f64) -> &Category {
        &self.categories[self.index_of(x)]
    }

    /// Categories whose interval meets the closed interval `[lo, hi]`.
    pub fn intersecting(&self, lo: f64, hi: f64) -> Vec<&Category> {
        self.categories.iter().filter(|c| c.lower <= hi && c.upper > lo).collect()
    }
}

impl Default for CategoryScheme {
    fn default() -> Self {
        Self::traffic_light()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Overall,
    Site(String),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Overall => f.write_str("overall"),
            Scope::Site(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldChangePosterior {
    pub scope: Scope,
    pub year: i32,
    pub baseline: i32,
    pub draws: Vec<f64>,
}

fn has_column(draws: &PosteriorDraws, name: &str) -> bool {
    draws.position(name).is_ok()
}

/// Per-draw `Δ = ζ·σ` for a named effect.
fn effect(draws: &PosteriorDraws, zeta: &str, sigma: &str) -> Result<Vec<f64>> {
    let z = draws.pooled(zeta)?;
    let s = draws.pooled(sigma)?;
    Ok(z.iter().zip(&s).map(|(z, s)| z * s).collect())
}

fn year_effect(draws: &PosteriorDraws, year: i32) -> Result<Vec<f64>> {
    let name = format!("zeta_Y[{year}]");
    if !has_column(draws, &name) {
        return Err(Error::UnknownYear(year));
    }
    effect(draws, &name, "sigma_Y")
}

fn nonempty(draws: &PosteriorDraws) -> Result<()> {
    if draws.n_draws() == 0 {
        return Err(Error::TooFewDraws { needed: 1, got: 0 });
    }
    Ok(())
}

/// `exp(Δ_year - Δ_baseline)` per draw; `β0` cancels.
pub fn fold_change(draws: &PosteriorDraws, year: i32, baseline: i32) -> Result<FoldChangePosterior> {
    nonempty(draws)?;
    let dy = year_effect(draws, year)?;
    let db = year_effect(draws, baseline)?;
    Ok(FoldChangePosterior {
        scope: Scope::Overall,
        year,
        baseline,
        draws: dy.iter().zip(&db).map(|(a, b)| (a - b).exp()).collect(),
    })
}

/// Site-level ratio adding the site-year interaction to the year effect.
pub fn site_fold_change(draws: &PosteriorDraws, site: &str, year: i32, baseline: i32) -> Result<FoldChangePosterior> {
    nonempty(draws)?;
    if !has_column(draws, &format!("zeta_S[{site}]")) {
        return Err(Error::UnknownSite(site.to_string()));
    }
    let dy = year_effect(draws, year)?;
    let db = year_effect(draws, baseline)?;
    let pair = |y: i32| {
        let name = format!("zeta_SY[{site}:{y}]");
        if !has_column(draws, &name) {
            return Err(Error::ExcludedScope { site: site.to_string(), year: y });
        }
        effect(draws, &name, "sigma_SY")
    };
    let base_sy = pair(baseline)?;
    let year_sy = pair(year)?;
    let ratios = (0..dy.len())
        .map(|i| ((dy[i] + year_sy[i]) - (db[i] + base_sy[i])).exp())
        .collect();
    Ok(FoldChangePosterior { scope: Scope::Site(site.to_string()), year, baseline, draws: ratios })
}

/// Label → probability in scheme order; serializes as an ordered JSON object.
#[derive(Debug, Clone, PartialEq)]
pub struct Credibility(pub Vec<(String, f64)>);

impl Credibility {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.0.iter().find(|(l, _)| l == label).map(|(_, p)| *p)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, p)| p).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.0.iter().map(|(_, p)| *p).collect()
    }
}

impl Serialize for Credibility {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

/// Fraction of draws in each category.
pub fn credibility_of(draws: &[f64], scheme: &CategoryScheme) -> Credibility {
    let mut counts = vec![0usize; scheme.categories.len()];
    for &d in draws {
        counts[scheme.index_of(d)] += 1;
    }
    let n = draws.len().max(1) as f64;
    Credibility(
        scheme
            .categories
            .iter()
            .zip(counts)
            .map(|(c, k)| (c.label.clone(), k as f64 / n))
            .collect(),
    )
}

pub fn credibility(posterior: &FoldChangePosterior, scheme: &CategoryScheme) -> Credibility {
    credibility_of(&posterior.draws, scheme)
}

/// Fraction of draws strictly below one.
pub fn p_decline(posterior: &FoldChangePosterior) -> f64 {
    if posterior.draws.is_empty() {
        return 0.0;
    }
    posterior.draws.iter().filter(|&&d| d < 1.0).count() as f64 / posterior.draws.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    fn of(draws: &[f64], bins: usize) -> Self {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        let top = sorted[((sorted.len() - 1) as f64 * 0.995) as usize].max(1.2);
        let width = top / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| b as f64 * width).collect();
        let mut counts = vec![0.0; bins];
        for &d in draws {
            if d < top {
                counts[((d / width) as usize).min(bins - 1)] += 1.0;
            }
        }
        let scale = 1.0 / (draws.len() as f64 * width);
        Self { edges, density: counts.iter().map(|c| c * scale).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YearStatus {
    pub credibility: Credibility,
    pub p_decline: f64,
    pub median: f64,
    pub hdi: (f64, f64),
    pub n_draws: usize,
    pub density: Histogram,
}

impl YearStatus {
    pub fn from_posterior(posterior: &FoldChangePosterior, scheme: &CategoryScheme) -> Result<Self> {
        Ok(Self {
            credibility: credibility(posterior, scheme),
            p_decline: p_decline(posterior),
            median: median(&posterior.draws),
            hdi: hdi(&posterior.draws, 0.95)?,
            n_draws: posterior.draws.len(),
            density: Histogram::of(&posterior.draws, 60),
        })
    }
}

/// Scope ("overall" or a site) → year → status.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusReport {
    pub baseline: i32,
    pub scheme: CategoryScheme,
    pub scopes: BTreeMap<String, BTreeMap<i32, YearStatus>>,
    /// Sites lacking a baseline-year observation.
    pub excluded_sites: Vec<String>,
}

fn bracketed<'a>(names: &'a [String], prefix: &'a str) -> impl Iterator<Item = &'a str> {
    names
        .iter()
        .filter_map(move |n| n.strip_prefix(prefix).and_then(|r| r.strip_suffix(']')))
}

impl StatusReport {
    /// Builds overall and per-site entries for `years` (every fitted year
    /// when `None`).
    pub fn build(
        draws: &PosteriorDraws,
        baseline: i32,
        years: Option<&[i32]>,
        scheme: &CategoryScheme,
    ) -> Result<Self> {
        let fitted: Vec<i32> = bracketed(&draws.names, "zeta_Y[").filter_map(|y| y.parse().ok()).collect();
        if !fitted.contains(&baseline) {
            return Err(Error::UnknownYear(baseline));
        }
        let years: Vec<i32> = match years {
            Some(ys) => {
                if let Some(&missing) = ys.iter().find(|y| !fitted.contains(y)) {
                    return Err(Error::UnknownYear(missing));
                }
                ys.to_vec()
            }
            None => fitted,
        };
        let mut scopes = BTreeMap::new();
        let mut overall = BTreeMap::new();
        for &y in &years {
            overall.insert(y, YearStatus::from_posterior(&fold_change(draws, y, baseline)?, scheme)?);
        }
        scopes.insert(Scope::Overall.to_string(), overall);

        let pairs: Vec<&str> = bracketed(&draws.names, "zeta_SY[").collect();
        let mut excluded_sites = Vec::new();
        for site in bracketed(&draws.names, "zeta_S[") {
            let has = |y: i32| pairs.contains(&format!("{site}:{y}").as_str());
            if !has(baseline) {
                excluded_sites.push(site.to_string());
                continue;
            }
            let mut entries = BTreeMap::new();
            for &y in years.iter().filter(|&&y| has(y)) {
                entries.insert(y, YearStatus::from_posterior(&site_fold_change(draws, site, y, baseline)?, scheme)?);
            }
            scopes.insert(site.to_string(), entries);
        }
        Ok(Self { baseline, scheme: scheme.clone(), scopes, excluded_sites })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    /// Point classification from the posterior median.
    MeanOnly,
    /// Every category met by the 95% HDI.
    MeanInterval,
    /// Full credibility table with density and pie plots.
    FullCredibility,
}

impl ReportStyle {
    pub const ALL: [ReportStyle; 3] = [Self::MeanOnly, Self::MeanInterval, Self::FullCredibility];

    pub fn name(self) -> &'static str {
        match self {
            Self::MeanOnly => "mean-only",
            Self::MeanInterval => "mean-interval",
            Self::FullCredibility => "full-credibility",
        }
    }
}

impl FromStr for ReportStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown report style '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFile {
    pub name: String,
    pub contents: String,
}

fn file_safe(scope: &str) -> String {
    scope.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn entries(report: &StatusReport) -> impl Iterator<Item = (&str, i32, &YearStatus)> {
    report
        .scopes
        .iter()
        .flat_map(|(scope, ys)| ys.iter().map(move |(y, st)| (scope.as_str(), *y, st)))
}

/// Tile grid: one row per scope, one column per year, each tile split
/// evenly among its labels.
fn tile_svg(report: &StatusReport, title: &str, labels_of: impl Fn(&YearStatus) -> Vec<String>) -> String {
    let years: Vec<i32> = report.scopes.get("overall").map(|m| m.keys().copied().collect()).unwrap_or_default();
    let (cell_w, cell_h, left, top) = (110.0, 28.0, 90.0, 50.0);
    let mut svg = Svg::new(left + cell_w * years.len() as f64 + 20.0, top + cell_h * report.scopes.len() as f64 + 20.0);
    svg.text(10.0, 20.0, 14.0, "start", title);
    for (j, y) in years.iter().enumerate() {
        svg.text(left + cell_w * (j as f64 + 0.5), top - 8.0, 11.0, "middle", &y.to_string());
    }
    for (i, (scope, ys)) in report.scopes.iter().enumerate() {
        let yy = top + cell_h * i as f64;
        svg.text(left - 6.0, yy + cell_h * 0.65, 11.0, "end", scope);
        for (j, y) in years.iter().enumerate() {
            let Some(st) = ys.get(y) else { continue };
            let labels = labels_of(st);
            let w = (cell_w - 4.0) / labels.len().max(1) as f64;
            for (k, label) in labels.iter().enumerate() {
                let color = report
                    .scheme
                    .categories()
                    .iter()
                    .find(|c| &c.label == label)
                    .map_or("gray", |c| c.color.as_str());
                svg.rect(left + cell_w * j as f64 + 2.0 + w * k as f64, yy + 2.0, w, cell_h - 4.0, color);
            }
            svg.text(left + cell_w * (j as f64 + 0.5), yy + cell_h * 0.65, 10.0, "middle", &labels.join(" / "));
        }
    }
    svg.finish()
}

/// Density of fold-change draws with category-colored bands underneath.
fn density_svg(scope: &str, year: i32, baseline: i32, st: &YearStatus, scheme: &CategoryScheme) -> String {
    let hist = &st.density;
    let x_max = *hist.edges.last().unwrap_or(&1.2);
    let y_max = hist.density.iter().copied().fold(0.0, f64::max).max(1e-9) * 1.05;
    let frame = Frame { left: 60.0, top: 30.0, width: 420.0, height: 220.0, x_range: (0.0, x_max), y_range: (0.0, y_max) };
    let mut svg = Svg::new(520.0, 300.0);
    svg.text(10.0, 18.0, 13.0, "start", &format!("{scope}: {year} relative to {baseline}"));
    for c in scheme.categories() {
        if c.lower >= x_max {
            continue;
        }
        let hi = c.upper.min(x_max);
        svg.rect(frame.x(c.lower), frame.top, frame.x(hi) - frame.x(c.lower), frame.height, &c.color);
        let p = st.credibility.get(&c.label).unwrap_or(0.0);
        svg.text(frame.x((c.lower + hi) / 2.0), frame.top + 12.0, 10.0, "middle", &format!("{}: {:.0}%", c.label, 100.0 * p));
    }
    let mut pts = Vec::with_capacity(2 * hist.density.len());
    for (b, d) in hist.density.iter().enumerate() {
        pts.push((frame.x(hist.edges[b]), frame.y(*d)));
        pts.push((frame.x(hist.edges[b + 1]), frame.y(*d)));
    }
    svg.polyline(&pts, "black", 1.5);
    frame.axes(&mut svg, "fold change relative to baseline", "density");
    svg.finish()
}

/// Per-site pie charts of category credibility for one year.
fn pie_svg(report: &StatusReport, year: i32) -> String {
    let rows: Vec<(&str, &YearStatus)> = report
        .scopes
        .iter()
        .filter_map(|(s, ys)| ys.get(&year).map(|st| (s.as_str(), st)))
        .collect();
    let mut svg = Svg::new(140.0 * rows.len().max(1) as f64, 200.0);
    svg.text(10.0, 18.0, 13.0, "start", &format!("{year} relative to {}", report.baseline));
    for (i, (scope, st)) in rows.iter().enumerate() {
        let cx = 70.0 + 140.0 * i as f64;
        let slices: Vec<(f64, &str)> = report
            .scheme
            .categories()
            .iter()
            .map(|c| (st.credibility.get(&c.label).unwrap_or(0.0), c.color.as_str()))
            .collect();
        svg.pie(cx, 95.0, 50.0, &slices);
        svg.text(cx, 165.0, 12.0, "middle", scope);
        svg.text(cx, 182.0, 10.0, "middle", &format!("P(decline) {:.2}", st.p_decline));
    }
    for scope in &report.excluded_sites {
        svg.text(10.0, 196.0, 9.0, "start", &format!("excluded (no baseline): {scope}"));
    }
    svg.finish()
}

/// Renders one communication style as CSV tables and SVG plots.
pub fn render_report(report: &StatusReport, style: ReportStyle) -> Vec<RenderedFile> {
    let scheme = &report.scheme;
    let mut files = Vec::new();
    match style {
        ReportStyle::MeanOnly => {
            let mut csv = String::from("scope,year,median,category\n");
            for (scope, y, st) in entries(report) {
                csv.push_str(&format!("{scope},{y},{},{}\n", st.median, scheme.classify(st.median).label));
            }
            files.push(RenderedFile { name: "style1_median.csv".into(), contents: csv });
            let svg = tile_svg(report, "Status from posterior median", |st| vec![scheme.classify(st.median).label.clone()]);
            files.push(RenderedFile { name: "style1_median.svg".into(), contents: svg });
        }
        ReportStyle::MeanInterval => {
            let labels = |st: &YearStatus| -> Vec<String> {
                scheme.intersecting(st.hdi.0, st.hdi.1).into_iter().map(|c| c.label.clone()).collect()
            };
            let mut csv = String::from("scope,year,median,hdi_lower,hdi_upper,categories\n");
            for (scope, y, st) in entries(report) {
                csv.push_str(&format!("{scope},{y},{},{},{},{}\n", st.median, st.hdi.0, st.hdi.1, labels(st).join(";")));
            }
            files.push(RenderedFile { name: "style2_interval.csv".into(), contents: csv });
            let svg = tile_svg(report, "Status categories within the 95% HDI", labels);
            files.push(RenderedFile { name: "style2_interval.svg".into(), contents: svg });
        }
        ReportStyle::FullCredibility => {
            let mut csv = String::from("scope,year,category,probability,p_decline\n");
            for (scope, y, st) in entries(report) {
                for (label, p) in &st.credibility.0 {
                    csv.push_str(&format!("{scope},{y},{label},{p},{}\n", st.p_decline));
                }
            }
            files.push(RenderedFile { name: "style3_credibility.csv".into(), contents: csv });
            for (scope, y, st) in entries(report) {
                files.push(RenderedFile {
                    name: format!("style3_density_{}_{y}.svg", file_safe(scope)),
                    contents: density_svg(scope, y, report.baseline, st, scheme),
                });
            }
            let years: Vec<i32> = report.scopes.get("overall").map(|m| m.keys().copied().collect()).unwrap_or_default();
            for y in years {
                files.push(RenderedFile { name: format!("style3_pies_{y}.svg"), contents: pie_svg(report, y) });
            }
        }
    }
    files
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::draws::{ChainDraws, DrawDiagnostics};
    use crate::sampler::SamplerConfig;
    use proptest::prelude::*;

    /// Draws over named columns, all in one chain.
    pub(crate) fn draws_with(cols: &[(&str, Vec<f64>)]) -> PosteriorDraws {
        let n = cols[0].1.len();
        PosteriorDraws {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            chains: vec![ChainDraws {
                rows: (0..n).map(|i| cols.iter().map(|(_, v)| v[i]).collect()).collect(),
                diagnostics: vec![
                    DrawDiagnostics {
                        divergent: false,
                        treedepth: 1,
                        n_leapfrog: 1,
                        accept_stat: 1.0,
                        energy: 0.0,
                        step_size: 0.1
                    };
                    n
                ],
            }],
            config: SamplerConfig::default(),
            layout: None,
        }
    }

    fn posterior(draws: Vec<f64>) -> FoldChangePosterior {
        FoldChangePosterior { scope: Scope::Overall, year: 2019, baseline: 2018, draws }
    }

    #[test]
    fn default_scheme_bounds() {
        let s = CategoryScheme::traffic_light();
        let labels: Vec<_> = s.labels().collect();
        assert_eq!(labels, ["poor", "fair", "good", "very good"]);
        assert_eq!(s.classify(0.95).label, "very good");
        assert_eq!(s.classify(0.5).label, "fair");
        assert_eq!(s.classify(1.0).label, "very good");
        let back = CategoryScheme::from_json_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_schemes_rejected() {
        let gap = r#"{"categories":[{"label":"a","lower":0,"upper":0.5,"color":"red"},{"label":"b","lower":0.6,"upper":null,"color":"green"}]}"#;
        assert!(CategoryScheme::from_json_str(gap).is_err());
        let start = r#"{"categories":[{"label":"a","lower":0.1,"upper":null,"color":"red"}]}"#;
        assert!(CategoryScheme::from_json_str(start).is_err());
        let bounded = r#"{"categories":[{"label":"a","lower":0,"upper":2,"color":"red"}]}"#;
        assert!(CategoryScheme::from_json_str(bounded).is_err());
        assert!(CategoryScheme::from_json_str(r#"{"categories":[]}"#).is_err());
    }

    fn year_fixture() -> PosteriorDraws {
        draws_with(&[
            ("beta0", vec![2.0, 2.1, 2.2]),
            ("zeta_S[S1]", vec![0.3, -0.2, 0.1]),
            ("zeta_S[S5]", vec![0.0, 0.0, 0.0]),
            ("zeta_Y[2018]", vec![0.5, 1.0, -0.5]),
            ("zeta_Y[2019]", vec![0.5 + 0.6f64.ln(), 1.0 + 0.6f64.ln(), -0.5 + 0.6f64.ln()]),
            ("zeta_SY[S1:2018]", vec![0.2, -0.4, 1.0]),
            ("zeta_SY[S1:2019]", vec![-0.3, 0.1, 0.5]),
            ("zeta_SY[S5:2019]", vec![0.0, 0.0, 0.0]),
            ("sigma_Y", vec![1.0, 1.0, 1.0]),
            ("sigma_SY", vec![0.5, 2.0, 1.0]),
        ])
    }

    #[test]
    fn baseline_ratio_is_one() {
        let f = fold_change(&year_fixture(), 2018, 2018).unwrap();
        assert!(f.draws.iter().all(|&d| d == 1.0));
        assert_eq!(p_decline(&f), 0.0);
    }

    #[test]
    fn constant_shift_gives_constant_ratio() {
        let f = fold_change(&year_fixture(), 2019, 2018).unwrap();
        for d in f.draws {
            assert!((d - 0.6).abs() < 1e-12);
        }
        assert!(matches!(fold_change(&year_fixture(), 2021, 2018), Err(Error::UnknownYear(2021))));
    }

    #[test]
    fn site_ratio_by_hand() {
        let f = site_fold_change(&year_fixture(), "S1", 2019, 2018).unwrap();
        // ln 0.6 + sigma_SY * (zeta_SY[2019] - zeta_SY[2018]).
        let expected = [
            0.6 * (0.5f64 * (-0.3 - 0.2)).exp(),
            0.6 * (2.0f64 * (0.1 + 0.4)).exp(),
            0.6 * (1.0f64 * (0.5 - 1.0)).exp(),
        ];
        for (d, e) in f.draws.iter().zip(expected) {
            assert!((d - e).abs() < 1e-12, "{d} {e}");
        }
        assert!(matches!(
            site_fold_change(&year_fixture(), "S5", 2019, 2018),
            Err(Error::ExcludedScope { ref site, year: 2018 }) if site == "S5"
        ));
        assert!(matches!(site_fold_change(&year_fixture(), "S9", 2019, 2018), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn zero_interaction_matches_overall() {
        let mut d = year_fixture();
        let k = d.position("sigma_SY").unwrap();
        for r in &mut d.chains[0].rows {
            r[k] = 0.0;
        }
        let site = site_fold_change(&d, "S1", 2019, 2018).unwrap();
        let overall = fold_change(&d, 2019, 2018).unwrap();
        assert_eq!(site.draws, overall.draws);
    }

    #[test]
    fn credibility_examples() {
        let s = CategoryScheme::traffic_light();
        let c = credibility(&posterior(vec![0.95; 10]), &s);
        assert_eq!(c.probabilities(), [0.0, 0.0, 0.0, 1.0]);
        let n = 60_000;
        let uniform: Vec<f64> = (0..n).map(|i| 0.4 + 0.6 * (i as f64 + 0.5) / n as f64).collect();
        let c = credibility(&posterior(uniform), &s);
        let expected = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        for (p, e) in c.probabilities().iter().zip(expected) {
            assert!((p - e).abs() < 1e-4, "{p} {e}");
        }
    }

    #[test]
    fn decline_fractions() {
        let mut d = vec![0.8; 75];
        d.extend(vec![1.2; 25]);
        assert_eq!(p_decline(&posterior(d)), 0.75);
        let mut d = vec![0.9; 67];
        d.extend(vec![1.1; 33]);
        assert!((p_decline(&posterior(d)) - 0.67).abs() < 1e-12);
    }

    #[test]
    fn styles_classify() {
        let s = CategoryScheme::traffic_light();
        assert_eq!(s.classify(0.57).label, "fair");
        let labels: Vec<_> = s.intersecting(0.45, 1.2).iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["poor", "fair", "good", "very good"]);
        assert_eq!("full-credibility".parse::<ReportStyle>().unwrap(), ReportStyle::FullCredibility);
        assert!("pie".parse::<ReportStyle>().is_err());
    }

    fn report_fixture() -> PosteriorDraws {
        let n = 400;
        let shift: Vec<f64> = (0..n).map(|i| -0.4 + 0.8 * i as f64 / n as f64).collect();
        draws_with(&[
            ("beta0", vec![2.0; n]),
            ("zeta_S[S1]", vec![0.1; n]),
            ("zeta_S[S5]", vec![0.0; n]),
            ("zeta_Y[2018]", vec![0.0; n]),
            ("zeta_Y[2019]", shift),
            ("zeta_SY[S1:2018]", vec![0.0; n]),
            ("zeta_SY[S1:2019]", vec![0.2; n]),
            ("zeta_SY[S5:2020]", vec![0.0; n]),
            ("zeta_Y[2020]", vec![-0.1; n]),
            ("sigma_Y", vec![1.0; n]),
            ("sigma_SY", vec![0.5; n]),
        ])
    }

    #[test]
    fn report_structure() {
        let s = CategoryScheme::traffic_light();
        let r = StatusReport::build(&report_fixture(), 2018, None, &s).unwrap();
        assert_eq!(r.excluded_sites, ["S5"]);
        assert_eq!(r.scopes["overall"].len(), 3);
        assert_eq!(r.scopes["S1"].keys().copied().collect::<Vec<_>>(), [2018, 2019]);
        for ys in r.scopes.values() {
            for st in ys.values() {
                assert!((st.credibility.total() - 1.0).abs() < 1e-12);
            }
        }
        let base = &r.scopes["overall"][&2018];
        assert_eq!(base.credibility.get("very good"), Some(1.0));
        assert_eq!(base.median, 1.0);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"excluded_sites\""));
        assert!(matches!(StatusReport::build(&report_fixture(), 2018, Some(&[2025]), &s), Err(Error::UnknownYear(2025))));
        let only = StatusReport::build(&report_fixture(), 2018, Some(&[2018]), &s).unwrap();
        assert_eq!(only.scopes["overall"].len(), 1);
    }

    #[test]
    fn style3_passes_credibility_through() {
        let s = CategoryScheme::traffic_light();
        let r = StatusReport::build(&report_fixture(), 2018, None, &s).unwrap();
        let files = render_report(&r, ReportStyle::FullCredibility);
        let table = &files.iter().find(|f| f.name == "style3_credibility.csv").unwrap().contents;
        for line in table.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let st = &r.scopes[f[0]][&f[1].parse::<i32>().unwrap()];
            assert_eq!(f[3].parse::<f64>().unwrap(), st.credibility.get(f[2]).unwrap());
        }
        assert!(files.iter().any(|f| f.name == "style3_pies_2019.svg"));
        assert!(files.iter().any(|f| f.name == "style3_density_overall_2019.svg"));
        let s1 = render_report(&r, ReportStyle::MeanOnly);
        assert!(s1[0].contents.contains("overall,2018,1,very good"));
        let s2 = render_report(&r, ReportStyle::MeanInterval);
        assert!(s2[0].contents.lines().count() > 1);
    }

    fn scheme_from(bounds: &[f64]) -> CategoryScheme {
        let mut cats = Vec::new();
        for i in 0..bounds.len() {
            cats.push(Category {
                label: format!("c{i}"),
                lower: bounds[i],
                upper: bounds.get(i + 1).copied().unwrap_or(f64::INFINITY),
                color: "gray".into(),
            });
        }
        CategoryScheme::new(cats).unwrap()
    }

    proptest! {
        #[test]
        fn credibility_partitions(draws in prop::collection::vec(0.0..3.0f64, 1..300)) {
            let c = credibility(&posterior(draws.clone()), &CategoryScheme::traffic_light());
            prop_assert!((c.total() - 1.0).abs() < 1e-12);
            let below = p_decline(&posterior(draws.clone()));
            let above = draws.iter().filter(|&&d| d >= 1.0).count() as f64 / draws.len() as f64;
            prop_assert_eq!(below + above, 1.0);
        }

        #[test]
        fn argbin_invariant_under_monotone_map(draws in prop::collection::vec(0.0..3.0f64, 1..200), k in 0.2..4.0f64) {
            let s = CategoryScheme::traffic_light();
            let bounds: Vec<f64> = s.categories().iter().map(|c| c.lower.powf(k)).collect();
            let t = scheme_from(&bounds);
            let moved: Vec<f64> = draws.iter().map(|d| d.powf(k)).collect();
            let a = credibility_of(&draws, &s).probabilities();
            let b = credibility_of(&moved, &t).probabilities();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn refinement_preserves_union(draws in prop::collection::vec(0.0..3.0f64, 1..200), cut in 0.71..0.89f64) {
            let coarse = scheme_from(&[0.0, 0.5, 0.7, 0.9]);
            let fine = scheme_from(&[0.0, 0.5, 0.7, cut, 0.9]);
            let a = credibility_of(&draws, &coarse).probabilities();
            let b = credibility_of(&draws, &fine).probabilities();
            prop_assert!((a[2] - (b[2] + b[3])).abs() < 1e-12);
            prop_assert_eq!(a[3], b[4]);
        }
    }
}
