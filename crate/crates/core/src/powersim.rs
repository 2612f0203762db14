//! Simulation study of monitoring-design power.
//!
//! Each replicate takes one posterior draw, simulates the monitored years
//! again (A′) plus a new year with a multiplicative decline ρ at α stations
//! per site (A*), refits the model with a before/after term β1 and records
//! `P(β1 < 0)` together with category credibilities of the new-year ratio.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AggregatedObservation, ObservationTable};
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::indicators::{credibility_of, CategoryScheme};
use crate::model::{
    posterior_predictive_sample, sample_nb, BeforeAfterExtension, ModelParameters, PriorConfig,
    ETA_CLAMP,
};
use crate::sampler::{fit_model, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub rho_levels: Vec<f64>,
    pub alpha_levels: Vec<usize>,
    pub replicates: usize,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        Self {
            rho_levels: vec![0.05, 0.25, 0.5, 0.7, 0.9, 1.0],
            alpha_levels: vec![5, 10, 20],
            replicates: 500,
        }
    }
}

impl ScenarioGrid {
    pub fn validate(&self, base_stations: usize) -> Result<()> {
        if self.rho_levels.is_empty() || self.alpha_levels.is_empty() {
            return Err(Error::Config("scenario grid needs at least one rho and one alpha".into()));
        }
        if let Some(r) = self.rho_levels.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("rho must be positive, got {r}")));
        }
        if let Some(a) = self.alpha_levels.iter().find(|&&a| a < base_stations) {
            return Err(Error::Config(format!("alpha {a} is below the {base_stations} existing stations")));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        Ok(())
    }

    /// `(rho, alpha)` cells, alpha-major.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.alpha_levels
            .iter()
            .flat_map(|&a| self.rho_levels.iter().map(move |&r| (r, a)))
            .collect()
    }
}

/// Random effects of the simulated year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewYearEffects {
    pub delta_y: f64,
    /// One per site, in table site order.
    pub delta_sy: Vec<f64>,
    /// Effects of the `alpha - base` added stations.
    pub new_delta_b: Vec<f64>,
}

impl NewYearEffects {
    pub fn draw<R: Rng + ?Sized>(draw: &ModelParameters, n_sites: usize, n_new: usize, rng: &mut R) -> Self {
        let normal = |sd: f64, rng: &mut R| -> f64 {
            if sd > 0.0 {
                Normal::new(0.0, sd).expect("finite sd").sample(rng)
            } else {
                0.0
            }
        };
        Self {
            delta_y: normal(draw.sigma_y, rng),
            delta_sy: (0..n_sites).map(|_| normal(draw.sigma_sy, rng)).collect(),
            new_delta_b: (0..n_new).map(|_| normal(draw.sigma_b, rng)).collect(),
        }
    }

    pub fn zero(n_sites: usize, n_new: usize) -> Self {
        Self { delta_y: 0.0, delta_sy: vec![0.0; n_sites], new_delta_b: vec![0.0; n_new] }
    }
}

/// Design of the new year: every site at `alpha` stations, the existing
/// station ids first and `new<k>` ids for the added ones.
pub fn new_year_design(table: &ObservationTable, alpha: usize) -> Result<Vec<(String, String)>> {
    let base = table.stations().len();
    if alpha < base {
        return Err(Error::Config(format!("alpha {alpha} is below the {base} existing stations")));
    }
    let stations: Vec<String> = table
        .stations()
        .iter()
        .cloned()
        .chain((1..=alpha - base).map(|k| format!("new{k:02}")))
        .collect();
    Ok(table
        .sites()
        .iter()
        .flat_map(|s| stations.iter().map(move |b| (s.clone(), b.clone())))
        .collect())
}

/// Mean abundance for each new-year design point (site-major, station order
/// as in [`new_year_design`]).
pub fn new_year_means(
    draw: &ModelParameters,
    table: &ObservationTable,
    rho: f64,
    alpha: usize,
    baseline: i32,
    effects: &NewYearEffects,
) -> Result<Vec<f64>> {
    let yb = table.year_index(baseline).ok_or(Error::UnknownYear(baseline))?;
    let base = table.stations().len();
    let anchor = draw.beta0 + draw.zeta_y[yb] * draw.sigma_y + rho.ln();
    let mut out = Vec::with_capacity(alpha * table.sites().len());
    for s in 0..table.sites().len() {
        let site = anchor + draw.zeta_s[s] * draw.sigma_s + effects.delta_y + effects.delta_sy[s];
        for b in 0..alpha {
            let db = if b < base { draw.zeta_b[b] * draw.sigma_b } else { effects.new_delta_b[b - base] };
            out.push((site + db).clamp(-ETA_CLAMP, ETA_CLAMP).exp());
        }
    }
    Ok(out)
}

/// Step 1: responses at the original design points.
pub fn simulate_baseline<R: Rng + ?Sized>(draw: &ModelParameters, table: &ObservationTable, rng: &mut R) -> Result<Vec<u64>> {
    posterior_predictive_sample(draw, table, None, rng)
}

/// Step 2: the new year's observations.
pub fn simulate_new_year<R: Rng + ?Sized>(
    draw: &ModelParameters,
    table: &ObservationTable,
    rho: f64,
    alpha: usize,
    baseline: i32,
    rng: &mut R,
) -> Result<Vec<AggregatedObservation>> {
    if !(rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let design = new_year_design(table, alpha)?;
    let effects = NewYearEffects::draw(draw, table.sites().len(), alpha - table.stations().len(), rng);
    let means = new_year_means(draw, table, rho, alpha, baseline, &effects)?;
    let year = new_year(table);
    Ok(design
        .into_iter()
        .zip(means)
        .map(|((site, station_id), mu)| AggregatedObservation { site, year, station_id, a: sample_nb(mu, draw.phi, rng) })
        .collect())
}

/// The year following the last monitored one.
pub fn new_year(table: &ObservationTable) -> i32 {
    table.years().last().copied().unwrap_or(0) + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub draw_index: usize,
    pub rho: f64,
    pub alpha: usize,
    pub replicate_seed: u64,
    pub replicate: usize,
}

/// A′, A* and their concatenation A″ for one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub baseline_block: Vec<u64>,
    pub new_block: Vec<AggregatedObservation>,
    pub provenance: Provenance,
}

impl SimulatedDataset {
    /// `A″ = A′ followed by A*`.
    pub fn combined_responses(&self) -> Vec<u64> {
        self.baseline_block.iter().copied().chain(self.new_block.iter().map(|o| o.a)).collect()
    }

    /// Table for the refit with the before/after flag on new-year rows.
    pub fn refit_table(&self, table: &ObservationTable) -> Result<(ObservationTable, BeforeAfterExtension)> {
        let observations: Vec<AggregatedObservation> = table
            .with_responses(&self.baseline_block)
            .observations()
            .iter()
            .cloned()
            .chain(self.new_block.iter().cloned())
            .collect();
        let combined = ObservationTable::from_observations(observations)?;
        let ext = BeforeAfterExtension::from_year(&combined, new_year(table));
        Ok((combined, ext))
    }
}

/// Steps 1 and 2 for one replicate.
pub fn simulate_dataset<R: Rng + ?Sized>(
    draw: &ModelParameters,
    table: &ObservationTable,
    baseline: i32,
    provenance: Provenance,
    rng: &mut R,
) -> Result<SimulatedDataset> {
    let baseline_block = simulate_baseline(draw, table, rng)?;
    let new_block = simulate_new_year(draw, table, provenance.rho, provenance.alpha, baseline, rng)?;
    Ok(SimulatedDataset { baseline_block, new_block, provenance })
}

/// Outcome of one replicate fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub cell: usize,
    pub provenance: Provenance,
    pub base_seed: u64,
    /// `P(β1 < 0 | data)`; absent when the fit failed.
    pub p_negative: Option<f64>,
    /// Category credibilities of the estimated new-year ratio.
    pub credibility: Vec<f64>,
    pub median_ratio: Option<f64>,
    pub divergences: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub rho: f64,
    pub alpha: usize,
    pub mean_power: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_credibility: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub grid: ScenarioGrid,
    pub baseline: i32,
    pub base_seed: u64,
    pub labels: Vec<String>,
    pub cells: Vec<CellResult>,
    pub replicates: Vec<ReplicateOutcome>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub priors: PriorConfig,
    pub scheme: CategoryScheme,
    /// Defaults to the first monitored year.
    pub baseline: Option<i32>,
    /// Adds β1 to the new year's ratio.
    pub ratio_includes_beta1: bool,
    /// One JSON file per finished replicate; existing files are reused.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            priors: PriorConfig::default(),
            scheme: CategoryScheme::traffic_light(),
            baseline: None,
            ratio_includes_beta1: false,
            checkpoint_dir: None,
        }
    }
}

/// Draw index for every replicate: a shuffled pass over all draws,
/// reshuffled whenever more replicates than draws are needed.
fn draw_schedule(n_draws: usize, replicates: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(replicates);
    while out.len() < replicates {
        let mut pass: Vec<usize> = (0..n_draws).collect();
        pass.shuffle(rng);
        out.extend(pass.into_iter().take(replicates - out.len()));
    }
    out
}

fn checkpoint_path(dir: &Path, cell: usize, replicate: usize) -> PathBuf {
    dir.join(format!("cell{cell:02}_rep{replicate:05}.json"))
}

fn load_checkpoint(path: &Path, base_seed: u64, prov: &Provenance) -> Option<ReplicateOutcome> {
    let text = fs::read_to_string(path).ok()?;
    let out: ReplicateOutcome = serde_json::from_str(&text).ok()?;
    (out.base_seed == base_seed && &out.provenance == prov).then_some(out)
}

fn store_checkpoint(path: &Path, outcome: &ReplicateOutcome) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string(outcome)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Job {
    cell: usize,
    provenance: Provenance,
}

fn run_replicate(
    fitted: &PosteriorDraws,
    table: &ObservationTable,
    baseline: i32,
    fit_config: &SamplerConfig,
    options: &RunOptions,
    job: &Job,
    base_seed: u64,
) -> ReplicateOutcome {
    let mut outcome = ReplicateOutcome {
        cell: job.cell,
        provenance: job.provenance.clone(),
        base_seed,
        p_negative: None,
        credibility: Vec::new(),
        median_ratio: None,
        divergences: 0,
        error: None,
    };
    let result = (|| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(job.provenance.replicate_seed);
        let draw = fitted.params(job.provenance.draw_index)?;
        let data = simulate_dataset(&draw, table, baseline, job.provenance.clone(), &mut rng)?;
        let (combined, ext) = data.refit_table(table)?;
        let config = SamplerConfig { seed: rng.random(), ..fit_config.clone() };
        let refit = fit_model(&combined, &options.priors, &config, Some(&ext))?;
        let beta1 = refit.pooled("beta1")?;
        outcome.p_negative = Some(beta1.iter().filter(|&&b| b < 0.0).count() as f64 / beta1.len() as f64);
        let z_new = refit.pooled(&format!("zeta_Y[{}]", new_year(table)))?;
        let z_base = refit.pooled(&format!("zeta_Y[{baseline}]"))?;
        let sigma = refit.pooled("sigma_Y")?;
        let ratios: Vec<f64> = (0..beta1.len())
            .map(|i| {
                let b1 = if options.ratio_includes_beta1 { beta1[i] } else { 0.0 };
                ((z_new[i] - z_base[i]) * sigma[i] + b1).exp()
            })
            .collect();
        outcome.credibility = credibility_of(&ratios, &options.scheme).probabilities();
        outcome.median_ratio = Some(crate::indicators::median(&ratios));
        outcome.divergences = refit.divergences();
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("replicate {} of cell {} failed: {e}", job.provenance.replicate, job.cell);
        outcome.error = Some(e.to_string());
        outcome.p_negative = None;
    }
    outcome
}

/// Steps 1-4 over the whole grid. Replicate `r` uses the same posterior draw
/// and random stream in every cell, so cells differ only by ρ and α.
pub fn run_grid<R: Rng + ?Sized>(
    fitted: &PosteriorDraws,
    table: &ObservationTable,
    grid: &ScenarioGrid,
    fit_config: &SamplerConfig,
    options: &RunOptions,
    rng: &mut R,
) -> Result<PowerResult> {
    grid.validate(table.stations().len())?;
    fit_config.validate()?;
    if fitted.n_draws() == 0 {
        return Err(Error::TooFewDraws { needed: 1, got: 0 });
    }
    let baseline = options.baseline.or_else(|| table.years().first().copied()).ok_or(Error::EmptyTable)?;
    if table.year_index(baseline).is_none() {
        return Err(Error::UnknownYear(baseline));
    }
    let base_seed: u64 = rng.random();
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(base_seed);
    let schedule = draw_schedule(fitted.n_draws(), grid.replicates, &mut schedule_rng);
    let replicate_seeds: Vec<u64> = (0..grid.replicates).map(|_| schedule_rng.random()).collect();

    let jobs: Vec<Job> = grid
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(cell, (rho, alpha))| {
            let (schedule, seeds) = (&schedule, &replicate_seeds);
            (0..grid.replicates).map(move |r| Job {
                cell,
                provenance: Provenance { draw_index: schedule[r], rho, alpha, replicate_seed: seeds[r], replicate: r },
            })
        })
        .collect();

    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let replicates: Vec<ReplicateOutcome> = jobs
        .par_iter()
        .map(|job| {
            let path = options.checkpoint_dir.as_ref().map(|d| checkpoint_path(d, job.cell, job.provenance.replicate));
            if let Some(done) = path.as_deref().and_then(|p| load_checkpoint(p, base_seed, &job.provenance)) {
                return Ok(done);
            }
            let out = run_replicate(fitted, table, baseline, fit_config, options, job, base_seed);
            if let Some(p) = &path {
                store_checkpoint(p, &out)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let labels: Vec<String> = options.scheme.labels().map(str::to_string).collect();
    let cells = grid
        .cells()
        .into_iter()
        .enumerate()
        .map(|(c, (rho, alpha))| {
            let done: Vec<&ReplicateOutcome> =
                replicates.iter().filter(|o| o.cell == c && o.p_negative.is_some()).collect();
            let n = done.len();
            let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    done.iter().map(|o| f(o)).sum::<f64>() / n as f64
                }
            };
            CellResult {
                rho,
                alpha,
                mean_power: mean(&|o| o.p_negative.unwrap_or(0.0)),
                completed: n,
                failed: grid.replicates - n,
                mean_credibility: (0..labels.len()).map(|k| mean(&|o| o.credibility[k])).collect(),
            }
        })
        .collect();
    Ok(PowerResult { grid: grid.clone(), baseline, base_seed, labels, cells, replicates })
}

impl PowerResult {
    pub fn failures(&self) -> usize {
        self.cells.iter().map(|c| c.failed).sum()
    }

    pub fn cell(&self, rho: f64, alpha: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.rho == rho && c.alpha == alpha)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["rho".to_string(), "alpha".into(), "completed".into(), "failed".into(), "mean_power".into()];
        header.extend(self.labels.iter().map(|l| format!("p_{l}")));
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.rho.to_string(), c.alpha.to_string(), c.completed.to_string(), c.failed.to_string()];
            rec.push(c.mean_power.to_string());
            rec.extend(c.mean_credibility.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<power csv>", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub rho: f64,
    /// Category holding the simulated truth ρ.
    pub expected: String,
    pub probabilities: Vec<f64>,
}

/// Mean category probabilities per ρ, pooled over α.
pub fn category_curve(result: &PowerResult, scheme: &CategoryScheme) -> Vec<CurveRow> {
    result
        .grid
        .rho_levels
        .iter()
        .map(|&rho| {
            let done: Vec<&ReplicateOutcome> = result
                .replicates
                .iter()
                .filter(|o| o.provenance.rho == rho && o.p_negative.is_some())
                .collect();
            let k = scheme.categories().len();
            let probabilities = (0..k)
                .map(|j| {
                    if done.is_empty() {
                        f64::NAN
                    } else {
                        done.iter().map(|o| o.credibility.get(j).copied().unwrap_or(0.0)).sum::<f64>() / done.len() as f64
                    }
                })
                .collect();
            CurveRow { rho, expected: scheme.classify(rho).label.clone(), probabilities }
        })
        .collect()
}

pub fn write_curve_csv(rows: &[CurveRow], scheme: &CategoryScheme, w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["rho".to_string(), "expected_category".into()];
    header.extend(scheme.labels().map(str::to_string));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.rho.to_string(), r.expected.clone()];
        rec.extend(r.probabilities.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}
