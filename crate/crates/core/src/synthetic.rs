//! Synthetic monitoring datasets drawn from the model itself.
//!
//! The default design mirrors a small reef program: four sites surveyed in
//! each of three years, a fifth site added in the last year only, five fixed
//! stations per site, and one deployment lost to unusable imagery.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DeploymentRecord, IndicatorList, ObservationTable};
use crate::error::Result;
use crate::model::{design_table, posterior_predictive_sample, ModelParameters};

/// Population-level values used to generate data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratingValues {
    pub beta0: f64,
    pub sigma_b: f64,
    pub sigma_s: f64,
    pub sigma_y: f64,
    pub sigma_sy: f64,
    pub phi: f64,
}

impl GeneratingValues {
    /// Posterior means reported for the reef dataset (`e^b0 = 10`).
    pub fn reference() -> Self {
        Self {
            beta0: 10f64.ln(),
            sigma_b: 0.71,
            sigma_s: 0.22,
            sigma_y: 0.47,
            sigma_sy: 0.59,
            phi: 1.96,
        }
    }
}

pub const DESIGN_YEARS: [i32; 3] = [2018, 2019, 2020];
pub const STATIONS_PER_SITE: usize = 5;

/// Design points `(site, year, station)` for the default program.
///
/// Site `S5` is only surveyed in the final year. When `drop_one` is set, one
/// deployment chosen uniformly at random is removed.
pub fn default_design<R: Rng + ?Sized>(drop_one: bool, rng: &mut R) -> Vec<(String, i32, String)> {
    let mut points = Vec::new();
    for &year in &DESIGN_YEARS {
        let n_sites = if year == DESIGN_YEARS[2] { 5 } else { 4 };
        for s in 1..=n_sites {
            for b in 1..=STATIONS_PER_SITE {
                points.push((format!("S{s}"), year, format!("B{b}")));
            }
        }
    }
    if drop_one {
        let victim = rng.random_range(0..points.len());
        points.remove(victim);
    }
    points
}

/// Balanced `sites x years x stations` design.
pub fn full_design(n_sites: usize, years: &[i32], n_stations: usize) -> Vec<(String, i32, String)> {
    let mut points = Vec::new();
    for &year in years {
        for s in 1..=n_sites {
            for b in 1..=n_stations {
                points.push((format!("S{s}"), year, format!("B{b}")));
            }
        }
    }
    points
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub params: ModelParameters,
    pub table: ObservationTable,
}

/// Draws standardized effects, then responses, at the given design.
pub fn simulate<R: Rng + ?Sized>(
    values: &GeneratingValues,
    design: &[(String, i32, String)],
    rng: &mut R,
) -> Result<SyntheticDataset> {
    let shape = design_table(design)?;
    let mut n = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let params = ModelParameters {
        beta0: values.beta0,
        zeta_b: n(shape.stations().len()),
        zeta_s: n(shape.sites().len()),
        zeta_y: n(shape.years().len()),
        zeta_sy: n(shape.site_year_pairs().len()),
        sigma_b: values.sigma_b,
        sigma_s: values.sigma_s,
        sigma_y: values.sigma_y,
        sigma_sy: values.sigma_sy,
        phi: values.phi,
        beta1: None,
    };
    let a = posterior_predictive_sample(&params, &shape, None, rng)?;
    Ok(SyntheticDataset {
        table: shape.with_responses(&a),
        params,
    })
}

/// 64-observation dataset on the default design.
pub fn simulate_default_design<R: Rng + ?Sized>(values: &GeneratingValues, rng: &mut R) -> SyntheticDataset {
    let design = default_design(true, rng);
    simulate(values, &design, rng).expect("default design is valid")
}

/// Splits each observation's total across indicator species and adds one
/// non-indicator row per deployment, producing raw deployment records that
/// aggregate back to `table`.
pub fn to_deployment_records<R: Rng + ?Sized>(
    table: &ObservationTable,
    indicators: &IndicatorList,
    rng: &mut R,
) -> Vec<DeploymentRecord> {
    let codes: Vec<&str> = indicators.entries().iter().map(|e| e.species_code.as_str()).collect();
    let mut out = Vec::new();
    for o in table.observations() {
        let mut counts = vec![0u64; codes.len()];
        for _ in 0..o.a {
            counts[rng.random_range(0..codes.len())] += 1;
        }
        for (code, count) in codes.iter().zip(counts) {
            if count > 0 {
                out.push(DeploymentRecord {
                    site: o.site.clone(),
                    year: o.year,
                    station_id: o.station_id.clone(),
                    species_code: code.to_string(),
                    count,
                    usable: true,
                });
            }
        }
        out.push(DeploymentRecord {
            site: o.site.clone(),
            year: o.year,
            station_id: o.station_id.clone(),
            species_code: "OTHER".into(),
            count: rng.random_range(0..20),
            usable: true,
        });
    }
    out
}

/// Like [`to_deployment_records`], plus one extra deployment flagged unusable.
pub fn with_unusable_deployment<R: Rng + ?Sized>(
    mut records: Vec<DeploymentRecord>,
    rng: &mut R,
) -> Vec<DeploymentRecord> {
    let template = records.choose(rng).cloned();
    if let Some(mut r) = template {
        r.station_id = format!("{}-lost", r.station_id);
        r.usable = false;
        records.push(r);
    }
    records
}
