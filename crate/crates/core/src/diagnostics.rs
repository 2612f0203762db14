//! Convergence and fit diagnostics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::ObservationTable;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::{fitted_means, posterior_predictive_sample, Likelihood, PriorConfig};
use crate::sampler::{fit_model_with, SamplerConfig};

/// Name recognized by [`summary_table`] for the exponentiated intercept.
pub const EXP_BETA0: &str = "exp(beta0)";

/// Summary rows in the order of the published estimates table.
pub const TABLE_PARAMETERS: [&str; 6] = [EXP_BETA0, "sigma_S", "sigma_Y", "sigma_SY", "sigma_B", "phi"];

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n - 1 denominator); zero for fewer than two values.
fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Split-chain potential scale reduction.
///
/// Each chain is cut into two halves (the middle draw of an odd-length chain
/// is dropped); chains are first trimmed to the shortest length.
/// Returns NaN when every half has zero variance.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::TooFewDraws { needed: 2, got: chains.len() });
    }
    let n_min = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n_min < 4 {
        return Err(Error::TooFewDraws { needed: 4, got: n_min });
    }
    let half = n_min / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..n_min];
        halves.push(&c[..half]);
        halves.push(&c[n_min - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| variance(h)).collect::<Vec<_>>());
    let b = n * variance(&means);
    if w <= 0.0 {
        log::warn!("split R-hat undefined: zero within-chain variance");
        return Ok(f64::NAN);
    }
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// Highest-density interval: the shortest window over the sorted draws that
/// holds `ceil(mass * n)` values, lowest start winning ties.
pub fn hdi(draws: &[f64], mass: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::Config(format!("HDI mass must lie in (0, 1), got {mass}")));
    }
    let n = draws.len();
    if n < 20 {
        return Err(Error::TooFewDraws { needed: 20, got: n });
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against 0.95 * 100 landing a hair above 95.
    let k = ((mass * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for i in 0..=(n - k) {
        let width = sorted[i + k - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = i;
        }
    }
    Ok((sorted[best], sorted[best + k - 1]))
}

/// `V_fit / (V_fit + V_res)` from fitted means and the NB shape.
pub fn r2_from_means(mu: &[f64], phi: f64) -> f64 {
    let v_fit = variance(mu);
    let v_res = mu.iter().map(|m| if phi.is_infinite() { *m } else { m + m * m / phi }).sum::<f64>() / mu.len() as f64;
    v_fit / (v_fit + v_res)
}

/// Bayesian R-squared, one value per pooled draw.
pub fn bayes_r2(draws: &PosteriorDraws, table: &ObservationTable) -> Result<Vec<f64>> {
    Ok(draws
        .iter_params()?
        .map(|p| r2_from_means(&fitted_means(&p, table), p.phi))
        .collect())
}

/// Fold variation `e^(2 sigma)` per draw.
pub fn variance_fold(sigma_draws: &[f64]) -> Vec<f64> {
    sigma_draws.iter().map(|s| (2.0 * s).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionPair {
    pub observation: usize,
    pub observed: u64,
    pub mean_prediction: f64,
}

/// Posterior predictive tables ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpcReport {
    pub pairs: Vec<PredictionPair>,
    /// Histogram bin edges, `bins.len() == densities + 1`.
    pub bin_edges: Vec<f64>,
    pub observed_density: Vec<f64>,
    /// One histogram density row per replicate.
    pub replicate_densities: Vec<Vec<f64>>,
    pub replicate_means: Vec<f64>,
    pub observed_mean: f64,
}

fn histogram(values: &[u64], edges: &[f64]) -> Vec<f64> {
    let width = edges[1] - edges[0];
    let mut counts = vec![0.0; edges.len() - 1];
    let last = counts.len() - 1;
    for &v in values {
        let b = ((v as f64 - edges[0]) / width).floor() as usize;
        counts[b.min(last)] += 1.0;
    }
    let scale = 1.0 / (values.len() as f64 * width);
    counts.iter().map(|c| c * scale).collect()
}

/// Replicated datasets from randomly chosen posterior draws. Replicate `r`
/// uses its own ChaCha stream derived from one seed drawn from `rng`.
pub fn ppc_summary<R: Rng + ?Sized>(
    draws: &PosteriorDraws,
    table: &ObservationTable,
    rng: &mut R,
    n_rep: usize,
) -> Result<PpcReport> {
    if n_rep < 100 {
        return Err(Error::Config(format!("n_rep must be at least 100, got {n_rep}")));
    }
    if draws.n_draws() == 0 || table.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, got: 0 });
    }
    let base_seed: u64 = rng.random();
    let n_draws = draws.n_draws();
    let replicates: Vec<Vec<u64>> = (0..n_rep)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(r as u64);
            let params = draws.params(rng.random_range(0..n_draws))?;
            posterior_predictive_sample(&params, table, None, &mut rng)
        })
        .collect::<Result<_>>()?;

    let observed: Vec<u64> = table.responses().collect();
    let max = replicates
        .iter()
        .flatten()
        .chain(&observed)
        .copied()
        .max()
        .unwrap_or(0);
    let n_bins = 30u64;
    let width = ((max + 1) as f64 / n_bins as f64).ceil().max(1.0);
    let bin_edges: Vec<f64> = (0..=n_bins).map(|b| b as f64 * width).collect();

    let n_obs = observed.len();
    let pairs = (0..n_obs)
        .map(|i| PredictionPair {
            observation: i,
            observed: observed[i],
            mean_prediction: replicates.iter().map(|r| r[i] as f64).sum::<f64>() / n_rep as f64,
        })
        .collect();
    let as_f64 = |v: &[u64]| mean(&v.iter().map(|&a| a as f64).collect::<Vec<_>>());
    Ok(PpcReport {
        pairs,
        observed_density: histogram(&observed, &bin_edges),
        replicate_densities: replicates.iter().map(|r| histogram(r, &bin_edges)).collect(),
        replicate_means: replicates.iter().map(|r| as_f64(r)).collect(),
        observed_mean: as_f64(&observed),
        bin_edges,
    })
}

impl PpcReport {
    pub fn write_pairs_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io("<ppc pairs>", e))?;
        Ok(())
    }

    /// Long format: `series,bin_lo,bin_hi,density`; series is `observed`
    /// or `rep<k>`.
    pub fn write_density_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["series", "bin_lo", "bin_hi", "density"])?;
        let series = std::iter::once(("observed".to_string(), &self.observed_density)).chain(
            self.replicate_densities
                .iter()
                .enumerate()
                .map(|(k, d)| (format!("rep{k}"), d)),
        );
        for (name, dens) in series {
            for (b, d) in dens.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    self.bin_edges[b].to_string(),
                    self.bin_edges[b + 1].to_string(),
                    d.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<ppc density>", e))?;
        Ok(())
    }
}

/// Variance-to-mean ratio; zero for an all-zero or constant dataset.
pub fn dispersion_statistic(values: &[u64]) -> f64 {
    let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let m = mean(&x);
    if m <= 0.0 {
        return 0.0;
    }
    variance(&x) / m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub observed: f64,
    pub simulated_mean: f64,
    pub simulated_q025: f64,
    pub simulated_q500: f64,
    pub simulated_q975: f64,
    pub n_sim: usize,
    /// Two-sided rank p-value.
    pub p_value: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Compares an observed statistic with simulated ones; ranks are counted
/// with the usual `+1` correction on both tails.
pub fn rank_p_value(observed: f64, simulated: &[f64]) -> f64 {
    let n = simulated.len() as f64;
    let ge = simulated.iter().filter(|&&s| s >= observed).count() as f64;
    let le = simulated.iter().filter(|&&s| s <= observed).count() as f64;
    (2.0 * ((ge + 1.0) / (n + 1.0)).min((le + 1.0) / (n + 1.0))).min(1.0)
}

/// Refits the data under a Poisson likelihood and checks whether the observed
/// variance-to-mean ratio is plausible under that fit.
pub fn dispersion_check<R: Rng + ?Sized>(
    table: &ObservationTable,
    priors: &PriorConfig,
    config: &SamplerConfig,
    n_sim: usize,
    rng: &mut R,
) -> Result<DispersionReport> {
    if n_sim == 0 {
        return Err(Error::Config("n_sim must be positive".into()));
    }
    let fit = fit_model_with(table, priors, Likelihood::Poisson, config, None)?;
    let observed = dispersion_statistic(&table.responses().collect::<Vec<_>>());
    let base_seed: u64 = rng.random();
    let n_draws = fit.n_draws();
    let mut simulated: Vec<f64> = (0..n_sim)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(r as u64);
            let params = fit.params(rng.random_range(0..n_draws))?;
            let rep = posterior_predictive_sample(&params, table, None, &mut rng)?;
            Ok(dispersion_statistic(&rep))
        })
        .collect::<Result<_>>()?;
    let p_value = rank_p_value(observed, &simulated);
    simulated.sort_by(f64::total_cmp);
    Ok(DispersionReport {
        observed,
        simulated_mean: mean(&simulated),
        simulated_q025: quantile(&simulated, 0.025),
        simulated_q500: quantile(&simulated, 0.5),
        simulated_q975: quantile(&simulated, 0.975),
        n_sim,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub hdi_lower: f64,
    pub hdi_upper: f64,
    pub rhat: f64,
}

/// Mean, sd, 95% HDI and split R-hat per parameter. [`EXP_BETA0`] is
/// summarized from exponentiated `beta0` draws.
pub fn summary_table(draws: &PosteriorDraws, params: &[&str]) -> Result<Vec<SummaryRow>> {
    params
        .iter()
        .map(|&name| {
            let chains = if name == EXP_BETA0 {
                draws
                    .chain_columns("beta0")?
                    .into_iter()
                    .map(|c| c.into_iter().map(f64::exp).collect())
                    .collect()
            } else {
                draws.chain_columns(name)?
            };
            let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
            let (hdi_lower, hdi_upper) = hdi(&pooled, 0.95)?;
            Ok(SummaryRow {
                parameter: name.to_string(),
                mean: mean(&pooled),
                sd: variance(&pooled).sqrt(),
                hdi_lower,
                hdi_upper,
                rhat: split_rhat(&chains).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Every column of the draws with its split R-hat.
pub fn rhat_listing(draws: &PosteriorDraws) -> Result<Vec<(String, f64)>> {
    draws
        .names
        .iter()
        .map(|n| Ok((n.clone(), split_rhat(&draws.chain_columns(n)?).unwrap_or(f64::NAN))))
        .collect()
}

pub const SUMMARY_HEADER: [&str; 6] = ["Parameter", "Mean", "S.D.", "L-95% HDI", "U-95% HDI", "Rhat"];

pub fn write_summary_csv(rows: &[SummaryRow], w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            format!("{:.4}", r.mean),
            format!("{:.4}", r.sd),
            format!("{:.4}", r.hdi_lower),
            format!("{:.4}", r.hdi_upper),
            format!("{:.4}", r.rhat),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

pub fn format_summary_text(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>7}\n",
        SUMMARY_HEADER[0], SUMMARY_HEADER[1], SUMMARY_HEADER[2], SUMMARY_HEADER[3], SUMMARY_HEADER[4], SUMMARY_HEADER[5]
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>7.3}\n",
            r.parameter, r.mean, r.sd, r.hdi_lower, r.hdi_upper, r.rhat
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draws::{ChainDraws, DrawDiagnostics};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Exp, StandardNormal};

    fn normal_fixture(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); shift + z }).collect::<Vec<f64>>()
    }

    /// Plain split-R-hat written out independently of `split_rhat`.
    fn rhat_by_hand(chains: &[Vec<f64>]) -> f64 {
        let mut parts = Vec::new();
        for c in chains {
            let h = c.len() / 2;
            parts.push(c[..h].to_vec());
            parts.push(c[c.len() - h..].to_vec());
        }
        let n = parts[0].len() as f64;
        let m = parts.len() as f64;
        let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / m;
        let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
        let w = parts
            .iter()
            .zip(&means)
            .map(|(p, mu)| p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    }

    #[test]
    fn rhat_with_zero_between_variance() {
        let c = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let r = split_rhat(&[c.clone(), c]).unwrap();
        assert!((r - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let chains = vec![normal_fixture(1, 100, 0.0), normal_fixture(2, 100, 5.0)];
        let expected = rhat_by_hand(&chains);
        let r = split_rhat(&chains).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!(r > 1.5, "{r}");
    }

    #[test]
    fn rhat_well_mixed() {
        let chains: Vec<_> = (0..4).map(|k| normal_fixture(10 + k, 2500, 0.0)).collect();
        assert!(split_rhat(&chains).unwrap() <= 1.01);
    }

    #[test]
    fn rhat_errors_and_nan() {
        assert!(split_rhat(&[vec![1.0; 10]]).is_err());
        assert!(split_rhat(&[vec![1.0; 3], vec![1.0; 3]]).is_err());
        assert!(split_rhat(&[vec![2.0; 10], vec![2.0; 10]]).unwrap().is_nan());
    }

    #[test]
    fn hdi_ties_break_low() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(hdi(&d, 0.95).unwrap(), (1.0, 95.0));
        assert!(hdi(&d[..10], 0.95).is_err());
    }

    #[test]
    fn hdi_of_normal_and_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = hdi(&d, 0.95).unwrap();
        assert!((lo + 1.959_964).abs() < 0.02 && (hi - 1.959_964).abs() < 0.02, "{lo} {hi}");
        let e = Exp::new(1.0).unwrap();
        let d: Vec<f64> = (0..1_000_000).map(|_| e.sample(&mut rng)).collect();
        let (lo, hi) = hdi(&d, 0.95).unwrap();
        assert!(lo < 0.01 && (hi - 20f64.ln()).abs() < 0.03, "{lo} {hi}");
    }

    #[test]
    fn variance_fold_values() {
        let v = variance_fold(&[0.22, 0.0, 1.13]);
        assert!((v[0] - 1.552_707).abs() < 1e-5);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 9.58).abs() < 0.01);
    }

    #[test]
    fn r2_limits() {
        // Means 1..=n give a known fitted variance; pick phi so V_res
        // hits a target ratio.
        let mu = [2.0, 6.0];
        // V_fit = 8, V_res = 4 + (4 + 36)/(2 phi); phi = 20 -> V_res = 5.
        assert!((r2_from_means(&mu, 20.0) - 8.0 / 13.0).abs() < 1e-12);
        assert_eq!(r2_from_means(&[5.0; 10], 1e12), 0.0);
        let r = r2_from_means(&[1e-4, 1e3], f64::INFINITY);
        assert!(r > 0.99);
    }

    #[test]
    fn r2_constructed_ratio() {
        // mu = m +/- d with Poisson residual: V_fit = 2 d^2 (n=2), V_res = m.
        let m = 6.2;
        let d = (3.8f64 / 2.0).sqrt();
        let r = r2_from_means(&[m - d, m + d], f64::INFINITY);
        assert!((r - 0.38).abs() < 1e-12, "{r}");
    }

    #[test]
    fn dispersion_statistic_degenerate() {
        assert_eq!(dispersion_statistic(&[4, 4, 4]), 0.0);
        assert_eq!(dispersion_statistic(&[0, 0]), 0.0);
        assert!(rank_p_value(10.0, &[1.0, 2.0, 3.0]) <= 0.5);
    }

    fn draws_from(cols: Vec<(&str, Vec<Vec<f64>>)>) -> PosteriorDraws {
        let n_chains = cols[0].1.len();
        let n = cols[0].1[0].len();
        let chains = (0..n_chains)
            .map(|c| ChainDraws {
                rows: (0..n).map(|i| cols.iter().map(|(_, v)| v[c][i]).collect()).collect(),
                diagnostics: vec![
                    DrawDiagnostics {
                        divergent: false,
                        treedepth: 1,
                        n_leapfrog: 1,
                        accept_stat: 1.0,
                        energy: 0.0,
                        step_size: 1.0
                    };
                    n
                ],
            })
            .collect();
        PosteriorDraws {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            chains,
            config: SamplerConfig::default(),
            layout: None,
        }
    }

    #[test]
    fn summary_of_constant_column() {
        let d = draws_from(vec![("phi", vec![vec![2.5; 50], vec![2.5; 50]])]);
        let rows = summary_table(&d, &["phi"]).unwrap();
        assert_eq!(rows[0].mean, 2.5);
        assert_eq!(rows[0].sd, 0.0);
        assert_eq!((rows[0].hdi_lower, rows[0].hdi_upper), (2.5, 2.5));
        assert!(rows[0].rhat.is_nan());
        assert!(matches!(summary_table(&d, &["nope"]), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn exp_beta0_summarized_from_transformed_draws() {
        let b0: Vec<f64> = (0..100).map(|i| f64::from(i) / 25.0).collect();
        let d = draws_from(vec![("beta0", vec![b0.clone(), b0.clone()])]);
        let rows = summary_table(&d, &[EXP_BETA0]).unwrap();
        let expected = b0.iter().map(|v| v.exp()).sum::<f64>() / 100.0;
        assert!((rows[0].mean - expected).abs() < 1e-12);
        // Exponentiating the mean would be much smaller on this skewed fixture.
        assert!(rows[0].mean > (b0.iter().sum::<f64>() / 100.0).exp() * 1.5);
    }

    #[test]
    fn summary_csv_header_order() {
        let d = draws_from(vec![("beta0", vec![vec![0.1; 30], vec![0.2; 30]])]);
        let rows = summary_table(&d, &[EXP_BETA0]).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("Parameter,Mean,S.D.,L-95% HDI,U-95% HDI,Rhat\n"));
        assert!(format_summary_text(&rows).contains("exp(beta0)"));
    }

    proptest! {
        #[test]
        fn rhat_affine_invariant(seed in any::<u64>(), a in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64], b in -10.0..10.0f64) {
            let chains: Vec<Vec<f64>> = (0..3).map(|k| normal_fixture(seed.wrapping_add(k), 40, k as f64 * 0.3)).collect();
            let moved: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| a * x + b).collect()).collect();
            let r1 = split_rhat(&chains).unwrap();
            let r2 = split_rhat(&moved).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-9);
        }

        #[test]
        fn variance_fold_monotone(mut s in prop::collection::vec(0.0..3.0f64, 2..50)) {
            s.sort_by(f64::total_cmp);
            let f = variance_fold(&s);
            prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn r2_in_unit_interval(mu in prop::collection::vec(0.01..100.0f64, 2..40), phi in 0.1..100.0f64) {
            let r = r2_from_means(&mu, phi);
            let spread = mu.iter().any(|m| (m - mu[0]).abs() > 1e-9);
            if spread {
                prop_assert!(r > 0.0 && r < 1.0);
            }
        }
    }
}
