//! Negative-binomial multilevel abundance model.
//!
//! ```text
//! A   ~ NB(mu, phi)                      Var = mu + mu^2 / phi
//! ln mu = b0 + zB*sB + zS*sS + zY*sY + zSY*sSY  (+ b1 * x)
//! b0 ~ N(0, 1),  z* ~ N(0, 1),  s* ~ Gamma(2, rate 2),  phi ~ Gamma(2, rate 1)
//! ```
//!
//! The sampler works on an unconstrained vector: scales and `phi` enter on
//! the log scale and their Jacobians are part of the density.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{AggregatedObservation, ObservationTable};
use crate::error::{Error, Result};
use crate::sampler::LogDensity;

/// Linear predictors are clamped to this many natural-log units.
pub const ETA_CLAMP: f64 = 40.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this count, log-gamma and digamma differences are summed term by
/// term, which stays exact as `phi` grows large.
const SMALL_COUNT: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - HALF_LN_2PI
    }

    fn d_ln_pdf(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd)
    }
}

/// Prior on a positive scale. `PointMass` is only meaningful for simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalePrior {
    /// Gamma with shape and inverse scale (rate).
    Gamma { shape: f64, rate: f64 },
    PointMass { value: f64 },
}

impl ScalePrior {
    /// Log density of `log x` including the log-transform Jacobian, with its
    /// derivative with respect to `log x`.
    fn ln_pdf_log_scale(&self, log_x: f64) -> Result<(f64, f64)> {
        match *self {
            ScalePrior::Gamma { shape, rate } => {
                let x = log_x.exp();
                let lp = shape * rate.ln() - ln_gamma(shape) + shape * log_x - rate * x;
                Ok((lp, shape - rate * x))
            }
            ScalePrior::PointMass { .. } => Err(Error::Config(
                "point-mass scale priors cannot be used in a density".into(),
            )),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScalePrior::Gamma { shape, rate } => Gamma::new(shape, 1.0 / rate)
                .expect("validated gamma prior")
                .sample(rng),
            ScalePrior::PointMass { value } => value,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            ScalePrior::Gamma { shape, rate } => shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
            ScalePrior::PointMass { value } => value >= 0.0 && value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {what} prior {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub beta0: NormalPrior,
    /// Shared by the four deviation scales.
    pub sigma: ScalePrior,
    pub phi: ScalePrior,
    /// Only used by the before/after extension.
    pub beta1: NormalPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta0: NormalPrior { mean: 0.0, sd: 1.0 },
            sigma: ScalePrior::Gamma { shape: 2.0, rate: 2.0 },
            phi: ScalePrior::Gamma { shape: 2.0, rate: 1.0 },
            beta1: NormalPrior { mean: 0.0, sd: 1.0 },
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("beta0", self.beta0), ("beta1", self.beta1)] {
            if !(p.sd > 0.0 && p.sd.is_finite() && p.mean.is_finite()) {
                return Err(Error::Config(format!("invalid {name} prior {p:?}")));
            }
        }
        self.sigma.validate("sigma")?;
        self.phi.validate("phi")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    NegativeBinomial,
    /// The `phi -> infinity` limit; used for the dispersion check refit.
    Poisson,
}

/// Before/after dummy: `true` marks observations in the "after" state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeforeAfterExtension {
    pub after: Vec<bool>,
}

impl BeforeAfterExtension {
    /// Marks every observation from `year` onwards as "after".
    pub fn from_year(table: &ObservationTable, year: i32) -> Self {
        Self {
            after: table.observations().iter().map(|o| o.year >= year).collect(),
        }
    }
}

/// Constrained-space parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub beta0: f64,
    pub zeta_b: Vec<f64>,
    pub zeta_s: Vec<f64>,
    pub zeta_y: Vec<f64>,
    pub zeta_sy: Vec<f64>,
    pub sigma_b: f64,
    pub sigma_s: f64,
    pub sigma_y: f64,
    pub sigma_sy: f64,
    /// `f64::INFINITY` under the Poisson likelihood.
    pub phi: f64,
    pub beta1: Option<f64>,
}

impl ModelParameters {
    /// All standardized effects zero, unit scales.
    pub fn zeros(table: &ObservationTable) -> Self {
        Self {
            beta0: 0.0,
            zeta_b: vec![0.0; table.stations().len()],
            zeta_s: vec![0.0; table.sites().len()],
            zeta_y: vec![0.0; table.years().len()],
            zeta_sy: vec![0.0; table.site_year_pairs().len()],
            sigma_b: 1.0,
            sigma_s: 1.0,
            sigma_y: 1.0,
            sigma_sy: 1.0,
            phi: 1.0,
            beta1: None,
        }
    }

    pub fn delta_b(&self) -> Vec<f64> {
        self.zeta_b.iter().map(|z| z * self.sigma_b).collect()
    }

    pub fn delta_s(&self) -> Vec<f64> {
        self.zeta_s.iter().map(|z| z * self.sigma_s).collect()
    }

    pub fn delta_y(&self) -> Vec<f64> {
        self.zeta_y.iter().map(|z| z * self.sigma_y).collect()
    }

    pub fn delta_sy(&self) -> Vec<f64> {
        self.zeta_sy.iter().map(|z| z * self.sigma_sy).collect()
    }

    fn check_shape(&self, table: &ObservationTable) -> Result<()> {
        if self.zeta_b.len() != table.stations().len()
            || self.zeta_s.len() != table.sites().len()
            || self.zeta_y.len() != table.years().len()
            || self.zeta_sy.len() != table.site_year_pairs().len()
        {
            return Err(Error::Domain("parameter blocks do not match the table indices".into()));
        }
        Ok(())
    }
}

/// Unconstrained coordinate layout:
/// `beta0, zeta_B.., zeta_S.., zeta_Y.., zeta_SY.., ln sB, ln sS, ln sY, ln sSY, [ln phi], [beta1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub n_station: usize,
    pub n_site: usize,
    pub n_year: usize,
    pub n_site_year: usize,
    pub likelihood: Likelihood,
    pub has_beta1: bool,
    pub names: Vec<String>,
}

impl ParameterLayout {
    pub fn new(table: &ObservationTable, likelihood: Likelihood, has_beta1: bool) -> Self {
        let mut names = vec!["beta0".to_string()];
        names.extend(table.stations().iter().map(|s| format!("zeta_B[{s}]")));
        names.extend(table.sites().iter().map(|s| format!("zeta_S[{s}]")));
        names.extend(table.years().iter().map(|y| format!("zeta_Y[{y}]")));
        names.extend(
            table
                .site_year_pairs()
                .iter()
                .map(|(s, y)| format!("zeta_SY[{s}:{y}]")),
        );
        names.extend(["sigma_B", "sigma_S", "sigma_Y", "sigma_SY"].map(String::from));
        if likelihood == Likelihood::NegativeBinomial {
            names.push("phi".into());
        }
        if has_beta1 {
            names.push("beta1".into());
        }
        Self {
            n_station: table.stations().len(),
            n_site: table.sites().len(),
            n_year: table.years().len(),
            n_site_year: table.site_year_pairs().len(),
            likelihood,
            has_beta1,
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    fn zeta_b_offset(&self) -> usize {
        1
    }
    fn zeta_s_offset(&self) -> usize {
        1 + self.n_station
    }
    fn zeta_y_offset(&self) -> usize {
        self.zeta_s_offset() + self.n_site
    }
    fn zeta_sy_offset(&self) -> usize {
        self.zeta_y_offset() + self.n_year
    }
    fn scale_offset(&self) -> usize {
        self.zeta_sy_offset() + self.n_site_year
    }
    fn phi_offset(&self) -> Option<usize> {
        (self.likelihood == Likelihood::NegativeBinomial).then(|| self.scale_offset() + 4)
    }
    fn beta1_offset(&self) -> Option<usize> {
        self.has_beta1.then(|| self.dim() - 1)
    }

    /// Index of a named column.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Maps an unconstrained vector to parameters.
    pub fn constrain(&self, theta: &[f64]) -> ModelParameters {
        let row = self.to_constrained_row(theta);
        self.params_from_row(&row)
    }

    /// Exponentiates log-scale coordinates; output ordered like `names`.
    pub fn to_constrained_row(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim());
        let mut row = theta.to_vec();
        let end = self.scale_offset() + 4 + usize::from(self.phi_offset().is_some());
        for v in &mut row[self.scale_offset()..end] {
            *v = v.exp();
        }
        row
    }

    /// Builds parameters from a constrained row ordered like `names`.
    pub fn params_from_row(&self, row: &[f64]) -> ModelParameters {
        assert_eq!(row.len(), self.dim());
        let block = |off: usize, n: usize| row[off..off + n].to_vec();
        let so = self.scale_offset();
        ModelParameters {
            beta0: row[0],
            zeta_b: block(self.zeta_b_offset(), self.n_station),
            zeta_s: block(self.zeta_s_offset(), self.n_site),
            zeta_y: block(self.zeta_y_offset(), self.n_year),
            zeta_sy: block(self.zeta_sy_offset(), self.n_site_year),
            sigma_b: row[so],
            sigma_s: row[so + 1],
            sigma_y: row[so + 2],
            sigma_sy: row[so + 3],
            phi: self.phi_offset().map_or(f64::INFINITY, |o| row[o]),
            beta1: self.beta1_offset().map(|o| row[o]),
        }
    }

    pub fn unconstrain(&self, p: &ModelParameters) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        theta.push(p.beta0);
        theta.extend(&p.zeta_b);
        theta.extend(&p.zeta_s);
        theta.extend(&p.zeta_y);
        theta.extend(&p.zeta_sy);
        theta.extend([p.sigma_b.ln(), p.sigma_s.ln(), p.sigma_y.ln(), p.sigma_sy.ln()]);
        if self.phi_offset().is_some() {
            theta.push(p.phi.ln());
        }
        if self.has_beta1 {
            theta.push(p.beta1.unwrap_or(0.0));
        }
        assert_eq!(theta.len(), self.dim(), "parameters do not match layout");
        theta
    }
}

fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Gamma(y + phi) - ln Gamma(phi)`.
fn ln_gamma_ratio(y: u64, phi: f64) -> f64 {
    if y <= SMALL_COUNT {
        (0..y).map(|k| (phi + k as f64).ln()).sum()
    } else {
        ln_gamma(y as f64 + phi) - ln_gamma(phi)
    }
}

/// `digamma(y + phi) - digamma(phi)`.
fn digamma_diff(y: u64, phi: f64) -> f64 {
    if y <= SMALL_COUNT {
        (0..y).map(|k| 1.0 / (phi + k as f64)).sum()
    } else {
        digamma(y as f64 + phi) - digamma(phi)
    }
}

pub(crate) fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// Negative-binomial log pmf in mean/shape form.
pub fn nb_log_pmf(y: u64, mu: f64, phi: f64) -> Result<f64> {
    if !(mu.is_finite() && mu > 0.0) || !(phi > 0.0) || phi.is_nan() {
        return Err(Error::Domain(format!("nb_log_pmf needs mu > 0 and phi > 0, got mu={mu} phi={phi}")));
    }
    if phi.is_infinite() {
        return Ok(poisson_terms(y, mu.ln(), ln_factorial(y)).0);
    }
    Ok(nb_terms(y, mu.ln(), phi, ln_factorial(y)).0)
}

/// NB log pmf at log-mean `eta`, with derivatives w.r.t. `eta` and `phi`.
#[inline]
fn nb_terms(y: u64, eta: f64, phi: f64, ln_fact: f64) -> (f64, f64, f64) {
    let yf = y as f64;
    let ln_phi = phi.ln();
    let x = eta - ln_phi;
    let s = softplus(x);
    let p = logistic(x); // mu / (phi + mu)
    let lp = ln_gamma_ratio(y, phi) - ln_fact - phi * s + yf * (x - s);
    let d_eta = yf - (yf + phi) * p;
    let d_phi = digamma_diff(y, phi) - s + p - yf * (1.0 - p) / phi;
    (lp, d_eta, d_phi)
}

#[inline]
fn poisson_terms(y: u64, eta: f64, ln_fact: f64) -> (f64, f64) {
    let mu = eta.exp();
    (y as f64 * eta - mu - ln_fact, y as f64 - mu)
}

/// `ln mu` for observation `obs` (without any before/after shift).
pub fn linear_predictor(params: &ModelParameters, obs: usize, table: &ObservationTable) -> f64 {
    let d = table.design()[obs];
    params.beta0
        + params.zeta_b[d.station] * params.sigma_b
        + params.zeta_s[d.site] * params.sigma_s
        + params.zeta_y[d.year] * params.sigma_y
        + params.zeta_sy[d.site_year] * params.sigma_sy
}

/// Log posterior and gradient of the multilevel model over one table.
#[derive(Debug, Clone)]
pub struct HierarchicalModel<'a> {
    table: &'a ObservationTable,
    priors: PriorConfig,
    extension: Option<&'a BeforeAfterExtension>,
    layout: ParameterLayout,
    ln_fact: Vec<f64>,
}

impl<'a> HierarchicalModel<'a> {
    pub fn new(
        table: &'a ObservationTable,
        priors: PriorConfig,
        likelihood: Likelihood,
        extension: Option<&'a BeforeAfterExtension>,
    ) -> Result<Self> {
        priors.validate()?;
        for p in [priors.sigma].into_iter().chain((likelihood == Likelihood::NegativeBinomial).then_some(priors.phi)) {
            if matches!(p, ScalePrior::PointMass { .. }) {
                return Err(Error::Config("point-mass priors cannot be fitted".into()));
            }
        }
        if let Some(ext) = extension {
            if ext.after.len() != table.len() {
                return Err(Error::Config(format!(
                    "before/after vector has {} entries for {} observations",
                    ext.after.len(),
                    table.len()
                )));
            }
        }
        Ok(Self {
            table,
            priors,
            extension,
            layout: ParameterLayout::new(table, likelihood, extension.is_some()),
            ln_fact: table.responses().map(ln_factorial).collect(),
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn table(&self) -> &ObservationTable {
        self.table
    }

    /// Log density; gradient written into `grad` when given.
    fn evaluate(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        debug_assert_eq!(theta.len(), l.dim());
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let zb = &theta[l.zeta_b_offset()..l.zeta_s_offset()];
        let zs = &theta[l.zeta_s_offset()..l.zeta_y_offset()];
        let zy = &theta[l.zeta_y_offset()..l.zeta_sy_offset()];
        let zsy = &theta[l.zeta_sy_offset()..l.scale_offset()];
        let so = l.scale_offset();
        let log_sigma = [theta[so], theta[so + 1], theta[so + 2], theta[so + 3]];
        let sigma = log_sigma.map(f64::exp);
        let phi_off = l.phi_offset();
        let phi = phi_off.map(|o| theta[o].exp());
        let beta1 = l.beta1_offset().map(|o| theta[o]);

        let mut lp = 0.0;
        // Accumulators for d/d(eta) pulled back onto each coordinate.
        let mut d_beta0 = 0.0;
        let mut d_log_sigma = [0.0; 4];
        let mut d_phi = 0.0;
        let mut d_beta1 = 0.0;

        for (i, (d, obs)) in self.table.design().iter().zip(self.table.observations()).enumerate() {
            let db = zb[d.station] * sigma[0];
            let ds = zs[d.site] * sigma[1];
            let dy = zy[d.year] * sigma[2];
            let dsy = zsy[d.site_year] * sigma[3];
            let shifted = beta1.is_some() && self.extension.is_some_and(|e| e.after[i]);
            let raw = theta[0] + db + ds + dy + dsy + if shifted { beta1.unwrap() } else { 0.0 };
            let eta = raw.clamp(-ETA_CLAMP, ETA_CLAMP);
            let clamped = eta != raw;
            let (term, d_eta) = match phi {
                Some(phi) => {
                    let (term, d_eta, dp) = nb_terms(obs.a, eta, phi, self.ln_fact[i]);
                    d_phi += dp;
                    (term, d_eta)
                }
                None => poisson_terms(obs.a, eta, self.ln_fact[i]),
            };
            lp += term;
            if grad.is_none() || clamped {
                continue;
            }
            let g = grad.as_deref_mut().unwrap();
            d_beta0 += d_eta;
            g[l.zeta_b_offset() + d.station] += d_eta * sigma[0];
            g[l.zeta_s_offset() + d.site] += d_eta * sigma[1];
            g[l.zeta_y_offset() + d.year] += d_eta * sigma[2];
            g[l.zeta_sy_offset() + d.site_year] += d_eta * sigma[3];
            d_log_sigma[0] += d_eta * db;
            d_log_sigma[1] += d_eta * ds;
            d_log_sigma[2] += d_eta * dy;
            d_log_sigma[3] += d_eta * dsy;
            if shifted {
                d_beta1 += d_eta;
            }
        }

        // Priors.
        lp += self.priors.beta0.ln_pdf(theta[0]);
        d_beta0 += self.priors.beta0.d_ln_pdf(theta[0]);
        let std_normal = NormalPrior { mean: 0.0, sd: 1.0 };
        for (k, &z) in theta[1..so].iter().enumerate() {
            lp += std_normal.ln_pdf(z);
            if let Some(g) = grad.as_deref_mut() {
                g[1 + k] -= z;
            }
        }
        for (k, &ls) in log_sigma.iter().enumerate() {
            let (p, dp) = self.priors.sigma.ln_pdf_log_scale(ls).expect("validated prior");
            lp += p;
            d_log_sigma[k] += dp;
        }
        let mut d_log_phi = 0.0;
        if let (Some(o), Some(phi)) = (phi_off, phi) {
            let (p, dp) = self.priors.phi.ln_pdf_log_scale(theta[o]).expect("validated prior");
            lp += p;
            d_log_phi = d_phi * phi + dp;
        }
        if let Some(b1) = beta1 {
            lp += self.priors.beta1.ln_pdf(b1);
            d_beta1 += self.priors.beta1.d_ln_pdf(b1);
        }

        if let Some(g) = grad {
            g[0] = d_beta0;
            for k in 0..4 {
                g[so + k] = d_log_sigma[k];
            }
            if let Some(o) = phi_off {
                g[o] = d_log_phi;
            }
            if let Some(o) = l.beta1_offset() {
                g[o] = d_beta1;
            }
        }
        lp
    }

    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.layout.dim() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("theta must be finite and match the layout".into()));
        }
        let lp = self.evaluate(theta, None);
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(Error::Target(format!("non-finite log density {lp}")))
        }
    }

    pub fn grad_log_posterior(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.layout.dim() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("theta must be finite and match the layout".into()));
        }
        let mut g = vec![0.0; theta.len()];
        let lp = self.evaluate(theta, Some(&mut g));
        if lp.is_finite() && g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::Target("non-finite gradient".into()))
        }
    }
}

impl LogDensity for HierarchicalModel<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(theta, Some(grad))
    }
}

/// Log posterior of the negative-binomial model at `theta`.
pub fn log_posterior(
    theta: &[f64],
    table: &ObservationTable,
    priors: &PriorConfig,
    extension: Option<&BeforeAfterExtension>,
) -> Result<f64> {
    HierarchicalModel::new(table, *priors, Likelihood::NegativeBinomial, extension)?.log_posterior(theta)
}

pub fn grad_log_posterior(
    theta: &[f64],
    table: &ObservationTable,
    priors: &PriorConfig,
    extension: Option<&BeforeAfterExtension>,
) -> Result<Vec<f64>> {
    HierarchicalModel::new(table, *priors, Likelihood::NegativeBinomial, extension)?.grad_log_posterior(theta)
}

/// Draws one NB(mu, phi) count as a gamma-Poisson mixture.
/// `phi = inf` draws from the Poisson directly.
pub fn sample_nb<R: Rng + ?Sized>(mu: f64, phi: f64, rng: &mut R) -> u64 {
    let lambda = if phi.is_infinite() {
        mu
    } else {
        Gamma::new(phi, mu / phi).expect("positive gamma parameters").sample(rng)
    };
    sample_poisson(lambda, rng)
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    // rand_distr rejects lambda at or above ~1.8e19; such draws are unreachable
    // under the eta clamp except through extreme gamma tails.
    let lambda = lambda.min(1e15);
    if !(lambda > 0.0) {
        return 0;
    }
    Poisson::new(lambda).expect("positive lambda").sample(rng) as u64
}

/// Replicated responses for one parameter draw at the table's design points.
/// A before/after extension shifts the flagged rows by `beta1`.
pub fn posterior_predictive_sample<R: Rng + ?Sized>(
    draw: &ModelParameters,
    table: &ObservationTable,
    extension: Option<&BeforeAfterExtension>,
    rng: &mut R,
) -> Result<Vec<u64>> {
    draw.check_shape(table)?;
    Ok((0..table.len())
        .map(|i| {
            let mut eta = linear_predictor(draw, i, table);
            if let (Some(ext), Some(b1)) = (extension, draw.beta1) {
                if ext.after[i] {
                    eta += b1;
                }
            }
            let mu = eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp();
            sample_nb(mu, draw.phi, rng)
        })
        .collect())
}

/// Fitted means `mu_i` for one draw.
pub fn fitted_means(draw: &ModelParameters, table: &ObservationTable) -> Vec<f64> {
    (0..table.len())
        .map(|i| linear_predictor(draw, i, table).clamp(-ETA_CLAMP, ETA_CLAMP).exp())
        .collect()
}

/// Parameters drawn from the priors plus a dataset simulated from them.
#[derive(Debug, Clone)]
pub struct PriorPredictive {
    pub params: ModelParameters,
    pub table: ObservationTable,
}

/// Draws parameters from `priors` and simulates responses at `shape`'s design.
pub fn prior_predictive_sample<R: Rng + ?Sized>(
    shape: &ObservationTable,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<PriorPredictive> {
    priors.validate()?;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = |k: usize, rng: &mut R| -> Vec<f64> { (0..k).map(|_| std_normal.sample(rng)).collect() };
    let beta0 = Normal::new(priors.beta0.mean, priors.beta0.sd).unwrap().sample(rng);
    let zeta_b = n(shape.stations().len(), rng);
    let zeta_s = n(shape.sites().len(), rng);
    let zeta_y = n(shape.years().len(), rng);
    let zeta_sy = n(shape.site_year_pairs().len(), rng);
    let params = ModelParameters {
        beta0,
        zeta_b,
        zeta_s,
        zeta_y,
        zeta_sy,
        sigma_b: priors.sigma.sample(rng),
        sigma_s: priors.sigma.sample(rng),
        sigma_y: priors.sigma.sample(rng),
        sigma_sy: priors.sigma.sample(rng),
        phi: priors.phi.sample(rng),
        beta1: None,
    };
    let a = posterior_predictive_sample(&params, shape, None, rng)?;
    Ok(PriorPredictive {
        table: shape.with_responses(&a),
        params,
    })
}

/// Builds a table from bare design points with zero responses.
pub fn design_table(points: &[(String, i32, String)]) -> Result<ObservationTable> {
    ObservationTable::from_observations(
        points
            .iter()
            .map(|(site, year, station)| AggregatedObservation {
                site: site.clone(),
                year: *year,
                station_id: station.clone(),
                a: 0,
            })
            .collect(),
    )
}
