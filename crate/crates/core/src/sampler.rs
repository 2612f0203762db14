//! No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
//! step size adaptation and a windowed diagonal mass matrix.
//!
//! The transition follows the multinomial variant with the generalized
//! (momentum-sum) U-turn criterion, including the extra checks across merged
//! subtrees. Each chain owns a ChaCha stream selected by its index, so
//! chain `k` depends only on `(seed, k)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::draws::{ChainDraws, DrawDiagnostics, PosteriorDraws};
use crate::error::{Error, Result};
use crate::model::{BeforeAfterExtension, HierarchicalModel, Likelihood, PriorConfig};

/// Hamiltonian error (natural-log units) beyond which a trajectory diverges.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

const MAX_INIT_ATTEMPTS: usize = 100;

/// Unnormalized log density with gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns `ln p(x)` and writes its gradient into `grad`. Non-finite
    /// values are allowed and treated as zero density.
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: u32,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 5000,
            warmup: 2500,
            target_accept: 0.99,
            max_treedepth: 20,
            seed: 0,
            init_scale: 2.0,
        }
    }
}

impl SamplerConfig {
    /// Reduced setting for replicate-heavy work: 2 chains of 1500 (750 warmup).
    pub fn desk() -> Self {
        Self {
            chains: 2,
            iterations: 1500,
            warmup: 750,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be below iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.max_treedepth < 1 || self.max_treedepth > 30 {
            return Err(Error::Config("max_treedepth must lie in 1..=30".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        self.iterations - self.warmup
    }
}

/// Phase-space point. `p` is only meaningful inside a transition.
#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Hamiltonian<'a, T: ?Sized> {
    target: &'a T,
    inv_metric: &'a [f64],
}

impl<T: LogDensity + ?Sized> Hamiltonian<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn energy(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(self.inv_metric).map(|(p, m)| p * m).collect()
    }

    /// One leapfrog step; `eps` carries the integration direction.
    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.logp_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    fn refresh_momentum<R: Rng + ?Sized>(&self, z: &mut Point, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Generalized no-U-turn criterion: keep going while both ends still move
/// along the summed momentum.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

#[derive(Debug, Default)]
struct TreeStats {
    n_leapfrog: u64,
    sum_metro_prob: f64,
    divergent: bool,
}

/// A completed subtree. `beg` is the end nearest the existing trajectory.
struct Subtree {
    proposal: Point,
    log_sum_weight: f64,
    rho: Vec<f64>,
    p_beg: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_end: Vec<f64>,
}

/// Trajectory end in momentum terms.
struct Edge {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct TransitionInfo {
    divergent: bool,
    treedepth: u32,
    n_leapfrog: u64,
    accept_stat: f64,
    energy: f64,
}

struct Nuts<'a, T: ?Sized> {
    ham: Hamiltonian<'a, T>,
    max_treedepth: u32,
}

impl<T: LogDensity + ?Sized> Nuts<'_, T> {
    fn build_tree<R: Rng + ?Sized>(
        &self,
        z: &mut Point,
        depth: u32,
        eps: f64,
        h0: f64,
        rng: &mut R,
        stats: &mut TreeStats,
    ) -> Option<Subtree> {
        if depth == 0 {
            self.ham.leapfrog(z, eps);
            stats.n_leapfrog += 1;
            let h = self.ham.energy(z);
            let delta = h0 - h;
            stats.sum_metro_prob += if delta > 0.0 { 1.0 } else { delta.exp() };
            if h - h0 > DIVERGENCE_THRESHOLD || !h.is_finite() {
                stats.divergent = true;
                return None;
            }
            let v = self.ham.velocity(&z.p);
            return Some(Subtree {
                proposal: z.clone(),
                log_sum_weight: delta,
                rho: z.p.clone(),
                p_beg: z.p.clone(),
                p_sharp_beg: v.clone(),
                p_end: z.p.clone(),
                p_sharp_end: v,
            });
        }
        let init = self.build_tree(z, depth - 1, eps, h0, rng, stats)?;
        let fin = self.build_tree(z, depth - 1, eps, h0, rng, stats)?;

        let log_sum_weight = log_add_exp(init.log_sum_weight, fin.log_sum_weight);
        let take_final = rng.random::<f64>() < (fin.log_sum_weight - log_sum_weight).exp();
        let rho = add(&init.rho, &fin.rho);

        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        let rho_ext = add(&init.rho, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&fin.rho, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);
        if !persist {
            return None;
        }
        let Subtree { proposal: init_prop, p_beg, p_sharp_beg, .. } = init;
        let Subtree { proposal: fin_prop, p_end, p_sharp_end, .. } = fin;
        Some(Subtree {
            proposal: if take_final { fin_prop } else { init_prop },
            log_sum_weight,
            rho,
            p_beg,
            p_sharp_beg,
            p_end,
            p_sharp_end,
        })
    }

    fn transition<R: Rng + ?Sized>(&self, current: &Point, eps: f64, rng: &mut R) -> (Point, TransitionInfo) {
        let mut z = current.clone();
        self.ham.refresh_momentum(&mut z, rng);
        let h0 = self.ham.energy(&z);
        let v0 = self.ham.velocity(&z.p);

        let mut fwd_point = z.clone();
        let mut bck_point = z.clone();
        let mut fwd = Edge { p: z.p.clone(), p_sharp: v0.clone() };
        let mut bck = Edge { p: z.p.clone(), p_sharp: v0 };
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut sample = z;
        let mut depth = 0;
        let mut stats = TreeStats::default();

        while depth < self.max_treedepth {
            let forward = rng.random::<bool>();
            let sub = if forward {
                self.build_tree(&mut fwd_point, depth, eps, h0, rng, &mut stats)
            } else {
                self.build_tree(&mut bck_point, depth, -eps, h0, rng, &mut stats)
            };
            let Some(sub) = sub else { break };
            depth += 1;

            if sub.log_sum_weight > log_sum_weight {
                sample = sub.proposal.clone();
            } else if rng.random::<f64>() < (sub.log_sum_weight - log_sum_weight).exp() {
                sample = sub.proposal.clone();
            }
            log_sum_weight = log_add_exp(log_sum_weight, sub.log_sum_weight);

            // Order the two halves as (backward part, forward part).
            let new_edge_beg = Edge { p: sub.p_beg, p_sharp: sub.p_sharp_beg };
            let new_edge_end = Edge { p: sub.p_end, p_sharp: sub.p_sharp_end };
            let (rho_b, rho_f, b_bck, b_fwd, f_bck, f_fwd);
            if forward {
                rho_b = rho.clone();
                rho_f = sub.rho;
                b_bck = &bck;
                b_fwd = &fwd;
                f_bck = &new_edge_beg;
                f_fwd = &new_edge_end;
            } else {
                rho_b = sub.rho;
                rho_f = rho.clone();
                b_bck = &new_edge_end;
                b_fwd = &new_edge_beg;
                f_bck = &bck;
                f_fwd = &fwd;
            }
            rho = add(&rho_b, &rho_f);
            let mut persist = no_u_turn(&b_bck.p_sharp, &f_fwd.p_sharp, &rho);
            persist &= no_u_turn(&b_bck.p_sharp, &f_bck.p_sharp, &add(&rho_b, &f_bck.p));
            persist &= no_u_turn(&b_fwd.p_sharp, &f_fwd.p_sharp, &add(&rho_f, &b_fwd.p));

            if forward {
                fwd = new_edge_end;
            } else {
                bck = new_edge_end;
            }
            if !persist {
                break;
            }
        }

        let energy = self.ham.energy(&sample);
        let info = TransitionInfo {
            divergent: stats.divergent,
            treedepth: depth,
            n_leapfrog: stats.n_leapfrog,
            accept_stat: if stats.n_leapfrog > 0 {
                stats.sum_metro_prob / stats.n_leapfrog as f64
            } else {
                0.0
            },
            energy,
        };
        (sample, info)
    }

    /// Doubles or halves `eps` until one leapfrog step crosses an
    /// acceptance of 0.8.
    fn find_reasonable_step_size<R: Rng + ?Sized>(&self, current: &Point, mut eps: f64, rng: &mut R) -> Result<f64> {
        let log_target = 0.8f64.ln();
        let mut direction = 0;
        for _ in 0..200 {
            let mut z = current.clone();
            self.ham.refresh_momentum(&mut z, rng);
            let h0 = self.ham.energy(&z);
            self.ham.leapfrog(&mut z, eps);
            let delta = h0 - self.ham.energy(&z);
            let up = delta > log_target;
            if direction == 0 {
                direction = if up { 1 } else { -1 };
            } else if (direction == 1) != up {
                return Ok(eps);
            }
            eps = if direction == 1 { eps * 2.0 } else { eps * 0.5 };
            if eps > 1e7 {
                return Err(Error::Target("step size diverged during initialization; the posterior may be improper".into()));
            }
            if eps < 1e-300 {
                return Err(Error::Target("step size collapsed to zero during initialization".into()));
            }
        }
        Ok(eps)
    }
}

#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(delta: f64, eps: f64) -> Self {
        let mut da = Self { mu: 0.0, s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta };
        da.restart(eps);
        da
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variance.
#[derive(Debug, Clone)]
struct RunningVariance {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk towards 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows where the
/// metric is estimated, and a fast terminal buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSchedule {
    pub init_buffer: usize,
    pub term_buffer: usize,
    /// Exclusive end iteration of each slow window.
    pub window_ends: Vec<usize>,
}

impl WarmupSchedule {
    const INIT: usize = 75;
    const TERM: usize = 50;
    const BASE: usize = 25;

    pub fn new(warmup: usize) -> Self {
        if warmup < 20 {
            return Self { init_buffer: warmup, term_buffer: 0, window_ends: vec![] };
        }
        let (init, term, base) = if warmup >= 1000 {
            (Self::INIT, Self::TERM, Self::BASE)
        } else if warmup >= Self::INIT + Self::TERM + Self::BASE {
            let init = (Self::INIT * warmup).div_ceil(1000);
            let term = (Self::TERM * warmup).div_ceil(1000);
            (init, term, Self::BASE)
        } else {
            let init = (0.15 * warmup as f64) as usize;
            let term = (0.1 * warmup as f64) as usize;
            (init, term, warmup - init - term)
        };
        let last = warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < last {
            let mut end = start + size;
            if end + 2 * size > last {
                end = last;
            }
            ends.push(end);
            start = end;
            size *= 2;
        }
        Self { init_buffer: init, term_buffer: term, window_ends: ends }
    }

    fn in_slow_window(&self, it: usize) -> bool {
        it >= self.init_buffer && self.window_ends.last().is_some_and(|&e| it < e)
    }

    fn is_window_end(&self, it: usize) -> bool {
        self.window_ends.iter().any(|&e| e == it + 1)
    }
}

struct ChainResult {
    rows: Vec<Vec<f64>>,
    diagnostics: Vec<DrawDiagnostics>,
}

fn initialize<T: LogDensity + ?Sized, R: Rng + ?Sized>(target: &T, scale: f64, rng: &mut R) -> Result<Point> {
    let dim = target.dim();
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q: Vec<f64> = (0..dim)
            .map(|_| if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 })
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = target.logp_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(Point { q, p: vec![0.0; dim], grad, logp });
        }
    }
    Err(Error::Target(format!(
        "log density was non-finite at {MAX_INIT_ATTEMPTS} initial points"
    )))
}

fn run_chain<T, F>(target: &T, config: &SamplerConfig, chain: usize, transform: &F) -> Result<ChainResult>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let dim = target.dim();
    let mut z = initialize(target, config.init_scale, &mut rng)?;
    let mut inv_metric = vec![1.0; dim];
    let schedule = WarmupSchedule::new(config.warmup);

    let mut eps = {
        let nuts = Nuts { ham: Hamiltonian { target, inv_metric: &inv_metric }, max_treedepth: config.max_treedepth };
        nuts.find_reasonable_step_size(&z, 1.0, &mut rng)?
    };
    let mut da = DualAveraging::new(config.target_accept, eps);
    let mut window = RunningVariance::new(dim);
    let mut warmup_divergences = 0;

    let retained = config.retained_per_chain();
    let mut rows = Vec::with_capacity(retained);
    let mut diagnostics = Vec::with_capacity(retained);

    for it in 0..config.iterations {
        let nuts = Nuts { ham: Hamiltonian { target, inv_metric: &inv_metric }, max_treedepth: config.max_treedepth };
        let (next, info) = nuts.transition(&z, eps, &mut rng);
        z = next;
        if it < config.warmup {
            warmup_divergences += usize::from(info.divergent);
            eps = da.update(info.accept_stat);
            if schedule.in_slow_window(it) {
                window.add(&z.q);
            }
            if schedule.is_window_end(it) {
                inv_metric = window.regularized();
                window = RunningVariance::new(dim);
                let nuts = Nuts { ham: Hamiltonian { target, inv_metric: &inv_metric }, max_treedepth: config.max_treedepth };
                eps = nuts.find_reasonable_step_size(&z, eps, &mut rng)?;
                da.restart(eps);
            }
            if it + 1 == config.warmup {
                if warmup_divergences == config.warmup {
                    return Err(Error::Init(format!(
                        "chain {chain}: every warmup iteration diverged; try a smaller init_scale"
                    )));
                }
                eps = da.final_step_size();
            }
        } else {
            rows.push(transform(&z.q));
            diagnostics.push(DrawDiagnostics {
                divergent: info.divergent,
                treedepth: info.treedepth,
                n_leapfrog: info.n_leapfrog,
                accept_stat: info.accept_stat,
                energy: info.energy,
                step_size: eps,
            });
        }
    }
    Ok(ChainResult { rows, diagnostics })
}

/// Runs `config.chains` independent chains (in parallel on the current
/// rayon pool), mapping retained positions through `transform`.
pub fn sample_with<T, F>(target: &T, config: &SamplerConfig, names: Vec<String>, transform: F) -> Result<PosteriorDraws>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    config.validate()?;
    if target.dim() == 0 {
        return Err(Error::Config("target has dimension zero".into()));
    }
    let results: Vec<Result<ChainResult>> = (0..config.chains)
        .into_par_iter()
        .map(|k| run_chain(target, config, k, &transform))
        .collect();
    let mut chains = Vec::with_capacity(config.chains);
    for r in results {
        let r = r?;
        chains.push(ChainDraws { rows: r.rows, diagnostics: r.diagnostics });
    }
    Ok(PosteriorDraws { names, chains, config: config.clone(), layout: None })
}

/// Samples a generic target; columns are named `x[0]`, `x[1]`, ...
pub fn sample<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws> {
    let names = (0..target.dim()).map(|i| format!("x[{i}]")).collect();
    sample_with(target, config, names, |q| q.to_vec())
}

/// Fits the negative-binomial model (optionally with the before/after term).
pub fn fit_model(
    table: &ObservationTable,
    priors: &PriorConfig,
    config: &SamplerConfig,
    extension: Option<&BeforeAfterExtension>,
) -> Result<PosteriorDraws> {
    fit_model_with(table, priors, Likelihood::NegativeBinomial, config, extension)
}

pub fn fit_model_with(
    table: &ObservationTable,
    priors: &PriorConfig,
    likelihood: Likelihood,
    config: &SamplerConfig,
    extension: Option<&BeforeAfterExtension>,
) -> Result<PosteriorDraws> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let model = HierarchicalModel::new(table, *priors, likelihood, extension)?;
    let layout = model.layout().clone();
    let mut draws = sample_with(&model, config, layout.names.clone(), |q| layout.to_constrained_row(q))?;
    let div = draws.divergences();
    if div > 0 {
        log::warn!("{div} divergent transitions after warmup");
    }
    draws.layout = Some(layout);
    Ok(draws)
}
