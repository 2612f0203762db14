//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p reefgauge-core --test acceptance`, or
//! pick criteria by number: `cargo test -p reefgauge-core --test acceptance -- 1 4 5`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::function::erf::erfc;

use reefgauge_core::data::DeploymentRecord;
use reefgauge_core::diagnostics::{dispersion_check, hdi, rhat_listing};
use reefgauge_core::indicators::{credibility, fold_change, p_decline, render_report, Category, FoldChangePosterior, ReportStyle, Scope};
use reefgauge_core::model::HierarchicalModel;
use reefgauge_core::powersim::{category_curve, run_grid, write_curve_csv, RunOptions};
use reefgauge_core::sampler::LogDensity;
use reefgauge_core::synthetic::{simulate_default_design, to_deployment_records, with_unusable_deployment, GeneratingValues};
use reefgauge_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn reference_dataset(seed: u64) -> synthetic::SyntheticDataset {
    simulate_default_design(&GeneratingValues::reference(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// 1. Analytic gradient against central differences.
fn gradient_correctness() -> Outcome {
    let ds = reference_dataset(101);
    let model = HierarchicalModel::new(&ds.table, PriorConfig::default(), Likelihood::NegativeBinomial, None).unwrap();
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut grad = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for _ in 0..100 {
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        model.logp_grad(&theta, &mut grad);
        for k in 0..dim {
            let mut x = theta.clone();
            x[k] += h;
            let up = model.logp_grad(&x, &mut scratch);
            x[k] -= 2.0 * h;
            let down = model.logp_grad(&x, &mut scratch);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1.0));
        }
    }
    outcome(worst < 1e-6, format!("100 points x {dim} coordinates, worst relative error {worst:.2e} (limit 1e-6)"))
}

struct CorrelatedGaussian {
    mean: [f64; 2],
    /// Inverse of [[1, r], [r, 1]].
    precision: [[f64; 2]; 2],
}

impl CorrelatedGaussian {
    fn new(mean: [f64; 2], r: f64) -> Self {
        let det = 1.0 - r * r;
        Self { mean, precision: [[1.0 / det, -r / det], [-r / det, 1.0 / det]] }
    }
}

impl LogDensity for CorrelatedGaussian {
    fn dim(&self) -> usize {
        2
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let p = &self.precision;
        let g = [p[0][0] * d[0] + p[0][1] * d[1], p[1][0] * d[0] + p[1][1] * d[1]];
        grad[0] = -g[0];
        grad[1] = -g[1];
        -0.5 * (d[0] * g[0] + d[1] * g[1])
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// 2. NUTS on a correlated 2-D Gaussian.
fn sampler_oracle() -> Outcome {
    let r = 0.9;
    let target = CorrelatedGaussian::new([1.0, -2.0], r);
    let config = SamplerConfig { chains: 4, iterations: 3000, warmup: 1000, target_accept: 0.8, seed: 2, ..SamplerConfig::default() };
    let draws = sample(&target, &config).unwrap();
    let x = draws.pooled("x[0]").unwrap();
    let y = draws.pooled("x[1]").unwrap();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / (n - 1.0);
    let c = [cov(&x, mx, &x, mx), cov(&x, mx, &y, my), cov(&y, my, &y, my)];
    let mean_err = (mx - 1.0).abs().max((my + 2.0).abs());
    let cov_err = (c[0] - 1.0).abs().max((c[1] - r).abs()).max((c[2] - 1.0).abs());
    let ks_x = ks_statistic(x, |v| normal_cdf(v - 1.0));
    let ks_y = ks_statistic(y, |v| normal_cdf(v + 2.0));
    outcome(
        mean_err < 0.05 && cov_err < 0.05 && ks_x < 0.02 && ks_y < 0.02 && draws.n_draws() == 8000,
        format!(
            "{} draws, mean error {mean_err:.4}, covariance error {cov_err:.4}, KS {ks_x:.4}/{ks_y:.4} (limits 0.05, 0.05, 0.02)",
            draws.n_draws()
        ),
    )
}

/// 3. Parameter recovery on 20 datasets of the default design.
fn parameter_recovery() -> Outcome {
    let ln10 = 10f64.ln();
    let mut covered = 0;
    let mut clean = 0;
    let mut worst_rhat = 0.0f64;
    for run in 0..20u64 {
        let ds = reference_dataset(3000 + run);
        let config = SamplerConfig::desk().with_seed(run);
        let draws = fit_model(&ds.table, &PriorConfig::default(), &config, None).unwrap();
        let (lo, hi) = hdi(&draws.pooled("beta0").unwrap(), 0.95).unwrap();
        covered += usize::from(lo <= ln10 && ln10 <= hi);
        clean += usize::from(draws.divergences() == 0);
        for (_, r) in rhat_listing(&draws).unwrap() {
            worst_rhat = worst_rhat.max(if r.is_nan() { f64::INFINITY } else { r });
        }
    }
    outcome(
        covered >= 16 && clean >= 18 && worst_rhat <= 1.05,
        format!("beta0 HDI covers ln 10 in {covered}/20 (need 16), divergence-free {clean}/20 (need 18), max R-hat {worst_rhat:.4} (limit 1.05)"),
    )
}

/// 4. Indicator identities.
fn indicator_identities() -> Outcome {
    let ds = reference_dataset(4);
    let cfg = SamplerConfig { chains: 2, iterations: 600, warmup: 300, seed: 4, ..SamplerConfig::default() };
    let draws = fit_model(&ds.table, &PriorConfig::default(), &cfg, None).unwrap();
    let base = fold_change(&draws, 2018, 2018).unwrap();
    let all_one = base.draws.iter().all(|&d| d == 1.0) && base.draws.len() == draws.n_draws();

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_sum = 0.0f64;
    for _ in 0..500 {
        let mut cuts: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0.01..3.0)).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let bounds: Vec<f64> = std::iter::once(0.0).chain(cuts).collect();
        let cats = (0..bounds.len())
            .map(|i| Category {
                label: format!("c{i}"),
                lower: bounds[i],
                upper: bounds.get(i + 1).copied().unwrap_or(f64::INFINITY),
                color: "gray".into(),
            })
            .collect();
        let scheme = CategoryScheme::new(cats).unwrap();
        let n = rng.random_range(1..2000);
        let sd = rng.random_range(0.05..2.0);
        let d: Vec<f64> = (0..n).map(|_| (sd * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
        let post = FoldChangePosterior { scope: Scope::Overall, year: 2019, baseline: 2018, draws: d };
        worst_sum = worst_sum.max((credibility(&post, &scheme).total() - 1.0).abs());
    }
    let whole = fold_change(&draws, 2020, 2018).unwrap();
    worst_sum = worst_sum.max((credibility(&whole, &CategoryScheme::traffic_light()).total() - 1.0).abs());

    let sym: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
    let p = p_decline(&FoldChangePosterior { scope: Scope::Overall, year: 2019, baseline: 2018, draws: sym });
    outcome(
        all_one && worst_sum <= 1e-12 && (p - 0.5).abs() <= 0.02,
        format!("baseline ratios all 1: {all_one}; worst |sum - 1| {worst_sum:.1e}; symmetric P(decline) {p:.4}"),
    )
}

fn brute_force_hdi(draws: &[f64], mass: f64) -> (f64, f64) {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = (mass * n as f64 - 1e-9).ceil() as usize;
    let mut best: Option<(f64, usize)> = None;
    for start in 0..=n - k {
        let w = s[start + k - 1] - s[start];
        if best.is_none_or(|(bw, _)| w < bw) {
            best = Some((w, start));
        }
    }
    let (_, i) = best.unwrap();
    (s[i], s[i + k - 1])
}

/// 5. HDI minimality against brute force.
fn hdi_minimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.random_range(20..=1000);
        let draws: Vec<f64> = match case % 4 {
            0 => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            1 => (0..n).map(|_| Exp::new(1.0).unwrap().sample(&mut rng)).collect(),
            // Rounded values produce many tied windows.
            2 => (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * 3.0).round()).collect(),
            _ => (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let mass = [0.95, 0.8, 0.5, 0.99][case % 4];
        if hdi(&draws, mass).unwrap() != brute_force_hdi(&draws, mass) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 200 samples"))
}

/// 6. Desk-scale power study. Four synthetic monitoring datasets, fixed in
/// advance, contribute 25 replicates each.
fn power_study() -> Outcome {
    let rhos = [0.05, 0.7, 1.0];
    let fit_config = SamplerConfig { chains: 2, iterations: 1000, warmup: 500, target_accept: 0.9, ..SamplerConfig::default() };
    let mut sums = [0.0; 3];
    let mut per_dataset = Vec::new();
    let mut failures = 0;
    for seed in 0..4u64 {
        let ds = reference_dataset(seed);
        let fitted = fit_model(&ds.table, &PriorConfig::default(), &SamplerConfig::desk().with_seed(seed), None).unwrap();
        let grid = ScenarioGrid { rho_levels: rhos.to_vec(), alpha_levels: vec![5], replicates: 25 };
        let result = run_grid(
            &fitted,
            &ds.table,
            &grid,
            &fit_config,
            &RunOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(600 + seed),
        )
        .unwrap();
        failures += result.failures();
        let powers: Vec<f64> = rhos.iter().map(|&r| result.cell(r, 5).unwrap().mean_power).collect();
        for (s, p) in sums.iter_mut().zip(&powers) {
            *s += p;
        }
        per_dataset.push(format!("[{:.3} {:.3} {:.3}]", powers[0], powers[1], powers[2]));
    }
    let m: Vec<f64> = sums.iter().map(|s| s / 4.0).collect();
    outcome(
        m[0] > 0.8 && (m[1] - 0.5).abs() <= 0.15 && (0.35..=0.65).contains(&m[2]) && failures == 0,
        format!(
            "mean power rho=0.05 {:.3} (> 0.8), rho=0.7 {:.3} (0.5 +/- 0.15), rho=1 {:.3} (0.35..0.65; reference 0.375); per dataset {}; failed fits {failures}",
            m[0],
            m[1],
            m[2],
            per_dataset.join(" ")
        ),
    )
}

/// 7. Dispersion check under NB and Poisson data.
fn dispersion_power() -> Outcome {
    let config = SamplerConfig::desk();
    let mut nb_rejects = 0;
    let mut poisson_rejects = 0;
    for seed in 0..20u64 {
        let nb = reference_dataset(7000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = dispersion_check(&nb.table, &PriorConfig::default(), &config.clone().with_seed(seed), 500, &mut rng).unwrap();
        nb_rejects += usize::from(r.p_value < 0.05);

        let values = GeneratingValues { phi: f64::INFINITY, ..GeneratingValues::reference() };
        let pois = simulate_default_design(&values, &mut ChaCha8Rng::seed_from_u64(7100 + seed));
        let r = dispersion_check(&pois.table, &PriorConfig::default(), &config.clone().with_seed(seed), 500, &mut rng).unwrap();
        poisson_rejects += usize::from(r.p_value < 0.05);
    }
    outcome(
        nb_rejects >= 16 && poisson_rejects <= 4,
        format!("NB data rejected {nb_rejects}/20 (need >= 16), Poisson data rejected {poisson_rejects}/20 (need <= 4)"),
    )
}

/// Every byte written by one data -> fit -> report -> simulate pass.
fn pipeline_outputs(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = simulate_default_design(&GeneratingValues::reference(), &mut rng);
    let indicators = IndicatorList::from_codes(&["SP1", "SP2", "SP3"]).unwrap();
    let records: Vec<DeploymentRecord> = with_unusable_deployment(to_deployment_records(&ds.table, &indicators, &mut rng), &mut rng);
    let csv_path = dir.join("deployments.csv");
    let mut w = csv::Writer::from_path(&csv_path).unwrap();
    w.write_record(["site", "year", "station_id", "species_code", "maxn", "usable"]).unwrap();
    for r in &records {
        w.write_record([r.site.clone(), r.year.to_string(), r.station_id.clone(), r.species_code.clone(), r.count.to_string(), r.usable.to_string()])
            .unwrap();
    }
    w.flush().unwrap();
    let table = aggregate(&parse_deployments(&csv_path, &ColumnMap::default()).unwrap(), &indicators).unwrap();

    let config = SamplerConfig { chains: 2, iterations: 400, warmup: 200, seed: 88, ..SamplerConfig::default() };
    let fitted = fit_model(&table, &PriorConfig::default(), &config, None).unwrap();
    fitted.write_dir(dir.join("draws")).unwrap();
    let draws = PosteriorDraws::read_dir(dir.join("draws")).unwrap();

    let scheme = CategoryScheme::traffic_light();
    let report = StatusReport::build(&draws, 2018, None, &scheme).unwrap();
    let mut out = BTreeMap::new();
    out.insert("status.json".to_string(), report.to_json().unwrap().into_bytes());
    for style in ReportStyle::ALL {
        for f in render_report(&report, style) {
            out.insert(f.name, f.contents.into_bytes());
        }
    }

    let grid = ScenarioGrid { rho_levels: vec![0.05, 1.0], alpha_levels: vec![5, 10], replicates: 2 };
    let sim_config = SamplerConfig { chains: 2, iterations: 300, warmup: 150, target_accept: 0.9, ..SamplerConfig::default() };
    let options = RunOptions { checkpoint_dir: Some(dir.join("checkpoints")), ..RunOptions::default() };
    let power = run_grid(&draws, &table, &grid, &sim_config, &options, &mut ChaCha8Rng::seed_from_u64(888)).unwrap();
    let mut buf = Vec::new();
    power.write_csv(&mut buf).unwrap();
    out.insert("power.csv".into(), buf);
    out.insert("power.json".into(), power.to_json().unwrap().into_bytes());
    let mut buf = Vec::new();
    write_curve_csv(&category_curve(&power, &scheme), &scheme, &mut buf).unwrap();
    out.insert("category_curve.csv".into(), buf);
    for entry in std::fs::read_dir(dir.join("draws")).unwrap() {
        let entry = entry.unwrap();
        out.insert(format!("draws/{}", entry.file_name().to_string_lossy()), std::fs::read(entry.path()).unwrap());
    }
    out
}

/// 8. Two seeded pipeline runs agree byte for byte.
fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_outputs(a.path());
    let second = pipeline_outputs(b.path());
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!("{} output files compared, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient correctness", gradient_correctness),
    (2, "sampler oracle", sampler_oracle),
    (3, "parameter recovery", parameter_recovery),
    (4, "indicator identities", indicator_identities),
    (5, "HDI minimality", hdi_minimality),
    (6, "power-study desk reproduction", power_study),
    (7, "dispersion check power", dispersion_power),
    (8, "end-to-end determinism", end_to_end_determinism),
];

/// Runtime bounds stated with the criteria; 4 and 8 have none.
const TIME_LIMITS: [Option<Duration>; 8] = [
    Some(Duration::from_secs(5)),
    Some(Duration::from_secs(30)),
    Some(Duration::from_secs(30 * 60)),
    None,
    Some(Duration::from_secs(10)),
    Some(Duration::from_secs(2 * 3600)),
    Some(Duration::from_secs(20 * 60)),
    None,
];

/// Prints one verdict per criterion. Exits non-zero on a failure only with `--strict`.
fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let (mut run_count, mut failed) = (0, 0);
    for ((id, name, run), limit) in CRITERIA.into_iter().zip(TIME_LIMITS) {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let pass = result.pass && limit.is_none_or(|l| elapsed <= l);
        run_count += 1;
        failed += usize::from(!pass);
        let bound = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
        println!(
            "{} criterion {id} ({name}): {}; {:.1}s{bound}",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
        );
    }
    println!("{}/{run_count} criteria passed", run_count - failed);
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
