//! Run reports, Monte Carlo replication, thread sweeps and J-scaling studies.
//!
//! Every summary number is computed from the per-run records stored next to
//! it, so the JSON output is enough to recompute the text tables.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::MarketDataset;
use crate::dgp::{generate_dataset, DgpConfig, GeneratedData};
use crate::error::{BlpError, Result};
use crate::estimators::{fit_starts, multi_start_select, random_starts, FitResult, Method, SolverConfig, TimingPanels};
use crate::gmm::{build_weight_matrix, concentrated_g, concentrated_q, concentrated_q_ablp, drop_collinear_instruments, GmmSetup, WeightKind};
use crate::inference::{npgmm_variance, VarianceOptions, VarianceReport};
use crate::model::outside_probs;
use crate::parallel::Executor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub available_parallelism: usize,
    pub hardware: String,
    pub os: String,
    pub version: String,
}

impl Environment {
    pub fn capture(threads: usize) -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown cpu".to_string());
        Self {
            threads,
            available_parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            hardware: format!("{cpu} ({})", std::env::consts::ARCH),
            os: std::env::consts::OS.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Labels for θ in the order of `ModelParameters::to_vec`.
pub fn parameter_names(k: usize, r: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..k).map(|i| format!("beta_{i}")).collect();
    names.extend((0..k).map(|i| format!("sigma_{i}")));
    for i in 0..k {
        names.extend((0..r).map(|d| format!("pi_{i}_{d}")));
    }
    names
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start_index: usize,
    pub converged: bool,
    pub criterion_value: f64,
    pub theta_hat: Vec<f64>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub criterion_evals: usize,
    pub timings: TimingPanels,
    pub failure: Option<String>,
}

impl StartSummary {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            start_index: fit.start_index,
            converged: fit.converged,
            criterion_value: fit.criterion_value,
            theta_hat: fit.theta_hat.to_vec(),
            outer_iters: fit.outer_iters,
            inner_iters: fit.inner_iters,
            criterion_evals: fit.criterion_evals,
            timings: fit.timings.clone(),
            failure: fit.diagnostics.failure.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub starts: Vec<StartSummary>,
    pub selected: FitResult,
    pub variance: Option<VarianceReport>,
    pub variance_error: Option<String>,
}

impl MethodReport {
    pub fn any_converged(&self) -> bool {
        self.starts.iter().any(|s| s.converged)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub environment: Environment,
    pub config: SolverConfig,
    pub seed: u64,
    pub parameter_names: Vec<String>,
    pub methods: Vec<MethodReport>,
}

/// Runs each method from the same `config.n_starts` random starts and
/// computes the variance at each selected estimate.
pub fn run_estimate(
    ds: &MarketDataset,
    config: &SolverConfig,
    methods: &[Method],
    seed: u64,
    variance: VarianceOptions,
) -> Result<RunReport> {
    config.validate()?;
    let exec = Executor::new(config.threads)?;
    let w = build_weight_matrix(ds, WeightKind::TwoStage)?;
    let starts = random_starts(ds, &w, config.n_starts, seed, &config.inversion, &exec)?;
    let mut blocks = Vec::with_capacity(methods.len());
    for &method in methods {
        let fits = fit_starts(method, ds, &w, config, &starts)?;
        let selected = multi_start_select(&fits)?;
        let (var, var_err) = if selected.converged {
            match npgmm_variance(&selected, ds, &w, variance, &exec) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, Some("selected estimate did not converge".to_string()))
        };
        blocks.push(MethodReport {
            method,
            starts: fits.iter().map(StartSummary::from_fit).collect(),
            selected,
            variance: var,
            variance_error: var_err,
        });
    }
    Ok(RunReport {
        environment: Environment::capture(config.threads),
        config: config.clone(),
        seed,
        parameter_names: parameter_names(ds.n_chars(), ds.n_demographics()),
        methods: blocks,
    })
}

impl RunReport {
    /// Largest coordinate gap between the selected estimates of any two methods.
    pub fn max_cross_difference(&self) -> Option<f64> {
        let thetas: Vec<Vec<f64>> = self.methods.iter().map(|m| m.selected.theta_hat.to_vec()).collect();
        let mut worst: Option<f64> = None;
        for a in 0..thetas.len() {
            for b in a + 1..thetas.len() {
                let d = crate::data::max_abs_diff(&thetas[a], &thetas[b]);
                worst = Some(worst.map_or(d, |w| w.max(d)));
            }
        }
        worst
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let e = &self.environment;
        let _ = writeln!(out, "npgmm {}  threads {}  hardware {}  seed {}", e.version, e.threads, e.hardware, self.seed);
        let _ = writeln!(out, "tol_outer {:e}  max_outer {}  starts {}", self.config.tol_outer, self.config.max_outer, self.config.n_starts);
        for m in &self.methods {
            let _ = writeln!(out, "\n== {} ==", m.method);
            let _ = writeln!(out, "{:>5} {:>9} {:>14} {:>7} {:>7} {:>8} {:>10}", "start", "converged", "criterion", "outer", "inner", "evals", "seconds");
            for s in &m.starts {
                let _ = writeln!(
                    out,
                    "{:>5} {:>9} {:>14.6e} {:>7} {:>7} {:>8} {:>10.4}",
                    s.start_index, s.converged, s.criterion_value, s.outer_iters, s.inner_iters, s.criterion_evals, s.timings.wall_clock_total
                );
            }
            let sel = &m.selected;
            let _ = writeln!(out, "selected start {} (converged: {})", sel.start_index, sel.converged);
            let theta = sel.theta_hat.to_vec();
            let se = m.variance.as_ref().map(|v| v.se_np.clone());
            let _ = writeln!(out, "{:<12} {:>12} {:>12}", "parameter", "estimate", "std. error");
            for (i, name) in self.parameter_names.iter().enumerate() {
                let se_text = se.as_ref().map_or("-".to_string(), |s| format!("{:.6}", s[i]));
                let _ = writeln!(out, "{name:<12} {:>12.6} {se_text:>12}", theta[i]);
            }
            if let Some(err) = &m.variance_error {
                let _ = writeln!(out, "variance unavailable: {err}");
            }
            out.push_str(&timing_panels_text(&sel.timings));
        }
        if let Some(d) = self.max_cross_difference() {
            let _ = writeln!(out, "\nmax |theta difference| across methods: {d:.6}");
        }
        out
    }
}

fn timing_panels_text(t: &TimingPanels) -> String {
    format!(
        "A total time (s) {:.4}\nB outer iterations {}\nC inner iterations {}\nD time per inner iteration (s) {:.6}\nE criterion evaluations {}\nF time per criterion evaluation (s) {:.6}\n",
        t.wall_clock_total, t.n_outer, t.n_inner, t.time_per_inner_iter, t.n_criterion_evals, t.time_per_criterion_eval
    )
}

/// Generates a dataset and drops instrument columns that are collinear in it.
/// The characteristics are fixed across markets, so with few products the
/// instruments built only from them are linearly dependent.
pub fn simulate(dgp: &DgpConfig, exec: &Executor) -> Result<(GeneratedData, Vec<usize>)> {
    let mut g = generate_dataset(dgp, exec)?;
    let (ds, dropped) = drop_collinear_instruments(&g.dataset)?;
    g.dataset = ds;
    Ok((g, dropped))
}

// ---------------------------------------------------------------------------
// Monte Carlo

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub solver: SolverConfig,
    /// Replication r uses seed + r for both its data and its starts.
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::sized(25, 50, 200, 0),
            replications: 10,
            methods: vec![Method::Npgmm, Method::Ablp],
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: Method,
    pub truth: Vec<f64>,
    /// Selected estimate; empty when the replication failed before fitting.
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub starts: Vec<StartSummary>,
    /// Zero-based instrument columns dropped as collinear.
    pub dropped_instruments: Vec<usize>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Share of replications with at least one converged start.
    pub dataset_convergence_rate: f64,
    /// Share of (replication, start) pairs that converged.
    pub start_convergence_rate: f64,
    /// Over replications whose selected estimate converged. `std` divides by
    /// the count, so rmse² = bias² + std².
    pub n_used: usize,
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    pub std: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Averages over all attempted starts.
    pub mean_timings: TimingPanels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub environment: Environment,
    pub config: MonteCarloConfig,
    pub parameter_names: Vec<String>,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<MethodSummary>,
}

pub fn run_montecarlo(config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    config.solver.validate()?;
    config.dgp.validate()?;
    if config.replications == 0 || config.methods.is_empty() {
        return Err(BlpError::InvalidInput("need at least one replication and one method".into()));
    }
    let exec = Executor::new(config.solver.threads)?;
    let truth = config.dgp.true_params()?.to_vec();
    let mut records = Vec::new();
    for r in 0..config.replications {
        let seed = config.seed.wrapping_add(r as u64);
        let prepared = (|| {
            let (g, dropped) = simulate(&DgpConfig { seed, ..config.dgp.clone() }, &exec)?;
            let w = build_weight_matrix(&g.dataset, WeightKind::TwoStage)?;
            let starts = random_starts(&g.dataset, &w, config.solver.n_starts, seed, &config.solver.inversion, &exec)?;
            Ok::<_, BlpError>((g, dropped, w, starts))
        })();
        let (g, dropped, w, starts) = match prepared {
            Ok(p) => p,
            Err(e) => {
                for &method in &config.methods {
                    records.push(ReplicationRecord {
                        replication: r,
                        seed,
                        method,
                        truth: truth.clone(),
                        theta_hat: Vec::new(),
                        converged: false,
                        starts: Vec::new(),
                        dropped_instruments: Vec::new(),
                        failure: Some(e.to_string()),
                    });
                }
                continue;
            }
        };
        for &method in &config.methods {
            let record = match fit_starts(method, &g.dataset, &w, &config.solver, &starts)
                .and_then(|fits| Ok((multi_start_select(&fits)?, fits)))
            {
                Ok((sel, fits)) => ReplicationRecord {
                    replication: r,
                    seed,
                    method,
                    truth: truth.clone(),
                    theta_hat: sel.theta_hat.to_vec(),
                    converged: sel.converged,
                    starts: fits.iter().map(StartSummary::from_fit).collect(),
                    dropped_instruments: dropped.clone(),
                    failure: None,
                },
                Err(e) => ReplicationRecord {
                    replication: r,
                    seed,
                    method,
                    truth: truth.clone(),
                    theta_hat: Vec::new(),
                    converged: false,
                    starts: Vec::new(),
                    dropped_instruments: dropped.clone(),
                    failure: Some(e.to_string()),
                },
            };
            records.push(record);
        }
    }
    let summaries = config
        .methods
        .iter()
        .map(|&m| summarize(m, &records, &truth, config.solver.n_starts))
        .collect();
    let d = &config.dgp;
    Ok(MonteCarloReport {
        environment: Environment::capture(config.solver.threads),
        config: config.clone(),
        parameter_names: parameter_names(d.beta_true.len(), 0),
        records,
        summaries,
    })
}

/// Aggregates the records of one method. A failed replication counts as
/// `n_starts` non-converged starts.
pub fn summarize(method: Method, records: &[ReplicationRecord], truth: &[f64], n_starts: usize) -> MethodSummary {
    let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method).collect();
    let n_rep = mine.len().max(1) as f64;
    let dataset_ok = mine.iter().filter(|r| r.starts.iter().any(|s| s.converged)).count();
    let attempted: usize = mine.iter().map(|r| r.starts.len().max(n_starts)).sum();
    let start_ok: usize = mine.iter().map(|r| r.starts.iter().filter(|s| s.converged).count()).sum();
    let used: Vec<&Vec<f64>> = mine.iter().filter(|r| r.converged).map(|r| &r.theta_hat).collect();
    let d = truth.len();
    let n = used.len() as f64;
    let mut mean = vec![f64::NAN; d];
    let mut bias = vec![f64::NAN; d];
    let mut std = vec![f64::NAN; d];
    let mut rmse = vec![f64::NAN; d];
    if !used.is_empty() {
        for c in 0..d {
            let m = used.iter().map(|t| t[c]).sum::<f64>() / n;
            mean[c] = m;
            bias[c] = m - truth[c];
            std[c] = (used.iter().map(|t| (t[c] - m).powi(2)).sum::<f64>() / n).sqrt();
            rmse[c] = (used.iter().map(|t| (t[c] - truth[c]).powi(2)).sum::<f64>() / n).sqrt();
        }
    }
    let all_starts: Vec<&StartSummary> = mine.iter().flat_map(|r| r.starts.iter()).collect();
    MethodSummary {
        method,
        dataset_convergence_rate: dataset_ok as f64 / n_rep,
        start_convergence_rate: if attempted == 0 { 0.0 } else { start_ok as f64 / attempted as f64 },
        n_used: used.len(),
        mean,
        bias,
        std,
        rmse,
        mean_timings: mean_timings(&all_starts),
    }
}

fn mean_timings(starts: &[&StartSummary]) -> TimingPanels {
    let n = starts.len();
    if n == 0 {
        return TimingPanels::default();
    }
    let nf = n as f64;
    let sum = |f: fn(&TimingPanels) -> f64| starts.iter().map(|s| f(&s.timings)).sum::<f64>();
    let count = |f: fn(&TimingPanels) -> usize| starts.iter().map(|s| f(&s.timings)).sum::<usize>();
    let inner_time = sum(|t| t.inner_time_total);
    let crit_time = sum(|t| t.criterion_time_total);
    let n_inner = count(|t| t.n_inner);
    let n_evals = count(|t| t.n_criterion_evals);
    TimingPanels {
        wall_clock_total: sum(|t| t.wall_clock_total) / nf,
        time_per_inner_iter: if n_inner > 0 { inner_time / n_inner as f64 } else { 0.0 },
        time_per_criterion_eval: if n_evals > 0 { crit_time / n_evals as f64 } else { 0.0 },
        // Rounded means so the panel stays integral.
        n_outer: (count(|t| t.n_outer) as f64 / nf).round() as usize,
        n_inner: (n_inner as f64 / nf).round() as usize,
        n_criterion_evals: (n_evals as f64 / nf).round() as usize,
        inner_time_total: inner_time / nf,
        criterion_time_total: crit_time / nf,
    }
}

impl MonteCarloReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "Monte Carlo: {} replications, J={} T={} N={}, {} starts, threads {}",
            c.replications, c.dgp.products, c.dgp.markets, c.dgp.draws, c.solver.n_starts, self.environment.threads
        );
        for s in &self.summaries {
            let _ = writeln!(out, "\n== {} ==", s.method);
            let _ = writeln!(out, "convergence rate (%): dataset {:.1}  dataset-start {:.1}", 100.0 * s.dataset_convergence_rate, 100.0 * s.start_convergence_rate);
            let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}", "parameter", "truth", "mean", "bias", "std", "rmse");
            let truth = self.records.first().map(|r| r.truth.clone()).unwrap_or_default();
            for (i, name) in self.parameter_names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{name:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    truth.get(i).copied().unwrap_or(f64::NAN),
                    s.mean[i],
                    s.bias[i],
                    s.std[i],
                    s.rmse[i]
                );
            }
            out.push_str("mean per estimation:\n");
            out.push_str(&timing_panels_text(&s.mean_timings));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Thread sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub threads: usize,
    pub evaluations: usize,
    /// Time for `evaluations` criterion-plus-gradient calls.
    pub total_seconds: f64,
    /// Time for the same number of criterion-only calls.
    pub criterion_seconds: f64,
    /// total − criterion, floored at zero.
    pub gradient_seconds: f64,
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadSweepReport {
    pub environment: Environment,
    pub rows: Vec<SweepRow>,
    /// Thread count with the lowest total time, per method.
    pub optimal_threads: Vec<(Method, usize)>,
}

/// Times repeated evaluations at the first random start: (λ, θ₂) for NP-GMM,
/// (δ₀, θ₂) for ABLP and θ₂ with a warm-started inversion for NFXP.
pub fn thread_sweep(
    ds: &MarketDataset,
    config: &SolverConfig,
    methods: &[Method],
    threads: &[usize],
    evaluations: usize,
    seed: u64,
) -> Result<ThreadSweepReport> {
    if threads.is_empty() || evaluations == 0 {
        return Err(BlpError::InvalidInput("need at least one thread count and one evaluation".into()));
    }
    let w = build_weight_matrix(ds, WeightKind::TwoStage)?;
    let setup = GmmSetup::new(ds, &w)?;
    let start = random_starts(ds, &w, 1, seed, &config.inversion, &Executor::sequential())?.remove(0);
    let sp = &start.params.sigma_part;
    let lambda = {
        let markets = Executor::sequential().try_map_markets(ds.n_markets(), |t| outside_probs(start.delta.market(t), &ds.market(t), sp))?;
        crate::data::OutsideProbs::from_markets(ds.n_draws(), markets)?
    };
    let mut rows = Vec::new();
    for &method in methods {
        for &n_threads in threads {
            let exec = Executor::new(n_threads)?;
            let eval = |grad: bool| -> Result<(f64, Vec<f64>)> {
                let ce = match method {
                    Method::Npgmm => concentrated_q(&lambda, sp, &setup, ds, &exec, grad)?,
                    Method::Ablp => concentrated_q_ablp(
                        &start.delta,
                        sp,
                        &setup,
                        ds,
                        &config.inversion,
                        &exec,
                        grad.then_some(config.ablp_gradient),
                    )?,
                    Method::Nfxp => concentrated_g(sp, &setup, ds, &exec, &config.inversion, Some(&start.delta), grad)?.criterion,
                };
                Ok((ce.value, ce.gradient.unwrap_or_default()))
            };
            let clock = Instant::now();
            for _ in 0..evaluations {
                eval(false)?;
            }
            let criterion_seconds = clock.elapsed().as_secs_f64();
            let clock = Instant::now();
            let mut last = (f64::NAN, Vec::new());
            for _ in 0..evaluations {
                last = eval(true)?;
            }
            let total_seconds = clock.elapsed().as_secs_f64();
            rows.push(SweepRow {
                method,
                threads: n_threads,
                evaluations,
                total_seconds,
                criterion_seconds,
                gradient_seconds: (total_seconds - criterion_seconds).max(0.0),
                value: last.0,
                gradient: last.1,
            });
        }
    }
    let optimal_threads = methods
        .iter()
        .map(|&m| {
            let best = rows
                .iter()
                .filter(|r| r.method == m)
                .min_by(|a, b| a.total_seconds.total_cmp(&b.total_seconds))
                .map_or(1, |r| r.threads);
            (m, best)
        })
        .collect();
    Ok(ThreadSweepReport {
        environment: Environment::capture(threads.iter().copied().max().unwrap_or(1)),
        rows,
        optimal_threads,
    })
}

impl ThreadSweepReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "hardware {}  available parallelism {}", self.environment.hardware, self.environment.available_parallelism);
        let _ = writeln!(out, "{:<7} {:>7} {:>7} {:>12} {:>12} {:>12}", "method", "threads", "evals", "total (s)", "criterion", "gradient");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<7} {:>7} {:>7} {:>12.4} {:>12.4} {:>12.4}",
                r.method.name(), r.threads, r.evaluations, r.total_seconds, r.criterion_seconds, r.gradient_seconds
            );
        }
        for (m, t) in &self.optimal_threads {
            let _ = writeln!(out, "optimal threads for {m}: {t}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scaling in J

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residuals of log(time) on log(J), in input order.
    pub residuals: Vec<f64>,
    pub points: usize,
}

/// OLS of ln y on ln x. Refuses fewer than three points.
pub fn fit_log_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() {
        return Err(BlpError::DimensionMismatch {
            what: "timings",
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(BlpError::InvalidInput(format!("a slope needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(BlpError::InvalidInput("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(BlpError::InvalidInput("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = lx.iter().zip(&ly).map(|(a, b)| b - intercept - slope * a).collect();
    Ok(SlopeFit {
        slope,
        intercept,
        residuals,
        points: x.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPanel {
    pub method: Method,
    pub products: usize,
    pub starts: Vec<StartSummary>,
    /// Inner time over inner iterations, pooled across starts.
    pub time_per_inner_iter: f64,
    pub wall_clock_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub environment: Environment,
    pub panels: Vec<ScalingPanel>,
    pub slopes: Vec<(Method, SlopeFit)>,
}

/// For each J, generates a dataset from `dgp` with that many products and
/// fits every method from shared starts.
pub fn run_scaling(
    dgp: &DgpConfig,
    products: &[usize],
    config: &SolverConfig,
    methods: &[Method],
    seed: u64,
) -> Result<ScalingReport> {
    if products.len() < 3 {
        return Err(BlpError::InvalidInput(format!("a slope needs at least 3 values of J, got {}", products.len())));
    }
    config.validate()?;
    let exec = Executor::new(config.threads)?;
    let mut panels = Vec::new();
    for &j in products {
        let (g, _) = simulate(&DgpConfig { products: j, seed, ..dgp.clone() }, &exec)?;
        let w = build_weight_matrix(&g.dataset, WeightKind::TwoStage)?;
        let starts = random_starts(&g.dataset, &w, config.n_starts, seed, &config.inversion, &exec)?;
        for &method in methods {
            let fits = fit_starts(method, &g.dataset, &w, config, &starts)?;
            let starts: Vec<StartSummary> = fits.iter().map(StartSummary::from_fit).collect();
            let inner: f64 = starts.iter().map(|s| s.timings.inner_time_total).sum();
            let n_inner: usize = starts.iter().map(|s| s.timings.n_inner).sum();
            panels.push(ScalingPanel {
                method,
                products: j,
                time_per_inner_iter: if n_inner > 0 { inner / n_inner as f64 } else { f64::NAN },
                wall_clock_total: starts.iter().map(|s| s.timings.wall_clock_total).sum(),
                starts,
            });
        }
    }
    let mut slopes = Vec::new();
    for &method in methods {
        let mine: Vec<&ScalingPanel> = panels.iter().filter(|p| p.method == method).collect();
        let x: Vec<f64> = mine.iter().map(|p| p.products as f64).collect();
        let y: Vec<f64> = mine.iter().map(|p| p.time_per_inner_iter).collect();
        slopes.push((method, fit_log_slope(&x, &y)?));
    }
    Ok(ScalingReport {
        environment: Environment::capture(config.threads),
        panels,
        slopes,
    })
}

impl ScalingReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<7} {:>6} {:>16} {:>12}", "method", "J", "s/inner iter", "total (s)");
        for p in &self.panels {
            let _ = writeln!(out, "{:<7} {:>6} {:>16.6e} {:>12.4}", p.method.name(), p.products, p.time_per_inner_iter, p.wall_clock_total);
        }
        for (m, s) in &self.slopes {
            let res: Vec<String> = s.residuals.iter().map(|r| format!("{r:.4}")).collect();
            let _ = writeln!(out, "{m}: slope {:.4} intercept {:.4} residuals [{}]", s.slope, s.intercept, res.join(", "));
        }
        out
    }
}
