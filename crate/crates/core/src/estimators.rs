//! Outer loops for the three estimators, starting values, convergence checks
//! and multi-start selection.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, MeanUtilities, ModelParameters, OutsideProbs, SigmaPart};
use crate::error::{BlpError, Result};
use crate::gmm::{
    ablp_map, concentrated_g, concentrated_q, concentrated_q_ablp, linear_iv_gmm_beta,
    minimize_pseudo_gmm, AblpGradient, GmmSetup, PseudoCriterion, WeightMatrix,
};
use crate::inversion::{
    contraction_step, logit_delta, newton_kantorovich_step, solve_delta, InversionMethod,
    InversionSettings,
};
use crate::model::outside_probs;
use crate::optimize::{minimize, OptimizerSettings, Termination};
use crate::parallel::{default_threads, Executor};
use crate::rng::{purpose, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Npgmm,
    Ablp,
    Nfxp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Npgmm, Method::Ablp, Method::Nfxp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Npgmm => "npgmm",
            Method::Ablp => "ablp",
            Method::Nfxp => "nfxp",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = BlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "npgmm" => Ok(Method::Npgmm),
            "ablp" => Ok(Method::Ablp),
            "nfxp" => Ok(Method::Nfxp),
            other => Err(BlpError::InvalidInput(format!("unknown method '{other}'"))),
        }
    }
}

/// The δ update of the NP-GMM outer loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterStep {
    Newton,
    Contraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub n_starts: usize,
    pub optimizer: OptimizerSettings,
    pub inversion: InversionSettings,
    pub threads: usize,
    pub npgmm_step: OuterStep,
    pub ablp_gradient: AblpGradient,
    /// Abort a start once its inner criterion exceeds this multiple of the
    /// criterion at the start.
    pub divergence_factor: f64,
    /// Run starts concurrently; per-start timings are then not comparable.
    pub concurrent_starts: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_outer: 1e-6,
            max_outer: 100,
            n_starts: 5,
            optimizer: OptimizerSettings::default(),
            inversion: InversionSettings::default(),
            threads: default_threads(),
            npgmm_step: OuterStep::Newton,
            ablp_gradient: AblpGradient::Analytic,
            divergence_factor: 10.0,
            concurrent_starts: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_outer > 0.0) {
            return Err(BlpError::InvalidInput("tol_outer must be positive".into()));
        }
        if self.max_outer == 0 || self.n_starts == 0 || self.threads == 0 {
            return Err(BlpError::InvalidInput(
                "max_outer, n_starts and threads must be at least 1".into(),
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(BlpError::InvalidInput("divergence_factor must exceed 1".into()));
        }
        self.optimizer.validate()?;
        self.inversion.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationState {
    pub delta: MeanUtilities,
    pub lambda: OutsideProbs,
    pub theta: ModelParameters,
    pub outer_iter: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingPanels {
    pub wall_clock_total: f64,
    pub time_per_inner_iter: f64,
    pub time_per_criterion_eval: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_criterion_evals: usize,
    /// Wall-clock spent in the inner loop; divided by n_inner gives
    /// time_per_inner_iter.
    pub inner_time_total: f64,
    /// Wall-clock spent inside criterion evaluations.
    pub criterion_time_total: f64,
}

impl TimingPanels {
    fn finish(&mut self, total: f64) {
        self.wall_clock_total = total;
        self.time_per_inner_iter = if self.n_inner > 0 {
            self.inner_time_total / self.n_inner as f64
        } else {
            0.0
        };
        self.time_per_criterion_eval = if self.n_criterion_evals > 0 {
            self.criterion_time_total / self.n_criterion_evals as f64
        } else {
            0.0
        };
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// ‖∇_θ₂ Q‖_∞ of the method's own criterion at the reported estimate.
    pub gradient_norm: f64,
    /// max |ln s − ln 𝓈(δ̂, σ̂)|.
    pub share_residual: f64,
    pub last_delta_change: f64,
    pub last_theta_change: f64,
    /// Inner minimizations that stopped short of the gradient tolerance.
    pub inner_not_converged: usize,
    /// Newton steps that fell back to the contraction.
    pub newton_fallbacks: usize,
    pub diverged: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub theta_hat: ModelParameters,
    pub delta_hat: MeanUtilities,
    pub lambda_hat: OutsideProbs,
    pub criterion_value: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub criterion_evals: usize,
    pub gradient_evals: usize,
    pub timings: TimingPanels,
    pub start_index: usize,
    pub diagnostics: FitDiagnostics,
}

/// One starting point: mean utilities solved at the starting σ-part.
#[derive(Clone, Debug, PartialEq)]
pub struct Start {
    pub index: usize,
    pub delta: MeanUtilities,
    pub params: ModelParameters,
    /// Substream the start was drawn from; differs from `index` when earlier
    /// draws failed to invert.
    pub substream: u64,
}

/// δ⁰ = ln s − ln s₀, σ-part 0 and β from linear IV-GMM at δ⁰.
pub fn logit_start(ds: &MarketDataset, w: &WeightMatrix) -> Result<(MeanUtilities, ModelParameters)> {
    let delta: Vec<f64> = (0..ds.n_markets())
        .flat_map(|t| logit_delta(ds.market(t).shares))
        .collect();
    let delta = MeanUtilities::new(ds.n_products(), delta);
    let beta = linear_iv_gmm_beta(&delta, ds, w)?;
    let params = ModelParameters::new(beta, SigmaPart::zeros(ds.n_chars(), ds.n_demographics()))?;
    Ok((delta, params))
}

fn solve_all(
    ds: &MarketDataset,
    sp: &SigmaPart,
    settings: &InversionSettings,
    exec: &Executor,
    warm: Option<&MeanUtilities>,
) -> Result<MeanUtilities> {
    let markets = exec.try_map_markets(ds.n_markets(), |t| {
        let m = ds.market(t);
        let start = warm.map(|w| w.market(t));
        Ok(solve_delta(m.shares, &m, sp, settings, InversionMethod::Newton, start)?.delta)
    })?;
    Ok(MeanUtilities::from_markets(ds.n_products(), markets))
}

/// Starting points σ⁰_k = 0.5·|β̂_k,logit|·U_k with π⁰ = 0 and δ⁰ solved at σ⁰.
/// A draw whose inversion fails is replaced by the next unused substream.
pub fn random_starts(
    ds: &MarketDataset,
    w: &WeightMatrix,
    n_starts: usize,
    seed: u64,
    settings: &InversionSettings,
    exec: &Executor,
) -> Result<Vec<Start>> {
    if n_starts == 0 {
        return Err(BlpError::InvalidInput("n_starts must be at least 1".into()));
    }
    let (_, logit) = logit_start(ds, w)?;
    let k = ds.n_chars();
    let mut next_stream = n_starts as u64;
    let mut starts = Vec::with_capacity(n_starts);
    for index in 0..n_starts {
        let mut stream = index as u64;
        let mut attempts = 0;
        loop {
            let mut rng = substream(seed, purpose::START, stream, 0);
            let sigma: Vec<f64> = (0..k)
                .map(|kk| 0.5 * logit.beta[kk].abs() * rng.random::<f64>())
                .collect();
            let mut sp = SigmaPart::zeros(k, ds.n_demographics());
            sp.sigma = DVector::from_vec(sigma);
            match solve_all(ds, &sp, settings, exec, None) {
                Ok(delta) => {
                    let beta = linear_iv_gmm_beta(&delta, ds, w)?;
                    starts.push(Start {
                        index,
                        delta,
                        params: ModelParameters::new(beta, sp)?,
                        substream: stream,
                    });
                    break;
                }
                Err(e) if e.is_input_error() => return Err(e),
                Err(e) => {
                    attempts += 1;
                    if attempts > 20 {
                        return Err(e);
                    }
                    stream = next_stream;
                    next_stream += 1;
                }
            }
        }
    }
    Ok(starts)
}

pub fn check_convergence(prev: &EstimationState, curr: &EstimationState, tol: f64) -> bool {
    let dd = prev.delta.max_abs_diff(&curr.delta);
    let dt = crate::data::max_abs_diff(&prev.theta.to_vec(), &curr.theta.to_vec());
    dd < tol && dt < tol
}

/// Lowest criterion among converged results (ties to the lowest start
/// index); with no converged result, the lowest criterion overall, which
/// keeps `converged == false`.
pub fn multi_start_select(results: &[FitResult]) -> Result<FitResult> {
    if results.is_empty() {
        return Err(BlpError::InvalidInput("no estimation results to select from".into()));
    }
    let pick = |pool: Vec<&FitResult>| -> Option<FitResult> {
        pool.into_iter()
            .filter(|r| !r.criterion_value.is_nan())
            .min_by(|a, b| {
                a.criterion_value
                    .total_cmp(&b.criterion_value)
                    .then(a.start_index.cmp(&b.start_index))
            })
            .cloned()
    };
    let converged: Vec<&FitResult> = results.iter().filter(|r| r.converged).collect();
    if let Some(best) = pick(converged) {
        return Ok(best);
    }
    Ok(pick(results.iter().collect()).unwrap_or_else(|| results[0].clone()))
}

fn lambda_of(ds: &MarketDataset, delta: &MeanUtilities, sp: &SigmaPart, exec: &Executor) -> Result<OutsideProbs> {
    let markets = exec.try_map_markets(ds.n_markets(), |t| outside_probs(delta.market(t), &ds.market(t), sp))?;
    OutsideProbs::from_markets(ds.n_draws(), markets)
}

fn share_residual(ds: &MarketDataset, delta: &MeanUtilities, sp: &SigmaPart, exec: &Executor) -> Result<f64> {
    let per_market = exec.try_map_markets(ds.n_markets(), |t| {
        let m = ds.market(t);
        let pred = crate::model::predict_shares(delta.market(t), &m, sp)?;
        Ok(m.shares
            .iter()
            .zip(&pred)
            .map(|(s, p)| (s.ln() - p.ln()).abs())
            .fold(0.0, f64::max))
    })?;
    Ok(per_market.into_iter().fold(0.0, f64::max))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Running state of one fit, kept outside the fallible loop so a failure can
/// still report the last iterate.
struct Progress {
    method: Method,
    start_index: usize,
    clock: Instant,
    state: EstimationState,
    criterion_value: f64,
    inner_iters: usize,
    criterion_evals: usize,
    gradient_evals: usize,
    timings: TimingPanels,
    diagnostics: FitDiagnostics,
}

impl Progress {
    fn new(method: Method, start: &Start, ds: &MarketDataset, exec: &Executor) -> Result<Self> {
        let lambda = lambda_of(ds, &start.delta, &start.params.sigma_part, exec)?;
        Ok(Self {
            method,
            start_index: start.index,
            clock: Instant::now(),
            state: EstimationState {
                delta: start.delta.clone(),
                lambda,
                theta: start.params.clone(),
                outer_iter: 0,
            },
            criterion_value: f64::INFINITY,
            inner_iters: 0,
            criterion_evals: 0,
            gradient_evals: 0,
            timings: TimingPanels::default(),
            diagnostics: FitDiagnostics::default(),
        })
    }

    fn into_result(mut self, converged: bool) -> FitResult {
        self.timings.n_outer = self.state.outer_iter;
        self.timings.n_inner = self.inner_iters;
        self.timings.n_criterion_evals = self.criterion_evals;
        self.timings.finish(self.clock.elapsed().as_secs_f64());
        FitResult {
            method: self.method,
            theta_hat: self.state.theta,
            delta_hat: self.state.delta,
            lambda_hat: self.state.lambda,
            criterion_value: self.criterion_value,
            converged,
            outer_iters: self.timings.n_outer,
            inner_iters: self.inner_iters,
            criterion_evals: self.criterion_evals,
            gradient_evals: self.gradient_evals,
            timings: self.timings,
            start_index: self.start_index,
            diagnostics: self.diagnostics,
        }
    }

    fn fail(mut self, err: BlpError) -> FitResult {
        self.diagnostics.failure = Some(err.to_string());
        self.into_result(false)
    }
}

fn check_start(ds: &MarketDataset, start: &Start) -> Result<()> {
    if start.delta.delta.len() != ds.n_obs() {
        return Err(BlpError::dimension_mismatch("starting mean utilities", ds.n_obs(), start.delta.delta.len()));
    }
    if start.params.beta.len() != ds.n_chars() {
        return Err(BlpError::dimension_mismatch("starting beta", ds.n_chars(), start.params.beta.len()));
    }
    if ds.n_markets() > 0 {
        start.params.sigma_part.check(&ds.market(0))?;
    }
    if !start.delta.delta.iter().all(|d| d.is_finite()) {
        return Err(BlpError::InvalidInput("starting mean utilities must be finite".into()));
    }
    Ok(())
}

enum LoopEnd {
    Converged,
    MaxOuter,
    Diverged,
}

/// Nested pseudo-GMM: λ update, pseudo-GMM minimization at fixed λ, then one
/// Newton–Kantorovich step for δ, repeated until δ and θ settle.
pub fn fit_npgmm(ds: &MarketDataset, w: &WeightMatrix, config: &SolverConfig, start: &Start) -> Result<FitResult> {
    config.validate()?;
    check_start(ds, start)?;
    let exec = Executor::new(config.threads)?;
    let setup = GmmSetup::new(ds, w)?;
    let mut progress = Progress::new(Method::Npgmm, start, ds, &exec)?;
    match npgmm_loop(ds, &setup, config, &exec, &mut progress) {
        Ok(end) => npgmm_finish(ds, &setup, config, &exec, progress, end),
        Err(e) if e.is_input_error() => Err(e),
        Err(e) => Ok(progress.fail(e)),
    }
}

fn npgmm_loop(
    ds: &MarketDataset,
    setup: &GmmSetup,
    config: &SolverConfig,
    exec: &Executor,
    p: &mut Progress,
) -> Result<LoopEnd> {
    let mut hessian: Option<DMatrix<f64>> = None;
    let mut baseline: Option<f64> = None;
    while p.state.outer_iter < config.max_outer {
        let lambda = lambda_of(ds, &p.state.delta, &p.state.theta.sigma_part, exec)?;
        let clock = Instant::now();
        let fit = minimize_pseudo_gmm(
            PseudoCriterion::Npgmm(&lambda),
            &p.state.theta.sigma_part,
            setup,
            ds,
            &config.inversion,
            &config.optimizer,
            exec,
            hessian.as_ref(),
        )?;
        p.timings.inner_time_total += clock.elapsed().as_secs_f64();
        p.timings.criterion_time_total += fit.eval_seconds;
        p.inner_iters += fit.iterations;
        p.criterion_evals += fit.criterion_evals;
        p.gradient_evals += fit.gradient_evals;
        p.diagnostics.inner_not_converged += usize::from(!fit.converged());
        p.diagnostics.gradient_norm = inf_norm(&fit.gradient);
        p.criterion_value = fit.value;
        let base = *baseline.get_or_insert(fit.start_value);
        hessian = Some(fit.inverse_hessian.clone());

        let sp = &fit.params.sigma_part;
        let step = config.npgmm_step;
        let inversion = &config.inversion;
        let updates = exec.try_map_markets(ds.n_markets(), |t| {
            let m = ds.market(t);
            let d = p.state.delta.market(t);
            match step {
                OuterStep::Newton => {
                    let s = newton_kantorovich_step(d, m.shares, &m, sp, inversion)?;
                    Ok((s.delta, s.fell_back))
                }
                OuterStep::Contraction => Ok((contraction_step(d, m.shares, &m, sp)?, false)),
            }
        })?;
        let mut markets = Vec::with_capacity(updates.len());
        for (d, fell_back) in updates {
            p.diagnostics.newton_fallbacks += usize::from(fell_back);
            markets.push(d);
        }
        let next = EstimationState {
            delta: MeanUtilities::from_markets(ds.n_products(), markets),
            lambda,
            theta: fit.params,
            outer_iter: p.state.outer_iter + 1,
        };
        let converged = record_step(p, next, config.tol_outer);
        if base > 0.0 && p.criterion_value > config.divergence_factor * base {
            p.diagnostics.diverged = true;
            return Ok(LoopEnd::Diverged);
        }
        if converged {
            return Ok(LoopEnd::Converged);
        }
    }
    Ok(LoopEnd::MaxOuter)
}

/// Installs `next` as the current state and reports whether the change from
/// the previous state is within tolerance.
fn record_step(p: &mut Progress, next: EstimationState, tol: f64) -> bool {
    p.diagnostics.last_delta_change = p.state.delta.max_abs_diff(&next.delta);
    p.diagnostics.last_theta_change =
        crate::data::max_abs_diff(&p.state.theta.to_vec(), &next.theta.to_vec());
    let converged = check_convergence(&p.state, &next, tol);
    p.state = next;
    converged
}

fn npgmm_finish(
    ds: &MarketDataset,
    setup: &GmmSetup,
    config: &SolverConfig,
    exec: &Executor,
    mut p: Progress,
    end: LoopEnd,
) -> Result<FitResult> {
    let sp = p.state.theta.sigma_part.clone();
    if !matches!(end, LoopEnd::Converged) {
        p.diagnostics.share_residual = share_residual(ds, &p.state.delta, &sp, exec)?;
        return Ok(p.into_result(false));
    }
    // Certify the fixed point: exact inversion at σ̂, λ̂ from it, and the
    // criterion and its gradient at (λ̂, σ̂).
    let certified = (|| -> Result<()> {
        let delta = solve_all(ds, &sp, &config.inversion, exec, Some(&p.state.delta))?;
        let lambda = lambda_of(ds, &delta, &sp, exec)?;
        let eval = concentrated_q(&lambda, &sp, setup, ds, exec, true)?;
        p.diagnostics.share_residual = share_residual(ds, &delta, &sp, exec)?;
        p.diagnostics.gradient_norm = inf_norm(eval.gradient.as_deref().unwrap_or(&[]));
        p.criterion_value = eval.value;
        p.state.theta = ModelParameters::new(eval.beta, sp.clone())?;
        p.state.delta = delta;
        p.state.lambda = lambda;
        Ok(())
    })();
    match certified {
        Ok(()) => Ok(p.into_result(true)),
        Err(e) if e.is_input_error() => Err(e),
        Err(e) => Ok(p.fail(e)),
    }
}

/// Approximate BLP: pseudo-GMM over Q^ablp at fixed δ₀, then δ ← Ψ^ablp(δ₀, σ̂).
pub fn fit_ablp(ds: &MarketDataset, w: &WeightMatrix, config: &SolverConfig, start: &Start) -> Result<FitResult> {
    config.validate()?;
    check_start(ds, start)?;
    let exec = Executor::new(config.threads)?;
    let setup = GmmSetup::new(ds, w)?;
    let mut progress = Progress::new(Method::Ablp, start, ds, &exec)?;
    match ablp_loop(ds, &setup, config, &exec, &mut progress) {
        Ok(end) => {
            let converged = matches!(end, LoopEnd::Converged);
            let sp = progress.state.theta.sigma_part.clone();
            let finish = (|| -> Result<()> {
                progress.diagnostics.share_residual = share_residual(ds, &progress.state.delta, &sp, &exec)?;
                progress.state.lambda = lambda_of(ds, &progress.state.delta, &sp, &exec)?;
                let eval = concentrated_q_ablp(
                    &progress.state.delta,
                    &sp,
                    &setup,
                    ds,
                    &config.inversion,
                    &exec,
                    Some(config.ablp_gradient),
                )?;
                progress.diagnostics.gradient_norm = inf_norm(eval.gradient.as_deref().unwrap_or(&[]));
                Ok(())
            })();
            match finish {
                Ok(()) => Ok(progress.into_result(converged)),
                Err(e) if e.is_input_error() => Err(e),
                Err(e) => Ok(progress.fail(e)),
            }
        }
        Err(e) if e.is_input_error() => Err(e),
        Err(e) => Ok(progress.fail(e)),
    }
}

fn ablp_loop(
    ds: &MarketDataset,
    setup: &GmmSetup,
    config: &SolverConfig,
    exec: &Executor,
    p: &mut Progress,
) -> Result<LoopEnd> {
    let mut hessian: Option<DMatrix<f64>> = None;
    let mut baseline: Option<f64> = None;
    while p.state.outer_iter < config.max_outer {
        let clock = Instant::now();
        let fit = minimize_pseudo_gmm(
            PseudoCriterion::Ablp {
                delta0: &p.state.delta,
                gradient: config.ablp_gradient,
            },
            &p.state.theta.sigma_part,
            setup,
            ds,
            &config.inversion,
            &config.optimizer,
            exec,
            hessian.as_ref(),
        )?;
        p.timings.inner_time_total += clock.elapsed().as_secs_f64();
        p.timings.criterion_time_total += fit.eval_seconds;
        p.inner_iters += fit.iterations;
        p.criterion_evals += fit.criterion_evals;
        p.gradient_evals += fit.gradient_evals;
        p.diagnostics.inner_not_converged += usize::from(!fit.converged());
        p.diagnostics.gradient_norm = inf_norm(&fit.gradient);
        p.criterion_value = fit.value;
        let base = *baseline.get_or_insert(fit.start_value);
        hessian = Some(fit.inverse_hessian.clone());

        let delta = ablp_map(&p.state.delta, &fit.params.sigma_part, ds, &config.inversion, exec)?;
        let next = EstimationState {
            delta,
            lambda: p.state.lambda.clone(),
            theta: fit.params,
            outer_iter: p.state.outer_iter + 1,
        };
        let converged = record_step(p, next, config.tol_outer);
        if base > 0.0 && p.criterion_value > config.divergence_factor * base {
            p.diagnostics.diverged = true;
            return Ok(LoopEnd::Diverged);
        }
        if converged {
            return Ok(LoopEnd::Converged);
        }
    }
    Ok(LoopEnd::MaxOuter)
}

/// Nested fixed point: quasi-Newton on G with a full inversion at every trial
/// σ and the implicit-function gradient. Outer iterations are quasi-Newton
/// steps; inner iterations are inversion iterations.
pub fn fit_nfxp(ds: &MarketDataset, w: &WeightMatrix, config: &SolverConfig, start: &Start) -> Result<FitResult> {
    config.validate()?;
    check_start(ds, start)?;
    let exec = Executor::new(config.threads)?;
    let setup = GmmSetup::new(ds, w)?;
    let mut p = Progress::new(Method::Nfxp, start, ds, &exec)?;
    let (k, r) = (ds.n_chars(), ds.n_demographics());
    let mut warm = start.delta.clone();
    let mut inner = 0usize;
    let mut eval_time = 0.0;
    let clock = Instant::now();
    let outcome = minimize(
        |x| {
            let sp = SigmaPart::from_slice(k, r, x)?;
            let t0 = Instant::now();
            let eval = concentrated_g(&sp, &setup, ds, &exec, &config.inversion, Some(&warm), true);
            eval_time += t0.elapsed().as_secs_f64();
            let eval = eval?;
            inner += eval.inner_iterations;
            warm = eval.delta;
            Ok((eval.criterion.value, eval.criterion.gradient.expect("gradient requested")))
        },
        &start.params.sigma_part.to_vec(),
        &config.optimizer,
        None,
    );
    p.timings.inner_time_total = clock.elapsed().as_secs_f64();
    p.timings.criterion_time_total = eval_time;
    p.inner_iters = inner;
    let min = match outcome {
        Ok(m) => m,
        Err(e) if e.is_input_error() => return Err(e),
        Err(e) => return Ok(p.fail(e)),
    };
    p.criterion_evals = min.evaluations;
    p.gradient_evals = min.gradient_evaluations;
    p.state.outer_iter = min.iterations;
    p.diagnostics.gradient_norm = inf_norm(&min.gradient);
    // Quasi-Newton iterations end either at the gradient tolerance or, when
    // rounding stalls the line search, with the gradient already at the
    // outer tolerance.
    let converged = min.termination == Termination::GradientTolerance
        || (min.termination == Termination::LineSearchFailure && p.diagnostics.gradient_norm < config.tol_outer);
    let finish = (|| -> Result<()> {
        let sp = SigmaPart::from_slice(k, r, &min.x)?;
        let eval = concentrated_g(&sp, &setup, ds, &exec, &config.inversion, Some(&warm), false)?;
        p.criterion_value = eval.criterion.value;
        p.diagnostics.share_residual = share_residual(ds, &eval.delta, &sp, &exec)?;
        p.state.lambda = lambda_of(ds, &eval.delta, &sp, &exec)?;
        p.state.theta = ModelParameters::new(eval.criterion.beta, sp)?;
        p.state.delta = eval.delta;
        Ok(())
    })();
    match finish {
        Ok(()) => Ok(p.into_result(converged)),
        Err(e) if e.is_input_error() => Err(e),
        Err(e) => Ok(p.fail(e)),
    }
}

pub fn fit(method: Method, ds: &MarketDataset, w: &WeightMatrix, config: &SolverConfig, start: &Start) -> Result<FitResult> {
    match method {
        Method::Npgmm => fit_npgmm(ds, w, config, start),
        Method::Ablp => fit_ablp(ds, w, config, start),
        Method::Nfxp => fit_nfxp(ds, w, config, start),
    }
}

/// Runs `method` from every start, sequentially unless the config asks for
/// concurrent starts.
pub fn fit_starts(
    method: Method,
    ds: &MarketDataset,
    w: &WeightMatrix,
    config: &SolverConfig,
    starts: &[Start],
) -> Result<Vec<FitResult>> {
    if config.concurrent_starts && starts.len() > 1 {
        let pool = Executor::new(config.threads.min(starts.len()))?;
        let inner = SolverConfig {
            threads: 1,
            ..config.clone()
        };
        pool.try_map_markets(starts.len(), |i| fit(method, ds, w, &inner, &starts[i]))
    } else {
        starts.iter().map(|s| fit(method, ds, w, config, s)).collect()
    }
}
