//! Moments, weighting, β concentration and the three GMM criteria: the exact
//! criterion G, the pseudo criterion Q at fixed outside probabilities, and the
//! approximate-BLP criterion at a fixed expansion point.
//!
//! Moments are scaled by 1/(JT) throughout. Per-market pieces `Z_t'δ_t` and
//! `Z_t'(∂δ_t/∂θ₂)` are computed independently and summed in market order.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, MarketView, MeanUtilities, ModelParameters, OutsideProbs, SigmaPart};
use crate::error::{BlpError, Result, Site};
use crate::inversion::{solve_delta, InversionMethod, InversionSettings, ShareEvaluation};
use crate::linalg::LuFactor;
use crate::model::{
    closed_form_kernel, log_share_jacobian_from, log_share_param_jacobian, taste_shifts,
};
use crate::optimize::{minimize, OptimizerSettings, Termination};
use crate::parallel::Executor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    TwoStage,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
}

impl WeightMatrix {
    /// Accepts a user-supplied symmetric positive-definite matrix.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(BlpError::dimension_mismatch("weight matrix columns", w.nrows(), w.ncols()));
        }
        let scale = w.amax().max(1.0);
        if (&w - w.transpose()).amax() > 1e-10 * scale {
            return Err(BlpError::InvalidInput("weight matrix is not symmetric".into()));
        }
        if w.clone().cholesky().is_none() {
            return Err(BlpError::Singular("weight matrix is not positive definite".into()));
        }
        Ok(Self { w })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { w: &self.w * c }
    }
}

/// Instrument cross-product Z'Z, accumulated market by market.
fn instrument_gram(ds: &MarketDataset) -> DMatrix<f64> {
    let q = ds.n_instruments();
    let mut g = DMatrix::zeros(q, q);
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        for j in 0..m.n_products {
            let z = m.z_row(j);
            for a in 0..q {
                for b in 0..=a {
                    g[(a, b)] += z[a] * z[b];
                }
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            g[(b, a)] = g[(a, b)];
        }
    }
    g
}

/// Columns of a Gram matrix that are (numerically) spanned by earlier ones,
/// found with an incremental Cholesky factorization.
fn dependent_columns(g: &DMatrix<f64>) -> Vec<usize> {
    let q = g.nrows();
    let mut kept: Vec<usize> = Vec::new();
    // Rows of the lower Cholesky factor for the kept columns.
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..q {
        let mut v = Vec::with_capacity(kept.len());
        for (a, &ka) in kept.iter().enumerate() {
            let mut acc = g[(ka, c)];
            for b in 0..a {
                acc -= l[a][b] * v[b];
            }
            v.push(acc / l[a][a]);
        }
        let d = g[(c, c)] - v.iter().map(|x| x * x).sum::<f64>();
        if !(d > 1e-10 * g[(c, c)].max(f64::MIN_POSITIVE)) {
            dependent.push(c);
            continue;
        }
        v.push(d.sqrt());
        l.push(v);
        kept.push(c);
    }
    dependent
}

/// Zero-based instrument columns spanned by earlier columns.
pub fn collinear_instruments(ds: &MarketDataset) -> Vec<usize> {
    dependent_columns(&instrument_gram(ds))
}

/// The dataset without collinear instrument columns, and the dropped columns.
pub fn drop_collinear_instruments(ds: &MarketDataset) -> Result<(MarketDataset, Vec<usize>)> {
    let dropped = collinear_instruments(ds);
    if dropped.is_empty() {
        return Ok((ds.clone(), dropped));
    }
    let q = ds.n_instruments();
    let keep: Vec<usize> = (0..q).filter(|c| !dropped.contains(c)).collect();
    let mut z = Vec::with_capacity(ds.n_obs() * keep.len());
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        for j in 0..m.n_products {
            let row = m.z_row(j);
            z.extend(keep.iter().map(|&c| row[c]));
        }
    }
    Ok((ds.with_instruments(keep.len(), z)?, dropped))
}

pub fn build_weight_matrix(ds: &MarketDataset, kind: WeightKind) -> Result<WeightMatrix> {
    let q = ds.n_instruments();
    let g = instrument_gram(ds);
    let dependent = dependent_columns(&g);
    if !dependent.is_empty() {
        let names: Vec<String> = dependent.iter().map(|c| format!("z_{}", c + 1)).collect();
        return Err(BlpError::InvalidInput(format!(
            "instrument matrix is rank deficient; collinear columns: {}",
            names.join(", ")
        )));
    }
    match kind {
        WeightKind::Identity => Ok(WeightMatrix { w: DMatrix::identity(q, q) }),
        WeightKind::TwoStage => {
            let scaled = g / ds.n_obs() as f64;
            let chol = scaled
                .cholesky()
                .ok_or_else(|| BlpError::Singular("instrument second-moment matrix".into()))?;
            let mut w = chol.inverse();
            let wt = w.transpose();
            w = (&w + wt) * 0.5;
            Ok(WeightMatrix { w })
        }
    }
}

/// Sample moment vector m = (1/(JT)) Σ z_jt ξ_jt.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentVector {
    pub m: DVector<f64>,
}

pub fn sample_moments(xi: &MeanUtilities, ds: &MarketDataset) -> Result<MomentVector> {
    if xi.delta.len() != ds.n_obs() {
        return Err(BlpError::dimension_mismatch("residual vector", ds.n_obs(), xi.delta.len()));
    }
    let mut m = DVector::zeros(ds.n_instruments());
    for t in 0..ds.n_markets() {
        m += zt_vec(&ds.market(t), xi.market(t));
    }
    m /= ds.n_obs() as f64;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(BlpError::numerical("non-finite moment", Site::market(0)));
    }
    Ok(MomentVector { m })
}

fn zt_vec(market: &MarketView<'_>, v: &[f64]) -> DVector<f64> {
    let q = market.n_instruments;
    let mut out = DVector::zeros(q);
    for (j, vj) in v.iter().enumerate() {
        for (o, z) in out.iter_mut().zip(market.z_row(j)) {
            *o += z * vj;
        }
    }
    out
}

/// Z_t' D for D given J×p row-major.
fn zt_mat(market: &MarketView<'_>, d: &[f64], p: usize) -> DMatrix<f64> {
    let q = market.n_instruments;
    let mut out = DMatrix::zeros(q, p);
    for j in 0..market.n_products {
        let z = market.z_row(j);
        let row = &d[j * p..(j + 1) * p];
        for (a, za) in z.iter().enumerate() {
            for (m, dm) in row.iter().enumerate() {
                out[(a, m)] += za * dm;
            }
        }
    }
    out
}

/// Z'X, q×K.
fn instrument_characteristic_cross(ds: &MarketDataset) -> DMatrix<f64> {
    let k = ds.n_chars();
    let mut zx = DMatrix::zeros(ds.n_instruments(), k);
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        zx += zt_mat(&m, m.x, k);
    }
    zx
}

/// Quadratic form at a given β from Z'δ; the gradient covers (β, θ₂).
fn quadratic_at_beta(
    ds: &MarketDataset,
    w: &WeightMatrix,
    zd: &DVector<f64>,
    zdd: Option<&DMatrix<f64>>,
    beta: &DVector<f64>,
) -> Result<(f64, Option<Vec<f64>>)> {
    if w.dim() != ds.n_instruments() {
        return Err(BlpError::dimension_mismatch("weight matrix size", ds.n_instruments(), w.dim()));
    }
    let n_obs = ds.n_obs() as f64;
    let zx = instrument_characteristic_cross(ds);
    let moments = (zd - &zx * beta) / n_obs;
    let wm = w.matrix() * &moments;
    let value = moments.dot(&wm);
    let gradient = zdd.map(|zdd| {
        let scale = 2.0 / n_obs;
        let gb = -(zx.transpose() * &wm) * scale;
        let gs = zdd.transpose() * &wm * scale;
        gb.iter().chain(gs.iter()).copied().collect()
    });
    Ok((value, gradient))
}

/// Precomputed pieces of the concentrated criterion for one dataset and W.
#[derive(Clone, Debug)]
pub struct GmmSetup {
    n_obs: f64,
    w: DMatrix<f64>,
    /// Z'X, q×K.
    zx: DMatrix<f64>,
    /// (X'ZWZ'X)⁻¹X'ZW, K×q: β = proj · Z'δ.
    proj: DMatrix<f64>,
    /// I − Z'X·proj, q×q: Z'ξ = resid · Z'δ.
    resid: DMatrix<f64>,
}

impl GmmSetup {
    pub fn new(ds: &MarketDataset, w: &WeightMatrix) -> Result<Self> {
        let q = ds.n_instruments();
        if w.dim() != q {
            return Err(BlpError::dimension_mismatch("weight matrix size", q, w.dim()));
        }
        let zx = instrument_characteristic_cross(ds);
        let xzw = zx.transpose() * w.matrix();
        let a = &xzw * &zx;
        let lu = a.clone().lu();
        let a_inv = lu.try_inverse().ok_or_else(|| {
            BlpError::InvalidInput("X'ZWZ'X is singular; β is not identified by these instruments".into())
        })?;
        let cond_ok = a.amax() * a_inv.amax() < 1e14;
        if !cond_ok || a_inv.iter().any(|v| !v.is_finite()) {
            return Err(BlpError::InvalidInput(
                "X'ZWZ'X is numerically singular; β is not identified by these instruments".into(),
            ));
        }
        let proj = a_inv * xzw;
        let resid = DMatrix::identity(q, q) - &zx * &proj;
        Ok(Self {
            n_obs: ds.n_obs() as f64,
            w: w.matrix().clone(),
            zx,
            proj,
            resid,
        })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn zx(&self) -> &DMatrix<f64> {
        &self.zx
    }

    pub fn n_obs(&self) -> f64 {
        self.n_obs
    }

    /// β̂(δ) from the stacked Z'δ.
    pub fn beta_from(&self, zd: &DVector<f64>) -> DVector<f64> {
        &self.proj * zd
    }

    /// Quadratic form with β concentrated out, from Z'δ and optionally
    /// Z'(∂δ/∂θ₂).
    pub fn concentrate(&self, zd: &DVector<f64>, zdd: Option<&DMatrix<f64>>) -> CriterionEval {
        let beta = &self.proj * zd;
        let moments = (&self.resid * zd) / self.n_obs;
        let wm = &self.w * &moments;
        let value = moments.dot(&wm);
        let gradient = zdd.map(|zdd| {
            let g = (&self.resid * zdd).transpose() * &wm * (2.0 / self.n_obs);
            g.iter().copied().collect()
        });
        CriterionEval {
            value,
            beta,
            moments,
            gradient,
        }
    }
}

/// Criterion value with the concentrated β and, when requested, the gradient
/// with respect to the nonlinear parameters.
#[derive(Clone, Debug)]
pub struct CriterionEval {
    pub value: f64,
    pub beta: DVector<f64>,
    pub moments: DVector<f64>,
    pub gradient: Option<Vec<f64>>,
}

/// β = (X'ZWZ'X)⁻¹X'ZWZ'δ.
pub fn linear_iv_gmm_beta(
    delta: &MeanUtilities,
    ds: &MarketDataset,
    w: &WeightMatrix,
) -> Result<DVector<f64>> {
    check_delta_len(delta, ds)?;
    let setup = GmmSetup::new(ds, w)?;
    Ok(setup.beta_from(&stacked_zd(delta, ds)))
}

fn check_delta_len(delta: &MeanUtilities, ds: &MarketDataset) -> Result<()> {
    if delta.delta.len() != ds.n_obs() || delta.products != ds.n_products() {
        return Err(BlpError::dimension_mismatch("mean utility vector", ds.n_obs(), delta.delta.len()));
    }
    Ok(())
}

fn stacked_zd(delta: &MeanUtilities, ds: &MarketDataset) -> DVector<f64> {
    let mut zd = DVector::zeros(ds.n_instruments());
    for t in 0..ds.n_markets() {
        zd += zt_vec(&ds.market(t), delta.market(t));
    }
    zd
}

struct MarketPiece {
    zd: DVector<f64>,
    zdd: Option<DMatrix<f64>>,
}

fn fold_pieces(pieces: Vec<MarketPiece>, q: usize, p: usize, want_grad: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let mut zd = DVector::zeros(q);
    let mut zdd = want_grad.then(|| DMatrix::zeros(q, p));
    for piece in pieces {
        zd += piece.zd;
        if let (Some(acc), Some(d)) = (zdd.as_mut(), piece.zdd) {
            *acc += d;
        }
    }
    (zd, zdd)
}

fn check_params(params: &ModelParameters, ds: &MarketDataset) -> Result<()> {
    if params.beta.len() != ds.n_chars() {
        return Err(BlpError::dimension_mismatch("beta length", ds.n_chars(), params.beta.len()));
    }
    check_sigma_part(&params.sigma_part, ds)
}

fn check_sigma_part(sp: &SigmaPart, ds: &MarketDataset) -> Result<()> {
    if ds.n_markets() > 0 {
        sp.check(&ds.market(0))?;
    }
    Ok(())
}

fn check_lambda(lambda: &OutsideProbs, ds: &MarketDataset) -> Result<()> {
    if lambda.draws != ds.n_draws() || lambda.lambda.len() != ds.n_markets() * ds.n_draws() {
        return Err(BlpError::dimension_mismatch(
            "outside probabilities",
            ds.n_markets() * ds.n_draws(),
            lambda.lambda.len(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pseudo criterion Q at fixed λ

/// Closed-form δ(λ, θ₂) for every market, with Z'δ and optionally Z'∂δ/∂θ₂.
fn q_pieces(
    lambda: &OutsideProbs,
    sp: &SigmaPart,
    ds: &MarketDataset,
    exec: &Executor,
    want_grad: bool,
) -> Result<Vec<MarketPiece>> {
    let p = sp.n_params();
    exec.try_map_markets(ds.n_markets(), |t| {
        let market = ds.market(t);
        let taste = taste_shifts(&market, sp);
        let cf = closed_form_kernel(market.shares, lambda.market(t), &market, &taste, want_grad)?;
        Ok(MarketPiece {
            zd: zt_vec(&market, &cf.delta),
            zdd: cf.gradients.map(|g| zt_mat(&market, &g, p)),
        })
    })
}

/// Closed-form δ(λ, θ₂) for all markets.
pub fn delta_given_lambda(
    lambda: &OutsideProbs,
    sp: &SigmaPart,
    ds: &MarketDataset,
    exec: &Executor,
) -> Result<MeanUtilities> {
    check_lambda(lambda, ds)?;
    check_sigma_part(sp, ds)?;
    let markets = exec.try_map_markets(ds.n_markets(), |t| {
        let market = ds.market(t);
        let taste = taste_shifts(&market, sp);
        Ok(closed_form_kernel(market.shares, lambda.market(t), &market, &taste, false)?.delta)
    })?;
    Ok(MeanUtilities::from_markets(ds.n_products(), markets))
}

/// Q(λ, θ) with β concentrated out.
pub fn concentrated_q(
    lambda: &OutsideProbs,
    sp: &SigmaPart,
    setup: &GmmSetup,
    ds: &MarketDataset,
    exec: &Executor,
    want_grad: bool,
) -> Result<CriterionEval> {
    check_lambda(lambda, ds)?;
    check_sigma_part(sp, ds)?;
    let pieces = q_pieces(lambda, sp, ds, exec, want_grad)?;
    let (zd, zdd) = fold_pieces(pieces, ds.n_instruments(), sp.n_params(), want_grad);
    Ok(setup.concentrate(&zd, zdd.as_ref()))
}

/// Q(λ, θ) at the supplied β.
pub fn criterion_q(
    lambda: &OutsideProbs,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    exec: &Executor,
) -> Result<f64> {
    Ok(q_at_beta(lambda, params, ds, w, exec, false)?.0)
}

/// ∇_θ Q(λ, θ) over (β, σ, π) at the supplied β.
pub fn criterion_q_gradient(
    lambda: &OutsideProbs,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    exec: &Executor,
) -> Result<Vec<f64>> {
    Ok(q_at_beta(lambda, params, ds, w, exec, true)?.1.expect("gradient requested"))
}

fn q_at_beta(
    lambda: &OutsideProbs,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    exec: &Executor,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_lambda(lambda, ds)?;
    check_params(params, ds)?;
    let sp = &params.sigma_part;
    let pieces = q_pieces(lambda, sp, ds, exec, want_grad)?;
    let (zd, zdd) = fold_pieces(pieces, ds.n_instruments(), sp.n_params(), want_grad);
    quadratic_at_beta(ds, w, &zd, zdd.as_ref(), &params.beta)
}

// ---------------------------------------------------------------------------
// Exact criterion G

/// Result of evaluating G with full inversions.
#[derive(Clone, Debug)]
pub struct ExactEval {
    pub criterion: CriterionEval,
    pub delta: MeanUtilities,
    /// Inversion iterations summed over markets.
    pub inner_iterations: usize,
}

/// G with β concentrated out: solves δ*(θ₂) per market (warm started when
/// `warm` is given) and, when requested, differentiates through the solution
/// with the implicit function theorem.
pub fn concentrated_g(
    sp: &SigmaPart,
    setup: &GmmSetup,
    ds: &MarketDataset,
    exec: &Executor,
    settings: &InversionSettings,
    warm: Option<&MeanUtilities>,
    want_grad: bool,
) -> Result<ExactEval> {
    check_sigma_part(sp, ds)?;
    if let Some(w) = warm {
        check_delta_len(w, ds)?;
    }
    let p = sp.n_params();
    let results = exec.try_map_markets(ds.n_markets(), |t| {
        let market = ds.market(t);
        let start = warm.map(|w| w.market(t));
        let solved = match solve_delta(market.shares, &market, sp, settings, InversionMethod::Newton, start) {
            Ok(s) => s,
            Err(e) if start.is_some() && !e.is_input_error() => {
                solve_delta(market.shares, &market, sp, settings, InversionMethod::Newton, None)?
            }
            Err(e) => return Err(e),
        };
        let zdd = if want_grad {
            let d = implicit_delta_gradient(&solved.delta, &market, sp)?;
            Some(zt_mat(&market, &d, p))
        } else {
            None
        };
        Ok((
            MarketPiece {
                zd: zt_vec(&market, &solved.delta),
                zdd,
            },
            solved.delta,
            solved.iterations,
        ))
    })?;
    let mut pieces = Vec::with_capacity(results.len());
    let mut deltas = Vec::with_capacity(results.len());
    let mut inner = 0;
    for (piece, delta, iters) in results {
        pieces.push(piece);
        deltas.push(delta);
        inner += iters;
    }
    let (zd, zdd) = fold_pieces(pieces, ds.n_instruments(), p, want_grad);
    Ok(ExactEval {
        criterion: setup.concentrate(&zd, zdd.as_ref()),
        delta: MeanUtilities::from_markets(ds.n_products(), deltas),
        inner_iterations: inner,
    })
}

/// dδ*/dθ₂ = −[∂ln𝓈/∂δ']⁻¹ ∂ln𝓈/∂θ₂ at a solved δ, J×p row-major.
pub(crate) fn implicit_delta_gradient(
    delta_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<Vec<f64>> {
    let probs = crate::model::choice_probabilities(delta_t, market, sp)?;
    let (jac, shares) = log_share_jacobian_from(&probs, market.index)?;
    let dlog = log_share_param_jacobian(&probs, &shares, market);
    let lu = LuFactor::new(&jac).ok_or(BlpError::SingularJacobian {
        site: Site::market(market.index),
        condition: f64::INFINITY,
    })?;
    let sol = lu.solve_matrix(&dlog);
    let (j_count, p) = (sol.nrows(), sol.ncols());
    let mut out = Vec::with_capacity(j_count * p);
    for j in 0..j_count {
        for m in 0..p {
            out.push(-sol[(j, m)]);
        }
    }
    Ok(out)
}

/// G(θ) = m'Wm with δ = 𝓈⁻¹(s; θ₂) and ξ = δ − Xβ at the supplied β.
pub fn criterion_g(
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    settings: &InversionSettings,
    exec: &Executor,
) -> Result<f64> {
    check_params(params, ds)?;
    let sp = &params.sigma_part;
    let deltas = exec.try_map_markets(ds.n_markets(), |t| {
        let market = ds.market(t);
        Ok(solve_delta(market.shares, &market, sp, settings, InversionMethod::Newton, None)?.delta)
    })?;
    let delta = MeanUtilities::from_markets(ds.n_products(), deltas);
    Ok(quadratic_at_beta(ds, w, &stacked_zd(&delta, ds), None, &params.beta)?.0)
}

// ---------------------------------------------------------------------------
// Approximate-BLP map and criterion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblpGradient {
    Analytic,
    /// Forward differences of the map, one extra evaluation per parameter.
    FiniteDifference,
}

struct AblpMarket {
    psi: Vec<f64>,
    /// ∂Ψ/∂θ₂, J×p row-major.
    dpsi: Option<Vec<f64>>,
}

fn ablp_market(
    delta0_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
    cond_limit: f64,
    gradient: Option<AblpGradient>,
) -> Result<AblpMarket> {
    let eval = ShareEvaluation::new(delta0_t, market.shares, market, sp)?;
    let (lu, condition) = eval.factor_jacobian(market.index)?;
    let lu = match lu {
        Some(lu) if condition < cond_limit => lu,
        _ => {
            return Err(BlpError::SingularJacobian {
                site: Site::market(market.index),
                condition,
            })
        }
    };
    let y = lu.solve(&eval.residual);
    let psi: Vec<f64> = delta0_t.iter().zip(&y).map(|(d, s)| d + s).collect();
    let dpsi = match gradient {
        None => None,
        Some(AblpGradient::Analytic) => Some(ablp_analytic_gradient(&eval, &lu, &y, market)),
        Some(AblpGradient::FiniteDifference) => {
            let base = sp.to_vec();
            let (j_count, p) = (market.n_products, base.len());
            let mut out = vec![0.0; j_count * p];
            for m in 0..p {
                let mut bumped = base.clone();
                let h = 1e-6 * base[m].abs().max(1.0);
                bumped[m] += h;
                let sp_h = SigmaPart::from_slice(sp.n_chars(), sp.n_demo(), &bumped)?;
                let shifted = ablp_market(delta0_t, market, &sp_h, cond_limit, None)?.psi;
                for j in 0..j_count {
                    out[j * p + m] = (shifted[j] - psi[j]) / h;
                }
            }
            Some(out)
        }
    };
    Ok(AblpMarket { psi, dpsi })
}

/// ∂Ψ/∂θ₂ = −J⁻¹[(∂J/∂θ₂) y + ∂ln𝓈/∂θ₂] with y = J⁻¹r, using directional
/// derivatives of J·y so the J×J derivative matrices are never formed.
fn ablp_analytic_gradient(
    eval: &ShareEvaluation,
    lu: &LuFactor,
    y: &[f64],
    market: &MarketView<'_>,
) -> Vec<f64> {
    let probs = &eval.probs;
    let s = &eval.predicted;
    let (n, j_count) = (probs.n_draws, probs.n_products);
    let p = market.n_chars * (1 + market.n_demo);
    let nf = n as f64;
    let ybar: Vec<f64> = (0..n)
        .map(|i| probs.row(i).iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let mut f = vec![0.0; j_count];
    for i in 0..n {
        for (j, pij) in probs.row(i).iter().enumerate() {
            f[j] += pij * (y[j] - ybar[i]);
        }
    }
    f.iter_mut().for_each(|v| *v /= nf);

    let mut out = vec![0.0; j_count * p];
    let mut a = vec![0.0; j_count];
    let mut dp = vec![0.0; j_count];
    let mut ds = vec![0.0; j_count];
    let mut df = vec![0.0; j_count];
    for m in 0..p {
        ds.iter_mut().for_each(|v| *v = 0.0);
        df.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let row = probs.row(i);
            let mut abar = 0.0;
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = market.offset_derivative(i, j, m);
                abar += row[j] * *aj;
            }
            let mut dybar = 0.0;
            for j in 0..j_count {
                dp[j] = row[j] * (a[j] - abar);
                dybar += dp[j] * y[j];
            }
            for j in 0..j_count {
                ds[j] += dp[j];
                df[j] += dp[j] * (y[j] - ybar[i]) - row[j] * dybar;
            }
        }
        let bracket: Vec<f64> = (0..j_count)
            .map(|j| {
                let (dsj, dfj) = (ds[j] / nf, df[j] / nf);
                dfj / s[j] - f[j] * dsj / (s[j] * s[j]) + dsj / s[j]
            })
            .collect();
        let col = lu.solve(&bracket);
        for j in 0..j_count {
            out[j * p + m] = -col[j];
        }
    }
    out
}

/// Ψ^ablp(δ₀, θ₂) = δ₀ + [∂ln𝓈/∂δ'(δ₀)]⁻¹(ln s − ln𝓈(δ₀)) per market. Fails on
/// a Jacobian whose condition estimate reaches `settings.cond_limit`.
pub fn ablp_map(
    delta0: &MeanUtilities,
    sp: &SigmaPart,
    ds: &MarketDataset,
    settings: &InversionSettings,
    exec: &Executor,
) -> Result<MeanUtilities> {
    check_delta_len(delta0, ds)?;
    check_sigma_part(sp, ds)?;
    let markets = exec.try_map_markets(ds.n_markets(), |t| {
        Ok(ablp_market(delta0.market(t), &ds.market(t), sp, settings.cond_limit, None)?.psi)
    })?;
    Ok(MeanUtilities::from_markets(ds.n_products(), markets))
}

fn ablp_pieces(
    delta0: &MeanUtilities,
    sp: &SigmaPart,
    ds: &MarketDataset,
    settings: &InversionSettings,
    exec: &Executor,
    gradient: Option<AblpGradient>,
) -> Result<Vec<MarketPiece>> {
    let p = sp.n_params();
    exec.try_map_markets(ds.n_markets(), |t| {
        let market = ds.market(t);
        let out = ablp_market(delta0.market(t), &market, sp, settings.cond_limit, gradient)?;
        Ok(MarketPiece {
            zd: zt_vec(&market, &out.psi),
            zdd: out.dpsi.map(|d| zt_mat(&market, &d, p)),
        })
    })
}

/// Q^ablp(δ₀, θ) with β concentrated out.
pub fn concentrated_q_ablp(
    delta0: &MeanUtilities,
    sp: &SigmaPart,
    setup: &GmmSetup,
    ds: &MarketDataset,
    settings: &InversionSettings,
    exec: &Executor,
    gradient: Option<AblpGradient>,
) -> Result<CriterionEval> {
    check_delta_len(delta0, ds)?;
    check_sigma_part(sp, ds)?;
    let pieces = ablp_pieces(delta0, sp, ds, settings, exec, gradient)?;
    let (zd, zdd) = fold_pieces(pieces, ds.n_instruments(), sp.n_params(), gradient.is_some());
    Ok(setup.concentrate(&zd, zdd.as_ref()))
}

pub fn criterion_q_ablp(
    delta0: &MeanUtilities,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    settings: &InversionSettings,
    exec: &Executor,
) -> Result<f64> {
    Ok(q_ablp_at_beta(delta0, params, ds, w, settings, exec, None)?.0)
}

/// ∇_θ Q^ablp over (β, σ, π) at the supplied β.
pub fn criterion_q_ablp_gradient(
    delta0: &MeanUtilities,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    settings: &InversionSettings,
    exec: &Executor,
    mode: AblpGradient,
) -> Result<Vec<f64>> {
    Ok(q_ablp_at_beta(delta0, params, ds, w, settings, exec, Some(mode))?
        .1
        .expect("gradient requested"))
}

fn q_ablp_at_beta(
    delta0: &MeanUtilities,
    params: &ModelParameters,
    ds: &MarketDataset,
    w: &WeightMatrix,
    settings: &InversionSettings,
    exec: &Executor,
    gradient: Option<AblpGradient>,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_delta_len(delta0, ds)?;
    check_params(params, ds)?;
    let sp = &params.sigma_part;
    let pieces = ablp_pieces(delta0, sp, ds, settings, exec, gradient)?;
    let (zd, zdd) = fold_pieces(pieces, ds.n_instruments(), sp.n_params(), gradient.is_some());
    quadratic_at_beta(ds, w, &zd, zdd.as_ref(), &params.beta)
}

// ---------------------------------------------------------------------------
// Inner minimization

/// Which pseudo criterion the inner loop minimizes.
#[derive(Clone, Copy, Debug)]
pub enum PseudoCriterion<'a> {
    /// Q at fixed outside probabilities.
    Npgmm(&'a OutsideProbs),
    /// Q^ablp at a fixed expansion point.
    Ablp {
        delta0: &'a MeanUtilities,
        gradient: AblpGradient,
    },
}

#[derive(Clone, Debug)]
pub struct PseudoGmmFit {
    pub params: ModelParameters,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub criterion_evals: usize,
    pub gradient_evals: usize,
    pub termination: Termination,
    pub inverse_hessian: DMatrix<f64>,
    /// Criterion at the starting point.
    pub start_value: f64,
    /// Wall-clock time spent inside criterion evaluations.
    pub eval_seconds: f64,
}

impl PseudoGmmFit {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

/// Minimizes the chosen pseudo criterion over θ₂ with β concentrated out.
#[allow(clippy::too_many_arguments)]
pub fn minimize_pseudo_gmm(
    criterion: PseudoCriterion<'_>,
    start: &SigmaPart,
    setup: &GmmSetup,
    ds: &MarketDataset,
    inversion: &InversionSettings,
    optimizer: &OptimizerSettings,
    exec: &Executor,
    warm_hessian: Option<&DMatrix<f64>>,
) -> Result<PseudoGmmFit> {
    check_sigma_part(start, ds)?;
    let (k, r) = (start.n_chars(), start.n_demo());
    let evaluate = |x: &[f64]| -> Result<CriterionEval> {
        let sp = SigmaPart::from_slice(k, r, x)?;
        match criterion {
            PseudoCriterion::Npgmm(lambda) => concentrated_q(lambda, &sp, setup, ds, exec, true),
            PseudoCriterion::Ablp { delta0, gradient } => {
                concentrated_q_ablp(delta0, &sp, setup, ds, inversion, exec, Some(gradient))
            }
        }
    };
    let mut start_value = f64::NAN;
    let mut eval_time = Duration::ZERO;
    let min = minimize(
        |x| {
            let clock = Instant::now();
            let e = evaluate(x);
            eval_time += clock.elapsed();
            let e = e?;
            if start_value.is_nan() {
                start_value = e.value;
            }
            Ok((e.value, e.gradient.expect("gradient requested")))
        },
        &start.to_vec(),
        optimizer,
        warm_hessian,
    )?;
    let sp = SigmaPart::from_slice(k, r, &min.x)?;
    // β at the optimum from the same closed form used inside the criterion.
    let final_eval = evaluate(&min.x)?;
    let params = ModelParameters::new(final_eval.beta, sp)?;
    Ok(PseudoGmmFit {
        params,
        value: min.value,
        gradient: min.gradient,
        iterations: min.iterations,
        criterion_evals: min.evaluations,
        gradient_evals: min.gradient_evaluations,
        termination: min.termination,
        inverse_hessian: min.inverse_hessian,
        start_value,
        eval_seconds: eval_time.as_secs_f64(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{DatasetParts, Dimensions};
    use crate::inversion::newton_kantorovich_step;
    use crate::model::{outside_probs, predict_shares};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small multi-market dataset whose shares come from known (δ, θ₂).
    pub(crate) struct Instance {
        pub ds: MarketDataset,
        pub sp: SigmaPart,
        pub delta: MeanUtilities,
    }

    pub(crate) fn instance(seed: u64, t: usize, j: usize, n: usize, k: usize, r: usize, q: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..t * j * k)
            .map(|idx| if idx % k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        // Instruments: the characteristics plus noisy squares of them.
        let mut z = vec![0.0; t * j * q];
        for row in 0..t * j {
            for c in 0..q {
                z[row * q + c] = if c < k {
                    x[row * k + c]
                } else {
                    x[row * k + 1 + (c % (k - 1))].powi(2) + rng.random_range(-0.5..0.5)
                };
            }
        }
        let nu: Vec<f64> = (0..t * n * k).map(|_| rng.random_range(-1.7..1.7)).collect();
        let demo: Vec<f64> = (0..t * n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sp = SigmaPart {
            sigma: DVector::from_fn(k, |_, _| rng.random_range(0.2..1.2)),
            pi: DMatrix::from_fn(k, r, |_, _| rng.random_range(-0.4..0.4)),
        };
        let delta: Vec<f64> = (0..t * j).map(|_| rng.random_range(-3.0..-0.5)).collect();
        let dims = Dimensions {
            markets: t,
            products: j,
            characteristics: k,
            instruments: q,
            draws: n,
            demographics: r,
        };
        let placeholder = MarketDataset::new(
            dims,
            DatasetParts {
                x: x.clone(),
                z: z.clone(),
                shares: vec![0.5 / j as f64; t * j],
                nu: nu.clone(),
                demo: demo.clone(),
                market_size: None,
            },
        )
        .unwrap();
        let mut shares = Vec::with_capacity(t * j);
        for m in 0..t {
            shares.extend(predict_shares(&delta[m * j..(m + 1) * j], &placeholder.market(m), &sp).unwrap());
        }
        let ds = MarketDataset::new(
            dims,
            DatasetParts {
                x,
                z,
                shares,
                nu,
                demo,
                market_size: None,
            },
        )
        .unwrap();
        Instance {
            ds,
            sp,
            delta: MeanUtilities::new(j, delta),
        }
    }

    fn exact_lambda(inst: &Instance) -> OutsideProbs {
        let markets = (0..inst.ds.n_markets())
            .map(|t| outside_probs(inst.delta.market(t), &inst.ds.market(t), &inst.sp).unwrap())
            .collect();
        OutsideProbs::from_markets(inst.ds.n_draws(), markets).unwrap()
    }

    fn params_with(inst: &Instance, rng: &mut ChaCha8Rng) -> ModelParameters {
        let k = inst.ds.n_chars();
        ModelParameters::new(DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)), inst.sp.clone()).unwrap()
    }

    fn dataset_with_z(z: Vec<f64>, t: usize, j: usize, q: usize) -> MarketDataset {
        MarketDataset::new(
            Dimensions {
                markets: t,
                products: j,
                characteristics: 1,
                instruments: q,
                draws: 1,
                demographics: 0,
            },
            DatasetParts {
                x: vec![1.0; t * j],
                z,
                shares: vec![0.1; t * j],
                nu: vec![0.0; t],
                demo: vec![],
                market_size: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn two_stage_weight_for_identity_instruments() {
        // Z = I with q = JT = 3.
        let z = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let ds = dataset_with_z(z, 1, 3, 3);
        let w = build_weight_matrix(&ds, WeightKind::TwoStage).unwrap();
        assert!((w.matrix() - DMatrix::identity(3, 3) * 3.0).amax() < 1e-12);
        let id = build_weight_matrix(&ds, WeightKind::Identity).unwrap();
        assert_eq!(id.matrix(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn two_stage_weight_inverts_second_moments() {
        let inst = instance(4, 3, 5, 4, 3, 0, 5);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let zm = inst.ds.z_matrix();
        let m = zm.transpose() * &zm / inst.ds.n_obs() as f64;
        assert!((w.matrix() * m - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn collinear_instruments_can_be_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = Vec::new();
        for _ in 0..8 {
            let (a, b): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            z.extend([a, 2.0 * a, b]);
        }
        let ds = dataset_with_z(z, 2, 4, 3);
        let (clean, dropped) = drop_collinear_instruments(&ds).unwrap();
        assert_eq!(dropped, vec![1]);
        assert_eq!(clean.market(1).z_row(2), &[ds.market(1).z_row(2)[0], ds.market(1).z_row(2)[2]]);
        assert!(build_weight_matrix(&clean, WeightKind::TwoStage).is_ok());
    }

    #[test]
    fn collinear_instruments_are_named() {
        // z_3 = z_1 + z_2
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = Vec::new();
        for _ in 0..8 {
            let (a, b): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            z.extend([a, b, a + b]);
        }
        let ds = dataset_with_z(z, 2, 4, 3);
        let err = build_weight_matrix(&ds, WeightKind::TwoStage).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("z_3"), "{err}");
    }

    #[test]
    fn sample_moments_cases() {
        let ds = dataset_with_z(vec![1.0, 2.0], 1, 1, 2);
        let m = sample_moments(&MeanUtilities::new(1, vec![3.0]), &ds).unwrap();
        assert_eq!(m.m.as_slice(), &[3.0, 6.0]);
        let inst = instance(1, 3, 4, 5, 2, 0, 3);
        let zero = sample_moments(&MeanUtilities::new(4, vec![0.0; 12]), &inst.ds).unwrap();
        assert!(zero.m.iter().all(|v| *v == 0.0));
        let m = sample_moments(&inst.delta, &inst.ds).unwrap();
        let zm = inst.ds.z_matrix();
        for a in 0..3 {
            let mut acc = 0.0;
            for row in 0..12 {
                acc += zm[(row, a)] * inst.delta.delta[row];
            }
            assert!((m.m[a] - acc / 12.0).abs() < 1e-14);
        }
    }

    #[test]
    fn iv_beta_cases() {
        let inst = instance(6, 4, 5, 3, 3, 0, 3);
        let (ds, k) = (&inst.ds, 3);
        // Just identified with Z = X: OLS.
        let xz = ds.with_instruments(k, ds.x().to_vec()).unwrap();
        let w = build_weight_matrix(&xz, WeightKind::TwoStage).unwrap();
        let beta = linear_iv_gmm_beta(&inst.delta, &xz, &w).unwrap();
        let x = ds.x_matrix();
        let ols = (x.transpose() * &x).lu().solve(&(x.transpose() * DVector::from_column_slice(&inst.delta.delta))).unwrap();
        assert!((beta - ols).amax() < 1e-10);
        // δ = Xβ₀ exactly.
        let b0 = DVector::from_column_slice(&[0.3, -1.2, 2.0]);
        let exact = MeanUtilities::new(5, (&x * &b0).iter().copied().collect());
        let w = build_weight_matrix(&xz, WeightKind::Identity).unwrap();
        let beta = linear_iv_gmm_beta(&exact, &xz, &w).unwrap();
        assert!((beta - b0).amax() < 1e-10);
    }

    #[test]
    fn iv_beta_matches_normal_equations() {
        let inst = instance(8, 5, 4, 3, 3, 0, 6);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let beta = linear_iv_gmm_beta(&inst.delta, &inst.ds, &w).unwrap();
        let (x, z) = (inst.ds.x_matrix(), inst.ds.z_matrix());
        let d = DVector::from_column_slice(&inst.delta.delta);
        let xz = x.transpose() * &z;
        let a = &xz * w.matrix() * xz.transpose();
        let b = &xz * w.matrix() * z.transpose() * d;
        let oracle = a.cholesky().unwrap().solve(&b);
        assert!((beta - oracle).amax() < 1e-10);
    }

    #[test]
    fn g_is_zero_at_truth_with_just_identifying_instruments() {
        let inst = instance(10, 3, 4, 6, 2, 0, 2);
        let k = 2;
        // Zero structural error: replace δ by Xβ₀ and regenerate shares.
        let b0 = DVector::from_column_slice(&[-1.5, 0.7]);
        let x = inst.ds.x_matrix();
        let delta: Vec<f64> = (&x * &b0).iter().copied().collect();
        let (dims, mut parts) = inst.ds.clone().into_parts();
        let mut shares = Vec::new();
        for t in 0..3 {
            shares.extend(predict_shares(&delta[t * 4..(t + 1) * 4], &inst.ds.market(t), &inst.sp).unwrap());
        }
        parts.shares = shares;
        parts.z = parts.x.clone();
        let ds = MarketDataset::new(Dimensions { instruments: k, ..dims }, parts).unwrap();
        let w = build_weight_matrix(&ds, WeightKind::TwoStage).unwrap();
        let params = ModelParameters::new(b0, inst.sp.clone()).unwrap();
        let g = criterion_g(&params, &ds, &w, &InversionSettings::default(), &Executor::sequential()).unwrap();
        assert!(g.abs() < 1e-10, "{g}");
    }

    #[test]
    fn g_equals_q_at_exact_lambda_and_collapses_to_logit() {
        let inst = instance(11, 4, 5, 8, 3, 1, 6);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let exec = Executor::sequential();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = params_with(&inst, &mut rng);
        let settings = InversionSettings::default();
        let g = criterion_g(&params, &inst.ds, &w, &settings, &exec).unwrap();
        let q = criterion_q(&exact_lambda(&inst), &params, &inst.ds, &w, &exec).unwrap();
        assert!(g >= 0.0);
        assert!((g - q).abs() < 1e-8 * g.max(1.0), "{g} vs {q}");

        // σ = 0: all three criteria are the logit IV criterion.
        let zero = ModelParameters::new(params.beta.clone(), SigmaPart::zeros(3, 1)).unwrap();
        let logit: Vec<f64> = (0..4)
            .flat_map(|t| crate::inversion::logit_delta(inst.ds.market(t).shares))
            .collect();
        let logit = MeanUtilities::new(5, logit);
        let xi = MeanUtilities::new(
            5,
            logit
                .delta
                .iter()
                .zip((inst.ds.x_matrix() * &params.beta).iter())
                .map(|(d, xb)| d - xb)
                .collect(),
        );
        let m = sample_moments(&xi, &inst.ds).unwrap().m;
        let oracle = m.dot(&(w.matrix() * &m));
        let g0 = criterion_g(&zero, &inst.ds, &w, &settings, &exec).unwrap();
        let outside: Vec<f64> = (0..4)
            .flat_map(|t| vec![inst.ds.market(t).outside_share; 8])
            .collect();
        let lam0 = OutsideProbs::new(8, outside).unwrap();
        let q0 = criterion_q(&lam0, &zero, &inst.ds, &w, &exec).unwrap();
        let qa = criterion_q_ablp(&logit, &zero, &inst.ds, &w, &settings, &exec).unwrap();
        for v in [g0, q0, qa] {
            assert!((v - oracle).abs() < 1e-10 * oracle.max(1.0), "{v} vs {oracle}");
        }
    }

    #[test]
    fn q_is_zero_for_zero_residuals_and_quadratic_in_beta() {
        let inst = instance(12, 3, 4, 6, 2, 0, 4);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let exec = Executor::sequential();
        let lambda = exact_lambda(&inst);
        // At fixed λ the concentrated β minimizes the exact quadratic, so Q at
        // a perfect fit is zero.
        let setup = GmmSetup::new(&inst.ds, &w).unwrap();
        let delta = delta_given_lambda(&lambda, &inst.sp, &inst.ds, &exec).unwrap();
        assert!(delta.max_abs_diff(&inst.delta) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = params_with(&inst, &mut rng);
        let dir = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let at = |s: f64| {
            let p = ModelParameters::new(&base.beta + &dir * s, inst.sp.clone()).unwrap();
            criterion_q(&lambda, &p, &inst.ds, &w, &exec).unwrap()
        };
        let (q0, q1, q2, q3) = (at(0.0), at(1.0), at(-1.0), at(2.5));
        let (c, b, a) = (q0, (q1 - q2) / 2.0, (q1 + q2) / 2.0 - q0);
        let predicted = a * 2.5 * 2.5 + b * 2.5 + c;
        assert!((predicted - q3).abs() < 1e-10 * q3.abs().max(1.0));

        let fitted = ModelParameters::new(setup.beta_from(&stacked_zd(&delta, &inst.ds)), inst.sp.clone()).unwrap();
        let xi: Vec<f64> = delta
            .delta
            .iter()
            .zip((inst.ds.x_matrix() * &fitted.beta).iter())
            .map(|(d, xb)| d - xb)
            .collect();
        let zero_moments = sample_moments(&MeanUtilities::new(4, vec![0.0; 12]), &inst.ds).unwrap();
        assert_eq!(zero_moments.m.amax(), 0.0);
        let m = sample_moments(&MeanUtilities::new(4, xi), &inst.ds).unwrap().m;
        let q = criterion_q(&lambda, &fitted, &inst.ds, &w, &exec).unwrap();
        assert!((q - m.dot(&(w.matrix() * &m))).abs() < 1e-14);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        for m in 0..x.len() {
            let h = 1e-5 * x[m].abs().max(1.0);
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[m] += h;
            dn[m] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let scale = grad.iter().map(|g| g.abs()).fold(fd.abs(), f64::max).max(1e-12);
            assert!(
                (fd - grad[m]).abs() / scale < 1e-5,
                "param {m}: analytic {} vs fd {fd}",
                grad[m]
            );
        }
    }

    fn split(x: &[f64], k: usize, r: usize) -> ModelParameters {
        ModelParameters::new(
            DVector::from_column_slice(&x[..k]),
            SigmaPart::from_slice(k, r, &x[k..]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn q_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let inst = instance(20 + seed, 3, 4, 7, 3, (seed % 2) as usize, 6);
            let r = inst.ds.n_demographics();
            let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
            let exec = Executor::sequential();
            let lambda = exact_lambda(&inst);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = params_with(&inst, &mut rng);
            let grad = criterion_q_gradient(&lambda, &params, &inst.ds, &w, &exec).unwrap();
            fd_check(
                |x| criterion_q(&lambda, &split(x, 3, r), &inst.ds, &w, &exec).unwrap(),
                &params.to_vec(),
                &grad,
            );
            // Concentrated version.
            let setup = GmmSetup::new(&inst.ds, &w).unwrap();
            let eval = concentrated_q(&lambda, &inst.sp, &setup, &inst.ds, &exec, true).unwrap();
            fd_check(
                |x| {
                    let sp = SigmaPart::from_slice(3, r, x).unwrap();
                    concentrated_q(&lambda, &sp, &setup, &inst.ds, &exec, false).unwrap().value
                },
                &inst.sp.to_vec(),
                eval.gradient.as_ref().unwrap(),
            );
        }
    }

    #[test]
    fn zero_characteristic_gives_zero_sigma_gradient() {
        let inst = instance(30, 3, 4, 6, 3, 0, 5);
        let (dims, mut parts) = inst.ds.clone().into_parts();
        for row in 0..12 {
            parts.x[row * 3 + 2] = 0.0;
        }
        parts.z = (0..12)
            .flat_map(|row| {
                let x1 = parts.x[row * 3 + 1];
                vec![1.0, x1, x1 * x1, (row as f64).sin(), (row as f64 * 0.7).cos()]
            })
            .collect();
        let ds = MarketDataset::new(dims, parts).unwrap();
        let w = build_weight_matrix(&ds, WeightKind::Identity).unwrap();
        let lambda = exact_lambda(&inst);
        let params = ModelParameters::new(DVector::from_element(3, 0.1), inst.sp.clone()).unwrap();
        let grad = criterion_q_gradient(&lambda, &params, &ds, &w, &Executor::sequential()).unwrap();
        assert_eq!(grad[3 + 2], 0.0);
    }

    #[test]
    fn ablp_map_matches_newton_step_and_fixed_points() {
        let inst = instance(40, 3, 5, 9, 3, 1, 6);
        let exec = Executor::sequential();
        let settings = InversionSettings::default();
        // Fixed point at the exact solution.
        let out = ablp_map(&inst.delta, &inst.sp, &inst.ds, &settings, &exec).unwrap();
        assert!(out.max_abs_diff(&inst.delta) < 1e-12);
        // Bit-identical to the Newton step from an arbitrary δ₀.
        let shifted = MeanUtilities::new(5, inst.delta.delta.iter().map(|d| d + 0.4).collect());
        let out = ablp_map(&shifted, &inst.sp, &inst.ds, &settings, &exec).unwrap();
        for t in 0..3 {
            let m = inst.ds.market(t);
            let step = newton_kantorovich_step(shifted.market(t), m.shares, &m, &inst.sp, &settings).unwrap();
            assert!(!step.fell_back);
            assert_eq!(out.market(t), step.delta.as_slice());
        }
        // σ = 0: the log-share Jacobian is I − 1𝓈', so one step lands on the
        // logit inversion up to a shift common to the market's products.
        let zero = SigmaPart::zeros(3, 1);
        let out = ablp_map(&shifted, &zero, &inst.ds, &settings, &exec).unwrap();
        for t in 0..3 {
            let logit = crate::inversion::logit_delta(inst.ds.market(t).shares);
            let gap: Vec<f64> = out.market(t).iter().zip(&logit).map(|(a, b)| a - b).collect();
            assert!(gap.iter().all(|g| (g - gap[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn ablp_criterion_equals_g_at_exact_expansion_point() {
        let inst = instance(41, 3, 4, 8, 2, 0, 4);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let exec = Executor::sequential();
        let settings = InversionSettings::default();
        let params = ModelParameters::new(DVector::from_column_slice(&[-1.0, 0.5]), inst.sp.clone()).unwrap();
        let g = criterion_g(&params, &inst.ds, &w, &settings, &exec).unwrap();
        let qa = criterion_q_ablp(&inst.delta, &params, &inst.ds, &w, &settings, &exec).unwrap();
        assert!((g - qa).abs() < 1e-8, "{g} vs {qa}");
    }

    #[test]
    fn ablp_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let inst = instance(50 + seed, 2, 3 + seed as usize % 3, 7, 3, (seed % 2) as usize, 5);
            let r = inst.ds.n_demographics();
            let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
            let exec = Executor::sequential();
            let settings = InversionSettings::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta0 = MeanUtilities::new(
                inst.delta.products,
                inst.delta.delta.iter().map(|d| d + rng.random_range(-0.3..0.3)).collect(),
            );
            let params = params_with(&inst, &mut rng);
            let grad = criterion_q_ablp_gradient(&delta0, &params, &inst.ds, &w, &settings, &exec, AblpGradient::Analytic).unwrap();
            fd_check(
                |x| criterion_q_ablp(&delta0, &split(x, 3, r), &inst.ds, &w, &settings, &exec).unwrap(),
                &params.to_vec(),
                &grad,
            );
            let fd = criterion_q_ablp_gradient(&delta0, &params, &inst.ds, &w, &settings, &exec, AblpGradient::FiniteDifference).unwrap();
            for (a, b) in grad.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-4 * grad.iter().map(|g| g.abs()).fold(1e-8, f64::max));
            }
        }
    }

    #[test]
    fn g_gradient_through_the_solver() {
        let inst = instance(60, 3, 4, 6, 2, 1, 5);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let setup = GmmSetup::new(&inst.ds, &w).unwrap();
        let exec = Executor::sequential();
        let settings = InversionSettings::default();
        let eval = concentrated_g(&inst.sp, &setup, &inst.ds, &exec, &settings, None, true).unwrap();
        fd_check(
            |x| {
                let sp = SigmaPart::from_slice(2, 1, x).unwrap();
                concentrated_g(&sp, &setup, &inst.ds, &exec, &settings, None, false)
                    .unwrap()
                    .criterion
                    .value
            },
            &inst.sp.to_vec(),
            eval.criterion.gradient.as_ref().unwrap(),
        );
    }

    #[test]
    fn criteria_are_deterministic_across_threads() {
        let inst = instance(70, 9, 4, 10, 3, 0, 6);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let setup = GmmSetup::new(&inst.ds, &w).unwrap();
        let lambda = exact_lambda(&inst);
        let one = concentrated_q(&lambda, &inst.sp, &setup, &inst.ds, &Executor::sequential(), true).unwrap();
        let many = concentrated_q(&lambda, &inst.sp, &setup, &inst.ds, &Executor::new(3).unwrap(), true).unwrap();
        assert_eq!(one.value.to_bits(), many.value.to_bits());
        assert_eq!(one.gradient, many.gradient);
    }

    #[test]
    fn minimizer_is_invariant_to_weight_scale() {
        let inst = instance(80, 6, 5, 10, 2, 0, 6);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let exec = Executor::sequential();
        let lambda = exact_lambda(&inst);
        let run = |w: &WeightMatrix| {
            let setup = GmmSetup::new(&inst.ds, w).unwrap();
            minimize_pseudo_gmm(
                PseudoCriterion::Npgmm(&lambda),
                &inst.sp,
                &setup,
                &inst.ds,
                &InversionSettings::default(),
                &OptimizerSettings::default(),
                &exec,
                None,
            )
            .unwrap()
        };
        let a = run(&w);
        let b = run(&w.scaled(7.0));
        assert!(a.converged() || a.gradient.iter().all(|g| g.abs() < 1e-7));
        assert!((b.value - 7.0 * a.value).abs() < 1e-6 * b.value.max(1e-12));
        for (x, y) in a.params.to_vec().iter().zip(b.params.to_vec()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn start_at_minimizer_returns_after_one_evaluation() {
        let inst = instance(81, 4, 4, 8, 2, 0, 5);
        let w = build_weight_matrix(&inst.ds, WeightKind::TwoStage).unwrap();
        let setup = GmmSetup::new(&inst.ds, &w).unwrap();
        let exec = Executor::sequential();
        let lambda = exact_lambda(&inst);
        let run = |start: &SigmaPart| {
            minimize_pseudo_gmm(
                PseudoCriterion::Npgmm(&lambda),
                start,
                &setup,
                &inst.ds,
                &InversionSettings::default(),
                &OptimizerSettings::default(),
                &exec,
                None,
            )
            .unwrap()
        };
        let first = run(&inst.sp);
        let again = run(&first.params.sigma_part);
        if first.converged() {
            assert_eq!(again.criterion_evals, 1);
            assert_eq!(again.gradient_evals, 1);
            assert_eq!(again.iterations, 0);
        }
    }
}
