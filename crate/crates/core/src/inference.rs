//! Asymptotic variance of the NP-GMM estimator and the efficient GMM
//! benchmark.
//!
//! Parameters are ordered (β, σ, vec π). Moments are scaled by 1/(JT) and
//! standard errors are sqrt(diag V / JT).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, MarketView, MeanUtilities, ModelParameters, OutsideProbs};
use crate::error::{BlpError, Result, Site};
use crate::estimators::FitResult;
use crate::gmm::{implicit_delta_gradient, WeightMatrix};
use crate::linalg::LuFactor;
use crate::model::{choice_probabilities, closed_form_kernel, taste_shifts};
use crate::parallel::Executor;

/// Which sample analogue to use for Ω_θθ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaEstimator {
    /// (1/(JT)) Σ g g'.
    #[default]
    OuterProduct,
    /// (1/(JT)) Σ ∂g/∂θ', dropping the term in ξ·∂z*/∂θ.
    SecondDerivative,
}

/// Diagnostic switches that zero one factor of the λ correction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    Full,
    ZeroLambdaJacobian,
    ZeroOmegaThetaLambda,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceOptions {
    pub omega: OmegaEstimator,
    pub mode: VarianceMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub v_np: DMatrix<f64>,
    pub v_gmm: DMatrix<f64>,
    pub omega_tt: DMatrix<f64>,
    pub omega_tl_times_lambda: DMatrix<f64>,
    pub se_np: Vec<f64>,
    pub se_gmm: Vec<f64>,
    /// (1/(JT)) Σ ξ̂².
    pub xi_variance: f64,
    pub n_obs: usize,
}

/// The point at which the variance pieces are evaluated.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation<'a> {
    pub params: &'a ModelParameters,
    pub delta: &'a MeanUtilities,
    pub lambda: &'a OutsideProbs,
}

impl<'a> Evaluation<'a> {
    pub fn from_fit(fit: &'a FitResult) -> Result<Self> {
        if !fit.converged {
            return Err(BlpError::InvalidInput(
                "standard errors need a converged fit".into(),
            ));
        }
        Ok(Self {
            params: &fit.theta_hat,
            delta: &fit.delta_hat,
            lambda: &fit.lambda_hat,
        })
    }

    fn check(&self, ds: &MarketDataset) -> Result<()> {
        if self.params.beta.len() != ds.n_chars() {
            return Err(BlpError::dimension_mismatch("beta length", ds.n_chars(), self.params.beta.len()));
        }
        if self.delta.delta.len() != ds.n_obs() {
            return Err(BlpError::dimension_mismatch("mean utilities", ds.n_obs(), self.delta.delta.len()));
        }
        if self.lambda.draws != ds.n_draws() || self.lambda.lambda.len() != ds.n_markets() * ds.n_draws() {
            return Err(BlpError::dimension_mismatch(
                "outside probabilities",
                ds.n_markets() * ds.n_draws(),
                self.lambda.lambda.len(),
            ));
        }
        if ds.n_markets() > 0 {
            self.params.sigma_part.check(&ds.market(0))?;
        }
        Ok(())
    }
}

/// Per-market sums that every variance piece is built from.
struct MarketSums {
    /// Σ_j D_j z_j', d×q, with D_j = ∂ξ_j/∂θ at fixed λ.
    dz: DMatrix<f64>,
    /// Σ_j z_j ξ_j.
    zxi: DVector<f64>,
    /// Σ_j ξ_j² z_j z_j'.
    zz_xi2: DMatrix<f64>,
    /// Σ_j z_j a_j' with a_j = Σ_i ∂ξ_j/∂λ_i Λ_i.
    za: Option<DMatrix<f64>>,
    xi2: f64,
    /// Residuals ξ_j(λ, θ) and the rows D_j, J×d row-major.
    xi: Vec<f64>,
    d_rows: Vec<f64>,
}

/// Λ_t: ∂λ*_it/∂θ for one market, N×d, β columns zero.
fn market_lambda_jacobian(delta_t: &[f64], market: &MarketView<'_>, params: &ModelParameters) -> Result<DMatrix<f64>> {
    let sp = &params.sigma_part;
    let (k, p) = (params.beta.len(), sp.n_params());
    let (n, j_count) = (market.n_draws, market.n_products);
    let probs = choice_probabilities(delta_t, market, sp)?;
    let ddelta = implicit_delta_gradient(delta_t, market, sp)?;
    let mut out = DMatrix::zeros(n, k + p);
    for i in 0..n {
        let row = probs.row(i);
        let lam = probs.outside[i];
        for m in 0..p {
            let mut acc = 0.0;
            for l in 0..j_count {
                acc += row[l] * (ddelta[l * p + m] + market.offset_derivative(i, l, m));
            }
            out[(i, k + m)] = -lam * acc;
        }
    }
    Ok(out)
}

fn market_sums(
    ev: &Evaluation<'_>,
    market: &MarketView<'_>,
    want_lambda_term: bool,
) -> Result<MarketSums> {
    let t = market.index;
    let params = ev.params;
    let sp = &params.sigma_part;
    let (k, p) = (params.beta.len(), sp.n_params());
    let d = k + p;
    let (n, j_count, q) = (market.n_draws, market.n_products, market.n_instruments);
    let lambda_t = ev.lambda.market(t);
    let taste = taste_shifts(market, sp);
    let cf = closed_form_kernel(market.shares, lambda_t, market, &taste, true)?;
    let dpg = cf.gradients.expect("gradients requested");

    let lam_jac = if want_lambda_term {
        Some(market_lambda_jacobian(ev.delta.market(t), market, params)?)
    } else {
        None
    };

    let mut sums = MarketSums {
        dz: DMatrix::zeros(d, q),
        zxi: DVector::zeros(q),
        zz_xi2: DMatrix::zeros(q, q),
        za: lam_jac.as_ref().map(|_| DMatrix::zeros(q, d)),
        xi2: 0.0,
        xi: Vec::with_capacity(j_count),
        d_rows: Vec::with_capacity(j_count * d),
    };
    let mut coef = vec![0.0; n];
    let mut a = vec![0.0; d];
    for j in 0..j_count {
        let x = market.x_row(j);
        let z = market.z_row(j);
        let xb: f64 = x.iter().zip(params.beta.iter()).map(|(a, b)| a * b).sum();
        let xi = cf.delta[j] - xb;
        let mut drow = Vec::with_capacity(d);
        drow.extend(x.iter().map(|v| -v));
        drow.extend_from_slice(&dpg[j * p..(j + 1) * p]);
        for (r, zr) in z.iter().enumerate() {
            sums.zxi[r] += zr * xi;
            for (m, dm) in drow.iter().enumerate() {
                sums.dz[(m, r)] += dm * zr;
            }
            for (c, zc) in z.iter().enumerate() {
                sums.zz_xi2[(r, c)] += xi * xi * zr * zc;
            }
        }
        sums.xi2 += xi * xi;
        if let (Some(lj), Some(za)) = (lam_jac.as_ref(), sums.za.as_mut()) {
            // ∂ξ_j/∂λ_i = −e_ij / Σ_l λ_l e_lj, with e_ij = exp(μ_ij) shifted.
            let mut shift = f64::NEG_INFINITY;
            for (i, c) in coef.iter_mut().enumerate() {
                *c = x.iter().zip(&taste[i * k..(i + 1) * k]).map(|(a, b)| a * b).sum();
                shift = shift.max(*c);
            }
            let mut total = 0.0;
            for (c, l) in coef.iter_mut().zip(lambda_t) {
                *c = (*c - shift).exp();
                total += l * *c;
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(BlpError::numerical("weighted taste sum in λ derivative", Site::product(t, j)));
            }
            a.iter_mut().for_each(|v| *v = 0.0);
            for (i, c) in coef.iter().enumerate() {
                let w = -c / total;
                for (m, am) in a.iter_mut().enumerate() {
                    *am += w * lj[(i, m)];
                }
            }
            for (r, zr) in z.iter().enumerate() {
                for (m, am) in a.iter().enumerate() {
                    za[(r, m)] += zr * am;
                }
            }
        }
        sums.xi.push(xi);
        sums.d_rows.extend(drow);
    }
    Ok(sums)
}

fn all_sums(ev: &Evaluation<'_>, ds: &MarketDataset, exec: &Executor, want_lambda_term: bool) -> Result<Vec<MarketSums>> {
    ev.check(ds)?;
    exec.try_map_markets(ds.n_markets(), |t| market_sums(ev, &ds.market(t), want_lambda_term))
}

/// 2ĜW with Ĝ = (1/(JT)) Σ D_jt z_jt'. Row o of Z times its transpose gives z*_o.
fn instrument_map(sums: &[MarketSums], n: f64, w: &WeightMatrix, d: usize, q: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(d, q);
    for s in sums {
        g += &s.dz;
    }
    g /= n;
    g * w.matrix() * 2.0
}

fn check_weight(w: &WeightMatrix, ds: &MarketDataset) -> Result<()> {
    if w.dim() != ds.n_instruments() {
        return Err(BlpError::dimension_mismatch("weight matrix", ds.n_instruments(), w.dim()));
    }
    Ok(())
}

/// Effective instruments z*_jt = 2ĜW z_jt, one row per observation, so that
/// ∇_θ Q(λ, θ) = (1/(JT)) Σ z*_jt ξ_jt.
pub fn effective_instruments(fit: &FitResult, ds: &MarketDataset, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    effective_instruments_at(&Evaluation::from_fit(fit)?, ds, w, &Executor::sequential())
}

pub fn effective_instruments_at(
    ev: &Evaluation<'_>,
    ds: &MarketDataset,
    w: &WeightMatrix,
    exec: &Executor,
) -> Result<DMatrix<f64>> {
    check_weight(w, ds)?;
    let sums = all_sums(ev, ds, exec, false)?;
    let (d, q) = (ev.params.dim(), ds.n_instruments());
    let map = instrument_map(&sums, ds.n_obs() as f64, w, d, q);
    let z = ds.z_matrix();
    Ok(z * map.transpose())
}

/// Residuals ξ(λ, θ) at the evaluation point, flat T×J.
pub fn pseudo_residuals(ev: &Evaluation<'_>, ds: &MarketDataset, exec: &Executor) -> Result<Vec<f64>> {
    Ok(all_sums(ev, ds, exec, false)?.into_iter().flat_map(|s| s.xi).collect())
}

/// Λ_θ = ∂λ*/∂θ', rows ordered market then consumer.
pub fn lambda_jacobian(fit: &FitResult, ds: &MarketDataset) -> Result<DMatrix<f64>> {
    lambda_jacobian_at(&Evaluation::from_fit(fit)?, ds, &Executor::sequential())
}

pub fn lambda_jacobian_at(ev: &Evaluation<'_>, ds: &MarketDataset, exec: &Executor) -> Result<DMatrix<f64>> {
    ev.check(ds)?;
    let blocks = exec.try_map_markets(ds.n_markets(), |t| {
        market_lambda_jacobian(ev.delta.market(t), &ds.market(t), ev.params)
    })?;
    let (n, d) = (ds.n_draws(), ev.params.dim());
    let mut out = DMatrix::zeros(ds.n_markets() * n, d);
    for (t, b) in blocks.into_iter().enumerate() {
        out.rows_mut(t * n, n).copy_from(&b);
    }
    Ok(out)
}

pub fn npgmm_variance(
    fit: &FitResult,
    ds: &MarketDataset,
    w: &WeightMatrix,
    options: VarianceOptions,
    exec: &Executor,
) -> Result<VarianceReport> {
    npgmm_variance_at(&Evaluation::from_fit(fit)?, ds, w, options, exec)
}

/// V_np = [Ω_θθ + Ω_θλΛ_θ]⁻¹ Ω_θθ [Ω_θθ + Λ_θ'Ω_θλ']⁻¹ and V_gmm = Ω_θθ⁻¹.
///
/// g_jt = z*_jt ξ_jt / (2σ̂²_ξ). The scale makes Ω_θθ = Ĝ W Ĝ' / σ̂²_ξ under
/// homoskedasticity and the two-stage weight, the usual efficient-GMM
/// information.
pub fn npgmm_variance_at(
    ev: &Evaluation<'_>,
    ds: &MarketDataset,
    w: &WeightMatrix,
    options: VarianceOptions,
    exec: &Executor,
) -> Result<VarianceReport> {
    check_weight(w, ds)?;
    let want_lambda = options.mode == VarianceMode::Full;
    let sums = all_sums(ev, ds, exec, want_lambda)?;
    let (d, q) = (ev.params.dim(), ds.n_instruments());
    let n = ds.n_obs() as f64;
    let map = instrument_map(&sums, n, w, d, q);

    let mut zz_xi2 = DMatrix::zeros(q, q);
    let mut za = DMatrix::zeros(q, d);
    let mut xi2 = 0.0;
    for s in &sums {
        zz_xi2 += &s.zz_xi2;
        if let Some(a) = &s.za {
            za += a;
        }
        xi2 += s.xi2;
    }
    let xi_variance = xi2 / n;
    if !(xi_variance > 0.0 && xi_variance.is_finite()) {
        return Err(BlpError::Singular(
            "residual variance is zero; the model fits the shares exactly".into(),
        ));
    }
    let c = 1.0 / (2.0 * xi_variance);

    let omega_tt = match options.omega {
        OmegaEstimator::OuterProduct => &map * (zz_xi2 / n) * map.transpose() * (c * c),
        OmegaEstimator::SecondDerivative => {
            let mut g = DMatrix::zeros(d, q);
            for s in &sums {
                g += &s.dz;
            }
            &map * (g / n).transpose() * c
        }
    };
    let omega_tt = symmetrize(omega_tt);
    let v_gmm = symmetric_inverse(&omega_tt)?;

    let omega_tl_times_lambda = if want_lambda {
        &map * (za / n) * c
    } else {
        DMatrix::zeros(d, d)
    };

    let v_np = if want_lambda {
        let bread = &omega_tt + &omega_tl_times_lambda;
        let lu = LuFactor::new(&bread).ok_or_else(weak_identification)?;
        if lu.condition_estimate() > 1e14 {
            return Err(weak_identification());
        }
        let inv = lu.solve_matrix(&DMatrix::identity(d, d));
        symmetrize(&inv * &omega_tt * inv.transpose())
    } else {
        v_gmm.clone()
    };

    let se = |v: &DMatrix<f64>| -> Vec<f64> { (0..d).map(|i| (v[(i, i)].max(0.0) / n).sqrt()).collect() };
    Ok(VarianceReport {
        se_np: se(&v_np),
        se_gmm: se(&v_gmm),
        v_np,
        v_gmm,
        omega_tt,
        omega_tl_times_lambda,
        xi_variance,
        n_obs: ds.n_obs(),
    })
}

fn weak_identification() -> BlpError {
    BlpError::Singular(
        "variance bread Ω_θθ + Ω_θλΛ_θ is singular; parameters are likely weakly identified".into(),
    )
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn symmetric_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| {
        BlpError::Singular("Ω_θθ is not positive definite; parameters are likely weakly identified".into())
    })?;
    Ok(symmetrize(chol.inverse()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m.clone()).symmetric_eigenvalues().min()
}
