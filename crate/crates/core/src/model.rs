//! Pure per-market kernels of the random-coefficients logit model.
//!
//! Consumer i's utility for product j is `δ_j + μ_ij` with the taste offset
//! `μ_ij = Σ_k x_jk (σ_k ν_ik + d_i'π_k)`; the outside option has utility zero.
//! Everything here is a function of one market and is safe to call from any
//! thread. Sums over consumers run in index order.

use nalgebra::DMatrix;

use crate::data::{MarketView, SigmaPart};
use crate::error::{BlpError, Result, Site};

/// Consumer-specific taste scales `σ_k ν_ik + d_i'π_k`, N×K row-major.
pub fn taste_shifts(market: &MarketView<'_>, sp: &SigmaPart) -> Vec<f64> {
    let (n, k_count, r_count) = (market.n_draws, market.n_chars, market.n_demo);
    let mut out = vec![0.0; n * k_count];
    for i in 0..n {
        let nu = market.nu_row(i);
        let demo = market.demo_row(i);
        let row = &mut out[i * k_count..(i + 1) * k_count];
        for k in 0..k_count {
            let mut v = sp.sigma[k] * nu[k];
            for r in 0..r_count {
                v += sp.pi[(k, r)] * demo[r];
            }
            row[k] = v;
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Taste offsets μ_ij laid out consumer-major (N×J).
pub fn utility_offsets(market: &MarketView<'_>, taste: &[f64]) -> Vec<f64> {
    let (n, j_count, k_count) = (market.n_draws, market.n_products, market.n_chars);
    let mut out = vec![0.0; n * j_count];
    for i in 0..n {
        let t_i = &taste[i * k_count..(i + 1) * k_count];
        let row = &mut out[i * j_count..(i + 1) * j_count];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = dot(market.x_row(j), t_i);
        }
    }
    out
}

fn check_delta(delta_t: &[f64], market: &MarketView<'_>, sp: &SigmaPart) -> Result<()> {
    if delta_t.len() != market.n_products {
        return Err(BlpError::dimension_mismatch(
            "mean utility vector",
            market.n_products,
            delta_t.len(),
        ));
    }
    sp.check(market)?;
    if let Some(j) = delta_t.iter().position(|d| !d.is_finite()) {
        return Err(BlpError::numerical(
            "non-finite mean utility",
            Site::product(market.index, j),
        ));
    }
    Ok(())
}

fn check_lambda(lambda_t: &[f64], market: &MarketView<'_>) -> Result<()> {
    if lambda_t.len() != market.n_draws {
        return Err(BlpError::dimension_mismatch(
            "outside probability vector",
            market.n_draws,
            lambda_t.len(),
        ));
    }
    if let Some(i) = lambda_t.iter().position(|l| !(*l > 0.0 && *l <= 1.0)) {
        return Err(BlpError::InvalidInput(format!(
            "outside probability of consumer {i} in market {} is outside (0, 1]: {}",
            market.index, lambda_t[i]
        )));
    }
    Ok(())
}

/// Choice probabilities for every simulated consumer in one market.
#[derive(Clone, Debug)]
pub struct ChoiceProbabilities {
    pub n_draws: usize,
    pub n_products: usize,
    /// p_ij for inside goods, N×J row-major.
    pub inside: Vec<f64>,
    /// p_i0 = λ_i.
    pub outside: Vec<f64>,
}

impl ChoiceProbabilities {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.inside[i * self.n_products..(i + 1) * self.n_products]
    }

    /// Predicted shares 𝓈_j = (1/N) Σ_i p_ij.
    pub fn shares(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_products];
        for i in 0..self.n_draws {
            for (acc, p) in s.iter_mut().zip(self.row(i)) {
                *acc += p;
            }
        }
        let n = self.n_draws as f64;
        s.iter_mut().for_each(|v| *v /= n);
        s
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_draws, self.n_products + 1, |i, c| {
            if c == 0 {
                self.outside[i]
            } else {
                self.inside[i * self.n_products + c - 1]
            }
        })
    }
}

/// Turns inside-good utilities into choice probabilities in place, evaluating
/// every exponent relative to `shift`. Returns the outside probability, or
/// `None` when the normalizing sum is not a positive finite number.
pub(crate) fn logit_row(utilities: &mut [f64], shift: f64) -> Option<f64> {
    let base = (-shift).exp();
    let mut denom = base;
    for u in utilities.iter_mut() {
        *u = (*u - shift).exp();
        denom += *u;
    }
    if !(denom.is_finite() && denom > 0.0) {
        return None;
    }
    let inv = 1.0 / denom;
    utilities.iter_mut().for_each(|u| *u *= inv);
    Some(base * inv)
}

/// Evaluates choice probabilities from precomputed taste offsets.
pub(crate) fn probabilities_from_offsets(
    delta_t: &[f64],
    offsets: &[f64],
    market: &MarketView<'_>,
) -> Result<ChoiceProbabilities> {
    let (n, j_count) = (market.n_draws, market.n_products);
    let mut inside = vec![0.0; n * j_count];
    let mut outside = vec![0.0; n];
    for i in 0..n {
        let mu = &offsets[i * j_count..(i + 1) * j_count];
        let row = &mut inside[i * j_count..(i + 1) * j_count];
        let mut shift = 0.0_f64;
        for (u, (d, m)) in row.iter_mut().zip(delta_t.iter().zip(mu)) {
            *u = d + m;
            shift = shift.max(*u);
        }
        match logit_row(row, shift) {
            Some(p0) => outside[i] = p0,
            None => {
                let j = row.iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(BlpError::numerical(
                    "non-finite utility after stabilization",
                    Site::cell(market.index, j, i),
                ));
            }
        }
    }
    Ok(ChoiceProbabilities {
        n_draws: n,
        n_products: j_count,
        inside,
        outside,
    })
}

/// Choice probabilities with the per-consumer log-sum-exp shift.
pub fn choice_probabilities(
    delta_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<ChoiceProbabilities> {
    check_delta(delta_t, market, sp)?;
    let taste = taste_shifts(market, sp);
    let offsets = utility_offsets(market, &taste);
    probabilities_from_offsets(delta_t, &offsets, market)
}

/// N×(J+1) matrix whose row i is (p_i0, p_i1, ..., p_iJ).
pub fn individual_choice_probs(
    delta_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<DMatrix<f64>> {
    Ok(choice_probabilities(delta_t, market, sp)?.to_matrix())
}

pub fn predict_shares(delta_t: &[f64], market: &MarketView<'_>, sp: &SigmaPart) -> Result<Vec<f64>> {
    Ok(choice_probabilities(delta_t, market, sp)?.shares())
}

/// Consumer-level outside-option probabilities λ_it.
pub fn outside_probs(delta_t: &[f64], market: &MarketView<'_>, sp: &SigmaPart) -> Result<Vec<f64>> {
    Ok(choice_probabilities(delta_t, market, sp)?.outside)
}

/// Closed-form inversion of one market given λ, optionally with the
/// derivatives of δ with respect to the nonlinear parameters at fixed λ.
pub(crate) struct ClosedForm {
    pub delta: Vec<f64>,
    /// J×p row-major, present when requested.
    pub gradients: Option<Vec<f64>>,
}

pub(crate) fn closed_form_kernel(
    shares_t: &[f64],
    lambda_t: &[f64],
    market: &MarketView<'_>,
    taste: &[f64],
    want_gradients: bool,
) -> Result<ClosedForm> {
    let (n, j_count, k_count, r_count) = (
        market.n_draws,
        market.n_products,
        market.n_chars,
        market.n_demo,
    );
    let p = k_count * (1 + r_count);
    let mut delta = vec![0.0; j_count];
    let mut gradients = want_gradients.then(|| vec![0.0; j_count * p]);
    let mut offsets = vec![0.0; n];
    let mut nu_acc = vec![0.0; k_count];
    let mut demo_acc = vec![0.0; r_count];
    for j in 0..j_count {
        let x_j = market.x_row(j);
        let mut shift = f64::NEG_INFINITY;
        for (i, slot) in offsets.iter_mut().enumerate() {
            *slot = dot(x_j, &taste[i * k_count..(i + 1) * k_count]);
            shift = shift.max(*slot);
        }
        let mut total = 0.0;
        nu_acc.iter_mut().for_each(|v| *v = 0.0);
        demo_acc.iter_mut().for_each(|v| *v = 0.0);
        for (i, m) in offsets.iter().enumerate() {
            let w = lambda_t[i] * (m - shift).exp();
            total += w;
            if want_gradients {
                for (acc, nu) in nu_acc.iter_mut().zip(market.nu_row(i)) {
                    *acc += w * nu;
                }
                for (acc, d) in demo_acc.iter_mut().zip(market.demo_row(i)) {
                    *acc += w * d;
                }
            }
        }
        let average = total / n as f64;
        if !(average > 1e-300 && average.is_finite()) {
            return Err(BlpError::numerical(
                "weighted taste average underflow in h",
                Site::product(market.index, j),
            ));
        }
        let h = average.ln() + shift;
        delta[j] = shares_t[j].ln() - h;
        if let Some(g) = gradients.as_mut() {
            let row = &mut g[j * p..(j + 1) * p];
            for k in 0..k_count {
                row[k] = -x_j[k] * nu_acc[k] / total;
                for r in 0..r_count {
                    row[k_count + k * r_count + r] = -x_j[k] * demo_acc[r] / total;
                }
            }
        }
    }
    Ok(ClosedForm { delta, gradients })
}

/// h(λ_t, x_jt, σ) = ln( (1/N) Σ_i λ_it exp{μ_ij} ) for product `j`.
pub fn h_function(
    lambda_t: &[f64],
    market: &MarketView<'_>,
    j: usize,
    sp: &SigmaPart,
) -> Result<f64> {
    sp.check(market)?;
    check_lambda(lambda_t, market)?;
    if j >= market.n_products {
        return Err(BlpError::dimension_mismatch("product index bound", market.n_products, j));
    }
    let taste = taste_shifts(market, sp);
    let x_j = market.x_row(j);
    let k_count = market.n_chars;
    let offsets: Vec<f64> = (0..market.n_draws)
        .map(|i| dot(x_j, &taste[i * k_count..(i + 1) * k_count]))
        .collect();
    let shift = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = offsets
        .iter()
        .zip(lambda_t)
        .map(|(m, l)| l * (m - shift).exp())
        .sum();
    let average = total / market.n_draws as f64;
    if !(average > 1e-300 && average.is_finite()) {
        return Err(BlpError::numerical(
            "weighted taste average underflow in h",
            Site::product(market.index, j),
        ));
    }
    Ok(average.ln() + shift)
}

/// δ_jt = ln s_jt − h(λ_t, x_jt, σ), product by product.
pub fn closed_form_delta(
    shares_t: &[f64],
    lambda_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<Vec<f64>> {
    sp.check(market)?;
    check_lambda(lambda_t, market)?;
    check_shares(shares_t, market)?;
    let taste = taste_shifts(market, sp);
    Ok(closed_form_kernel(shares_t, lambda_t, market, &taste, false)?.delta)
}

/// ∂δ_jt/∂(σ, π) of the closed-form inversion at fixed λ, as a J×p matrix.
pub fn delta_param_gradients(
    lambda_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<DMatrix<f64>> {
    sp.check(market)?;
    check_lambda(lambda_t, market)?;
    let taste = taste_shifts(market, sp);
    let ones = vec![0.5; market.n_products];
    let cf = closed_form_kernel(&ones, lambda_t, market, &taste, true)?;
    let p = sp.n_params();
    Ok(DMatrix::from_row_slice(
        market.n_products,
        p,
        &cf.gradients.expect("gradients requested"),
    ))
}

fn check_shares(shares_t: &[f64], market: &MarketView<'_>) -> Result<()> {
    if shares_t.len() != market.n_products {
        return Err(BlpError::dimension_mismatch(
            "share vector",
            market.n_products,
            shares_t.len(),
        ));
    }
    if let Some(j) = shares_t.iter().position(|s| !(*s > 0.0 && *s < 1.0)) {
        return Err(BlpError::InvalidInput(format!(
            "share of product {j} in market {} must lie in (0, 1)",
            market.index
        )));
    }
    Ok(())
}

/// ∂ln𝓈_j/∂δ_l from choice probabilities. Also returns the predicted shares.
pub(crate) fn log_share_jacobian_from(
    probs: &ChoiceProbabilities,
    market_index: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, j_count) = (probs.n_draws, probs.n_products);
    let shares = probs.shares();
    if let Some(j) = shares.iter().position(|s| !(*s > 0.0)) {
        return Err(BlpError::numerical(
            "zero predicted share in Jacobian",
            Site::product(market_index, j),
        ));
    }
    let pm = DMatrix::from_row_slice(n, j_count, &probs.inside);
    let cross = pm.tr_mul(&pm);
    let nf = n as f64;
    let jac = DMatrix::from_fn(j_count, j_count, |j, l| {
        let diag = if j == l { nf * shares[j] } else { 0.0 };
        (diag - cross[(j, l)]) / (nf * shares[j])
    });
    Ok((jac, shares))
}

/// J×J Jacobian ∂ln𝓈_j/∂δ_l = (1/(N s_j)) Σ_i p_ij (1{j=l} − p_il).
pub fn share_log_jacobian(
    delta_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<DMatrix<f64>> {
    let probs = choice_probabilities(delta_t, market, sp)?;
    Ok(log_share_jacobian_from(&probs, market.index)?.0)
}

/// ∂ln𝓈_j/∂θ_m for the nonlinear parameters at fixed δ, J×p.
pub(crate) fn log_share_param_jacobian(
    probs: &ChoiceProbabilities,
    shares: &[f64],
    market: &MarketView<'_>,
) -> DMatrix<f64> {
    let (n, j_count) = (probs.n_draws, probs.n_products);
    let p = market.n_chars * (1 + market.n_demo);
    let mut out = DMatrix::zeros(j_count, p);
    let mut centered = vec![0.0; j_count];
    for m in 0..p {
        for i in 0..n {
            let row = probs.row(i);
            let mut mean = 0.0;
            for (j, c) in centered.iter_mut().enumerate() {
                *c = market.offset_derivative(i, j, m);
                mean += row[j] * *c;
            }
            for j in 0..j_count {
                out[(j, m)] += row[j] * (centered[j] - mean);
            }
        }
    }
    let nf = n as f64;
    for j in 0..j_count {
        for m in 0..p {
            out[(j, m)] /= nf * shares[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetParts, Dimensions, MarketDataset};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_market(x: Vec<f64>, k: usize, nu: Vec<f64>, shares: Vec<f64>) -> MarketDataset {
        let j = shares.len();
        let n = nu.len() / k;
        MarketDataset::new(
            Dimensions {
                markets: 1,
                products: j,
                characteristics: k,
                instruments: 1,
                draws: n,
                demographics: 0,
            },
            DatasetParts {
                x,
                z: vec![1.0; j],
                shares,
                nu,
                demo: vec![],
                market_size: None,
            },
        )
        .unwrap()
    }

    /// Random single market with demographics, used by several oracle tests.
    pub(crate) fn random_market(seed: u64, j: usize, n: usize, k: usize, r: usize) -> (MarketDataset, SigmaPart, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..j * k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let nu: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let demo: Vec<f64> = (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shares = vec![0.5 / j as f64; j];
        let ds = MarketDataset::new(
            Dimensions {
                markets: 1,
                products: j,
                characteristics: k,
                instruments: 1,
                draws: n,
                demographics: r,
            },
            DatasetParts {
                x,
                z: vec![1.0; j],
                shares,
                nu,
                demo,
                market_size: None,
            },
        )
        .unwrap();
        let sp = SigmaPart {
            sigma: DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
            pi: DMatrix::from_fn(k, r, |_, _| rng.random_range(-0.5..0.5)),
        };
        let delta: Vec<f64> = (0..j).map(|_| rng.random_range(-3.0..1.0)).collect();
        (ds, sp, delta)
    }

    #[test]
    fn symmetric_two_option_logit() {
        let ds = one_market(vec![1.0], 1, vec![0.7], vec![0.5]);
        let p = individual_choice_probs(&[0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[(0, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn identical_options_split_evenly() {
        let ds = one_market(vec![1.0, 1.0], 1, vec![0.3, -1.0, 2.0], vec![0.3, 0.3]);
        let p = individual_choice_probs(&[0.0, 0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(p[(i, c)], 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        let s = predict_shares(&[0.0, 0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(s[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn hand_evaluated_exponents() {
        // x = I, σ = (0.5, 0), ν = (1, 0): u_1 = 1 + 0.5, u_2 = 0.
        let ds = one_market(vec![1.0, 0.0, 0.0, 1.0], 2, vec![1.0, 0.0], vec![0.3, 0.3]);
        let sp = SigmaPart::from_sigma(&[0.5, 0.0]);
        let p = individual_choice_probs(&[1.0, 0.0], &ds.market(0), &sp).unwrap();
        let e = 1.5_f64.exp();
        let denom = 1.0 + e + 1.0;
        assert_relative_eq!(p[(0, 0)], 1.0 / denom, epsilon = 1e-15);
        assert_relative_eq!(p[(0, 1)], e / denom, epsilon = 1e-15);
        assert_relative_eq!(p[(0, 2)], 1.0 / denom, epsilon = 1e-15);
    }

    #[test]
    fn scalar_logit_share() {
        let ds = one_market(vec![1.0], 1, vec![0.0], vec![0.5]);
        let s = predict_shares(&[1.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(s[0], 1f64.exp() / (1.0 + 1f64.exp()), epsilon = 1e-15);
    }

    #[test]
    fn shares_are_column_means_and_close_probability() {
        let (ds, sp, delta) = random_market(11, 3, 5, 2, 1);
        let m = ds.market(0);
        let p = individual_choice_probs(&delta, &m, &sp).unwrap();
        let s = predict_shares(&delta, &m, &sp).unwrap();
        let lambda = outside_probs(&delta, &m, &sp).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|i| p[(i, j + 1)]).sum::<f64>() / 5.0;
            assert_relative_eq!(s[j], mean, epsilon = 1e-15);
        }
        for i in 0..5 {
            let inside: f64 = (1..4).map(|c| p[(i, c)]).sum();
            assert!((1.0 - inside - lambda[i]).abs() < 1e-12);
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let mean_lambda = lambda.iter().sum::<f64>() / 5.0;
        assert!((s.iter().sum::<f64>() + mean_lambda - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_probs_trivial_cases() {
        let ds = one_market(vec![1.0], 1, vec![0.2, -0.4], vec![0.5]);
        let l = outside_probs(&[0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert!(l.iter().all(|v| (v - 0.5).abs() < 1e-15));
        let ds = one_market(vec![1.0; 3], 1, vec![0.2, -0.4], vec![0.2; 3]);
        let l = outside_probs(&[0.0; 3], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert!(l.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_utilities_do_not_overflow() {
        let ds = one_market(vec![1.0, 1.0], 1, vec![1.0], vec![0.3, 0.3]);
        let s = predict_shares(&[800.0, 799.0], &ds.market(0), &SigmaPart::from_sigma(&[2.0])).unwrap();
        let e = 1f64.exp();
        assert_relative_eq!(s[0], e / (1.0 + e), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_delta_is_located() {
        let ds = one_market(vec![1.0, 1.0], 1, vec![1.0], vec![0.3, 0.3]);
        let err = predict_shares(&[0.0, f64::NAN], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap_err();
        assert!(err.to_string().contains("product 1"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let ds = one_market(vec![1.0, 1.0], 1, vec![1.0], vec![0.3, 0.3]);
        let err = predict_shares(&[0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap_err();
        assert!(err.is_input_error());
    }

    #[test]
    fn h_collapses_without_random_coefficients() {
        let ds = one_market(vec![1.0, 2.0], 1, vec![0.5, -0.3, 1.1], vec![0.3, 0.3]);
        let h = h_function(&[0.2; 3], &ds.market(0), 0, &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(h, 0.2f64.ln(), epsilon = 1e-15);
        let mixed = [0.1, 0.2, 0.6];
        let h = h_function(&mixed, &ds.market(0), 1, &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(h, (0.9f64 / 3.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn h_matches_direct_summation() {
        // Oracle: direct evaluation of the defining sum without any shift.
        let ds = one_market(vec![0.8, -1.3], 1, vec![0.9, -0.4, 1.7], vec![0.3, 0.3]);
        let lambda = [0.15, 0.55, 0.35];
        let sp = SigmaPart::from_sigma(&[1.3]);
        for j in 0..2 {
            let x = ds.market(0).x_row(j)[0];
            let direct: f64 = ds
                .market(0)
                .nu
                .iter()
                .zip(lambda)
                .map(|(nu, l)| l * (x * 1.3 * nu).exp())
                .sum::<f64>()
                / 3.0;
            let h = h_function(&lambda, &ds.market(0), j, &sp).unwrap();
            assert_relative_eq!(h, direct.ln(), epsilon = 1e-14);
        }
    }

    #[test]
    fn h_underflow_is_reported() {
        let ds = one_market(vec![1.0], 1, vec![0.0], vec![0.3]);
        let err = h_function(&[1e-305], &ds.market(0), 0, &SigmaPart::zeros(1, 0)).unwrap_err();
        assert!(matches!(err, BlpError::Numerical { .. }));
    }

    #[test]
    fn closed_form_trivial_cases() {
        let ds = one_market(vec![1.0; 3], 1, vec![0.0; 2], vec![0.25; 3]);
        let d = closed_form_delta(&[0.25; 3], &[0.25; 2], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        let ds = one_market(vec![1.0], 1, vec![0.0], vec![0.5]);
        let d = closed_form_delta(&[0.5], &[0.5], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert!(d[0].abs() < 1e-15);
    }

    #[test]
    fn closed_form_recovers_delta_exactly() {
        for seed in 0..25 {
            let (ds, sp, delta) = random_market(seed, 1 + (seed as usize % 8), 3 + seed as usize, 3, (seed % 2) as usize);
            let m = ds.market(0);
            let s = predict_shares(&delta, &m, &sp).unwrap();
            let lambda = outside_probs(&delta, &m, &sp).unwrap();
            let back = closed_form_delta(&s, &lambda, &m, &sp).unwrap();
            for (a, b) in back.iter().zip(&delta) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shift_invariance_of_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut reference = u.clone();
            let p0 = logit_row(&mut reference, 0.0).unwrap();
            let c = rng.random_range(-20.0..20.0);
            let mut shifted = u.clone();
            let q0 = logit_row(&mut shifted, c).unwrap();
            assert!((p0 - q0).abs() < 1e-12);
            for (a, b) in reference.iter().zip(&shifted) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_logit_cases() {
        let ds = one_market(vec![1.0], 1, vec![0.4], vec![0.5]);
        let jac = share_log_jacobian(&[0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(jac[(0, 0)], 0.5, epsilon = 1e-15);
        let ds = one_market(vec![1.0, 1.0], 1, vec![0.4], vec![0.3, 0.3]);
        let jac = share_log_jacobian(&[0.0, 0.0], &ds.market(0), &SigmaPart::zeros(1, 0)).unwrap();
        assert_relative_eq!(jac[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(0, 1)], -1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(1, 0)], -1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(jac[(1, 1)], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..20 {
            let (ds, sp, delta) = random_market(100 + seed, 3, 7, 2, 1);
            let m = ds.market(0);
            let jac = share_log_jacobian(&delta, &m, &sp).unwrap();
            let lambda = outside_probs(&delta, &m, &sp).unwrap();
            let s = predict_shares(&delta, &m, &sp).unwrap();
            let h = 1e-6;
            for l in 0..3 {
                let mut up = delta.clone();
                up[l] += h;
                let mut dn = delta.clone();
                dn[l] -= h;
                let su = predict_shares(&up, &m, &sp).unwrap();
                let sd = predict_shares(&dn, &m, &sp).unwrap();
                for j in 0..3 {
                    let fd = (su[j].ln() - sd[j].ln()) / (2.0 * h);
                    assert!((fd - jac[(j, l)]).abs() <= 1e-6 * fd.abs().max(1e-3), "seed {seed}");
                }
            }
            for j in 0..3 {
                let row_sum: f64 = jac.row(j).sum();
                let expected: f64 = (0..7)
                    .map(|i| {
                        let p = individual_choice_probs(&delta, &m, &sp).unwrap();
                        p[(i, j + 1)] * p[(i, 0)]
                    })
                    .sum::<f64>()
                    / (7.0 * s[j]);
                assert!((row_sum - expected).abs() < 1e-12);
                assert!(jac[(j, j)] > 0.0 && jac[(j, j)] < 1.0);
            }
            assert!(lambda.iter().all(|l| *l > 0.0 && *l < 1.0));
        }
    }

    #[test]
    fn delta_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (ds, sp, delta) = random_market(200 + seed, 4, 9, 3, 2);
            let m = ds.market(0);
            let lambda = outside_probs(&delta, &m, &sp).unwrap();
            let shares = predict_shares(&delta, &m, &sp).unwrap();
            let grad = delta_param_gradients(&lambda, &m, &sp).unwrap();
            let base = sp.to_vec();
            let h = 1e-6;
            for p in 0..base.len() {
                let mut up = base.clone();
                up[p] += h;
                let mut dn = base.clone();
                dn[p] -= h;
                let su = SigmaPart::from_slice(3, 2, &up).unwrap();
                let sd = SigmaPart::from_slice(3, 2, &dn).unwrap();
                let du = closed_form_delta(&shares, &lambda, &m, &su).unwrap();
                let dd = closed_form_delta(&shares, &lambda, &m, &sd).unwrap();
                for j in 0..4 {
                    let fd = (du[j] - dd[j]) / (2.0 * h);
                    let an = grad[(j, p)];
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2), "seed {seed} p {p}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_characteristic_gives_zero_gradient_column() {
        let ds = one_market(vec![1.0, 0.0, 2.0, 0.0], 2, vec![0.3, 0.9, -0.5, 0.1], vec![0.3, 0.3]);
        let g = delta_param_gradients(&[0.3, 0.4], &ds.market(0), &SigmaPart::zeros(2, 0)).unwrap();
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn single_draw_gradient_collapses() {
        let ds = one_market(vec![1.5, -0.7], 2, vec![0.8, -1.1], vec![0.3]);
        let g = delta_param_gradients(&[0.4], &ds.market(0), &SigmaPart::from_sigma(&[0.3, 0.9])).unwrap();
        assert_relative_eq!(g[(0, 0)], -1.5 * 0.8, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 1)], 0.7 * -1.1, epsilon = 1e-15);
    }

    #[test]
    fn param_jacobian_matches_finite_differences() {
        let (ds, sp, delta) = random_market(77, 4, 8, 2, 1);
        let m = ds.market(0);
        let probs = choice_probabilities(&delta, &m, &sp).unwrap();
        let shares = probs.shares();
        let an = log_share_param_jacobian(&probs, &shares, &m);
        let base = sp.to_vec();
        let h = 1e-6;
        for p in 0..base.len() {
            let mut up = base.clone();
            up[p] += h;
            let mut dn = base.clone();
            dn[p] -= h;
            let su = predict_shares(&delta, &m, &SigmaPart::from_slice(2, 1, &up).unwrap()).unwrap();
            let sd = predict_shares(&delta, &m, &SigmaPart::from_slice(2, 1, &dn).unwrap()).unwrap();
            for j in 0..4 {
                let fd = (su[j].ln() - sd[j].ln()) / (2.0 * h);
                assert!((fd - an[(j, p)]).abs() < 1e-6 * fd.abs().max(1e-2));
            }
        }
    }
}
