//! Share inversion: Berry's contraction, Newton–Kantorovich steps and full
//! solves of `s_t = 𝓈(δ_t, x_t, σ)` for one market.

use serde::{Deserialize, Serialize};

use crate::data::{MarketView, SigmaPart};
use crate::error::{BlpError, Result, Site};
use crate::linalg::LuFactor;
use crate::model::{choice_probabilities, log_share_jacobian_from, ChoiceProbabilities};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMethod {
    Contraction,
    Newton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionSettings {
    /// Stop once max_j |ln s_j − ln 𝓈_j(δ)| falls below this.
    pub tol_delta: f64,
    pub contraction_max_iter: usize,
    pub newton_max_iter: usize,
    /// Newton steps whose Jacobian condition estimate reaches this limit
    /// fall back to a contraction step.
    pub cond_limit: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            tol_delta: 1e-12,
            contraction_max_iter: 5000,
            newton_max_iter: 100,
            cond_limit: 1e12,
        }
    }
}

impl InversionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_delta > 0.0) || self.contraction_max_iter == 0 || self.newton_max_iter == 0 {
            return Err(BlpError::InvalidInput(
                "inversion tolerance must be positive and iteration caps at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn max_iter(&self, method: InversionMethod) -> usize {
        match method {
            InversionMethod::Contraction => self.contraction_max_iter,
            InversionMethod::Newton => self.newton_max_iter,
        }
    }
}

/// Model evaluation at one δ: probabilities, predicted shares and the
/// log-share residual `ln s − ln 𝓈(δ)`.
pub(crate) struct ShareEvaluation {
    pub probs: ChoiceProbabilities,
    pub predicted: Vec<f64>,
    pub residual: Vec<f64>,
}

impl ShareEvaluation {
    pub fn new(
        delta_t: &[f64],
        shares_t: &[f64],
        market: &MarketView<'_>,
        sp: &SigmaPart,
    ) -> Result<Self> {
        if shares_t.len() != market.n_products {
            return Err(BlpError::dimension_mismatch(
                "share vector",
                market.n_products,
                shares_t.len(),
            ));
        }
        let probs = choice_probabilities(delta_t, market, sp)?;
        let predicted = probs.shares();
        let mut residual = Vec::with_capacity(predicted.len());
        for (j, (s, p)) in shares_t.iter().zip(&predicted).enumerate() {
            if !(*p > 0.0) {
                return Err(BlpError::numerical(
                    "zero predicted share",
                    Site::product(market.index, j),
                ));
            }
            residual.push(s.ln() - p.ln());
        }
        Ok(Self {
            probs,
            predicted,
            residual,
        })
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual.iter().map(|r| r.abs()).fold(0.0, f64::max)
    }

    /// Factorized log-share Jacobian with its condition estimate; the factor
    /// is `None` when the matrix is exactly singular.
    pub fn factor_jacobian(&self, market_index: usize) -> Result<(Option<LuFactor>, f64)> {
        let (jac, _) = log_share_jacobian_from(&self.probs, market_index)?;
        Ok(match LuFactor::new(&jac) {
            Some(lu) => {
                let cond = lu.condition_estimate();
                (Some(lu), cond)
            }
            None => (None, f64::INFINITY),
        })
    }
}

/// Ψ(δ) = δ + ln s − ln 𝓈(δ).
pub fn contraction_step(
    delta_t: &[f64],
    shares_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
) -> Result<Vec<f64>> {
    let eval = ShareEvaluation::new(delta_t, shares_t, market, sp)?;
    Ok(add(delta_t, &eval.residual))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonStep {
    pub delta: Vec<f64>,
    /// The Jacobian was ill-conditioned and a contraction step was taken.
    pub fell_back: bool,
    pub condition: f64,
}

pub(crate) fn newton_from_evaluation(
    delta_t: &[f64],
    eval: &ShareEvaluation,
    market_index: usize,
    cond_limit: f64,
) -> Result<NewtonStep> {
    let (lu, condition) = eval.factor_jacobian(market_index)?;
    match lu {
        Some(lu) if condition < cond_limit => Ok(NewtonStep {
            delta: add(delta_t, &lu.solve(&eval.residual)),
            fell_back: false,
            condition,
        }),
        _ => Ok(NewtonStep {
            delta: add(delta_t, &eval.residual),
            fell_back: true,
            condition,
        }),
    }
}

/// One Newton–Kantorovich update δ' = δ + [∇ ln𝓈(δ)]⁻¹ (ln s − ln 𝓈(δ)),
/// degrading to a contraction step on an ill-conditioned Jacobian.
pub fn newton_kantorovich_step(
    delta_t: &[f64],
    shares_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
    settings: &InversionSettings,
) -> Result<NewtonStep> {
    let eval = ShareEvaluation::new(delta_t, shares_t, market, sp)?;
    newton_from_evaluation(delta_t, &eval, market.index, settings.cond_limit)
}

/// Plain-logit inversion δ_j = ln s_j − ln s_0.
pub fn logit_delta(shares_t: &[f64]) -> Vec<f64> {
    let outside = 1.0 - shares_t.iter().sum::<f64>();
    let ln0 = outside.ln();
    shares_t.iter().map(|s| s.ln() - ln0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionOutcome {
    pub delta: Vec<f64>,
    pub iterations: usize,
    /// max_j |ln s_j − ln 𝓈_j(δ)| at the returned δ.
    pub residual: f64,
    /// Newton steps that fell back to the contraction.
    pub fallbacks: usize,
}

/// Solves the market's demand system for δ. `start` defaults to the logit
/// inversion.
pub fn solve_delta(
    shares_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
    settings: &InversionSettings,
    method: InversionMethod,
    start: Option<&[f64]>,
) -> Result<InversionOutcome> {
    settings.validate()?;
    let mut delta = match start {
        Some(s) => s.to_vec(),
        None => logit_delta(shares_t),
    };
    let max_iter = settings.max_iter(method);
    let mut fallbacks = 0;
    let mut iterations = 0;
    loop {
        let eval = ShareEvaluation::new(&delta, shares_t, market, sp)?;
        let residual = eval.residual_norm();
        if residual < settings.tol_delta {
            return Ok(InversionOutcome {
                delta,
                iterations,
                residual,
                fallbacks,
            });
        }
        if iterations >= max_iter {
            return Err(BlpError::NonConvergence {
                context: "share inversion",
                iterations,
                residual,
                last_iterate: delta,
            });
        }
        delta = match method {
            InversionMethod::Contraction => add(&delta, &eval.residual),
            InversionMethod::Newton => {
                let step = newton_from_evaluation(&delta, &eval, market.index, settings.cond_limit)?;
                fallbacks += usize::from(step.fell_back);
                step.delta
            }
        };
        iterations += 1;
    }
}

/// Residual norms max_j |ln s − ln 𝓈(δ^τ)| along a contraction path, τ = 0..=steps.
pub fn contraction_residual_path(
    shares_t: &[f64],
    market: &MarketView<'_>,
    sp: &SigmaPart,
    start: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    let mut delta = start.to_vec();
    let mut path = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let eval = ShareEvaluation::new(&delta, shares_t, market, sp)?;
        path.push(eval.residual_norm());
        delta = add(&delta, &eval.residual);
    }
    Ok(path)
}

#[cfg(test)]
pub(crate) fn max_change(a: &[f64], b: &[f64]) -> f64 {
    crate::data::max_abs_diff(a, b)
}
