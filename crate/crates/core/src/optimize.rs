//! BFGS with a strong-Wolfe line search, instrumented with evaluation counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Stop once the gradient ∞-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 500,
            max_line_evals: 40,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || self.max_iter == 0 || self.max_line_evals < 2 {
            return Err(BlpError::InvalidInput(
                "optimizer needs a positive gradient tolerance, max_iter ≥ 1 and max_line_evals ≥ 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    /// Objective calls (each returns the value and the gradient).
    pub evaluations: usize,
    pub gradient_evaluations: usize,
    pub termination: Termination,
    /// Final inverse-Hessian approximation, reusable as a warm start.
    pub inverse_hessian: DMatrix<f64>,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    value: f64,
    gradient: Vec<f64>,
}

impl<F> Counted<F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// Failed or non-finite trial evaluations count as +∞ so the line search
    /// backs off; input errors still propagate.
    fn trial(&mut self, x: Vec<f64>) -> Result<Point> {
        self.evaluations += 1;
        match (self.f)(&x) {
            Ok((value, gradient)) if value.is_finite() && gradient.iter().all(|g| g.is_finite()) => {
                Ok(Point { x, value, gradient })
            }
            Ok((_, gradient)) => Ok(Point {
                x,
                value: f64::INFINITY,
                gradient: vec![f64::NAN; gradient.len()],
            }),
            Err(e) if e.is_input_error() => Err(e),
            Err(_) => Ok(Point {
                gradient: vec![f64::NAN; x.len()],
                x,
                value: f64::INFINITY,
            }),
        }
    }
}

/// Minimizes `f`, which returns the objective and its gradient. `h0` warm
/// starts the inverse Hessian.
pub fn minimize<F>(
    f: F,
    x0: &[f64],
    settings: &OptimizerSettings,
    h0: Option<&DMatrix<f64>>,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    settings.validate()?;
    let n = x0.len();
    let mut obj = Counted { f, evaluations: 0 };
    obj.evaluations += 1;
    let (v0, g0) = (obj.f)(x0)?;
    if !v0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(BlpError::InvalidInput(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut cur = Point {
        x: x0.to_vec(),
        value: v0,
        gradient: g0,
    };
    let mut h = match h0 {
        Some(h) if h.nrows() == n && h.ncols() == n => h.clone(),
        _ => DMatrix::identity(n, n),
    };
    let mut scaled = h0.is_some();
    let mut iterations = 0;
    let finish = |cur: Point, iterations, evaluations, termination, h| Minimum {
        x: cur.x,
        value: cur.value,
        gradient: cur.gradient,
        iterations,
        evaluations,
        gradient_evaluations: evaluations,
        termination,
        inverse_hessian: h,
    };
    loop {
        if n == 0 || inf_norm(&cur.gradient) < settings.grad_tol {
            return Ok(finish(cur, iterations, obj.evaluations, Termination::GradientTolerance, h));
        }
        if iterations >= settings.max_iter {
            return Ok(finish(cur, iterations, obj.evaluations, Termination::MaxIterations, h));
        }
        let g = DVector::from_column_slice(&cur.gradient);
        let mut d = -(&h * &g);
        if d.dot(&g) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            h = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
        }
        let alpha0 = if scaled {
            1.0
        } else {
            (1.0 / inf_norm(d.as_slice())).min(1.0)
        };
        let next = match line_search(&mut obj, &cur, d.as_slice(), alpha0, settings.max_line_evals)? {
            Some(p) => p,
            None => {
                if !scaled {
                    return Ok(finish(cur, iterations, obj.evaluations, Termination::LineSearchFailure, h));
                }
                // Retry once along steepest descent with a fresh Hessian.
                h = DMatrix::identity(n, n);
                scaled = false;
                continue;
            }
        };
        let s = DVector::from_iterator(n, next.x.iter().zip(&cur.x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(
            n,
            next.gradient.iter().zip(&cur.gradient).map(|(a, b)| a - b),
        );
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(s hyᵀ + hy sᵀ) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        cur = next;
        iterations += 1;
    }
}

/// Strong-Wolfe line search (bracketing then zoom). `None` when no
/// acceptable step was found within the evaluation budget.
fn line_search<F>(
    obj: &mut Counted<F>,
    start: &Point,
    d: &[f64],
    alpha0: f64,
    max_evals: usize,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    // Approximate Wolfe: near a minimum, value differences drown in rounding
    // while the slope stays accurate, so a step is also accepted on slope
    // alone when its value is within this relative band of f(0).
    const APPROX_BAND: f64 = 1e-10;
    let f0 = start.value;
    let dg0 = dot(&start.gradient, d);
    let approx_wolfe = |p: &Point, dg: f64| -> bool {
        p.value <= f0 + APPROX_BAND * f0.abs() && dg >= C2 * dg0 && dg <= (2.0 * C1 - 1.0) * dg0
    };
    let at = |alpha: f64| -> Vec<f64> {
        start.x.iter().zip(d).map(|(x, di)| x + alpha * di).collect()
    };
    let mut evals = 0;
    let mut best: Option<Point> = None;
    let keep_best = |p: &Point, best: &mut Option<Point>| {
        if p.value < f0 && best.as_ref().is_none_or(|b| p.value < b.value) {
            *best = Some(p.clone());
        }
    };

    let (mut lo_a, mut lo) = (0.0, start.clone());
    let mut lo_dg = dg0;
    let mut alpha = alpha0;
    let mut first = true;
    let (mut hi_a, mut hi);
    loop {
        if evals >= max_evals {
            return Ok(best);
        }
        let p = obj.trial(at(alpha))?;
        evals += 1;
        keep_best(&p, &mut best);
        if p.value.is_finite() && approx_wolfe(&p, dot(&p.gradient, d)) {
            return Ok(Some(p));
        }
        if p.value > f0 + C1 * alpha * dg0 || (!first && p.value >= lo.value) || !p.value.is_finite() {
            hi_a = alpha;
            hi = p;
            break;
        }
        let dg = dot(&p.gradient, d);
        if dg.abs() <= -C2 * dg0 {
            return Ok(Some(p));
        }
        if dg >= 0.0 {
            hi_a = lo_a;
            hi = lo;
            lo_a = alpha;
            lo = p;
            lo_dg = dg;
            break;
        }
        lo_a = alpha;
        lo = p;
        lo_dg = dg;
        alpha *= 4.0;
        first = false;
        if alpha > 1e12 {
            return Ok(best);
        }
    }

    // Zoom between lo (satisfies sufficient decrease) and hi.
    loop {
        if evals >= max_evals {
            return Ok(best);
        }
        let width = hi_a - lo_a;
        let mut trial_a = if hi.value.is_finite() {
            // Quadratic interpolation from lo's value and slope and hi's value.
            let denom = 2.0 * (hi.value - lo.value - lo_dg * width);
            if denom > 0.0 {
                lo_a - lo_dg * width * width / denom
            } else {
                lo_a + 0.5 * width
            }
        } else {
            lo_a + 0.5 * width
        };
        let (a_min, a_max) = if lo_a < hi_a { (lo_a, hi_a) } else { (hi_a, lo_a) };
        let margin = 0.1 * (a_max - a_min);
        if !(trial_a > a_min + margin && trial_a < a_max - margin) {
            trial_a = 0.5 * (lo_a + hi_a);
        }
        if (a_max - a_min).abs() < 1e-16 * a_max.abs().max(1e-300) {
            return Ok(best);
        }
        let p = obj.trial(at(trial_a))?;
        evals += 1;
        keep_best(&p, &mut best);
        if p.value.is_finite() && approx_wolfe(&p, dot(&p.gradient, d)) {
            return Ok(Some(p));
        }
        if p.value > f0 + C1 * trial_a * dg0 || p.value >= lo.value || !p.value.is_finite() {
            hi_a = trial_a;
            hi = p;
            continue;
        }
        let dg = dot(&p.gradient, d);
        if dg.abs() <= -C2 * dg0 {
            return Ok(Some(p));
        }
        if dg * (hi_a - lo_a) >= 0.0 {
            hi_a = lo_a;
            hi = lo;
        }
        lo_a = trial_a;
        lo = p;
        lo_dg = dg;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((v, g))
    }

    #[test]
    fn converges_below_the_value_rounding_floor() {
        // Near the minimum, value changes are swamped by noise of a few ulp of
        // 1e6 (as with long floating-point sums) while the gradient stays exact.
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let noise = 1e-9 * (1e9 * x[0] + 3e9 * x[1]).sin();
            let v = 1e6 + noise + x.iter().enumerate().map(|(i, xi)| (i + 1) as f64 * (xi - 1.0).powi(2)).sum::<f64>();
            let g = x.iter().enumerate().map(|(i, xi)| 2.0 * (i + 1) as f64 * (xi - 1.0)).collect();
            Ok((v, g))
        };
        let settings = OptimizerSettings {
            grad_tol: 1e-11,
            ..OptimizerSettings::default()
        };
        let m = minimize(f, &[3.0, -2.0, 0.5], &settings, None).unwrap();
        assert!(m.converged(), "{:?}", m.termination);
        assert!(m.evaluations < 60, "{}", m.evaluations);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let m = minimize(rosenbrock, &[-1.2, 1.0], &OptimizerSettings::default(), None).unwrap();
        assert!(m.converged(), "{:?}", m.termination);
        assert!((m.x[0] - 1.0).abs() < 1e-7 && (m.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn quadratic_with_scaled_curvature() {
        let scales = [1e-3, 1.0, 50.0];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 2.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| 2.0 * s * (xi - 2.0)).collect();
            Ok((v, g))
        };
        let m = minimize(f, &[0.0, 0.0, 0.0], &OptimizerSettings::default(), None).unwrap();
        assert!(m.converged());
        for xi in &m.x {
            assert!((xi - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn start_at_minimizer_costs_one_evaluation() {
        let mut calls = 0;
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            calls += 1;
            Ok((x[0] * x[0], vec![2.0 * x[0]]))
        };
        let m = minimize(f, &[0.0], &OptimizerSettings::default(), None).unwrap();
        assert_eq!(m.evaluations, 1);
        assert_eq!(m.gradient_evaluations, 1);
        assert_eq!(m.iterations, 0);
        assert_eq!(calls, 1);
    }

    #[test]
    fn evaluation_counter_matches_calls() {
        let mut calls = 0;
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            calls += 1;
            rosenbrock(x)
        };
        let m = minimize(f, &[0.5, -0.3], &OptimizerSettings::default(), None).unwrap();
        assert_eq!(m.evaluations, calls);
    }

    #[test]
    fn failed_trials_shrink_the_step() {
        // Undefined for x > 1.5; minimum at 1.
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] > 1.5 {
                return Err(BlpError::NonConvergence {
                    context: "test",
                    iterations: 0,
                    residual: 1.0,
                    last_iterate: vec![],
                });
            }
            Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
        };
        let m = minimize(f, &[-30.0], &OptimizerSettings::default(), None).unwrap();
        assert!(m.converged());
        assert!((m.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn iteration_cap_is_reported() {
        let settings = OptimizerSettings {
            max_iter: 2,
            ..OptimizerSettings::default()
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &settings, None).unwrap();
        assert_eq!(m.termination, Termination::MaxIterations);
        assert_eq!(m.iterations, 2);
    }
}
