use nalgebra::DMatrix;
use npgmm::bench::simulate;
use npgmm::dgp::DgpConfig;
use npgmm::estimators::{fit, random_starts, Method, SolverConfig};
use npgmm::gmm::{build_weight_matrix, WeightKind};
use npgmm::inference::{effective_instruments, npgmm_variance, VarianceOptions};
use npgmm::inversion::{solve_delta, InversionMethod, InversionSettings};
use npgmm::model::delta_param_gradients;
use npgmm::{Executor, SigmaPart};

/// Ω_θλΛ_θ must equal c·Σ z*_o (dδ*/dθ − ∂δ/∂θ|λ)_o / n, with the total
/// derivative of the exact inversion taken by central differences.
#[test]
fn lambda_correction_matches_the_inversion_derivative() {
    let exec = Executor::sequential();
    let (g, _) = simulate(&DgpConfig::sized(15, 30, 80, 21), &exec).unwrap();
    let ds = &g.dataset;
    let w = build_weight_matrix(ds, WeightKind::TwoStage).unwrap();
    let start = random_starts(ds, &w, 1, 21, &InversionSettings::default(), &exec).unwrap().remove(0);
    let cfg = SolverConfig {
        threads: 1,
        ..SolverConfig::default()
    };
    let est = fit(Method::Npgmm, ds, &w, &cfg, &start).unwrap();
    assert!(est.converged);
    let v = npgmm_variance(&est, ds, &w, VarianceOptions::default(), &exec).unwrap();
    let zs = effective_instruments(&est, ds, &w).unwrap();

    let k = ds.n_chars();
    let sp = est.theta_hat.sigma_part.clone();
    let settings = InversionSettings {
        tol_delta: 1e-14,
        ..InversionSettings::default()
    };
    let mut gap = DMatrix::zeros(ds.n_obs(), 2 * k);
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        let fixed = delta_param_gradients(est.lambda_hat.market(t), &m, &sp).unwrap();
        for c in 0..k {
            let h = 1e-5;
            let solve = |step: f64| {
                let mut sigma = sp.sigma.clone();
                sigma[c] += step;
                let moved = SigmaPart { sigma, pi: sp.pi.clone() };
                solve_delta(m.shares, &m, &moved, &settings, InversionMethod::Newton, Some(est.delta_hat.market(t)))
                    .unwrap()
                    .delta
            };
            let (up, dn) = (solve(h), solve(-h));
            for j in 0..m.n_products {
                gap[(t * m.n_products + j, k + c)] = (up[j] - dn[j]) / (2.0 * h) - fixed[(j, c)];
            }
        }
    }
    let scale = 1.0 / (2.0 * v.xi_variance * ds.n_obs() as f64);
    let expected = zs.transpose() * gap * scale;
    let err = (&v.omega_tl_times_lambda - &expected).amax();
    assert!(err < 1e-6 * expected.amax().max(1.0), "max gap {err:e}");
}
