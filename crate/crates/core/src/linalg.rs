//! Dense LU factorization for the per-market J×J systems.
//!
//! nalgebra's LU does not expose a transposed solve, which the 1-norm
//! condition estimator needs, so the factorization lives here.

use nalgebra::DMatrix;

#[derive(Clone, Debug)]
pub struct LuFactor {
    n: usize,
    /// Packed L (unit lower, below diagonal) and U, row-major.
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl LuFactor {
    /// Factorizes with partial pivoting. Returns `None` for an exactly singular
    /// or non-finite matrix.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                lu[r * n + c] = a[(r, c)];
            }
        }
        if lu.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm1 = (0..n)
            .map(|c| (0..n).map(|r| a[(r, c)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == 0.0 {
                return None;
            }
            if piv != col {
                for c in 0..n {
                    lu.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for c in col + 1..n {
                        lu[r * n + c] -= f * lu[col * n + c];
                    }
                }
            }
        }
        Some(Self { n, lu, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc / self.lu[r * n + r];
        }
        x
    }

    /// Solves Aᵀ x = b.
    pub fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ v = w, x = Pᵀ v.
        let mut w = b.to_vec();
        for r in 0..n {
            let mut acc = w[r];
            for c in 0..r {
                acc -= self.lu[c * n + r] * w[c];
            }
            w[r] = acc / self.lu[r * n + r];
        }
        for r in (0..n).rev() {
            let mut acc = w[r];
            for c in r + 1..n {
                acc -= self.lu[c * n + r] * w[c];
            }
            w[r] = acc;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Solves A X = B column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<f64> = b.column(c).iter().copied().collect();
            let x = self.solve(&col);
            for (r, v) in x.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        out
    }

    /// Estimate of the 1-norm condition number ‖A‖₁‖A⁻¹‖₁ (Hager's method
    /// with Higham's alternative lower bound).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
            if !y_norm.is_finite() {
                return f64::INFINITY;
            }
            if y_norm <= est {
                break;
            }
            est = y_norm;
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transposed(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0_f64), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        // Higham's alternating-sign probe guards against Hager's worst cases.
        let alt: Vec<f64> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
            })
            .collect();
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est) * self.norm1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn solves_match_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..9 {
            let a = random_matrix(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lu = LuFactor::new(&a).unwrap();
            let x = lu.solve(&b);
            let r = &a * nalgebra::DVector::from_vec(x.clone()) - nalgebra::DVector::from_vec(b.clone());
            assert!(r.amax() < 1e-10);
            let xt = lu.solve_transposed(&b);
            let rt = a.transpose() * nalgebra::DVector::from_vec(xt) - nalgebra::DVector::from_vec(b);
            assert!(rt.amax() < 1e-10);
        }
    }

    #[test]
    fn condition_estimate_is_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..8 {
            let a = random_matrix(&mut rng, n);
            let inv = a.clone().try_inverse().unwrap();
            let norm = |m: &DMatrix<f64>| {
                (0..m.ncols())
                    .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            };
            let exact = norm(&a) * norm(&inv);
            let est = LuFactor::new(&a).unwrap().condition_estimate();
            // The estimator is a lower bound that is rarely off by more than 3x.
            assert!(est <= exact * (1.0 + 1e-10) && est >= exact / 3.0, "{est} vs {exact}");
        }
    }

    #[test]
    fn singular_matrix_is_rejected_or_flagged() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        match LuFactor::new(&a) {
            None => {}
            Some(lu) => assert!(lu.condition_estimate() > 1e12),
        }
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-15]);
        let lu = LuFactor::new(&b).unwrap();
        assert!(lu.condition_estimate() > 1e12);
    }
}
