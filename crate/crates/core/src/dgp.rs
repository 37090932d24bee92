//! Monte Carlo data generating process and instrument construction.
//!
//! Characteristics are (1, x₁, x₂, x₃, p). Every random quantity comes from
//! its own substream keyed by (purpose, market, product) or (purpose, market,
//! consumer), so growing J, T or N leaves existing draws untouched.

use nalgebra::{DVector, Matrix3};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{DatasetParts, Dimensions, MarketDataset, MeanUtilities, ModelParameters, SigmaPart};
use crate::error::{BlpError, Result};
use crate::model::predict_shares;
use crate::parallel::Executor;
use crate::rng::{purpose, substream};

pub const N_CHARS: usize = 5;
pub const N_COST_SHIFTERS: usize = 6;
pub const N_INSTRUMENTS: usize = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub products: usize,
    pub markets: usize,
    pub draws: usize,
    pub seed: u64,
    pub beta_true: Vec<f64>,
    pub sigma_true: Vec<f64>,
    /// Covariance of (x₁, x₂, x₃).
    pub x_covariance: [[f64; 3]; 3],
    /// p = price_intercept + Σ x + price_xi·ξ + price_omega·ω.
    pub price_intercept: f64,
    pub price_xi: f64,
    pub price_omega: f64,
    /// w_k = shifter_scale·|shifter_omega·ω + shifter_x·Σ x| + e_k.
    pub shifter_scale: f64,
    pub shifter_omega: f64,
    pub shifter_x: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            products: 1000,
            markets: 1000,
            draws: 1000,
            seed: 0,
            beta_true: vec![0.0, 1.5, 1.5, 0.5, -3.0],
            sigma_true: vec![0.5f64.sqrt(), 0.5f64.sqrt(), 0.5f64.sqrt(), 0.5f64.sqrt(), 0.2f64.sqrt()],
            x_covariance: [[1.0, -0.8, 0.3], [-0.8, 1.0, 0.3], [0.3, 0.3, 1.0]],
            price_intercept: 3.0,
            price_xi: 1.5,
            price_omega: 5.0,
            shifter_scale: 0.25,
            shifter_omega: 5.0,
            shifter_x: 1.1,
        }
    }
}

impl DgpConfig {
    pub fn sized(products: usize, markets: usize, draws: usize, seed: u64) -> Self {
        Self {
            products,
            markets,
            draws,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.products == 0 || self.markets == 0 || self.draws == 0 {
            return Err(BlpError::InvalidInput("J, T and N must be at least 1".into()));
        }
        if self.beta_true.len() != N_CHARS || self.sigma_true.len() != N_CHARS {
            return Err(BlpError::InvalidInput(format!(
                "beta_true and sigma_true need {N_CHARS} entries"
            )));
        }
        if !self.beta_true.iter().chain(&self.sigma_true).all(|v| v.is_finite()) {
            return Err(BlpError::InvalidInput("true parameters must be finite".into()));
        }
        self.x_factor()?;
        Ok(())
    }

    fn x_factor(&self) -> Result<Matrix3<f64>> {
        let c = &self.x_covariance;
        let m = Matrix3::from_fn(|r, k| c[r][k]);
        if (m - m.transpose()).amax() > 0.0 {
            return Err(BlpError::InvalidInput("x covariance must be symmetric".into()));
        }
        m.cholesky()
            .map(|ch| ch.l())
            .ok_or_else(|| BlpError::InvalidInput("x covariance must be positive definite".into()))
    }

    pub fn true_params(&self) -> Result<ModelParameters> {
        ModelParameters::new(
            DVector::from_column_slice(&self.beta_true),
            SigmaPart::from_sigma(&self.sigma_true),
        )
    }
}

/// Everything the generator draws, before shares are computed.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpDraws {
    /// x₁..x₃ per product, J×3, shared by all markets.
    pub x_own: Vec<f64>,
    /// T×J each.
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
    pub price: Vec<f64>,
    /// T×J×6.
    pub shifters: Vec<f64>,
    /// T×N×5.
    pub nu: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub dataset: MarketDataset,
    pub truth: ModelParameters,
    pub delta_true: MeanUtilities,
    pub draws: DgpDraws,
}

/// Standard normal by inverse CDF of a uniform on the open unit interval.
pub(crate) fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    Normal::standard().inverse_cdf(u)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// p = a + x₁ + x₂ + x₃ + b·ξ + c·ω.
pub fn price(config: &DgpConfig, x: [f64; 3], xi: f64, omega: f64) -> f64 {
    config.price_intercept + x.iter().sum::<f64>() + config.price_xi * xi + config.price_omega * omega
}

pub fn draw(config: &DgpConfig) -> Result<DgpDraws> {
    config.validate()?;
    let (j_count, t_count, n) = (config.products, config.markets, config.draws);
    let l = config.x_factor()?;
    let seed = config.seed;
    let mut x_own = Vec::with_capacity(j_count * 3);
    for j in 0..j_count {
        let mut rng = substream(seed, purpose::CHARACTERISTICS, 0, j as u64);
        let e = nalgebra::Vector3::from_fn(|_, _| std_normal(&mut rng));
        x_own.extend((l * e).iter());
    }
    let mut xi = Vec::with_capacity(t_count * j_count);
    let mut omega = Vec::with_capacity(t_count * j_count);
    let mut price_v = Vec::with_capacity(t_count * j_count);
    let mut shifters = Vec::with_capacity(t_count * j_count * N_COST_SHIFTERS);
    for t in 0..t_count {
        for j in 0..j_count {
            let x = [x_own[3 * j], x_own[3 * j + 1], x_own[3 * j + 2]];
            let x_sum: f64 = x.iter().sum();
            let e = std_normal(&mut substream(seed, purpose::DEMAND_SHOCK, t as u64, j as u64));
            let w = uniform(&mut substream(seed, purpose::COST_SHOCK, t as u64, j as u64));
            let mut rng = substream(seed, purpose::COST_SHIFTERS, t as u64, j as u64);
            let base = config.shifter_scale * (config.shifter_omega * w + config.shifter_x * x_sum).abs();
            for _ in 0..N_COST_SHIFTERS {
                shifters.push(base + uniform(&mut rng));
            }
            xi.push(e);
            omega.push(w);
            price_v.push(price(config, x, e, w));
        }
    }
    let mut nu = Vec::with_capacity(t_count * n * N_CHARS);
    for t in 0..t_count {
        for i in 0..n {
            let mut rng = substream(seed, purpose::TASTE_DRAWS, t as u64, i as u64);
            for _ in 0..N_CHARS {
                nu.push(std_normal(&mut rng));
            }
        }
    }
    Ok(DgpDraws {
        x_own,
        xi,
        omega,
        price: price_v,
        shifters,
        nu,
    })
}

/// The 42 instruments for one product: constant; x in levels, squares and
/// cubes; w likewise; Π x; Π w; x₁·w; x₂·w.
pub fn build_instruments(x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 3 || w.len() != N_COST_SHIFTERS {
        return Err(BlpError::InvalidInput(format!(
            "instruments need 3 characteristics and {N_COST_SHIFTERS} cost shifters, got {} and {}",
            x.len(),
            w.len()
        )));
    }
    let mut z = Vec::with_capacity(N_INSTRUMENTS);
    z.push(1.0);
    for power in 1..=3 {
        z.extend(x.iter().map(|v| v.powi(power)));
    }
    for power in 1..=3 {
        z.extend(w.iter().map(|v| v.powi(power)));
    }
    z.push(x.iter().product());
    z.push(w.iter().product());
    z.extend(w.iter().map(|v| x[0] * v));
    z.extend(w.iter().map(|v| x[1] * v));
    debug_assert_eq!(z.len(), N_INSTRUMENTS);
    Ok(z)
}

pub fn generate_dataset(config: &DgpConfig, exec: &Executor) -> Result<GeneratedData> {
    let draws = draw(config)?;
    let truth = config.true_params()?;
    let (j_count, t_count, n) = (config.products, config.markets, config.draws);
    let mut x = Vec::with_capacity(t_count * j_count * N_CHARS);
    let mut z = Vec::with_capacity(t_count * j_count * N_INSTRUMENTS);
    let mut delta = Vec::with_capacity(t_count * j_count);
    for t in 0..t_count {
        for j in 0..j_count {
            let o = t * j_count + j;
            let own = &draws.x_own[3 * j..3 * j + 3];
            let row = [1.0, own[0], own[1], own[2], draws.price[o]];
            delta.push(row.iter().zip(&config.beta_true).map(|(a, b)| a * b).sum::<f64>() + draws.xi[o]);
            x.extend(row);
            z.extend(build_instruments(own, &draws.shifters[o * N_COST_SHIFTERS..(o + 1) * N_COST_SHIFTERS])?);
        }
    }
    let dims = Dimensions {
        markets: t_count,
        products: j_count,
        characteristics: N_CHARS,
        instruments: N_INSTRUMENTS,
        draws: n,
        demographics: 0,
    };
    // Shares are needed to build the dataset; a placeholder carries the draws
    // and characteristics into the share computation.
    let placeholder = MarketDataset::new(
        dims,
        DatasetParts {
            x,
            z,
            shares: vec![0.5 / j_count as f64; t_count * j_count],
            nu: draws.nu.clone(),
            demo: vec![],
            market_size: None,
        },
    )?;
    let delta = MeanUtilities::new(j_count, delta);
    let sp = &truth.sigma_part;
    let shares = exec.try_map_markets(t_count, |t| predict_shares(delta.market(t), &placeholder.market(t), sp))?;
    let shares: Vec<f64> = shares.into_iter().flatten().collect();
    assert!(shares.iter().all(|s| *s > 0.0), "logit shares are interior by construction");
    let (_, mut parts) = placeholder.into_parts();
    parts.shares = shares;
    let dataset = MarketDataset::new(dims, parts)?;
    Ok(GeneratedData {
        dataset,
        truth,
        delta_true: delta,
        draws,
    })
}

/// Leave-one-out group means of instrument columns.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMeans {
    /// Products × columns, row-major; NaN for products alone in their group.
    pub values: Vec<f64>,
    pub columns: usize,
    /// Products whose group has no other member.
    pub singletons: Vec<usize>,
}

/// For each product, the mean of every column over the other products in
/// its group. `values` is products × columns, row-major.
pub fn group_mean_instruments(values: &[f64], columns: usize, groups: &[String]) -> Result<GroupMeans> {
    let n = groups.len();
    if columns == 0 || values.len() != n * columns {
        return Err(BlpError::dimension_mismatch("group instrument values", n * columns, values.len()));
    }
    let mut index: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    let label: Vec<usize> = groups
        .iter()
        .map(|g| {
            let next = index.len();
            *index.entry(g.as_str()).or_insert(next)
        })
        .collect();
    let g_count = index.len();
    let mut sums = vec![0.0; g_count * columns];
    let mut counts = vec![0usize; g_count];
    for (p, &g) in label.iter().enumerate() {
        counts[g] += 1;
        for c in 0..columns {
            sums[g * columns + c] += values[p * columns + c];
        }
    }
    if counts.iter().all(|&c| c == 1) {
        return Err(BlpError::InvalidInput(
            "every group has a single product; leave-one-out means are undefined".into(),
        ));
    }
    let mut out = vec![f64::NAN; n * columns];
    let mut singletons = Vec::new();
    for (p, &g) in label.iter().enumerate() {
        if counts[g] == 1 {
            singletons.push(p);
            continue;
        }
        let others = (counts[g] - 1) as f64;
        for c in 0..columns {
            out[p * columns + c] = (sums[g * columns + c] - values[p * columns + c]) / others;
        }
    }
    Ok(GroupMeans {
        values: out,
        columns,
        singletons,
    })
}
