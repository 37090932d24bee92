//! Dataset and parameter containers.
//!
//! Tensors are stored flat in row-major order with the market index outermost:
//! characteristics are `x[(t * J + j) * K + k]`, taste draws are
//! `nu[(t * N + i) * K + k]`, and so on. [`MarketView`] hands out the slices
//! belonging to one market so the per-market kernels never index globally.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};

/// Sizes of every tensor in a [`MarketDataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// T
    pub markets: usize,
    /// J, inside products per market
    pub products: usize,
    /// K, characteristics (price included)
    pub characteristics: usize,
    /// q
    pub instruments: usize,
    /// N, simulated consumers per market
    pub draws: usize,
    /// R, demographics per consumer (may be zero)
    pub demographics: usize,
}

impl Dimensions {
    pub fn observations(&self) -> usize {
        self.markets * self.products
    }

    /// Number of nonlinear parameters: K random-coefficient scales plus K×R interactions.
    pub fn nonlinear_params(&self) -> usize {
        self.characteristics * (1 + self.demographics)
    }
}

/// Immutable estimation input: observed shares, characteristics, instruments and
/// the fixed consumer draws.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketDataset {
    dims: Dimensions,
    x: Vec<f64>,
    z: Vec<f64>,
    shares: Vec<f64>,
    nu: Vec<f64>,
    demo: Vec<f64>,
    market_size: Option<Vec<f64>>,
    outside: Vec<f64>,
}

/// Raw tensors used to assemble a [`MarketDataset`].
#[derive(Clone, Debug, Default)]
pub struct DatasetParts {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub shares: Vec<f64>,
    pub nu: Vec<f64>,
    pub demo: Vec<f64>,
    pub market_size: Option<Vec<f64>>,
}

impl MarketDataset {
    /// Validates every invariant and builds the dataset.
    pub fn new(dims: Dimensions, parts: DatasetParts) -> Result<Self> {
        let problems = validate(&dims, &parts);
        if let Some(first) = problems.into_iter().next() {
            return Err(first);
        }
        let DatasetParts {
            x,
            z,
            shares,
            nu,
            demo,
            market_size,
        } = parts;
        let outside = shares
            .chunks(dims.products)
            .map(|s| 1.0 - s.iter().sum::<f64>())
            .collect();
        Ok(Self {
            dims,
            x,
            z,
            shares,
            nu,
            demo,
            market_size,
            outside,
        })
    }

    pub fn dims(&self) -> &Dimensions {
        &self.dims
    }

    pub fn n_markets(&self) -> usize {
        self.dims.markets
    }

    pub fn n_products(&self) -> usize {
        self.dims.products
    }

    pub fn n_chars(&self) -> usize {
        self.dims.characteristics
    }

    pub fn n_instruments(&self) -> usize {
        self.dims.instruments
    }

    pub fn n_draws(&self) -> usize {
        self.dims.draws
    }

    pub fn n_demographics(&self) -> usize {
        self.dims.demographics
    }

    pub fn n_obs(&self) -> usize {
        self.dims.observations()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn demo(&self) -> &[f64] {
        &self.demo
    }

    pub fn market_size(&self) -> Option<&[f64]> {
        self.market_size.as_deref()
    }

    /// Outside share s_0t per market.
    pub fn outside_shares(&self) -> &[f64] {
        &self.outside
    }

    /// Stacked characteristics, one row per (t, j) observation.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_obs(), self.n_chars(), &self.x)
    }

    /// Stacked instruments, one row per (t, j) observation.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_obs(), self.n_instruments(), &self.z)
    }

    pub fn market(&self, t: usize) -> MarketView<'_> {
        let d = &self.dims;
        let (j, k, q, n, r) = (
            d.products,
            d.characteristics,
            d.instruments,
            d.draws,
            d.demographics,
        );
        MarketView {
            index: t,
            n_products: j,
            n_chars: k,
            n_instruments: q,
            n_draws: n,
            n_demo: r,
            x: &self.x[t * j * k..(t + 1) * j * k],
            z: &self.z[t * j * q..(t + 1) * j * q],
            shares: &self.shares[t * j..(t + 1) * j],
            nu: &self.nu[t * n * k..(t + 1) * n * k],
            demo: &self.demo[t * n * r..(t + 1) * n * r],
            outside_share: self.outside[t],
        }
    }

    /// Returns a copy with instruments replaced; used when instruments are
    /// rebuilt after ingestion.
    pub fn with_instruments(&self, q: usize, z: Vec<f64>) -> Result<Self> {
        let dims = Dimensions {
            instruments: q,
            ..self.dims
        };
        Self::new(
            dims,
            DatasetParts {
                x: self.x.clone(),
                z,
                shares: self.shares.clone(),
                nu: self.nu.clone(),
                demo: self.demo.clone(),
                market_size: self.market_size.clone(),
            },
        )
    }

    pub fn into_parts(self) -> (Dimensions, DatasetParts) {
        (
            self.dims,
            DatasetParts {
                x: self.x,
                z: self.z,
                shares: self.shares,
                nu: self.nu,
                demo: self.demo,
                market_size: self.market_size,
            },
        )
    }
}

fn validate(d: &Dimensions, p: &DatasetParts) -> Vec<BlpError> {
    let mut out = Vec::new();
    if d.markets == 0 || d.products == 0 || d.characteristics == 0 || d.draws == 0 {
        out.push(BlpError::InvalidInput(format!(
            "markets, products, characteristics and draws must all be positive (got {d:?})"
        )));
        return out;
    }
    let checks: [(&'static str, usize, usize); 5] = [
        ("characteristics tensor", d.markets * d.products * d.characteristics, p.x.len()),
        ("instrument tensor", d.markets * d.products * d.instruments, p.z.len()),
        ("share matrix", d.markets * d.products, p.shares.len()),
        ("taste draw tensor", d.markets * d.draws * d.characteristics, p.nu.len()),
        ("demographic tensor", d.markets * d.draws * d.demographics, p.demo.len()),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            out.push(BlpError::dimension_mismatch(what, expected, found));
        }
    }
    if let Some(sizes) = &p.market_size {
        if sizes.len() != d.markets {
            out.push(BlpError::dimension_mismatch("market sizes", d.markets, sizes.len()));
        } else if let Some(t) = sizes.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
            out.push(BlpError::InvalidInput(format!(
                "market size of market {t} must be positive and finite"
            )));
        }
    }
    if !out.is_empty() {
        return out;
    }
    for (name, values) in [("x", &p.x), ("z", &p.z), ("nu", &p.nu), ("demo", &p.demo)] {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            out.push(BlpError::InvalidInput(format!(
                "non-finite value in {name} at flat index {pos}"
            )));
        }
    }
    for t in 0..d.markets {
        let market = &p.shares[t * d.products..(t + 1) * d.products];
        for (j, s) in market.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0 && *s < 1.0) {
                out.push(BlpError::InvalidInput(format!(
                    "share of product {j} in market {t} must lie in (0, 1), got {s}"
                )));
            }
        }
        let total: f64 = market.iter().sum();
        if !(total < 1.0) {
            out.push(BlpError::InvalidInput(format!(
                "inside shares of market {t} sum to {total}; the outside share must be positive"
            )));
        }
    }
    out
}

/// Borrowed view of one market's slices.
#[derive(Clone, Copy, Debug)]
pub struct MarketView<'a> {
    pub index: usize,
    pub n_products: usize,
    pub n_chars: usize,
    pub n_instruments: usize,
    pub n_draws: usize,
    pub n_demo: usize,
    /// J×K row-major
    pub x: &'a [f64],
    /// J×q row-major
    pub z: &'a [f64],
    pub shares: &'a [f64],
    /// N×K row-major
    pub nu: &'a [f64],
    /// N×R row-major
    pub demo: &'a [f64],
    pub outside_share: f64,
}

impl<'a> MarketView<'a> {
    #[inline]
    pub fn x_row(&self, j: usize) -> &'a [f64] {
        &self.x[j * self.n_chars..(j + 1) * self.n_chars]
    }

    #[inline]
    pub fn z_row(&self, j: usize) -> &'a [f64] {
        &self.z[j * self.n_instruments..(j + 1) * self.n_instruments]
    }

    #[inline]
    pub fn nu_row(&self, i: usize) -> &'a [f64] {
        &self.nu[i * self.n_chars..(i + 1) * self.n_chars]
    }

    #[inline]
    pub fn demo_row(&self, i: usize) -> &'a [f64] {
        &self.demo[i * self.n_demo..(i + 1) * self.n_demo]
    }

    /// Partial derivative of consumer i's utility offset for product j with
    /// respect to nonlinear parameter `m` (σ's first, then π row-major).
    #[inline]
    pub fn offset_derivative(&self, i: usize, j: usize, m: usize) -> f64 {
        let k_count = self.n_chars;
        if m < k_count {
            self.x[j * k_count + m] * self.nu[i * k_count + m]
        } else {
            let idx = m - k_count;
            let (k, r) = (idx / self.n_demo, idx % self.n_demo);
            self.x[j * k_count + k] * self.demo[i * self.n_demo + r]
        }
    }
}

/// The nonlinear part of θ: random-coefficient scales σ (length K) and
/// demographic interactions π (K×R).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPart {
    pub sigma: DVector<f64>,
    pub pi: DMatrix<f64>,
}

impl SigmaPart {
    pub fn zeros(k: usize, r: usize) -> Self {
        Self {
            sigma: DVector::zeros(k),
            pi: DMatrix::zeros(k, r),
        }
    }

    pub fn from_sigma(sigma: &[f64]) -> Self {
        Self {
            sigma: DVector::from_column_slice(sigma),
            pi: DMatrix::zeros(sigma.len(), 0),
        }
    }

    pub fn n_chars(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_demo(&self) -> usize {
        self.pi.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.sigma.len() + self.pi.len()
    }

    /// Flattens to (σ_1..σ_K, π_11..π_1R, π_21, ..., π_KR).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.sigma.iter());
        for k in 0..self.pi.nrows() {
            for r in 0..self.pi.ncols() {
                out.push(self.pi[(k, r)]);
            }
        }
        out
    }

    pub fn from_slice(k: usize, r: usize, values: &[f64]) -> Result<Self> {
        if values.len() != k * (1 + r) {
            return Err(BlpError::dimension_mismatch(
                "nonlinear parameter vector",
                k * (1 + r),
                values.len(),
            ));
        }
        Ok(Self {
            sigma: DVector::from_column_slice(&values[..k]),
            pi: DMatrix::from_row_slice(k, r, &values[k..]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.sigma.iter().chain(self.pi.iter()).all(|v| v.is_finite())
    }

    pub(crate) fn check(&self, market: &MarketView<'_>) -> Result<()> {
        if self.sigma.len() != market.n_chars {
            return Err(BlpError::dimension_mismatch(
                "sigma length",
                market.n_chars,
                self.sigma.len(),
            ));
        }
        if self.pi.nrows() != market.n_chars || self.pi.ncols() != market.n_demo {
            return Err(BlpError::dimension_mismatch(
                "pi shape (K×R entries)",
                market.n_chars * market.n_demo,
                self.pi.len(),
            ));
        }
        if !self.is_finite() {
            return Err(BlpError::InvalidInput(
                "nonlinear parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Structural parameter vector θ = (β, σ, π).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub beta: DVector<f64>,
    pub sigma_part: SigmaPart,
}

impl ModelParameters {
    pub fn new(beta: DVector<f64>, sigma_part: SigmaPart) -> Result<Self> {
        if beta.len() != sigma_part.n_chars() {
            return Err(BlpError::dimension_mismatch(
                "beta length",
                sigma_part.n_chars(),
                beta.len(),
            ));
        }
        if !beta.iter().all(|b| b.is_finite()) || !sigma_part.is_finite() {
            return Err(BlpError::InvalidInput("parameters must be finite".into()));
        }
        Ok(Self { beta, sigma_part })
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma_part.sigma
    }

    pub fn pi(&self) -> &DMatrix<f64> {
        &self.sigma_part.pi
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + self.sigma_part.n_params()
    }

    /// Flattens to (β, σ, vec π).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.beta.iter().copied().collect();
        out.extend(self.sigma_part.to_vec());
        out
    }
}

/// Mean utilities δ_jt, flat T×J.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanUtilities {
    pub products: usize,
    pub delta: Vec<f64>,
}

impl MeanUtilities {
    pub fn new(products: usize, delta: Vec<f64>) -> Self {
        debug_assert!(products > 0 && delta.len() % products == 0);
        Self { products, delta }
    }

    pub fn zeros(dims: &Dimensions) -> Self {
        Self::new(dims.products, vec![0.0; dims.observations()])
    }

    pub fn n_markets(&self) -> usize {
        self.delta.len() / self.products
    }

    pub fn market(&self, t: usize) -> &[f64] {
        &self.delta[t * self.products..(t + 1) * self.products]
    }

    pub fn market_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.delta[t * self.products..(t + 1) * self.products]
    }

    pub fn from_markets(products: usize, markets: Vec<Vec<f64>>) -> Self {
        Self::new(products, markets.into_iter().flatten().collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.delta, &other.delta)
    }
}

/// Consumer-level outside-option probabilities λ_it, flat T×N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutsideProbs {
    pub draws: usize,
    pub lambda: Vec<f64>,
}

impl OutsideProbs {
    pub fn new(draws: usize, lambda: Vec<f64>) -> Result<Self> {
        // λ = 1 is what 1 − ε rounds to when every inside utility is tiny.
        if let Some(pos) = lambda.iter().position(|l| !(*l > 0.0 && *l <= 1.0)) {
            return Err(BlpError::InvalidInput(format!(
                "outside probability at flat index {pos} is outside (0, 1]: {}",
                lambda[pos]
            )));
        }
        Ok(Self { draws, lambda })
    }

    pub fn market(&self, t: usize) -> &[f64] {
        &self.lambda[t * self.draws..(t + 1) * self.draws]
    }

    pub fn from_markets(draws: usize, markets: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(draws, markets.into_iter().flatten().collect())
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
