//! Estimation of random-coefficients logit demand models from market-level
//! data: the nested pseudo-GMM estimator, approximate BLP and the nested
//! fixed-point benchmark.

pub mod bench;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod inference;
pub mod inversion;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod parallel;
pub(crate) mod rng;

pub use data::{
    DatasetParts, Dimensions, MarketDataset, MarketView, MeanUtilities, ModelParameters,
    OutsideProbs, SigmaPart,
};
pub use error::{BlpError, Result, SchemaIssue, Site};
pub use parallel::Executor;
