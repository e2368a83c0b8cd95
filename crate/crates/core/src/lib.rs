//! Neural controlled differential equations for irregularly sampled,
//! partially observed multivariate time series.
//!
//! The pipeline runs: [`timeseries`] (ingest, normalize, augment) →
//! [`spline`] (natural cubic path with time appended) → [`cdeint`]
//! (reduce the CDE to an ODE, RK4 3/8 solve, adjoint or direct backward) →
//! [`models`] (Neural CDE and baselines) → [`train`].
//! [`signature`] and [`verify`] cross-check the machinery numerically.

pub mod cdeint;
pub mod error;
pub mod experiment;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod path;
pub mod signature;
pub mod spline;
pub mod timeseries;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use path::{ControlPath, PiecewiseLinear};
pub use spline::{fit_natural_cubic, SplinePath};
pub use timeseries::{TimeSeries, TimeSeriesSet};

/// The reproducible random stream used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
