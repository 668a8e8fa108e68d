//! Label-differentially-private mechanisms for cluster-randomized experiments.
//!
//! The crate covers the full pipeline: privatize outcomes with a
//! cluster-aware randomized-response mechanism, account for the privacy
//! loss in closed form, debias the released outcomes into an unbiased
//! average-treatment-effect estimate, and compute the exact or bounded
//! variance of that estimate. A seeded Monte Carlo harness in
//! [`experiments`] ties everything together.
//!
//! ```
//! use clusterdp::{accounting, model::Extended};
//!
//! let lambda = accounting::calibrate_lambda(2.0, 0.0, 0.02, Extended::Finite(10.0)).unwrap();
//! let report = accounting::cluster_dp_eps_delta(0.02, Extended::Finite(10.0), lambda,
//!     2.0 - 0.1);
//! assert!((report.epsilon.finite().unwrap() - 2.0).abs() < 1e-12);
//! ```

pub mod accounting;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod io;
pub mod mechanisms;
pub mod model;
pub mod rng;
pub mod simdata;
pub mod stats;
pub mod variance;

pub use error::{Error, Result};
pub use model::{
    Design, DesignCounts, Epsilon, Extended, MechanismKind, MechanismParams, NoiseScale, OutcomeSpace,
    PopulationDataset, PrivatizedRelease, ProjectedPrior,
};
pub use rng::{SeedTree, Stream};
