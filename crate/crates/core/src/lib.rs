//! Gaussian-process regression with block composite likelihoods.
//!
//! Estimation by conditional-independence (CI), marginal (CML) or conditional
//! (CCL) composite likelihood over a partition of the data into blocks, and
//! prediction by the best linear unbiased block predictor (BLUBP). Exact
//! maximum likelihood and the BLUP are provided as dense baselines.

mod clock;
pub mod composite;
pub mod conditional;
pub mod design;
pub mod error;
pub mod full;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod optim;
mod par;
pub mod predict;
pub mod rng;
pub mod study;

pub use composite::{evaluate, fit_composite, fit_composite_traced, FittedModel, Method};
pub use conditional::{build_cache, BlockCache};
pub use design::{generate_slhd, partition_dataset, validate_slhd, Partition, PartitionStrategy, SlicedDesign};
pub use error::{GpError, Result};
pub use full::{blup, fit_mle, full_loglik, sample_gp, FullPredictor};
pub use kernel::{BasisSpec, RoughnessParams};
pub use model::{Dataset, GpParams};
pub use optim::FitOptions;
pub use predict::{predict_blubp, predict_cl, predict_many, PredictionResult, Predictor, PriorWeights};
pub use study::{run_approx_study, run_schwefel_study, run_table_study, schwefel, ExperimentConfig, MetricsReport};
