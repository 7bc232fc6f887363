//! Reconstruction of signed distance functions from raw, unoriented point
//! clouds.
//!
//! A single skip-connected MLP emits the candidate distance field `u`
//! together with two auxiliary vector potentials. The gradient field `G` is
//! not a free output: it is assembled from the curl of the first potential so
//! that the p-Poisson equation holds by construction, and a second,
//! unit-ball-projected field carries a curl-free penalty. Training minimizes
//! a five-term objective over surface and collocation batches; the zero level
//! set of the trained `u` is then extracted with marching cubes and scored
//! against reference geometry.
//!
//! Module map:
//! - [`diff`]: forward-mode jets nested over a reverse-mode parameter tape
//! - [`net`]: the MLP, its initializers, and the chunked forward/backward engine
//! - [`fields`]: the hard-constrained `G`, the projected `G̃`, and their curls
//! - [`loss`]: Monte Carlo estimators of the objective terms
//! - [`sampler`]: point-cloud normalization, kNN, surface/collocation batches
//! - [`train`]: Adam loop with exponential step decay
//! - [`extract`]: dense grid evaluation and marching cubes
//! - [`metrics`]: Chamfer/Hausdorff distances, normal consistency, field MSE
//! - [`verify`]: analytic shapes, quadrature harness, finite-difference audits
//! - [`io`]: XYZ/PLY/OBJ readers and writers, checkpoints, CSV reports

pub mod diff;
pub mod extract;
pub mod fields;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod verify;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes
/// (input/config problems → 2, numeric faults → 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
