//! Plane-wave ultrasound pipeline for 2D vascular strain imaging.
//!
//! The library covers the full chain from synthetic data to strain maps:
//!
//! - `probe`: transducer description, plane-wave sequences, transmit delays,
//!   Tukey apodization
//! - `phantom`: point and vessel scatterer fields plus the radial wall-motion
//!   model
//! - `sim`: point-scatterer channel-data synthesis, decimation to the output
//!   rate, and white-noise injection at a prescribed SNR
//! - `beamform`: delay-and-sum on angled grids ("receive mediums"), coherent
//!   compounding, envelope detection
//! - `track`: two-step block matching (envelope NCC then RF cross-correlation
//!   with parabolic subsample refinement) and median regularization
//! - `dispcomp`: triangulation of lateral displacement from symmetric angled
//!   axial estimates, resampling onto the reference grid
//! - `strain`: least-squares gradient estimation and principal strains
//! - `metrics`: point-spread-function metrics (contrast ratio, FWHM) and
//!   error metrics against analytic ground truth
//! - `io`/`render`: binary and CSV artifacts, portable image output
//! - `config`/`pipeline`: TOML experiment description and the staged,
//!   cacheable pipeline behind the CLI
//!
//! All stages are deterministic: seeded RNG streams, order-preserving
//! parallel maps (see `par`), and fixed binary layouts make repeated runs
//! byte-identical at any thread count.

pub mod array2;
pub mod beamform;
pub mod config;
pub mod dispcomp;
pub mod io;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod probe;
pub mod render;
pub mod sim;
pub mod strain;
pub mod track;

/// Errors shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A function argument violated its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Two fields or frames that must share a lattice do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    /// Experiment configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),
    /// A binary artifact is malformed or of an unexpected layout.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// A pipeline stage failed; wraps the underlying error.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
