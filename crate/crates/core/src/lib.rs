//! Calibration of event cameras observed through a collimator.
//!
//! A flickering star-like marker grid sits at the focal plane of a collimator,
//! so the camera sees it at optical infinity and the relative motion between
//! camera and target reduces to a pure rotation about a fixed offset
//! `(x, y, -r)`. The pipeline is:
//!
//! 1. [`event_io`]: read raw event streams and accumulate them into frames.
//! 2. [`features`]: detect marker centroids and assign them to grid positions.
//! 3. [`homography`]: normalized DLT per view.
//! 4. [`collimator_init`]: closed-form intrinsics, spherical offset and
//!    per-view rotations from two or more homographies.
//! 5. [`refine`]: Huber-robust Levenberg-Marquardt over all parameters.
//!
//! [`simulator`] generates ground-truth scenarios (poses, marker projections
//! and flicker event streams) and [`pipeline`] wires steps 3-5 together.

pub mod collimator_init;
pub mod event_io;
pub mod features;
pub mod homography;
pub mod pipeline;
pub mod refine;
pub mod rotation;
pub mod simulator;

pub use collimator_init::{
    AbsoluteConicImage, InitDiagnostics, Intrinsics, LinearInit, SphericalExtrinsics,
    SphericalOffset,
};
pub use event_io::{AccumFrame, AccumMode, Event, EventFormat, EventStream, SensorSize};
pub use features::{Correspondence, DetectionParams, MarkerPoint, TargetGeometry};
pub use homography::Homography;
pub use pipeline::{calibrate_correspondences, CalibrationOutcome, PipelineOptions};
pub use refine::{
    CalibrationReport, Distortion, LmOptions, ParameterVector, Residual, TranslationModel,
};
pub use simulator::{GroundTruth, NoiseModel};

use thiserror::Error;

/// Top-level error type. Each module has its own error enum; this wraps them
/// for callers that run the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    EventIo(#[from] event_io::EventIoError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Homography(#[from] homography::HomographyError),
    #[error(transparent)]
    Init(#[from] collimator_init::InitError),
    #[error(transparent)]
    Refine(#[from] refine::RefineError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimulationError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
