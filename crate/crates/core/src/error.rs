//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the toolkit. Variants carry enough context to be
/// printed as single-line diagnostics by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Two grids were combined or compared but their dims, spacing, or
    /// origin differ. Grids are never resampled silently.
    #[error("geometry mismatch: left {left}, right {right}")]
    GeometryMismatch { left: String, right: String },

    /// An operation required at least one foreground voxel.
    #[error("empty volume: {0}")]
    EmptyVolume(String),

    /// A file did not conform to a supported volume format.
    #[error("format error: {0}")]
    FormatError(String),

    /// Header metadata and payload disagree about the volume size,
    /// or a dimension is invalid for the requested operation.
    #[error("dimension error: {0}")]
    DimensionError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A configuration violated its documented invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Patch placement found no foreground voxel above the height cutoff.
    #[error("no eligible patch centers: z_min_frac excludes all foreground voxels")]
    NoEligibleCenters,

    /// Defect synthesis produced an empty defect on every retry.
    #[error("synthesis failed after {attempts} attempts (patches never intersected the skull)")]
    SynthesisFailed { attempts: u32 },

    /// Phantom generation could not satisfy its output contract.
    #[error("degenerate phantom config: {0}")]
    DegenerateConfig(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A gradient became NaN or infinite; the run aborts with diagnostics.
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    /// Dice of two empty masks is undefined.
    #[error("dice undefined: both masks are empty")]
    BothEmpty,
}
