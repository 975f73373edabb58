//! Paired motion-corrupted / motion-free data.
//!
//! Motion is modelled as a sequence of in-plane rigid poses, each held for a
//! contiguous block of phase-encode lines. The corrupted image is rebuilt
//! from a spectrum stitched together from the per-pose spectra, which yields
//! the ghosting and blurring typical of motion during acquisition.

mod affine;
mod dataset;
mod image;
mod kspace;
mod motion;

pub use affine::{affine_transform_2d, AffineParams, Interpolation, MAX_ROTATION_DEG};
pub use dataset::{
    make_training_pair, make_training_pair_with_label, normalize_percentile, percentile,
    random_clean_crop, PairSidecar, TrainingPair, NORMALIZATION_PERCENTILES,
};
pub use image::{ImageSlice, ImageVolume, MIN_SIDE, PLAUSIBLE_SPACING_MM};
pub use kspace::{corrupt_kspace, fft2, fft_row_of_line};
pub use motion::{label_from_amplitude, sample_motion_spec, MotionSpec, SeverityLabel};

/// Motion states per simulated trajectory unless configured otherwise.
pub const DEFAULT_N_STATES: usize = 3;
