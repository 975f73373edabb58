//! Paired training samples from clean volumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    corrupt_kspace, sample_motion_spec, ImageSlice, ImageVolume, MotionSpec, SeverityLabel,
};
use crate::error::{Error, Result};

/// Lower/upper percentiles of the intensity window.
pub const NORMALIZATION_PERCENTILES: (f64, f64) = (1.0, 99.0);

/// One simulated sample: motion-affected input, motion-free target, label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub corrupted: ImageSlice,
    pub clean: ImageSlice,
    pub label: SeverityLabel,
    pub spec: MotionSpec,
}

/// Sidecar metadata written next to a simulated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSidecar {
    pub y: SeverityLabel,
    pub spec: MotionSpec,
}

/// Linearly interpolated percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Maps the 1st–99th percentile window of `img` onto `[0, 1]`, clamping
/// outside it. A flat image maps to zeros.
pub fn normalize_percentile(img: &ImageSlice) -> ImageSlice {
    let values: Vec<f64> = img.data().iter().copied().collect();
    let lo = percentile(&values, NORMALIZATION_PERCENTILES.0);
    let hi = percentile(&values, NORMALIZATION_PERCENTILES.1);
    let range = hi - lo;
    if range <= f64::EPSILON * hi.abs().max(1.0) {
        return img.with_data(img.data().mapv(|_| 0.0));
    }
    img.with_data(img.data().mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

/// Draws a random axial slice and crop from `vol` and simulates motion at a
/// uniformly drawn severity.
pub fn make_training_pair<R: Rng + ?Sized>(
    vol: &ImageVolume,
    crop: usize,
    n_states: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    let label = SeverityLabel::new(rng.gen_range(0..=SeverityLabel::MAX))?;
    make_training_pair_with_label(vol, crop, n_states, label, rng)
}

/// As [`make_training_pair`] with a fixed severity.
pub fn make_training_pair_with_label<R: Rng + ?Sized>(
    vol: &ImageVolume,
    crop: usize,
    n_states: usize,
    label: SeverityLabel,
    rng: &mut R,
) -> Result<TrainingPair> {
    let clean = random_clean_crop(vol, crop, rng)?;
    let spec = sample_motion_spec(label, n_states, crop, rng)?;
    let corrupted = corrupt_kspace(&clean, &spec)?;
    Ok(TrainingPair {
        corrupted,
        clean,
        label,
        spec,
    })
}

/// A normalized random `crop × crop` patch from a random axial slice.
pub fn random_clean_crop<R: Rng + ?Sized>(
    vol: &ImageVolume,
    crop: usize,
    rng: &mut R,
) -> Result<ImageSlice> {
    let (rows, cols) = vol.slice_shape();
    if crop > rows || crop > cols {
        return Err(Error::Configuration(format!(
            "crop {crop} larger than {rows}x{cols} slices"
        )));
    }
    let index = rng.gen_range(0..vol.num_slices());
    let slice = normalize_percentile(&vol.axial_slice(index)?);
    let r0 = rng.gen_range(0..=rows - crop);
    let c0 = rng.gen_range(0..=cols - crop);
    slice.crop(r0, c0, crop)
}
