use log::warn;
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// Voxel sizes seen in the reference abdominal data, in mm.
pub const PLAUSIBLE_SPACING_MM: (f64, f64) = (2.23, 4.5);

/// A 2D real-valued intensity image with pixel spacing in millimeters.
///
/// Rows are the phase-encode axis wherever k-space is involved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    data: Array2<f64>,
    spacing: (f64, f64),
}

impl ImageSlice {
    pub fn new(data: Array2<f64>, spacing: (f64, f64)) -> Result<Self> {
        let (h, w) = data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Contract(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite()) {
            return Err(Error::Parameter(format!(
                "pixel spacing {spacing:?} must be positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("image contains non-finite values".into()));
        }
        Ok(Self { data, spacing })
    }

    /// Unit-spacing image, mostly for tests and synthetic data.
    pub fn unit(data: Array2<f64>) -> Result<Self> {
        Self::new(data, (1.0, 1.0))
    }

    pub fn zeros(height: usize, width: usize, spacing: (f64, f64)) -> Result<Self> {
        Self::new(Array2::zeros((height, width)), spacing)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Same spacing, new pixel values. Used by operators that preserve
    /// geometry; skips re-validation of spacing.
    pub(crate) fn with_data(&self, data: Array2<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data,
            spacing: self.spacing,
        }
    }

    /// Square sub-image with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<Self> {
        if row + size > self.height() || col + size > self.width() {
            return Err(Error::Configuration(format!(
                "crop of {size} at ({row}, {col}) exceeds {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let view = self
            .data
            .slice(ndarray::s![row..row + size, col..col + size]);
        Self::new(view.to_owned(), self.spacing)
    }

    /// Clamps all values into `[0, ∞)`.
    pub fn clamp_nonnegative(&self) -> Self {
        self.with_data(self.data.mapv(|v| v.max(0.0)))
    }
}

/// A 3D intensity volume with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    data: Array3<f64>,
    spacing: (f64, f64, f64),
    axial_axis: usize,
}

impl ImageVolume {
    pub fn new(data: Array3<f64>, spacing: (f64, f64, f64), axial_axis: usize) -> Result<Self> {
        if axial_axis > 2 {
            return Err(Error::Parameter(format!(
                "axial axis {axial_axis} is not 0, 1 or 2"
            )));
        }
        let s = [spacing.0, spacing.1, spacing.2];
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Parameter(format!(
                "voxel spacing {spacing:?} must be positive"
            )));
        }
        if s.iter()
            .any(|v| *v < PLAUSIBLE_SPACING_MM.0 || *v > PLAUSIBLE_SPACING_MM.1)
        {
            warn!(
                "voxel spacing {spacing:?} mm is outside the usual {:?} mm range",
                PLAUSIBLE_SPACING_MM
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("volume contains non-finite values".into()));
        }
        Ok(Self {
            data,
            spacing,
            axial_axis,
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn axial_axis(&self) -> usize {
        self.axial_axis
    }

    pub fn num_slices(&self) -> usize {
        self.data.len_of(Axis(self.axial_axis))
    }

    /// In-plane `(rows, cols)` of an axial slice.
    pub fn slice_shape(&self) -> (usize, usize) {
        let (a, b) = self.in_plane_axes();
        (self.data.len_of(Axis(a)), self.data.len_of(Axis(b)))
    }

    fn in_plane_axes(&self) -> (usize, usize) {
        match self.axial_axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// Axial slice `index`; rows follow the lower remaining axis.
    pub fn axial_slice(&self, index: usize) -> Result<ImageSlice> {
        if index >= self.num_slices() {
            return Err(Error::Contract(format!(
                "slice {index} out of range for {} slices",
                self.num_slices()
            )));
        }
        let plane = self
            .data
            .index_axis(Axis(self.axial_axis), index)
            .to_owned();
        let s = [self.spacing.0, self.spacing.1, self.spacing.2];
        let (a, b) = self.in_plane_axes();
        ImageSlice::new(plane, (s[a], s[b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_non_finite() {
        assert!(ImageSlice::unit(Array2::zeros((7, 8))).is_err());
        let mut a = Array2::zeros((8, 8));
        a[[1, 1]] = f64::NAN;
        assert!(ImageSlice::unit(a).is_err());
        assert!(ImageSlice::new(Array2::zeros((8, 8)), (0.0, 1.0)).is_err());
    }

    #[test]
    fn crop_bounds() {
        let img = ImageSlice::unit(Array2::from_shape_fn((10, 12), |(r, c)| {
            (r * 12 + c) as f64
        }))
        .unwrap();
        let c = img.crop(2, 3, 8).unwrap();
        assert_eq!(c.data()[[0, 0]], 27.0);
        assert!(img.crop(3, 0, 8).is_err());
    }

    #[test]
    fn axial_slices_follow_axis() {
        let data = Array3::from_shape_fn((8, 9, 3), |(i, j, k)| (i * 100 + j * 10 + k) as f64);
        let vol = ImageVolume::new(data, (2.23, 2.5, 3.0), 2).unwrap();
        assert_eq!(vol.num_slices(), 3);
        let s = vol.axial_slice(2).unwrap();
        assert_eq!(s.shape(), (8, 9));
        assert_eq!(s.data()[[1, 4]], 142.0);
        assert_eq!(s.spacing(), (2.23, 2.5));
        assert!(vol.axial_slice(3).is_err());
    }
}
