//! In-plane rigid motion: rotation about the image center plus translation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ImageSlice;
use crate::error::{Error, Result};

/// Largest accepted in-plane rotation, in degrees.
pub const MAX_ROTATION_DEG: f64 = 45.0;

/// One rigid motion state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// `(rows, cols)` translation in millimeters.
    pub translation_mm: (f64, f64),
}

impl AffineParams {
    pub fn new(rotation_deg: f64, translation_mm: (f64, f64)) -> Result<Self> {
        let p = Self {
            rotation_deg,
            translation_mm,
        };
        p.validate()?;
        Ok(p)
    }

    pub const fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_mm: (0.0, 0.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation_mm == (0.0, 0.0)
    }

    /// Largest absolute component, mixing degrees and millimeters.
    pub fn amplitude(&self) -> f64 {
        self.rotation_deg
            .abs()
            .max(self.translation_mm.0.abs())
            .max(self.translation_mm.1.abs())
    }

    /// Finite components and rotation within ±[`MAX_ROTATION_DEG`].
    pub fn validate(&self) -> Result<()> {
        self.validate_finite()?;
        if self.rotation_deg.abs() > MAX_ROTATION_DEG {
            return Err(Error::Parameter(format!(
                "rotation {} deg exceeds ±{MAX_ROTATION_DEG}",
                self.rotation_deg
            )));
        }
        Ok(())
    }

    fn validate_finite(&self) -> Result<()> {
        let (tr, tc) = self.translation_mm;
        if !(self.rotation_deg.is_finite() && tr.is_finite() && tc.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite motion parameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Resamples `img` under the motion `p`.
///
/// A point at offset `d` from the center moves to `R·d + t`, where `R`
/// rotates `(row, col)` offsets by `rotation_deg` (so `(0, k)` goes to
/// `(-k, 0)` at 90°) and `t` is the translation converted to pixels. Output
/// pixels whose source falls outside the image read zero. Any finite
/// rotation is accepted here; the ±45° bound applies to motion states.
pub fn affine_transform_2d(
    img: &ImageSlice,
    p: &AffineParams,
    interpolation: Interpolation,
) -> Result<ImageSlice> {
    p.validate_finite()?;
    if p.is_identity() {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let (sr, sc) = img.spacing();
    let (tr, tc) = (p.translation_mm.0 / sr, p.translation_mm.1 / sc);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.data();

    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        // inverse map: d = Rᵀ (q - center - t)
        let dr = r as f64 - cr - tr;
        let dc = c as f64 - cc - tc;
        let y = cos * dr + sin * dc + cr;
        let x = -sin * dr + cos * dc + cc;
        match interpolation {
            Interpolation::Nearest => sample_nearest(src, y, x),
            Interpolation::Bilinear => sample_bilinear(src, y, x),
        }
    });
    Ok(img.with_data(out))
}

fn pixel(src: &Array2<f64>, y: isize, x: isize) -> f64 {
    let (h, w) = src.dim();
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        src[[y as usize, x as usize]]
    }
}

fn sample_nearest(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    pixel(src, y.round() as isize, x.round() as isize)
}

fn sample_bilinear(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            acc += wy * wx * pixel(src, y0 + dy, x0 + dx);
        }
    }
    acc
}
