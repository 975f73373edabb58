//! Synthetic head-like volumes: filled ellipsoids over a smooth background.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::motion_sim::ImageVolume;

/// In-plane voxel spacing of generated volumes, millimeters.
pub const PHANTOM_SPACING: (f64, f64, f64) = (2.23, 2.23, 3.0);

struct Ellipsoid {
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
    angle: f64,
    value: f64,
}

impl Ellipsoid {
    fn contains(&self, r: f64, c: f64, z: f64) -> bool {
        let (dr, dc, dz) = (r - self.center.0, c - self.center.1, z - self.center.2);
        let (s, co) = self.angle.sin_cos();
        let u = co * dr + s * dc;
        let v = -s * dr + co * dc;
        (u / self.radii.0).powi(2) + (v / self.radii.1).powi(2) + (dz / self.radii.2).powi(2) <= 1.0
    }
}

/// A `size × size × depth` volume (depth `max(4, size / 8)`, axial axis 2)
/// with `n_shapes` ellipsoids of distinct constant intensities. Larger
/// shapes are painted first so smaller ones stay visible on top.
pub fn make_phantom<R: Rng + ?Sized>(
    size: usize,
    n_shapes: usize,
    rng: &mut R,
) -> Result<ImageVolume> {
    if size < 16 {
        return Err(Error::Configuration(format!(
            "phantom size {size} below 16"
        )));
    }
    let depth = (size / 8).max(4);
    let s = size as f64;
    let d = depth as f64;

    // distinct plateau levels, evenly spread over [0.3, 1.0]
    let mut levels: Vec<f64> = (0..n_shapes)
        .map(|i| 0.3 + 0.7 * (i + 1) as f64 / n_shapes as f64)
        .collect();
    levels.shuffle(rng);

    let mut shapes: Vec<Ellipsoid> = levels
        .into_iter()
        .map(|value| {
            let ra = rng.gen_range(0.08..0.25) * s;
            let rb = rng.gen_range(0.08..0.25) * s;
            let margin = ra.max(rb);
            Ellipsoid {
                center: (
                    rng.gen_range(margin..s - margin),
                    rng.gen_range(margin..s - margin),
                    rng.gen_range(0.3..0.7) * d,
                ),
                radii: (ra, rb, rng.gen_range(0.4..0.8) * d),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                value,
            }
        })
        .collect();
    shapes.sort_by(|a, b| (b.radii.0 * b.radii.1).total_cmp(&(a.radii.0 * a.radii.1)));

    let (fr, fc) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let (pr, pc) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let background = |r: f64, c: f64, z: f64| {
        let a = (fr * std::f64::consts::PI * r / s + pr).sin();
        let b = (fc * std::f64::consts::PI * c / s + pc).cos();
        0.1 + 0.04 * a * b + 0.02 * (z / d)
    };

    let data = Array3::from_shape_fn((size, size, depth), |(r, c, z)| {
        let (rf, cf, zf) = (r as f64, c as f64, z as f64);
        shapes
            .iter()
            .rev()
            .find(|e| e.contains(rf, cf, zf))
            .map_or_else(|| background(rf, cf, zf), |e| e.value)
    });
    ImageVolume::new(data, PHANTOM_SPACING, 2)
}
