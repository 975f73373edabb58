//! k-space composition of motion states.
//!
//! Each motion state contributes the phase-encode lines acquired while the
//! subject held that pose. Mixing lines from displaced anatomies in one
//! spectrum is what produces coherent ghosts after reconstruction.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::{affine_transform_2d, ImageSlice, Interpolation, MotionSpec};
use crate::error::{Error, Result};

/// Row of the unshifted FFT output holding centered phase-encode line `line`.
pub fn fft_row_of_line(line: usize, rows: usize) -> usize {
    (line + rows.div_ceil(2)) % rows
}

/// Unnormalized in-place 2D DFT of a row-major `h × w` buffer.
pub fn fft2(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

fn spectrum(img: &Array2<f64>) -> Vec<Complex64> {
    let (h, w) = img.dim();
    let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, FftDirection::Forward);
    buf
}

/// Simulates a motion-corrupted acquisition of `img`.
///
/// For every state the image is moved (bilinear), transformed to k-space,
/// and the state's segments of phase-encode lines are copied into a shared
/// spectrum. The result is the real part of the inverse transform, clamped
/// to be non-negative. The output is a pure function of `(img, spec)`.
pub fn corrupt_kspace(img: &ImageSlice, spec: &MotionSpec) -> Result<ImageSlice> {
    let (h, w) = img.shape();
    if spec.rows() != h {
        return Err(Error::Contract(format!(
            "motion segments cover {} phase-encode rows, image has {h}",
            spec.rows()
        )));
    }

    let mut spectra: Vec<Option<Vec<Complex64>>> = vec![None; spec.states().len()];
    let mut composite = vec![Complex64::default(); h * w];
    for ((lines, _), &state_idx) in spec.segments().zip(spec.segment_states()) {
        if spectra[state_idx].is_none() {
            let moved =
                affine_transform_2d(img, &spec.states()[state_idx], Interpolation::Bilinear)?;
            spectra[state_idx] = Some(spectrum(moved.data()));
        }
        let source = spectra[state_idx].as_ref().expect("computed above");
        for line in lines {
            let r = fft_row_of_line(line, h);
            composite[r * w..(r + 1) * w].copy_from_slice(&source[r * w..(r + 1) * w]);
        }
    }

    fft2(&mut composite, h, w, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    let out = Array2::from_shape_vec(
        (h, w),
        composite.iter().map(|c| (c.re * norm).max(0.0)).collect(),
    )
    .expect("shape matches buffer");
    Ok(img.with_data(out))
}
