//! Image quality metrics.

use crate::error::{Error, Result};
use crate::motion_sim::ImageSlice;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;

fn check_shapes(a: &ImageSlice, b: &ImageSlice) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "image shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr(a: &ImageSlice, b: &ImageSlice, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let n = (a.height() * a.width()) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean structural similarity over all `8 × 8` windows at unit stride,
/// using population statistics and peak 1.
pub fn ssim(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &ImageSlice, b: &ImageSlice, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    sa += da[[r, c]];
                    sb += db[[r, c]];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (x, y) = (da[[r, c]] - ma, db[[r, c]] - mb);
                    vaa += x * x;
                    vbb += y * y;
                    vab += x * y;
                }
            }
            let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
