//! Severity-by-variant image grids.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::correct::{correct_image, CorrectionMode, CorrectionOptions};
use crate::error::{Error, Result};
use crate::motion_sim::{
    corrupt_kspace, random_clean_crop, sample_motion_spec, ImageSlice, ImageVolume, SeverityLabel,
};
use crate::networks::VQModel;
use crate::prior_ar::RearrangeMode;
use crate::training::PriorPair;

/// Separator width between tiles, pixels.
pub const SEPARATOR: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelColumn {
    Corrupted,
    Corrected,
    CorrectedRearranged,
    Reference,
}

impl FromStr for PanelColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrupted" => Ok(Self::Corrupted),
            "corrected" => Ok(Self::Corrected),
            "rearranged" | "corrected_rearranged" => Ok(Self::CorrectedRearranged),
            "reference" => Ok(Self::Reference),
            other => Err(Error::Parameter(format!(
                "unknown panel column {other:?} (expected corrupted, corrected, rearranged or reference)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelSpec {
    pub rows: Vec<SeverityLabel>,
    pub columns: Vec<PanelColumn>,
    pub output: PathBuf,
}

impl PanelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.columns.is_empty() {
            return Err(Error::Configuration(
                "panel needs at least one row and one column".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PanelOptions {
    pub crop: usize,
    pub n_states: usize,
    pub temperature: f64,
    pub rearrange_mode: RearrangeMode,
}

/// Top-left pixel of tile `(row, col)`.
pub fn tile_origin(row: usize, col: usize, tile: usize) -> (usize, usize) {
    (row * (tile + SEPARATOR), col * (tile + SEPARATOR))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders the grid and returns it with the tile images, row-major.
///
/// One clean crop is drawn from `volume`; each row corrupts it at that
/// row's severity and every column shows one variant of it.
pub fn render_panel<R: Rng + ?Sized>(
    spec: &PanelSpec,
    vq: &VQModel,
    priors: Option<&PriorPair>,
    volume: &ImageVolume,
    opts: &PanelOptions,
    rng: &mut R,
) -> Result<(GrayImage, Vec<Vec<ImageSlice>>)> {
    spec.validate()?;
    let clean = random_clean_crop(volume, opts.crop, rng)?;
    let mut tiles = Vec::with_capacity(spec.rows.len());
    for &y in &spec.rows {
        let motion = sample_motion_spec(y, opts.n_states, opts.crop, rng)?;
        let corrupted = corrupt_kspace(&clean, &motion)?;
        let mut row = Vec::with_capacity(spec.columns.len());
        for col in &spec.columns {
            let mode = match col {
                PanelColumn::Corrupted => {
                    row.push(corrupted.clone());
                    continue;
                }
                PanelColumn::Reference => {
                    row.push(clean.clone());
                    continue;
                }
                PanelColumn::Corrected => CorrectionMode::Direct,
                PanelColumn::CorrectedRearranged => CorrectionMode::Rearranged,
            };
            let o = CorrectionOptions {
                mode,
                temperature: opts.temperature,
                rearrange_mode: opts.rearrange_mode,
            };
            row.push(correct_image(vq, priors, &corrupted, y, &o, rng)?);
        }
        tiles.push(row);
    }

    let t = opts.crop;
    let (nr, nc) = (spec.rows.len(), spec.columns.len());
    let width = nc * t + (nc - 1) * SEPARATOR;
    let height = nr * t + (nr - 1) * SEPARATOR;
    let mut img =
        GrayImage::from_pixel(width as u32, height as u32, image::Luma([SEPARATOR_VALUE]));
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (oy, ox) = tile_origin(r, c, t);
            for ((y, x), &v) in tile.data().indexed_iter() {
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([to_u8(v)]));
            }
        }
    }
    Ok((img, tiles))
}

/// Renders the panel and writes it as an 8-bit grayscale PNG.
pub fn emit_panel<R: Rng + ?Sized>(
    spec: &PanelSpec,
    vq: &VQModel,
    priors: Option<&PriorPair>,
    volume: &ImageVolume,
    opts: &PanelOptions,
    rng: &mut R,
) -> Result<()> {
    let (img, _) = render_panel(spec, vq, priors, volume, opts, rng)?;
    write_png(&img, &spec.output)
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::data(path, other.to_string()),
        })
}

/// A single slice as an 8-bit image, intensities clamped to `[0, 1]`.
pub fn slice_to_gray(img: &ImageSlice) -> GrayImage {
    let (h, w) = img.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(img.data()[[y as usize, x as usize]])])
    })
}
