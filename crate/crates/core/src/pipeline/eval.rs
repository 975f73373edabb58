//! PSNR/SSIM tables over a set of simulated pairs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::correct::{correct_image, CorrectionOptions};
use super::metrics::{psnr, ssim};
use crate::error::{Error, Result};
use crate::motion_sim::TrainingPair;
use crate::networks::VQModel;
use crate::training::PriorPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    /// Empty on the summary line.
    pub y: Option<u8>,
    pub psnr_corrupted: f64,
    pub ssim_corrupted: f64,
    pub psnr_corrected: f64,
    pub ssim_corrected: f64,
}

/// Scores the corrupted input and the corrected output of every pair
/// against its clean image. Sample `i` draws from a generator seeded with
/// `seed + i`.
pub fn evaluate(
    vq: &VQModel,
    priors: Option<&PriorPair>,
    pairs: &[TrainingPair],
    opts: &CorrectionOptions,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let fixed = correct_image(vq, priors, &p.corrupted, p.label, opts, &mut rng)?;
            Ok(EvalRow {
                sample: format!("{i:05}"),
                y: Some(p.label.value()),
                psnr_corrupted: psnr(&p.corrupted, &p.clean, 1.0)?,
                ssim_corrupted: ssim(&p.corrupted, &p.clean)?,
                psnr_corrected: psnr(&fixed, &p.clean, 1.0)?,
                ssim_corrected: ssim(&fixed, &p.clean)?,
            })
        })
        .collect()
}

/// Column means, labelled `mean`.
pub fn summarize(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        sample: "mean".into(),
        y: None,
        psnr_corrupted: mean(|r| r.psnr_corrupted),
        ssim_corrupted: mean(|r| r.ssim_corrupted),
        psnr_corrected: mean(|r| r.psnr_corrected),
        ssim_corrected: mean(|r| r.ssim_corrected),
    }
}

/// Writes the rows followed by the summary line.
pub fn write_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    for r in rows.iter().cloned().chain(std::iter::once(summarize(rows))) {
        w.serialize(r)
            .map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(path, e.to_string()))
}
