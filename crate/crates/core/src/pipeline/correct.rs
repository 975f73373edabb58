//! Inference: direct reconstruction or prior-rearranged decoding.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_sim::{ImageSlice, SeverityLabel};
use crate::networks::VQModel;
use crate::prior_ar::{prior_rearrange, RearrangeMode};
use crate::training::PriorPair;
use crate::vq_core::{Level, DEFAULT_BETA};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    /// Decode the encoder's own code grids.
    #[default]
    Direct,
    /// Re-predict the grids with the priors before decoding.
    Rearranged,
}

impl FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "rearranged" => Ok(Self::Rearranged),
            other => Err(Error::Parameter(format!(
                "unknown correction mode {other:?} (expected direct or rearranged)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrectionOptions {
    pub mode: CorrectionMode,
    pub temperature: f64,
    pub rearrange_mode: RearrangeMode,
}

/// Checks that the priors model the codebooks and grid geometry of `vq`.
pub fn check_compatible(vq: &VQModel, priors: &PriorPair) -> Result<()> {
    let c = vq.config();
    let mismatch = |field: &str, got: usize, want: usize| {
        Err(Error::Configuration(format!(
            "incompatible checkpoints: {field} is {got}, the autoencoder needs {want}"
        )))
    };
    let (top, bottom) = (priors.top.config(), priors.bottom.config());
    if top.level != Level::Top || bottom.level != Level::Bottom {
        return Err(Error::Configuration(
            "incompatible checkpoints: prior levels swapped".into(),
        ));
    }
    if top.k != c.codebook_k {
        return mismatch("top prior k", top.k, c.codebook_k);
    }
    if bottom.k != c.codebook_k {
        return mismatch("bottom prior k", bottom.k, c.codebook_k);
    }
    let factor = c.top_stride / c.bottom_stride;
    match bottom.context {
        Some(ctx) if ctx.k != c.codebook_k => {
            mismatch("bottom prior context.k", ctx.k, c.codebook_k)
        }
        Some(ctx) if ctx.factor != factor => {
            mismatch("bottom prior context.factor", ctx.factor, factor)
        }
        Some(_) => Ok(()),
        None => Err(Error::Configuration(
            "incompatible checkpoints: bottom prior lacks a top-grid context".into(),
        )),
    }
}

/// Motion-corrected estimate of `img`, clamped to `[0, ∞)`.
pub fn correct_image<R: Rng + ?Sized>(
    vq: &VQModel,
    priors: Option<&PriorPair>,
    img: &ImageSlice,
    y: SeverityLabel,
    opts: &CorrectionOptions,
    rng: &mut R,
) -> Result<ImageSlice> {
    let out = match opts.mode {
        CorrectionMode::Direct => vq.forward_autoencode(img, y, DEFAULT_BETA)?.recon,
        CorrectionMode::Rearranged => {
            let priors = priors.ok_or_else(|| {
                Error::Configuration("rearranged mode needs prior checkpoints".into())
            })?;
            check_compatible(vq, priors)?;
            let (top, bottom) = vq.encode_to_grids(&[img], &[y])?.remove(0);
            let t = opts.temperature;
            let new_top = prior_rearrange(&priors.top, &top, y, t, rng, None, opts.rearrange_mode)?;
            let ctx = match opts.rearrange_mode {
                RearrangeMode::Regenerate => &new_top,
                RearrangeMode::ResamplePrefix => &top,
            };
            let new_bottom = prior_rearrange(
                &priors.bottom,
                &bottom,
                y,
                t,
                rng,
                Some(ctx),
                opts.rearrange_mode,
            )?;
            let decoded = vq.decode_grids(&new_top, &new_bottom, y)?;
            ImageSlice::new(decoded.into_data(), img.spacing())?
        }
    };
    Ok(out.clamp_nonnegative())
}
