//! Configuration, persistence, phantoms, metrics, inference, panels and
//! the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod correct;
pub mod eval;
pub mod metrics;
pub mod nifti;
pub mod panel;
pub mod phantom;

pub use checkpoint::{
    load_image, load_pair, load_pairs, load_priors, load_vq, save_image, save_pair, save_priors,
    save_vq, ArrayEntry, Checkpoint, Manifest,
};
pub use config::{Preset, RunConfig};
pub use correct::{check_compatible, correct_image, CorrectionMode, CorrectionOptions};
pub use eval::{evaluate, read_csv, summarize, write_csv, EvalRow};
pub use metrics::{psnr, ssim, ssim_with_peak};
pub use nifti::{read_nifti, write_nifti};
pub use panel::{
    emit_panel, render_panel, tile_origin, PanelColumn, PanelOptions, PanelSpec, SEPARATOR,
};
pub use phantom::make_phantom;
