//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{
    load_image, load_pairs, load_priors, load_vq, save_image, save_pair, save_priors, save_vq,
};
use super::config::{Preset, RunConfig};
use super::correct::{correct_image, CorrectionMode, CorrectionOptions};
use super::eval::{evaluate, write_csv};
use super::nifti::{read_nifti, write_nifti};
use super::panel::{emit_panel, slice_to_gray, write_png, PanelColumn, PanelOptions, PanelSpec};
use super::phantom::make_phantom;
use crate::error::{Error, Result};
use crate::motion_sim::{make_training_pair, ImageVolume, SeverityLabel};
use crate::networks::VQModel;
use crate::prior_ar::{PriorModel, RearrangeMode};
use crate::training::{train_stage1_with, train_stage2_with, PriorPair};

/// Exit status for invalid command lines.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for data, checkpoint, configuration and training failures.
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "vqmoco",
    version,
    about = "Retrospective MRI motion correction with a conditional hierarchical VQ autoencoder"
)]
struct Cli {
    /// JSON run configuration, merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom volumes as NIfTI files.
    Phantom {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        shapes: Option<usize>,
    },
    /// Write corrupted/clean training pairs.
    Simulate {
        /// NIfTI volumes to draw from; phantoms are generated when absent.
        #[arg(long, num_args = 1..)]
        volumes: Vec<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the autoencoder and codebooks.
    TrainVq {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train both priors on a frozen autoencoder.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
    },
    /// Correct a single image (an image or pair directory).
    Correct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_label)]
        label: SeverityLabel,
        #[arg(long, default_value = "direct", value_parser = parse_mode)]
        mode: CorrectionMode,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value = "regenerate", value_parser = parse_rearrange)]
        rearrange_mode: RearrangeMode,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Render a severity-by-variant PNG grid.
    Panel {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// NIfTI volume to crop from; a phantom is generated when absent.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,5,8", value_parser = parse_label)]
        rows: Vec<SeverityLabel>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "corrupted,corrected,rearranged,reference",
            value_parser = parse_column
        )]
        columns: Vec<PanelColumn>,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value = "regenerate", value_parser = parse_rearrange)]
        rearrange_mode: RearrangeMode,
    },
    /// PSNR/SSIM table over a directory of pairs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, default_value = "direct", value_parser = parse_mode)]
        mode: CorrectionMode,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value = "regenerate", value_parser = parse_rearrange)]
        rearrange_mode: RearrangeMode,
    },
}

fn parse_label(s: &str) -> std::result::Result<SeverityLabel, String> {
    let range = format!(
        "label must be an integer in the valid range 0–{}",
        SeverityLabel::MAX
    );
    let v: u8 = s
        .trim()
        .parse()
        .map_err(|_| format!("{range}, got {s:?}"))?;
    SeverityLabel::new(v).map_err(|_| format!("{range}, got {v}"))
}

fn parse_mode(s: &str) -> std::result::Result<CorrectionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rearrange(s: &str) -> std::result::Result<RearrangeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_column(s: &str) -> std::result::Result<PanelColumn, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn phantom_volume(cfg: &RunConfig, seed: u64, index: usize) -> Result<ImageVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    make_phantom(cfg.data.phantom_size, cfg.data.phantom_shapes, &mut rng)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.preset)?,
        None => RunConfig::preset(cli.preset),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    let out = cli.out;
    mkdir(&out)?;

    match cli.command {
        Command::Phantom {
            count,
            size,
            shapes,
        } => {
            if let Some(s) = size {
                cfg.data.phantom_size = s;
            }
            if let Some(s) = shapes {
                cfg.data.phantom_shapes = s;
            }
            for i in 0..count {
                let vol = phantom_volume(&cfg, seed, i)?;
                write_nifti(&out.join(format!("phantom_{i:03}.nii")), &vol)?;
            }
            log::info!("wrote {count} phantom volumes to {}", out.display());
        }
        Command::Simulate { volumes, count } => {
            let paths = if volumes.is_empty() {
                cfg.data.volumes.clone()
            } else {
                volumes
            };
            let vols: Vec<ImageVolume> = if paths.is_empty() {
                (0..cfg.data.n_volumes.max(1))
                    .map(|i| phantom_volume(&cfg, seed, i))
                    .collect::<Result<_>>()?
            } else {
                paths.iter().map(|p| read_nifti(p)).collect::<Result<_>>()?
            };
            let n = count.unwrap_or(cfg.data.n_pairs);
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let pair = make_training_pair(
                    &vols[i % vols.len()],
                    cfg.train.crop,
                    cfg.data.n_states,
                    &mut rng,
                )?;
                save_pair(&pair, seed, &out.join(format!("pair_{i:05}")))?;
            }
            log::info!("wrote {n} pairs to {}", out.display());
        }
        Command::TrainVq { data } => {
            let pairs = load_pairs(&data)?;
            let model = VQModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let every = cfg.train.checkpoint_every;
            let (model, log) =
                train_stage1_with(&cfg.train, &pairs, model, |epoch, m| match every {
                    Some(k) if k > 0 && (epoch + 1) % k == 0 => {
                        save_vq(m, seed, &out.join(format!("vq_epoch{:04}", epoch + 1)))
                    }
                    _ => Ok(()),
                })?;
            save_vq(&model, seed, &out.join("vq"))?;
            log.write_jsonl(&out.join("train_vq.jsonl"))?;
        }
        Command::TrainPrior { data, vq } => {
            let pairs = load_pairs(&data)?;
            let vq = load_vq(&vq)?;
            let (tc, bc) = cfg.prior_configs();
            if tc.k != vq.config().codebook_k {
                return Err(Error::Configuration(format!(
                    "configured codebook_k {} differs from the checkpoint's {}",
                    tc.k,
                    vq.config().codebook_k
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let priors = PriorPair {
                top: PriorModel::new(tc, &mut rng)?,
                bottom: PriorModel::new(bc, &mut rng)?,
            };
            let every = cfg.train.checkpoint_every;
            let (priors, log) =
                train_stage2_with(&cfg.train, &pairs, &vq, priors, |epoch, p| match every {
                    Some(k) if k > 0 && (epoch + 1) % k == 0 => {
                        save_priors(p, seed, &out.join(format!("prior_epoch{:04}", epoch + 1)))
                    }
                    _ => Ok(()),
                })?;
            save_priors(&priors, seed, &out.join("prior"))?;
            log.write_jsonl(&out.join("train_prior.jsonl"))?;
        }
        Command::Correct {
            input,
            label,
            mode,
            temperature,
            rearrange_mode,
            vq,
            prior,
        } => {
            let vq = load_vq(&vq)?;
            let priors = prior.as_deref().map(load_priors).transpose()?;
            let img = load_image(&input)?;
            let opts = CorrectionOptions {
                mode,
                temperature,
                rearrange_mode,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fixed = correct_image(&vq, priors.as_ref(), &img, label, &opts, &mut rng)?;
            save_image(&fixed, seed, &out.join("corrected"))?;
            write_png(&slice_to_gray(&fixed), &out.join("corrected.png"))?;
        }
        Command::Panel {
            vq,
            prior,
            volume,
            rows,
            columns,
            temperature,
            rearrange_mode,
        } => {
            let vq = load_vq(&vq)?;
            let priors = prior.as_deref().map(load_priors).transpose()?;
            let vol = match volume {
                Some(p) => read_nifti(&p)?,
                None => phantom_volume(&cfg, seed, 0)?,
            };
            let spec = PanelSpec {
                rows,
                columns,
                output: out.join("panel.png"),
            };
            let opts = PanelOptions {
                crop: cfg.train.crop,
                n_states: cfg.data.n_states,
                temperature,
                rearrange_mode,
            };
            emit_panel(
                &spec,
                &vq,
                priors.as_ref(),
                &vol,
                &opts,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?;
        }
        Command::Eval {
            data,
            vq,
            prior,
            mode,
            temperature,
            rearrange_mode,
        } => {
            let vq = load_vq(&vq)?;
            let priors = prior.as_deref().map(load_priors).transpose()?;
            let pairs = load_pairs(&data)?;
            let opts = CorrectionOptions {
                mode,
                temperature,
                rearrange_mode,
            };
            let rows = evaluate(&vq, priors.as_ref(), &pairs, &opts, seed)?;
            write_csv(&rows, &out.join("metrics.csv"))?;
        }
    }
    Ok(())
}
