//! Manifest + blob persistence for models, priors and image arrays.
//!
//! A checkpoint is a directory holding `manifest.json` and `blob.bin`. The
//! blob is the concatenation of little-endian `f32` arrays; the manifest
//! lists each array's name, shape and byte range next to a configuration
//! snapshot, the seed and a stage tag.

use std::collections::BTreeSet;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqmoco_autodiff::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::motion_sim::{ImageSlice, PairSidecar, TrainingPair};
use crate::networks::{VQModel, VQModelConfig};
use crate::prior_ar::{PriorConfig, PriorModel};
use crate::training::PriorPair;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "blob.bin";
pub const SIDECAR_FILE: &str = "sidecar.json";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl Checkpoint {
    pub fn new(stage: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                arrays: Vec::new(),
                config,
                seed,
                stage: stage.into(),
            },
            blob: Vec::new(),
        }
    }

    /// Appends an array, stored as `f32`.
    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "array {name}: shape/data mismatch"
        );
        assert!(self.entry(name).is_none(), "duplicate array {name}");
        let offset = self.blob.len();
        self.blob.resize(offset + 4 * values.len(), 0);
        let dst = &mut self.blob[offset..];
        for (chunk, v) in dst.chunks_exact_mut(4).zip(values) {
            LittleEndian::write_f32(chunk, *v as f32);
        }
        self.manifest.arrays.push(ArrayEntry {
            name: name.into(),
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
            byte_offset: offset as u64,
            byte_length: (4 * values.len()) as u64,
        });
    }

    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.push(&format!("{prefix}{name}"), t.shape(), t.data());
        }
    }

    fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.manifest.arrays.iter().find(|a| a.name == name)
    }

    pub fn array(&self, name: &str) -> Option<Tensor> {
        let e = self.entry(name)?;
        let bytes = &self.blob[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(LittleEndian::read_f32(c)))
            .collect();
        Some(Tensor::new(&e.shape, data))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        std::fs::write(&bp, &self.blob).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::data(&mp, e.to_string()))?;
        let bp = dir.join(BLOB_FILE);
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        validate(&manifest, blob.len()).map_err(|m| Error::data(dir, m))?;
        Ok(Self { manifest, blob })
    }

    fn expect_stage(&self, stage: &str, dir: &Path) -> Result<()> {
        if self.manifest.stage != stage {
            return Err(Error::data(
                dir,
                format!(
                    "checkpoint stage is {:?}, expected {stage:?}",
                    self.manifest.stage
                ),
            ));
        }
        Ok(())
    }

    /// Overwrites every tensor of `store` from arrays named `prefix + name`,
    /// requiring an exact match of names and shapes.
    fn fill_params(
        &self,
        prefix: &str,
        store: &mut ParamStore,
        dir: &Path,
    ) -> Result<BTreeSet<String>> {
        let mut used = BTreeSet::new();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self
                .array(&name)
                .ok_or_else(|| Error::data(dir, format!("missing parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::data(
                    dir,
                    format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        store.get(id).shape()
                    ),
                ));
            }
            if !t.all_finite() {
                return Err(Error::data(dir, format!("parameter {name} is not finite")));
            }
            *store.get_mut(id) = t;
            used.insert(name);
        }
        Ok(used)
    }

    fn reject_unused(&self, used: &BTreeSet<String>, dir: &Path) -> Result<()> {
        if let Some(extra) = self
            .manifest
            .arrays
            .iter()
            .find(|a| !used.contains(&a.name))
        {
            return Err(Error::data(dir, format!("unexpected array {}", extra.name)));
        }
        Ok(())
    }
}

fn validate(m: &Manifest, blob_len: usize) -> std::result::Result<(), String> {
    if m.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format_version {}", m.format_version));
    }
    let mut names = BTreeSet::new();
    let mut ranges: Vec<(u64, u64)> = Vec::new();
    for a in &m.arrays {
        if !names.insert(a.name.as_str()) {
            return Err(format!("array {} listed twice", a.name));
        }
        if a.dtype != DTYPE {
            return Err(format!(
                "array {} has dtype {}, expected {DTYPE}",
                a.name, a.dtype
            ));
        }
        let expect = 4 * a.shape.iter().product::<usize>() as u64;
        if a.byte_length != expect {
            return Err(format!(
                "array {} spans {} bytes, shape needs {expect}",
                a.name, a.byte_length
            ));
        }
        if a.byte_offset + a.byte_length > blob_len as u64 {
            return Err(format!("array {} runs past the end of the blob", a.name));
        }
        ranges.push((a.byte_offset, a.byte_offset + a.byte_length));
    }
    ranges.sort();
    if ranges.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err("array byte ranges overlap".into());
    }
    Ok(())
}

pub fn save_vq(model: &VQModel, seed: u64, dir: &Path) -> Result<()> {
    let mut ck = Checkpoint::new("vq", serde_json::to_value(model.config())?, seed);
    ck.push_params("", model.params());
    ck.save(dir)
}

pub fn load_vq(dir: &Path) -> Result<VQModel> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_stage("vq", dir)?;
    let config: VQModelConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::data(dir, format!("config: {e}")))?;
    let mut model = VQModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let used = ck.fill_params("", model.params_mut(), dir)?;
    ck.reject_unused(&used, dir)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorPairConfig {
    top: PriorConfig,
    bottom: PriorConfig,
}

pub fn save_priors(priors: &PriorPair, seed: u64, dir: &Path) -> Result<()> {
    let cfg = PriorPairConfig {
        top: priors.top.config().clone(),
        bottom: priors.bottom.config().clone(),
    };
    let mut ck = Checkpoint::new("prior", serde_json::to_value(cfg)?, seed);
    ck.push_params("top.", priors.top.params());
    ck.push_params("bottom.", priors.bottom.params());
    ck.save(dir)
}

pub fn load_priors(dir: &Path) -> Result<PriorPair> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_stage("prior", dir)?;
    let cfg: PriorPairConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::data(dir, format!("config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut top = PriorModel::new(cfg.top, &mut rng)?;
    let mut bottom = PriorModel::new(cfg.bottom, &mut rng)?;
    let mut used = ck.fill_params("top.", top.params_mut(), dir)?;
    used.extend(ck.fill_params("bottom.", bottom.params_mut(), dir)?);
    ck.reject_unused(&used, dir)?;
    Ok(PriorPair { top, bottom })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageConfig {
    spacing: (f64, f64),
}

fn push_image(ck: &mut Checkpoint, name: &str, img: &ImageSlice) {
    let (h, w) = img.shape();
    let values: Vec<f64> = img.data().iter().copied().collect();
    ck.push(name, &[h, w], &values);
}

fn read_image(ck: &Checkpoint, name: &str, spacing: (f64, f64), dir: &Path) -> Result<ImageSlice> {
    let t = ck
        .array(name)
        .ok_or_else(|| Error::data(dir, format!("missing array {name}")))?;
    if t.shape().len() != 2 {
        return Err(Error::data(dir, format!("array {name} is not 2D")));
    }
    let (h, w) = t.dims2();
    let a = Array2::from_shape_vec((h, w), t.into_data()).expect("checked shape");
    ImageSlice::new(a, spacing).map_err(|e| Error::data(dir, e.to_string()))
}

/// Writes a simulated pair: both images plus a sidecar with label and
/// motion parameters.
pub fn save_pair(pair: &TrainingPair, seed: u64, dir: &Path) -> Result<()> {
    let cfg = ImageConfig {
        spacing: pair.clean.spacing(),
    };
    let mut ck = Checkpoint::new("pair", serde_json::to_value(cfg)?, seed);
    push_image(&mut ck, "corrupted", &pair.corrupted);
    push_image(&mut ck, "clean", &pair.clean);
    ck.save(dir)?;
    let side = PairSidecar {
        y: pair.label,
        spec: pair.spec.clone(),
    };
    let mut json = serde_json::to_string_pretty(&side)?;
    json.push('\n');
    let sp = dir.join(SIDECAR_FILE);
    std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn load_pair(dir: &Path) -> Result<TrainingPair> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_stage("pair", dir)?;
    let cfg: ImageConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::data(dir, format!("config: {e}")))?;
    let sp = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: PairSidecar =
        serde_json::from_str(&text).map_err(|e| Error::data(&sp, e.to_string()))?;
    Ok(TrainingPair {
        corrupted: read_image(&ck, "corrupted", cfg.spacing, dir)?,
        clean: read_image(&ck, "clean", cfg.spacing, dir)?,
        label: side.y,
        spec: side.spec,
    })
}

/// Loads every pair directory directly under `dir`, in name order.
pub fn load_pairs(dir: &Path) -> Result<Vec<TrainingPair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join(MANIFEST_FILE).is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(dir, "no pair directories found"));
    }
    paths.iter().map(|p| load_pair(p)).collect()
}

pub fn save_image(img: &ImageSlice, seed: u64, dir: &Path) -> Result<()> {
    let cfg = ImageConfig {
        spacing: img.spacing(),
    };
    let mut ck = Checkpoint::new("image", serde_json::to_value(cfg)?, seed);
    push_image(&mut ck, "image", img);
    ck.save(dir)
}

/// Loads a single image directory, or the corrupted half of a pair.
pub fn load_image(dir: &Path) -> Result<ImageSlice> {
    let ck = Checkpoint::load(dir)?;
    let cfg: ImageConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::data(dir, format!("config: {e}")))?;
    match ck.manifest.stage.as_str() {
        "image" => read_image(&ck, "image", cfg.spacing, dir),
        "pair" => read_image(&ck, "corrupted", cfg.spacing, dir),
        other => Err(Error::data(dir, format!("stage {other:?} holds no image"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_overlap_and_bounds() {
        let mut ck = Checkpoint::new("x", serde_json::Value::Null, 0);
        ck.push("a", &[2], &[1.0, 2.0]);
        ck.push("b", &[1], &[3.0]);
        assert!(validate(&ck.manifest, ck.blob.len()).is_ok());
        let mut m = ck.manifest.clone();
        m.arrays[1].byte_offset = 4;
        assert!(validate(&m, ck.blob.len()).unwrap_err().contains("overlap"));
        assert!(validate(&ck.manifest, 8)
            .unwrap_err()
            .contains("past the end"));
        let mut m = ck.manifest.clone();
        m.arrays[1].name = "a".into();
        assert!(validate(&m, ck.blob.len()).is_err());
    }
}
