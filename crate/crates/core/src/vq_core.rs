//! Codebooks, nearest-code quantization and the vector-quantization losses.
//!
//! Value-level functions work on [`FeatureMap`]s; [`quantize_var`] is the
//! same quantizer recorded on an autodiff graph, with the straight-through
//! pass and both loss terms wired for training.

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use vqmoco_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Default weight of the commitment term.
pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Bottom,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Top => "top",
            Level::Bottom => "bottom",
        })
    }
}

/// A `K × D` table of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Array2<f64>,
    level: Level,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>, level: Level) -> Result<Self> {
        let (k, d) = vectors.dim();
        if k < 2 || d < 1 {
            return Err(Error::Contract(format!(
                "codebook must be at least 2x1, got {k}x{d}"
            )));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("non-finite codebook entry".into()));
        }
        Ok(Self { vectors, level })
    }

    pub(crate) fn from_tensor(t: &Tensor, level: Level) -> Result<Self> {
        let (k, d) = t.dims2();
        Self::new(
            Array2::from_shape_vec((k, d), t.data().to_vec()).expect("tensor shape"),
            level,
        )
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Grid of codebook indices for one level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    indices: Array2<usize>,
    level: Level,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct CodeGridJson {
    level: Level,
    #[serde(rename = "K")]
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl CodeGrid {
    pub fn new(indices: Array2<usize>, level: Level, k: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for K={k}"
            )));
        }
        Ok(Self { indices, level, k })
    }

    pub fn zeros(shape: (usize, usize), level: Level, k: usize) -> Self {
        Self {
            indices: Array2::zeros(shape),
            level,
            k,
        }
    }

    pub fn indices(&self) -> &Array2<usize> {
        &self.indices
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        self.indices.dim()
    }

    /// Indices in raster order.
    pub fn raster(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }

    pub(crate) fn set(&mut self, pos: (usize, usize), index: usize) {
        debug_assert!(index < self.k);
        self.indices[pos] = index;
    }

    pub fn to_json(&self) -> String {
        let rows = self
            .indices
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        serde_json::to_string(&CodeGridJson {
            level: self.level,
            k: self.k,
            rows,
        })
        .expect("grid serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: CodeGridJson = serde_json::from_str(s)?;
        let h = j.rows.len();
        let w = j.rows.first().map_or(0, Vec::len);
        if j.rows.iter().any(|r| r.len() != w) {
            return Err(Error::Contract("ragged code grid rows".into()));
        }
        let flat = j.rows.into_iter().flatten().collect();
        Self::new(
            Array2::from_shape_vec((h, w), flat).expect("checked shape"),
            j.level,
            j.k,
        )
    }
}

/// `H × W × D` latent features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("non-finite feature value".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Feature map of sample `n` of an `[N, D, H, W]` tensor.
    pub(crate) fn from_nchw(t: &Tensor, n: usize) -> Self {
        let (_, d, h, w) = t.dims4();
        let src = &t.data()[n * d * h * w..(n + 1) * d * h * w];
        Self {
            data: Array3::from_shape_fn((h, w, d), |(r, c, k)| src[(k * h + r) * w + c]),
        }
    }

    /// Stacks maps into an `[N, D, H, W]` tensor.
    pub(crate) fn stack_nchw(maps: &[&FeatureMap]) -> Tensor {
        let (h, w, d) = maps[0].dim();
        let mut data = Vec::with_capacity(maps.len() * d * h * w);
        for m in maps {
            assert_eq!(m.dim(), (h, w, d));
            for k in 0..d {
                for r in 0..h {
                    for c in 0..w {
                        data.push(m.data[[r, c, k]]);
                    }
                }
            }
        }
        Tensor::new(&[maps.len(), d, h, w], data)
    }
}

/// Index of the closest codebook row and its squared distance.
pub fn nearest_code(v: &[f64], cb: &Codebook) -> Result<(usize, f64)> {
    if v.len() != cb.d() {
        return Err(Error::Contract(format!(
            "vector of length {} against codebook dimension {}",
            v.len(),
            cb.d()
        )));
    }
    Ok(nearest_row(
        v,
        cb.vectors.as_slice().expect("standard layout"),
        cb.d(),
    ))
}

fn nearest_row(v: &[f64], table: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in table.chunks_exact(d).enumerate() {
        let dist: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        // strict comparison keeps the lowest index on ties
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

pub fn quantize_grid(z: &FeatureMap, cb: &Codebook) -> Result<(CodeGrid, FeatureMap)> {
    let (h, w, d) = z.dim();
    if d != cb.d() {
        return Err(Error::Contract(format!(
            "feature dimension {d} against codebook dimension {}",
            cb.d()
        )));
    }
    let mut idx = Array2::zeros((h, w));
    let mut zq = Array3::zeros((h, w, d));
    for r in 0..h {
        for c in 0..w {
            let v: Vec<f64> = (0..d).map(|k| z.data[[r, c, k]]).collect();
            let (i, _) = nearest_code(&v, cb)?;
            idx[[r, c]] = i;
            for k in 0..d {
                zq[[r, c, k]] = cb.vectors[[i, k]];
            }
        }
    }
    Ok((
        CodeGrid {
            indices: idx,
            level: cb.level,
            k: cb.k(),
        },
        FeatureMap { data: zq },
    ))
}

/// `(codebook_loss, commitment_loss)` as values: the mean over positions of
/// the D-summed squared residual, the second scaled by `beta`.
pub fn vq_losses(z: &FeatureMap, zq: &FeatureMap, beta: f64) -> Result<(f64, f64)> {
    if z.dim() != zq.dim() {
        return Err(Error::Contract(format!(
            "feature shapes {:?} and {:?}",
            z.dim(),
            zq.dim()
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!(
            "beta must be a non-negative finite value, got {beta}"
        )));
    }
    let (h, w, _) = z.dim();
    let sq: f64 = z
        .data
        .iter()
        .zip(zq.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mean = sq / (h * w) as f64;
    Ok((mean, beta * mean))
}

/// Forward value of the straight-through composition, which is `zq`.
/// Gradients are handled by [`quantize_var`].
pub fn straight_through_compose(z: &FeatureMap, zq: &FeatureMap) -> Result<FeatureMap> {
    if z.dim() != zq.dim() {
        return Err(Error::Contract(format!(
            "feature shapes {:?} and {:?}",
            z.dim(),
            zq.dim()
        )));
    }
    Ok(zq.clone())
}

pub fn lookup(g: &CodeGrid, cb: &Codebook) -> Result<FeatureMap> {
    if g.k != cb.k() {
        return Err(Error::Contract(format!(
            "grid K={} against codebook K={}",
            g.k,
            cb.k()
        )));
    }
    let (h, w) = g.shape();
    let d = cb.d();
    let mut out = Array3::zeros((h, w, d));
    for ((r, c), &i) in g.indices.indexed_iter() {
        if i >= cb.k() {
            return Err(Error::Contract(format!(
                "index {i} out of range for K={}",
                cb.k()
            )));
        }
        for k in 0..d {
            out[[r, c, k]] = cb.vectors[[i, k]];
        }
    }
    Ok(FeatureMap { data: out })
}

/// Assignment state captured at a base point, used to evaluate the loss as
/// a smooth function of the parameters around it.
#[derive(Clone, Debug)]
pub struct FrozenQuantization {
    pub indices: Vec<usize>,
    pub z: Tensor,
    pub zq: Tensor,
}

/// Quantizer output recorded on a graph.
pub struct QuantizedVar {
    /// Straight-through output, `[N, D, h, w]`.
    pub out: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    /// Raster-order indices for every sample, concatenated.
    pub indices: Vec<usize>,
    pub frozen: FrozenQuantization,
}

/// Quantizes encoder output `z` (`[N, D, h, w]`) against `codebook`
/// (`[K, D]`).
///
/// Live mode forwards `zq` exactly and copies its gradient onto `z`. With
/// `frozen`, the assignments and the detached operands are taken from the
/// base point instead, so the result is a smooth function of `z` and the
/// codebook.
pub fn quantize_var(
    g: &mut Graph,
    z: Var,
    codebook: Var,
    beta: f64,
    frozen: Option<&FrozenQuantization>,
) -> QuantizedVar {
    let (n, d, h, w) = g.value(z).dims4();
    let m = n * h * w;
    let z_rows = g.value(z).nchw_to_nhwc().reshape(&[m, d]);

    let indices: Vec<usize> = match frozen {
        Some(f) => f.indices.clone(),
        None => {
            let table = g.value(codebook).data();
            z_rows
                .data()
                .chunks_exact(d)
                .map(|v| nearest_row(v, table, d).0)
                .collect()
        }
    };
    let gathered = g.gather(codebook, &indices);
    let nhwc = g.reshape(gathered, &[n, h, w, d]);
    let zq = g.nhwc_to_nchw(nhwc);
    let zq_value = g.value(zq).clone();

    let (z0, zq0) = match frozen {
        Some(f) => (f.z.clone(), f.zq.clone()),
        None => (g.value(z).clone(), zq_value.clone()),
    };

    let out = match frozen {
        None => g.pass_through(z, zq_value),
        Some(_) => {
            let offset = g.constant(zq0.zip_map(&z0, |a, b| a - b));
            g.add(z, offset)
        }
    };

    let inv_m = 1.0 / m as f64;
    let z_const = g.constant(z0.clone());
    let r = g.sub(z_const, zq);
    let r2 = g.square(r);
    let s = g.sum(r2);
    let codebook_loss = g.scale(s, inv_m);

    let zq_const = g.constant(zq0.clone());
    let r = g.sub(z, zq_const);
    let r2 = g.square(r);
    let s = g.sum(r2);
    let commitment_loss = g.scale(s, beta * inv_m);

    QuantizedVar {
        out,
        codebook_loss,
        commitment_loss,
        frozen: FrozenQuantization {
            indices: indices.clone(),
            z: z0,
            zq: zq0,
        },
        indices,
    }
}
