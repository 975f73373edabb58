//! The conditional two-level encoder/decoder.
//!
//! `E1` maps the image to the bottom latent grid (stride `b`), `E2` maps the
//! bottom features on to the top grid (stride `t`). On the way back, `D1`
//! decodes the quantized top grid up to the bottom resolution, the result is
//! concatenated with the quantized bottom grid and `D2` decodes the pair to
//! an image. The label embedding `h(y)` is added to both halves of that
//! concatenation and, optionally, to the encoder's input projection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vqmoco_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvT, Linear, ResBlock};
use crate::motion_sim::{ImageSlice, SeverityLabel};
use crate::vq_core::{
    quantize_var, CodeGrid, Codebook, FeatureMap, FrozenQuantization, Level, QuantizedVar,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VQModelConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Width of the bottleneck inside residual blocks.
    pub res_channels: usize,
    pub res_blocks_per_stage: usize,
    pub codebook_k: usize,
    pub codebook_d: usize,
    pub bottom_stride: usize,
    pub top_stride: usize,
    pub num_labels: usize,
    /// Add `h(y)` to the encoder's input projection.
    pub encoder_conditioning: bool,
}

impl VQModelConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            hidden_channels: 128,
            res_channels: 32,
            res_blocks_per_stage: 2,
            codebook_k: 512,
            codebook_d: 64,
            bottom_stride: 4,
            top_stride: 8,
            num_labels: SeverityLabel::COUNT,
            encoder_conditioning: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            hidden_channels: 32,
            res_channels: 8,
            res_blocks_per_stage: 1,
            codebook_k: 32,
            codebook_d: 8,
            bottom_stride: 2,
            top_stride: 4,
            num_labels: SeverityLabel::COUNT,
            encoder_conditioning: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::Configuration(msg));
        if !self.bottom_stride.is_power_of_two() || self.bottom_stride < 2 {
            return c(format!(
                "bottom_stride {} must be a power of two ≥ 2",
                self.bottom_stride
            ));
        }
        if !self.top_stride.is_power_of_two() || self.top_stride <= self.bottom_stride {
            return c(format!(
                "top_stride {} must be a power of two above bottom_stride {}",
                self.top_stride, self.bottom_stride
            ));
        }
        if self.num_labels != SeverityLabel::COUNT {
            return c(format!(
                "num_labels must be {}, got {}",
                SeverityLabel::COUNT,
                self.num_labels
            ));
        }
        if self.hidden_channels < 2 || self.hidden_channels % 2 != 0 {
            return c(format!(
                "hidden_channels {} must be even and ≥ 2",
                self.hidden_channels
            ));
        }
        if self.codebook_k < 2
            || self.codebook_d < 1
            || self.in_channels < 1
            || self.res_channels < 1
        {
            return c(
                "codebook_k ≥ 2, codebook_d, in_channels and res_channels ≥ 1 required".into(),
            );
        }
        Ok(())
    }

    fn bottom_stages(&self) -> usize {
        self.bottom_stride.trailing_zeros() as usize
    }

    fn top_stages(&self) -> usize {
        (self.top_stride / self.bottom_stride).trailing_zeros() as usize
    }

    fn encoder_projection(&self) -> bool {
        self.encoder_conditioning && self.hidden_channels / 2 != self.codebook_d
    }
}

/// Layer widths of a strided downsampling stack reducing by `2^n`.
fn down_convs(cin: usize, hidden: usize, n: usize) -> Vec<(usize, usize, usize, usize, usize)> {
    // (cin, cout, kernel, stride, pad)
    let half = hidden / 2;
    let mut v = vec![(cin, half, 4, 2, 1)];
    if n == 1 {
        v.push((half, hidden, 3, 1, 1));
    } else {
        v.push((half, hidden, 4, 2, 1));
        for _ in 2..n {
            v.push((hidden, hidden, 4, 2, 1));
        }
    }
    v
}

/// Layer widths of a transposed-convolution stack enlarging by `2^n`.
fn up_convs(hidden: usize, cout: usize, n: usize) -> Vec<(usize, usize)> {
    if n == 1 {
        return vec![(hidden, cout)];
    }
    let half = hidden / 2;
    let mut v = vec![(hidden, half)];
    for _ in 2..n {
        v.push((half, half));
    }
    v.push((half, cout));
    v
}

/// Exact trainable-parameter count of a model built from `config`.
pub fn count_parameters(config: &VQModelConfig) -> usize {
    let (hid, d, k) = (config.hidden_channels, config.codebook_d, config.codebook_k);
    let res = config.res_blocks_per_stage * ResBlock::count(hid, config.res_channels);
    let down = |cin, n| -> usize {
        down_convs(cin, hid, n)
            .iter()
            .map(|&(i, o, k, _, _)| Conv::count(i, o, k))
            .sum()
    };
    let up = |cout, n| -> usize {
        up_convs(hid, cout, n)
            .iter()
            .map(|&(i, o)| ConvT::count(i, o, 4))
            .sum()
    };

    let e1 = down(config.in_channels, config.bottom_stages()) + res;
    let e2 = down(hid, config.top_stages()) + res;
    let pre = 2 * Conv::count(hid, d, 1);
    let d1 = Conv::count(d, hid, 3) + res + up(d, config.top_stages());
    let d2 = Conv::count(2 * d, hid, 1) + res + up(config.in_channels, config.bottom_stages());
    let label = config.num_labels * d;
    let proj = if config.encoder_projection() {
        Linear::count(d, hid / 2, false)
    } else {
        0
    };
    e1 + e2 + pre + d1 + d2 + label + proj + 2 * k * d
}

#[derive(Clone, Debug)]
struct Down {
    convs: Vec<Conv>,
    res: Vec<ResBlock>,
}

impl Down {
    fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cfg: &VQModelConfig,
        cin: usize,
        n: usize,
    ) -> Self {
        bld.scope(name, |bld| Self {
            convs: down_convs(cin, cfg.hidden_channels, n)
                .into_iter()
                .enumerate()
                .map(|(i, (ci, co, k, s, p))| Conv::new(bld, &format!("conv{i}"), ci, co, k, s, p))
                .collect(),
            res: (0..cfg.res_blocks_per_stage)
                .map(|i| {
                    ResBlock::new(
                        bld,
                        &format!("res{i}"),
                        cfg.hidden_channels,
                        cfg.res_channels,
                    )
                })
                .collect(),
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, inject: Option<Var>) -> Var {
        let mut h = self.convs[0].forward(g, ps, x);
        if let Some(v) = inject {
            h = g.add_broadcast(h, v);
        }
        for conv in &self.convs[1..] {
            h = g.relu(h);
            h = conv.forward(g, ps, h);
        }
        for r in &self.res {
            h = r.forward(g, ps, h);
        }
        g.relu(h)
    }
}

#[derive(Clone, Debug)]
struct Up {
    stem: Conv,
    res: Vec<ResBlock>,
    convs: Vec<ConvT>,
}

impl Up {
    fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cfg: &VQModelConfig,
        stem: (usize, usize),
        cout: usize,
        n: usize,
    ) -> Self {
        let hid = cfg.hidden_channels;
        bld.scope(name, |bld| Self {
            stem: Conv::new(bld, "stem", stem.0, hid, stem.1, 1, stem.1 / 2),
            res: (0..cfg.res_blocks_per_stage)
                .map(|i| ResBlock::new(bld, &format!("res{i}"), hid, cfg.res_channels))
                .collect(),
            convs: up_convs(hid, cout, n)
                .into_iter()
                .enumerate()
                .map(|(i, (ci, co))| ConvT::new(bld, &format!("up{i}"), ci, co, 4, 2, 1))
                .collect(),
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut h = self.stem.forward(g, ps, x);
        for r in &self.res {
            h = r.forward(g, ps, h);
        }
        for conv in &self.convs {
            h = g.relu(h);
            h = conv.forward(g, ps, h);
        }
        h
    }
}

/// Graph values of one autoencoder pass.
pub struct AutoencodeVars {
    /// `[N, C, H, W]` reconstruction.
    pub recon: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub top: QuantizedVar,
    pub bottom: QuantizedVar,
}

/// Frozen assignments for both levels.
#[derive(Clone, Debug)]
pub struct FrozenAssignments {
    pub top: FrozenQuantization,
    pub bottom: FrozenQuantization,
}

/// Value-level result of [`VQModel::forward_autoencode`].
#[derive(Clone, Debug)]
pub struct Autoencoded {
    pub recon: ImageSlice,
    pub top: CodeGrid,
    pub bottom: CodeGrid,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

#[derive(Clone, Debug)]
pub struct VQModel {
    config: VQModelConfig,
    params: ParamStore,
    label: ParamId,
    enc_proj: Option<Linear>,
    e1: Down,
    e2: Down,
    pre_bottom: Conv,
    pre_top: Conv,
    d1: Up,
    d2: Up,
    codebook_top: ParamId,
    codebook_bottom: ParamId,
}

impl VQModel {
    pub fn new<R: Rng + ?Sized>(config: VQModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bld = Builder::new(&mut params, rng);
        let (hid, d, k) = (config.hidden_channels, config.codebook_d, config.codebook_k);
        let label = bld.uniform("label_embedding", &[config.num_labels, d], 1.0);
        let enc_proj = config
            .encoder_projection()
            .then(|| Linear::new(&mut bld, "enc_label_proj", d, hid / 2, false));
        let e1 = Down::new(
            &mut bld,
            "e1",
            &config,
            config.in_channels,
            config.bottom_stages(),
        );
        let e2 = Down::new(&mut bld, "e2", &config, hid, config.top_stages());
        let pre_bottom = Conv::new(&mut bld, "pre_quant_bottom", hid, d, 1, 1, 0);
        let pre_top = Conv::new(&mut bld, "pre_quant_top", hid, d, 1, 1, 0);
        let d1 = Up::new(&mut bld, "d1", &config, (d, 3), d, config.top_stages());
        let d2 = Up::new(
            &mut bld,
            "d2",
            &config,
            (2 * d, 1),
            config.in_channels,
            config.bottom_stages(),
        );
        let bound = 1.0 / k as f64;
        let codebook_top = bld.uniform("codebook_top", &[k, d], bound);
        let codebook_bottom = bld.uniform("codebook_bottom", &[k, d], bound);
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            label,
            enc_proj,
            e1,
            e2,
            pre_bottom,
            pre_top,
            d1,
            d2,
            codebook_top,
            codebook_bottom,
        })
    }

    pub fn config(&self) -> &VQModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn codebook_id(&self, level: Level) -> ParamId {
        match level {
            Level::Top => self.codebook_top,
            Level::Bottom => self.codebook_bottom,
        }
    }

    pub fn codebook(&self, level: Level) -> Codebook {
        Codebook::from_tensor(self.params.get(self.codebook_id(level)), level)
            .expect("model codebook is valid")
    }

    /// Checks an input size against the stride configuration.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let t = self.config.top_stride;
        if height % t != 0 || width % t != 0 {
            return Err(Error::Configuration(format!(
                "input {height}x{width} not divisible by top stride {t}"
            )));
        }
        Ok(())
    }

    pub fn embed_label(&self, y: SeverityLabel) -> Vec<f64> {
        let d = self.config.codebook_d;
        self.params.get(self.label).data()[y.index() * d..(y.index() + 1) * d].to_vec()
    }

    fn label_var(&self, g: &mut Graph, labels: &[SeverityLabel]) -> Var {
        let table = g.param(&self.params, self.label);
        let idx: Vec<usize> = labels.iter().map(|y| y.index()).collect();
        g.gather(table, &idx)
    }

    /// Encoder features `(z_bottom, z_top)` as `[N, D, h, w]` graph values.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, labels: &[SeverityLabel]) -> (Var, Var) {
        let ps = &self.params;
        let inject = self.config.encoder_conditioning.then(|| {
            let h = self.label_var(g, labels);
            match &self.enc_proj {
                Some(p) => p.forward(g, ps, h),
                None => h,
            }
        });
        let f1 = self.e1.forward(g, ps, x, inject);
        let f2 = self.e2.forward(g, ps, f1, None);
        let zb = self.pre_bottom.forward(g, ps, f1);
        let zt = self.pre_top.forward(g, ps, f2);
        (zb, zt)
    }

    /// Decodes quantized `[N, D, h, w]` grids to an `[N, C, H, W]` image.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        eq_top: Var,
        eq_bottom: Var,
        labels: &[SeverityLabel],
    ) -> Var {
        let ps = &self.params;
        let h = self.label_var(g, labels);
        let u = self.d1.forward(g, ps, eq_top);
        let u = g.add_broadcast(u, h);
        let b = g.add_broadcast(eq_bottom, h);
        let v = g.concat_channels(u, b);
        self.d2.forward(g, ps, v)
    }

    /// Full pass on an `[N, C, H, W]` input. With `frozen`, quantization
    /// reuses the given assignments.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        labels: &[SeverityLabel],
        beta: f64,
        frozen: Option<&FrozenAssignments>,
    ) -> AutoencodeVars {
        let (zb, zt) = self.encode_graph(g, x, labels);
        let cb_t = g.param(&self.params, self.codebook_top);
        let cb_b = g.param(&self.params, self.codebook_bottom);
        let top = quantize_var(g, zt, cb_t, beta, frozen.map(|f| &f.top));
        let bottom = quantize_var(g, zb, cb_b, beta, frozen.map(|f| &f.bottom));
        let recon = self.decode_graph(g, top.out, bottom.out, labels);
        let codebook_loss = g.add(top.codebook_loss, bottom.codebook_loss);
        let commitment_loss = g.add(top.commitment_loss, bottom.commitment_loss);
        AutoencodeVars {
            recon,
            codebook_loss,
            commitment_loss,
            top,
            bottom,
        }
    }

    pub fn encode_hierarchy(
        &self,
        img: &ImageSlice,
        y: SeverityLabel,
    ) -> Result<(FeatureMap, FeatureMap)> {
        self.check_channels()?;
        self.check_input(img.height(), img.width())?;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&[img]));
        let (zb, zt) = self.encode_graph(&mut g, x, &[y]);
        Ok((
            FeatureMap::from_nchw(g.value(zb), 0),
            FeatureMap::from_nchw(g.value(zt), 0),
        ))
    }

    pub fn decode_hierarchy(
        &self,
        eq_top: &FeatureMap,
        eq_bottom: &FeatureMap,
        y: SeverityLabel,
    ) -> Result<ImageSlice> {
        self.check_channels()?;
        let (ht, wt, dt) = eq_top.dim();
        let (hb, wb, db) = eq_bottom.dim();
        let f = self.config.top_stride / self.config.bottom_stride;
        let d = self.config.codebook_d;
        if dt != d || db != d || hb != ht * f || wb != wt * f {
            return Err(Error::Contract(format!(
                "latent shapes {:?} (top) and {:?} (bottom) inconsistent with D={d}, factor {f}",
                eq_top.dim(),
                eq_bottom.dim()
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(FeatureMap::stack_nchw(&[eq_top]));
        let b = g.constant(FeatureMap::stack_nchw(&[eq_bottom]));
        let out = self.decode_graph(&mut g, t, b, &[y]);
        let out = tensor_to_images(g.value(out), (1.0, 1.0));
        ImageSlice::new(
            out.into_iter().next().expect("one image").into_data(),
            (1.0, 1.0),
        )
    }

    pub fn forward_autoencode(
        &self,
        img: &ImageSlice,
        y: SeverityLabel,
        beta: f64,
    ) -> Result<Autoencoded> {
        self.check_channels()?;
        self.check_input(img.height(), img.width())?;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&[img]));
        let v = self.forward_graph(&mut g, x, &[y], beta, None);
        let recon = tensor_to_images(g.value(v.recon), img.spacing()).remove(0);
        let grid = |q: &QuantizedVar, level: Level| {
            let (_, _, h, w) = g.value(q.out).dims4();
            CodeGrid::new(
                ndarray::Array2::from_shape_vec((h, w), q.indices.clone()).expect("grid shape"),
                level,
                self.config.codebook_k,
            )
        };
        Ok(Autoencoded {
            top: grid(&v.top, Level::Top)?,
            bottom: grid(&v.bottom, Level::Bottom)?,
            codebook_loss: g.value(v.codebook_loss).item(),
            commitment_loss: g.value(v.commitment_loss).item(),
            recon,
        })
    }

    /// Quantized `(top, bottom)` index grids for a batch, without decoding.
    pub fn encode_to_grids(
        &self,
        images: &[&ImageSlice],
        labels: &[SeverityLabel],
    ) -> Result<Vec<(CodeGrid, CodeGrid)>> {
        self.check_channels()?;
        for img in images {
            self.check_input(img.height(), img.width())?;
        }
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        let (zb, zt) = self.encode_graph(&mut g, x, labels);
        let cb_t = g.param(&self.params, self.codebook_top);
        let cb_b = g.param(&self.params, self.codebook_bottom);
        let top = quantize_var(&mut g, zt, cb_t, 0.0, None);
        let bottom = quantize_var(&mut g, zb, cb_b, 0.0, None);
        let split = |q: &QuantizedVar, z: Var, level: Level| -> Result<Vec<CodeGrid>> {
            let (_, _, h, w) = g.value(z).dims4();
            q.indices
                .chunks_exact(h * w)
                .map(|c| {
                    let a =
                        ndarray::Array2::from_shape_vec((h, w), c.to_vec()).expect("grid shape");
                    CodeGrid::new(a, level, self.config.codebook_k)
                })
                .collect()
        };
        let tops = split(&top, zt, Level::Top)?;
        let bottoms = split(&bottom, zb, Level::Bottom)?;
        Ok(tops.into_iter().zip(bottoms).collect())
    }

    /// Decodes index grids through the codebooks.
    pub fn decode_grids(
        &self,
        top: &CodeGrid,
        bottom: &CodeGrid,
        y: SeverityLabel,
    ) -> Result<ImageSlice> {
        let et = crate::vq_core::lookup(top, &self.codebook(Level::Top))?;
        let eb = crate::vq_core::lookup(bottom, &self.codebook(Level::Bottom))?;
        self.decode_hierarchy(&et, &eb, y)
    }

    fn check_channels(&self) -> Result<()> {
        if self.config.in_channels != 1 {
            return Err(Error::Contract(format!(
                "image slices carry one channel, model expects {}",
                self.config.in_channels
            )));
        }
        Ok(())
    }
}

/// Stacks equally sized slices into a `[N, 1, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageSlice]) -> Tensor {
    let (h, w) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.shape(), (h, w), "images in a batch must share a shape");
        data.extend(img.data().iter().copied());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Splits a `[N, 1, H, W]` tensor into slices with the given spacing.
pub fn tensor_to_images(t: &Tensor, spacing: (f64, f64)) -> Vec<ImageSlice> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 1);
    t.data()
        .chunks_exact(h * w)
        .take(n)
        .map(|chunk| {
            let a = ndarray::Array2::from_shape_vec((h, w), chunk.to_vec()).expect("plane shape");
            ImageSlice::new(a, spacing).expect("finite decoder output")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn analytic_count_matches_built_model() {
        for cfg in [VQModelConfig::toy(), {
            let mut c = VQModelConfig::toy();
            c.bottom_stride = 4;
            c.top_stride = 16;
            c.encoder_conditioning = false;
            c
        }] {
            let m = VQModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.params().num_scalars(), count_parameters(&cfg));
        }
    }

    #[test]
    fn paper_count_is_exact() {
        assert_eq!(count_parameters(&VQModelConfig::paper()), 1_102_657);
    }

    #[test]
    fn config_validation() {
        let mut c = VQModelConfig::toy();
        c.top_stride = 2;
        assert!(c.validate().is_err());
        let mut c = VQModelConfig::toy();
        c.bottom_stride = 3;
        assert!(c.validate().is_err());
        let mut c = VQModelConfig::toy();
        c.num_labels = 10;
        assert!(c.validate().is_err());
    }
}
