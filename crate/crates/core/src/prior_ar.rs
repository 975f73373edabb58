//! Class-conditioned autoregressive priors over code grids.
//!
//! The network is a small PixelSNAIL-style stack: a type-A masked input
//! convolution, gated residual blocks built from type-B masked
//! convolutions, and single-head causal self-attention over raster
//! positions. Masked taps are never read, so logits at a position are
//! bitwise independent of the indices at and after it.

use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use vqmoco_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvT, Linear};
use crate::motion_sim::SeverityLabel;
use crate::vq_core::{CodeGrid, Level};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub level: Level,
    /// Vocabulary size of the modeled grid.
    pub k: usize,
    /// Vocabulary size and upsampling factor of the top-grid context, for
    /// a bottom-level prior.
    pub context: Option<TopContext>,
    pub channels: usize,
    pub n_blocks: usize,
    pub gated_res_per_block: usize,
    pub attention: bool,
    pub attention_dim: usize,
    pub kernel: usize,
    pub num_labels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopContext {
    pub k: usize,
    pub factor: usize,
}

impl PriorConfig {
    pub fn paper(level: Level, k: usize, context: Option<TopContext>) -> Self {
        Self {
            level,
            k,
            context,
            channels: 128,
            n_blocks: 4,
            gated_res_per_block: 2,
            attention: true,
            attention_dim: 64,
            kernel: 3,
            num_labels: SeverityLabel::COUNT,
        }
    }

    pub fn toy(level: Level, k: usize, context: Option<TopContext>) -> Self {
        Self {
            level,
            k,
            context,
            channels: 32,
            n_blocks: 2,
            gated_res_per_block: 1,
            attention: true,
            attention_dim: 16,
            kernel: 3,
            num_labels: SeverityLabel::COUNT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Configuration(m));
        if self.n_blocks < 1 {
            return c("prior needs at least one block".into());
        }
        if self.k < 2 || self.channels < 1 || self.attention_dim < 1 {
            return c(format!(
                "prior k={} channels={} invalid",
                self.k, self.channels
            ));
        }
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return c(format!("prior kernel {} must be odd and ≥ 3", self.kernel));
        }
        if self.num_labels != SeverityLabel::COUNT {
            return c(format!("num_labels must be {}", SeverityLabel::COUNT));
        }
        match (self.level, &self.context) {
            (Level::Top, Some(_)) => c("top-level prior takes no grid context".into()),
            (_, Some(ctx)) if ctx.k < 2 || ctx.factor < 1 => c("invalid top context".into()),
            _ => Ok(()),
        }
    }
}

/// How [`prior_rearrange`] uses the encoder grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RearrangeMode {
    /// Regenerate every position from the already rearranged prefix.
    #[default]
    Regenerate,
    /// Redraw each position given the encoder's own prefix.
    ResamplePrefix,
}

impl FromStr for RearrangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regenerate" => Ok(Self::Regenerate),
            "resample-prefix" => Ok(Self::ResamplePrefix),
            other => Err(Error::Parameter(format!(
                "unknown rearrange mode {other:?} (expected regenerate or resample-prefix)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
struct GatedRes {
    conv1: Conv,
    conv2: Conv,
    channels: usize,
}

impl GatedRes {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.elu(x);
        let h = self.conv1.forward(g, ps, h);
        let h = g.elu(h);
        let h = self.conv2.forward(g, ps, h);
        let a = g.slice_channels(h, 0, self.channels);
        let b = g.slice_channels(h, self.channels, self.channels);
        let gate = g.sigmoid(b);
        let y = g.mul(a, gate);
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let (n, c, h, w) = g.value(x).dims4();
        let l = h * w;
        let rows = g.nchw_to_nhwc(x);
        let rows = g.reshape(rows, &[n * l, c]);
        let project = |g: &mut Graph, lin: &Linear| {
            let p = lin.forward(g, ps, rows);
            let d = g.shape(p)[1];
            g.reshape(p, &[n, l, d])
        };
        let (q, k, v) = (
            project(g, &self.q),
            project(g, &self.k),
            project(g, &self.v),
        );
        let a = g.causal_attention(q, k, v);
        let d = g.shape(a)[2];
        let a = g.reshape(a, &[n * l, d]);
        let o = self.out.forward(g, ps, a);
        let o = g.reshape(o, &[n, h, w, c]);
        let o = g.nhwc_to_nchw(o);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Block {
    gated: Vec<GatedRes>,
    attention: Option<Attention>,
}

#[derive(Clone, Debug)]
pub struct PriorModel {
    config: PriorConfig,
    params: ParamStore,
    token_embed: ParamId,
    class_embed: ParamId,
    context: Option<(ParamId, ConvT)>,
    input: Conv,
    blocks: Vec<Block>,
    head: Conv,
}

impl PriorModel {
    pub fn new<R: Rng + ?Sized>(config: PriorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bld = Builder::new(&mut params, rng);
        let c = config.channels;
        let kk = config.kernel;
        let token_embed = bld.uniform("token_embedding", &[config.k, c], 1.0);
        let class_embed = bld.uniform("class_embedding", &[config.num_labels, c], 1.0);
        let context = config.context.map(|ctx| {
            let table = bld.uniform("context_embedding", &[ctx.k, c], 1.0);
            let up = ConvT::new(&mut bld, "context_up", c, c, ctx.factor, ctx.factor, 0);
            (table, up)
        });
        let input = Conv::masked(&mut bld, "input", c, c, kk, false);
        let blocks = (0..config.n_blocks)
            .map(|b| {
                bld.scope(&format!("block{b}"), |bld| Block {
                    gated: (0..config.gated_res_per_block)
                        .map(|i| {
                            bld.scope(&format!("gated{i}"), |bld| GatedRes {
                                conv1: Conv::masked(bld, "conv1", c, c, kk, true),
                                conv2: Conv::masked(bld, "conv2", c, 2 * c, kk, true),
                                channels: c,
                            })
                        })
                        .collect(),
                    attention: config.attention.then(|| {
                        bld.scope("attention", |bld| Attention {
                            q: Linear::new(bld, "query", c, config.attention_dim, true),
                            k: Linear::new(bld, "key", c, config.attention_dim, true),
                            v: Linear::new(bld, "value", c, config.attention_dim, true),
                            out: Linear::new(bld, "out", config.attention_dim, c, true),
                        })
                    }),
                })
            })
            .collect();
        let head = Conv::new(&mut bld, "head", c, config.k, 1, 1, 0);
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            token_embed,
            class_embed,
            context,
            input,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets the output head to zero, making every conditional uniform.
    pub fn zero_head(&mut self) {
        for id in [self.head.w, self.head.b] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    fn embed_grid(&self, g: &mut Graph, table: ParamId, grids: &[&CodeGrid]) -> Var {
        let (h, w) = grids[0].shape();
        let n = grids.len();
        let idx: Vec<usize> = grids
            .iter()
            .flat_map(|gr| gr.indices().iter().copied())
            .collect();
        let t = g.param(&self.params, table);
        let e = g.gather(t, &idx);
        let e = g.reshape(e, &[n, h, w, self.config.channels]);
        g.nhwc_to_nchw(e)
    }

    /// `[N, K, H, W]` logits for a batch of grids.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        grids: &[&CodeGrid],
        labels: &[SeverityLabel],
        context: Option<&[&CodeGrid]>,
    ) -> Var {
        let ps = &self.params;
        let x = self.embed_grid(g, self.token_embed, grids);
        let mut h = self.input.forward(g, ps, x);
        let table = g.param(ps, self.class_embed);
        let idx: Vec<usize> = labels.iter().map(|y| y.index()).collect();
        let cls = g.gather(table, &idx);
        h = g.add_broadcast(h, cls);
        if let (Some((table, up)), Some(ctx)) = (&self.context, context) {
            let e = self.embed_grid(g, *table, ctx);
            let e = up.forward(g, ps, e);
            h = g.add(h, e);
        }
        for block in &self.blocks {
            for gr in &block.gated {
                h = gr.forward(g, ps, h);
            }
            if let Some(att) = &block.attention {
                h = att.forward(g, ps, h);
            }
        }
        let h = g.elu(h);
        self.head.forward(g, ps, h)
    }

    fn check_grid(&self, grid: &CodeGrid, context: Option<&CodeGrid>) -> Result<()> {
        if grid.k() != self.config.k || grid.level() != self.config.level {
            return Err(Error::Contract(format!(
                "{} grid with K={} against {} prior with K={}",
                grid.level(),
                grid.k(),
                self.config.level,
                self.config.k
            )));
        }
        match (&self.config.context, context) {
            (None, _) => Ok(()),
            (Some(_), None) => Err(Error::Contract(
                "bottom prior needs a top-grid context".into(),
            )),
            (Some(ctx), Some(c)) => {
                let (h, w) = grid.shape();
                let (ch, cw) = c.shape();
                if c.k() != ctx.k || ch * ctx.factor != h || cw * ctx.factor != w {
                    return Err(Error::Contract(format!(
                        "context grid {ch}x{cw} (K={}) does not match {h}x{w} at factor {} (K={})",
                        c.k(),
                        ctx.factor,
                        ctx.k
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Per-position logits, `H × W × K`.
pub fn prior_logits(
    m: &PriorModel,
    grid: &CodeGrid,
    y: SeverityLabel,
    context: Option<&CodeGrid>,
) -> Result<Array3<f64>> {
    m.check_grid(grid, context)?;
    let mut g = Graph::new();
    let ctx = context.map(|c| [c]);
    let out = m.logits_graph(&mut g, &[grid], &[y], ctx.as_ref().map(|c| &c[..]));
    let (_, k, h, w) = g.value(out).dims4();
    let data = g.value(out).data();
    Ok(Array3::from_shape_fn((h, w, k), |(r, c, i)| {
        data[(i * h + r) * w + c]
    }))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Summed negative log-likelihood of `grid`, in nats.
pub fn prior_nll(
    m: &PriorModel,
    grid: &CodeGrid,
    y: SeverityLabel,
    context: Option<&CodeGrid>,
) -> Result<f64> {
    let logits = prior_logits(m, grid, y, context)?;
    let mut nll = 0.0;
    for ((r, c), &s) in grid.indices().indexed_iter() {
        let row: Vec<f64> = logits.slice(ndarray::s![r, c, ..]).to_vec();
        nll -= log_softmax(&row)[s];
    }
    Ok(nll)
}

/// Draws from `softmax(logits / temperature)`; temperature zero is argmax
/// with ties going to the lowest index.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be a finite value ≥ 0, got {t}"
        )));
    }
    Ok(())
}

/// Fills a grid in raster order, each position drawn given the prefix
/// written so far.
fn generate<R: Rng + ?Sized>(
    m: &PriorModel,
    shape: (usize, usize),
    y: SeverityLabel,
    temperature: f64,
    rng: &mut R,
    context: Option<&CodeGrid>,
) -> Result<CodeGrid> {
    let mut grid = CodeGrid::zeros(shape, m.config.level, m.config.k);
    m.check_grid(&grid, context)?;
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            let logits = prior_logits(m, &grid, y, context)?;
            let row = logits.slice(ndarray::s![r, c, ..]).to_vec();
            grid.set((r, c), sample_index(&row, temperature, rng));
        }
    }
    Ok(grid)
}

pub fn prior_sample<R: Rng + ?Sized>(
    m: &PriorModel,
    shape: (usize, usize),
    y: SeverityLabel,
    temperature: f64,
    rng: &mut R,
    context: Option<&CodeGrid>,
) -> Result<CodeGrid> {
    check_temperature(temperature)?;
    generate(m, shape, y, temperature, rng, context)
}

/// Re-predicts the indices of an encoder grid under the prior.
pub fn prior_rearrange<R: Rng + ?Sized>(
    m: &PriorModel,
    g_enc: &CodeGrid,
    y: SeverityLabel,
    temperature: f64,
    rng: &mut R,
    context: Option<&CodeGrid>,
    mode: RearrangeMode,
) -> Result<CodeGrid> {
    check_temperature(temperature)?;
    m.check_grid(g_enc, context)?;
    match mode {
        RearrangeMode::Regenerate => generate(m, g_enc.shape(), y, temperature, rng, context),
        RearrangeMode::ResamplePrefix => {
            let logits = prior_logits(m, g_enc, y, context)?;
            let (h, w) = g_enc.shape();
            let mut idx = Array2::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let row = logits.slice(ndarray::s![r, c, ..]).to_vec();
                    idx[[r, c]] = sample_index(&row, temperature, rng);
                }
            }
            CodeGrid::new(idx, m.config.level, m.config.k)
        }
    }
}
