//! Two-stage optimization: the autoencoder with its codebooks first, then
//! one autoregressive prior per latent level on the frozen encoder's grids.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqmoco_autodiff::{Gradients, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::motion_sim::{ImageSlice, SeverityLabel, TrainingPair};
use crate::networks::{images_to_tensor, AutoencodeVars, FrozenAssignments, VQModel};
use crate::prior_ar::PriorModel;
use crate::vq_core::{CodeGrid, DEFAULT_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_commit: f64,
    pub crop: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Rescale gradients whose global norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Record elapsed seconds in every log record. Off keeps logs
    /// reproducible byte for byte.
    #[serde(default)]
    pub log_wall_time: bool,
    /// Save a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr_stage1: 1e-4,
            lr_stage2: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            beta_commit: DEFAULT_BETA,
            crop: 128,
            seed: 0,
            max_steps: None,
            grad_clip: None,
            log_wall_time: false,
            checkpoint_every: None,
        }
    }

    pub fn toy() -> Self {
        Self {
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            epochs: 10,
            batch_size: 8,
            crop: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Configuration(m));
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return c("learning rates must be positive".into());
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return c(format!("Adam beta {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.beta_commit >= 0.0) {
            return c("adam_eps must be positive and beta_commit non-negative".into());
        }
        if self.batch_size == 0 {
            return c("batch_size must be positive".into());
        }
        if matches!(self.grad_clip, Some(v) if !(v > 0.0)) {
            return c("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Contract(format!(
            "Adam shapes: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::Training {
            step: state.t as usize,
            message: "non-finite gradient".into(),
        });
    }
    let t = state.t as i32 + 1;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    state.t += 1;
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, cfg: &TrainConfig) -> Self {
        Self {
            states: store
                .iter()
                .map(|(_, _, t)| AdamState::new(t.shape()))
                .collect(),
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Updates every parameter that received a gradient, then rounds the
    /// store to single precision.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        clip: Option<f64>,
        step: usize,
    ) -> Result<()> {
        for (id, g) in grads.params() {
            if !g.all_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite gradient for {}", store.name(id)),
                });
            }
        }
        let scale = match clip {
            Some(max) => {
                let norm = grads
                    .params()
                    .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (id, g) in grads.params() {
            let g = if scale == 1.0 {
                g.clone()
            } else {
                g.map(|v| v * scale)
            };
            adam_update(
                store.get_mut(id),
                &g,
                &mut self.states[id.0],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )
            .map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { step, message },
                other => other,
            })?;
        }
        store.round_to_f32();
        Ok(())
    }
}

/// Mean absolute reconstruction error plus both quantization terms.
pub fn loss_stage1(
    x: &ImageSlice,
    x_ref: &ImageSlice,
    codebook_loss: f64,
    commitment_loss: f64,
) -> Result<f64> {
    if x.shape() != x_ref.shape() {
        return Err(Error::Contract(format!(
            "shapes {:?} and {:?}",
            x.shape(),
            x_ref.shape()
        )));
    }
    let n = (x.height() * x.width()) as f64;
    let l1: f64 = x
        .data()
        .iter()
        .zip(x_ref.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Ok(l1 + codebook_loss + commitment_loss)
}

/// Stage-1 objective recorded on a graph.
pub struct Stage1Objective {
    pub total: Var,
    pub recon: Var,
    pub forward: AutoencodeVars,
}

/// Builds the stage-1 loss for a batch on `g`.
pub fn stage1_objective(
    g: &mut Graph,
    model: &VQModel,
    corrupted: &[&ImageSlice],
    clean: &[&ImageSlice],
    labels: &[SeverityLabel],
    beta: f64,
    frozen: Option<&FrozenAssignments>,
) -> Stage1Objective {
    let x = g.constant(images_to_tensor(corrupted));
    let r = g.constant(images_to_tensor(clean));
    let forward = model.forward_graph(g, x, labels, beta, frozen);
    let d = g.sub(forward.recon, r);
    let a = g.abs(d);
    let recon = g.mean(a);
    let t = g.add(recon, forward.codebook_loss);
    let total = g.add(t, forward.commitment_loss);
    Stage1Objective {
        total,
        recon,
        forward,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum Losses {
    Stage1 {
        recon: f64,
        codebook: f64,
        commitment: f64,
        total: f64,
    },
    Stage2 {
        /// Mean per-sample nll of the top grid.
        nll_top: f64,
        nll_bottom: f64,
        nll_top_per_position: f64,
        nll_bottom_per_position: f64,
    },
}

impl Losses {
    pub fn total(&self) -> f64 {
        match self {
            Losses::Stage1 { total, .. } => *total,
            Losses::Stage2 {
                nll_top,
                nll_bottom,
                ..
            } => nll_top + nll_bottom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: Losses,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

fn check_pairs(pairs: &[TrainingPair]) -> Result<()> {
    let Some(first) = pairs.first() else {
        return Err(Error::Configuration("training data is empty".into()));
    };
    let shape = first.clean.shape();
    if pairs
        .iter()
        .any(|p| p.clean.shape() != shape || p.corrupted.shape() != shape)
    {
        return Err(Error::Configuration(
            "training images differ in shape".into(),
        ));
    }
    Ok(())
}

/// Deterministic epoch-wise batching.
struct Batches {
    rng: ChaCha8Rng,
    n: usize,
    size: usize,
}

impl Batches {
    fn new(seed: u64, n: usize, size: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            size,
        }
    }

    fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.size).map(<[usize]>::to_vec).collect()
    }
}

fn finite_or_abort(step: usize, losses: &Losses) -> Result<()> {
    let values: Vec<f64> = match losses {
        Losses::Stage1 {
            recon,
            codebook,
            commitment,
            total,
        } => vec![*recon, *codebook, *commitment, *total],
        Losses::Stage2 {
            nll_top,
            nll_bottom,
            ..
        } => vec![*nll_top, *nll_bottom],
    };
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        log::error!("non-finite loss at step {step}: {losses:?}");
        Err(Error::Training {
            step,
            message: format!("non-finite loss {losses:?}"),
        })
    }
}

pub fn train_stage1(
    cfg: &TrainConfig,
    data: &[TrainingPair],
    model: VQModel,
) -> Result<(VQModel, TrainLog)> {
    train_stage1_with(cfg, data, model, |_, _| Ok(()))
}

/// As [`train_stage1`], calling `on_epoch(epoch, model)` after every
/// completed epoch.
pub fn train_stage1_with(
    cfg: &TrainConfig,
    data: &[TrainingPair],
    mut model: VQModel,
    mut on_epoch: impl FnMut(usize, &VQModel) -> Result<()>,
) -> Result<(VQModel, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok((model, log));
    }
    check_pairs(data)?;
    let (h, w) = data[0].clean.shape();
    model.check_input(h, w)?;
    let mut adam = Adam::new(model.params(), cfg.lr_stage1, cfg);
    let mut batches = Batches::new(cfg.seed, data.len(), cfg.batch_size);
    let start = Instant::now();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        for batch in batches.epoch() {
            let corrupted: Vec<&ImageSlice> = batch.iter().map(|&i| &data[i].corrupted).collect();
            let clean: Vec<&ImageSlice> = batch.iter().map(|&i| &data[i].clean).collect();
            let labels: Vec<SeverityLabel> = batch.iter().map(|&i| data[i].label).collect();
            let mut g = Graph::new();
            let obj = stage1_objective(
                &mut g,
                &model,
                &corrupted,
                &clean,
                &labels,
                cfg.beta_commit,
                None,
            );
            let losses = Losses::Stage1 {
                recon: g.value(obj.recon).item(),
                codebook: g.value(obj.forward.codebook_loss).item(),
                commitment: g.value(obj.forward.commitment_loss).item(),
                total: g.value(obj.total).item(),
            };
            finite_or_abort(step, &losses)?;
            let grads = g.backward(obj.total);
            adam.step(model.params_mut(), &grads, cfg.grad_clip, step)?;
            log::debug!("stage1 step {step} epoch {epoch}: {losses:?}");
            log.records.push(TrainRecord {
                step,
                epoch,
                losses,
                wall_time_s: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
            });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                on_epoch(epoch, &model)?;
                break 'outer;
            }
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

/// The two per-level priors.
#[derive(Clone, Debug)]
pub struct PriorPair {
    pub top: PriorModel,
    pub bottom: PriorModel,
}

fn prior_loss(
    prior: &PriorModel,
    grids: &[&CodeGrid],
    labels: &[SeverityLabel],
    context: Option<&[&CodeGrid]>,
) -> (Graph, Var, f64) {
    let mut g = Graph::new();
    let logits = prior.logits_graph(&mut g, grids, labels, context);
    let (n, k, h, w) = g.value(logits).dims4();
    let rows = g.nchw_to_nhwc(logits);
    let rows = g.reshape(rows, &[n * h * w, k]);
    let targets: Vec<usize> = grids
        .iter()
        .flat_map(|gr| gr.indices().iter().copied())
        .collect();
    let ce = g.cross_entropy_sum(rows, &targets);
    let mean = g.scale(ce, 1.0 / n as f64);
    (g, mean, (h * w) as f64)
}

pub fn train_stage2(
    cfg: &TrainConfig,
    data: &[TrainingPair],
    frozen: &VQModel,
    priors: PriorPair,
) -> Result<(PriorPair, TrainLog)> {
    train_stage2_with(cfg, data, frozen, priors, |_, _| Ok(()))
}

/// As [`train_stage2`], calling `on_epoch(epoch, priors)` after every
/// completed epoch.
pub fn train_stage2_with(
    cfg: &TrainConfig,
    data: &[TrainingPair],
    frozen: &VQModel,
    mut priors: PriorPair,
    mut on_epoch: impl FnMut(usize, &PriorPair) -> Result<()>,
) -> Result<(PriorPair, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok((priors, log));
    }
    check_pairs(data)?;
    let mut grids = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size) {
        let images: Vec<&ImageSlice> = chunk.iter().map(|p| &p.corrupted).collect();
        let labels: Vec<SeverityLabel> = chunk.iter().map(|p| p.label).collect();
        grids.extend(frozen.encode_to_grids(&images, &labels)?);
    }

    let mut adam_top = Adam::new(priors.top.params(), cfg.lr_stage2, cfg);
    let mut adam_bottom = Adam::new(priors.bottom.params(), cfg.lr_stage2, cfg);
    let mut batches = Batches::new(cfg.seed, data.len(), cfg.batch_size);
    let start = Instant::now();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        for batch in batches.epoch() {
            let labels: Vec<SeverityLabel> = batch.iter().map(|&i| data[i].label).collect();
            let tops: Vec<&CodeGrid> = batch.iter().map(|&i| &grids[i].0).collect();
            let bottoms: Vec<&CodeGrid> = batch.iter().map(|&i| &grids[i].1).collect();

            let (g_top, l_top, n_top) = prior_loss(&priors.top, &tops, &labels, None);
            let (g_bot, l_bot, n_bot) = prior_loss(&priors.bottom, &bottoms, &labels, Some(&tops));
            let (nll_top, nll_bottom) = (g_top.value(l_top).item(), g_bot.value(l_bot).item());
            let losses = Losses::Stage2 {
                nll_top,
                nll_bottom,
                nll_top_per_position: nll_top / n_top,
                nll_bottom_per_position: nll_bottom / n_bot,
            };
            finite_or_abort(step, &losses)?;
            adam_top.step(
                priors.top.params_mut(),
                &g_top.backward(l_top),
                cfg.grad_clip,
                step,
            )?;
            adam_bottom.step(
                priors.bottom.params_mut(),
                &g_bot.backward(l_bot),
                cfg.grad_clip,
                step,
            )?;
            log::debug!("stage2 step {step} epoch {epoch}: {losses:?}");
            log.records.push(TrainRecord {
                step,
                epoch,
                losses,
                wall_time_s: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
            });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                on_epoch(epoch, &priors)?;
                break 'outer;
            }
        }
        on_epoch(epoch, &priors)?;
    }
    Ok((priors, log))
}
