//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are added, and [`Graph::backward`] walks the tape in reverse. Graphs are
//! cheap and short-lived; build one per forward pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::kernels::{
    channel_sums, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    conv_transpose_out_len,
};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    PassThrough(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    NchwToNhwc(Var),
    NhwcToNchw(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        mask: Option<Rc<[bool]>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    AddBroadcast {
        x: Var,
        v: Var,
    },
    Gather {
        table: Var,
        idx: Rc<[usize]>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // Auxiliary forward state needed by backward (attention weights, softmax).
    saved: Option<Tensor>,
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient for one parameter; `None` when the parameter was not used
    /// or no gradient reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    /// All parameter gradients in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].as_ref().map(|g| (*id, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_full(value, op, requires_grad, None)
    }

    fn push_full(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        saved: Option<Tensor>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_full(value, Op::Leaf, false, None)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_full(value, Op::Leaf, true, None)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_full(store.get(id).clone(), Op::Leaf, true, None);
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Straight-through node: forward value is `value` exactly, while the
    /// incoming gradient is handed to `x` unchanged.
    pub fn pass_through(&mut self, x: Var, value: Tensor) -> Var {
        assert_eq!(self.shape(x), value.shape(), "pass_through: shape mismatch");
        self.push(value, Op::PassThrough(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(value, Op::Elu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn nchw_to_nhwc(&mut self, a: Var) -> Var {
        let value = self.value(a).nchw_to_nhwc();
        self.push(value, Op::NchwToNhwc(a), &[a])
    }

    pub fn nhwc_to_nchw(&mut self, a: Var) -> Var {
        let value = self.value(a).nhwc_to_nchw();
        self.push(value, Op::NhwcToNchw(a), &[a])
    }

    /// 2D convolution, weight `[Co, Ci, KH, KW]`, optional bias `[Co]` and
    /// optional spatial tap mask of length `KH * KW`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            mask.as_deref(),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let geom = ConvGeom { stride, pad };
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                mask,
            },
            &parents,
        )
    }

    /// Transposed 2D convolution, weight `[Ci, Co, KH, KW]`, bias `[Co]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (_, _, h, wd) = self.value(x).dims4();
        let (_, co, kh, kw) = self.value(w).dims4();
        let oh = conv_transpose_out_len(h, kh, stride, pad);
        let ow = conv_transpose_out_len(wd, kw, stride, pad);
        let mut value =
            conv2d_backward_input(self.value(x), self.value(w), stride, pad, None, oh, ow);
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            let plane = oh * ow;
            for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias[i % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let geom = ConvGeom { stride, pad };
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &parents)
    }

    /// Concatenates two `[N, C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: spatial mismatch");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out);
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    /// Channels `start..start + len` of a `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            out.extend_from_slice(&self.value(x).data()[base..base + len * plane]);
        }
        let value = Tensor::new(&[n, len, h, w], out);
        self.push(value, Op::SliceChannels { x, start }, &[x])
    }

    /// Adds a per-sample channel vector `[N, C]` at every spatial position of
    /// `[N, C, H, W]`.
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(
            self.value(v).shape(),
            &[n, c],
            "add_broadcast: vector shape mismatch"
        );
        let plane = h * w;
        let mut value = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let add = vd[i];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        self.push(value, Op::AddBroadcast { x, v }, &[x, v])
    }

    /// Row lookup: `out[r] = table[idx[r]]`, table `[K, D]`, output `[len, D]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let (k, d) = self.value(table).dims2();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < k, "gather index {i} out of range for {k} rows");
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[idx.len(), d], out);
        self.push(
            value,
            Op::Gather {
                table,
                idx: idx.into(),
            },
            &[table],
        )
    }

    /// `x [M, In] · wᵀ + b`, weight `[Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, inp) = self.value(x).dims2();
        let (out_dim, win) = self.value(w).dims2();
        assert_eq!(inp, win, "linear: input width {inp}, weight expects {win}");
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; m * out_dim];
        for r in 0..m {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out_dim {
                let wr = &wd[o * inp..(o + 1) * inp];
                out[r * out_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..m {
                for o in 0..out_dim {
                    out[r * out_dim + o] += bd[o];
                }
            }
        }
        let value = Tensor::new(&[m, out_dim], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Linear { x, w, b }, &parents)
    }

    /// Single-head causal attention over `[B, L, Dk]` queries/keys and
    /// `[B, L, Dv]` values. Position `i` attends to positions `0..=i` only;
    /// later positions are never read, not merely masked.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (b, l, dk) = self.value(q).dims3();
        assert_eq!(
            self.value(k).shape(),
            &[b, l, dk],
            "attention: key shape mismatch"
        );
        let (vb, vl, dv) = self.value(v).dims3();
        assert_eq!((vb, vl), (b, l), "attention: value shape mismatch");
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * l * l];
        let mut out = vec![0.0; b * l * dv];
        let mut scores = vec![0.0; l];
        for s in 0..b {
            for i in 0..l {
                let qi = &qd[(s * l + i) * dk..(s * l + i + 1) * dk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[(s * l + j) * dk..(s * l + j + 1) * dk];
                    let sc = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut().take(i + 1) {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let row = &mut probs[(s * l + i) * l..(s * l + i + 1) * l];
                let oi = &mut out[(s * l + i) * dv..(s * l + i + 1) * dv];
                for j in 0..=i {
                    let p = scores[j] / z;
                    row[j] = p;
                    let vj = &vd[(s * l + j) * dv..(s * l + j + 1) * dv];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, l, dv], out);
        let requires_grad = [q, k, v].iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_full(
            value,
            Op::CausalAttention { q, k, v, scale },
            requires_grad,
            Some(Tensor::new(&[b, l, l], probs)),
        )
    }

    /// Summed softmax cross-entropy of `[M, K]` logits against target classes.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, k) = self.value(logits).dims2();
        assert_eq!(
            m,
            targets.len(),
            "cross_entropy: {m} rows, {} targets",
            targets.len()
        );
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for r in 0..m {
            let row = &ld[r * k..(r + 1) * k];
            let t = targets[r];
            assert!(t < k, "cross_entropy target {t} out of range {k}");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += max + z.ln() - row[t];
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
        }
        let requires_grad = self.nodes[logits.0].requires_grad;
        self.push_full(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
            },
            requires_grad,
            Some(Tensor::new(&[m, k], probs)),
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::PassThrough(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Elu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { x * y.exp() }),
            ),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * sign(y))),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n))
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))),
            Op::NchwToNhwc(a) => acc(*a, g.nhwc_to_nchw()),
            Op::NhwcToNchw(a) => acc(*a, g.nchw_to_nhwc()),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                mask,
            } => {
                let (_, _, h, wd) = self.value(*x).dims4();
                let (_, _, kh, kw) = self.value(*w).dims4();
                if self.nodes[x.0].requires_grad {
                    acc(
                        *x,
                        conv2d_backward_input(
                            g,
                            self.value(*w),
                            geom.stride,
                            geom.pad,
                            mask.as_deref(),
                            h,
                            wd,
                        ),
                    );
                }
                if self.nodes[w.0].requires_grad {
                    acc(
                        *w,
                        conv2d_backward_weight(
                            g,
                            self.value(*x),
                            geom.stride,
                            geom.pad,
                            mask.as_deref(),
                            kh,
                            kw,
                        ),
                    );
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(g));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (_, _, kh, kw) = self.value(*w).dims4();
                if self.nodes[x.0].requires_grad {
                    acc(
                        *x,
                        conv2d_forward(g, self.value(*w), None, geom.stride, geom.pad, None),
                    );
                }
                if self.nodes[w.0].requires_grad {
                    acc(
                        *w,
                        conv2d_backward_weight(
                            self.value(*x),
                            g,
                            geom.stride,
                            geom.pad,
                            None,
                            kh,
                            kw,
                        ),
                    );
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(g));
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    ga.extend_from_slice(&g.data()[base..base + ca * plane]);
                    gb.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                acc(*a, Tensor::new(&[n, ca, h, w], ga));
                acc(*b, Tensor::new(&[n, cb, h, w], gb));
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.dims4().1;
                let plane = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let dst = (i * c + start) * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[i * len * plane..(i + 1) * len * plane]);
                }
                acc(*x, gx);
            }
            Op::AddBroadcast { x, v } => {
                acc(*x, g.clone());
                let (n, c, h, w) = g.dims4();
                let sums = g.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                acc(*v, Tensor::new(&[n, c], sums));
            }
            Op::Gather { table, idx } => {
                let (k, d) = self.value(*table).dims2();
                let mut gt = Tensor::zeros(&[k, d]);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (dst, s) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                acc(*table, gt);
            }
            Op::Linear { x, w, b } => {
                let (m, inp) = self.value(*x).dims2();
                let out_dim = self.value(*w).dims2().0;
                let gd = g.data();
                if self.nodes[x.0].requires_grad {
                    let wd = self.value(*w).data();
                    let mut gx = vec![0.0; m * inp];
                    for r in 0..m {
                        for o in 0..out_dim {
                            let go = gd[r * out_dim + o];
                            for (dst, wv) in gx[r * inp..(r + 1) * inp]
                                .iter_mut()
                                .zip(&wd[o * inp..(o + 1) * inp])
                            {
                                *dst += go * wv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(&[m, inp], gx));
                }
                if self.nodes[w.0].requires_grad {
                    let xd = self.value(*x).data();
                    let mut gw = vec![0.0; out_dim * inp];
                    for r in 0..m {
                        for o in 0..out_dim {
                            let go = gd[r * out_dim + o];
                            for (dst, xv) in gw[o * inp..(o + 1) * inp]
                                .iter_mut()
                                .zip(&xd[r * inp..(r + 1) * inp])
                            {
                                *dst += go * xv;
                            }
                        }
                    }
                    acc(*w, Tensor::new(&[out_dim, inp], gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_dim];
                    for r in 0..m {
                        for o in 0..out_dim {
                            gb[o] += gd[r * out_dim + o];
                        }
                    }
                    acc(*b, Tensor::new(&[out_dim], gb));
                }
            }
            Op::CausalAttention { q, k, v, scale } => {
                let probs = node.saved.as_ref().expect("attention weights saved");
                let (b, l, dk) = self.value(*q).dims3();
                let dv = self.value(*v).dims3().2;
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let (pd, gd) = (probs.data(), g.data());
                let mut gq = vec![0.0; b * l * dk];
                let mut gk = vec![0.0; b * l * dk];
                let mut gv = vec![0.0; b * l * dv];
                let mut dp = vec![0.0; l];
                for s in 0..b {
                    for i in 0..l {
                        let gi = &gd[(s * l + i) * dv..(s * l + i + 1) * dv];
                        let row = &pd[(s * l + i) * l..(s * l + i + 1) * l];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[(s * l + j) * dv..(s * l + j + 1) * dv];
                            dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                            dot += row[j] * dp[j];
                            for (dst, gg) in gv[(s * l + j) * dv..(s * l + j + 1) * dv]
                                .iter_mut()
                                .zip(gi)
                            {
                                *dst += row[j] * gg;
                            }
                        }
                        let qi = &qd[(s * l + i) * dk..(s * l + i + 1) * dk];
                        for j in 0..=i {
                            let ds = row[j] * (dp[j] - dot) * scale;
                            let kj = &kd[(s * l + j) * dk..(s * l + j + 1) * dk];
                            for (dst, kv) in gq[(s * l + i) * dk..(s * l + i + 1) * dk]
                                .iter_mut()
                                .zip(kj)
                            {
                                *dst += ds * kv;
                            }
                            for (dst, qv) in gk[(s * l + j) * dk..(s * l + j + 1) * dk]
                                .iter_mut()
                                .zip(qi)
                            {
                                *dst += ds * qv;
                            }
                        }
                    }
                }
                acc(*q, Tensor::new(&[b, l, dk], gq));
                acc(*k, Tensor::new(&[b, l, dk], gk));
                acc(*v, Tensor::new(&[b, l, dv], gv));
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = node.saved.as_ref().expect("softmax saved");
                let k = probs.dims2().1;
                let scale = g.item();
                let mut gl = probs.map(|p| p * scale);
                for (r, &t) in targets.iter().enumerate() {
                    gl.data_mut()[r * k + t] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
