//! Parameterized building blocks shared by the autoencoder and the priors.

use std::rc::Rc;

use rand::Rng;
use vqmoco_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

/// Registers freshly initialized parameters under a name prefix.
pub(crate) struct Builder<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng + ?Sized> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store
            .add(format!("{}{name}", self.prefix), Tensor::new(shape, data))
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Spatial tap mask of a raster-causal convolution. Type A excludes the
/// center tap, type B keeps it.
pub(crate) fn causal_mask(k: usize, include_center: bool) -> Rc<[bool]> {
    let c = k / 2;
    (0..k * k)
        .map(|i| {
            let (r, col) = (i / k, i % k);
            r < c || (r == c && (col < c || (include_center && col == c)))
        })
        .collect::<Vec<_>>()
        .into()
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub mask: Option<Rc<[bool]>>,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = fan_in_bound(cin * k * k);
        bld.scope(name, |bld| Self {
            w: bld.uniform("weight", &[cout, cin, k, k], bound),
            b: bld.uniform("bias", &[cout], bound),
            stride,
            pad,
            mask: None,
        })
    }

    /// Same-size raster-causal convolution.
    pub fn masked<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        include_center: bool,
    ) -> Self {
        let mut c = Self::new(bld, name, cin, cout, k, 1, k / 2);
        c.mask = Some(causal_mask(k, include_center));
        c
    }

    pub fn count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad, self.mask.clone())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT {
    pub fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = fan_in_bound(cin * k * k);
        bld.scope(name, |bld| Self {
            w: bld.uniform("weight", &[cin, cout, k, k], bound),
            b: bld.uniform("bias", &[cout], bound),
            stride,
            pad,
        })
    }

    pub fn count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Self {
        let bound = fan_in_bound(inp);
        bld.scope(name, |bld| Self {
            w: bld.uniform("weight", &[out, inp], bound),
            b: bias.then(|| bld.uniform("bias", &[out], bound)),
        })
    }

    pub fn count(inp: usize, out: usize, bias: bool) -> usize {
        inp * out + if bias { out } else { 0 }
    }

    /// Applies to `[M, In]` rows.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv3: Conv,
    conv1: Conv,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        bld: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        res_channels: usize,
    ) -> Self {
        bld.scope(name, |bld| Self {
            conv3: Conv::new(bld, "conv3", channels, res_channels, 3, 1, 1),
            conv1: Conv::new(bld, "conv1", res_channels, channels, 1, 1, 0),
        })
    }

    pub fn count(channels: usize, res_channels: usize) -> usize {
        Conv::count(channels, res_channels, 3) + Conv::count(res_channels, channels, 1)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.relu(x);
        let h = self.conv3.forward(g, ps, h);
        let h = g.relu(h);
        let h = self.conv1.forward(g, ps, h);
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn masks() {
        let a: Vec<bool> = causal_mask(3, false).to_vec();
        assert_eq!(
            a,
            [true, true, true, true, false, false, false, false, false]
        );
        let b: Vec<bool> = causal_mask(3, true).to_vec();
        assert_eq!(
            b,
            [true, true, true, true, true, false, false, false, false]
        );
    }

    #[test]
    fn counts_match_registered_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bld = Builder::new(&mut store, &mut rng);
        Conv::new(&mut bld, "c", 1, 8, 3, 1, 1);
        assert_eq!(bld.store.num_scalars(), 80);
        ConvT::new(&mut bld, "t", 4, 2, 4, 2, 1);
        ResBlock::new(&mut bld, "r", 6, 3);
        Linear::new(&mut bld, "l", 5, 7, false);
        assert_eq!(
            store.num_scalars(),
            80 + ConvT::count(4, 2, 4) + ResBlock::count(6, 3) + Linear::count(5, 7, false)
        );
        assert!(store.find("r.conv3.weight").is_some());
    }
}
