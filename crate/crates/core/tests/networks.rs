use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmoco::motion_sim::{ImageSlice, SeverityLabel};
use vqmoco::networks::{count_parameters, FrozenAssignments, VQModel, VQModelConfig};
use vqmoco::training::stage1_objective;
use vqmoco::vq_core::{FeatureMap, DEFAULT_BETA};
use vqmoco::Error;
use vqmoco_autodiff::Graph;

mod common;
use common::toy_pairs;

fn label(y: u8) -> SeverityLabel {
    SeverityLabel::new(y).unwrap()
}

fn toy(seed: u64) -> VQModel {
    VQModel::new(VQModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_image(side: usize, seed: u64) -> ImageSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageSlice::unit(Array2::from_shape_fn((side, side), |_| {
        rng.gen_range(0.0..1.0)
    }))
    .unwrap()
}

fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn zero_params(m: &mut VQModel, prefix: &str) {
    let ids: Vec<_> = m
        .params()
        .ids()
        .filter(|&id| m.params().name(id).starts_with(prefix))
        .collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
}

// Per-layer hand count of the toy configuration: hidden 32, residual 8,
// one residual block per stage, K 32, D 8, strides 2 and 4.
#[test]
fn toy_count_matches_hand_count() {
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let res = conv(32, 8, 3) + conv(8, 32, 1);
    let e1 = conv(1, 16, 4) + conv(16, 32, 3) + res;
    let e2 = conv(32, 16, 4) + conv(16, 32, 3) + res;
    let pre = 2 * conv(32, 8, 1);
    let d1 = conv(8, 32, 3) + res + conv(32, 8, 4);
    let d2 = conv(16, 32, 1) + res + conv(32, 1, 4);
    let label = 11 * 8;
    let projection = 8 * 16;
    let codebooks = 2 * 32 * 8;
    let total = e1 + e2 + pre + d1 + d2 + label + projection + codebooks;
    assert_eq!(total, 36_913);
    assert_eq!(count_parameters(&VQModelConfig::toy()), total);
    assert_eq!(toy(0).params().num_scalars(), total);

    let no_res = VQModelConfig {
        res_blocks_per_stage: 0,
        ..VQModelConfig::toy()
    };
    assert_eq!(count_parameters(&no_res), total - 4 * res);
    let unconditioned = VQModelConfig {
        encoder_conditioning: false,
        ..VQModelConfig::toy()
    };
    assert_eq!(count_parameters(&unconditioned), total - projection);
}

#[test]
fn paper_count_near_reported_size() {
    let n = count_parameters(&VQModelConfig::paper()) as f64;
    assert!((1.017e6..=1.243e6).contains(&n), "{n}");
}

#[test]
fn toy_latent_and_output_shapes() {
    let m = toy(1);
    let img = random_image(16, 1);
    let (zb, zt) = m.encode_hierarchy(&img, label(3)).unwrap();
    assert_eq!(zb.dim(), (8, 8, 8));
    assert_eq!(zt.dim(), (4, 4, 8));
    let out = m.decode_hierarchy(&zt, &zb, label(3)).unwrap();
    assert_eq!(out.shape(), (16, 16));

    let a = m.forward_autoencode(&img, label(3), DEFAULT_BETA).unwrap();
    assert_eq!(a.recon.shape(), (16, 16));
    assert_eq!(a.top.shape(), (4, 4));
    assert_eq!(a.bottom.shape(), (8, 8));
    assert!(a
        .top
        .indices()
        .iter()
        .chain(a.bottom.indices())
        .all(|&i| i < 32));
}

#[test]
fn paper_latent_and_output_shapes() {
    let m = VQModel::new(VQModelConfig::paper(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (zb, zt) = m.encode_hierarchy(&random_image(128, 2), label(5)).unwrap();
    assert_eq!(zb.dim(), (32, 32, 64));
    assert_eq!(zt.dim(), (16, 16, 64));
    let out = m.decode_hierarchy(&zt, &zb, label(5)).unwrap();
    assert_eq!(out.shape(), (128, 128));
}

#[test]
fn indivisible_input_is_configuration_error() {
    let m = toy(3);
    assert!(matches!(
        m.encode_hierarchy(&random_image(18, 3), label(1)),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn inconsistent_latents_are_contract_error() {
    let m = toy(4);
    let top = FeatureMap::new(Array3::zeros((4, 4, 8))).unwrap();
    let bottom = FeatureMap::new(Array3::zeros((6, 6, 8))).unwrap();
    assert!(matches!(
        m.decode_hierarchy(&top, &bottom, label(0)),
        Err(Error::Contract(_))
    ));
    let narrow = FeatureMap::new(Array3::zeros((8, 8, 4))).unwrap();
    assert!(matches!(
        m.decode_hierarchy(&top, &narrow, label(0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn label_embedding_contract() {
    let mut m = toy(5);
    let e3 = m.embed_label(label(3));
    assert_eq!(e3.len(), 8);
    for a in SeverityLabel::all() {
        for b in SeverityLabel::all().filter(|&b| b != a) {
            assert_ne!(m.embed_label(a), m.embed_label(b));
        }
    }
    zero_params(&mut m, "label_embedding");
    assert!(SeverityLabel::all().all(|y| m.embed_label(y) == vec![0.0; 8]));
}

#[test]
fn label_changes_latents_and_output() {
    let m = toy(6);
    let img = random_image(16, 6);
    let (b3, t3) = m.encode_hierarchy(&img, label(3)).unwrap();
    let (b7, t7) = m.encode_hierarchy(&img, label(7)).unwrap();
    assert!(max_abs_diff(b3.data(), b7.data()) > 0.0);
    assert!(max_abs_diff(t3.data(), t7.data()) > 0.0);
    let o3 = m.decode_hierarchy(&t3, &b3, label(3)).unwrap();
    let o3b = m.decode_hierarchy(&t3, &b3, label(9)).unwrap();
    assert!(max_abs_diff(o3.data(), o3b.data()) > 0.0);
}

#[test]
fn zero_inputs_and_zero_head_decode_to_zero() {
    let mut m = toy(7);
    zero_params(&mut m, "d2.up0.");
    let top = FeatureMap::new(Array3::zeros((4, 4, 8))).unwrap();
    let bottom = FeatureMap::new(Array3::zeros((8, 8, 8))).unwrap();
    let out = m.decode_hierarchy(&top, &bottom, label(4)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let m = toy(8);
    let img = random_image(16, 8);
    let a = m.forward_autoencode(&img, label(2), DEFAULT_BETA).unwrap();
    let b = m.forward_autoencode(&img, label(2), DEFAULT_BETA).unwrap();
    assert!(a
        .recon
        .data()
        .iter()
        .zip(b.recon.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.top, b.top);
    assert_eq!(a.bottom, b.bottom);
    assert_eq!(a.codebook_loss.to_bits(), b.codebook_loss.to_bits());
    assert_eq!(toy(8).params().iter().count(), m.params().iter().count());
    for ((_, _, x), (_, _, y)) in toy(8).params().iter().zip(m.params().iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let mut m = toy(9);
    let pairs = toy_pairs(1, 1, 32, 16, 9);
    let (x, r, y) = (&pairs[0].corrupted, &pairs[0].clean, pairs[0].label);
    let mut g = Graph::new();
    let obj = stage1_objective(&mut g, &m, &[x], &[r], &[y], DEFAULT_BETA, None);
    let grads = g.backward(obj.recon);
    let frozen = FrozenAssignments {
        top: obj.forward.top.frozen.clone(),
        bottom: obj.forward.bottom.frozen.clone(),
    };
    let recon_at = |m: &VQModel| {
        let mut g = Graph::new();
        let o = stage1_objective(&mut g, m, &[x], &[r], &[y], DEFAULT_BETA, Some(&frozen));
        g.value(o.recon).item()
    };
    let id = m.params().find("e1.conv1.weight").unwrap();
    let h = 1e-4;
    for e in [0, 17, 300] {
        let a = grads.param(id).unwrap().data()[e];
        let x0 = m.params().get(id).data()[e];
        m.params_mut().get_mut(id).data_mut()[e] = x0 + h;
        let lp = recon_at(&m);
        m.params_mut().get_mut(id).data_mut()[e] = x0 - h;
        let lm = recon_at(&m);
        m.params_mut().get_mut(id).data_mut()[e] = x0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-3, "entry {e}: {a} vs {fd}");
    }
}

#[test]
fn configs_validate() {
    assert!(VQModelConfig::paper().validate().is_ok());
    let bad = VQModelConfig {
        top_stride: 6,
        ..VQModelConfig::toy()
    };
    assert!(matches!(bad.validate(), Err(Error::Configuration(_))));
    let bad = VQModelConfig {
        num_labels: 10,
        ..VQModelConfig::toy()
    };
    assert!(bad.validate().is_err());
}
