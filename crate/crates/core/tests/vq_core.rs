use ndarray::{array, Array2, Array3};
use proptest::prelude::*;

use vqmoco::vq_core::{
    lookup, nearest_code, quantize_grid, quantize_var, straight_through_compose, vq_losses,
    CodeGrid, Codebook, FeatureMap, Level,
};
use vqmoco::Error;
use vqmoco_autodiff::{Graph, Tensor};

mod common;
use common::brute_nearest;

fn cb(rows: Array2<f64>) -> Codebook {
    Codebook::new(rows, Level::Bottom).unwrap()
}

#[test]
fn nearest_code_examples() {
    let c = cb(array![[0.0, 0.0], [1.0, 1.0]]);
    let (i, d) = nearest_code(&[0.9, 0.8], &c).unwrap();
    assert_eq!(i, 1);
    assert!((d - 0.05).abs() < 1e-12);
    assert_eq!(nearest_code(&[0.5, 0.5], &c).unwrap(), (0, 0.5));

    let rows = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
    let c = cb(rows.clone());
    assert_eq!(
        nearest_code(rows.row(3).as_slice().unwrap(), &c).unwrap(),
        (3, 0.0)
    );
    assert!(matches!(
        nearest_code(&[0.0, 0.0], &c),
        Err(Error::Contract(_))
    ));
}

#[test]
fn codebook_rows_are_fixed_points() {
    let rows = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64) - 0.3 * j as f64);
    let c = cb(rows.clone());
    let idx = array![[4, 0, 2], [1, 1, 3]];
    let z = Array3::from_shape_fn((2, 3, 2), |(r, q, j)| rows[[idx[[r, q]], j]]);
    let (g, zq) = quantize_grid(&FeatureMap::new(z.clone()).unwrap(), &c).unwrap();
    assert_eq!(g.indices(), &idx);
    assert_eq!(zq.data(), &z);
}

#[test]
fn lookup_direct_indexing() {
    let c = cb(array![[1.0, 2.0], [3.0, 4.0]]);
    let g = CodeGrid::new(array![[0, 1], [1, 0]], Level::Bottom, 2).unwrap();
    let out = lookup(&g, &c).unwrap();
    let want = array![[[1.0, 2.0], [3.0, 4.0]], [[3.0, 4.0], [1.0, 2.0]]];
    assert_eq!(out.data(), &want);

    let constant = CodeGrid::new(Array2::from_elem((3, 3), 1), Level::Bottom, 2).unwrap();
    for v in lookup(&constant, &c).unwrap().data().rows() {
        assert_eq!(v.to_vec(), vec![3.0, 4.0]);
    }

    let wrong_k = CodeGrid::new(Array2::from_elem((2, 2), 2), Level::Bottom, 3).unwrap();
    assert!(matches!(lookup(&wrong_k, &c), Err(Error::Contract(_))));
}

#[test]
fn grid_rejects_out_of_range_index() {
    assert!(CodeGrid::new(array![[0, 4]], Level::Top, 4).is_err());
}

#[test]
fn vq_loss_shape_mismatch_is_contract_error() {
    let a = FeatureMap::new(Array3::zeros((2, 2, 3))).unwrap();
    let b = FeatureMap::new(Array3::zeros((2, 3, 3))).unwrap();
    assert!(matches!(vq_losses(&a, &b, 0.25), Err(Error::Contract(_))));
    assert!(matches!(
        straight_through_compose(&a, &b),
        Err(Error::Contract(_))
    ));
}

#[test]
fn straight_through_forward_is_zq() {
    let z = FeatureMap::new(Array3::from_shape_fn((2, 2, 2), |(a, b, c)| {
        (a + 2 * b + 3 * c) as f64 * 0.1
    }))
    .unwrap();
    let zq = FeatureMap::new(Array3::from_elem((2, 2, 2), 0.5)).unwrap();
    assert_eq!(straight_through_compose(&z, &zq).unwrap(), zq);
}

/// L = sum(out²) through the quantizer on a 2×2×2 map: the pass-through
/// gradient is 2·zq, and matches central differences of the frozen
/// surrogate L(z + zq(z0) − z0).
#[test]
fn straight_through_gradient_matches_finite_differences() {
    let table = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, -1.0, -0.5, 0.8]);
    let z0 = Tensor::new(
        &[1, 2, 2, 2],
        vec![0.9, 0.1, -0.4, 0.3, -0.7, 0.2, 0.6, 0.05],
    );

    let build = |z: Tensor, frozen| {
        let mut g = Graph::new();
        let zv = g.input(z);
        let c = g.constant(table.clone());
        let q = quantize_var(&mut g, zv, c, 0.25, frozen);
        let sq = g.square(q.out);
        let l = g.sum(sq);
        (g, zv, l, q)
    };
    let (g, zv, l, q) = build(z0.clone(), None);
    let grads = g.backward(l);
    let analytic = grads.wrt(zv).unwrap().clone();
    let zq = g.value(q.out).clone();
    for (a, b) in analytic.data().iter().zip(zq.data()) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }

    let h = 1e-6;
    for e in 0..z0.len() {
        let mut plus = z0.clone();
        plus.data_mut()[e] += h;
        let mut minus = z0.clone();
        minus.data_mut()[e] -= h;
        let f = |z: Tensor| {
            let (g, _, l, _) = build(z, Some(&q.frozen));
            g.value(l).item()
        };
        let fd = (f(plus) - f(minus)) / (2.0 * h);
        let a = analytic.data()[e];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-4, "entry {e}: {a} vs {fd}");
    }
}

#[test]
fn straight_through_sends_no_codebook_gradient() {
    let mut g = Graph::new();
    let z = g.input(Tensor::new(&[1, 2, 1, 1], vec![0.4, 0.6]));
    let c = g.input(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]));
    let q = quantize_var(&mut g, z, c, 0.25, None);
    let sq = g.square(q.out);
    let l = g.sum(sq);
    let grads = g.backward(l);
    assert!(grads
        .wrt(c)
        .map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn identical_inputs_give_plain_gradient() {
    let table = Tensor::new(&[2, 2], vec![0.25, -0.5, 1.0, 1.0]);
    let mut g = Graph::new();
    let z = g.input(Tensor::new(&[1, 2, 1, 1], vec![0.25, -0.5]));
    let c = g.constant(table);
    let q = quantize_var(&mut g, z, c, 0.25, None);
    let sq = g.square(q.out);
    let l = g.sum(sq);
    let grads = g.backward(l);
    assert_eq!(grads.wrt(z).unwrap().data(), &[0.5, -1.0]);
}

fn arb_instance() -> impl Strategy<Value = (Array3<f64>, Array2<f64>)> {
    (1usize..=8, 1usize..=8, 2usize..=64, 1usize..=6).prop_flat_map(|(h, w, k, d)| {
        (
            proptest::collection::vec(-2.0f64..2.0, h * w * d),
            proptest::collection::vec(-2.0f64..2.0, k * d),
        )
            .prop_map(move |(z, c)| {
                (
                    Array3::from_shape_vec((h, w, d), z).unwrap(),
                    Array2::from_shape_vec((k, d), c).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantize_matches_exhaustive_scan((z, rows) in arb_instance()) {
        let c = cb(rows.clone());
        let (g, zq) = quantize_grid(&FeatureMap::new(z.clone()).unwrap(), &c).unwrap();
        let table: Vec<Vec<f64>> = rows.outer_iter().map(|r| r.to_vec()).collect();
        let (h, w, d) = z.dim();
        for r in 0..h {
            for q in 0..w {
                let v: Vec<f64> = (0..d).map(|j| z[[r, q, j]]).collect();
                let i = g.indices()[[r, q]];
                prop_assert_eq!(i, brute_nearest(&v, &table));
                let (_, best) = nearest_code(&v, &c).unwrap();
                for row in &table {
                    let dist: f64 = v.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                    prop_assert!(best <= dist);
                }
            }
        }
        let (g2, zq2) = quantize_grid(&zq, &c).unwrap();
        prop_assert_eq!(g2.indices(), g.indices());
        prop_assert_eq!(zq2.data(), zq.data());
        let looked = lookup(&g, &c).unwrap();
        prop_assert_eq!(looked.data(), zq.data());
    }

    #[test]
    fn loss_symmetry((z, rows) in arb_instance(), beta in 0.01f64..2.0) {
        let c = cb(rows);
        let fm = FeatureMap::new(z).unwrap();
        let (_, zq) = quantize_grid(&fm, &c).unwrap();
        let (l_cb, l_cm) = vq_losses(&fm, &zq, beta).unwrap();
        prop_assert!((l_cb - l_cm / beta).abs() <= 1e-12 * l_cb.max(1.0));
    }
}
