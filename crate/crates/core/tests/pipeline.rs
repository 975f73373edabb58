use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmoco::motion_sim::{ImageSlice, SeverityLabel};
use vqmoco::networks::{VQModel, VQModelConfig};
use vqmoco::pipeline::{
    check_compatible, correct_image, evaluate, load_image, load_pair, load_priors, load_vq,
    make_phantom, psnr, read_csv, read_nifti, render_panel, save_image, save_pair, save_priors,
    save_vq, ssim, summarize, tile_origin, write_csv, write_nifti, Checkpoint, CorrectionMode,
    CorrectionOptions, PanelColumn, PanelOptions, PanelSpec, Preset, RunConfig, SEPARATOR,
};
use vqmoco::prior_ar::{PriorConfig, PriorModel, RearrangeMode, TopContext};
use vqmoco::training::PriorPair;
use vqmoco::vq_core::Level;
use vqmoco::Error;

mod common;
use common::toy_pairs;

fn label(y: u8) -> SeverityLabel {
    SeverityLabel::new(y).unwrap()
}

fn toy_vq(seed: u64) -> VQModel {
    VQModel::new(VQModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_priors(k: usize, seed: u64) -> PriorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PriorPair {
        top: PriorModel::new(PriorConfig::toy(Level::Top, k, None), &mut rng).unwrap(),
        bottom: PriorModel::new(
            PriorConfig::toy(Level::Bottom, k, Some(TopContext { k, factor: 2 })),
            &mut rng,
        )
        .unwrap(),
    }
}

fn image(side: usize, seed: u64) -> ImageSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageSlice::unit(Array2::from_shape_fn((side, side), |_| {
        rng.gen_range(0.0..1.0)
    }))
    .unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

// phantoms ---------------------------------------------------------------

#[test]
fn phantom_is_deterministic_and_bounded() {
    let a = make_phantom(32, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = make_phantom(32, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let empty = make_phantom(16, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(empty.data().iter().all(|&v| (0.0..0.3).contains(&v)));
}

#[test]
fn phantom_has_one_plateau_per_shape() {
    let vol = make_phantom(64, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // histogram at 1/1000 resolution; a plateau is a bin holding at least 20 voxels
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in vol.data() {
        *bins.entry((v * 1000.0).round() as i64).or_default() += 1;
    }
    let plateaus = bins.iter().filter(|(&b, &n)| b >= 250 && n >= 20).count();
    assert!(plateaus >= 5, "{plateaus} plateaus: {bins:?}");
}

#[test]
fn small_phantom_rejected() {
    assert!(make_phantom(15, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

// metrics ----------------------------------------------------------------

/// SSIM from summed-area tables and raw moments.
fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let table = |f: &dyn Fn(usize, usize) -> f64| {
        let mut s = Array2::<f64>::zeros((h + 1, w + 1));
        for r in 0..h {
            for c in 0..w {
                s[[r + 1, c + 1]] = f(r, c) + s[[r, c + 1]] + s[[r + 1, c]] - s[[r, c]];
            }
        }
        s
    };
    let sa = table(&|r, c| a[[r, c]]);
    let sb = table(&|r, c| b[[r, c]]);
    let saa = table(&|r, c| a[[r, c]] * a[[r, c]]);
    let sbb = table(&|r, c| b[[r, c]] * b[[r, c]]);
    let sab = table(&|r, c| a[[r, c]] * b[[r, c]]);
    let win = |s: &Array2<f64>, r: usize, c: usize| {
        s[[r + 8, c + 8]] - s[[r, c + 8]] - s[[r + 8, c]] + s[[r, c]]
    };
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = Vec::new();
    for r in 0..=h - 8 {
        for c in 0..=w - 8 {
            let ma = win(&sa, r, c) / 64.0;
            let mb = win(&sb, r, c) / 64.0;
            let va = win(&saa, r, c) / 64.0 - ma * ma;
            let vb = win(&sbb, r, c) / 64.0 - mb * mb;
            let cov = win(&sab, r, c) / 64.0 - ma * mb;
            acc.push(
                (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
            );
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}

#[test]
fn psnr_examples() {
    let a = ImageSlice::unit(Array2::zeros((8, 8))).unwrap();
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let one = ImageSlice::unit(Array2::ones((8, 8))).unwrap();
    assert!(psnr(&a, &one, 1.0).unwrap().abs() < 1e-12);
    let tenth = ImageSlice::unit(Array2::from_elem((8, 8), 0.1)).unwrap();
    assert!((psnr(&a, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let other = ImageSlice::unit(Array2::zeros((8, 9))).unwrap();
    assert!(matches!(psnr(&a, &other, 1.0), Err(Error::Contract(_))));
}

#[test]
fn ssim_examples() {
    let a = image(12, 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let b = image(12, 4);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    assert!((ssim(&a, &b).unwrap() - ssim_oracle(a.data(), b.data())).abs() < 1e-6);

    let c = ImageSlice::unit(Array2::from_elem((10, 10), 0.2)).unwrap();
    let d = ImageSlice::unit(Array2::from_elem((10, 10), 0.7)).unwrap();
    let want = ssim_oracle(c.data(), d.data());
    assert!((ssim(&c, &d).unwrap() - want).abs() < 1e-6);
    assert!((want - (0.28 + 1e-4) / (0.53 + 1e-4)).abs() < 1e-9);

    let small = ImageSlice::unit(Array2::zeros((8, 8))).unwrap();
    assert!(matches!(ssim(&small, &c), Err(Error::Contract(_))));
}

// persistence ------------------------------------------------------------

#[test]
fn vq_checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vq = toy_vq(5);
    save_vq(&vq, 5, &dir.path().join("a")).unwrap();
    let back = load_vq(&dir.path().join("a")).unwrap();
    save_vq(&back, 5, &dir.path().join("b")).unwrap();
    assert_eq!(
        dir_bytes(&dir.path().join("a")),
        dir_bytes(&dir.path().join("b"))
    );

    let img = image(16, 5);
    let x = vq.forward_autoencode(&img, label(4), 0.25).unwrap();
    let y = back.forward_autoencode(&img, label(4), 0.25).unwrap();
    assert!(x
        .recon
        .data()
        .iter()
        .zip(y.recon.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));

    let ck = Checkpoint::load(&dir.path().join("a")).unwrap();
    assert_eq!(ck.manifest.stage, "vq");
    let mut end = 0u64;
    for e in &ck.manifest.arrays {
        assert_eq!(e.byte_offset, end, "{} overlaps or leaves a gap", e.name);
        assert_eq!(e.byte_length, 4 * e.shape.iter().product::<usize>() as u64);
        assert_eq!(e.dtype, "f32le");
        end += e.byte_length;
    }
    assert_eq!(
        std::fs::metadata(dir.path().join("a/blob.bin"))
            .unwrap()
            .len(),
        end
    );
}

#[test]
fn prior_checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    save_priors(&toy_priors(32, 6), 6, &dir.path().join("a")).unwrap();
    let back = load_priors(&dir.path().join("a")).unwrap();
    save_priors(&back, 6, &dir.path().join("b")).unwrap();
    assert_eq!(
        dir_bytes(&dir.path().join("a")),
        dir_bytes(&dir.path().join("b"))
    );
    assert!(load_vq(&dir.path().join("a")).is_err());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vq");
    save_vq(&toy_vq(7), 7, &p).unwrap();
    let blob = std::fs::read(p.join("blob.bin")).unwrap();
    std::fs::write(p.join("blob.bin"), &blob[..blob.len() - 4]).unwrap();
    assert!(load_vq(&p).is_err());
    assert!(load_vq(&dir.path().join("nowhere")).is_err());
}

#[test]
fn pairs_and_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = &toy_pairs(1, 1, 32, 16, 8)[0];
    save_pair(pair, 8, &dir.path().join("p")).unwrap();
    let back = load_pair(&dir.path().join("p")).unwrap();
    assert_eq!(back.label, pair.label);
    for (a, b) in back.clean.data().iter().zip(pair.clean.data()) {
        assert_eq!(*a, (*b as f32) as f64);
    }
    assert_eq!(load_image(&dir.path().join("p")).unwrap(), back.corrupted);

    let img = ImageSlice::unit(Array2::from_elem((8, 8), 0.5)).unwrap();
    save_image(&img, 0, &dir.path().join("i")).unwrap();
    assert_eq!(
        load_image(&dir.path().join("i")).unwrap().data(),
        img.data()
    );
}

#[test]
fn nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vol = make_phantom(16, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let path = dir.path().join("v.nii");
    write_nifti(&path, &vol).unwrap();
    let back = read_nifti(&path).unwrap();
    assert_eq!(back.data().dim(), vol.data().dim());
    for (a, b) in back.data().iter().zip(vol.data()) {
        assert_eq!(*a, (*b as f32) as f64);
    }
    std::fs::write(&path, b"not a volume").unwrap();
    assert!(read_nifti(&path).is_err());
}

// configuration ----------------------------------------------------------

#[test]
fn config_merges_over_preset_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_json(
        r#"{"schema_version": 1, "train": {"seed": 42}}"#,
        Preset::Toy,
    )
    .unwrap();
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.model, VQModelConfig::toy());
    let paper = RunConfig::from_json(r#"{"schema_version": 1}"#, Preset::Paper).unwrap();
    assert_eq!(paper.model, VQModelConfig::paper());
    assert!((paper.train.lr_stage1 - 1e-4).abs() < 1e-15);
    assert!((paper.train.lr_stage2 - 3e-4).abs() < 1e-15);
    assert_eq!(paper.train.epochs, 100);

    assert!(
        RunConfig::from_json(r#"{"schema_version": 1, "train": {"sed": 1}}"#, Preset::Toy).is_err()
    );
    assert!(RunConfig::from_json(r#"{"train": {}}"#, Preset::Toy).is_err());
    assert!(RunConfig::from_json(r#"{"schema_version": 9}"#, Preset::Toy).is_err());
    assert!(RunConfig::from_json(
        r#"{"schema_version": 1, "train": {"crop": 18}}"#,
        Preset::Toy
    )
    .is_err());
}

// inference --------------------------------------------------------------

#[test]
fn correction_is_deterministic_and_clamped() {
    let vq = toy_vq(10);
    let priors = toy_priors(32, 10);
    let img = image(16, 10);
    for mode in [CorrectionMode::Direct, CorrectionMode::Rearranged] {
        let opts = CorrectionOptions {
            mode,
            temperature: 0.0,
            rearrange_mode: RearrangeMode::Regenerate,
        };
        let a = correct_image(
            &vq,
            Some(&priors),
            &img,
            label(5),
            &opts,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = correct_image(
            &vq,
            Some(&priors),
            &img,
            label(5),
            &opts,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
        assert!(a.data().iter().all(|&v| v >= 0.0));
    }
    let rearranged = CorrectionOptions {
        mode: CorrectionMode::Rearranged,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        correct_image(&vq, None, &img, label(5), &rearranged, &mut rng),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn incompatible_priors_name_the_field() {
    let vq = toy_vq(11);
    let err = check_compatible(&vq, &toy_priors(16, 11))
        .unwrap_err()
        .to_string();
    assert!(err.contains("top prior k"), "{err}");
    assert!(check_compatible(&vq, &toy_priors(32, 11)).is_ok());
}

#[test]
fn eval_summary_matches_row_means() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = toy_pairs(5, 1, 32, 16, 12);
    let rows = evaluate(&toy_vq(12), None, &pairs, &CorrectionOptions::default(), 12).unwrap();
    let path = dir.path().join("m.csv");
    write_csv(&rows, &path).unwrap();
    let back = read_csv(&path).unwrap();
    assert_eq!(back.len(), rows.len() + 1);
    let summary = back.last().unwrap();
    assert_eq!(summary.sample, "mean");
    assert_eq!(summary.y, None);
    let body = &back[..rows.len()];
    let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-9;
    let mean = |f: fn(&vqmoco::pipeline::EvalRow) -> f64| {
        body.iter().map(f).sum::<f64>() / body.len() as f64
    };
    assert!(close(mean(|r| r.psnr_corrupted), summary.psnr_corrupted));
    assert!(close(mean(|r| r.ssim_corrupted), summary.ssim_corrupted));
    assert!(close(mean(|r| r.psnr_corrected), summary.psnr_corrected));
    assert!(close(mean(|r| r.ssim_corrected), summary.ssim_corrected));
    assert_eq!(summarize(&rows).sample, "mean");
}

// panels -----------------------------------------------------------------

fn panel_opts() -> PanelOptions {
    PanelOptions {
        crop: 16,
        n_states: 3,
        temperature: 0.0,
        rearrange_mode: RearrangeMode::Regenerate,
    }
}

#[test]
fn panel_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let vq = toy_vq(13);
    let priors = toy_priors(32, 13);
    let vol = make_phantom(32, 5, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let spec = PanelSpec {
        rows: vec![label(2), label(5), label(8)],
        columns: vec![
            PanelColumn::Corrupted,
            PanelColumn::Corrected,
            PanelColumn::CorrectedRearranged,
            PanelColumn::Reference,
        ],
        output: dir.path().join("a.png"),
    };
    let (img, tiles) = render_panel(
        &spec,
        &vq,
        Some(&priors),
        &vol,
        &panel_opts(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(
        img.dimensions(),
        (4 * 16 + 3 * SEPARATOR as u32, 3 * 16 + 2 * SEPARATOR as u32)
    );
    assert_eq!(tiles.len(), 3);
    assert!(tiles.iter().all(|r| r.len() == 4));
    assert_eq!(tile_origin(1, 2, 16), (18, 36));

    vqmoco::pipeline::emit_panel(
        &spec,
        &vq,
        Some(&priors),
        &vol,
        &panel_opts(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let spec_b = PanelSpec {
        output: dir.path().join("b.png"),
        ..spec
    };
    vqmoco::pipeline::emit_panel(
        &spec_b,
        &vq,
        Some(&priors),
        &vol,
        &panel_opts(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.png")).unwrap(),
        std::fs::read(dir.path().join("b.png")).unwrap()
    );
}

#[test]
fn zero_severity_row_is_identity() {
    let vq = toy_vq(14);
    let vol = make_phantom(32, 5, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let spec = PanelSpec {
        rows: vec![label(0)],
        columns: vec![PanelColumn::Corrupted, PanelColumn::Reference],
        output: "unused.png".into(),
    };
    let (img, tiles) = render_panel(
        &spec,
        &vq,
        None,
        &vol,
        &panel_opts(),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    for (a, b) in tiles[0][0].data().iter().zip(tiles[0][1].data()) {
        assert!((a - b).abs() < 1e-6);
    }
    for y in 0..16u32 {
        for x in 0..16u32 {
            assert_eq!(
                img.get_pixel(x, y),
                img.get_pixel(x + 16 + SEPARATOR as u32, y)
            );
        }
    }
}

#[test]
fn panel_columns_parse() {
    assert_eq!(
        "rearranged".parse::<PanelColumn>().unwrap(),
        PanelColumn::CorrectedRearranged
    );
    assert!("sideways".parse::<PanelColumn>().is_err());
    let empty = PanelSpec {
        rows: vec![],
        columns: vec![PanelColumn::Corrupted],
        output: "x.png".into(),
    };
    assert!(empty.validate().is_err());
}
