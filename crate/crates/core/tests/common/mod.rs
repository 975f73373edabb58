#![allow(dead_code)]

use ndarray::Array2;

/// Composite reconstruction computed with an explicit O(N⁴) DFT.
///
/// `states[i]` is the already-moved image for state `i`; line `p` of the
/// centered phase-encode axis is frequency `p - h/2`.
pub fn direct_dft_composite(states: &[Array2<f64>], line_state: &[usize]) -> Array2<f64> {
    use std::f64::consts::PI;
    let (h, w) = states[0].dim();
    let mut re = Array2::<f64>::zeros((h, w));
    let mut im = Array2::<f64>::zeros((h, w));
    for (p, &s) in line_state.iter().enumerate() {
        let f = (p as isize - (h / 2) as isize).rem_euclid(h as isize) as usize;
        for l in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let ang = -2.0 * PI * ((f * r) as f64 / h as f64 + (l * c) as f64 / w as f64);
                    sr += states[s][[r, c]] * ang.cos();
                    si += states[s][[r, c]] * ang.sin();
                }
            }
            re[[f, l]] = sr;
            im[[f, l]] = si;
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for k in 0..h {
            for l in 0..w {
                let ang = 2.0 * PI * ((k * r) as f64 / h as f64 + (l * c) as f64 / w as f64);
                acc += re[[k, l]] * ang.cos() - im[[k, l]] * ang.sin();
            }
        }
        (acc / (h * w) as f64).max(0.0)
    })
}

/// Shift rows down by `k`, zero-filling the vacated rows.
pub fn shift_rows(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| if r >= k { a[[r - k, c]] } else { 0.0 })
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqmoco::motion_sim::{make_training_pair, TrainingPair};
use vqmoco::pipeline::make_phantom;

/// `n` simulated pairs cropped from `volumes` phantoms of side `size`.
pub fn toy_pairs(
    n: usize,
    volumes: usize,
    size: usize,
    crop: usize,
    seed: u64,
) -> Vec<TrainingPair> {
    let vols: Vec<_> = (0..volumes)
        .map(|i| make_phantom(size, 5, &mut ChaCha8Rng::seed_from_u64(seed + i as u64)).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| make_training_pair(&vols[i % volumes], crop, 3, &mut rng).unwrap())
        .collect()
}

/// Index of the nearest row by exhaustive scan, first minimum wins.
pub fn brute_nearest(v: &[f64], rows: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, r) in rows.iter().enumerate() {
        let d: f64 = v.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}
