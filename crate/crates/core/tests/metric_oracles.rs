mod common;

use clnet::map::Map;
use clnet::metrics::{dice_iou, e_measure_max, evaluate, s_measure, weighted_f};
use common::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn bits_map(bits: u32, h: usize, w: usize) -> Map {
    Map::new(h, w, (0..h * w).map(|i| f64::from((bits >> i) & 1)).collect()).unwrap()
}

#[test]
fn dice_iou_exhaustive_3x3() {
    let gt = bits_map(0b010_111_010, 3, 3);
    for bits in 0..512u32 {
        let p = bits_map(bits, 3, 3);
        assert_eq!(dice_iou(&p, &gt).unwrap(), oracles::dice_iou(&p, &gt), "{bits:09b}");
    }
    let empty = Map::zeros(3, 3);
    assert_eq!(dice_iou(&empty, &empty).unwrap(), (1.0, 1.0));
}

/// Random 16x16 pair: a blob-ish ground truth and a noisy prediction.
fn random_pair(seed: u64) -> (Map, Map) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let (cy, cx, r) = (
        rng.random_range(2.0..14.0),
        rng.random_range(2.0..14.0),
        rng.random_range(1.0..6.0f64),
    );
    let kind = seed % 10;
    let gt = Map::from_fn(n, n, |y, x| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        match kind {
            0 => 0.0,
            1 => 1.0,
            _ => f64::from(u8::from(d <= r)),
        }
    });
    let noise: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mix = rng.random_range(0.0..1.0);
    let pred = Map::new(
        n,
        n,
        gt.data()
            .iter()
            .zip(&noise)
            .map(|(g, z)| {
                let v = mix * g + (1.0 - mix) * z;
                (v * 255.0).round() / 255.0
            })
            .collect(),
    )
    .unwrap();
    (pred, gt)
}

#[test]
fn s_measure_matches_oracle() {
    for seed in 0..150 {
        let (p, g) = random_pair(seed);
        let (a, b) = (s_measure(&p, &g).unwrap(), oracles::s_measure(&p, &g));
        assert!((a - b).abs() < TOL, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn weighted_f_matches_oracle() {
    for seed in 0..150 {
        let (p, g) = random_pair(seed);
        let (a, b) = (weighted_f(&p, &g).unwrap(), oracles::weighted_f(&p, &g));
        assert!((a - b).abs() < TOL, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn e_measure_matches_oracle() {
    for seed in 0..150 {
        let (p, g) = random_pair(seed);
        let (a, b) = (e_measure_max(&p, &g).unwrap(), oracles::e_measure_max(&p, &g));
        assert!((a - b).abs() < TOL, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn nearest_foreground_matches_exhaustive_search() {
    for seed in 0..40 {
        let (_, g) = random_pair(seed);
        let bits: Vec<bool> = g.data().iter().map(|&v| v >= 0.5).collect();
        if !bits.iter().any(|&b| b) {
            continue;
        }
        let fast = clnet::metrics::nearest_foreground(&bits, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let (d, ny, nx) = oracles::nearest_fg(&bits, 16, 16, y, x);
                let got = fast[y * 16 + x];
                assert_eq!((got.1, got.2), (ny, nx), "seed {seed} at ({y},{x})");
                assert!((got.0 - d).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn perfect_pair() {
    let (_, g) = random_pair(7);
    let m = evaluate(&g, &g).unwrap();
    let got = (m.dice, m.iou, m.s_measure, m.weighted_f, m.e_measure, m.mae);
    assert!((got.0 - 1.0).abs() < 1e-9 && (got.1 - 1.0).abs() < 1e-9);
    assert!((got.2 - 1.0).abs() < 1e-9, "S {}", got.2);
    assert!((got.3 - 1.0).abs() < 1e-9, "Fw {}", got.3);
    assert!((got.4 - 1.0).abs() < 1e-9, "E {}", got.4);
    assert_eq!(got.5, 0.0);
}

#[test]
fn metrics_stay_in_unit_interval() {
    for seed in 0..60 {
        let (p, g) = random_pair(seed);
        let m = evaluate(&p, &g).unwrap();
        for v in [m.dice, m.iou, m.s_measure, m.weighted_f, m.e_measure, m.mae] {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "seed {seed}: {m:?}");
        }
    }
}
