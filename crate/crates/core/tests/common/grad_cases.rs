//! Random finite-difference instances. Each case returns the norm-wise
//! relative error between analytic and numeric gradients.
#![allow(dead_code)]

use std::collections::BTreeMap;

use clnet::decoder::{PredictionSet, NUM_STAGES};
use clnet::loss::{partial_ce, structure_consistency, total_loss, weighted_seg_loss, GuidedMaskBatch, LossWeights};
use clnet::map::{Map, ScribbleMap};
use clnet::model::{CeaNet, NetConfig};
use clnet::params::{Mode, ParamStore, Session};
use clnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central, check, relative_error};

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Map {
    Map::new(h, w, (0..h * w).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random labels with at least one foreground and one background pixel.
pub fn random_scribble(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScribbleMap {
    let mut v: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..3u8)).collect();
    v[0] = 1;
    v[1] = 2;
    ScribbleMap::from_indices(h, w, &v).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map {
    let mut m = Map::new(h, w, (0..h * w).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect()).unwrap();
    m.set(0, 0, 1.0);
    m
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Default weights with a window small enough to matter on tiny maps.
pub fn weights() -> LossWeights {
    LossWeights {
        wmap_radius: 2,
        ..LossWeights::default()
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn pce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (5, 7);
    let z = random_map(&mut rng, h, w, 3.0);
    let s = random_scribble(&mut rng, h, w);
    let g = partial_ce(&z, &s, 1e-7).unwrap().grad;
    let f = |x: &[f64]| partial_ce(&Map::new(h, w, x.to_vec()).unwrap(), &s, 1e-7).unwrap().value;
    check(f, z.data(), g.data(), &all(h * w), 1e-8)
}

pub fn consistency(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (fh, dh) = (8, 3 + seed as usize % 3);
    let full = random_map(&mut rng, fh, fh, 2.0);
    let down = random_map(&mut rng, dh, dh, 2.0);
    let l = structure_consistency(&full, &down).unwrap();
    let x: Vec<f64> = full.data().iter().chain(down.data()).copied().collect();
    let analytic: Vec<f64> = l.grad_full.data().iter().chain(l.grad_down.data()).copied().collect();
    let f = |x: &[f64]| {
        let a = Map::new(fh, fh, x[..fh * fh].to_vec()).unwrap();
        let b = Map::new(dh, dh, x[fh * fh..].to_vec()).unwrap();
        structure_consistency(&a, &b).unwrap().value
    };
    check(f, &x, &analytic, &all(x.len()), 1e-8)
}

pub fn weighted_seg(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let (h, w) = (6, 6);
    let z = random_map(&mut rng, h, w, 3.0);
    let m = random_mask(&mut rng, h, w);
    let wts = weights();
    let g = weighted_seg_loss(&z, &m, &wts).unwrap().grad;
    let f = |x: &[f64]| weighted_seg_loss(&Map::new(h, w, x.to_vec()).unwrap(), &m, &wts).unwrap().value;
    check(f, z.data(), g.data(), &all(h * w), 1e-8)
}

pub fn total(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (n, h, d) = (3, 6, 3);
    let side: [Tensor; NUM_STAGES] = std::array::from_fn(|_| random_tensor(&mut rng, [n, 1, h, h], 2.0));
    let down = random_tensor(&mut rng, [n, 1, d, d], 2.0);
    let scribbles: Vec<ScribbleMap> = (0..n).map(|_| random_scribble(&mut rng, h, h)).collect();
    let masks: Vec<Map> = (0..n).map(|_| random_mask(&mut rng, h, h)).collect();
    let guided = GuidedMaskBatch::new(masks, vec![true, seed.is_multiple_of(2), false]).unwrap();
    let wts = weights();
    let preds = PredictionSet {
        side: side.clone(),
        down: Some(down.clone()),
        is_logits: true,
    };
    let tl = total_loss(&preds, &scribbles, &guided, &wts).unwrap();
    let mut x: Vec<f64> = Vec::new();
    let mut analytic = Vec::new();
    for (t, g) in side.iter().zip(&tl.grad_side) {
        x.extend_from_slice(t.data());
        analytic.extend_from_slice(g.data());
    }
    x.extend_from_slice(down.data());
    analytic.extend_from_slice(tl.grad_down.as_ref().unwrap().data());
    let per = n * h * h;
    let f = |x: &[f64]| {
        let side: [Tensor; NUM_STAGES] =
            std::array::from_fn(|i| Tensor::from_vec([n, 1, h, h], x[i * per..(i + 1) * per].to_vec()).unwrap());
        let down = Tensor::from_vec([n, 1, d, d], x[NUM_STAGES * per..].to_vec()).unwrap();
        let p = PredictionSet {
            side,
            down: Some(down),
            is_logits: true,
        };
        total_loss(&p, &scribbles, &guided, &wts).unwrap().total
    };
    check(f, &x, &analytic, &all(x.len()), 1e-8)
}

/// Training objective of a tiny network (decoder width 4, 32x32 input,
/// batch of two, batch norm in training mode).
struct NetCase {
    net: CeaNet,
    image: Tensor,
    scribbles: Vec<ScribbleMap>,
    guided: GuidedMaskBatch,
    weights: LossWeights,
}

impl NetCase {
    fn new(seed: u64) -> (Self, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetConfig {
            channels: [4, 4, 6, 6, 8],
            width: 4,
            ..NetConfig::reference()
        };
        let net = CeaNet::from_config(&cfg).unwrap();
        let store = net.init(seed);
        let (n, h) = (2, 32);
        let image = random_tensor(&mut rng, [n, 3, h, h], 1.0);
        let scribbles = (0..n).map(|_| random_scribble(&mut rng, h, h)).collect();
        let masks = (0..n).map(|_| random_mask(&mut rng, h, h)).collect();
        let guided = GuidedMaskBatch::new(masks, vec![true, false]).unwrap();
        let case = NetCase {
            net,
            image,
            scribbles,
            guided,
            weights: weights(),
        };
        (case, store)
    }

    fn loss(&self, store: &ParamStore, image: &Tensor) -> f64 {
        let mut s = Session::new(store, Mode::Train);
        let x = s.input(image.clone());
        let sides = self.net.forward(&mut s, x).unwrap();
        let preds = PredictionSet {
            side: sides.map(|v| s.value(v).clone()),
            down: None,
            is_logits: true,
        };
        total_loss(&preds, &self.scribbles, &self.guided, &self.weights).unwrap().total
    }

    fn gradients(&self, store: &ParamStore) -> (BTreeMap<String, Tensor>, Tensor) {
        let mut s = Session::new(store, Mode::Train);
        let x = s.input(self.image.clone());
        let sides = self.net.forward(&mut s, x).unwrap();
        let preds = PredictionSet {
            side: sides.map(|v| s.value(v).clone()),
            down: None,
            is_logits: true,
        };
        let tl = total_loss(&preds, &self.scribbles, &self.guided, &self.weights).unwrap();
        let seeds: Vec<_> = sides.iter().copied().zip(tl.grad_side).collect();
        let grads = s.graph.backward(&seeds).unwrap();
        let input = grads.get(x).unwrap().clone();
        (s.param_grads(&grads), input)
    }
}

/// Probes two entries of every third parameter tensor plus eight input
/// pixels.
pub fn network(seed: u64) -> f64 {
    let (case, store) = NetCase::new(400 + seed);
    let (grads, input_grad) = case.gradients(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.param_names().map(str::to_string).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names.iter().step_by(3) {
        let t = store.param(name).unwrap();
        for _ in 0..2 {
            let i = rng.random_range(0..t.len());
            let mut f = |v: &[f64]| {
                let mut st = store.clone();
                st.param_mut(name).unwrap().data_mut()[i] = v[0];
                case.loss(&st, &case.image)
            };
            numeric.push(central(&mut f, &[t.data()[i]], 0));
            analytic.push(grads[name].data()[i]);
        }
    }
    for _ in 0..8 {
        let i = rng.random_range(0..case.image.len());
        let mut f = |v: &[f64]| {
            let mut img = case.image.clone();
            img.data_mut()[i] = v[0];
            case.loss(&store, &img)
        };
        numeric.push(central(&mut f, &[case.image.data()[i]], 0));
        analytic.push(input_grad.data()[i]);
    }
    relative_error(&analytic, &numeric, 1e-8)
}
