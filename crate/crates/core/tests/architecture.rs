use clnet::autograd::sigmoid;
use clnet::backbone::{extract_features, make_tiny_backbone, BackboneSpec, FeaturePyramid, NUM_LEVELS};
use clnet::decoder::{CrossLevelEnhance, FeatureAggregate, NUM_STAGES};
use clnet::model::{CeaNet, NetConfig};
use clnet::nn::BN_EPS;
use clnet::params::{Mode, ParamStore, Session};
use clnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every kernel passes each input channel's centre tap through with weight
/// one; biases zero; batch norm at its initial running statistics.
fn identity_weights(store: &mut ParamStore) {
    let names: Vec<String> = store.param_names().map(str::to_string).collect();
    for name in names {
        let t = store.param_mut(&name).unwrap();
        if name.ends_with(".weight") {
            let [o, i, k, _] = t.shape();
            t.data_mut().fill(0.0);
            for oc in 0..o {
                for ic in 0..i {
                    let idx = t.index(oc, ic, k / 2, k / 2);
                    t.data_mut()[idx] = 1.0;
                }
            }
        } else if name.ends_with(".gamma") {
            t.data_mut().fill(1.0);
        } else {
            t.data_mut().fill(0.0);
        }
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
}

#[test]
fn cross_level_hand_trace() {
    let cem = CrossLevelEnhance::new("cem", 1, 1, 1);
    let mut store = ParamStore::new();
    cem.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    identity_weights(&mut store);
    let mut s = Session::new(&store, Mode::Eval);
    let (lo, hi) = (s.input(scalar(2.0)), s.input(scalar(4.0)));
    let out = cem.forward(&mut s, lo, hi).unwrap();
    let got = s.value(out).data()[0];

    let bn = |x: f64| x / (1.0 + BN_EPS).sqrt();
    let (fl, fh) = (2.0, 4.0);
    let fl_en = sigmoid(fh) * fl;
    let fh_en = sigmoid(fl) * fh;
    let fcat = bn(fl_en + fh_en).max(0.0);
    let expected = (fl + fcat) + (fh + fcat);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn aggregation_hand_trace() {
    let fam = FeatureAggregate::new("fam", 1, 1).unwrap();
    let mut store = ParamStore::new();
    fam.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    identity_weights(&mut store);
    let v = 0.7;
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.input(scalar(v));
    let out = fam.forward(&mut s, &[x], (1, 1)).unwrap();
    let got = s.value(out).data()[0];

    let bconv = |x: f64| (x / (1.0 + BN_EPS).sqrt()).max(0.0);
    let cascaded = bconv(v);
    let con = bconv(cascaded);
    let expected = bconv(con * sigmoid(con) + con);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn reference_decoder_shapes() {
    let spec = BackboneSpec::reference();
    let shapes = spec.level_shapes(320, 320);
    assert_eq!(
        shapes,
        [[64, 80, 80], [256, 80, 80], [512, 40, 40], [1024, 20, 20], [2048, 10, 10]]
    );
    let net = CeaNet::from_config(&NetConfig::reference()).unwrap();
    let store = net.init(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels: [Tensor; NUM_LEVELS] = std::array::from_fn(|i| {
        let [c, h, w] = shapes[i];
        Tensor::from_vec([1, c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    });
    let pyramid = FeaturePyramid {
        levels,
        source_size: (320, 320),
    };
    let set = net.forward_all(&store, &pyramid, Mode::Eval).unwrap();
    for side in &set.side {
        assert_eq!(side.shape(), [1, 1, 320, 320]);
        assert!(side.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn tiny_spec_shapes() {
    let (bb, store) = make_tiny_backbone([4, 8, 16, 32, 64], 0).unwrap();
    let p = extract_features(&bb, &store, &Tensor::full([1, 3, 32, 32], 0.5)).unwrap();
    let got: Vec<[usize; 4]> = p.levels.iter().map(Tensor::shape).collect();
    assert_eq!(got, [[1, 4, 8, 8], [1, 8, 8, 8], [1, 16, 4, 4], [1, 32, 2, 2], [1, 64, 1, 1]]);
    assert!(extract_features(&bb, &store, &Tensor::zeros([1, 3, 31, 32])).is_err());
    assert!(extract_features(&bb, &store, &Tensor::zeros([1, 4, 32, 32])).is_err());
}

#[test]
fn backbone_gradient_reaches_the_input() {
    let (bb, store) = make_tiny_backbone([4, 4, 4, 4, 4], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::from_vec([1, 3, 32, 32], (0..3 * 1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.input(img);
    let levels = clnet::backbone::FeatureExtractor::forward(&bb, &mut s, x).unwrap();
    let top = levels[NUM_LEVELS - 1];
    let ones = Tensor::full(s.value(top).shape(), 1.0);
    let g = s.graph.backward(&[(top, ones)]).unwrap();
    assert!(g.get(x).unwrap().max_abs() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_contract_for_multiples_of_32(a in 1usize..4, b in 1usize..4, n in 1usize..3) {
        let (h, w) = (32 * a, 32 * b);
        let cfg = NetConfig { channels: [2, 2, 3, 3, 4], width: 2, ..NetConfig::reference() };
        let net = CeaNet::from_config(&cfg).unwrap();
        let store = net.init(0);
        let img = Tensor::full([n, 3, h, w], 0.3);
        let pyramid = extract_features(net.backbone.as_ref(), &store, &img).unwrap();
        let strides = net.backbone.spec().strides();
        for (lvl, t) in pyramid.levels.iter().enumerate() {
            prop_assert_eq!(t.shape(), [n, cfg.channels[lvl], h / strides[lvl], w / strides[lvl]]);
        }
        let set = net.predict_set(&store, &img, Mode::Eval).unwrap();
        prop_assert_eq!(set.side.len(), NUM_STAGES);
        for side in &set.side {
            prop_assert_eq!(side.shape(), [n, 1, h, w]);
        }
    }
}
