//! Five-level feature extractor contract and a small convolutional encoder
//! that satisfies it for CPU-scale training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 5;

/// Down-sampling factor of each level relative to the input. Levels 1 and 2
/// share stride 4.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 4, 8, 16, 32];

/// Channel counts of a Res2Net-50 style encoder.
pub const RESNET50_CHANNELS: [usize; NUM_LEVELS] = [64, 256, 512, 1024, 2048];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: [usize; NUM_LEVELS],
}

impl BackboneSpec {
    pub fn reference() -> Self {
        BackboneSpec {
            channels: RESNET50_CHANNELS,
        }
    }

    pub fn new(channels: [usize; NUM_LEVELS]) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone channels must be positive, got {channels:?}"
            )));
        }
        Ok(BackboneSpec { channels })
    }

    pub fn num_levels(&self) -> usize {
        NUM_LEVELS
    }

    pub fn strides(&self) -> [usize; NUM_LEVELS] {
        LEVEL_STRIDES
    }

    /// Expected `[C, H, W]` of every level for an `h×w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> [[usize; 3]; NUM_LEVELS] {
        let mut out = [[0; 3]; NUM_LEVELS];
        for (i, shape) in out.iter_mut().enumerate() {
            *shape = [self.channels[i], h / LEVEL_STRIDES[i], w / LEVEL_STRIDES[i]];
        }
        out
    }
}

/// Checks that a `[N, 3, H, W]` image batch can be fed to an encoder.
pub fn check_input(shape: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = shape;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Sizing {
            height: h,
            width: w,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; NUM_LEVELS],
    pub source_size: (usize, usize),
}

impl FeaturePyramid {
    /// Verifies the level shapes against `spec` and the stride rule.
    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let (h, w) = self.source_size;
        let expected = spec.level_shapes(h, w);
        for (i, (level, exp)) in self.levels.iter().zip(expected).enumerate() {
            let s = level.shape();
            if [s[1], s[2], s[3]] != exp {
                return Err(Error::shape(format!(
                    "level {} has shape {:?}, expected {:?}",
                    i + 1,
                    &s[1..],
                    exp
                )));
            }
        }
        Ok(())
    }
}

/// Anything that maps an image batch to five feature levels.
pub trait FeatureExtractor: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng);

    /// Input must already be normalised and pass [`check_input`].
    fn forward(&self, s: &mut Session, image: Var) -> Result<[Var; NUM_LEVELS]>;
}

/// Average pooling to the level's stride followed by a 3×3 conv and ReLU
/// per level. Level 1 pools by 4; levels 3–5 pool by 2 from the previous
/// level; level 2 keeps level 1's resolution.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    spec: BackboneSpec,
    convs: [Conv2d; NUM_LEVELS],
}

impl TinyBackbone {
    pub fn new(spec: BackboneSpec) -> Self {
        let c = spec.channels;
        let inputs = [3, c[0], c[1], c[2], c[3]];
        let convs = std::array::from_fn(|i| {
            Conv2d::new(format!("backbone.level{}", i + 1), inputs[i], c[i], 3)
        });
        TinyBackbone { spec, convs }
    }
}

const POOL_BEFORE: [usize; NUM_LEVELS] = [4, 1, 2, 2, 2];

impl FeatureExtractor for TinyBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for conv in &self.convs {
            conv.init(store, rng);
        }
    }

    fn forward(&self, s: &mut Session, image: Var) -> Result<[Var; NUM_LEVELS]> {
        check_input(s.value(image).shape())?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut x = image;
        for (conv, &pool) in self.convs.iter().zip(&POOL_BEFORE) {
            if pool > 1 {
                x = s.graph.avg_pool(x, pool)?;
            }
            let y = conv.forward(s, x)?;
            x = s.graph.relu(y);
            levels.push(x);
        }
        Ok(levels.try_into().expect("five levels"))
    }
}

/// Builds a [`TinyBackbone`] and its freshly initialised weights.
pub fn make_tiny_backbone(
    channels: [usize; NUM_LEVELS],
    seed: u64,
) -> Result<(TinyBackbone, ParamStore)> {
    let backbone = TinyBackbone::new(BackboneSpec::new(channels)?);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    backbone.init(&mut store, &mut rng);
    Ok((backbone, store))
}

/// Runs `extractor` on a `[N, 3, H, W]` batch outside any training tape.
pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    store: &ParamStore,
    image: &Tensor,
) -> Result<FeaturePyramid> {
    check_input(image.shape())?;
    let mut s = Session::new(store, Mode::Eval);
    let x = s.input(image.clone());
    let vars = extractor.forward(&mut s, x)?;
    let levels = vars.map(|v| s.value(v).clone());
    let pyramid = FeaturePyramid {
        levels,
        source_size: (image.h(), image.w()),
    };
    pyramid.validate(extractor.spec())?;
    Ok(pyramid)
}

/// Per-channel input normalisation applied before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Maps a `[N, 3, H, W]` batch in `[0, 1]` to normalised values.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let mut out = image.clone();
        for b in 0..image.n() {
            for c in 0..3.min(image.c()) {
                let (m, sd) = (self.mean[c], self.std[c]);
                for v in out.plane_mut(b, c) {
                    *v = (*v - m) / sd;
                }
            }
        }
        out
    }
}
