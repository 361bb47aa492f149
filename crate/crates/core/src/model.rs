//! The full segmentation network: encoder plus cross-level decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Var};
use crate::backbone::{
    check_input, BackboneSpec, FeatureExtractor, FeaturePyramid, Normalization, TinyBackbone,
    NUM_LEVELS,
};
use crate::decoder::{CeaDecoder, PredictionSet, NUM_STAGES};
use crate::error::Result;
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: [usize; NUM_LEVELS],
    pub width: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl NetConfig {
    pub fn reference() -> Self {
        NetConfig {
            channels: BackboneSpec::reference().channels,
            width: crate::decoder::DEFAULT_WIDTH,
            normalization: Normalization::default(),
        }
    }
}

pub struct CeaNet {
    pub backbone: Box<dyn FeatureExtractor>,
    pub decoder: CeaDecoder,
    pub normalization: Normalization,
}

impl std::fmt::Debug for CeaNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CeaNet")
            .field("backbone", self.backbone.spec())
            .field("width", &self.decoder.width)
            .finish()
    }
}

impl CeaNet {
    pub fn new(backbone: Box<dyn FeatureExtractor>, width: usize, normalization: Normalization) -> Result<Self> {
        let decoder = CeaDecoder::new(backbone.spec(), width)?;
        Ok(CeaNet {
            backbone,
            decoder,
            normalization,
        })
    }

    /// Network on the built-in small encoder.
    pub fn from_config(cfg: &NetConfig) -> Result<Self> {
        let spec = BackboneSpec::new(cfg.channels)?;
        CeaNet::new(Box::new(TinyBackbone::new(spec)), cfg.width, cfg.normalization.clone())
    }

    /// Fresh weights, reproducible from `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.backbone.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Builds the tape for a normalised `[N, 3, H, W]` input and returns
    /// the four side-output logits at the input resolution.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<[Var; NUM_STAGES]> {
        let (h, w) = (s.value(image).h(), s.value(image).w());
        let levels = self.backbone.forward(s, image)?;
        self.decoder.forward(s, &levels, (h, w))
    }

    /// Decoder-only pass over precomputed encoder features.
    pub fn forward_all(&self, store: &ParamStore, pyramid: &FeaturePyramid, mode: Mode) -> Result<PredictionSet> {
        pyramid.validate(self.backbone.spec())?;
        let mut s = Session::new(store, mode);
        let levels: [Var; NUM_LEVELS] = std::array::from_fn(|i| s.input(pyramid.levels[i].clone()));
        let maps = self.decoder.forward(&mut s, &levels, pyramid.source_size)?;
        Ok(PredictionSet {
            side: maps.map(|m| s.value(m).clone()),
            down: None,
            is_logits: true,
        })
    }

    /// Side outputs for a batch of `[0, 1]` images (normalisation applied here).
    pub fn predict_set(&self, store: &ParamStore, image: &Tensor, mode: Mode) -> Result<PredictionSet> {
        check_input(image.shape())?;
        let mut s = Session::new(store, mode);
        let x = s.input(self.normalization.apply(image));
        let maps = self.forward(&mut s, x)?;
        Ok(PredictionSet {
            side: maps.map(|m| s.value(m).clone()),
            down: None,
            is_logits: true,
        })
    }

    /// Foreground probability of the main side output, `[N, 1, H, W]`.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let set = self.predict_set(store, image, Mode::Eval)?;
        Ok(set.side[0].map(sigmoid))
    }
}
