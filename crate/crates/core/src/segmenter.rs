//! Promptable guided segmenter: given an image and a box prompt, return a
//! binary mask.
//!
//! Backends sit behind [`GuidedSegmenter`]. Deterministic stub policies
//! need no weights; external backends are looked up by name in a
//! [`SegmenterRegistry`]. The registry ships one external backend,
//! `tiny`, a small trainable promptable network with the same
//! frozen-prefix / trainable-tail layout as a 12-block ViT encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::loss::partial_ce;
use crate::map::{Map, ScribbleMap};
use crate::nn::Conv2d;
use crate::params::{Mode, ParamStore, Session, Sgd};
use crate::prompting::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StubPolicy {
    /// Mask is exactly the prompt box.
    BoxFill,
    /// Mask is the hidden ground truth.
    Oracle,
    /// Mask is the complement of the hidden ground truth.
    Complement,
    /// Ground truth with each pixel flipped with probability `p`.
    NoisyOracle(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmenterMode {
    Stub(StubPolicy),
    External(String),
}

impl Default for SegmenterMode {
    fn default() -> Self {
        SegmenterMode::Stub(StubPolicy::BoxFill)
    }
}

impl FromStr for SegmenterMode {
    type Err = Error;

    /// `stub:box-fill`, `stub:oracle`, `stub:complement`,
    /// `stub:noisy-oracle:<p>` or `external:<name>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "unknown segmenter `{s}` (expected stub:box-fill, stub:oracle, stub:complement, \
                 stub:noisy-oracle:<p> or external:<name>)"
            ))
        };
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "stub" => {
                let policy = match rest {
                    "box-fill" => StubPolicy::BoxFill,
                    "oracle" => StubPolicy::Oracle,
                    "complement" => StubPolicy::Complement,
                    other => {
                        let p = other
                            .strip_prefix("noisy-oracle:")
                            .and_then(|p| p.parse::<f64>().ok())
                            .filter(|p| (0.0..=1.0).contains(p))
                            .ok_or_else(bad)?;
                        StubPolicy::NoisyOracle(p)
                    }
                };
                Ok(SegmenterMode::Stub(policy))
            }
            "external" if !rest.is_empty() => Ok(SegmenterMode::External(rest.to_string())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SegmenterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmenterMode::Stub(StubPolicy::BoxFill) => f.write_str("stub:box-fill"),
            SegmenterMode::Stub(StubPolicy::Oracle) => f.write_str("stub:oracle"),
            SegmenterMode::Stub(StubPolicy::Complement) => f.write_str("stub:complement"),
            SegmenterMode::Stub(StubPolicy::NoisyOracle(p)) => write!(f, "stub:noisy-oracle:{p}"),
            SegmenterMode::External(name) => write!(f, "external:{name}"),
        }
    }
}

impl Serialize for SegmenterMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmenterMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub encoder_layers: usize,
    pub trainable_tail_layers: usize,
    pub decoder_frozen: bool,
    pub prompt_encoder_frozen: bool,
    pub mode: SegmenterMode,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            encoder_layers: 12,
            trainable_tail_layers: 4,
            decoder_frozen: true,
            prompt_encoder_frozen: true,
            mode: SegmenterMode::default(),
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainable_tail_layers > self.encoder_layers {
            return Err(Error::Config(format!(
                "trainable_tail_layers ({}) exceeds encoder_layers ({})",
                self.trainable_tail_layers, self.encoder_layers
            )));
        }
        Ok(())
    }

    pub fn frozen_layers(&self) -> usize {
        self.encoder_layers - self.trainable_tail_layers.min(self.encoder_layers)
    }
}

/// One mask request. `image` is `[1, 3, H, W]` in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskRequest<'a> {
    pub image: &'a Tensor,
    pub prompt: BBox,
    /// Hidden ground truth, only consulted by oracle-style stubs.
    pub hint: Option<&'a Map>,
    /// Per-sample seed for stochastic policies.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedMask {
    pub mask: Map,
    /// Pre-threshold map; the mask is `logits >= 0`.
    pub logits: Map,
}

/// Reliable-sample batch for segmenter fine-tuning.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneBatch<'a> {
    pub images: &'a [Tensor],
    pub prompts: &'a [BBox],
    pub scribbles: &'a [ScribbleMap],
    pub indicator: &'a [bool],
}

pub trait GuidedSegmenter: Send + Sync {
    fn name(&self) -> String;

    fn generate_mask(&self, req: &MaskRequest) -> Result<GuidedMask>;

    /// Names of the parameters `finetune_step` may change.
    fn trainable_parameters(&self) -> Vec<String>;

    /// One optimisation step on the reliable samples; returns the loss.
    fn finetune_step(&mut self, batch: &FinetuneBatch, lr: f64) -> Result<f64>;

    /// Current weights, if the backend has any.
    fn weights(&self) -> Option<&ParamStore> {
        None
    }

    /// Trainable weights (as params) and their optimiser velocity (as
    /// buffers of the same name).
    fn trainable_state(&self) -> ParamStore {
        ParamStore::new()
    }

    /// Restores a state produced by [`Self::trainable_state`].
    fn load_trainable_state(&mut self, state: &ParamStore) -> Result<()> {
        match state.param_names().next() {
            None => Ok(()),
            Some(name) => Err(Error::Checkpoint(format!(
                "segmenter {} has no trainable parameter {name}",
                self.name()
            ))),
        }
    }
}

fn check_prompt(req: &MaskRequest) -> Result<(usize, usize)> {
    let [n, c, h, w] = req.image.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "segmenter expects a [1, 3, H, W] image, got {:?}",
            req.image.shape()
        )));
    }
    if !req.prompt.is_valid_in(w, h) {
        return Err(Error::InvalidArgument(format!(
            "prompt box {} is empty or outside a {w}x{h} image",
            req.prompt
        )));
    }
    if let Some(hint) = req.hint {
        if hint.dims() != (h, w) {
            return Err(Error::shape("ground-truth hint does not match the image"));
        }
    }
    Ok((h, w))
}

fn logits_for(mask: &Map) -> Map {
    mask.map(|v| if v >= 0.5 { 8.0 } else { -8.0 })
}

#[derive(Clone, Debug)]
pub struct StubSegmenter {
    pub policy: StubPolicy,
}

impl GuidedSegmenter for StubSegmenter {
    fn name(&self) -> String {
        SegmenterMode::Stub(self.policy).to_string()
    }

    fn generate_mask(&self, req: &MaskRequest) -> Result<GuidedMask> {
        let (h, w) = check_prompt(req)?;
        let need_hint = || {
            req.hint.ok_or_else(|| {
                Error::Backend(format!("{} needs the ground-truth mask", self.name()))
            })
        };
        let mask = match self.policy {
            StubPolicy::BoxFill => Map::from_fn(h, w, |y, x| {
                if req.prompt.contains(x, y) {
                    1.0
                } else {
                    0.0
                }
            }),
            StubPolicy::Oracle => need_hint()?.threshold(0.5),
            StubPolicy::Complement => need_hint()?.threshold(0.5).map(|v| 1.0 - v),
            StubPolicy::NoisyOracle(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                let mut mask = need_hint()?.threshold(0.5);
                for v in mask.data_mut() {
                    if rng.random::<f64>() < p {
                        *v = 1.0 - *v;
                    }
                }
                mask
            }
        };
        let logits = logits_for(&mask);
        Ok(GuidedMask { mask, logits })
    }

    fn trainable_parameters(&self) -> Vec<String> {
        Vec::new()
    }

    fn finetune_step(&mut self, _batch: &FinetuneBatch, _lr: f64) -> Result<f64> {
        Ok(0.0)
    }
}

/// Small promptable segmenter: a conv stem and `encoder_layers` residual
/// conv blocks over the image, a box-map prompt encoder, and a two-layer
/// mask decoder. Only the last `trainable_tail_layers` encoder blocks are
/// updated by fine-tuning.
#[derive(Clone, Debug)]
pub struct TinyPromptable {
    config: SegmenterConfig,
    stem: Conv2d,
    blocks: Vec<Conv2d>,
    prompt_embed: Conv2d,
    decoder_hidden: Conv2d,
    decoder_out: Conv2d,
    store: ParamStore,
    optimizer: Sgd,
}

const TINY_WIDTH: usize = 8;

impl TinyPromptable {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = TINY_WIDTH;
        let stem = Conv2d::new("segmenter.encoder.stem", 3, c, 3);
        let blocks = (1..=config.encoder_layers)
            .map(|i| Conv2d::new(format!("segmenter.encoder.block{i:02}"), c, c, 3))
            .collect();
        let prompt_embed = Conv2d::new("segmenter.prompt_encoder.embed", 1, c, 1);
        let decoder_hidden = Conv2d::new("segmenter.decoder.hidden", 2 * c, c, 3);
        let decoder_out = Conv2d::new("segmenter.decoder.out", c, 1, 1);
        let mut seg = TinyPromptable {
            config,
            stem,
            blocks,
            prompt_embed,
            decoder_hidden,
            decoder_out,
            store: ParamStore::new(),
            optimizer: Sgd::new(0.9, 5e-4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        seg.stem.init(&mut store, &mut rng);
        for b in &seg.blocks {
            b.init(&mut store, &mut rng);
        }
        seg.prompt_embed.init(&mut store, &mut rng);
        seg.decoder_hidden.init(&mut store, &mut rng);
        seg.decoder_out.init(&mut store, &mut rng);
        // Residual blocks start small so the stem dominates.
        for b in &seg.blocks {
            for v in store.param_mut(&b.weight_name())?.data_mut() {
                *v *= 0.1;
            }
        }
        seg.store = store;
        Ok(seg)
    }

    fn box_map(prompt: BBox, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros([1, 1, h, w]);
        for y in prompt.y0..prompt.y1 {
            for x in prompt.x0..prompt.x1 {
                let i = t.index(0, 0, y, x);
                t.data_mut()[i] = 1.0;
            }
        }
        t
    }

    fn forward(&self, s: &mut Session, image: &Tensor, prompt: BBox) -> Result<Var> {
        let (h, w) = (image.h(), image.w());
        let x = s.input(image.clone());
        let mut feat = self.stem.forward(s, x)?;
        feat = s.graph.relu(feat);
        for block in &self.blocks {
            let y = block.forward(s, feat)?;
            let y = s.graph.relu(y);
            feat = s.graph.add(feat, y)?;
        }
        let b = s.input(Self::box_map(prompt, h, w));
        let p = self.prompt_embed.forward(s, b)?;
        let joined = s.graph.concat(&[feat, p])?;
        let hidden = self.decoder_hidden.forward(s, joined)?;
        let hidden = s.graph.relu(hidden);
        self.decoder_out.forward(s, hidden)
    }

    fn tail_blocks(&self) -> &[Conv2d] {
        let start = self.config.frozen_layers();
        &self.blocks[start..]
    }
}

impl GuidedSegmenter for TinyPromptable {
    fn name(&self) -> String {
        "external:tiny".into()
    }

    fn generate_mask(&self, req: &MaskRequest) -> Result<GuidedMask> {
        check_prompt(req)?;
        let mut s = Session::new(&self.store, Mode::Eval);
        let out = self.forward(&mut s, req.image, req.prompt)?;
        let logits = Map::from_tensor(s.value(out), 0, 0);
        let mask = logits.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        Ok(GuidedMask { mask, logits })
    }

    fn trainable_parameters(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in self.tail_blocks() {
            names.push(b.weight_name());
            names.push(b.bias_name());
        }
        if !self.config.decoder_frozen {
            for c in [&self.decoder_hidden, &self.decoder_out] {
                names.push(c.weight_name());
                names.push(c.bias_name());
            }
        }
        if !self.config.prompt_encoder_frozen {
            names.push(self.prompt_embed.weight_name());
            names.push(self.prompt_embed.bias_name());
        }
        names
    }

    fn finetune_step(&mut self, batch: &FinetuneBatch, lr: f64) -> Result<f64> {
        let n = batch.images.len();
        if batch.prompts.len() != n || batch.scribbles.len() != n || batch.indicator.len() != n {
            return Err(Error::InvalidArgument("fine-tune batch lengths differ".into()));
        }
        let trainable = self.trainable_parameters();
        let reliable = batch.indicator.iter().filter(|&&o| o).count();
        if reliable == 0 || trainable.is_empty() {
            return Ok(0.0);
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0;
        for k in (0..n).filter(|&k| batch.indicator[k]) {
            let mut s = Session::new(&self.store, Mode::Train);
            let out = self.forward(&mut s, &batch.images[k], batch.prompts[k])?;
            let logits = Map::from_tensor(s.value(out), 0, 0);
            let l = partial_ce(&logits, &batch.scribbles[k], 1e-7)?;
            total += l.value / reliable as f64;
            let seed = l.grad.to_tensor().map(|g| g / reliable as f64);
            let g = s.graph.backward(&[(out, seed)])?;
            for (name, grad) in s.param_grads(&g) {
                if !trainable.contains(&name) {
                    continue;
                }
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        self.optimizer.step(&mut self.store, &grads, lr)?;
        Ok(total)
    }

    fn weights(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }

    fn trainable_state(&self) -> ParamStore {
        let mut state = ParamStore::new();
        for name in self.trainable_parameters() {
            if let Ok(p) = self.store.param(&name) {
                state.insert_param(name.clone(), p.clone());
            }
            if let Some(v) = self.optimizer.velocity().get(&name) {
                state.insert_buffer(name, v.clone());
            }
        }
        state
    }

    fn load_trainable_state(&mut self, state: &ParamStore) -> Result<()> {
        let allowed = self.trainable_parameters();
        for (name, value) in state.params() {
            if !allowed.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "segmenter parameter {name} is not trainable"
                )));
            }
            let slot = self.store.param_mut(name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "segmenter parameter {name} has wrong shape"
                )));
            }
            *slot = value.clone();
        }
        let velocity = state
            .buffers()
            .filter(|(name, _)| allowed.contains(name))
            .map(|(name, v)| (name.clone(), v.clone()))
            .collect();
        self.optimizer.set_velocity(velocity);
        Ok(())
    }
}

/// Foreground probability of a guided mask's logits.
pub fn mask_probability(mask: &GuidedMask) -> Map {
    mask.logits.map(sigmoid)
}

type Factory = Arc<dyn Fn(&SegmenterConfig, u64) -> Result<Box<dyn GuidedSegmenter>> + Send + Sync>;

/// Named external backends.
#[derive(Clone)]
pub struct SegmenterRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for SegmenterRegistry {
    fn default() -> Self {
        let mut r = SegmenterRegistry::empty();
        r.register("tiny", |cfg, seed| {
            Ok(Box::new(TinyPromptable::new(cfg.clone(), seed)?) as Box<dyn GuidedSegmenter>)
        });
        r
    }
}

impl SegmenterRegistry {
    pub fn empty() -> Self {
        SegmenterRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&SegmenterConfig, u64) -> Result<Box<dyn GuidedSegmenter>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn build(&self, config: &SegmenterConfig, seed: u64) -> Result<Box<dyn GuidedSegmenter>> {
        config.validate()?;
        match &config.mode {
            SegmenterMode::Stub(policy) => Ok(Box::new(StubSegmenter { policy: *policy })),
            SegmenterMode::External(name) => {
                let factory = self.factories.get(name).ok_or_else(|| {
                    Error::Backend(format!(
                        "external segmenter `{name}` is not registered (available: {})",
                        self.names().join(", ")
                    ))
                })?;
                factory(config, seed)
            }
        }
    }
}

/// Wraps a backend and counts `generate_mask` calls.
pub struct CountingSegmenter {
    inner: Box<dyn GuidedSegmenter>,
    calls: Arc<AtomicUsize>,
}

impl CountingSegmenter {
    pub fn new(inner: Box<dyn GuidedSegmenter>) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (
            CountingSegmenter {
                inner,
                calls: Arc::clone(&calls),
            },
            calls,
        )
    }
}

impl GuidedSegmenter for CountingSegmenter {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn generate_mask(&self, req: &MaskRequest) -> Result<GuidedMask> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate_mask(req)
    }

    fn trainable_parameters(&self) -> Vec<String> {
        self.inner.trainable_parameters()
    }

    fn finetune_step(&mut self, batch: &FinetuneBatch, lr: f64) -> Result<f64> {
        self.inner.finetune_step(batch, lr)
    }

    fn weights(&self) -> Option<&ParamStore> {
        self.inner.weights()
    }

    fn trainable_state(&self) -> ParamStore {
        self.inner.trainable_state()
    }

    fn load_trainable_state(&mut self, state: &ParamStore) -> Result<()> {
        self.inner.load_trainable_state(state)
    }
}
