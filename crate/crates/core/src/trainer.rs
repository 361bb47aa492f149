//! The collaborative training loop, learning-rate schedule, checkpoints
//! and inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::config::{MaskMode, TrainConfig};
use crate::data::{derive_seed, sample_crop, CropWindow, Sample};
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::loss::{total_loss, GuidedMaskBatch};
use crate::map::{Map, ScribbleMap};
use crate::metrics::{evaluate_dataset, MetricReport};
use crate::model::CeaNet;
use crate::params::{apply_batch_stats, Mode, ParamStore, Session, Sgd};
use crate::prompting::{make_prompt, mask_scribble_agreement, scale_margin, BBox, Prompt};
use crate::segmenter::{FinetuneBatch, GuidedSegmenter, MaskRequest, SegmenterRegistry};
use crate::tensor::{self, Tensor};

/// Triangular schedule: linear from `lr_min` to `lr_max` over the first
/// `round(warmup_fraction · total_steps)` steps, then linear back to
/// `lr_min` at step `total_steps - 1`. Schedules shorter than three steps
/// stay at `lr_max`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside a schedule of {total_steps} steps"
        )));
    }
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if total_steps < 3 {
        return Ok(hi);
    }
    let last = total_steps - 1;
    let peak = ((cfg.warmup_fraction * total_steps as f64).round() as usize).clamp(1, last - 1);
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    Ok(if step <= peak {
        lerp(lo, hi, step as f64 / peak as f64)
    } else {
        lerp(hi, lo, (step - peak) as f64 / (last - peak) as f64)
    })
}

/// One training step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Scribble term over all stages, stage-weighted.
    pub pce: f64,
    /// Guided-mask term over all stages, α- and stage-weighted.
    pub seg: f64,
    pub ss: f64,
    pub total: f64,
    pub reliable_fraction: f64,
    pub segmenter_loss: f64,
}

pub const HISTORY_HEADER: &str =
    "step,epoch,lr,pce,seg,ss,total,reliable_fraction,segmenter_loss";

impl StepLog {
    /// CSV row; floats use the shortest representation that parses back
    /// exactly.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.pce,
            self.seg,
            self.ss,
            self.total,
            self.reliable_fraction,
            self.segmenter_loss
        )
    }
}

pub fn history_csv(history: &[StepLog]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for log in history {
        s.push_str(&log.csv_row());
        s.push('\n');
    }
    s
}

/// A prepared batch at the training resolution.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, S, S]` in `[0, 1]`.
    pub images: Tensor,
    pub scribbles: Vec<ScribbleMap>,
    /// Ground truth, only handed to oracle-style segmenters.
    pub hints: Vec<Option<Map>>,
    /// Frozen guided masks (offline mode).
    pub offline_masks: Option<Vec<Map>>,
    /// Per-sample seeds for stochastic segmenters.
    pub seeds: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.scribbles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scribbles.is_empty()
    }
}

/// Training samples resized to the training resolution.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub samples: Vec<Sample>,
}

impl TrainSet {
    pub fn new(samples: &[Sample], size: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let samples = samples
            .iter()
            .map(|s| {
                let r = s.resized(size);
                let scribble = r.scribble.as_ref().ok_or_else(|| {
                    Error::Data(format!("training sample `{}` has no scribble", s.id))
                })?;
                scribble
                    .validate_for_training()
                    .map_err(|e| Error::Data(format!("sample `{}`: {e}", s.id)))?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: CeaNet,
    pub store: ParamStore,
    optimizer: Sgd,
    segmenter: Box<dyn GuidedSegmenter>,
    step: usize,
    epoch: usize,
    offline_masks: Option<Vec<Map>>,
    history: Vec<StepLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, registry: &SegmenterRegistry) -> Result<Self> {
        let segmenter = registry.build(&cfg.segmenter, derive_seed(cfg.seed, 3, 0))?;
        Self::with_segmenter(cfg, segmenter)
    }

    pub fn with_segmenter(cfg: TrainConfig, segmenter: Box<dyn GuidedSegmenter>) -> Result<Self> {
        cfg.validate()?;
        let net = CeaNet::from_config(&cfg.model)?;
        let store = net.init(cfg.seed);
        let optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            net,
            store,
            optimizer,
            segmenter,
            step: 0,
            epoch: 0,
            offline_masks: None,
            history: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint; the segmenter is rebuilt from
    /// the checkpoint's configuration and then given its saved tail.
    pub fn resume(ckpt: &Checkpoint, registry: &SegmenterRegistry) -> Result<Self> {
        let cfg = ckpt.config.clone();
        let segmenter = registry.build(&cfg.segmenter, derive_seed(cfg.seed, 3, 0))?;
        let mut t = Self::with_segmenter(cfg, segmenter)?;
        t.load_checkpoint(ckpt)?;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn segmenter(&self) -> &dyn GuidedSegmenter {
        self.segmenter.as_ref()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.cfg.epochs * self.steps_per_epoch(n)
    }

    fn margin(&self) -> usize {
        scale_margin(self.cfg.margin_px, self.cfg.image_size)
    }

    fn collaborating(&self, epoch: usize) -> bool {
        epoch >= self.cfg.collab_start_epoch
    }

    /// One step of the collaborative loop on a prepared batch.
    pub fn train_step(&mut self, batch: &Batch, total_steps: usize, collaborate: bool) -> Result<StepLog> {
        let n = batch.len();
        let [bn, c, h, w] = batch.images.shape();
        if n == 0 || bn != n || c != 3 || batch.hints.len() != n || batch.seeds.len() != n {
            return Err(Error::InvalidArgument("inconsistent batch".into()));
        }
        let lr = lr_at(self.step, total_steps, &self.cfg)?;
        let x = self.net.normalization.apply(&batch.images);
        let d = self.cfg.down_size();
        let xd = tensor::resize(&x, d, d);

        let mut s = Session::new(&self.store, Mode::Train);
        let xv = s.input(x);
        let sides = self.net.forward(&mut s, xv)?;
        let xdv = s.input(xd);
        let downs = self.net.forward(&mut s, xdv)?;
        let preds = PredictionSet {
            side: sides.map(|v| s.value(v).clone()),
            down: Some(s.value(downs[0]).clone()),
            is_logits: true,
        };

        let mut prompts: Vec<Option<Prompt>> = vec![None; n];
        let guided = if collaborate {
            let mut failures = Vec::new();
            for (k, slot) in prompts.iter_mut().enumerate() {
                let prob = Map::from_tensor(&preds.side[0], k, 0).map(sigmoid);
                match make_prompt(
                    &batch.scribbles[k],
                    &prob,
                    self.margin(),
                    self.cfg.prompt_source,
                    self.cfg.threshold,
                ) {
                    Ok(p) => *slot = Some(p),
                    Err(e) => failures.push(e.to_string()),
                }
            }
            if failures.len() == n {
                return Err(Error::Data(format!(
                    "prompt construction failed for every sample: {}",
                    failures.join("; ")
                )));
            }
            let mut masks = Vec::with_capacity(n);
            let mut indicator = Vec::with_capacity(n);
            for (k, prompt) in prompts.iter().enumerate() {
                let Some(prompt) = prompt else {
                    masks.push(Map::zeros(h, w));
                    indicator.push(false);
                    continue;
                };
                let mask = match &batch.offline_masks {
                    Some(m) => m[k].clone(),
                    None => {
                        let image = batch.images.select(k);
                        self.segmenter
                            .generate_mask(&MaskRequest {
                                image: &image,
                                prompt: prompt.bbox,
                                hint: batch.hints[k].as_ref(),
                                seed: batch.seeds[k],
                            })?
                            .mask
                    }
                };
                let agreement = mask_scribble_agreement(&mask, &batch.scribbles[k])?;
                indicator.push(agreement >= self.cfg.tau);
                masks.push(mask);
            }
            GuidedMaskBatch::new(masks, indicator)?
        } else {
            GuidedMaskBatch::unreliable(n, h, w)
        };

        let loss = total_loss(&preds, &batch.scribbles, &guided, &self.cfg.loss)?;
        let mut seeds: Vec<(crate::autograd::Var, Tensor)> = sides
            .iter()
            .zip(loss.grad_side.iter())
            .map(|(&v, g)| (v, g.clone()))
            .collect();
        if let Some(gd) = &loss.grad_down {
            seeds.push((downs[0], gd.clone()));
        }
        let grads = s.graph.backward(&seeds)?;
        let param_grads = s.param_grads(&grads);
        let stats = s.batch_stats().to_vec();
        drop(s);
        self.optimizer.step(&mut self.store, &param_grads, lr)?;
        apply_batch_stats(&mut self.store, &stats)?;

        let mut segmenter_loss = 0.0;
        if collaborate && batch.offline_masks.is_none() {
            let images: Vec<Tensor> = (0..n).map(|k| batch.images.select(k)).collect();
            let boxes: Vec<BBox> = prompts
                .iter()
                .map(|p| p.map_or(BBox::new(0, 0, w, h), |p| p.bbox))
                .collect();
            segmenter_loss = self.segmenter.finetune_step(
                &FinetuneBatch {
                    images: &images,
                    prompts: &boxes,
                    scribbles: &batch.scribbles,
                    indicator: &guided.indicator,
                },
                lr,
            )?;
        }

        let c = &loss.components;
        let log = StepLog {
            step: self.step,
            epoch: self.epoch,
            lr,
            pce: c.weighted_pce(&self.cfg.loss),
            seg: c.weighted_seg(&self.cfg.loss),
            ss: c.ss,
            total: loss.total,
            reliable_fraction: guided.reliable_fraction(),
            segmenter_loss,
        };
        self.step += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    /// Guided masks for every training sample from the current network,
    /// computed without augmentation.
    pub fn compute_offline_masks(&self, data: &TrainSet) -> Result<Vec<Map>> {
        data.samples
            .iter()
            .enumerate()
            .map(|(k, sample)| {
                let scribble = sample.scribble.as_ref().expect("validated training sample");
                let logits = self.net.predict_set(&self.store, &sample.image, Mode::Eval)?;
                let prob = Map::from_tensor(logits.main(), 0, 0).map(sigmoid);
                let prompt = make_prompt(
                    scribble,
                    &prob,
                    self.margin(),
                    self.cfg.prompt_source,
                    self.cfg.threshold,
                )?;
                Ok(self
                    .segmenter
                    .generate_mask(&MaskRequest {
                        image: &sample.image,
                        prompt: prompt.bbox,
                        hint: sample.gt.as_ref(),
                        seed: derive_seed(self.cfg.seed, 4, k as u64),
                    })?
                    .mask)
            })
            .collect()
    }

    fn make_batch(&self, data: &TrainSet, indices: &[usize], epoch: usize) -> Result<Batch> {
        let stream = derive_seed(self.cfg.seed, 2, epoch as u64);
        let range = (self.cfg.crop_ratio[0], self.cfg.crop_ratio[1]);
        let mut images = Vec::with_capacity(indices.len());
        let mut scribbles = Vec::with_capacity(indices.len());
        let mut hints = Vec::with_capacity(indices.len());
        let mut offline = self.offline_masks.as_ref().map(|_| Vec::new());
        let mut seeds = Vec::with_capacity(indices.len());
        for &idx in indices {
            let sample = &data.samples[idx];
            let scribble = sample.scribble.as_ref().expect("validated training sample");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, idx as u64, 0));
            let window: CropWindow = sample_crop(scribble, range, &mut rng);
            images.push(window.apply_image(&sample.image));
            scribbles.push(window.apply_scribble(scribble));
            hints.push(sample.gt.as_ref().map(|g| window.apply_mask(g)));
            if let (Some(out), Some(cache)) = (offline.as_mut(), self.offline_masks.as_ref()) {
                out.push(window.apply_mask(&cache[idx]));
            }
            seeds.push(derive_seed(stream, idx as u64, 1));
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            scribbles,
            hints,
            offline_masks: offline,
            seeds,
        })
    }

    /// Runs the next epoch; returns its step logs.
    pub fn run_epoch(&mut self, data: &TrainSet) -> Result<Vec<StepLog>> {
        if self.epoch >= self.cfg.epochs {
            return Ok(Vec::new());
        }
        let epoch = self.epoch;
        let total = self.total_steps(data.len());
        let collaborate = self.collaborating(epoch);
        if collaborate && self.cfg.mask_mode == MaskMode::Offline && self.offline_masks.is_none() {
            self.offline_masks = Some(self.compute_offline_masks(data)?);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1, epoch as u64)));
        let mut logs = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.make_batch(data, chunk, epoch)?;
            let batch = if collaborate {
                batch
            } else {
                Batch {
                    offline_masks: None,
                    ..batch
                }
            };
            logs.push(self.train_step(&batch, total, collaborate)?);
        }
        self.epoch += 1;
        Ok(logs)
    }

    /// Trains the remaining epochs. With `out`, writes `history.csv`,
    /// `last.ckpt` and `epoch_NNNN.ckpt` every `checkpoint_every` epochs.
    pub fn fit(&mut self, data: &TrainSet, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.cfg.epochs {
            self.run_epoch(data)?;
            log::info!(
                "epoch {}/{}: loss {:.5}",
                self.epoch,
                self.cfg.epochs,
                self.history.last().map_or(f64::NAN, |l| l.total)
            );
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.epoch.is_multiple_of(every) {
                    let path = dir.join(format!("epoch_{:04}.ckpt", self.epoch));
                    self.checkpoint().save(&path)?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("last.ckpt"))?;
            let path = dir.join("history.csv");
            fs::write(&path, history_csv(&self.history)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = BTreeMap::new();
        groups.insert("backbone".to_string(), self.store.subset("backbone."));
        groups.insert("decoder".to_string(), self.store.subset("decoder."));
        groups.insert("segmenter_tail".to_string(), self.segmenter.trainable_state());
        let mut opt = ParamStore::new();
        for (name, v) in self.optimizer.velocity() {
            opt.insert_buffer(name.clone(), v.clone());
        }
        groups.insert("optimizer".to_string(), opt);
        if let Some(masks) = &self.offline_masks {
            let mut m = ParamStore::new();
            for (k, mask) in masks.iter().enumerate() {
                m.insert_buffer(format!("mask.{k:06}"), mask.to_tensor());
            }
            groups.insert("offline_masks".to_string(), m);
        }
        Checkpoint {
            step: self.step,
            epoch: self.epoch,
            config: self.cfg.clone(),
            groups,
            history: self.history.clone(),
        }
    }

    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut store = ParamStore::new();
        for group in ["backbone", "decoder"] {
            store.merge(ckpt.group(group)?.clone());
        }
        check_same_layout(&self.store, &store)?;
        self.store = store;
        if let Ok(tail) = ckpt.group("segmenter_tail") {
            self.segmenter.load_trainable_state(tail)?;
        }
        let velocity = ckpt
            .group("optimizer")?
            .buffers()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<BTreeMap<_, _>>();
        for (name, v) in &velocity {
            if self.store.param(name).ok().map(|p| p.shape()) != Some(v.shape()) {
                return Err(Error::Checkpoint(format!("optimizer state for unknown `{name}`")));
            }
        }
        self.optimizer.set_velocity(velocity);
        self.offline_masks = ckpt.groups.get("offline_masks").map(|g| g.buffers().map(|(_, t)| Map::from_tensor(t, 0, 0)).collect());
        self.step = ckpt.step;
        self.epoch = ckpt.epoch;
        self.history = ckpt.history.clone();
        Ok(())
    }

    /// Foreground probability of the main output for one `[1, 3, H, W]`
    /// image. The guided segmenter is not involved.
    pub fn predict(&self, image: &Tensor) -> Result<Map> {
        predict(&self.net, &self.store, image)
    }

    /// Metrics of the network on samples with ground truth, each evaluated
    /// at the training resolution.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricReport> {
        evaluate_samples(&self.net, &self.store, samples, self.cfg.image_size)
    }
}

fn check_same_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in expected.params() {
        match got.param(name) {
            Ok(g) if g.shape() == t.shape() => {}
            Ok(_) => return Err(Error::Checkpoint(format!("parameter `{name}` has the wrong shape"))),
            Err(_) => return Err(Error::Checkpoint(format!("parameter `{name}` is missing"))),
        }
    }
    for (name, t) in expected.buffers() {
        match got.buffer(name) {
            Ok(g) if g.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("buffer `{name}` is missing or malformed"))),
        }
    }
    if got.params().count() != expected.params().count() || got.buffers().count() != expected.buffers().count() {
        return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
    }
    Ok(())
}

/// `sigmoid(S1)` at the image's resolution (which must be a multiple of 32).
pub fn predict(net: &CeaNet, store: &ParamStore, image: &Tensor) -> Result<Map> {
    if image.n() != 1 {
        return Err(Error::shape("predict takes one image"));
    }
    Ok(Map::from_tensor(&net.predict(store, image)?, 0, 0))
}

/// Resizes to `size`, predicts, and resizes the probability back.
pub fn predict_any_size(net: &CeaNet, store: &ParamStore, image: &Tensor, size: usize) -> Result<Map> {
    let (h, w) = (image.h(), image.w());
    let prob = predict(net, store, &tensor::resize(image, size, size))?;
    Ok(prob.resize_bilinear(h, w).map(|v| v.clamp(0.0, 1.0)))
}

pub fn evaluate_samples(net: &CeaNet, store: &ParamStore, samples: &[Sample], size: usize) -> Result<MetricReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        let Some(gt) = &s.gt else { continue };
        let r = s.resized(size);
        preds.push(predict(net, store, &r.image)?);
        gts.push(r.gt.unwrap_or_else(|| gt.clone()));
    }
    evaluate_dataset(
        samples
            .iter()
            .filter(|s| s.gt.is_some())
            .map(|s| s.id.clone())
            .zip(preds.iter().zip(&gts))
            .map(|(id, (p, g))| (id, p, g)),
    )
}

const MAGIC: &[u8; 8] = b"CLNETCK1";
/// Largest header accepted when reading.
const MAX_HEADER: u64 = 64 << 20;

/// Saved training state: weight groups, optimiser state, counters, the
/// configuration (which also fixes every random stream) and the history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub epoch: usize,
    pub config: TrainConfig,
    pub groups: BTreeMap<String, ParamStore>,
    pub history: Vec<StepLog>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    buffer: bool,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: usize,
    epoch: usize,
    config: String,
    groups: Vec<String>,
    tensors: Vec<TensorEntry>,
    history: Vec<StepLog>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing weight group `{name}`")))
    }

    /// `CLNETCK1`, header length (u64 LE), JSON header, then every tensor
    /// as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (group, store) in &self.groups {
            let entries = store
                .params()
                .map(|(n, t)| (n, t, false))
                .chain(store.buffers().map(|(n, t)| (n, t, true)));
            for (name, t, buffer) in entries {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.clone(),
                    buffer,
                    shape: t.shape(),
                    offset,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.len();
            }
        }
        let header = Header {
            version: 1,
            step: self.step,
            epoch: self.epoch,
            config: self.config.to_toml_string()?,
            groups: self.groups.keys().cloned().collect(),
            tensors,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if len > MAX_HEADER || len > (bytes.len() - 16) as u64 {
            return Err(bad("truncated header"));
        }
        let len = len as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + len])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != 1 {
            return Err(bad("unsupported checkpoint version"));
        }
        let config = TrainConfig::from_toml_str(&header.config)?;
        let payload = &bytes[16 + len..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values = payload.len() / 8;
        let mut groups: BTreeMap<String, ParamStore> = header
            .groups
            .iter()
            .map(|g| (g.clone(), ParamStore::new()))
            .collect();
        let mut expected_offset = 0usize;
        for e in header.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            if e.offset != expected_offset || count > values - expected_offset.min(values) {
                return Err(Error::Checkpoint(format!("tensor `{}` lies outside the payload", e.name)));
            }
            let data = payload[8 * e.offset..8 * (e.offset + count)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(e.shape, data)?;
            let store = groups
                .get_mut(&e.group)
                .ok_or_else(|| Error::Checkpoint(format!("tensor in undeclared group `{}`", e.group)))?;
            let dup = if e.buffer {
                store.buffer(&e.name).is_ok()
            } else {
                store.param(&e.name).is_ok()
            };
            if dup {
                return Err(Error::Checkpoint(format!("tensor `{}` appears twice", e.name)));
            }
            if e.buffer {
                store.insert_buffer(e.name, t);
            } else {
                store.insert_param(e.name, t);
            }
            expected_offset += count;
        }
        if expected_offset != values {
            return Err(bad("payload has trailing values"));
        }
        Ok(Checkpoint {
            step: header.step,
            epoch: header.epoch,
            config,
            groups,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::format(path, reason),
            other => other,
        })
    }

    /// Network weights (backbone and decoder groups).
    pub fn network_weights(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for group in ["backbone", "decoder"] {
            store.merge(self.group(group)?.clone());
        }
        Ok(store)
    }

    /// Rebuilds the network and checks the weights fit it.
    pub fn network(&self) -> Result<(CeaNet, ParamStore)> {
        let net = CeaNet::from_config(&self.config.model)?;
        let store = self.network_weights()?;
        check_same_layout(&net.init(0), &store)?;
        Ok((net, store))
    }
}

/// Paths written by [`Trainer::fit`].
pub fn run_outputs(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("last.ckpt"), dir.join("history.csv"))
}
