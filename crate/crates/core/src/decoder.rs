//! Cross-level enhancement and aggregation decoder.
//!
//! Four enhancement blocks fuse adjacent encoder levels (1,2), (2,3),
//! (3,4), (4,5). Decoding runs deepest first: stage 4 uses its enhanced
//! feature alone; stages 3, 2 and 1 add an aggregation of every deeper
//! enhanced feature before predicting a single-channel logit map.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::backbone::{BackboneSpec, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Bconv, Conv2d};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_WIDTH: usize = 64;
pub const NUM_STAGES: usize = 4;

/// Cross-level enhancement over a (lower, higher) pair of encoder levels.
#[derive(Clone, Debug)]
pub struct CrossLevelEnhance {
    pub low: Conv2d,
    pub high: Conv2d,
    /// Applied to the higher-level feature; its sigmoid gates the lower one.
    pub gate_for_low: Conv2d,
    /// Applied to the lower-level feature; its sigmoid gates the higher one.
    pub gate_for_high: Conv2d,
    pub cat: Bconv,
    pub out: Conv2d,
}

impl CrossLevelEnhance {
    pub fn new(name: &str, low_channels: usize, high_channels: usize, width: usize) -> Self {
        CrossLevelEnhance {
            low: Conv2d::new(format!("{name}.low"), low_channels, width, 3),
            high: Conv2d::new(format!("{name}.high"), high_channels, width, 3),
            gate_for_low: Conv2d::new(format!("{name}.gate_for_low"), width, width, 3),
            gate_for_high: Conv2d::new(format!("{name}.gate_for_high"), width, width, 3),
            cat: Bconv::new(&format!("{name}.cat"), 2 * width, width, 3),
            out: Conv2d::new(format!("{name}.out"), 2 * width, width, 3),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.low.init(store, rng);
        self.high.init(store, rng);
        self.gate_for_low.init(store, rng);
        self.gate_for_high.init(store, rng);
        self.cat.init(store, rng);
        self.out.init(store, rng);
    }

    /// `f_high` must have the same spatial size as `f_low` or exactly half.
    pub fn forward(&self, s: &mut Session, f_low: Var, f_high: Var) -> Result<Var> {
        let (lh, lw) = (s.value(f_low).h(), s.value(f_low).w());
        let (hh, hw) = (s.value(f_high).h(), s.value(f_high).w());
        let same = (hh, hw) == (lh, lw);
        let half = hh * 2 == lh && hw * 2 == lw;
        if !same && !half {
            return Err(Error::shape(format!(
                "cross-level pair {lh}x{lw} / {hh}x{hw} is neither equal nor 2x"
            )));
        }
        let fl = self.low.forward(s, f_low)?;
        let up = s.graph.resize(f_high, lh, lw);
        let fh = self.high.forward(s, up)?;

        let gl = self.gate_for_low.forward(s, fh)?;
        let gl = s.graph.sigmoid(gl);
        let fl_en = s.graph.mul(gl, fl)?;
        let gh = self.gate_for_high.forward(s, fl)?;
        let gh = s.graph.sigmoid(gh);
        let fh_en = s.graph.mul(gh, fh)?;

        let cat = s.graph.concat(&[fl_en, fh_en])?;
        let fcat = self.cat.forward(s, cat)?;
        let rl = s.graph.add(fl, fcat)?;
        let rh = s.graph.add(fh, fcat)?;
        let joined = s.graph.concat(&[rl, rh])?;
        self.out.forward(s, joined)
    }
}

/// Aggregates a fixed number of deeper enhanced features at one stage's
/// resolution, with a global-average-pooled channel gate and a residual.
#[derive(Clone, Debug)]
pub struct FeatureAggregate {
    pub branches: Vec<Bconv>,
    pub reduce: Conv2d,
    pub con: Bconv,
    pub out: Bconv,
}

impl FeatureAggregate {
    pub fn new(name: &str, inputs: usize, width: usize) -> Result<Self> {
        if inputs == 0 {
            return Err(Error::InvalidArgument(
                "an aggregation block needs at least one input".into(),
            ));
        }
        Ok(FeatureAggregate {
            branches: (0..inputs)
                .map(|i| Bconv::new(&format!("{name}.branch{i}"), width, width, 3))
                .collect(),
            reduce: Conv2d::new(format!("{name}.reduce"), inputs * width, width, 1),
            con: Bconv::new(&format!("{name}.con"), width, width, 3),
            out: Bconv::new(&format!("{name}.out"), width, width, 3),
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.branches.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for b in &self.branches {
            b.init(store, rng);
        }
        self.reduce.init(store, rng);
        self.con.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(&self, s: &mut Session, priors: &[Var], size: (usize, usize)) -> Result<Var> {
        if priors.is_empty() {
            return Err(Error::InvalidArgument(
                "aggregation over an empty feature list".into(),
            ));
        }
        if priors.len() != self.branches.len() {
            return Err(Error::InvalidArgument(format!(
                "aggregation block built for {} inputs got {}",
                self.branches.len(),
                priors.len()
            )));
        }
        let mut parts = Vec::with_capacity(priors.len());
        for (branch, &p) in self.branches.iter().zip(priors) {
            let y = branch.forward(s, p)?;
            parts.push(s.graph.resize(y, size.0, size.1));
        }
        let cascaded = s.graph.concat(&parts)?;
        let cascaded = self.reduce.forward(s, cascaded)?;
        let con = self.con.forward(s, cascaded)?;
        let pooled = s.graph.global_avg_pool(con);
        let gate = s.graph.sigmoid(pooled);
        let global = s.graph.mul_channel(con, gate)?;
        let residual = s.graph.add(global, con)?;
        self.out.forward(s, residual)
    }
}

/// Fuse block and 1×1 prediction head of one decoder stage.
#[derive(Clone, Debug)]
pub struct DecodeStage {
    pub fuse: Bconv,
    pub head: Conv2d,
}

impl DecodeStage {
    pub fn new(name: &str, width: usize) -> Self {
        DecodeStage {
            fuse: Bconv::new(&format!("{name}.fuse"), width, width, 3),
            head: Conv2d::new(format!("{name}.head"), width, 1, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.fuse.init(store, rng);
        self.head.init(store, rng);
    }

    /// Returns `(fused, logits)`.
    pub fn forward(&self, s: &mut Session, cem: Var, fam: Option<Var>) -> Result<(Var, Var)> {
        let x = match fam {
            Some(f) => s.graph.add(cem, f)?,
            None => cem,
        };
        let fused = self.fuse.forward(s, x)?;
        let logits = self.head.forward(s, fused)?;
        Ok((fused, logits))
    }
}

/// Side-output logits. `side[0]` is the main map used at inference.
///
/// Maps are stored as logits (pre-sigmoid), `[N, 1, H, W]` at the input
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub side: [Tensor; NUM_STAGES],
    /// Main map computed on the downscaled input, when that pass ran.
    pub down: Option<Tensor>,
    pub is_logits: bool,
}

impl PredictionSet {
    pub fn main(&self) -> &Tensor {
        &self.side[0]
    }
}

#[derive(Clone, Debug)]
pub struct CeaDecoder {
    pub width: usize,
    pub cems: [CrossLevelEnhance; NUM_STAGES],
    /// Index `i` aggregates for stage `i + 1`; the deepest stage has none.
    pub fams: [Option<FeatureAggregate>; NUM_STAGES],
    pub stages: [DecodeStage; NUM_STAGES],
}

impl CeaDecoder {
    pub fn new(spec: &BackboneSpec, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        let c = spec.channels;
        let cems = std::array::from_fn(|i| {
            CrossLevelEnhance::new(&format!("decoder.cem{}", i + 1), c[i], c[i + 1], width)
        });
        let mut fams: [Option<FeatureAggregate>; NUM_STAGES] = Default::default();
        for (i, slot) in fams.iter_mut().enumerate().take(NUM_STAGES - 1) {
            let inputs = NUM_STAGES - 1 - i;
            *slot = Some(FeatureAggregate::new(
                &format!("decoder.fam{}", i + 1),
                inputs,
                width,
            )?);
        }
        let stages = std::array::from_fn(|i| DecodeStage::new(&format!("decoder.stage{}", i + 1), width));
        Ok(CeaDecoder {
            width,
            cems,
            fams,
            stages,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for cem in &self.cems {
            cem.init(store, rng);
        }
        for fam in self.fams.iter().flatten() {
            fam.init(store, rng);
        }
        for stage in &self.stages {
            stage.init(store, rng);
        }
    }

    /// Enhanced features for the four adjacent level pairs.
    pub fn enhance(&self, s: &mut Session, levels: &[Var; NUM_LEVELS]) -> Result<[Var; NUM_STAGES]> {
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, cem) in self.cems.iter().enumerate() {
            out.push(cem.forward(s, levels[i], levels[i + 1])?);
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// Stage logits at each stage's own resolution, index 0 = stage 1.
    pub fn stage_logits(&self, s: &mut Session, cems: &[Var; NUM_STAGES]) -> Result<[Var; NUM_STAGES]> {
        let mut logits = [None; NUM_STAGES];
        for i in (0..NUM_STAGES).rev() {
            let fam = match &self.fams[i] {
                Some(fam) => {
                    let v = s.value(cems[i]);
                    let size = (v.h(), v.w());
                    Some(fam.forward(s, &cems[i + 1..], size)?)
                }
                None => None,
            };
            let (_, l) = self.stages[i].forward(s, cems[i], fam)?;
            logits[i] = Some(l);
        }
        Ok(logits.map(|l| l.expect("every stage decoded")))
    }

    /// Full decoder: side-output logits upsampled to `out_size`.
    pub fn forward(
        &self,
        s: &mut Session,
        levels: &[Var; NUM_LEVELS],
        out_size: (usize, usize),
    ) -> Result<[Var; NUM_STAGES]> {
        let cems = self.enhance(s, levels)?;
        let logits = self.stage_logits(s, &cems)?;
        Ok(logits.map(|l| s.graph.resize(l, out_size.0, out_size.1)))
    }
}
