//! Training objectives: partial cross-entropy on scribbles, scale
//! consistency of the main output, weighted BCE + IoU against guided masks,
//! and the weighted multi-stage total.
//!
//! Every loss returns its value together with the gradient with respect to
//! the logits it was given.

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::decoder::{PredictionSet, NUM_STAGES};
use crate::error::{Error, Result};
use crate::map::{Label, Map, ScribbleMap};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the guided-mask term.
    pub alpha: f64,
    /// Auxiliary stage weights for stages 2, 3, 4.
    pub lambda: [f64; 3],
    /// Downscale factor for the consistency pass.
    pub ss_scale: f64,
    /// Half-width of the boundary-weight window (window is `2r + 1`).
    pub wmap_radius: usize,
    pub wmap_gain: f64,
    /// Probability clip used inside logarithms.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            lambda: [0.8, 0.6, 0.4],
            ss_scale: 0.3,
            wmap_radius: 15,
            wmap_gain: 5.0,
            eps: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.alpha) || !self.lambda.iter().all(|&l| unit(l)) || !unit(self.ss_scale) {
            return Err(Error::Config(
                "alpha, lambda and ss_scale must lie in (0, 1]".into(),
            ));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("eps must lie in (0, 0.5)".into()));
        }
        if self.wmap_gain < 0.0 {
            return Err(Error::Config("wmap_gain must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Map,
}

/// Binary cross-entropy over labelled scribble pixels only, averaged over
/// those pixels. Unlabelled pixels get exactly zero gradient.
pub fn partial_ce(logits: &Map, scribble: &ScribbleMap, eps: f64) -> Result<LossGrad> {
    if logits.dims() != scribble.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs scribble {:?}",
            logits.dims(),
            scribble.dims()
        )));
    }
    let labeled = scribble.labeled_count();
    if labeled == 0 {
        return Err(Error::Degenerate("scribble has no labelled pixels".into()));
    }
    let n = labeled as f64;
    let (h, w) = logits.dims();
    let mut grad = Map::zeros(h, w);
    let mut total = 0.0;
    for (i, (&z, &label)) in logits.data().iter().zip(scribble.labels()).enumerate() {
        let target = match label {
            Label::Unlabeled => continue,
            Label::Foreground => 1.0,
            Label::Background => 0.0,
        };
        let p = sigmoid(z);
        let clipped = p.clamp(eps, 1.0 - eps);
        total += if target == 1.0 {
            -clipped.ln()
        } else {
            -(1.0 - clipped).ln()
        };
        if p > eps && p < 1.0 - eps {
            grad.data_mut()[i] = (p - target) / n;
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// Result of [`structure_consistency`]: value and gradients for both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub grad_full: Map,
    pub grad_down: Map,
}

/// Mean squared difference between the probabilities predicted on the
/// downscaled input and the bilinearly downscaled probabilities predicted
/// on the full input.
pub fn structure_consistency(full_logits: &Map, down_logits: &Map) -> Result<ConsistencyLoss> {
    let (fh, fw) = full_logits.dims();
    let (dh, dw) = down_logits.dims();
    if dh == 0 || dw == 0 || dh > fh || dw > fw {
        return Err(Error::shape(format!(
            "consistency target {dh}x{dw} is not a downscale of {fh}x{fw}"
        )));
    }
    let p_full = full_logits.map(sigmoid);
    let p_down = down_logits.map(sigmoid);
    let target = tensor::resize_plane(p_full.data(), fh, fw, dh, dw);
    let m = (dh * dw) as f64;
    let mut value = 0.0;
    let mut d_target = vec![0.0; dh * dw];
    let mut grad_down = Map::zeros(dh, dw);
    for i in 0..dh * dw {
        let pd = p_down.data()[i];
        let diff = pd - target[i];
        value += diff * diff;
        grad_down.data_mut()[i] = 2.0 * diff / m * pd * (1.0 - pd);
        d_target[i] = -2.0 * diff / m;
    }
    let back = tensor::resize_plane_backward(&d_target, fh, fw, dh, dw);
    let grad_full = Map::new(
        fh,
        fw,
        back.iter()
            .zip(p_full.data())
            .map(|(g, p)| g * p * (1.0 - p))
            .collect(),
    )?;
    Ok(ConsistencyLoss {
        value: value / m,
        grad_full,
        grad_down,
    })
}

/// Mean over the in-bounds part of a `(2r+1)²` window centred on each
/// pixel.
pub fn window_mean(map: &Map, radius: usize) -> Map {
    let (h, w) = map.dims();
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += map.get(y, x);
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    Map::from_fn(h, w, |y, x| {
        let y0 = y.saturating_sub(radius);
        let x0 = x.saturating_sub(radius);
        let y1 = (y + radius + 1).min(h);
        let x1 = (x + radius + 1).min(w);
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        s / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Boundary-emphasis weights `1 + gain · |windowmean(mask) − mask|`.
pub fn boundary_weights(mask: &Map, radius: usize, gain: f64) -> Map {
    let pooled = window_mean(mask, radius);
    Map::new(
        mask.height(),
        mask.width(),
        pooled
            .data()
            .iter()
            .zip(mask.data())
            .map(|(p, g)| 1.0 + gain * (p - g).abs())
            .collect(),
    )
    .expect("same dims")
}

/// Boundary-weighted BCE plus boundary-weighted IoU loss against a binary
/// mask.
pub fn weighted_seg_loss(logits: &Map, mask: &Map, weights: &LossWeights) -> Result<LossGrad> {
    logits.check_same_dims(mask, "prediction vs guided mask")?;
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("guided mask must be binary".into()));
    }
    let wmap = boundary_weights(mask, weights.wmap_radius, weights.wmap_gain);
    let (h, w) = logits.dims();
    let mut w_sum = 0.0;
    let mut bce_sum = 0.0;
    let mut inter = 0.0;
    let mut union = 0.0;
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    for i in 0..h * w {
        let (z, g, wt, p) = (logits.data()[i], mask.data()[i], wmap.data()[i], probs[i]);
        w_sum += wt;
        bce_sum += wt * (z.max(0.0) - z * g + (-z.abs()).exp().ln_1p());
        inter += wt * p * g;
        union += wt * (p + g - p * g);
    }
    let wbce = bce_sum / w_sum;
    let wiou = 1.0 - inter / union;
    let mut grad = Map::zeros(h, w);
    for i in 0..h * w {
        let (g, wt, p) = (mask.data()[i], wmap.data()[i], probs[i]);
        let d_bce = wt * (p - g) / w_sum;
        let d_iou_dp = -(wt * g * union - inter * wt * (1.0 - g)) / (union * union);
        grad.data_mut()[i] = d_bce + d_iou_dp * p * (1.0 - p);
    }
    Ok(LossGrad {
        value: wiou + wbce,
        grad,
    })
}

/// Guided masks for a batch with their reliability bits.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedMaskBatch {
    pub masks: Vec<Map>,
    pub indicator: Vec<bool>,
}

impl GuidedMaskBatch {
    pub fn new(masks: Vec<Map>, indicator: Vec<bool>) -> Result<Self> {
        if masks.len() != indicator.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks but {} indicator bits",
                masks.len(),
                indicator.len()
            )));
        }
        if masks.iter().any(|m| !m.is_binary()) {
            return Err(Error::InvalidArgument("guided masks must be binary".into()));
        }
        Ok(GuidedMaskBatch { masks, indicator })
    }

    /// A batch with every sample marked unreliable.
    pub fn unreliable(n: usize, h: usize, w: usize) -> Self {
        GuidedMaskBatch {
            masks: vec![Map::zeros(h, w); n],
            indicator: vec![false; n],
        }
    }

    pub fn reliable_count(&self) -> usize {
        self.indicator.iter().filter(|&&o| o).count()
    }

    pub fn reliable_fraction(&self) -> f64 {
        if self.indicator.is_empty() {
            0.0
        } else {
            self.reliable_count() as f64 / self.indicator.len() as f64
        }
    }
}

/// Batch-reduced loss terms per side output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pce: [f64; NUM_STAGES],
    pub seg: [f64; NUM_STAGES],
    pub ss: f64,
}

impl LossComponents {
    /// Main-output loss plus the λ-weighted auxiliary losses.
    pub fn total(&self, weights: &LossWeights) -> f64 {
        let dominant = self.pce[0] + weights.alpha * self.seg[0] + self.ss;
        let aux: f64 = (1..NUM_STAGES)
            .map(|i| weights.lambda[i - 1] * (self.pce[i] + weights.alpha * self.seg[i]))
            .sum();
        dominant + aux
    }

    /// Scribble term summed over stages with the stage weights.
    pub fn weighted_pce(&self, weights: &LossWeights) -> f64 {
        self.pce[0]
            + (1..NUM_STAGES)
                .map(|i| weights.lambda[i - 1] * self.pce[i])
                .sum::<f64>()
    }

    /// Guided-mask term summed over stages with α and the stage weights.
    pub fn weighted_seg(&self, weights: &LossWeights) -> f64 {
        weights.alpha
            * (self.seg[0]
                + (1..NUM_STAGES)
                    .map(|i| weights.lambda[i - 1] * self.seg[i])
                    .sum::<f64>())
    }
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: f64,
    pub components: LossComponents,
    /// d(total)/d(side logits), same shapes as the prediction tensors.
    pub grad_side: [Tensor; NUM_STAGES],
    pub grad_down: Option<Tensor>,
}

/// Full objective over a batch. Side outputs must already be at the input
/// resolution. Samples whose indicator bit is 0 contribute nothing to any
/// guided-mask term; those terms are averaged over reliable samples.
pub fn total_loss(
    preds: &PredictionSet,
    scribbles: &[ScribbleMap],
    guided: &GuidedMaskBatch,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let [n, c, h, w] = preds.side[0].shape();
    if c != 1 {
        return Err(Error::shape("side outputs must have one channel"));
    }
    if preds.side.iter().any(|t| t.shape() != [n, 1, h, w]) {
        return Err(Error::shape("side outputs must share the input resolution"));
    }
    if scribbles.len() != n || guided.masks.len() != n {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} predictions with {} scribbles and {} guided masks",
            scribbles.len(),
            guided.masks.len()
        )));
    }
    let reliable = guided.reliable_count();
    let batch = n as f64;
    let mut comps = LossComponents::default();
    let mut grad_side: [Tensor; NUM_STAGES] = std::array::from_fn(|_| Tensor::zeros([n, 1, h, w]));
    // d(total)/d(term) for each stage's terms.
    let stage_weight = |i: usize| if i == 0 { 1.0 } else { weights.lambda[i - 1] };

    for (i, side) in preds.side.iter().enumerate() {
        let sw = stage_weight(i);
        for k in 0..n {
            let logits = Map::from_tensor(side, k, 0);
            let pce = partial_ce(&logits, &scribbles[k], weights.eps)?;
            comps.pce[i] += pce.value / batch;
            let g = grad_side[i].plane_mut(k, 0);
            for (gv, d) in g.iter_mut().zip(pce.grad.data()) {
                *gv += sw * d / batch;
            }
            if guided.indicator[k] {
                let seg = weighted_seg_loss(&logits, &guided.masks[k], weights)?;
                let r = reliable as f64;
                comps.seg[i] += seg.value / r;
                let g = grad_side[i].plane_mut(k, 0);
                for (gv, d) in g.iter_mut().zip(seg.grad.data()) {
                    *gv += sw * weights.alpha * d / r;
                }
            }
        }
    }

    let grad_down = match &preds.down {
        Some(down) => {
            let [dn, _, dh, dw] = down.shape();
            if dn != n {
                return Err(Error::shape("downscaled batch size differs"));
            }
            let mut gd = Tensor::zeros(down.shape());
            for k in 0..n {
                let full = Map::from_tensor(&preds.side[0], k, 0);
                let small = Map::from_tensor(down, k, 0);
                let ss = structure_consistency(&full, &small)?;
                comps.ss += ss.value / batch;
                for (gv, d) in grad_side[0].plane_mut(k, 0).iter_mut().zip(ss.grad_full.data()) {
                    *gv += d / batch;
                }
                for (gv, d) in gd.plane_mut(k, 0).iter_mut().zip(ss.grad_down.data()) {
                    *gv += d / batch;
                }
            }
            debug_assert_eq!(gd.shape(), [n, 1, dh, dw]);
            Some(gd)
        }
        None => None,
    };

    Ok(TotalLoss {
        total: comps.total(weights),
        components: comps,
        grad_side,
        grad_down,
    })
}
