//! Box prompts built from scribbles and predictions, and the
//! scribble-agreement filter for guided masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{Label, Map, ScribbleMap};

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Non-empty and inside a `width × height` image.
    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        !self.is_empty() && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.is_empty()
            || (other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1)
    }

    /// Overlap of two boxes, `None` when it is empty.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (!b.is_empty()).then_some(b)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Tight box around pixels satisfying `keep`, scanning a `h × w` grid.
fn tight_box(h: usize, w: usize, keep: impl Fn(usize, usize) -> bool) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if keep(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
}

/// Tight box around the foreground scribble pixels.
pub fn scribble_to_box(scribble: &ScribbleMap) -> Result<BBox> {
    tight_box(scribble.height(), scribble.width(), |y, x| {
        scribble.get(y, x) == Label::Foreground
    })
    .ok_or_else(|| Error::Degenerate("scribble has no foreground pixels".into()))
}

/// Tight box around every pixel with probability `>= threshold`; all
/// blobs share one box.
pub fn prediction_to_box(prob: &Map, threshold: f64) -> Option<BBox> {
    tight_box(prob.height(), prob.width(), |y, x| prob.get(y, x) >= threshold)
}

/// Grows `b` by `margin` on every side, clamped to `[0, width] × [0, height]`.
pub fn augment_box(b: BBox, margin: usize, bounds: (usize, usize)) -> BBox {
    let (width, height) = bounds;
    BBox {
        x0: b.x0.saturating_sub(margin),
        y0: b.y0.saturating_sub(margin),
        x1: b.x1.saturating_add(margin).min(width),
        y1: b.y1.saturating_add(margin).min(height),
    }
}

/// Margin given at the 320-pixel reference resolution, rescaled to a working
/// size whose longer side is `longer_side`.
pub fn scale_margin(margin_at_320: usize, longer_side: usize) -> usize {
    ((margin_at_320 * longer_side) as f64 / 320.0).round() as usize
}

/// Which box is handed to the guided segmenter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    /// Augmented scribble box intersected with the prediction box.
    #[default]
    Intersection,
    /// Augmented scribble box alone.
    Box1,
    /// Prediction box alone (augmented scribble box when absent).
    Box2,
}

impl FromStr for PromptSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(PromptSource::Intersection),
            "box1" => Ok(PromptSource::Box1),
            "box2" => Ok(PromptSource::Box2),
            other => Err(Error::InvalidArgument(format!(
                "unknown prompt source `{other}` (expected intersection, box1 or box2)"
            ))),
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptSource::Intersection => "intersection",
            PromptSource::Box1 => "box1",
            PromptSource::Box2 => "box2",
        })
    }
}

/// How the returned prompt was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptOrigin {
    Intersection,
    Fallback,
    ScribbleBox,
    PredictionBox,
}

impl PromptOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptOrigin::Intersection => "intersection",
            PromptOrigin::Fallback => "fallback",
            PromptOrigin::ScribbleBox => "box1",
            PromptOrigin::PredictionBox => "box2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub bbox: BBox,
    pub origin: PromptOrigin,
}

/// Augmented scribble box intersected with the prediction box; falls back
/// to the augmented scribble box when the prediction is empty or the two do
/// not overlap.
pub fn make_prompt_box(scribble: &ScribbleMap, prob: &Map, margin: usize) -> Result<Prompt> {
    make_prompt(scribble, prob, margin, PromptSource::Intersection, 0.5)
}

pub fn make_prompt(
    scribble: &ScribbleMap,
    prob: &Map,
    margin: usize,
    source: PromptSource,
    threshold: f64,
) -> Result<Prompt> {
    if scribble.dims() != prob.dims() {
        return Err(Error::shape(format!(
            "scribble {:?} vs prediction {:?}",
            scribble.dims(),
            prob.dims()
        )));
    }
    let bounds = (scribble.width(), scribble.height());
    let augmented = augment_box(scribble_to_box(scribble)?, margin, bounds);
    let fallback = Prompt {
        bbox: augmented,
        origin: PromptOrigin::Fallback,
    };
    let predicted = prediction_to_box(prob, threshold);
    Ok(match source {
        PromptSource::Box1 => Prompt {
            bbox: augmented,
            origin: PromptOrigin::ScribbleBox,
        },
        PromptSource::Box2 => match predicted {
            Some(b) => Prompt {
                bbox: b,
                origin: PromptOrigin::PredictionBox,
            },
            None => fallback,
        },
        PromptSource::Intersection => match predicted.and_then(|p| augmented.intersect(&p)) {
            Some(b) => Prompt {
                bbox: b,
                origin: PromptOrigin::Intersection,
            },
            None => fallback,
        },
    })
}

/// Fraction of labelled scribble pixels the mask classifies consistently
/// (foreground strokes inside the mask, background strokes outside).
pub fn mask_scribble_agreement(mask: &Map, scribble: &ScribbleMap) -> Result<f64> {
    if mask.dims() != scribble.dims() {
        return Err(Error::shape(format!(
            "mask {:?} vs scribble {:?}",
            mask.dims(),
            scribble.dims()
        )));
    }
    let mut labeled = 0usize;
    let mut agree = 0usize;
    for (&m, &l) in mask.data().iter().zip(scribble.labels()) {
        match l {
            Label::Unlabeled => {}
            Label::Foreground => {
                labeled += 1;
                agree += usize::from(m >= 0.5);
            }
            Label::Background => {
                labeled += 1;
                agree += usize::from(m < 0.5);
            }
        }
    }
    if labeled == 0 {
        return Err(Error::Degenerate("scribble has no labelled pixels".into()));
    }
    Ok(agree as f64 / labeled as f64)
}

/// Reliability bit per sample: agreement `>= tau`.
pub fn build_indicator(masks: &[Map], scribbles: &[ScribbleMap], tau: f64) -> Result<Vec<bool>> {
    if masks.len() != scribbles.len() {
        return Err(Error::InvalidArgument(format!(
            "{} masks but {} scribbles",
            masks.len(),
            scribbles.len()
        )));
    }
    masks
        .iter()
        .zip(scribbles)
        .map(|(m, s)| Ok(mask_scribble_agreement(m, s)? >= tau))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scribble_with(h: usize, w: usize, fg: &[(usize, usize)], bg: &[(usize, usize)]) -> ScribbleMap {
        let mut s = ScribbleMap::unlabeled(h, w);
        for &(y, x) in fg {
            s.set(y, x, Label::Foreground);
        }
        for &(y, x) in bg {
            s.set(y, x, Label::Background);
        }
        s
    }

    #[test]
    fn scribble_box_examples() {
        let s = scribble_with(10, 10, &[(2, 3), (5, 7)], &[(0, 0)]);
        assert_eq!(scribble_to_box(&s).unwrap(), BBox::new(3, 2, 8, 6));
        let s = scribble_with(10, 10, &[(4, 4)], &[]);
        assert_eq!(scribble_to_box(&s).unwrap(), BBox::new(4, 4, 5, 5));
        let s = scribble_with(10, 10, &[], &[(1, 1)]);
        assert!(scribble_to_box(&s).is_err());
    }

    #[test]
    fn prediction_box_examples() {
        assert_eq!(prediction_to_box(&Map::zeros(32, 32), 0.5), None);
        let m = Map::from_fn(32, 32, |y, x| {
            if (10..14).contains(&y) && (20..24).contains(&x) {
                0.9
            } else {
                0.1
            }
        });
        assert_eq!(prediction_to_box(&m, 0.5), Some(BBox::new(20, 10, 24, 14)));
    }

    #[test]
    fn augment_examples() {
        let b = BBox::new(10, 10, 20, 20);
        assert_eq!(augment_box(b, 5, (32, 32)), BBox::new(5, 5, 25, 25));
        assert_eq!(augment_box(BBox::new(1, 1, 4, 4), 5, (32, 32)), BBox::new(0, 0, 9, 9));
        assert_eq!(augment_box(b, 0, (32, 32)), b);
    }

    #[test]
    fn prompt_intersection_and_fallbacks() {
        // Scribble box (10,10,20,20) + margin 5 → (5,5,25,25).
        let s = scribble_with(32, 32, &[(10, 10), (19, 19)], &[(0, 31)]);
        let pred = Map::from_fn(32, 32, |y, x| if y < 22 && x < 30 { 1.0 } else { 0.0 });
        let p = make_prompt_box(&s, &pred, 5).unwrap();
        assert_eq!(p.bbox, BBox::new(5, 5, 25, 22));
        assert_eq!(p.origin, PromptOrigin::Intersection);

        let p = make_prompt_box(&s, &Map::zeros(32, 32), 5).unwrap();
        assert_eq!(p.bbox, BBox::new(5, 5, 25, 25));
        assert_eq!(p.origin, PromptOrigin::Fallback);

        let s = scribble_with(32, 32, &[(0, 0), (4, 4)], &[(31, 31)]);
        let pred = Map::from_fn(32, 32, |y, x| if y >= 20 && x >= 20 && y < 30 && x < 30 { 1.0 } else { 0.0 });
        let p = make_prompt_box(&s, &pred, 0).unwrap();
        assert_eq!(p.bbox, BBox::new(0, 0, 5, 5));
        assert_eq!(p.origin, PromptOrigin::Fallback);
    }

    #[test]
    fn agreement_and_indicator() {
        let s = scribble_with(2, 2, &[(0, 0), (0, 1)], &[(1, 0), (1, 1)]);
        let perfect = Map::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let inverse = perfect.map(|v| 1.0 - v);
        let three = Map::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(mask_scribble_agreement(&perfect, &s).unwrap(), 1.0);
        assert_eq!(mask_scribble_agreement(&inverse, &s).unwrap(), 0.0);
        assert_eq!(mask_scribble_agreement(&three, &s).unwrap(), 0.75);
        let half = Map::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let o = build_indicator(
            &[perfect.clone(), inverse, half],
            &[s.clone(), s.clone(), s.clone()],
            0.5,
        )
        .unwrap();
        assert_eq!(o, vec![true, false, true]);
        assert!(build_indicator(&[perfect], &[], 0.5).is_err());
        assert!(mask_scribble_agreement(&Map::zeros(2, 2), &ScribbleMap::unlabeled(2, 2)).is_err());
    }

    #[test]
    fn margin_scaling() {
        assert_eq!(scale_margin(25, 320), 25);
        assert_eq!(scale_margin(25, 64), 5);
        assert_eq!(scale_margin(25, 32), 3);
    }
}
