//! Single-channel image-sized maps: real-valued maps (logits,
//! probabilities, binary masks) and tri-state scribble annotations.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "{} values do not form a {h}x{w} map",
                data.len()
            )));
        }
        Ok(Map { h, w, data })
    }

    pub fn full(h: usize, w: usize, value: f64) -> Self {
        Map {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::full(h, w, 0.0)
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Map { h, w, data }
    }

    /// Channel `c` of batch item `n`.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Self {
        Map {
            h: t.h(),
            w: t.w(),
            data: t.plane(n, c).to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.h, self.w], self.data.clone()).expect("dims match")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1` where `v >= threshold`, else `0`.
    pub fn threshold(&self, threshold: f64) -> Map {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Map {
        Map {
            h,
            w,
            data: tensor::resize_plane(&self.data, self.h, self.w, h, w),
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Map, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Unlabeled = 0,
    Foreground = 1,
    Background = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Unlabeled),
            1 => Some(Label::Foreground),
            2 => Some(Label::Background),
            _ => None,
        }
    }
}

/// Per-pixel scribble labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMap {
    h: usize,
    w: usize,
    labels: Vec<Label>,
}

impl ScribbleMap {
    pub fn new(h: usize, w: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "{} labels do not form a {h}x{w} scribble map",
                labels.len()
            )));
        }
        Ok(ScribbleMap { h, w, labels })
    }

    pub fn unlabeled(h: usize, w: usize) -> Self {
        ScribbleMap {
            h,
            w,
            labels: vec![Label::Unlabeled; h * w],
        }
    }

    /// From raw indexed values; anything outside `{0, 1, 2}` is rejected.
    pub fn from_indices(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        let labels = values
            .iter()
            .map(|&v| {
                Label::from_u8(v)
                    .ok_or_else(|| Error::InvalidArgument(format!("illegal scribble value {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ScribbleMap::new(h, w, labels)
    }

    pub fn to_indices(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| l as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.w + x] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.len() - self.count(Label::Unlabeled)
    }

    /// Training samples need both a foreground and a background stroke.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.count(Label::Foreground) == 0 || self.count(Label::Background) == 0 {
            return Err(Error::Degenerate(
                "scribble needs at least one foreground and one background pixel".into(),
            ));
        }
        Ok(())
    }

    /// Nearest-neighbour resize; never introduces new label values.
    pub fn resize_nearest(&self, h: usize, w: usize) -> ScribbleMap {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = nearest_source(y, self.h, h);
            for x in 0..w {
                let sx = nearest_source(x, self.w, w);
                labels.push(self.labels[sy * self.w + sx]);
            }
        }
        ScribbleMap { h, w, labels }
    }
}

/// Source index sampled by nearest-neighbour resizing `src → dst`.
pub(crate) fn nearest_source(o: usize, src: usize, dst: usize) -> usize {
    ((o * src) / dst).min(src - 1)
}
