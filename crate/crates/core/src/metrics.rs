//! Segmentation metrics on single images and dataset averages.
//!
//! Predictions are foreground probabilities in `[0, 1]`; ground truth is
//! binarised at `0.5`. Predictions are used as given (no min-max
//! rescaling).

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::map::Map;

const EPS: f64 = f64::EPSILON;

fn check(pred: &Map, gt: &Map) -> Result<()> {
    pred.check_same_dims(gt, "prediction and ground truth differ in size")?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "prediction values must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn gt_bits(gt: &Map) -> Vec<bool> {
    gt.data().iter().map(|&v| v >= 0.5).collect()
}

/// Dice and IoU of the prediction binarised at `0.5`. Both are `1` when
/// prediction and ground truth are both empty.
pub fn dice_iou(pred: &Map, gt: &Map) -> Result<(f64, f64)> {
    check(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&pv, &gv) in pred.data().iter().zip(gt.data()) {
        let (pb, gb) = (pv >= 0.5, gv >= 0.5);
        inter += usize::from(pb && gb);
        p += usize::from(pb);
        g += usize::from(gb);
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (p + g) as f64;
    let iou = inter as f64 / (p + g - inter) as f64;
    Ok((dice, iou))
}

pub fn mae(pred: &Map, gt: &Map) -> Result<f64> {
    check(pred, gt)?;
    let gt = gt_bits(gt);
    let sum: f64 = pred
        .data()
        .iter()
        .zip(&gt)
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Structure measure with `alpha = 0.5`.
pub fn s_measure(pred: &Map, gt: &Map) -> Result<f64> {
    check(pred, gt)?;
    let g = gt_bits(gt);
    let fg = g.iter().filter(|&&b| b).count();
    let n = g.len();
    if fg == 0 {
        return Ok(1.0 - pred.mean());
    }
    if fg == n {
        return Ok(pred.mean());
    }
    let gm = fg as f64 / n as f64;
    let object = gm * s_object(pred.data().iter().zip(&g).filter(|(_, &b)| b).map(|(&p, _)| p))
        + (1.0 - gm)
            * s_object(
                pred.data()
                    .iter()
                    .zip(&g)
                    .filter(|(_, &b)| !b)
                    .map(|(&p, _)| 1.0 - p),
            );
    let region = s_region(pred, &g);
    Ok((0.5 * object + 0.5 * region).max(0.0))
}

fn s_object(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sigma = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + sigma + EPS)
}

fn s_region(pred: &Map, g: &[bool]) -> f64 {
    let (h, w) = pred.dims();
    let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sy += y as f64;
                sx += x as f64;
                cnt += 1.0;
            }
        }
    }
    let cx = (sx / cnt).round_ties_even() as usize + 1;
    let cy = (sy / cnt).round_ties_even() as usize + 1;
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let weights = [
        (cx * cy) as f64 / area,
        (cy * (w - cx)) as f64 / area,
        ((h - cy) * cx) as f64 / area,
    ];
    let weights = [
        weights[0],
        weights[1],
        weights[2],
        1.0 - weights[0] - weights[1] - weights[2],
    ];
    let mut score = 0.0;
    for ((ys, xs), wgt) in quads.into_iter().zip(weights) {
        if ys.is_empty() || xs.is_empty() {
            continue;
        }
        let mut p = Vec::new();
        let mut q = Vec::new();
        for y in ys {
            for x in xs.clone() {
                p.push(pred.get(y, x));
                q.push(f64::from(u8::from(g[y * w + x])));
            }
        }
        score += wgt * ssim(&p, &q);
    }
    score
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let (sx, sy, sxy) = if p.len() > 1 {
        let d = n - 1.0;
        (
            p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d,
            g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d,
            p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// For each pixel, the Euclidean distance to the nearest foreground pixel
/// and that pixel's `(y, x)`; equidistant candidates resolve to the
/// lexicographically smallest `(y, x)`.
pub fn nearest_foreground(g: &[bool], h: usize, w: usize) -> Vec<(f64, usize, usize)> {
    // Per column and row: nearest foreground row in that column.
    let mut col_near: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if g[y * w + x] {
                last = Some(y);
            }
            col_near[y * w + x] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if g[y * w + x] {
                next = Some(y);
            }
            let cand = match (col_near[y * w + x], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
            col_near[y * w + x] = cand;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for xc in 0..w {
                if let Some(yc) = col_near[y * w + xc] {
                    let d2 = y.abs_diff(yc).pow(2) + x.abs_diff(xc).pow(2);
                    let cand = (d2, yc, xc);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (d2, by, bx) = best.expect("at least one foreground pixel");
            out.push(((d2 as f64).sqrt(), by, bx));
        }
    }
    out
}

/// 7x7 Gaussian, `sigma = 5`, normalised to unit sum.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(dy * dy + dx * dx) / 50.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Weighted F-measure with `beta = 1`. An empty ground truth scores `0`.
pub fn weighted_f(pred: &Map, gt: &Map) -> Result<f64> {
    check(pred, gt)?;
    let (h, w) = pred.dims();
    let g = gt_bits(gt);
    if !g.iter().any(|&b| b) {
        return Ok(0.0);
    }
    let gf = |i: usize| f64::from(u8::from(g[i]));
    let e: Vec<f64> = (0..h * w).map(|i| (pred.data()[i] - gf(i)).abs()).collect();
    let near = nearest_foreground(&g, h, w);
    let et: Vec<f64> = (0..h * w)
        .map(|i| {
            if g[i] {
                e[i]
            } else {
                let (_, ny, nx) = near[i];
                e[ny * w + nx]
            }
        })
        .collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                let yy = y as isize + i as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (j, kv) in row.iter().enumerate() {
                    let xx = x as isize + j as isize - 3;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kv * et[yy as usize * w + xx as usize];
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let (mut tp_err, mut fp, mut fg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            tp_err += m;
            fg += 1.0;
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * near[i].0).exp();
            fp += e[i] * b;
        }
    }
    let tpw = fg - tp_err;
    let r = 1.0 - tp_err / fg;
    let p = tpw / (tpw + fp + EPS);
    Ok(2.0 * r * p / (r + p + EPS))
}

/// Enhanced-alignment score of the prediction binarised at `threshold`
/// (`pred >= threshold`).
pub fn e_measure_at(pred: &Map, gt: &Map, threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let g = gt_bits(gt);
    let bits: Vec<bool> = pred.data().iter().map(|&v| v >= threshold).collect();
    Ok(e_from_counts(&counts(&bits, &g)))
}

#[derive(Clone, Copy, Debug)]
struct Counts {
    n: usize,
    gt_fg: usize,
    fg_fg: usize,
    fg_bg: usize,
}

fn counts(bits: &[bool], g: &[bool]) -> Counts {
    let mut c = Counts {
        n: bits.len(),
        gt_fg: 0,
        fg_fg: 0,
        fg_bg: 0,
    };
    for (&p, &t) in bits.iter().zip(g) {
        c.gt_fg += usize::from(t);
        c.fg_fg += usize::from(p && t);
        c.fg_bg += usize::from(p && !t);
    }
    c
}

fn e_from_counts(c: &Counts) -> f64 {
    let n = c.n as f64;
    let pred_fg = c.fg_fg + c.fg_bg;
    let sum = if c.gt_fg == 0 {
        (c.n - pred_fg) as f64
    } else if c.gt_fg == c.n {
        pred_fg as f64
    } else {
        let bg_fg = c.gt_fg - c.fg_fg;
        let bg_bg = c.n - pred_fg - bg_fg;
        let mp = pred_fg as f64 / n;
        let mg = c.gt_fg as f64 / n;
        let parts = [
            (c.fg_fg, 1.0 - mp, 1.0 - mg),
            (c.fg_bg, 1.0 - mp, -mg),
            (bg_fg, -mp, 1.0 - mg),
            (bg_bg, -mp, -mg),
        ];
        parts
            .iter()
            .map(|&(cnt, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                cnt as f64 * (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    sum / n
}

/// Maximum E-measure over the thresholds `k / 255`, `k = 0..=255`.
pub fn e_measure_max(pred: &Map, gt: &Map) -> Result<f64> {
    check(pred, gt)?;
    let g = gt_bits(gt);
    let mut best = f64::NEG_INFINITY;
    for k in 0..=255u32 {
        let t = f64::from(k) / 255.0;
        let bits: Vec<bool> = pred.data().iter().map(|&v| v >= t).collect();
        best = best.max(e_from_counts(&counts(&bits, &g)));
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub weighted_f: f64,
    pub e_measure: f64,
}

pub fn evaluate(pred: &Map, gt: &Map) -> Result<ImageMetrics> {
    let (dice, iou) = dice_iou(pred, gt)?;
    Ok(ImageMetrics {
        dice,
        iou,
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
        weighted_f: weighted_f(pred, gt)?,
        e_measure: e_measure_max(pred, gt)?,
    })
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub per_image: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

pub fn evaluate_dataset<'a>(
    items: impl IntoIterator<Item = (String, &'a Map, &'a Map)>,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for (id, pred, gt) in items {
        let m = evaluate(pred, gt).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("{id}: {msg}")),
            other => other,
        })?;
        report.ids.push(id);
        report.per_image.push(m);
    }
    if report.per_image.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let n = report.per_image.len() as f64;
    let mut mean = ImageMetrics::default();
    for m in &report.per_image {
        mean.dice += m.dice / n;
        mean.iou += m.iou / n;
        mean.mae += m.mae / n;
        mean.s_measure += m.s_measure / n;
        mean.weighted_f += m.weighted_f / n;
        mean.e_measure += m.e_measure / n;
    }
    report.mean = mean;
    Ok(report)
}

impl MetricReport {
    /// One row per image plus a final `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["id", "dice", "iou", "mae", "s_measure", "weighted_f", "e_measure"])
            .map_err(csv_err)?;
        let rows = self
            .ids
            .iter()
            .map(String::as_str)
            .zip(&self.per_image)
            .chain(std::iter::once(("mean", &self.mean)));
        for (id, m) in rows {
            w.write_record([
                id.to_string(),
                m.dice.to_string(),
                m.iou.to_string(),
                m.mae.to_string(),
                m.s_measure.to_string(),
                m.weighted_f.to_string(),
                m.e_measure.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let m = &self.mean;
        let mut s = String::new();
        s.push_str("| images | mDice | mIoU | MAE | S-measure | weighted F | E-measure |\n");
        s.push_str("|---:|---:|---:|---:|---:|---:|---:|\n");
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            self.per_image.len(),
            m.dice,
            m.iou,
            m.mae,
            m.s_measure,
            m.weighted_f,
            m.e_measure
        );
        s
    }
}
