//! Brute-force reference implementations used by the test suites.
#![allow(dead_code)]

use clnet::map::{Label, Map, ScribbleMap};
use clnet::prompting::BBox;

/// Smallest half-open box covering `points` (given as `(y, x)`).
fn cover(points: &[(usize, usize)]) -> Option<BBox> {
    if points.is_empty() {
        return None;
    }
    let x0 = points.iter().map(|p| p.1).min().unwrap();
    let x1 = points.iter().map(|p| p.1).max().unwrap() + 1;
    let y0 = points.iter().map(|p| p.0).min().unwrap();
    let y1 = points.iter().map(|p| p.0).max().unwrap() + 1;
    Some(BBox::new(x0, y0, x1, y1))
}

fn pixels_where(h: usize, w: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if keep(y, x) {
                v.push((y, x));
            }
        }
    }
    v
}

pub fn scribble_box(s: &ScribbleMap) -> Option<BBox> {
    let (h, w) = s.dims();
    cover(&pixels_where(h, w, |y, x| s.get(y, x) == Label::Foreground))
}

pub fn prediction_box(p: &Map, thr: f64) -> Option<BBox> {
    let (h, w) = p.dims();
    cover(&pixels_where(h, w, |y, x| p.get(y, x) >= thr))
}

/// Pixels within Chebyshev distance `margin` of the box, inside the image.
pub fn augmented(b: BBox, margin: usize, h: usize, w: usize) -> BBox {
    let near = |v: usize, lo: usize, hi: usize| v + margin >= lo && v < hi + margin;
    cover(&pixels_where(h, w, |y, x| near(x, b.x0, b.x1) && near(y, b.y0, b.y1))).unwrap()
}

pub fn intersection(a: BBox, b: BBox, h: usize, w: usize) -> Option<BBox> {
    cover(&pixels_where(h, w, |y, x| a.contains(x, y) && b.contains(x, y)))
}

/// Expected prompt box and whether it is the fallback.
pub fn prompt_box(s: &ScribbleMap, p: &Map, margin: usize) -> (BBox, bool) {
    let (h, w) = s.dims();
    let a = augmented(scribble_box(s).unwrap(), margin, h, w);
    match prediction_box(p, 0.5).and_then(|pb| intersection(a, pb, h, w)) {
        Some(i) => (i, false),
        None => (a, true),
    }
}

fn bits(m: &Map) -> Vec<bool> {
    m.data().iter().map(|&v| v >= 0.5).collect()
}

/// Dice and IoU from explicit index sets.
pub fn dice_iou(pred: &Map, gt: &Map) -> (f64, f64) {
    let p: std::collections::BTreeSet<usize> =
        (0..pred.len()).filter(|&i| pred.data()[i] >= 0.5).collect();
    let g: std::collections::BTreeSet<usize> =
        (0..gt.len()).filter(|&i| gt.data()[i] >= 0.5).collect();
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0);
    }
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    (2.0 * inter / (p.len() + g.len()) as f64, inter / union)
}

const EPS: f64 = f64::EPSILON;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n - 1` denominator (0 for a single value).
fn var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

pub fn s_measure(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = gt.dims();
    let g = bits(gt);
    let p = pred.data();
    let fg_frac = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
    if fg_frac == 0.0 {
        return 1.0 - mean(p);
    }
    if fg_frac == 1.0 {
        return mean(p);
    }
    let obj = |vals: Vec<f64>| {
        let m = mean(&vals);
        2.0 * m / (m * m + 1.0 + var(&vals).sqrt() + EPS)
    };
    let fg_vals: Vec<f64> = (0..p.len()).filter(|&i| g[i]).map(|i| p[i]).collect();
    let bg_vals: Vec<f64> = (0..p.len()).filter(|&i| !g[i]).map(|i| 1.0 - p[i]).collect();
    let object = fg_frac * obj(fg_vals) + (1.0 - fg_frac) * obj(bg_vals);

    let coords: Vec<(usize, usize)> = (0..g.len()).filter(|&i| g[i]).map(|i| (i / w, i % w)).collect();
    let my = coords.iter().map(|c| c.0 as f64).sum::<f64>() / coords.len() as f64;
    let mx = coords.iter().map(|c| c.1 as f64).sum::<f64>() / coords.len() as f64;
    let cy = my.round_ties_even() as usize + 1;
    let cx = mx.round_ties_even() as usize + 1;
    let mut region = 0.0;
    let mut used = 0.0;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    for (qi, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                a.push(p[y * w + x]);
                b.push(if g[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        let weight = if qi < 3 {
            ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64
        } else {
            1.0 - used
        };
        used += weight;
        if a.is_empty() {
            continue;
        }
        let (ma, mb) = (mean(&a), mean(&b));
        let alpha = 4.0 * ma * mb * cov(&a, &b);
        let beta = (ma * ma + mb * mb) * (var(&a) + var(&b));
        let ssim = if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        };
        region += weight * ssim;
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Enhanced alignment of a binary prediction, computed per pixel.
pub fn e_measure_binary(fm: &[bool], gt: &[bool]) -> f64 {
    let n = fm.len() as f64;
    let f: Vec<f64> = fm.iter().map(|&b| f64::from(u8::from(b))).collect();
    let g: Vec<f64> = gt.iter().map(|&b| f64::from(u8::from(b))).collect();
    let gsum: f64 = g.iter().sum();
    let enhanced: Vec<f64> = if gsum == 0.0 {
        f.iter().map(|v| 1.0 - v).collect()
    } else if gsum == n {
        f.clone()
    } else {
        let (mf, mg) = (mean(&f), mean(&g));
        f.iter()
            .zip(&g)
            .map(|(a, b)| {
                let (da, db) = (a - mf, b - mg);
                let xi = 2.0 * da * db / (da * da + db * db + EPS);
                (xi + 1.0) * (xi + 1.0) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}

pub fn e_measure_max(pred: &Map, gt: &Map) -> f64 {
    let g = bits(gt);
    (0..=255)
        .map(|k| {
            let t = k as f64 / 255.0;
            let fm: Vec<bool> = pred.data().iter().map(|&v| v >= t).collect();
            e_measure_binary(&fm, &g)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Nearest foreground pixel by exhaustive search; ties go to the smallest
/// `(y, x)`.
pub fn nearest_fg(g: &[bool], h: usize, w: usize, y: usize, x: usize) -> (f64, usize, usize) {
    let mut best = (usize::MAX, 0, 0);
    for yy in 0..h {
        for xx in 0..w {
            if g[yy * w + xx] {
                let d2 = (yy as isize - y as isize).pow(2) as usize + (xx as isize - x as isize).pow(2) as usize;
                if d2 < best.0 {
                    best = (d2, yy, xx);
                }
            }
        }
    }
    ((best.0 as f64).sqrt(), best.1, best.2)
}

pub fn weighted_f(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = gt.dims();
    let g = bits(gt);
    if !g.iter().any(|&b| b) {
        return 0.0;
    }
    let gv = |i: usize| if g[i] { 1.0 } else { 0.0 };
    let e: Vec<f64> = (0..h * w).map(|i| (pred.data()[i] - gv(i)).abs()).collect();
    let mut et = e.clone();
    let mut dist = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !g[i] {
                let (d, ny, nx) = nearest_fg(&g, h, w, y, x);
                et[i] = e[ny * w + nx];
                dist[i] = d;
            }
        }
    }
    // 7x7 Gaussian, sigma 5, unit sum.
    let mut k = [[0.0f64; 7]; 7];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(a * a + b * b) / (2.0 * 25.0)).exp();
        }
    }
    let ksum: f64 = k.iter().flatten().sum();
    let mut ea = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -3..=3isize {
                for dx in -3..=3isize {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += k[(dy + 3) as usize][(dx + 3) as usize] / ksum * et[(yy as usize) * w + xx as usize];
                    }
                }
            }
            ea[(y as usize) * w + x as usize] = acc;
        }
    }
    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let m = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if g[i] { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp() };
        ew[i] = m * b;
    }
    let fg: Vec<usize> = (0..h * w).filter(|&i| g[i]).collect();
    let tpw = fg.len() as f64 - fg.iter().map(|&i| ew[i]).sum::<f64>();
    let fpw: f64 = (0..h * w).filter(|&i| !g[i]).map(|i| ew[i]).sum();
    let r = 1.0 - fg.iter().map(|&i| ew[i]).sum::<f64>() / fg.len() as f64;
    let p = tpw / (tpw + fpw + EPS);
    2.0 * r * p / (r + p + EPS)
}
