//! Dense NCHW tensors in `f64` and the numeric kernels the autodiff tape is
//! built on (convolution, bilinear resampling, pooling).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "buffer of {} values cannot form a {:?} tensor",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// 1-D parameter vector stored as `[len, 1, 1, 1]`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: [data.len(), 1, 1, 1],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + c) * hh + y) * ww + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of one batch item, contiguous.
    pub fn item(&self, n: usize) -> &[f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * per..(n + 1) * per]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Copy of batch item `n` as a `[1, C, H, W]` tensor.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
        }
    }
}

/// Per-axis interpolation table for bilinear resampling with
/// half-pixel-centre (align-corners-false) coordinates.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(pos - i0 as f64);
        }
        AxisTaps { lo, hi, w_hi }
    }
}

/// Bilinear resize of one `h×w` plane into `oh×ow`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
        for ox in 0..ow {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Adjoint of [`resize_plane`]: scatters an `oh×ow` gradient back to `h×w`.
pub fn resize_plane_backward(grad: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut out = vec![0.0; h * w];
    for oy in 0..oh {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
        for ox in 0..ow {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let g = grad[oy * ow + ox];
            out[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
            out[y0 * w + x1] += g * (1.0 - wy) * wx;
            out[y1 * w + x0] += g * wy * (1.0 - wx);
            out[y1 * w + x1] += g * wy * wx;
        }
    }
    out
}

pub fn resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let p = resize_plane(x.plane(b, ch), h, w, oh, ow);
            out.plane_mut(b, ch).copy_from_slice(&p);
        }
    }
    out
}

pub fn resize_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = grad.shape;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let p = resize_plane_backward(grad.plane(b, ch), h, w, oh, ow);
            out.plane_mut(b, ch).copy_from_slice(&p);
        }
    }
    out
}

/// Non-overlapping `k×k` average pooling. Requires `k` to divide H and W.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                let oy = y / k;
                for xx in 0..w {
                    dst[oy * ow + xx / k] += src[y * w + xx] * norm;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad: &Tensor, k: usize) -> Tensor {
    let [n, c, oh, ow] = grad.shape;
    let (h, w) = (oh * k, ow * k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = grad.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y / k) * ow + xx / k] * norm;
                }
            }
        }
    }
    out
}

/// Unfold one `[C, H, W]` item into a `[C·k·k, H·W]` patch matrix for a
/// stride-1 convolution with zero padding `pad`.
fn im2col(item: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &item[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, out) in line.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        *out = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, item: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut item[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m×n] = beta·c + a[m×k] · b[k×n]`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices above cover every element addressed by the
    // (m, k, n) extents and strides passed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 "same" convolution. `weight` is `[Cout, Cin, k, k]`, `bias`
/// is a vector of length `Cout`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape;
    let [cout, wcin, k, k2] = weight.shape;
    if wcin != cin || k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape, x.shape
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv bias length differs from Cout"));
        }
    }
    let pad = k / 2;
    let hw = h * w;
    let rows = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    for b in 0..n {
        let src: &[f64] = if k == 1 {
            x.item(b)
        } else {
            im2col(x.item(b), cin, h, w, k, pad, &mut cols);
            &cols
        };
        let dst = out.item_mut(b);
        gemm(cout, rows, hw, &weight.data, false, src, false, 0.0, dst);
        if let Some(bias) = bias {
            for (co, bv) in bias.data.iter().enumerate() {
                for v in &mut dst[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, cin, h, w] = x.shape;
    let [cout, _, k, _] = weight.shape;
    let pad = k / 2;
    let hw = h * w;
    let rows = cin * k * k;
    let mut gx = Tensor::zeros(x.shape);
    let mut gw = Tensor::zeros(weight.shape);
    let mut gb = vec![0.0; cout];
    let mut cols = vec![0.0; rows * hw];
    let mut gcols = vec![0.0; rows * hw];
    for b in 0..n {
        let gy = grad.item(b);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += gy[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        if k == 1 {
            gemm(cout, hw, rows, gy, false, x.item(b), true, 1.0, &mut gw.data);
            gemm(rows, cout, hw, &weight.data, true, gy, false, 0.0, gx.item_mut(b));
        } else {
            im2col(x.item(b), cin, h, w, k, pad, &mut cols);
            gemm(cout, hw, rows, gy, false, &cols, true, 1.0, &mut gw.data);
            gemm(rows, cout, hw, &weight.data, true, gy, false, 0.0, &mut gcols);
            col2im(&gcols, cin, h, w, k, pad, gx.item_mut(b));
        }
    }
    (gx, gw, Tensor::vector(gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, bias: &Tensor) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let [cout, _, k, _] = wt.shape();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, cout, h, w]);
        for b in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        acc += wt.at(co, ci, ky, kx)
                                            * x.at(b, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(b, co, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: [usize; 4], a: f64, b: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|i| ((i as f64) * a + b).sin()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3] {
            let x = ramp([2, 3, 5, 4], 0.37, 0.1);
            let wt = ramp([4, 3, k, k], 0.91, 0.3);
            let b = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
            let fast = conv2d(&x, &wt, Some(&b)).unwrap();
            let slow = naive_conv(&x, &wt, &b);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> for the input gradient, and the weight
        // gradient is linear in the output gradient.
        let x = ramp([2, 2, 4, 5], 0.21, 0.7);
        let wt = ramp([3, 2, 3, 3], 0.53, 0.2);
        let g = ramp([2, 3, 4, 5], 0.17, 1.1);
        let y = conv2d(&x, &wt, None).unwrap();
        let (gx, gw, _) = conv2d_backward(&x, &wt, &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = wt.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        for (h, w, oh, ow) in [(4, 6, 8, 12), (8, 8, 3, 5), (5, 5, 5, 5), (1, 1, 4, 4)] {
            let x = ramp([1, 1, h, w], 0.3, 0.2);
            let g = ramp([1, 1, oh, ow], 0.7, 0.5);
            let y = resize(&x, oh, ow);
            let gx = resize_backward(&g, h, w);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full([1, 2, 3, 7], 0.25);
        let y = resize(&x, 11, 2);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_two_x_matches_half_pixel_convention() {
        // [0, 1] -> [0, 0.25, 0.75, 1] with half-pixel centres.
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn avg_pool_round_trip_shapes() {
        let x = ramp([1, 2, 8, 4], 0.1, 0.0);
        let y = avg_pool(&x, 4);
        assert_eq!(y.shape(), [1, 2, 2, 1]);
        let g = Tensor::full(y.shape(), 1.0);
        let gx = avg_pool_backward(&g, 4);
        assert!(gx.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }
}
