//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and returns one gradient slot per node.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulChannel {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Resize(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics computed by a training-mode batch norm, handed back so
/// the caller can update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Conv { x, w, b }))
    }

    /// Training-mode batch normalisation over (N, H, W) per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch norm affine length differs from C"));
        }
        let count = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += xv.plane(b, ch).iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for b in 0..n {
            for ch in 0..c {
                var[ch] += xv
                    .plane(b, ch)
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let var_unbiased = var
            .iter()
            .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / count + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                for (o, v) in xhat.plane_mut(b, ch).iter_mut().zip(src) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.affine_from_xhat(&xhat, gamma, beta);
        let stats = BatchStats { mean, var_unbiased };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        if mean.len() != c || var.len() != c || self.value(scale).len() != c {
            return Err(Error::shape("batch norm statistics length differs from C"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                for (o, v) in xhat.plane_mut(b, ch).iter_mut().zip(src) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.affine_from_xhat(&xhat, scale, shift);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    fn affine_from_xhat(&self, xhat: &Tensor, gamma: Var, beta: Var) -> Tensor {
        let [n, c, _, _] = xhat.shape();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                for v in out.plane_mut(b, ch) {
                    *v = *v * g[ch] + bt[ch];
                }
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(bv)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiply every spatial position of `x` by a per-(item, channel) gate
    /// of shape `[N, C, 1, 1]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        let [n, c, _, _] = xv.shape();
        if gv.shape() != [n, c, 1, 1] {
            return Err(Error::shape(format!(
                "channel gate {:?} does not match {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for b in 0..n {
            for ch in 0..c {
                let g = gv.at(b, ch, 0, 0);
                for v in out.plane_mut(b, ch) {
                    *v *= g;
                }
            }
        }
        Ok(self.push(out, Op::MulChannel { x, gate }))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .shape();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape(format!("concat {:?} with {:?}", s, first)));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let mut out = Tensor::zeros([n, channels, h, w]);
        for b in 0..n {
            let dst = out.item_mut(b);
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.item(b);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        if xv.h() == h && xv.w() == w {
            return x;
        }
        let out = tensor::resize(xv, h, w);
        self.push(out, Op::Resize(x))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if k == 0 || !xv.h().is_multiple_of(k) || !xv.w().is_multiple_of(k) {
            return Err(Error::shape(format!(
                "avg pool {k} does not tile {}x{}",
                xv.h(),
                xv.w()
            )));
        }
        let out = tensor::avg_pool(xv, k);
        Ok(self.push(out, Op::AvgPool { x, k }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 1, 1]);
        let norm = 1.0 / (h * w) as f64;
        for b in 0..n {
            for ch in 0..c {
                out.plane_mut(b, ch)[0] = xv.plane(b, ch).iter().sum::<f64>() * norm;
            }
        }
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// Reverse sweep. `seeds` gives d(objective)/d(node) for each output
    /// node that feeds the objective.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, g) in seeds {
            same_shape(self.value(*v), g, "gradient seed")?;
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for id in (0..=last).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma).data();
                    let [n, c, h, w] = g.shape();
                    let count = (n * h * w) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            for (gy, xh) in g.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                                dgamma[ch] += gy * xh;
                                dbeta[ch] += gy;
                            }
                        }
                    }
                    let mut gx = Tensor::zeros(g.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / count;
                            let src = g.plane(b, ch);
                            let xh = xhat.plane(b, ch);
                            for (i, o) in gx.plane_mut(b, ch).iter_mut().enumerate() {
                                *o = k * (count * src[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, Tensor::vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::vector(dbeta));
                }
                Op::ChannelAffine {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let sc = self.value(*scale).data();
                    let [n, c, _, _] = g.shape();
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    let mut gx = Tensor::zeros(g.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let src = g.plane(b, ch);
                            let xh = xhat.plane(b, ch);
                            for (i, o) in gx.plane_mut(b, ch).iter_mut().enumerate() {
                                dscale[ch] += src[i] * xh[i];
                                dshift[ch] += src[i];
                                *o = src[i] * sc[ch] * inv_std[ch];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *scale, Tensor::vector(dscale));
                    accumulate(&mut grads, *shift, Tensor::vector(dshift));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let mut gx = g;
                    for (gv, v) in gx.data_mut().iter_mut().zip(xv) {
                        if *v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let mut gx = g;
                    for (gv, y) in gx.data_mut().iter_mut().zip(yv) {
                        *gv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = g.clone();
                    for (gv, y) in ga.data_mut().iter_mut().zip(bv) {
                        *gv *= y;
                    }
                    let mut gb = g;
                    for (gv, x) in gb.data_mut().iter_mut().zip(av) {
                        *gv *= x;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulChannel { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let [n, c, _, _] = xv.shape();
                    let mut gx = g.clone();
                    let mut gg = Tensor::zeros(gv.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let gate_v = gv.at(b, ch, 0, 0);
                            let mut acc = 0.0;
                            for (o, xval) in gx.plane_mut(b, ch).iter_mut().zip(xv.plane(b, ch)) {
                                acc += *o * xval;
                                *o *= gate_v;
                            }
                            gg.plane_mut(b, ch)[0] = acc;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gate, gg);
                }
                Op::Concat(parts) => {
                    let n = g.n();
                    let mut offset_c = 0;
                    for &p in parts {
                        let s = self.value(p).shape();
                        let per = s[1] * s[2] * s[3];
                        let mut gp = Tensor::zeros(s);
                        for b in 0..n {
                            let src = g.item(b);
                            let start = offset_c * s[2] * s[3];
                            gp.item_mut(b).copy_from_slice(&src[start..start + per]);
                        }
                        offset_c += s[1];
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Resize(x) => {
                    let xv = self.value(*x);
                    let gx = tensor::resize_backward(&g, xv.h(), xv.w());
                    accumulate(&mut grads, *x, gx);
                }
                Op::AvgPool { x, k } => {
                    accumulate(&mut grads, *x, tensor::avg_pool_backward(&g, *k));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.shape();
                    let norm = 1.0 / (h * w) as f64;
                    let mut gx = Tensor::zeros(xv.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let gvv = g.at(b, ch, 0, 0) * norm;
                            gx.plane_mut(b, ch).fill(gvv);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { slots: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}
