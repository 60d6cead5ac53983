//! Reverse-mode differentiation over a per-sample operation tape.
//!
//! A [`Graph`] borrows the parameter tensors, records every operation of one
//! forward pass together with the activations it needs, and walks the tape
//! backwards from a seed gradient. Graphs are cheap and single-sample; batch
//! parallelism happens one level up by building one graph per item.

use std::f64::consts::PI;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Horizontal padding rule of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HPad {
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub hpad: HPad,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - kh) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - kw) / self.stride.1 + 1,
        )
    }
}

/// Sparse linear map along the last axis: `out[.., j] = sum w * in[.., src]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMix {
    pub in_width: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl ColumnMix {
    pub fn out_width(&self) -> usize {
        self.taps.len()
    }

    /// `[last, 0, 1, .., last, 0]`: one wrapped column on each side.
    pub fn circular_extend(w: usize) -> Self {
        let taps = (0..w + 2).map(|j| vec![((j + w - 1) % w, 1.0)]).collect();
        Self { in_width: w, taps }
    }

    /// `out[j] = in[(j + k) mod w]`.
    pub fn roll(w: usize, k: usize) -> Self {
        let taps = (0..w).map(|j| vec![((j + k) % w, 1.0)]).collect();
        Self { in_width: w, taps }
    }

    /// Places `w` columns at `offset` inside `out` zero columns.
    pub fn place(w: usize, out: usize, offset: usize) -> Self {
        let taps = (0..out)
            .map(|j| {
                if (offset..offset + w).contains(&j) {
                    vec![(j - offset, 1.0)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { in_width: w, taps }
    }

    /// Linear resampling with half-pixel centers; `circular` wraps the seam,
    /// otherwise edges clamp.
    pub fn linear_resize(w: usize, out: usize, circular: bool) -> Self {
        let taps = (0..out)
            .map(|j| {
                let x = (j as f64 + 0.5) * w as f64 / out as f64 - 0.5;
                let x0 = x.floor();
                let f = x - x0;
                let idx = |i: i64| -> usize {
                    if circular {
                        i.rem_euclid(w as i64) as usize
                    } else {
                        i.clamp(0, w as i64 - 1) as usize
                    }
                };
                let (a, b) = (idx(x0 as i64), idx(x0 as i64 + 1));
                if f == 0.0 || a == b {
                    vec![(a, 1.0)]
                } else {
                    vec![(a, 1.0 - f), (b, f)]
                }
            })
            .collect();
        Self { in_width: w, taps }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let w = *x.shape().last().expect("rank >= 1");
        assert_eq!(w, self.in_width, "column mix expects width {}", self.in_width);
        let rows = x.len() / w;
        let ow = self.out_width();
        let mut out = vec![0.0; rows * ow];
        for r in 0..rows {
            let src = &x.data()[r * w..(r + 1) * w];
            let dst = &mut out[r * ow..(r + 1) * ow];
            for (j, taps) in self.taps.iter().enumerate() {
                dst[j] = taps.iter().map(|&(s, wt)| wt * src[s]).sum();
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = ow;
        Tensor::from_vec(&shape, out)
    }

    fn backward(&self, g: &Tensor) -> Tensor {
        let ow = self.out_width();
        let rows = g.len() / ow;
        let w = self.in_width;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let src = &g.data()[r * ow..(r + 1) * ow];
            let dst = &mut out[r * w..(r + 1) * w];
            for (j, taps) in self.taps.iter().enumerate() {
                for &(s, wt) in taps {
                    dst[s] += wt * src[j];
                }
            }
        }
        let mut shape = g.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Tensor::from_vec(&shape, out)
    }
}

enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Gelu(Var),
    Add(Var, Var),
    Reshape(Var),
    Transpose(Var),
    ColumnMix(Var, Arc<ColumnMix>),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        probs: Vec<f64>,
    },
    Squash(Var),
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed like the parameter slice.
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    pub inputs: Vec<(Var, Tensor)>,
}

pub const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x: [ci, h, w]`, `w: [co, ci, kh, kw]`, `b: [co]` -> `[co, ho, wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let out = conv2d_forward(xv, wv, bv, geom);
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transposed();
        self.push(out, Op::Transpose(x))
    }

    pub fn column_mix(&mut self, x: Var, mix: Arc<ColumnMix>) -> Var {
        let out = mix.apply(self.value(x));
        self.push(out, Op::ColumnMix(x, mix))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims differ");
            lead += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()))
    }

    /// `x: [l, i]`, `w: [i, o]`, `b: [o]` -> `[l, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (l, i) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(1);
        assert_eq!(wv.dim(0), i, "linear input width mismatch");
        let mut out = vec![0.0; l * o];
        for r in 0..l {
            out[r * o..(r + 1) * o].copy_from_slice(bv.data());
        }
        gemm(l, i, o, xv.data(), false, wv.data(), false, &mut out, true);
        self.push(Tensor::from_vec(&[l, o], out), Op::Linear { x, w, b })
    }

    /// Normalizes each row of `x: [l, c]`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let (l, c) = (xv.dim(0), xv.dim(1));
        let mut xhat = vec![0.0; l * c];
        let mut rstd = vec![0.0; l];
        let mut out = vec![0.0; l * c];
        for r in 0..l {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(Tensor::from_vec(&[l, c], out), Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Multi-head softmax attention restricted to consecutive windows of
    /// `window` rows (`window == l` attends globally). `q, k, v: [l, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, c) = (qv.dim(0), qv.dim(1));
        assert!(c % heads == 0 && l % window == 0, "attention shape");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; l * c];
        let mut probs = vec![0.0; (l / window) * heads * window * window];
        for (wi, s) in (0..l).step_by(window).enumerate() {
            for h in 0..heads {
                let p = &mut probs[((wi * heads + h) * window * window)..][..window * window];
                for i in 0..window {
                    let qi = &qv.data()[(s + i) * c + h * dh..][..dh];
                    let mut max = f64::MIN;
                    for j in 0..window {
                        let kj = &kv.data()[(s + j) * c + h * dh..][..dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        p[i * window + j] = dot * scale;
                        max = max.max(dot * scale);
                    }
                    let mut z = 0.0;
                    for j in 0..window {
                        let e = (p[i * window + j] - max).exp();
                        p[i * window + j] = e;
                        z += e;
                    }
                    for j in 0..window {
                        p[i * window + j] /= z;
                    }
                    let oi = &mut out[(s + i) * c + h * dh..][..dh];
                    for j in 0..window {
                        let pij = p[i * window + j];
                        let vj = &vv.data()[(s + j) * c + h * dh..][..dh];
                        for d in 0..dh {
                            oi[d] += pij * vj[d];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[l, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                window,
                probs,
            },
        )
    }

    /// Maps raw scores `[2, l]` to ceiling latitudes `(0, pi/2)` (row 0) and
    /// floor latitudes `(-pi/2, 0)` (row 1).
    pub fn squash(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(0), 2);
        let l = xv.dim(1);
        let mut out = xv.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let s = if i < l { PI / 2.0 } else { -PI / 2.0 };
            *v = s * sigmoid(*v);
        }
        self.push(Tensor::from_vec(&[2, l], out), Op::Squash(x))
    }

    /// Back-propagates `seed` (the gradient of the scalar objective with
    /// respect to `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        grads[out.0] = Some(seed);
        let mut params: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        let mut inputs = Vec::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => inputs.push((Var(idx), g)),
                Op::Param(p) => match &mut params[*p] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), &g, *geom);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (gi, xi) in d.data_mut().iter_mut().zip(xv.data()) {
                        if *xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (gi, xi) in d.data_mut().iter_mut().zip(xv.data()) {
                        *gi *= gelu(*xi).1;
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshaped(&shape));
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transposed()),
                Op::ColumnMix(x, mix) => acc(&mut grads, *x, mix.backward(&g)),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n = self.value(p).len();
                        acc(&mut grads, p, Tensor::from_vec(&shape, g.data()[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (l, i) = (xv.dim(0), xv.dim(1));
                    let o = wv.dim(1);
                    let mut dx = vec![0.0; l * i];
                    gemm(l, o, i, g.data(), false, wv.data(), true, &mut dx, false);
                    let mut dw = vec![0.0; i * o];
                    gemm(i, l, o, xv.data(), true, g.data(), false, &mut dw, false);
                    let mut db = vec![0.0; o];
                    for r in 0..l {
                        for (d, gv) in db.iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                            *d += gv;
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[l, i], dx));
                    acc(&mut grads, *w, Tensor::from_vec(&[i, o], dw));
                    acc(&mut grads, *b, Tensor::from_vec(&[o], db));
                }
                Op::LayerNorm {
                    x,
                    g: gam,
                    b,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gam);
                    let (l, c) = (g.dim(0), g.dim(1));
                    let mut dx = vec![0.0; l * c];
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..l {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                            dg[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            dx[r * c + j] = rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[l, c], dx));
                    acc(&mut grads, *gam, Tensor::from_vec(&[c], dg));
                    acc(&mut grads, *b, Tensor::from_vec(&[c], dbeta));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    window,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &g,
                        *heads,
                        *window,
                        probs,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Squash(x) => {
                    let xv = self.value(*x);
                    let l = xv.dim(1);
                    let mut d = g;
                    for (i, (gi, xi)) in d.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        let s = sigmoid(*xi);
                        let sign = if i < l { PI / 2.0 } else { -PI / 2.0 };
                        *gi *= sign * s * (1.0 - s);
                    }
                    acc(&mut grads, *x, d);
                }
            }
        }
        Gradients { params, inputs }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn im2col(x: &Tensor, kh: usize, kw: usize, geom: ConvGeom) -> (Vec<f64>, usize, usize) {
    let (ci, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = geom.out_size(h, w, kh, kw);
    let n = ho * wo;
    let mut col = vec![0.0; ci * kh * kw * n];
    let xd = x.data();
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * n..][..n];
                for oh in 0..ho {
                    let y = (oh * geom.stride.0 + i) as i64 - geom.pad.0 as i64;
                    if y < 0 || y >= h as i64 {
                        continue;
                    }
                    let src = &xd[(c * h + y as usize) * w..][..w];
                    for ow in 0..wo {
                        let xx = (ow * geom.stride.1 + j) as i64 - geom.pad.1 as i64;
                        let xx = match geom.hpad {
                            HPad::Circular => xx.rem_euclid(w as i64),
                            HPad::Zero if xx < 0 || xx >= w as i64 => continue,
                            HPad::Zero => xx,
                        };
                        row[oh * wo + ow] = src[xx as usize];
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

fn col2im(col: &[f64], shape: &[usize], kh: usize, kw: usize, geom: ConvGeom) -> Tensor {
    let (ci, h, w) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = geom.out_size(h, w, kh, kw);
    let n = ho * wo;
    let mut dx = vec![0.0; ci * h * w];
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * n..][..n];
                for oh in 0..ho {
                    let y = (oh * geom.stride.0 + i) as i64 - geom.pad.0 as i64;
                    if y < 0 || y >= h as i64 {
                        continue;
                    }
                    let dst = &mut dx[(c * h + y as usize) * w..][..w];
                    for ow in 0..wo {
                        let xx = (ow * geom.stride.1 + j) as i64 - geom.pad.1 as i64;
                        let xx = match geom.hpad {
                            HPad::Circular => xx.rem_euclid(w as i64),
                            HPad::Zero if xx < 0 || xx >= w as i64 => continue,
                            HPad::Zero => xx,
                        };
                        dst[xx as usize] += row[oh * wo + ow];
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeom) -> Tensor {
    assert_eq!(x.shape().len(), 3, "conv input must be [c, h, w]");
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    assert_eq!(x.dim(0), ci, "conv channel mismatch");
    let (col, ho, wo) = im2col(x, kh, kw, geom);
    let n = ho * wo;
    let mut out = vec![0.0; co * n];
    for o in 0..co {
        out[o * n..(o + 1) * n].fill(b.data()[o]);
    }
    gemm(co, ci * kh * kw, n, w.data(), false, &col, false, &mut out, true);
    Tensor::from_vec(&[co, ho, wo], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, geom: ConvGeom) -> (Tensor, Tensor, Tensor) {
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (col, ho, wo) = im2col(x, kh, kw, geom);
    let n = ho * wo;
    let k = ci * kh * kw;
    let mut dw = vec![0.0; co * k];
    gemm(co, n, k, g.data(), false, &col, true, &mut dw, false);
    let db: Vec<f64> = (0..co).map(|o| g.data()[o * n..(o + 1) * n].iter().sum()).collect();
    let mut dcol = vec![0.0; k * n];
    gemm(k, co, n, w.data(), true, g.data(), false, &mut dcol, false);
    let dx = col2im(&dcol, x.shape(), kh, kw, geom);
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[co], db))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    heads: usize,
    window: usize,
    probs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (l, c) = (q.dim(0), q.dim(1));
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; l * c];
    let mut dk = vec![0.0; l * c];
    let mut dv = vec![0.0; l * c];
    let mut dp = vec![0.0; window];
    for (wi, s) in (0..l).step_by(window).enumerate() {
        for h in 0..heads {
            let p = &probs[((wi * heads + h) * window * window)..][..window * window];
            for i in 0..window {
                let gi = &g.data()[(s + i) * c + h * dh..][..dh];
                // dP = dO V^T ; dV += P^T dO
                let mut dot = 0.0;
                for j in 0..window {
                    let vj = &v.data()[(s + j) * c + h * dh..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * p[i * window + j];
                    let pij = p[i * window + j];
                    let dvj = &mut dv[(s + j) * c + h * dh..][..dh];
                    for d in 0..dh {
                        dvj[d] += pij * gi[d];
                    }
                }
                for j in 0..window {
                    let ds = p[i * window + j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k.data()[(s + j) * c + h * dh..][..dh];
                    let qi = &q.data()[(s + i) * c + h * dh..][..dh];
                    {
                        let dqi = &mut dq[(s + i) * c + h * dh..][..dh];
                        for d in 0..dh {
                            dqi[d] += ds * kj[d];
                        }
                    }
                    let dkj = &mut dk[(s + j) * c + h * dh..][..dh];
                    for d in 0..dh {
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[l, c], dq),
        Tensor::from_vec(&[l, c], dk),
        Tensor::from_vec(&[l, c], dv),
    )
}
