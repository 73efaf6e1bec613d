//! Primitive forward and backward kernels.
//!
//! Image tensors are `(C, H, W)` or batched `(N, C, H, W)`; convolution
//! kernels are `(O, C, KH, KW)`; dense weights are `(out, in)`. No
//! broadcasting: elementwise binary ops require identical shapes.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Real(f64),
    Ints(Vec<usize>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// `x · Wᵀ (+ b)`; the bias input is optional.
    Dense,
    Relu,
    Tanh,
    /// Non-overlapping max pool (stride = window size, floor).
    MaxPool2d {
        size: usize,
    },
    GlobalAvgPool,
    /// Softmax over the last axis.
    Softmax,
    /// Train-mode inverted dropout; the mask is drawn from `seed`.
    Dropout {
        rate: f64,
        seed: u64,
    },
    Add,
    Scale(f64),
    Concat {
        axis: usize,
    },
    Mul,
    Sum,
    Mean,
    Log,
    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    MatMul,
    Reshape(Vec<usize>),
}

fn attr_usize(attrs: &Attrs, key: &str, default: Option<usize>) -> Result<usize> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        Some(other) => Err(Error::invalid(format!(
            "attr `{key}` must be a non-negative int, got {other:?}"
        ))),
        None => default.ok_or_else(|| Error::invalid(format!("missing attr `{key}`"))),
    }
}

fn attr_real(attrs: &Attrs, key: &str) -> Result<f64> {
    match attrs.get(key) {
        Some(AttrValue::Real(v)) => Ok(*v),
        Some(AttrValue::Int(v)) => Ok(*v as f64),
        Some(other) => Err(Error::invalid(format!("attr `{key}` must be real, got {other:?}"))),
        None => Err(Error::invalid(format!("missing attr `{key}`"))),
    }
}

impl Primitive {
    /// Build a primitive from a kind id and attribute map.
    pub fn parse(kind: &str, attrs: &Attrs) -> Result<Self> {
        Ok(match kind {
            "conv2d" => Primitive::Conv2d {
                stride: attr_usize(attrs, "stride", Some(1))?,
                pad: attr_usize(attrs, "pad", Some(0))?,
            },
            "dense" => Primitive::Dense,
            "relu" => Primitive::Relu,
            "tanh" => Primitive::Tanh,
            "maxpool2d" => Primitive::MaxPool2d {
                size: attr_usize(attrs, "size", Some(2))?,
            },
            "global_avg_pool" => Primitive::GlobalAvgPool,
            "softmax" => Primitive::Softmax,
            "dropout" => Primitive::Dropout {
                rate: attr_real(attrs, "rate")?,
                seed: attr_usize(attrs, "seed", Some(0))? as u64,
            },
            "add" => Primitive::Add,
            "scale" => Primitive::Scale(attr_real(attrs, "factor")?),
            "concat" => Primitive::Concat {
                axis: attr_usize(attrs, "axis", Some(0))?,
            },
            "mul" => Primitive::Mul,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "log" => Primitive::Log,
            "matmul" => Primitive::MatMul,
            "reshape" => match attrs.get("shape") {
                Some(AttrValue::Ints(s)) => Primitive::Reshape(s.clone()),
                _ => return Err(Error::invalid("reshape needs an Ints `shape` attr")),
            },
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Dense => "dense",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Softmax => "softmax",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Add => "add",
            Primitive::Scale(_) => "scale",
            Primitive::Concat { .. } => "concat",
            Primitive::Mul => "mul",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Log => "log",
            Primitive::MatMul => "matmul",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

/// Values a primitive keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    None,
    Indices(Vec<usize>),
    Mask(Vec<T>),
}

/// Evaluate a primitive without recording it.
pub fn primitive_forward<T: Real>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    forward(prim, inputs).map(|(t, _)| t)
}

fn arity(prim: &Primitive, inputs: usize, lo: usize, hi: usize) -> Result<()> {
    if inputs < lo || inputs > hi {
        return Err(Error::shape(
            prim.name(),
            format!("expected {lo}..={hi} inputs, got {inputs}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dense kernels (row-major)

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    batched: bool,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::shape(
            op,
            format!("input must be C×H×W or N×C×H×W, got {shape:?}"),
        )),
    }
}

fn conv_geom<T: Real>(
    stride: usize,
    pad: usize,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<ConvGeom> {
    let (n, c, h, wd, batched) = image_dims("conv2d", x.shape())?;
    let [o, kc, kh, kw] = *w.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be O×C×KH×KW, got {:?}", w.shape()),
        ));
    };
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be ≥ 1"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            ),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{o}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
        stride,
        pad,
        batched,
    })
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in seg.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[ii as usize * g.w + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(stride: usize, pad: usize, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
    let g = conv_geom(stride, pad, x, w, b)?;
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut col = vec![T::zero(); k * p];
    for ni in 0..g.n {
        im2col(
            &g,
            &x.values()[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w],
            &mut col,
        );
        let dst = &mut out[ni * g.o * p..(ni + 1) * g.o * p];
        if let Some(b) = b {
            for (oi, &bv) in b.values().iter().enumerate() {
                dst[oi * p..(oi + 1) * p].fill(bv);
            }
        }
        gemm_nn(g.o, k, p, w.values(), &col, dst);
    }
    let shape = if g.batched {
        vec![g.n, g.o, g.ho, g.wo]
    } else {
        vec![g.o, g.ho, g.wo]
    };
    Tensor::new(shape, out)
}

fn conv_backward<T: Real>(
    stride: usize,
    pad: usize,
    inputs: &[&Tensor<T>],
    gout: &[T],
    need: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
    let g = conv_geom(stride, pad, x, w, b)?;
    let (k, p) = (g.k(), g.p());
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut db = (b.is_some() && need.get(2).copied().unwrap_or(false)).then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    let img = g.c * g.h * g.w;
    for ni in 0..g.n {
        let go = &gout[ni * g.o * p..(ni + 1) * g.o * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&g, &x.values()[ni * img..(ni + 1) * img], &mut col);
            gemm_nt(g.o, p, k, go, &col, dw);
        }
        if let Some(db) = db.as_mut() {
            for (oi, d) in db.iter_mut().enumerate() {
                *d += go[oi * p..(oi + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcol.fill(T::zero());
            gemm_tn(g.o, k, p, w.values(), go, &mut dcol);
            col2im(&g, &dcol, &mut dx[ni * img..(ni + 1) * img]);
        }
    }
    let mut out = vec![dx, dw];
    if b.is_some() {
        out.push(db);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dense / matmul

fn dense_dims<T: Real>(inputs: &[&Tensor<T>]) -> Result<(usize, usize, usize)> {
    let (x, w) = (inputs[0], inputs[1]);
    let (n, fin) = match *x.shape() {
        [f] => (1, f),
        [n, f] => (n, f),
        _ => {
            return Err(Error::shape(
                "dense",
                format!("input must be rank 1 or 2, got {:?}", x.shape()),
            ))
        }
    };
    let [fout, win] = *w.shape() else {
        return Err(Error::shape(
            "dense",
            format!("weight must be out×in, got {:?}", w.shape()),
        ));
    };
    if win != fin {
        return Err(Error::shape(
            "dense",
            format!("weight expects {win} inputs, input has {fin}"),
        ));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [fout] {
            return Err(Error::shape(
                "dense",
                format!("bias must be [{fout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok((n, fin, fout))
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize, bool)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n, false)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n, true)),
        (sa, sb) => Err(Error::shape("matmul", format!("incompatible operands {sa:?} · {sb:?}"))),
    }
}

// ---------------------------------------------------------------------------

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn pool_geom(shape: &[usize], size: usize) -> Result<(usize, usize, usize, usize, usize, usize, bool)> {
    let (n, c, h, w, batched) = image_dims("maxpool2d", shape)?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {size} does not fit input {h}×{w}"),
        ));
    }
    Ok((n * c, h, w, h / size, w / size, size, batched))
}

pub(crate) fn forward<T: Real>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    use Primitive::*;
    let unary = |inputs: &[&Tensor<T>]| -> Result<()> { arity(prim, inputs.len(), 1, 1) };
    let out = match prim {
        Conv2d { stride, pad } => {
            arity(prim, inputs.len(), 2, 3)?;
            conv_forward(*stride, *pad, inputs)?
        }
        Dense => {
            arity(prim, inputs.len(), 2, 3)?;
            let (n, fin, fout) = dense_dims(inputs)?;
            let mut y = vec![T::zero(); n * fout];
            if let Some(b) = inputs.get(2) {
                for row in y.chunks_mut(fout) {
                    row.copy_from_slice(b.values());
                }
            }
            gemm_nt(n, fin, fout, inputs[0].values(), inputs[1].values(), &mut y);
            let shape = if inputs[0].rank() == 1 {
                vec![fout]
            } else {
                vec![n, fout]
            };
            Tensor::new(shape, y)?
        }
        Relu => {
            unary(inputs)?;
            inputs[0].map(|v| if v > T::zero() { v } else { T::zero() })
        }
        Tanh => {
            unary(inputs)?;
            inputs[0].map(|v| v.tanh())
        }
        MaxPool2d { size } => {
            unary(inputs)?;
            let x = inputs[0];
            let (planes, h, w, ho, wo, k, batched) = pool_geom(x.shape(), *size)?;
            let mut y = Vec::with_capacity(planes * ho * wo);
            let mut idx = Vec::with_capacity(planes * ho * wo);
            let xv = x.values();
            for pl in 0..planes {
                let base = pl * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = base + oi * k * w + oj * k;
                        for di in 0..k {
                            for dj in 0..k {
                                let at = base + (oi * k + di) * w + oj * k + dj;
                                if xv[at] > xv[best] {
                                    best = at;
                                }
                            }
                        }
                        idx.push(best);
                        y.push(xv[best]);
                    }
                }
            }
            let s = x.shape();
            let shape = if batched {
                vec![s[0], s[1], ho, wo]
            } else {
                vec![s[0], ho, wo]
            };
            return Ok((Tensor::new(shape, y)?, Saved::Indices(idx)));
        }
        GlobalAvgPool => {
            unary(inputs)?;
            let x = inputs[0];
            let (n, c, h, w, batched) = image_dims("global_avg_pool", x.shape())?;
            let area = T::of((h * w) as f64);
            let y: Vec<T> = x
                .values()
                .chunks(h * w)
                .map(|pl| pl.iter().copied().sum::<T>() / area)
                .collect();
            Tensor::new(if batched { vec![n, c] } else { vec![c] }, y)?
        }
        Softmax => {
            unary(inputs)?;
            let x = inputs[0];
            let k = last_axis(x.shape());
            let mut y = x.values().to_vec();
            for row in y.chunks_mut(k) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        }
        Dropout { rate, seed } => {
            unary(inputs)?;
            if !(0.0..1.0).contains(rate) {
                return Err(Error::invalid(format!("dropout rate {rate} outside [0,1)")));
            }
            let keep = 1.0 - rate;
            let scale = T::of(1.0 / keep);
            let mut rng = crate::seed::rng(*seed);
            let mask: Vec<T> = (0..inputs[0].len())
                .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                .collect();
            let y: Vec<T> = inputs[0].values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            return Ok((Tensor::new(inputs[0].shape().to_vec(), y)?, Saved::Mask(mask)));
        }
        Add | Mul => {
            arity(prim, inputs.len(), 2, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(prim.name(), a, b)?;
            let y = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| if matches!(prim, Add) { x + y } else { x * y })
                .collect();
            Tensor::new(a.shape().to_vec(), y)?
        }
        Scale(f) => {
            unary(inputs)?;
            let f = T::of(*f);
            inputs[0].map(|v| v * f)
        }
        Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape("concat", "no inputs"));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis} out of range for {first:?}"),
                ));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let ok =
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
                }
                total += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut y = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let blk = t.shape()[*axis] * inner;
                    y.extend_from_slice(&t.values()[o * blk..(o + 1) * blk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, y)?
        }
        Sum | Mean => {
            unary(inputs)?;
            let s: T = inputs[0].values().iter().copied().sum();
            let v = if matches!(prim, Mean) {
                s / T::of(inputs[0].len() as f64)
            } else {
                s
            };
            Tensor::scalar(v)
        }
        Log => {
            unary(inputs)?;
            let y = inputs[0].map(|v| v.ln());
            if !y.is_finite() {
                return Err(Error::NonFinite("log of a non-positive value".into()));
            }
            y
        }
        MatMul => {
            arity(prim, inputs.len(), 2, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (bs, m, k, n, batched) = matmul_dims(a, b)?;
            let mut y = vec![T::zero(); bs * m * n];
            for bi in 0..bs {
                gemm_nn(
                    m,
                    k,
                    n,
                    &a.values()[bi * m * k..(bi + 1) * m * k],
                    &b.values()[bi * k * n..(bi + 1) * k * n],
                    &mut y[bi * m * n..(bi + 1) * m * n],
                );
            }
            Tensor::new(if batched { vec![bs, m, n] } else { vec![m, n] }, y)?
        }
        Reshape(shape) => {
            unary(inputs)?;
            inputs[0].clone().with_requires_grad(false).reshape(shape)?
        }
    };
    Ok((out.with_requires_grad(false), Saved::None))
}

/// Gradients of a primitive's inputs given the gradient of its output.
/// Entries are `None` where `need` is false.
pub(crate) fn backward<T: Real>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    gout: &[T],
    need: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    use Primitive::*;
    let only = |v: Vec<T>| vec![Some(v)];
    Ok(match prim {
        Conv2d { stride, pad } => conv_backward(*stride, *pad, inputs, gout, need)?,
        Dense => {
            let (n, fin, fout) = dense_dims(inputs)?;
            let (x, w) = (inputs[0], inputs[1]);
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * fin];
                gemm_nn(n, fout, fin, gout, w.values(), &mut dx);
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); fout * fin];
                gemm_tn(n, fout, fin, gout, x.values(), &mut dw);
                dw
            });
            let mut out = vec![dx, dw];
            if inputs.len() == 3 {
                out.push(need[2].then(|| {
                    let mut db = vec![T::zero(); fout];
                    for row in gout.chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    db
                }));
            }
            out
        }
        Relu => only(
            inputs[0]
                .values()
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        ),
        Tanh => only(
            output
                .values()
                .iter()
                .zip(gout)
                .map(|(&y, &g)| g * (T::one() - y * y))
                .collect(),
        ),
        MaxPool2d { .. } => {
            let Saved::Indices(idx) = saved else {
                unreachable!("maxpool without saved indices")
            };
            let mut dx = vec![T::zero(); inputs[0].len()];
            for (&i, &g) in idx.iter().zip(gout) {
                dx[i] += g;
            }
            only(dx)
        }
        GlobalAvgPool => {
            let (_, _, h, w, _) = image_dims("global_avg_pool", inputs[0].shape())?;
            let area = T::of((h * w) as f64);
            let mut dx = Vec::with_capacity(inputs[0].len());
            for &g in gout {
                dx.extend(std::iter::repeat_n(g / area, h * w));
            }
            only(dx)
        }
        Softmax => {
            let k = last_axis(output.shape());
            let mut dx = vec![T::zero(); output.len()];
            for ((y, g), d) in output.values().chunks(k).zip(gout.chunks(k)).zip(dx.chunks_mut(k)) {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                    *dv = yv * (gv - dot);
                }
            }
            only(dx)
        }
        Dropout { .. } => {
            let Saved::Mask(mask) = saved else {
                unreachable!("dropout without saved mask")
            };
            only(gout.iter().zip(mask).map(|(&g, &m)| g * m).collect())
        }
        Add => vec![need[0].then(|| gout.to_vec()), need[1].then(|| gout.to_vec())],
        Mul => {
            let (a, b) = (inputs[0].values(), inputs[1].values());
            vec![
                need[0].then(|| gout.iter().zip(b).map(|(&g, &v)| g * v).collect()),
                need[1].then(|| gout.iter().zip(a).map(|(&g, &v)| g * v).collect()),
            ]
        }
        Scale(f) => {
            let f = T::of(*f);
            only(gout.iter().map(|&g| g * f).collect())
        }
        Concat { axis } => {
            let inner: usize = output.shape()[axis + 1..].iter().product();
            let outer: usize = output.shape()[..*axis].iter().product();
            let total = output.shape()[*axis] * inner;
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (t, &nd) in inputs.iter().zip(need) {
                let blk = t.shape()[*axis] * inner;
                out.push(nd.then(|| {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        d.extend_from_slice(&gout[o * total + offset..o * total + offset + blk]);
                    }
                    d
                }));
                offset += blk;
            }
            out
        }
        Sum => only(vec![gout[0]; inputs[0].len()]),
        Mean => {
            let n = T::of(inputs[0].len() as f64);
            only(vec![gout[0] / n; inputs[0].len()])
        }
        Log => only(inputs[0].values().iter().zip(gout).map(|(&x, &g)| g / x).collect()),
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (bs, m, k, n, _) = matmul_dims(a, b)?;
            let mut da = need[0].then(|| vec![T::zero(); a.len()]);
            let mut db = need[1].then(|| vec![T::zero(); b.len()]);
            for bi in 0..bs {
                let g = &gout[bi * m * n..(bi + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    gemm_nt(
                        m,
                        n,
                        k,
                        g,
                        &b.values()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
                if let Some(db) = db.as_mut() {
                    gemm_tn(
                        m,
                        k,
                        n,
                        &a.values()[bi * m * k..(bi + 1) * m * k],
                        g,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
            vec![da, db]
        }
        Reshape(_) => only(gout.to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_kernel_conv_returns_input() {
        let x = t(&[1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = primitive_forward(&Primitive::Conv2d { stride: 1, pad: 0 }, &[&x, &k]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn diagonal_kernel_conv() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = primitive_forward(&Primitive::Conv2d { stride: 1, pad: 0 }, &[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[5.0]);
    }

    #[test]
    fn padded_strided_conv_shape() {
        let x = Tensor::<f64>::zeros(&[2, 3, 7, 7]);
        let k = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let y = primitive_forward(&Primitive::Conv2d { stride: 2, pad: 1 }, &[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_extents() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = primitive_forward(&Primitive::Conv2d { stride: 1, pad: 0 }, &[&x, &k]).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("conv2d") && msg.contains('3') && msg.contains('2'),
            "{msg}"
        );
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        for c in [-3.0, 0.0, 7.5, 1e3] {
            let y = primitive_forward(&Primitive::Softmax, &[&t(&[5], &[c; 5])]).unwrap();
            for v in y.values() {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = Primitive::parse("gelu", &Attrs::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownPrimitive(k) if k == "gelu"));
        let mut attrs = Attrs::new();
        attrs.insert("stride".into(), AttrValue::Int(2));
        assert_eq!(
            Primitive::parse("conv2d", &attrs).unwrap(),
            Primitive::Conv2d { stride: 2, pad: 0 }
        );
    }

    #[test]
    fn dropout_rate_range() {
        let x = t(&[4], &[1.0; 4]);
        assert!(primitive_forward(&Primitive::Dropout { rate: 1.0, seed: 1 }, &[&x]).is_err());
        let y = primitive_forward(&Primitive::Dropout { rate: 0.0, seed: 1 }, &[&x]).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn maxpool_and_concat_shapes() {
        let x = t(&[1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let y = primitive_forward(&Primitive::MaxPool2d { size: 2 }, &[&x]).unwrap();
        assert_eq!(y.values(), &[5.0, 7.0, 13.0, 15.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = primitive_forward(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.values(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn log_of_nonpositive_errors() {
        assert!(matches!(
            primitive_forward(&Primitive::Log, &[&t(&[2], &[1.0, 0.0])]),
            Err(Error::NonFinite(_))
        ));
    }
}
