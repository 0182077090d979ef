//! Naive-loop reference network in 64-bit, generic over the scalar so the
//! same code runs on plain `f64` and on dual numbers.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::ops::{Add, Mul, Sub};

use crate::error::{dim_err, Error, Result};
use crate::netdef::{resolve_pool, LayerSpec, NetworkDef, ParamSet};
use crate::ops::PoolKind;
use crate::tangent::TangentParams;
use crate::tensor::Tensor;

pub trait Scalar: Copy + Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn zero() -> Self;
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn times(self, a: f64) -> Self;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn times(self, a: f64) -> Self {
        self * a
    }
}

/// `v + d * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual { v: self.v * o.v, d: self.v * o.d + self.d * o.v }
    }
}

impl Scalar for Dual {
    fn zero() -> Self {
        Dual { v: 0.0, d: 0.0 }
    }
    fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn times(self, a: f64) -> Self {
        Dual { v: self.v * a, d: self.d * a }
    }
}

/// Row-major n-d array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

pub type Array64 = Array<f64>;

impl<S: Scalar> Array<S> {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| S::constant(v as f64)).collect(),
        }
    }

    pub fn values(&self) -> Array64 {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }
}

impl Array64 {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, o: &Array64) -> Array64 {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&o.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Elementwise difference against an f32 tensor of the same shape.
    pub fn max_abs_diff(&self, t: &Tensor) -> Result<f64> {
        if t.shape() != self.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, t.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(t.data())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect())
    }
}

#[derive(Debug, Clone)]
struct RefLayer<S> {
    weight: Vec<S>,
    weight_shape: Vec<usize>,
    bias: Option<Vec<S>>,
    scale: f64,
}

#[derive(Debug, Clone)]
struct RefBn {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Network parameters lifted to scalar type `S`.
#[derive(Debug, Clone)]
pub struct RefNet<S> {
    layers: BTreeMap<String, RefLayer<S>>,
    bn: BTreeMap<String, RefBn>,
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Lifts `params`, building each entry from its base value and the matching
/// entry of `dir` (zero for layers outside theta2 or without a direction).
pub fn lift<S: Scalar>(
    params: &ParamSet,
    dir: Option<&TangentParams>,
    make: impl Fn(f64, f64) -> S,
) -> Result<RefNet<S>> {
    let mut layers = BTreeMap::new();
    for (name, p) in params.iter() {
        let blk = match dir {
            Some(d) if d.names().contains(&name) => Some(d.get(name)?),
            _ => None,
        };
        let combine = |base: &Tensor, dt: Option<&Tensor>| -> Vec<S> {
            match dt {
                Some(dt) => base
                    .data()
                    .iter()
                    .zip(dt.data())
                    .map(|(&b, &d)| make(b as f64, d as f64))
                    .collect(),
                None => base.data().iter().map(|&b| make(b as f64, 0.0)).collect(),
            }
        };
        let weight = combine(&p.weight, blk.map(|b| &b.weight));
        let bias = p
            .bias
            .as_ref()
            .map(|b| combine(b, blk.and_then(|bl| bl.bias.as_ref())));
        let scale = if p.ntk_scaled {
            1.0 / (p.fan_in() as f64).sqrt()
        } else {
            1.0
        };
        layers.insert(
            name.to_string(),
            RefLayer {
                weight,
                weight_shape: p.weight.shape().to_vec(),
                bias,
                scale,
            },
        );
    }
    let bn = params
        .bn_iter()
        .map(|(name, s)| {
            (
                name.to_string(),
                RefBn {
                    gamma: to64(&s.gamma),
                    beta: to64(&s.beta),
                    mean: to64(&s.mean),
                    var: to64(&s.var),
                },
            )
        })
        .collect();
    Ok(RefNet { layers, bn })
}

/// Parameters `theta + t * dir` in 64-bit.
pub fn lift_shifted(params: &ParamSet, dir: Option<&TangentParams>, t: f64) -> Result<RefNet<f64>> {
    lift(params, dir, |b, d| b + t * d)
}

/// Parameters as duals carrying `dir` as their tangent.
pub fn lift_dual(params: &ParamSet, dir: &TangentParams) -> Result<RefNet<Dual>> {
    lift(params, Some(dir), |v, d| Dual { v, d })
}

/// Nonsmooth choices made during a forward pass: ReLU signs and max-pool
/// winners, plus the smallest pre-activation magnitude seen.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub argmax: Vec<usize>,
    pub min_abs_preact: f64,
}

impl Default for Pattern {
    fn default() -> Self {
        Self {
            relu: Vec::new(),
            argmax: Vec::new(),
            min_abs_preact: f64::INFINITY,
        }
    }
}

impl Pattern {
    pub fn same_branches(&self, other: &Pattern) -> bool {
        self.relu == other.relu && self.argmax == other.argmax
    }
}

fn layer<'a, S>(net: &'a RefNet<S>, name: &str) -> Result<&'a RefLayer<S>> {
    net.layers
        .get(name)
        .ok_or_else(|| Error::Validation(format!("reference net has no layer {name}")))
}

fn conv<S: Scalar>(x: &Array<S>, p: &RefLayer<S>, stride: usize, pad: usize) -> Result<Array<S>> {
    let [n, c, h, w] = x.shape[..] else {
        return dim_err("reference conv needs rank 4");
    };
    let [k, wc, kh, kw] = p.weight_shape[..] else {
        return dim_err("reference conv weight needs rank 4");
    };
    if wc != c || h + 2 * pad < kh || w + 2 * pad < kw {
        return dim_err("reference conv shape mismatch");
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * k * oh * ow);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x.data[((ni * c + ci) * h + yy as usize) * w + xx as usize];
                                let wv = p.weight[((ki * c + ci) * kh + i) * kw + j];
                                acc = acc + wv * xv;
                            }
                        }
                    }
                    let mut v = acc.times(p.scale);
                    if let Some(b) = &p.bias {
                        v = v + b[ki];
                    }
                    out.push(v);
                }
            }
        }
    }
    Ok(Array { shape: vec![n, k, oh, ow], data: out })
}

fn dense<S: Scalar>(x: &Array<S>, p: &RefLayer<S>) -> Result<Array<S>> {
    let [n, d] = x.shape[..] else {
        return dim_err("reference dense needs rank 2");
    };
    let [wd, c] = p.weight_shape[..] else {
        return dim_err("reference dense weight needs rank 2");
    };
    if wd != d {
        return dim_err("reference dense shape mismatch");
    }
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::zero();
            for di in 0..d {
                acc = acc + x.data[ni * d + di] * p.weight[di * c + ci];
            }
            let mut v = acc.times(p.scale);
            if let Some(b) = &p.bias {
                v = v + b[ci];
            }
            out.push(v);
        }
    }
    Ok(Array { shape: vec![n, c], data: out })
}

fn pool<S: Scalar>(
    x: &Array<S>,
    kind: PoolKind,
    window: Option<usize>,
    stride: Option<usize>,
    pattern: Option<&mut Pattern>,
) -> Result<Array<S>> {
    let [n, c, h, w] = x.shape[..] else {
        return dim_err("reference pool needs rank 4");
    };
    let (win, st) = resolve_pool(window, stride, h, w).map_err(Error::Dimension)?;
    if win > h || win > w {
        return dim_err("reference pool window too large");
    }
    let oh = (h - win) / st + 1;
    let ow = (w - win) / st + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut winners = Vec::new();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = |i: usize, j: usize| plane * h * w + (oy * st + i) * w + ox * st + j;
                match kind {
                    PoolKind::Avg => {
                        let mut acc = S::zero();
                        for i in 0..win {
                            for j in 0..win {
                                acc = acc + x.data[idx(i, j)];
                            }
                        }
                        out.push(acc.times(1.0 / (win * win) as f64));
                    }
                    PoolKind::Max => {
                        let mut best = idx(0, 0);
                        for i in 0..win {
                            for j in 0..win {
                                if x.data[idx(i, j)].value() > x.data[best].value() {
                                    best = idx(i, j);
                                }
                            }
                        }
                        winners.push(best);
                        out.push(x.data[best]);
                    }
                }
            }
        }
    }
    if let Some(p) = pattern {
        p.argmax.extend(winners);
    }
    Ok(Array { shape: vec![n, c, oh, ow], data: out })
}

/// Runs `layers[from..]` of `def`. Branch choices are recorded for layers
/// at or above `record_from`.
pub fn ref_forward<S: Scalar>(
    def: &NetworkDef,
    net: &RefNet<S>,
    x: &Array<S>,
    from: usize,
    record_from: usize,
    pattern: &mut Pattern,
) -> Result<Array<S>> {
    let mut cur = x.clone();
    for (li, spec) in def.layers.iter().enumerate().skip(from) {
        let record = li >= record_from;
        cur = match spec {
            LayerSpec::Conv { name, stride, pad, .. } => conv(&cur, layer(net, name)?, *stride, *pad)?,
            LayerSpec::Dense { name, .. } => dense(&cur, layer(net, name)?)?,
            LayerSpec::Relu => {
                let mut data = Vec::with_capacity(cur.data.len());
                for &v in &cur.data {
                    let on = v.value() >= 0.0;
                    if record {
                        pattern.relu.push(on);
                        pattern.min_abs_preact = pattern.min_abs_preact.min(v.value().abs());
                    }
                    data.push(if on { v } else { S::zero() });
                }
                Array { shape: cur.shape, data }
            }
            LayerSpec::Pool { pool: kind, window, stride } => {
                pool(&cur, *kind, *window, *stride, record.then_some(&mut *pattern))?
            }
            LayerSpec::Flatten => {
                let n = cur.shape[0];
                let d = cur.data.len() / n;
                Array { shape: vec![n, d], data: cur.data }
            }
            LayerSpec::BatchNorm { name, eps } => {
                let s = net
                    .bn
                    .get(name)
                    .ok_or_else(|| Error::Validation(format!("reference net has no batchnorm {name}")))?;
                let [_, c, h, w] = cur.shape[..] else {
                    return dim_err("reference batchnorm needs rank 4");
                };
                let mut data = cur.data;
                for (i, v) in data.iter_mut().enumerate() {
                    let ch = (i / (h * w)) % c;
                    let inv = s.gamma[ch] / (s.var[ch] + *eps as f64).sqrt();
                    *v = (*v - S::constant(s.mean[ch])).times(inv) + S::constant(s.beta[ch]);
                }
                Array { shape: cur.shape, data }
            }
        };
    }
    let n = cur.shape[0];
    let d = cur.data.len() / n;
    Ok(Array { shape: vec![n, d], data: cur.data })
}

/// Features `[N, d]` of the whole network from the raw input, with the
/// theta2 branch pattern.
pub fn reference_features<S: Scalar>(
    def: &NetworkDef,
    net: &RefNet<S>,
    x: &Tensor,
) -> Result<(Array<S>, Pattern)> {
    crate::netdef::check_input(def, x)?;
    let mut pattern = Pattern::default();
    let f = ref_forward(def, net, &Array::from_tensor(x), 0, def.boundary(), &mut pattern)?;
    Ok((f, pattern))
}

/// `x W` for `x: [N, d]`, `W: [d, c]` in 64-bit.
pub fn matmul64(x: &Array64, w: &Array64) -> Result<Array64> {
    let (&[n, d], &[wd, c]) = (&x.shape[..], &w.shape[..]) else {
        return dim_err("matmul64 needs rank-2 operands");
    };
    if d != wd {
        return dim_err(format!("matmul64 {:?} x {:?}", x.shape, w.shape));
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..d {
                s += x.data[i * d + k] * w.data[k * c + j];
            }
            out[i * c + j] = s;
        }
    }
    Ok(Array { shape: vec![n, c], data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{build_network, forward_features};
    use crate::rng;

    #[test]
    fn matches_f32_forward() {
        let def = NetworkDef::desk_default(1, 8);
        let p = build_network(&def, 3).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], &mut rng::seeded(1));
        let (f32_f, _) = forward_features(&def, &p, &x).unwrap();
        let net = lift_shifted(&p, None, 0.0).unwrap();
        let (f, _) = reference_features(&def, &net, &x).unwrap();
        let tol = 1e-4 * (1.0 + f.norm());
        assert!(f.max_abs_diff(&f32_f).unwrap() < tol);
    }

    #[test]
    fn dual_arithmetic() {
        let a = Dual { v: 2.0, d: 1.0 };
        let b = Dual { v: 3.0, d: -1.0 };
        assert_eq!(a * b, Dual { v: 6.0, d: 1.0 });
        assert_eq!((a + b).times(2.0), Dual { v: 10.0, d: 0.0 });
    }
}
