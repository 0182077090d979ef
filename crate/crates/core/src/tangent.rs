//! Forward-mode tangent propagation through the theta2 layers and its
//! reverse-mode dual.
//!
//! For a direction `w2` in theta2-space, each linear layer maps
//! `(z, dz)` to `(h(z; w, b), h(z; w~, b~) + h(dz; w, 0))`, ReLU multiplies
//! the tangent by the primal mask `1[z >= 0]`, and pooling applies the
//! primal pooling map (avg) or argmax routing (max). The tangent entering
//! theta2 is zero.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::netdef::{
    check_input, flatten_features, record_range, resolve_pool, LayerSpec, NetworkDef, ParamSet,
};
use crate::ops::{self, ConvGeometry};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Tangent counterpart of one theta2 layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBlock {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// A vector in theta2-space, stored per layer in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentParams {
    blocks: Vec<(String, TangentBlock)>,
}

impl TangentParams {
    fn mirror(
        def: &NetworkDef,
        params: &ParamSet,
        mut fill: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        for name in def.theta2_names() {
            let p = params.get(name)?;
            let weight = fill(p.weight.shape());
            let bias = p.bias.as_ref().map(|b| fill(b.shape()));
            blocks.push((name.to_string(), TangentBlock { weight, bias }));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(def: &NetworkDef, params: &ParamSet) -> Result<Self> {
        Self::mirror(def, params, Tensor::zeros)
    }

    /// Independent `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(
        def: &NetworkDef,
        params: &ParamSet,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Self::mirror(def, params, |s| Tensor::randn(s, rng).scale(std))
    }

    /// Builds from explicit blocks; order must follow theta2.
    pub fn from_blocks(blocks: Vec<(String, TangentBlock)>) -> Self {
        Self { blocks }
    }

    /// Verifies names and shapes against the theta2 part of `params`.
    pub fn check(&self, def: &NetworkDef, params: &ParamSet) -> Result<()> {
        let names = def.theta2_names();
        if names.len() != self.blocks.len()
            || names.iter().zip(&self.blocks).any(|(a, (b, _))| a != b)
        {
            let have: Vec<&str> = self.blocks.iter().map(|(n, _)| n.as_str()).collect();
            return dim_err(format!(
                "tangent layers {have:?} do not mirror theta2 {names:?}"
            ));
        }
        for (name, blk) in &self.blocks {
            let p = params.get(name)?;
            if blk.weight.shape() != p.weight.shape() {
                return dim_err(format!(
                    "layer {name}: tangent weight {:?} vs parameter {:?}",
                    blk.weight.shape(),
                    p.weight.shape()
                ));
            }
            let bias_ok = match (&blk.bias, &p.bias) {
                (Some(a), Some(b)) => a.shape() == b.shape(),
                (None, None) => true,
                _ => false,
            };
            if !bias_ok {
                return dim_err(format!("layer {name}: tangent bias does not mirror parameter bias"));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TangentBlock> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Dimension(format!("no tangent block for layer {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TangentBlock> {
        self.blocks
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Dimension(format!("no tangent block for layer {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TangentBlock)> {
        self.blocks.iter().map(|(n, b)| (n.as_str(), b))
    }

    pub fn names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks
            .iter()
            .flat_map(|(_, b)| std::iter::once(&b.weight).chain(b.bias.as_ref()))
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|(_, b)| std::iter::once(&mut b.weight).chain(b.bias.as_mut()))
    }

    /// Total scalar count, equal to `|theta2|`.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Concatenation in layer order, weight before bias.
    pub fn to_vec(&self) -> Vec<f32> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`to_vec`](Self::to_vec) using `self` as the shape template.
    pub fn with_values(&self, values: &[f32]) -> Result<Self> {
        if values.len() != self.numel() {
            return dim_err(format!("{} values for {} tangent entries", values.len(), self.numel()));
        }
        let mut out = self.clone();
        let mut at = 0;
        for t in out.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    fn zip_check(&self, other: &Self) -> Result<()> {
        if self.blocks.len() != other.blocks.len()
            || self
                .tensors()
                .zip(other.tensors())
                .any(|(a, b)| a.shape() != b.shape())
            || self.tensors().count() != other.tensors().count()
        {
            return dim_err("tangent parameter layouts differ");
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.zip_check(other)?;
        let mut s = 0.0;
        for (a, b) in self.tensors().zip(other.tensors()) {
            s += a.dot(b)?;
        }
        Ok(s)
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f32, other: &Self) -> Result<()> {
        self.zip_check(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f32) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = t.scale(alpha);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }
}

/// Paired primal and tangent activations after one layer.
#[derive(Debug, Clone)]
pub struct TangentState {
    pub primal: Tensor,
    pub tangent: Tensor,
}

fn propagate(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    z0: &Tensor,
    mut trace: Option<&mut Vec<TangentState>>,
) -> Result<(Tensor, Tensor)> {
    w2.check(def, params)?;
    let b = def.boundary();
    let expect = def.boundary_shape()?;
    if z0.rank() != expect.len() + 1 || z0.shape()[1..] != expect[..] {
        return dim_err(format!(
            "z0 {:?} does not match boundary shape [N, {expect:?}]",
            z0.shape()
        ));
    }
    let mut cur = z0.clone();
    // None stands for an exactly zero tangent.
    let mut tan: Option<Tensor> = None;
    for layer in &def.layers[b..] {
        let (next, next_tan) = match layer {
            LayerSpec::Conv { name, stride, pad, .. } => {
                let p = params.get(name)?;
                let blk = w2.get(name)?;
                let scale = p.scale();
                let g = ConvGeometry::new(cur.shape(), p.weight.shape(), *stride, *pad)?;
                let cols = ops::im2col(&cur, &g);
                let out = ops::conv_from_cols(&cols, &p.weight, p.bias.as_ref(), scale, &g)?;
                let mut t = ops::conv_from_cols(&cols, &blk.weight, blk.bias.as_ref(), scale, &g)?;
                if let Some(up) = &tan {
                    let up_cols = ops::im2col(up, &g);
                    t.axpy(1.0, &ops::conv_from_cols(&up_cols, &p.weight, None, scale, &g)?)?;
                }
                (out, Some(t))
            }
            LayerSpec::Dense { name, .. } => {
                let p = params.get(name)?;
                let blk = w2.get(name)?;
                let scale = p.scale();
                let out = ops::dense_scaled(&cur, &p.weight, p.bias.as_ref(), scale)?;
                let mut t = ops::dense_scaled(&cur, &blk.weight, blk.bias.as_ref(), scale)?;
                if let Some(up) = &tan {
                    t.axpy(1.0, &ops::dense_scaled(up, &p.weight, None, scale)?)?;
                }
                (out, Some(t))
            }
            LayerSpec::Relu => {
                let (out, mask) = ops::relu(&cur);
                let t = tan.as_ref().map(|t| ops::apply_mask(t, &mask));
                (out, t)
            }
            LayerSpec::Pool { pool, window, stride } => {
                let (_, _, h, w) = cur.dims4()?;
                let (win, st) = resolve_pool(*window, *stride, h, w).map_err(Error::Dimension)?;
                let pooled = ops::pool(&cur, *pool, win, st)?;
                let t = match &tan {
                    Some(t) => Some(ops::pool_like(t, &pooled)?),
                    None => None,
                };
                (pooled.output, t)
            }
            LayerSpec::Flatten => {
                let n = cur.dim(0);
                let d = cur.numel() / n;
                let t = match tan {
                    Some(t) => Some(t.reshape(&[n, d])?),
                    None => None,
                };
                (cur.reshape(&[n, d])?, t)
            }
            LayerSpec::BatchNorm { name, .. } => {
                return Err(Error::Validation(format!(
                    "batchnorm {name} inside theta2 must be folded first"
                )))
            }
        };
        cur = next;
        tan = next_tan;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TangentState {
                primal: cur.clone(),
                tangent: tan.clone().unwrap_or_else(|| Tensor::zeros(cur.shape())),
            });
        }
    }
    let f = flatten_features(cur)?;
    let jf = match tan {
        Some(t) => flatten_features(t)?,
        None => Tensor::zeros(f.shape()),
    };
    Ok((f, jf))
}

/// `f(x)` and `J_theta2(x) w2`, both `[N, d]`, from the cached boundary
/// activation `z0`.
pub fn jvp_forward(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    z0: &Tensor,
) -> Result<(Tensor, Tensor)> {
    propagate(def, params, w2, z0, None)
}

/// Like [`jvp_forward`] but also returns the state after every theta2 layer.
pub fn jvp_trace(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    z0: &Tensor,
) -> Result<(Tensor, Tensor, Vec<TangentState>)> {
    let mut trace = Vec::new();
    let (f, jf) = propagate(def, params, w2, z0, Some(&mut trace))?;
    Ok((f, jf, trace))
}

/// Convenience wrapper starting from the raw input.
pub fn jvp_from_input(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_input(def, x)?;
    let z0 = crate::netdef::forward_to_boundary(def, params, x)?;
    jvp_forward(def, params, w2, &z0)
}

/// Gradient-feature logits `jf * omega`, `[N, c]`.
pub fn head_jvp(omega: &Tensor, jf: &Tensor) -> Result<Tensor> {
    let (d, _) = omega.dims2()?;
    let (_, dj) = jf.dims2()?;
    if d != dj {
        return dim_err(format!(
            "omega {:?} does not match tangent features {:?}",
            omega.shape(),
            jf.shape()
        ));
    }
    ops::dense(jf, omega, None)
}

/// `sum_n J_theta2(x_n)^T u_n` by one reverse pass through the theta2 layers.
pub fn vjp_theta2(
    def: &NetworkDef,
    params: &ParamSet,
    z0: &Tensor,
    u: &Tensor,
) -> Result<TangentParams> {
    let mut out = TangentParams::zeros(def, params)?;
    if out.blocks.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let input = tape.leaf(z0.clone(), false);
    let theta2 = def.theta2_names();
    let top = record_range(
        &mut tape,
        def,
        params,
        input,
        def.boundary(),
        def.layers.len(),
        &|name| theta2.contains(&name),
    )?;
    let top = tape.flatten(top)?;
    if tape.value(top).shape() != u.shape() {
        return dim_err(format!(
            "cotangent {:?} does not match features {:?}",
            u.shape(),
            tape.value(top).shape()
        ));
    }
    let grads = tape.backward(top, u)?;
    for (name, blk) in out.blocks.iter_mut() {
        if let Some(g) = grads.param(&format!("{name}.weight")) {
            blk.weight = g.clone();
        }
        if let Some(b) = blk.bias.as_mut() {
            if let Some(g) = grads.param(&format!("{name}.bias")) {
                *b = g.clone();
            }
        }
    }
    Ok(out)
}
