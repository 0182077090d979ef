use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::netdef::{features_batched, forward_to_boundary, NetworkDef, ParamSet};
use crate::ops;
use crate::rng;
use crate::tangent::{head_jvp, jvp_forward, TangentParams};
use crate::tensor::{Fnv, Tensor};

/// Which linear model a head belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// `w1^T f(x) + b`.
    Activation,
    /// `omega^T J(x) w2 + b`.
    Gradient,
    /// `w1^T f(x) + omega^T J(x) w2 + b`.
    Full,
}

impl ModelKind {
    pub fn uses_activations(self) -> bool {
        matches!(self, ModelKind::Activation | ModelKind::Full)
    }

    pub fn uses_gradients(self) -> bool {
        matches!(self, ModelKind::Gradient | ModelKind::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Activation => "activation",
            ModelKind::Gradient => "gradient",
            ModelKind::Full => "full",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(ModelKind::Activation),
            "gradient" => Ok(ModelKind::Gradient),
            "full" => Ok(ModelKind::Full),
            other => Err(Error::Config(format!(
                "unknown model kind {other}; expected activation, gradient or full"
            ))),
        }
    }
}

/// Linear classifier `x W + b` with `W: [d, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d, c]),
            bias: Tensor::zeros(&[c]),
        }
    }

    /// `N(0, 1/d)` weights and zero bias, from a labeled seed stream.
    pub fn random(d: usize, c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "random_head");
        Self {
            weight: Tensor::randn(&[d, c], &mut r).scale(1.0 / (d as f32).sqrt()),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.dim(0), self.weight.dim(1))
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        ops::dense(features, &self.weight, Some(&self.bias))
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(&self.weight.checksum().to_le_bytes());
        h.write(&self.bias.checksum().to_le_bytes());
        h.finish()
    }
}

/// Bias-free activation logits `features * w`.
pub fn activation_logits(w: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (d, _) = w.dims2()?;
    let (_, fd) = features.dims2()?;
    if d != fd {
        return dim_err(format!(
            "head {:?} does not match features {:?}",
            w.shape(),
            features.shape()
        ));
    }
    ops::dense(features, w, None)
}

/// A frozen network: architecture with its theta1/theta2 split and values.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub def: NetworkDef,
    pub params: ParamSet,
}

impl Backbone {
    pub fn new(def: NetworkDef, params: ParamSet) -> Result<Self> {
        params.check(&def)?;
        Ok(Self { def, params })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// Inputs to a linear model, computed once per dataset.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// `f(x)` of the activation backbone, `[N, d]`.
    pub f: Option<Tensor>,
    /// Boundary activation of the gradient backbone.
    pub z0: Option<Tensor>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.f.as_ref().or(self.z0.as_ref()).map_or(0, |t| t.dim(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> Result<FeatureCache> {
        Ok(FeatureCache {
            f: self.f.as_ref().map(|t| t.gather_rows(idx)).transpose()?,
            z0: self.z0.as_ref().map(|t| t.gather_rows(idx)).transpose()?,
        })
    }
}

const FEATURE_CHUNK: usize = 256;

/// A linear model over frozen features:
/// `g(x) = w1^T f(x) + omega^T J(x) w2 + b`, restricted by `kind`.
///
/// Activation features come from `activation`; the Jacobian is taken of
/// `gradient` (the same network unless an ablation swaps in random values).
#[derive(Debug, Clone)]
pub struct FullModel {
    pub kind: ModelKind,
    pub w1: LinearHead,
    pub w2: TangentParams,
    pub omega: Tensor,
    pub activation: Arc<Backbone>,
    pub gradient: Arc<Backbone>,
}

impl FullModel {
    /// Initial model: `w1 = omega`, bias from `omega`, `w2 = 0`. For the
    /// activation kind `omega` only seeds `w1`.
    pub fn init(
        kind: ModelKind,
        activation: Arc<Backbone>,
        gradient: Arc<Backbone>,
        omega: &LinearHead,
    ) -> Result<Self> {
        if activation.def.layers != gradient.def.layers || activation.def.input_shape != gradient.def.input_shape {
            return Err(Error::Config("activation and gradient backbones differ in architecture".into()));
        }
        let d = activation.def.feature_dim()?;
        if omega.weight.shape()[0] != d {
            return dim_err(format!(
                "omega {:?} does not match feature dimension {d}",
                omega.weight.shape()
            ));
        }
        let w2 = TangentParams::zeros(&gradient.def, &gradient.params)?;
        Ok(Self {
            kind,
            w1: omega.clone(),
            w2,
            omega: omega.weight.clone(),
            activation,
            gradient,
        })
    }

    pub fn classes(&self) -> usize {
        self.w1.bias.numel()
    }

    /// Features this model needs for `images`.
    pub fn features(&self, images: &Tensor) -> Result<FeatureCache> {
        let f = if self.kind.uses_activations() {
            Some(features_batched(&self.activation.def, &self.activation.params, images, FEATURE_CHUNK)?.0)
        } else {
            None
        };
        let z0 = if self.kind.uses_gradients() {
            let mut parts = Vec::new();
            let n = images.dim(0);
            let mut s = 0;
            while s < n {
                let e = (s + FEATURE_CHUNK).min(n);
                parts.push(forward_to_boundary(
                    &self.gradient.def,
                    &self.gradient.params,
                    &images.slice_rows(s, e)?,
                )?);
                s = e;
            }
            Some(Tensor::concat_rows(&parts)?)
        } else {
            None
        };
        Ok(FeatureCache { f, z0 })
    }

    fn need<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
        t.as_ref()
            .ok_or_else(|| Error::State(format!("feature cache lacks {what}")))
    }

    /// Logits from cached features.
    pub fn logits_cached(&self, cache: &FeatureCache) -> Result<Tensor> {
        match self.kind {
            ModelKind::Activation => self.w1.logits(Self::need(&cache.f, "activation features")?),
            ModelKind::Gradient => {
                let g = self.gradient_logits(Self::need(&cache.z0, "boundary activations")?)?;
                add_bias(g, &self.w1.bias)
            }
            ModelKind::Full => {
                let a = self.w1.logits(Self::need(&cache.f, "activation features")?)?;
                let g = self.gradient_logits(Self::need(&cache.z0, "boundary activations")?)?;
                a.add(&g)
            }
        }
    }

    /// `omega^T J(x) w2` per sample.
    pub fn gradient_logits(&self, z0: &Tensor) -> Result<Tensor> {
        let (_, jf) = jvp_forward(&self.gradient.def, &self.gradient.params, &self.w2, z0)?;
        head_jvp(&self.omega, &jf)
    }

    /// Computes features once and returns the logits.
    pub fn full_logits(&self, images: &Tensor) -> Result<Tensor> {
        self.logits_cached(&self.features(images)?)
    }

    /// Checksum of everything training must not modify.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(&self.activation.checksum().to_le_bytes());
        h.write(&self.gradient.checksum().to_le_bytes());
        h.write(&self.omega.checksum().to_le_bytes());
        h.finish()
    }
}

fn add_bias(mut t: Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c) = t.dims2()?;
    if b.numel() != c {
        return dim_err("bias length mismatch");
    }
    for row in t.data_mut().chunks_mut(c) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(t)
}
