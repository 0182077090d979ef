use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::spec::{LayerSpec, NetworkDef};
use crate::rng;
use crate::tensor::{Fnv, Tensor};

/// Where a layer's values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    /// Forward multiplies the weight contribution by `1/sqrt(fan_in)`.
    pub ntk_scaled: bool,
    pub provenance: Provenance,
}

impl LayerParams {
    /// `C*kh*kw` for conv weights `[K,C,kh,kw]`, `d` for dense weights `[d,c]`.
    pub fn fan_in(&self) -> usize {
        match self.weight.shape() {
            [k, ..] if self.weight.rank() == 4 => self.weight.numel() / k,
            [d, _] => *d,
            other => other.iter().product(),
        }
    }

    pub fn scale(&self) -> f32 {
        if self.ntk_scaled {
            1.0 / (self.fan_in() as f32).sqrt()
        } else {
            1.0
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Inference statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

/// Named parameters of a [`NetworkDef`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    layers: BTreeMap<String, LayerParams>,
    bn: BTreeMap<String, BnStats>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, params: LayerParams) {
        self.layers.insert(name.to_string(), params);
    }

    pub fn insert_bn(&mut self, name: &str, stats: BnStats) {
        self.bn.insert(name.to_string(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&LayerParams> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no parameters for layer {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut LayerParams> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("no parameters for layer {name}")))
    }

    pub fn bn(&self, name: &str) -> Result<&BnStats> {
        self.bn
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no statistics for batchnorm {name}")))
    }

    pub fn remove_bn(&mut self, name: &str) -> Option<BnStats> {
        self.bn.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerParams)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn layers_mut(&mut self) -> Vec<(&str, &mut LayerParams)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v)).collect()
    }

    pub fn bn_iter(&self) -> impl Iterator<Item = (&str, &BnStats)> {
        self.bn.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.keys().map(String::as_str).collect()
    }

    /// Total scalar count of the named layers.
    pub fn count(&self, names: &[&str]) -> Result<usize> {
        names.iter().map(|n| Ok(self.get(n)?.numel())).sum()
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        for p in self.layers.values_mut() {
            p.provenance = provenance;
        }
    }

    /// Copies the named layers from `other`, replacing the current values.
    pub fn take_layers_from(&mut self, other: &ParamSet, names: &[&str]) -> Result<()> {
        for &n in names {
            self.layers.insert(n.to_string(), other.get(n)?.clone());
        }
        Ok(())
    }

    /// Digest of every stored value and flag, in name order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, p) in &self.layers {
            h.write(name.as_bytes());
            h.write(&p.weight.checksum().to_le_bytes());
            if let Some(b) = &p.bias {
                h.write(&b.checksum().to_le_bytes());
            }
            h.write(&[p.ntk_scaled as u8]);
        }
        for (name, s) in &self.bn {
            h.write(name.as_bytes());
            for t in [&s.gamma, &s.beta, &s.mean, &s.var] {
                h.write(&t.checksum().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Checks key set and shapes against `def`.
    pub fn check(&self, def: &NetworkDef) -> Result<()> {
        let shapes = def.layer_shapes()?;
        let mut expected = std::collections::BTreeSet::new();
        let mut expected_bn = std::collections::BTreeSet::new();
        for (i, layer) in def.layers.iter().enumerate() {
            let input = if i == 0 { &def.input_shape } else { &shapes[i - 1] };
            match layer {
                LayerSpec::BatchNorm { name, .. } => {
                    let c = input[0];
                    let s = self.bn(name)?;
                    for t in [&s.gamma, &s.beta, &s.mean, &s.var] {
                        if t.shape() != [c] {
                            return Err(Error::Dimension(format!(
                                "batchnorm {name} statistics must have shape [{c}]"
                            )));
                        }
                    }
                    expected_bn.insert(name.as_str());
                }
                other => {
                    let Some(name) = other.param_name() else { continue };
                    let (w_shape, b_len) = param_shapes(other, input);
                    let p = self.get(name)?;
                    if p.weight.shape() != w_shape {
                        return Err(Error::Dimension(format!(
                            "layer {name}: weight {:?}, expected {w_shape:?}",
                            p.weight.shape()
                        )));
                    }
                    match (&p.bias, other.has_bias()) {
                        (Some(b), true) if b.shape() == [b_len] => {}
                        (None, false) => {}
                        _ => {
                            return Err(Error::Dimension(format!(
                                "layer {name}: bias presence or shape does not match the def"
                            )))
                        }
                    }
                    expected.insert(name);
                }
            }
        }
        let have: std::collections::BTreeSet<&str> = self.layers.keys().map(String::as_str).collect();
        let have_bn: std::collections::BTreeSet<&str> = self.bn.keys().map(String::as_str).collect();
        if have != expected || have_bn != expected_bn {
            return Err(Error::Validation(format!(
                "parameter keys {have:?} do not match layers {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Weight shape and bias length of a parameterized layer at `input`.
pub(crate) fn param_shapes(layer: &LayerSpec, input: &[usize]) -> (Vec<usize>, usize) {
    match layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => (vec![*out_channels, input[0], *kernel, *kernel], *out_channels),
        LayerSpec::Dense { out_features, .. } => (vec![input[0], *out_features], *out_features),
        _ => unreachable!("not a parameterized layer"),
    }
}

/// Fresh parameters: standard-normal weights, zero biases, identity
/// batch-norm statistics. Deterministic in `seed`.
pub fn build_network(def: &NetworkDef, seed: u64) -> Result<ParamSet> {
    def.validate()?;
    let shapes = def.layer_shapes()?;
    let mut rng = rng::stream(seed, "build_network");
    let mut params = ParamSet::new();
    for (i, layer) in def.layers.iter().enumerate() {
        let input = if i == 0 { &def.input_shape } else { &shapes[i - 1] };
        match layer {
            LayerSpec::Conv { name, ntk_scaled, .. } | LayerSpec::Dense { name, ntk_scaled, .. } => {
                let (w_shape, b_len) = param_shapes(layer, input);
                params.insert(
                    name,
                    LayerParams {
                        weight: Tensor::randn(&w_shape, &mut rng),
                        bias: layer.has_bias().then(|| Tensor::zeros(&[b_len])),
                        ntk_scaled: *ntk_scaled,
                        provenance: Provenance::Random,
                    },
                );
            }
            LayerSpec::BatchNorm { name, .. } => params.insert_bn(name, BnStats::identity(input[0])),
            _ => {}
        }
    }
    Ok(params)
}

/// Re-expresses standard-parametrization theta2 layers in NTK form:
/// stored weights are multiplied by `sqrt(fan_in)` and the forward scale
/// `1/sqrt(fan_in)` is switched on, so the network function is unchanged.
/// Biases are left as they are.
pub fn adopt_ntk(params: &ParamSet, def: &NetworkDef) -> Result<ParamSet> {
    let mut out = params.clone();
    for name in def.theta2_names() {
        let p = out.get_mut(name)?;
        if p.ntk_scaled {
            return Err(Error::State(format!(
                "layer {name} already uses the NTK parametrization"
            )));
        }
        let factor = (p.fan_in() as f32).sqrt();
        p.weight = p.weight.scale(factor);
        p.ntk_scaled = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic_and_matches_def() {
        let def = NetworkDef::desk_default(1, 16);
        let a = build_network(&def, 42).unwrap();
        let b = build_network(&def, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_network(&def, 43).unwrap());
        a.check(&def).unwrap();
        assert_eq!(a.get("conv2").unwrap().fan_in(), 16 * 9);
        assert!(a.get("conv3").unwrap().bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn check_rejects_missing_and_extra() {
        let def = NetworkDef::desk_default(1, 16);
        let mut p = build_network(&def, 1).unwrap();
        let extra = p.get("conv1").unwrap().clone();
        p.insert("conv9", extra);
        assert!(p.check(&def).is_err());
    }

    #[test]
    fn adopt_ntk_guard() {
        let def = NetworkDef::desk_default(1, 16);
        let ntk = build_network(&def, 3).unwrap();
        assert!(matches!(adopt_ntk(&ntk, &def), Err(Error::State(_))));
    }
}
