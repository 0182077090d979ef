use crate::error::{dim_err, Result};
use crate::netdef::params::{BnStats, ParamSet};
use crate::netdef::spec::{resolve_pool, LayerSpec, NetworkDef};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// Input of the first theta2 layer (the raw input when theta2 starts at
    /// the bottom of the network).
    pub z0: Tensor,
}

pub(crate) fn check_input(def: &NetworkDef, x: &Tensor) -> Result<()> {
    if x.rank() != def.input_shape.len() + 1 || x.shape()[1..] != def.input_shape[..] {
        return dim_err(format!(
            "input {:?} does not match network input [N, {:?}]",
            x.shape(),
            def.input_shape
        ));
    }
    Ok(())
}

pub(crate) fn batchnorm_inference(x: &Tensor, stats: &BnStats, eps: f32) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if stats.gamma.numel() != c {
        return dim_err(format!("batchnorm has {} channels, input {c}", stats.gamma.numel()));
    }
    let mut out = x.clone();
    let hw = h * w;
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let inv = stats.gamma.data()[ch] / (stats.var.data()[ch] + eps).sqrt();
        let (mu, beta) = (stats.mean.data()[ch], stats.beta.data()[ch]);
        for v in chunk {
            *v = (*v - mu) * inv + beta;
        }
    }
    Ok(out)
}

/// Applies one layer.
pub fn run_layer(layer: &LayerSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    match layer {
        LayerSpec::Conv {
            name, stride, pad, ..
        } => {
            let p = params.get(name)?;
            ops::conv2d_scaled(x, &p.weight, p.bias.as_ref(), *stride, *pad, p.scale())
        }
        LayerSpec::Dense { name, .. } => {
            let p = params.get(name)?;
            ops::dense_scaled(x, &p.weight, p.bias.as_ref(), p.scale())
        }
        LayerSpec::Relu => Ok(ops::relu(x).0),
        LayerSpec::Pool {
            pool,
            window,
            stride,
        } => {
            let (_, _, h, w) = x.dims4()?;
            let (win, st) = resolve_pool(*window, *stride, h, w).map_err(crate::Error::Dimension)?;
            Ok(ops::pool(x, *pool, win, st)?.output)
        }
        LayerSpec::Flatten => {
            let n = x.dim(0);
            x.clone().reshape(&[n, x.numel() / n])
        }
        LayerSpec::BatchNorm { name, eps } => batchnorm_inference(x, params.bn(name)?, *eps),
    }
}

/// Runs `layers[from..to]`.
pub fn forward_range(
    def: &NetworkDef,
    params: &ParamSet,
    x: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    let mut cur = x.clone();
    for layer in &def.layers[from..to] {
        cur = run_layer(layer, params, &cur)?;
    }
    Ok(cur)
}

/// Records `layers[from..to]` on a tape. Layers for which `trainable`
/// returns true register their tensors as named parameters
/// `<layer>.weight` and `<layer>.bias`; the rest enter as constants.
pub fn record_range(
    tape: &mut Tape,
    def: &NetworkDef,
    params: &ParamSet,
    input: Var,
    from: usize,
    to: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Var> {
    let mut cur = input;
    for layer in &def.layers[from..to] {
        cur = match layer {
            LayerSpec::Conv { name, stride, pad, .. } => {
                let p = params.get(name)?;
                let (w, b) = record_params(tape, name, p, trainable(name))?;
                tape.conv2d(cur, w, b, *stride, *pad, p.scale())?
            }
            LayerSpec::Dense { name, .. } => {
                let p = params.get(name)?;
                let (w, b) = record_params(tape, name, p, trainable(name))?;
                tape.dense(cur, w, b, p.scale())?
            }
            LayerSpec::Relu => tape.relu(cur),
            LayerSpec::Pool { pool, window, stride } => {
                let (_, _, h, w) = tape.value(cur).dims4()?;
                let (win, st) = resolve_pool(*window, *stride, h, w).map_err(crate::Error::Dimension)?;
                tape.pool(cur, *pool, win, st)?
            }
            LayerSpec::Flatten => tape.flatten(cur)?,
            LayerSpec::BatchNorm { name, .. } => {
                return Err(crate::Error::Validation(format!(
                    "batchnorm {name} must be folded before differentiation"
                )))
            }
        };
    }
    Ok(cur)
}

fn record_params(
    tape: &mut Tape,
    name: &str,
    p: &crate::netdef::params::LayerParams,
    trainable: bool,
) -> Result<(Var, Option<Var>)> {
    if trainable {
        let w = tape.param(&format!("{name}.weight"), p.weight.clone())?;
        let b = match &p.bias {
            Some(b) => Some(tape.param(&format!("{name}.bias"), b.clone())?),
            None => None,
        };
        Ok((w, b))
    } else {
        let w = tape.leaf(p.weight.clone(), false);
        let b = p.bias.as_ref().map(|b| tape.leaf(b.clone(), false));
        Ok((w, b))
    }
}

/// The theta1 section: returns `z0`.
pub fn forward_to_boundary(def: &NetworkDef, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    check_input(def, x)?;
    forward_range(def, params, x, 0, def.boundary())
}

/// The theta2 section, flattened to `[N, d]`.
pub fn forward_from_boundary(def: &NetworkDef, params: &ParamSet, z0: &Tensor) -> Result<Tensor> {
    let out = forward_range(def, params, z0, def.boundary(), def.layers.len())?;
    flatten_features(out)
}

pub(crate) fn flatten_features(t: Tensor) -> Result<Tensor> {
    let n = t.dim(0);
    let d = t.numel() / n;
    t.reshape(&[n, d])
}

/// `f_theta(x)` as `[N, d]`, plus the theta1/theta2 boundary activation.
pub fn forward_features(
    def: &NetworkDef,
    params: &ParamSet,
    x: &Tensor,
) -> Result<(Tensor, FeatureCache)> {
    let z0 = forward_to_boundary(def, params, x)?;
    let f = forward_from_boundary(def, params, &z0)?;
    Ok((f, FeatureCache { z0 }))
}

/// Features for a large input in fixed-size chunks.
pub fn features_batched(
    def: &NetworkDef,
    params: &ParamSet,
    x: &Tensor,
    chunk: usize,
) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0);
    let mut fs = Vec::new();
    let mut zs = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let (f, cache) = forward_features(def, params, &x.slice_rows(start, end)?)?;
        fs.push(f);
        zs.push(cache.z0);
        start = end;
    }
    Ok((Tensor::concat_rows(&fs)?, Tensor::concat_rows(&zs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::params::build_network;
    use crate::rng;

    #[test]
    fn empty_theta1_gives_raw_input() {
        let mut def = NetworkDef::desk_default(1, 8);
        def.split_index = 0;
        let p = build_network(&def, 0).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], &mut rng::seeded(1));
        let (f, cache) = forward_features(&def, &p, &x).unwrap();
        assert_eq!(cache.z0, x);
        assert_eq!(f.shape(), &[2, 64]);
    }

    #[test]
    fn zero_input_bias_free_net() {
        let def = NetworkDef {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::Conv {
                    name: "c".into(),
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 0,
                    bias: false,
                    ntk_scaled: true,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    name: "d".into(),
                    out_features: 4,
                    bias: false,
                    ntk_scaled: true,
                },
            ],
            split_index: 1,
        };
        let p = build_network(&def, 5).unwrap();
        let (f, _) = forward_features(&def, &p, &Tensor::zeros(&[3, 1, 6, 6])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape() {
        let def = NetworkDef::desk_default(1, 8);
        let p = build_network(&def, 0).unwrap();
        assert!(forward_features(&def, &p, &Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }
}
