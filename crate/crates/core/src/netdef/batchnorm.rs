//! Folding inference-mode batch normalization into the preceding conv.

use crate::error::{dim_err, Error, Result};
use crate::netdef::params::{BnStats, ParamSet};
use crate::netdef::spec::{LayerSpec, NetworkDef};
use crate::tensor::Tensor;

/// `w' = w * gamma / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * gamma / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(
    conv_w: &Tensor,
    conv_b: &Tensor,
    stats: &BnStats,
    eps: f32,
) -> Result<(Tensor, Tensor)> {
    let k = conv_w.dim(0);
    if conv_b.shape() != [k] {
        return dim_err(format!("conv bias {:?} for {k} output channels", conv_b.shape()));
    }
    for (what, t) in [
        ("gamma", &stats.gamma),
        ("beta", &stats.beta),
        ("mean", &stats.mean),
        ("var", &stats.var),
    ] {
        if t.shape() != [k] {
            return dim_err(format!(
                "batchnorm {what} has shape {:?}, conv has {k} output channels",
                t.shape()
            ));
        }
    }
    if stats.var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Input("batchnorm variance must be non-negative".into()));
    }
    let factors: Vec<f32> = (0..k)
        .map(|c| stats.gamma.data()[c] / (stats.var.data()[c] + eps).sqrt())
        .collect();
    let per = conv_w.numel() / k;
    let mut w = conv_w.clone();
    for (c, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        for v in chunk {
            *v *= factors[c];
        }
    }
    let b = Tensor::from_fn(&[k], |c| {
        (conv_b.data()[c] - stats.mean.data()[c]) * factors[c] + stats.beta.data()[c]
    });
    Ok((w, b))
}

/// Removes every batch-norm layer from `def`, folding its statistics into
/// the conv it follows. Convs without a bias gain one.
pub fn fold_network_batchnorm(def: &NetworkDef, params: &ParamSet) -> Result<(NetworkDef, ParamSet)> {
    def.validate()?;
    let mut out_def = def.clone();
    out_def.layers.clear();
    let mut out = params.clone();
    for layer in &def.layers {
        if let LayerSpec::BatchNorm { name, eps } = layer {
            let Some(LayerSpec::Conv {
                name: conv_name,
                bias,
                ..
            }) = out_def.layers.last_mut()
            else {
                return Err(Error::Validation(format!("batchnorm {name} does not follow a conv")));
            };
            let stats = out
                .remove_bn(name)
                .ok_or_else(|| Error::Validation(format!("no statistics for batchnorm {name}")))?;
            let p = out.get_mut(conv_name)?;
            let b = p
                .bias
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[p.weight.dim(0)]));
            let (w, b) = fold_batchnorm(&p.weight, &b, &stats, *eps)?;
            p.weight = w;
            p.bias = Some(b);
            *bias = true;
        } else {
            out_def.layers.push(layer.clone());
        }
    }
    out.check(&out_def)?;
    Ok((out_def, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::forward::forward_features;
    use crate::netdef::params::build_network;
    use crate::ops;
    use crate::rng;
    use rand::Rng;

    fn stats(k: usize, gamma: f32, var: f32) -> BnStats {
        BnStats {
            gamma: Tensor::full(&[k], gamma),
            beta: Tensor::zeros(&[k]),
            mean: Tensor::zeros(&[k]),
            var: Tensor::full(&[k], var),
        }
    }

    #[test]
    fn identity_and_doubling() {
        let mut r = rng::seeded(1);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let (w1, b1) = fold_batchnorm(&w, &b, &stats(3, 1.0, 1.0), 0.0).unwrap();
        assert_eq!((w1, b1), (w.clone(), b.clone()));
        let (w2, b2) = fold_batchnorm(&w, &b, &stats(3, 2.0, 1.0), 0.0).unwrap();
        assert_eq!(w2, w.scale(2.0));
        assert_eq!(b2, b.scale(2.0));
        assert!(fold_batchnorm(&w, &b, &stats(4, 1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn folded_conv_matches_conv_then_bn() {
        let mut r = rng::seeded(2);
        for _ in 0..5 {
            let w = Tensor::randn(&[4, 3, 3, 3], &mut r);
            let b = Tensor::randn(&[4], &mut r);
            let s = BnStats {
                gamma: Tensor::randn(&[4], &mut r),
                beta: Tensor::randn(&[4], &mut r),
                mean: Tensor::randn(&[4], &mut r),
                var: Tensor::from_fn(&[4], |_| r.random_range(0.01..10.0)),
            };
            let x = Tensor::randn(&[2, 3, 6, 6], &mut r);
            let seq = crate::netdef::forward::batchnorm_inference(
                &ops::conv2d(&x, &w, Some(&b), 1, 1).unwrap(),
                &s,
                1e-5,
            )
            .unwrap();
            let (fw, fb) = fold_batchnorm(&w, &b, &s, 1e-5).unwrap();
            let folded = ops::conv2d(&x, &fw, Some(&fb), 1, 1).unwrap();
            assert!(folded.max_abs_diff(&seq).unwrap() < 1e-5 * (1.0 + seq.norm() as f32 / 10.0));
        }
    }

    #[test]
    fn network_fold_preserves_outputs() {
        let mut def = NetworkDef::desk_default(1, 8);
        def.layers.insert(1, LayerSpec::BatchNorm { name: "bn1".into(), eps: 1e-5 });
        let mut params = build_network(&def, 9).unwrap();
        let mut r = rng::seeded(3);
        params.insert_bn(
            "bn1",
            BnStats {
                gamma: Tensor::from_fn(&[16], |_| r.random_range(0.5..1.5)),
                beta: Tensor::randn(&[16], &mut r).scale(0.1),
                mean: Tensor::randn(&[16], &mut r).scale(0.1),
                var: Tensor::from_fn(&[16], |_| r.random_range(0.5..2.0)),
            },
        );
        let x = Tensor::randn(&[3, 1, 8, 8], &mut r);
        let (before, _) = forward_features(&def, &params, &x).unwrap();
        let (fdef, fparams) = fold_network_batchnorm(&def, &params).unwrap();
        assert!(fdef.layers.iter().all(|l| !matches!(l, LayerSpec::BatchNorm { .. })));
        let (after, _) = forward_features(&fdef, &fparams, &x).unwrap();
        assert!(after.max_abs_diff(&before).unwrap() < 1e-5);
    }
}
