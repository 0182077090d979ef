use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::PoolKind;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_eps() -> f32 {
    1e-5
}

/// One layer of a feed-forward chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default = "yes")]
        ntk_scaled: bool,
    },
    Relu,
    /// `window = None` pools globally (window = H = W, stride = H).
    Pool {
        pool: PoolKind,
        #[serde(default)]
        window: Option<usize>,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
    Dense {
        name: String,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default = "yes")]
        ntk_scaled: bool,
    },
    /// Inference-mode batch normalization; must directly follow a conv and is
    /// folded into it before any tangent computation.
    #[serde(rename = "batchnorm")]
    BatchNorm {
        name: String,
        #[serde(default = "default_eps")]
        eps: f32,
    },
}

impl LayerSpec {
    pub fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            out_channels,
            kernel,
            stride,
            pad,
            bias: true,
            ntk_scaled: true,
        }
    }

    pub fn dense(name: &str, out_features: usize) -> Self {
        LayerSpec::Dense {
            name: name.into(),
            out_features,
            bias: true,
            ntk_scaled: true,
        }
    }

    pub fn max_pool(window: usize) -> Self {
        LayerSpec::Pool {
            pool: PoolKind::Max,
            window: Some(window),
            stride: Some(window),
        }
    }

    pub fn avg_pool(window: usize) -> Self {
        LayerSpec::Pool {
            pool: PoolKind::Avg,
            window: Some(window),
            stride: Some(window),
        }
    }

    pub fn global_avg_pool() -> Self {
        LayerSpec::Pool {
            pool: PoolKind::Avg,
            window: None,
            stride: None,
        }
    }

    /// Name of a trainable (conv or dense) layer.
    pub fn param_name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Dense { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { bias: true, .. } | LayerSpec::Dense { bias: true, .. }
        )
    }

    fn describe(&self) -> String {
        match self {
            LayerSpec::Conv { name, .. } => format!("conv {name}"),
            LayerSpec::Dense { name, .. } => format!("dense {name}"),
            LayerSpec::BatchNorm { name, .. } => format!("batchnorm {name}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Pool { pool, .. } => format!("{pool:?} pool").to_lowercase(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let [_, h, w] = input[..] else {
                    return Err(format!("expects a [C,H,W] input, got {input:?}"));
                };
                if *stride == 0 || *out_channels == 0 || *kernel == 0 {
                    return Err("zero-sized conv hyperparameter".into());
                }
                if *kernel > h + 2 * pad || *kernel > w + 2 * pad {
                    return Err(format!("kernel {kernel} exceeds padded input {h}x{w}"));
                }
                Ok(vec![
                    *out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense { out_features, .. } => {
                if input.len() != 1 {
                    return Err(format!("expects a flat input, got {input:?}"));
                }
                if *out_features == 0 {
                    return Err("zero output features".into());
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::BatchNorm { .. } => {
                if input.len() != 3 {
                    return Err(format!("expects a [C,H,W] input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Pool { window, stride, .. } => {
                let [c, h, w] = input[..] else {
                    return Err(format!("expects a [C,H,W] input, got {input:?}"));
                };
                let (win, st) = resolve_pool(*window, *stride, h, w)?;
                if win > h || win > w {
                    return Err(format!("window {win} exceeds spatial size {h}x{w}"));
                }
                Ok(vec![c, (h - win) / st + 1, (w - win) / st + 1])
            }
        }
    }
}

/// Concrete `(window, stride)` for a pool layer at spatial size `h x w`.
pub(crate) fn resolve_pool(
    window: Option<usize>,
    stride: Option<usize>,
    h: usize,
    w: usize,
) -> std::result::Result<(usize, usize), String> {
    match window {
        None => {
            if h != w {
                return Err(format!("global pooling needs a square input, got {h}x{w}"));
            }
            Ok((h, h))
        }
        Some(0) => Err("zero pool window".into()),
        Some(win) => {
            let st = stride.unwrap_or(win);
            if st == 0 {
                return Err("zero pool stride".into());
            }
            Ok((win, st))
        }
    }
}

/// An ordered layer chain with the theta1/theta2 split.
///
/// `split_index` counts parameterized (conv/dense) layers: those with rank
/// `>= split_index` form theta2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
}

impl NetworkDef {
    /// conv16-relu-pool / conv32-relu-pool / conv64-relu-gap, theta2 = top conv.
    pub fn desk_default(channels: usize, size: usize) -> Self {
        Self {
            input_shape: vec![channels, size, size],
            layers: vec![
                LayerSpec::conv("conv1", 16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::max_pool(2),
                LayerSpec::conv("conv2", 32, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::max_pool(2),
                LayerSpec::conv("conv3", 64, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::global_avg_pool(),
            ],
            split_index: 2,
        }
    }

    /// 1x6x6 input, conv3-relu / conv4-relu / dense6-relu, theta2 = conv c2
    /// and dense d1 (214 values). Small enough for explicit Jacobians.
    pub fn tiny() -> Self {
        Self {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::conv("c1", 3, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::conv("c2", 4, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense("d1", 6),
                LayerSpec::Relu,
            ],
            split_index: 1,
        }
    }

    /// Per-sample output shape after each layer; fails on the first
    /// incompatible pair.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 {
                "input".to_string()
            } else {
                format!("layer {} ({})", i - 1, self.layers[i - 1].describe())
            };
            cur = layer.output_shape(&cur).map_err(|msg| {
                Error::Validation(format!(
                    "{prev} -> layer {i} ({}): {msg}",
                    layer.describe()
                ))
            })?;
            if let LayerSpec::BatchNorm { name, .. } = layer {
                if !matches!(self.layers.get(i.wrapping_sub(1)), Some(LayerSpec::Conv { .. })) {
                    return Err(Error::Validation(format!(
                        "{prev} -> layer {i} (batchnorm {name}): batchnorm must follow a conv"
                    )));
                }
            }
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes()?;
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            let name = match l {
                LayerSpec::BatchNorm { name, .. } => Some(name.as_str()),
                other => other.param_name(),
            };
            if let Some(name) = name {
                if !seen.insert(name) {
                    return Err(Error::Validation(format!("duplicate layer name {name}")));
                }
            }
        }
        let n = self.param_layer_names().len();
        if self.split_index > n {
            return Err(Error::Validation(format!(
                "split index {} exceeds {n} parameterized layers",
                self.split_index
            )));
        }
        Ok(())
    }

    /// Dimension `d` of the (flattened) feature output.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes
            .last()
            .unwrap_or(&self.input_shape)
            .iter()
            .product())
    }

    pub fn param_layer_names(&self) -> Vec<&str> {
        self.layers.iter().filter_map(LayerSpec::param_name).collect()
    }

    pub fn theta1_names(&self) -> Vec<&str> {
        let names = self.param_layer_names();
        names[..self.split_index.min(names.len())].to_vec()
    }

    pub fn theta2_names(&self) -> Vec<&str> {
        let names = self.param_layer_names();
        names[self.split_index.min(names.len())..].to_vec()
    }

    /// Index into `layers` of the first theta2 layer; `layers.len()` when
    /// theta2 is empty. The activation entering this layer is `z0`.
    pub fn boundary(&self) -> usize {
        let mut rank = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.param_name().is_some() {
                if rank == self.split_index {
                    return i;
                }
                rank += 1;
            }
        }
        self.layers.len()
    }

    /// Per-sample shape of `z0`.
    pub fn boundary_shape(&self) -> Result<Vec<usize>> {
        let b = self.boundary();
        if b == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.layer_shapes()?[b - 1].clone())
    }

    /// Copy of this def whose theta2 is exactly `names` (a suffix of the
    /// parameterized layers).
    pub fn with_theta2(&self, names: &[String]) -> Result<Self> {
        let all = self.param_layer_names();
        for n in names {
            if !all.contains(&n.as_str()) {
                return Err(Error::Config(format!("unknown layer {n} in theta2 selection")));
            }
        }
        let split = all.len() - names.len();
        if all[split..].iter().zip(names).any(|(a, b)| *a != b) {
            return Err(Error::Config(format!(
                "theta2 selection {names:?} must be the topmost layers in order; parameterized layers are {all:?}"
            )));
        }
        let mut def = self.clone();
        def.split_index = split;
        Ok(def)
    }

    pub fn find_layer(&self, name: &str) -> Option<(usize, &LayerSpec)> {
        self.layers.iter().enumerate().find(|(_, l)| match l {
            LayerSpec::BatchNorm { name: n, .. } => n == name,
            other => other.param_name() == Some(name),
        })
    }
}
