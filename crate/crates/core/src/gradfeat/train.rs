use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::model::{Backbone, FeatureCache, FullModel, LinearHead, ModelKind};
use crate::gradfeat::optim::{Optimizer, TrainConfig};
use crate::harness::Dataset;
use crate::netdef::{forward_to_boundary, record_range};
use crate::ops;
use crate::rng;
use crate::tangent::vjp_theta2;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Loss trace of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch (the last entry may cover a partial epoch).
    pub curve: Vec<f32>,
    pub iterations: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.curve.last().copied()
    }
}

/// Shuffled minibatch index stream.
struct Batches {
    rng: rng::Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64, label: &str) -> Self {
        let mut s = Self {
            rng: rng::stream(seed, label),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next batch and whether it closes an epoch.
    fn next(&mut self) -> (Vec<usize>, bool) {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        (idx, end == self.order.len())
    }
}

struct Curve {
    curve: Vec<f32>,
    sum: f64,
    count: usize,
}

impl Curve {
    fn new() -> Self {
        Self { curve: Vec::new(), sum: 0.0, count: 0 }
    }

    fn push(&mut self, loss: f32, iteration: usize, epoch_end: bool) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration,
                msg: format!("loss became {loss}"),
            });
        }
        self.sum += loss as f64;
        self.count += 1;
        if epoch_end {
            self.close();
        }
        Ok(())
    }

    fn close(&mut self) {
        if self.count > 0 {
            self.curve.push((self.sum / self.count as f64) as f32);
            self.sum = 0.0;
            self.count = 0;
        }
    }
}

/// Mean cross-entropy of `model` over a cached dataset.
pub fn dataset_loss(model: &FullModel, cache: &FeatureCache, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut total = 0.0;
    let chunk = 256;
    let mut s = 0;
    while s < labels.len() {
        let e = (s + chunk).min(labels.len());
        let idx: Vec<usize> = (s..e).collect();
        let logits = model.logits_cached(&cache.rows(&idx)?)?;
        let (l, _) = ops::softmax_cross_entropy(&logits, &labels[s..e])?;
        total += l as f64 * (e - s) as f64;
        s = e;
    }
    Ok(total / labels.len() as f64)
}

/// Minimizes softmax cross-entropy over the trainable part of `model`
/// (`w1` and bias for activation, `w2` and bias for gradient, all three
/// for full). Backbones and `omega` are never touched.
pub fn train_linear(
    model: &mut FullModel,
    cache: &FeatureCache,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if labels.is_empty() || cache.len() != labels.len() {
        return Err(Error::Input(format!(
            "training needs a non-empty dataset with matching features ({} features, {} labels)",
            cache.len(),
            labels.len()
        )));
    }
    let c = model.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let start = Instant::now();
    let mut opt = Optimizer::new(cfg)?;
    let mut batches = Batches::new(labels.len(), cfg.batch_size, cfg.seed, "train_linear");
    let mut curve = Curve::new();
    let kind = model.kind;
    for it in 0..cfg.iterations {
        let (idx, epoch_end) = batches.next();
        let batch = cache.rows(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = model.logits_cached(&batch)?;
        let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &y)?;
        curve.push(loss, it, epoch_end)?;

        let g_bias = ops::dense_bias_grad(&dlogits)?;
        let g_w1 = match (&batch.f, kind.uses_activations()) {
            (Some(f), true) => Some(ops::dense_weight_grad(f, &dlogits, 1.0)?),
            _ => None,
        };
        let g_w2 = match (&batch.z0, kind.uses_gradients()) {
            (Some(z0), true) => {
                let u = ops::dense_input_grad(&dlogits, &model.omega, 1.0)?;
                Some(vjp_theta2(&model.gradient.def, &model.gradient.params, z0, &u)?)
            }
            _ => None,
        };

        let mut params: Vec<&mut Tensor> = Vec::new();
        let mut grads: Vec<&Tensor> = Vec::new();
        if let Some(g) = &g_w1 {
            params.push(&mut model.w1.weight);
            grads.push(g);
        }
        params.push(&mut model.w1.bias);
        grads.push(&g_bias);
        if let Some(g) = &g_w2 {
            params.extend(model.w2.tensors_mut());
            grads.extend(g.tensors());
        }
        opt.step(&mut params, &grads)?;
    }
    curve.close();
    Ok(TrainReport {
        curve: curve.curve,
        iterations: cfg.iterations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Builds and trains a model of `kind` on `data`. For the gradient and
/// full kinds `omega` must come from a prior activation fit (or be a
/// deliberate random head); for the activation kind it may be omitted and
/// the probe starts from zero.
pub fn fit(
    kind: ModelKind,
    activation: Arc<Backbone>,
    gradient: Arc<Backbone>,
    omega: Option<&LinearHead>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(FullModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let d = activation.def.feature_dim()?;
    let zero = LinearHead::zeros(d, data.classes);
    let omega = match (kind, omega) {
        (_, Some(o)) => o,
        (ModelKind::Activation, None) => &zero,
        (_, None) => {
            return Err(Error::Input(format!(
                "the {} model needs omega from an activation fit",
                kind.name()
            )))
        }
    };
    let mut model = FullModel::init(kind, activation, gradient, omega)?;
    let cache = model.features(&data.images)?;
    let report = train_linear(&mut model, &cache, &data.labels, cfg)?;
    Ok((model, report))
}

/// Argmax accuracy; ties go to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(model: &FullModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    evaluate_cached(model, &model.features(&data.images)?, &data.labels)
}

pub fn evaluate_cached(model: &FullModel, cache: &FeatureCache, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut hits = 0.0;
    let chunk = 256;
    let mut s = 0;
    while s < labels.len() {
        let e = (s + chunk).min(labels.len());
        let idx: Vec<usize> = (s..e).collect();
        let logits = model.logits_cached(&cache.rows(&idx)?)?;
        hits += accuracy(&logits, &labels[s..e])? * (e - s) as f64;
        s = e;
    }
    Ok(hits / labels.len() as f64)
}

/// Result of fine-tuning theta2 and the head.
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub backbone: Backbone,
    pub head: LinearHead,
    pub report: TrainReport,
}

impl Finetuned {
    /// The fine-tuned network as an activation model.
    pub fn model(&self) -> Result<FullModel> {
        let b = Arc::new(self.backbone.clone());
        FullModel::init(ModelKind::Activation, b.clone(), b, &self.head)
    }
}

/// Jointly trains theta2 and the head `(omega, b)` by backpropagation
/// through the live network; theta1 stays frozen.
pub fn finetune(
    backbone: &Backbone,
    head: &LinearHead,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Finetuned> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let def = &backbone.def;
    let start = Instant::now();
    let mut z0_parts = Vec::new();
    let mut s = 0;
    while s < data.len() {
        let e = (s + 256).min(data.len());
        z0_parts.push(forward_to_boundary(def, &backbone.params, &data.images.slice_rows(s, e)?)?);
        s = e;
    }
    let z0 = Tensor::concat_rows(&z0_parts)?;
    let theta2: Vec<String> = def.theta2_names().iter().map(|s| s.to_string()).collect();
    let mut params = backbone.params.clone();
    let mut head = head.clone();
    let mut opt = Optimizer::new(cfg)?;
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed, "finetune");
    let mut curve = Curve::new();
    for it in 0..cfg.iterations {
        let (idx, epoch_end) = batches.next();
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let input = tape.leaf(z0.gather_rows(&idx)?, false);
        let names = theta2.clone();
        let top = record_range(
            &mut tape,
            def,
            &params,
            input,
            def.boundary(),
            def.layers.len(),
            &move |n| names.iter().any(|t| t == n),
        )?;
        let top = tape.flatten(top)?;
        let hw = tape.param("head.weight", head.weight.clone())?;
        let hb = tape.param("head.bias", head.bias.clone())?;
        let logits = tape.dense(top, hw, Some(hb), 1.0)?;
        let (loss, dlogits) = ops::softmax_cross_entropy(tape.value(logits), &y)?;
        curve.push(loss, it, epoch_end)?;
        let grads = tape.backward(logits, &dlogits)?.into_params();

        let mut targets: Vec<&mut Tensor> = Vec::new();
        let mut gs: Vec<&Tensor> = Vec::new();
        let mut missing = None;
        for (name, lp) in params.layers_mut() {
            if !theta2.iter().any(|t| t == name) {
                continue;
            }
            match grads.get(&format!("{name}.weight")) {
                Some(g) => {
                    targets.push(&mut lp.weight);
                    gs.push(g);
                }
                None => missing = Some(name.to_string()),
            }
            if let Some(b) = lp.bias.as_mut() {
                match grads.get(&format!("{name}.bias")) {
                    Some(g) => {
                        targets.push(b);
                        gs.push(g);
                    }
                    None => missing = Some(name.to_string()),
                }
            }
        }
        if let Some(name) = missing {
            return Err(Error::State(format!("no gradient reached layer {name}")));
        }
        targets.push(&mut head.weight);
        gs.push(&grads["head.weight"]);
        targets.push(&mut head.bias);
        gs.push(&grads["head.bias"]);
        opt.step(&mut targets, &gs)?;
    }
    curve.close();
    Ok(Finetuned {
        backbone: Backbone::new(def.clone(), params)?,
        head,
        report: TrainReport {
            curve: curve.curve,
            iterations: cfg.iterations,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}
