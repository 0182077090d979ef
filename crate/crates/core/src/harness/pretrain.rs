use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::{evaluate, finetune, Backbone, LinearHead, TrainConfig, TrainReport};
use crate::harness::data::{rotation_dataset, Dataset};
use crate::netdef::{build_network, NetworkDef, ParamSet, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainTask {
    /// Predict which of four right-angle rotations was applied.
    Rotation,
    /// Supervised training on a disjoint set of source classes.
    SourceClasses,
    /// Keep the random initialization.
    None,
}

/// A pretrained backbone with the accuracy of its discarded head on the
/// pretext training data.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParamSet,
    pub pretext_accuracy: f64,
    pub report: TrainReport,
}

/// Trains every layer of `def` plus a fresh linear head on `data`.
fn train_whole(def: &NetworkDef, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Pretrained> {
    let mut all = def.clone();
    all.split_index = 0;
    let init = build_network(&all, seed)?;
    let head = LinearHead::random(all.feature_dim()?, data.classes, seed);
    let tuned = finetune(&Backbone::new(all, init)?, &head, data, cfg)?;
    let pretext_accuracy = evaluate(&tuned.model()?, data)?;
    let mut params = tuned.backbone.params;
    params.set_provenance(Provenance::Pretrained);
    Ok(Pretrained {
        params,
        pretext_accuracy,
        report: tuned.report,
    })
}

/// Rotation pretext: the network learns to tell 0/90/180/270 degree
/// copies of `data` apart; the 4-way head is discarded.
pub fn pretrain_rotation(def: &NetworkDef, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Pretrained> {
    let shape = data.image_shape();
    if shape[1] != shape[2] {
        return Err(Error::Input("rotation pretext needs square images".into()));
    }
    train_whole(def, &rotation_dataset(data)?, cfg, seed)
}

/// Supervised pretraining on the classes of `source`.
pub fn pretrain_source(def: &NetworkDef, source: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Pretrained> {
    train_whole(def, source, cfg, seed)
}
