//! Network architecture, parameters, NTK parametrization, batch-norm
//! folding and checkpoints.

mod batchnorm;
mod checkpoint;
mod forward;
mod params;
mod spec;

pub use batchnorm::{fold_batchnorm, fold_network_batchnorm};
pub use checkpoint::{
    backbone_checkpoint, backbone_from_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, LayerMeta, Section, MAGIC, VERSION,
};
pub use forward::{
    features_batched, forward_features, forward_from_boundary, forward_range, forward_to_boundary,
    record_range, run_layer, FeatureCache,
};
pub use params::{adopt_ntk, build_network, BnStats, LayerParams, ParamSet, Provenance};
pub use spec::{LayerSpec, NetworkDef};

pub(crate) use forward::{check_input, flatten_features};
pub(crate) use spec::resolve_pool;
