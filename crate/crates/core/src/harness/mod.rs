//! Datasets, pre-training, the ablation grid and reports.

mod data;
mod experiment;
mod pretrain;

pub use data::{
    gen_synthetic, idx_dataset, load_cifar_binary, load_idx, parse_cifar_binary, parse_idx,
    rotate90, rotation_dataset, stratified_split, Dataset, IdxArray, Split, SyntheticSpec,
    CIFAR_RECORD, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use experiment::{
    cell_params, emit_report, finetune_rows, load_task_data, parse_grid, parse_theta2, prepare, read_report,
    run_ablation, run_grid, time_jvp, Cell, CurveSummary, DataConfig, ExperimentConfig,
    PhaseTimes, PretrainConfig, Prepared, ReportFormat, ResultRecord, TaskData, Variant,
    CONFIG_VERSION, CSV_COLUMNS, REPORT_SCHEMA, REPORT_VERSION,
};
pub use pretrain::{pretrain_rotation, pretrain_source, Pretrained, PretrainTask};
