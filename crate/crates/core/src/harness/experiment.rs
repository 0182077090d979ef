//! Experiment configuration, the provenance ablation grid and reports.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::{
    evaluate, evaluate_cached, finetune, fit, Backbone, FullModel, LinearHead, ModelKind,
    OptimizerKind, TrainConfig, TrainReport,
};
use crate::harness::data::{
    gen_synthetic, load_cifar_binary, load_idx, stratified_split, Dataset, Split, SyntheticSpec,
};
use crate::harness::pretrain::{pretrain_rotation, pretrain_source, PretrainTask};
use crate::netdef::{build_network, features_batched, load_checkpoint, NetworkDef, ParamSet, Provenance};
use crate::rng::derive_seed;
use crate::tangent::{jvp_forward, TangentParams};
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const REPORT_SCHEMA: &str = "gradfeat-results";

fn letter(p: Provenance) -> char {
    match p {
        Provenance::Random => 'r',
        Provenance::Pretrained => 'p',
    }
}

/// One ablation cell: where theta1, theta2 and omega come from. Written
/// as three letters `r`/`p`, e.g. `"rpp"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cell {
    pub theta1: Provenance,
    pub theta2: Provenance,
    pub omega: Provenance,
}

impl Cell {
    pub const PRETRAINED: Cell = Cell {
        theta1: Provenance::Pretrained,
        theta2: Provenance::Pretrained,
        omega: Provenance::Pretrained,
    };

    /// The eight cells, random before pretrained on each axis.
    pub fn all() -> Vec<Cell> {
        let ps = [Provenance::Random, Provenance::Pretrained];
        let mut out = Vec::with_capacity(8);
        for &theta1 in &ps {
            for &theta2 in &ps {
                for &omega in &ps {
                    out.push(Cell { theta1, theta2, omega });
                }
            }
        }
        out
    }

    /// Whether the cell reads pretrained network values.
    pub fn needs_backbone(&self) -> bool {
        self.theta1 == Provenance::Pretrained || self.theta2 == Provenance::Pretrained
    }

    pub fn code(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", letter(self.theta1), letter(self.theta2), letter(self.omega))
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid cell {s:?} must be three letters r|p (theta1, theta2, omega)"));
        let ps: Vec<Provenance> = s
            .chars()
            .map(|c| match c {
                'r' => Ok(Provenance::Random),
                'p' => Ok(Provenance::Pretrained),
                _ => Err(bad()),
            })
            .collect::<Result<_>>()?;
        match ps[..] {
            [theta1, theta2, omega] => Ok(Cell { theta1, theta2, omega }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Cell {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Cell> for String {
    fn from(c: Cell) -> String {
        c.to_string()
    }
}

/// `"all"` or a comma-separated list of cells.
pub fn parse_grid(s: &str) -> Result<Vec<Cell>> {
    if s.trim() == "all" {
        return Ok(Cell::all());
    }
    let mut out: Vec<Cell> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c: Cell = part.parse()?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(out)
}

/// Comma-separated layer names, `;` between selections.
pub fn parse_theta2(s: &str) -> Result<Vec<Vec<String>>> {
    let sels: Vec<Vec<String>> = s
        .split(';')
        .map(|sel| {
            sel.split(',')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(String::from)
                .collect::<Vec<_>>()
        })
        .filter(|sel| !sel.is_empty())
        .collect();
    if sels.is_empty() {
        return Err(Error::Config("empty theta2 selection".into()));
    }
    Ok(sels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated textures; the pretext pool is an independent draw.
    Synthetic {
        spec: SyntheticSpec,
        test_per_class: usize,
        #[serde(default)]
        pretext_per_class: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

impl DataConfig {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DataConfig::Synthetic { .. } => Vec::new(),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels],
            DataConfig::Cifar { train, test } => train.iter().map(PathBuf::as_path).chain([test.as_path()]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: PretrainTask,
    /// Load the backbone instead of pretraining.
    pub checkpoint: Option<PathBuf>,
    /// Source classes for the `source-classes` task; the target task keeps
    /// the others.
    pub source_classes: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            task: PretrainTask::Rotation,
            checkpoint: None,
            source_classes: Vec::new(),
            train: TrainConfig {
                lr: 2e-3,
                ..TrainConfig::adam().with_iterations(1500)
            },
        }
    }
}

fn default_probe() -> TrainConfig {
    TrainConfig {
        lr: 3e-2,
        ..TrainConfig::adam().with_iterations(10_000)
    }
}

fn default_linear() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        ..TrainConfig::adam().with_iterations(3000)
    }
}

fn default_finetune() -> Vec<TrainConfig> {
    vec![
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::adam().with_iterations(3000)
        },
        TrainConfig {
            lr: 1e-2,
            ..TrainConfig::sgd().with_iterations(3000)
        },
    ]
}

/// One experiment. Phase seeds are derived from `seed` when the config
/// is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    /// Defaults to the desk network for the data's image shape (or the
    /// checkpoint's network).
    #[serde(default)]
    pub network: Option<NetworkDef>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// theta2 selections; each is the topmost parameterized layers in order.
    /// Empty means the network's own split.
    #[serde(default)]
    pub theta2: Vec<Vec<String>>,
    #[serde(default = "Cell::all")]
    pub grid: Vec<Cell>,
    #[serde(default = "default_probe")]
    pub probe: TrainConfig,
    /// Gradient and full models.
    #[serde(default = "default_linear")]
    pub linear: TrainConfig,
    /// One fine-tuning row per entry.
    #[serde(default = "default_finetune")]
    pub finetune: Vec<TrainConfig>,
}

impl ExperimentConfig {
    /// Defaults around `data`.
    pub fn new(data: DataConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: None,
            data,
            network: None,
            pretrain: PretrainConfig::default(),
            theta2: Vec::new(),
            grid: Cell::all(),
            probe: default_probe(),
            linear: default_linear(),
            finetune: default_finetune(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that need no data or training: version, phase configs, grid
    /// consistency and the existence of every input file.
    pub fn check(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported", self.version)));
        }
        self.probe.validate()?;
        self.linear.validate()?;
        self.pretrain.train.validate()?;
        for f in &self.finetune {
            f.validate()?;
        }
        if self.grid.is_empty() {
            return Err(Error::Config("empty grid".into()));
        }
        if let Some(ck) = &self.pretrain.checkpoint {
            if !ck.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", ck.display())));
            }
        } else if self.pretrain.task == PretrainTask::None {
            if let Some(c) = self.grid.iter().find(|c| c.needs_backbone()) {
                return Err(Error::Config(format!(
                    "grid cell {c} needs pretrained values but no checkpoint or pretraining task is given"
                )));
            }
        }
        if self.pretrain.task == PretrainTask::SourceClasses && self.pretrain.checkpoint.is_none() {
            if self.pretrain.source_classes.is_empty() {
                return Err(Error::Config("the source-classes task needs source_classes".into()));
            }
        }
        for p in self.data.paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Target train/test splits and the images used for pretraining.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    pub pretext: Dataset,
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let images: Vec<Tensor> = parts.iter().map(|d| d.images.clone()).collect();
    let classes = parts.iter().map(|d| d.classes).max().unwrap_or(1);
    let labels = parts.into_iter().flat_map(|d| d.labels).collect();
    Dataset::new(Tensor::concat_rows(&images)?, labels, classes, split)
}

fn with_split(mut d: Dataset, split: Split) -> Dataset {
    d.split = split;
    d
}

/// Loads or generates the data of `cfg`, applying the source/target class
/// split of the `source-classes` task.
pub fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let seed = cfg.seed;
    let (train, test, pretext) = match &cfg.data {
        DataConfig::Synthetic {
            spec,
            test_per_class,
            pretext_per_class,
        } => {
            let all = gen_synthetic(spec, derive_seed(seed, "target_data"))?;
            let (train, test) = stratified_split(&all, *test_per_class, derive_seed(seed, "split"))?;
            let pool_spec = SyntheticSpec {
                per_class: pretext_per_class.unwrap_or(spec.per_class),
                ..spec.clone()
            };
            let pretext = gen_synthetic(&pool_spec, derive_seed(seed, "pretext_data"))?;
            (train, test, pretext)
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = with_split(load_idx(test_images, test_labels)?, Split::Test);
            (train.clone(), test, train)
        }
        DataConfig::Cifar { train, test } => {
            let parts = train.iter().map(|p| load_cifar_binary(p)).collect::<Result<Vec<_>>>()?;
            let train = concat(parts, Split::Train)?;
            let test = with_split(load_cifar_binary(test)?, Split::Test);
            (train.clone(), test, train)
        }
    };
    if train.image_shape() != test.image_shape() {
        return Err(Error::Input(format!(
            "train images {:?} and test images {:?} differ in shape",
            train.image_shape(),
            test.image_shape()
        )));
    }
    if cfg.pretrain.task == PretrainTask::SourceClasses && cfg.pretrain.checkpoint.is_none() {
        let source = &cfg.pretrain.source_classes;
        let classes = train.classes.max(test.classes);
        if let Some(bad) = source.iter().find(|&&k| k >= classes) {
            return Err(Error::Config(format!("source class {bad} out of range (classes: {classes})")));
        }
        let target: Vec<usize> = (0..classes).filter(|k| !source.contains(k)).collect();
        if target.len() < 2 {
            return Err(Error::Config("the target task needs at least two classes outside source_classes".into()));
        }
        return Ok(TaskData {
            train: train.select_classes(&target)?,
            test: test.select_classes(&target)?,
            pretext: pretext.select_classes(source)?,
        });
    }
    Ok(TaskData { train, test, pretext })
}

/// A resolved config with its data and backbone.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Network, theta2 selections and phase seeds filled in.
    pub cfg: ExperimentConfig,
    pub def: NetworkDef,
    pub data: TaskData,
    /// The backbone theta-bar: pretrained, loaded, or the random init when
    /// no pretraining is configured.
    pub backbone: ParamSet,
    pub pretext_accuracy: Option<f64>,
    pub pretrain_seconds: f64,
}

impl Prepared {
    pub fn is_pretrained(&self) -> bool {
        self.backbone.iter().all(|(_, l)| l.provenance == Provenance::Pretrained)
    }
}

/// Validates `cfg`, loads data and checkpoint, resolves defaults, then
/// pretrains if needed. Every configuration error surfaces before any
/// training starts.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.check()?;
    let data = load_task_data(cfg)?;
    let loaded = cfg.pretrain.checkpoint.as_deref().map(load_checkpoint).transpose()?;

    let mut r = cfg.clone();
    let seed = r.seed;
    r.pretrain.train.seed = derive_seed(seed, "pretrain");
    r.probe.seed = derive_seed(seed, "probe");
    r.linear.seed = derive_seed(seed, "linear");
    for (i, f) in r.finetune.iter_mut().enumerate() {
        f.seed = derive_seed(seed, &format!("finetune{i}"));
    }
    let def = match (&r.network, &loaded) {
        (Some(n), Some((ck, _))) if n.layers != ck.layers || n.input_shape != ck.input_shape => {
            return Err(Error::Config("network differs from the checkpoint's network".into()))
        }
        (Some(n), _) => n.clone(),
        (None, Some((ck, _))) => ck.clone(),
        (None, None) => {
            let s = data.train.image_shape();
            if s[1] != s[2] {
                return Err(Error::Config(format!("no network given and images {s:?} are not square")));
            }
            NetworkDef::desk_default(s[0], s[1])
        }
    };
    def.validate()?;
    if def.input_shape != data.train.image_shape() {
        return Err(Error::Config(format!(
            "network input {:?} does not match images {:?}",
            def.input_shape,
            data.train.image_shape()
        )));
    }
    if r.theta2.is_empty() {
        r.theta2 = vec![def.theta2_names().iter().map(|s| s.to_string()).collect()];
    }
    for sel in &r.theta2 {
        let d = def.with_theta2(sel)?;
        if d.theta2_names().is_empty() {
            return Err(Error::Config("theta2 selection is empty".into()));
        }
    }
    r.network = Some(def.clone());

    let start = Instant::now();
    let (backbone, pretext_accuracy) = match loaded {
        Some((_, params)) => (params, None),
        None => match r.pretrain.task {
            PretrainTask::None => (build_network(&def, derive_seed(seed, "backbone_init"))?, None),
            PretrainTask::Rotation => {
                let p = pretrain_rotation(&def, &data.pretext, &r.pretrain.train, derive_seed(seed, "pretrain_init"))?;
                (p.params, Some(p.pretext_accuracy))
            }
            PretrainTask::SourceClasses => {
                let p = pretrain_source(&def, &data.pretext, &r.pretrain.train, derive_seed(seed, "pretrain_init"))?;
                (p.params, Some(p.pretext_accuracy))
            }
        },
    };
    backbone.check(&def)?;
    Ok(Prepared {
        cfg: r,
        def,
        data,
        backbone,
        pretext_accuracy,
        pretrain_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Activation,
    Gradient,
    Full,
    Finetune,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Activation => "activation",
            Variant::Gradient => "gradient",
            Variant::Full => "full",
            Variant::Finetune => "finetune",
        }
    }
}

impl From<ModelKind> for Variant {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Activation => Variant::Activation,
            ModelKind::Gradient => Variant::Gradient,
            ModelKind::Full => Variant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub iterations: usize,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl CurveSummary {
    pub fn of(r: &TrainReport) -> Self {
        Self {
            iterations: r.iterations,
            epochs: r.curve.len(),
            first_loss: r.curve.first().copied().unwrap_or(f32::NAN) as f64,
            final_loss: r.final_loss().unwrap_or(f32::NAN) as f64,
        }
    }
}

/// Wall time per phase in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub train: f64,
    pub eval: f64,
    /// Plain forward pass over the test images (control).
    pub plain_forward: Option<f64>,
    /// Tangent pass from the cached boundary activations.
    pub jvp_forward: Option<f64>,
}

impl PhaseTimes {
    pub fn jvp_ratio(&self) -> Option<f64> {
        Some(self.jvp_forward? / self.plain_forward?)
    }
}

/// One row of an ablation report. `metric` is test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub variant: Variant,
    pub theta2: Vec<String>,
    pub provenance: Cell,
    pub optimizer: OptimizerKind,
    pub metric: f64,
    pub train_metric: f64,
    pub curve: CurveSummary,
    pub seconds: PhaseTimes,
    pub seed: u64,
    /// Seed of the random omega draw, for cells that use one.
    pub omega_seed: Option<u64>,
}

fn round4(x: f64) -> f64 {
    if x.is_finite() {
        (x * 1e4).round() / 1e4
    } else {
        x
    }
}

impl ResultRecord {
    /// Copy with every float rounded to four decimals.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        r.metric = round4(r.metric);
        r.train_metric = round4(r.train_metric);
        r.curve.first_loss = round4(r.curve.first_loss);
        r.curve.final_loss = round4(r.curve.final_loss);
        r.seconds.train = round4(r.seconds.train);
        r.seconds.eval = round4(r.seconds.eval);
        r.seconds.plain_forward = r.seconds.plain_forward.map(round4);
        r.seconds.jvp_forward = r.seconds.jvp_forward.map(round4);
        r
    }

    /// Label for the cell, e.g. `full[conv3] ppp`.
    pub fn label(&self) -> String {
        format!("{}[{}] {}", self.variant.name(), self.theta2.join("+"), self.provenance)
    }
}

/// Times a plain forward pass over `images` and the tangent pass of `w2`
/// from the boundary activations.
pub fn time_jvp(backbone: &Backbone, w2: &TangentParams, images: &Tensor) -> Result<(f64, f64)> {
    let t = Instant::now();
    let (_, z0) = features_batched(&backbone.def, &backbone.params, images, 256)?;
    let plain = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let n = z0.dim(0);
    let mut s = 0;
    while s < n {
        let e = (s + 256).min(n);
        jvp_forward(&backbone.def, &backbone.params, w2, &z0.slice_rows(s, e)?)?;
        s = e;
    }
    Ok((plain, t.elapsed().as_secs_f64()))
}

/// Backbone values of a cell: each section taken from `pretrained` or
/// `random`.
pub fn cell_params(def: &NetworkDef, pretrained: &ParamSet, random: &ParamSet, cell: Cell) -> Result<ParamSet> {
    let mut p = pretrained.clone();
    if cell.theta1 == Provenance::Random {
        p.take_layers_from(random, &def.theta1_names())?;
    }
    if cell.theta2 == Provenance::Random {
        p.take_layers_from(random, &def.theta2_names())?;
    }
    Ok(p)
}

struct Ctx<'a> {
    p: &'a Prepared,
    records: Vec<ResultRecord>,
}

impl Ctx<'_> {
    fn log(&self, r: &ResultRecord) {
        eprintln!(
            "{:<28} acc {:.4} (train {:.4}) {:.1}s",
            r.label(),
            r.metric,
            r.train_metric,
            r.seconds.train
        );
    }

    fn push(&mut self, r: ResultRecord) {
        self.log(&r);
        self.records.push(r);
    }

    /// Trains one linear model and records it.
    #[allow(clippy::too_many_arguments)]
    fn linear(
        &mut self,
        kind: ModelKind,
        act: &Arc<Backbone>,
        grad: &Arc<Backbone>,
        omega: Option<&LinearHead>,
        cfg: &TrainConfig,
        cell: Cell,
        omega_seed: Option<u64>,
    ) -> Result<FullModel> {
        let data = &self.p.data;
        let t = Instant::now();
        let (model, report) = fit(kind, act.clone(), grad.clone(), omega, &data.train, cfg)?;
        let train_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let metric = evaluate_cached(&model, &model.features(&data.test.images)?, &data.test.labels)?;
        let train_metric = evaluate(&model, &data.train)?;
        let eval_s = t.elapsed().as_secs_f64();
        let mut seconds = PhaseTimes {
            train: train_s,
            eval: eval_s,
            ..Default::default()
        };
        if kind.uses_gradients() {
            let (plain, jvp) = time_jvp(grad, &model.w2, &data.test.images)?;
            seconds.plain_forward = Some(plain);
            seconds.jvp_forward = Some(jvp);
        }
        self.push(ResultRecord {
            variant: kind.into(),
            theta2: if kind.uses_gradients() { grad.def.theta2_names().iter().map(|s| s.to_string()).collect() } else { Vec::new() },
            provenance: cell,
            optimizer: cfg.optimizer,
            metric,
            train_metric,
            curve: CurveSummary::of(&report),
            seconds,
            seed: self.p.cfg.seed,
            omega_seed,
        });
        Ok(model)
    }
}

/// Runs the pipeline on a prepared experiment: activation probes, then
/// gradient and full models for every theta2 selection and grid cell,
/// then fine-tuning rows. Activation features always come from the
/// backbone; omega is the backbone probe unless a cell asks for a random
/// one.
pub fn run_grid(p: &Prepared) -> Result<Vec<ResultRecord>> {
    let cfg = &p.cfg;
    let def = &p.def;
    let seed = cfg.seed;
    let base = if p.is_pretrained() { Provenance::Pretrained } else { Provenance::Random };
    let fitted = Provenance::Pretrained;
    let mut ctx = Ctx { p, records: Vec::new() };

    let act = Arc::new(Backbone::new(def.clone(), p.backbone.clone())?);
    let probe_cell = Cell { theta1: base, theta2: base, omega: fitted };
    let probe = ctx.linear(ModelKind::Activation, &act, &act, None, &cfg.probe, probe_cell, None)?;
    let random = build_network(def, derive_seed(seed, "random_backbone"))?;
    if base == Provenance::Pretrained {
        let rb = Arc::new(Backbone::new(def.clone(), random.clone())?);
        let cell = Cell { theta1: Provenance::Random, theta2: Provenance::Random, omega: fitted };
        ctx.linear(ModelKind::Activation, &rb, &rb, None, &cfg.probe, cell, None)?;
    }

    let omega_hat = probe.w1.clone();
    let omega_seed = derive_seed(seed, "random_omega");
    let (d, c) = omega_hat.dims();
    let random_omega = LinearHead::random(d, c, omega_seed);
    for sel in &cfg.theta2 {
        let gdef = def.with_theta2(sel)?;
        let act = Arc::new(Backbone::new(gdef.clone(), p.backbone.clone())?);
        for &cell in &cfg.grid {
            let grad = Arc::new(Backbone::new(gdef.clone(), cell_params(&gdef, &p.backbone, &random, cell)?)?);
            let (omega, oseed) = match cell.omega {
                Provenance::Pretrained => (&omega_hat, None),
                Provenance::Random => (&random_omega, Some(omega_seed)),
            };
            for kind in [ModelKind::Gradient, ModelKind::Full] {
                ctx.linear(kind, &act, &grad, Some(omega), &cfg.linear, cell, oseed)?;
            }
        }
    }
    ctx.records.extend(finetune_rows(p, &omega_hat)?);
    Ok(ctx.records)
}

/// One fine-tuning row per theta2 selection and configured optimizer,
/// starting from the backbone and the head `omega`.
pub fn finetune_rows(p: &Prepared, omega: &LinearHead) -> Result<Vec<ResultRecord>> {
    let base = if p.is_pretrained() { Provenance::Pretrained } else { Provenance::Random };
    let mut ctx = Ctx { p, records: Vec::new() };
    for sel in &p.cfg.theta2 {
        let gdef = p.def.with_theta2(sel)?;
        let bb = Backbone::new(gdef, p.backbone.clone())?;
        for ft in &p.cfg.finetune {
            let t = Instant::now();
            let tuned = finetune(&bb, omega, &p.data.train, ft)?;
            let train_s = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let model = tuned.model()?;
            let metric = evaluate(&model, &p.data.test)?;
            let train_metric = evaluate(&model, &p.data.train)?;
            ctx.push(ResultRecord {
                variant: Variant::Finetune,
                theta2: sel.clone(),
                provenance: Cell { theta1: base, theta2: base, omega: Provenance::Pretrained },
                optimizer: ft.optimizer,
                metric,
                train_metric,
                curve: CurveSummary::of(&tuned.report),
                seconds: PhaseTimes {
                    train: train_s,
                    eval: t.elapsed().as_secs_f64(),
                    ..Default::default()
                },
                seed: p.cfg.seed,
                omega_seed: None,
            });
        }
    }
    Ok(ctx.records)
}

/// [`prepare`] followed by [`run_grid`].
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    run_grid(&prepare(cfg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other}; expected csv or json"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 18] = [
    "variant",
    "theta2",
    "theta1_provenance",
    "theta2_provenance",
    "omega_provenance",
    "optimizer",
    "metric",
    "train_metric",
    "iterations",
    "epochs",
    "first_loss",
    "final_loss",
    "train_seconds",
    "eval_seconds",
    "plain_forward_seconds",
    "jvp_forward_seconds",
    "seed",
    "omega_seed",
];

fn prov_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Random => "random",
        Provenance::Pretrained => "pretrained",
    }
}

fn opt_f(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn csv_row(r: &ResultRecord) -> String {
    let opt = match r.optimizer {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    [
        r.variant.name().to_string(),
        r.theta2.join("+"),
        prov_name(r.provenance.theta1).into(),
        prov_name(r.provenance.theta2).into(),
        prov_name(r.provenance.omega).into(),
        opt.into(),
        format!("{:.4}", r.metric),
        format!("{:.4}", r.train_metric),
        r.curve.iterations.to_string(),
        r.curve.epochs.to_string(),
        format!("{:.4}", r.curve.first_loss),
        format!("{:.4}", r.curve.final_loss),
        format!("{:.4}", r.seconds.train),
        format!("{:.4}", r.seconds.eval),
        opt_f(r.seconds.plain_forward),
        opt_f(r.seconds.jvp_forward),
        r.seed.to_string(),
        r.omega_seed.map(|s| s.to_string()).unwrap_or_default(),
    ]
    .join(",")
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportFile {
    schema: String,
    version: u32,
    records: Vec<ResultRecord>,
}

/// Writes `records` as CSV (header plus one row each) or as versioned JSON.
/// Floats are rounded to four decimals.
pub fn emit_report(records: &[ResultRecord], path: &Path, format: ReportFormat) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no records to report".into()));
    }
    let mut f = fs::File::create(path)?;
    match format {
        ReportFormat::Csv => {
            writeln!(f, "{}", CSV_COLUMNS.join(","))?;
            for r in records {
                writeln!(f, "{}", csv_row(r))?;
            }
        }
        ReportFormat::Json => {
            let file = ReportFile {
                schema: REPORT_SCHEMA.into(),
                version: REPORT_VERSION,
                records: records.iter().map(ResultRecord::rounded).collect(),
            };
            serde_json::to_writer_pretty(&mut f, &file)?;
            writeln!(f)?;
        }
    }
    Ok(())
}

/// Reads a JSON report written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<Vec<ResultRecord>> {
    let file: ReportFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.schema != REPORT_SCHEMA || file.version != REPORT_VERSION {
        return Err(Error::Config(format!(
            "unsupported report {} version {}",
            file.schema, file.version
        )));
    }
    Ok(file.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(metric: f64) -> ResultRecord {
        ResultRecord {
            variant: Variant::Full,
            theta2: vec!["conv2".into(), "conv3".into()],
            provenance: "rpp".parse().unwrap(),
            optimizer: OptimizerKind::Adam,
            metric,
            train_metric: 0.98765,
            curve: CurveSummary {
                iterations: 10,
                epochs: 2,
                first_loss: 2.302585,
                final_loss: 0.5,
            },
            seconds: PhaseTimes {
                train: 1.23456,
                eval: 0.1,
                plain_forward: Some(0.02),
                jvp_forward: Some(0.03),
            },
            seed: 3,
            omega_seed: None,
        }
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DataConfig::Synthetic {
            spec: SyntheticSpec::new(3, 12, 8),
            test_per_class: 4,
            pretext_per_class: Some(8),
        });
        cfg.pretrain.train = TrainConfig { lr: 3e-3, ..TrainConfig::adam().with_iterations(20) };
        cfg.probe = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(30) };
        cfg.linear = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(10) };
        cfg.finetune = vec![TrainConfig::sgd().with_iterations(5)];
        cfg
    }

    #[test]
    fn cells_parse_and_print() {
        assert_eq!(Cell::all().len(), 8);
        for c in Cell::all() {
            assert_eq!(c.code().parse::<Cell>().unwrap(), c);
        }
        assert_eq!(Cell::PRETRAINED.code(), "ppp");
        assert!(matches!("rp".parse::<Cell>(), Err(Error::Config(_))));
        assert!(matches!("rpx".parse::<Cell>(), Err(Error::Config(_))));
        assert_eq!(parse_grid("ppp, rrp,ppp").unwrap().len(), 2);
        assert_eq!(parse_grid("all").unwrap(), Cell::all());
        assert!(parse_grid(" , ").is_err());
        assert_eq!(
            parse_theta2("conv3;conv2,conv3").unwrap(),
            vec![vec!["conv3".to_string()], vec!["conv2".into(), "conv3".into()]]
        );
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = tiny_config();
        cfg.network = Some(NetworkDef::desk_default(1, 8));
        cfg.theta2 = vec![vec!["conv3".into()]];
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_toml_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "version = 1\n[data]\nkind = \"synthetic\"\ntest_per_class = 5\n[data.spec]\nclasses = 4\nper_class = 20\nsize = 12\n[probe]\nlr = 0.05\n",
        )
        .unwrap();
        assert_eq!(cfg.grid, Cell::all());
        assert_eq!(cfg.probe.lr, 0.05);
        assert_eq!(cfg.probe.batch_size, 64);
        assert_eq!(cfg.finetune.len(), 2);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("version = 2\n[data]\nkind = \"cifar\"\ntrain = []\ntest = \"x\"\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("version = 1\nbogus = 3\n[data]\nkind = \"cifar\"\ntrain = []\ntest = \"x\"\n"),
            Err(Error::Config(_))
        ));
        let mut cfg = tiny_config();
        cfg.pretrain.checkpoint = Some(PathBuf::from("/nonexistent/backbone.gfck"));
        assert!(matches!(prepare(&cfg), Err(Error::Config(m)) if m.contains("checkpoint")));
        let mut cfg = tiny_config();
        cfg.pretrain.task = PretrainTask::None;
        assert!(matches!(prepare(&cfg), Err(Error::Config(m)) if m.contains("grid cell")));
        let mut cfg = tiny_config();
        cfg.theta2 = vec![vec!["conv9".into()]];
        assert!(matches!(prepare(&cfg), Err(Error::Config(m)) if m.contains("conv9")));
        let mut cfg = tiny_config();
        cfg.theta2 = vec![vec!["conv2".into()]];
        assert!(matches!(prepare(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_cell_grid_layout() {
        let mut cfg = tiny_config();
        cfg.grid = vec![Cell::PRETRAINED];
        let recs = run_ablation(&cfg).unwrap();
        let count = |v: Variant| recs.iter().filter(|r| r.variant == v).count();
        assert_eq!(count(Variant::Gradient), 1);
        assert_eq!(count(Variant::Full), 1);
        assert_eq!(count(Variant::Activation), 2);
        assert_eq!(count(Variant::Finetune), 1);
        assert!(recs.iter().all(|r| (0.0..=1.0).contains(&r.metric)));
        let full = recs.iter().find(|r| r.variant == Variant::Full).unwrap();
        assert_eq!(full.theta2, vec!["conv3".to_string()]);
        assert!(full.seconds.jvp_ratio().is_some());
    }

    #[test]
    fn source_task_splits_classes() {
        let mut cfg = tiny_config();
        cfg.data = DataConfig::Synthetic {
            spec: SyntheticSpec::new(5, 10, 8),
            test_per_class: 3,
            pretext_per_class: None,
        };
        cfg.pretrain.task = PretrainTask::SourceClasses;
        cfg.pretrain.source_classes = vec![0, 1];
        let d = load_task_data(&cfg).unwrap();
        assert_eq!(d.pretext.classes, 2);
        assert_eq!(d.train.classes, 3);
        assert_eq!(d.test.len(), 9);
        cfg.pretrain.source_classes = vec![0, 9];
        assert!(matches!(load_task_data(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn reports() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(0.123456), record(0.5)];
        let csv = dir.path().join("r.csv");
        emit_report(&recs, &csv, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), recs.len() + 1);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("full,conv2+conv3,random,pretrained,pretrained,adam,0.1235,0.9877,10,2,2.3026,"));
        assert_eq!(lines[1].split(',').count(), CSV_COLUMNS.len());

        let json = dir.path().join("r.json");
        emit_report(&recs, &json, ReportFormat::Json).unwrap();
        let back = read_report(&json).unwrap();
        let want: Vec<ResultRecord> = recs.iter().map(ResultRecord::rounded).collect();
        assert_eq!(back, want);

        assert!(matches!(emit_report(&[], &csv, ReportFormat::Csv), Err(Error::Input(_))));
        let bad = dir.path().join("missing").join("r.csv");
        assert!(matches!(emit_report(&recs, &bad, ReportFormat::Csv), Err(Error::Io(_))));
    }
}
