use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gradfeat::gradfeat::{evaluate, fit, Backbone, FullModel, LinearHead, ModelKind};
use gradfeat::harness::{
    cell_params, emit_report, finetune_rows, parse_grid, parse_theta2, prepare, read_report, run_grid, Cell,
    CurveSummary, ExperimentConfig, PhaseTimes, Prepared, ReportFormat, ResultRecord,
};
use gradfeat::netdef::{
    build_network, save_checkpoint, Checkpoint, CheckpointMeta, NetworkDef, ParamSet, Section,
};
use gradfeat::oracle::{adjoint_check, explicit_check, jvp_check, taylor_check, OracleReport, DEFAULT_EPS};
use gradfeat::rng;
use gradfeat::tangent::TangentParams;
use gradfeat::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "gradfeat", version, about = "Linear models over activation and gradient features of pretrained convnets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `runs/default`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// theta2 layers, comma-separated; `;` separates selections.
    #[arg(long)]
    theta2: Option<String>,
    /// Grid cells such as `ppp,rrp`, or `all`.
    #[arg(long)]
    grid: Option<String>,
    /// Backbone checkpoint to use instead of pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the backbone and save it as `backbone.gfck`.
    Pretrain(Common),
    /// Fit the activation probe and save it as `probe.gfck`.
    FitProbe(Common),
    /// Train one linear model on the first theta2 selection.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        kind: ModelKind,
    },
    /// Fine-tune theta2 and the head with every configured optimizer.
    Finetune(Common),
    /// Run the whole grid and write `results.csv` / `results.json`.
    Ablate(Common),
    /// Run the numerical checks and print a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Evaluate a model written by `train` on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Convert a JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = &c.theta2 {
        cfg.theta2 = parse_theta2(t)?;
    }
    if let Some(g) = &c.grid {
        cfg.grid = parse_grid(g)?;
    }
    if let Some(ck) = &c.checkpoint {
        cfg.pretrain.checkpoint = Some(ck.clone());
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    cfg.out = Some(out.clone());
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn prepare_in(c: &Common) -> Result<(Prepared, PathBuf)> {
    let (cfg, out) = load_config(c)?;
    let p = prepare(&cfg)?;
    fs::write(out.join("config.resolved.toml"), p.cfg.to_toml()?)?;
    if let Some(acc) = p.pretext_accuracy {
        eprintln!("pretext accuracy {acc:.4} ({:.1}s)", p.pretrain_seconds);
    }
    Ok((p, out))
}

fn head_checkpoint(def: &NetworkDef, extra: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            section: Section::Head,
            network: def.clone(),
            layers: Default::default(),
            extra,
        },
        tensors,
    }
}

fn fit_probe(p: &Prepared) -> Result<(FullModel, f64)> {
    let bb = Arc::new(Backbone::new(p.def.clone(), p.backbone.clone())?);
    let (probe, _) = fit(ModelKind::Activation, bb.clone(), bb, None, &p.data.train, &p.cfg.probe)?;
    let acc = evaluate(&probe, &p.data.test)?;
    Ok((probe, acc))
}

fn write_records(out: &Path, stem: &str, records: &[ResultRecord]) -> Result<()> {
    emit_report(records, &out.join(format!("{stem}.csv")), ReportFormat::Csv)?;
    emit_report(records, &out.join(format!("{stem}.json")), ReportFormat::Json)?;
    for r in records {
        println!("{:<28} {:.4}", r.label(), r.metric);
    }
    Ok(())
}

fn train(c: &Common, kind: ModelKind) -> Result<()> {
    let (p, out) = prepare_in(c)?;
    let (probe, probe_acc) = fit_probe(&p)?;
    eprintln!("probe accuracy {probe_acc:.4}");
    let sel = &p.cfg.theta2[0];
    let gdef = p.def.with_theta2(sel)?;
    let cell = if p.cfg.grid.len() == 1 { p.cfg.grid[0] } else { Cell::PRETRAINED };
    let random = build_network(&p.def, rng::derive_seed(p.cfg.seed, "random_backbone"))?;
    let act = Arc::new(Backbone::new(gdef.clone(), p.backbone.clone())?);
    let grad_params = cell_params(&gdef, &p.backbone, &random, cell)?;
    let grad = Arc::new(Backbone::new(gdef.clone(), grad_params.clone())?);
    let omega_seed = rng::derive_seed(p.cfg.seed, "random_omega");
    let (d, k) = probe.w1.dims();
    let omega = match cell.omega {
        gradfeat::netdef::Provenance::Pretrained => probe.w1.clone(),
        gradfeat::netdef::Provenance::Random => LinearHead::random(d, k, omega_seed),
    };
    let cfg = if kind == ModelKind::Activation { &p.cfg.probe } else { &p.cfg.linear };
    let t = std::time::Instant::now();
    let (model, report) = fit(kind, act, grad, Some(&omega), &p.data.train, cfg)?;
    let train_s = t.elapsed().as_secs_f64();
    let t = std::time::Instant::now();
    let metric = evaluate(&model, &p.data.test)?;
    let train_metric = evaluate(&model, &p.data.train)?;
    let rec = ResultRecord {
        variant: kind.into(),
        theta2: if kind.uses_gradients() { sel.clone() } else { Vec::new() },
        provenance: cell,
        optimizer: cfg.optimizer,
        metric,
        train_metric,
        curve: CurveSummary::of(&report),
        seconds: PhaseTimes {
            train: train_s,
            eval: t.elapsed().as_secs_f64(),
            ..Default::default()
        },
        seed: p.cfg.seed,
        omega_seed: (cell.omega == gradfeat::netdef::Provenance::Random).then_some(omega_seed),
    };
    write_records(&out, &format!("train-{}", kind.name()), &[rec])?;

    let mut tensors = vec![
        ("w1.weight".to_string(), model.w1.weight.clone()),
        ("w1.bias".to_string(), model.w1.bias.clone()),
        ("omega".to_string(), model.omega.clone()),
    ];
    for (name, b) in model.w2.iter() {
        tensors.push((format!("w2.{name}.weight"), b.weight.clone()));
        if let Some(bias) = &b.bias {
            tensors.push((format!("w2.{name}.bias"), bias.clone()));
        }
    }
    let extra = json!({ "kind": kind.name(), "cell": cell.code(), "theta2": sel });
    head_checkpoint(&gdef, extra, tensors).write(&out.join(format!("model-{}.gfck", kind.name())))?;
    save_checkpoint(&out.join("gradient-backbone.gfck"), &gdef, &grad_params)?;
    Ok(())
}

fn eval(c: &Common, model_path: &Path) -> Result<()> {
    let (p, _) = prepare_in(c)?;
    let ck = Checkpoint::read(model_path)?;
    if ck.meta.section != Section::Head {
        return Err(Error::Config(format!("{} is not a model checkpoint", model_path.display())));
    }
    let kind: ModelKind = ck.meta.extra["kind"]
        .as_str()
        .ok_or_else(|| Error::Config("model checkpoint lacks its kind".into()))?
        .parse()?;
    let gdef = ck.meta.network.clone();
    let grad_path = model_path.with_file_name("gradient-backbone.gfck");
    let grad_params = if kind.uses_gradients() {
        gradfeat::netdef::load_checkpoint(&grad_path)?.1
    } else {
        p.backbone.clone()
    };
    let act = Arc::new(Backbone::new(gdef.clone(), p.backbone.clone())?);
    let grad = Arc::new(Backbone::new(gdef.clone(), grad_params)?);
    let head = LinearHead {
        weight: ck.tensor("omega")?.clone(),
        bias: ck.tensor("w1.bias")?.clone(),
    };
    let mut model = FullModel::init(kind, act, grad, &head)?;
    model.w1 = LinearHead {
        weight: ck.tensor("w1.weight")?.clone(),
        bias: ck.tensor("w1.bias")?.clone(),
    };
    let blocks = model
        .w2
        .names()
        .iter()
        .map(|n| {
            let bias = format!("w2.{n}.bias");
            Ok((
                n.to_string(),
                gradfeat::tangent::TangentBlock {
                    weight: ck.tensor(&format!("w2.{n}.weight"))?.clone(),
                    bias: if ck.has(&bias) { Some(ck.tensor(&bias)?.clone()) } else { None },
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    model.w2 = TangentParams::from_blocks(blocks);
    model.w2.check(&model.gradient.def, &model.gradient.params)?;
    let acc = evaluate(&model, &p.data.test)?;
    println!("{}", json!({ "kind": kind.name(), "test_accuracy": (acc * 1e4).round() / 1e4 }));
    Ok(())
}

fn verify(c: &Common, trials: usize) -> Result<bool> {
    let (cfg, out) = load_config(c)?;
    let seed = cfg.seed;
    let (def, params) = match &cfg.pretrain.checkpoint {
        Some(ck) => gradfeat::netdef::load_checkpoint(ck)?,
        None => {
            let def = match (&cfg.network, &cfg.data) {
                (Some(n), _) => n.clone(),
                (None, gradfeat::harness::DataConfig::Synthetic { spec, .. }) => NetworkDef::desk_default(1, spec.size),
                (None, _) => {
                    return Err(Error::Config("verify needs a network or a checkpoint for file datasets".into()))
                }
            };
            let p = build_network(&def, rng::derive_seed(seed, "verify_init"))?;
            (def, p)
        }
    };
    let def = match cfg.theta2.first() {
        Some(sel) => def.with_theta2(sel)?,
        None => def,
    };
    let mut r = rng::stream(seed, "verify_inputs");
    let mut shape = vec![8];
    shape.extend_from_slice(&def.input_shape);
    let inputs = Tensor::randn(&shape, &mut r);
    let mut reports: Vec<OracleReport> = vec![
        jvp_check(&def, &params, &inputs, trials, DEFAULT_EPS, seed)?,
        adjoint_check(&def, &params, &inputs, trials, seed)?,
    ];

    let tiny = NetworkDef::tiny();
    let tp: ParamSet = build_network(&tiny, rng::derive_seed(seed, "verify_tiny"))?;
    let omega = Tensor::randn(&[tiny.feature_dim()?, 3], &mut r).scale(0.4);
    let xs = Tensor::randn(&[64, 1, 6, 6], &mut r);
    reports.extend(explicit_check(&tiny, &tp, &omega, &xs.slice_rows(0, 2)?, seed)?);
    let taylor = taylor_check(&tiny, &tp, &omega, &xs, &[0.1, 0.05, 0.025], 10, seed)?;
    reports.push(taylor.report.clone());

    let pass = reports.iter().all(|r| r.pass);
    let doc = json!({
        "schema": "gradfeat-verify",
        "version": 1,
        "network": def,
        "pass": pass,
        "reports": reports,
        "taylor_ratios": taylor.ratios,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(out.join("verify.json"), &text)?;
    println!("{text}");
    Ok(pass)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Pretrain(c) => {
            let (p, out) = prepare_in(&c)?;
            let path = out.join("backbone.gfck");
            save_checkpoint(&path, &p.def, &p.backbone)?;
            println!("{}", path.display());
        }
        Cmd::FitProbe(c) => {
            let (p, out) = prepare_in(&c)?;
            let (probe, acc) = fit_probe(&p)?;
            let tensors = vec![
                ("w1.weight".to_string(), probe.w1.weight.clone()),
                ("w1.bias".to_string(), probe.w1.bias.clone()),
            ];
            head_checkpoint(&p.def, json!({ "kind": "activation" }), tensors).write(&out.join("probe.gfck"))?;
            println!("{}", json!({ "test_accuracy": (acc * 1e4).round() / 1e4 }));
        }
        Cmd::Train { common, kind } => train(&common, kind)?,
        Cmd::Finetune(c) => {
            let (p, out) = prepare_in(&c)?;
            let (probe, _) = fit_probe(&p)?;
            write_records(&out, "finetune", &finetune_rows(&p, &probe.w1)?)?;
        }
        Cmd::Ablate(c) => {
            let (p, out) = prepare_in(&c)?;
            let recs = run_grid(&p)?;
            write_records(&out, "results", &recs)?;
        }
        Cmd::Verify { common, trials } => return verify(&common, trials),
        Cmd::Eval { common, model } => eval(&common, &model)?,
        Cmd::Report { input, output, format } => emit_report(&read_report(&input)?, &output, format)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
