use std::sync::Arc;

use gradfeat::gradfeat::{
    accuracy, evaluate, finetune, fit, train_linear, Backbone, FullModel, LinearHead, ModelKind,
    TrainConfig,
};
use gradfeat::harness::{
    gen_synthetic, pretrain_rotation, rotation_dataset, run_ablation, stratified_split, Cell,
    DataConfig, ExperimentConfig, SyntheticSpec, Variant,
};
use gradfeat::netdef::{build_network, LayerSpec, NetworkDef, ParamSet};
use gradfeat::oracle::{fd_loss_gradient, Array64};
use gradfeat::rng;
use gradfeat::tangent::{TangentBlock, TangentParams};
use gradfeat::Tensor;

fn backbone(def: &NetworkDef, seed: u64) -> Arc<Backbone> {
    Arc::new(Backbone::new(def.clone(), build_network(def, seed).unwrap()).unwrap())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

#[test]
fn finetune_step_matches_finite_difference_gradient() {
    let def = NetworkDef::tiny();
    let params = build_network(&def, 11).unwrap();
    let mut r = rng::seeded(5);
    let x = Tensor::randn(&[6, 1, 6, 6], &mut r);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let head = LinearHead::random(def.feature_dim().unwrap(), 3, 9);
    let data = gradfeat::harness::Dataset::new(x.clone(), labels.clone(), 3, gradfeat::harness::Split::Train).unwrap();

    let lr = 1.0f32;
    let cfg = TrainConfig {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: 64,
        ..TrainConfig::sgd().with_iterations(1)
    };
    let bb = Backbone::new(def.clone(), params.clone()).unwrap();
    let tuned = finetune(&bb, &head, &data, &cfg).unwrap();

    let mut blocks = Vec::new();
    for name in def.theta2_names() {
        let (old, new) = (params.get(name).unwrap(), tuned.backbone.params.get(name).unwrap());
        let step = |a: &Tensor, b: &Tensor| a.sub(b).unwrap().scale(1.0 / lr);
        blocks.push((
            name.to_string(),
            TangentBlock {
                weight: step(&old.weight, &new.weight),
                bias: old.bias.as_ref().map(|b| step(b, new.bias.as_ref().unwrap())),
            },
        ));
    }
    let g_theta: Vec<f64> = TangentParams::from_blocks(blocks).to_vec().iter().map(|&v| v as f64).collect();
    let g_w: Vec<f64> = head.weight.sub(&tuned.head.weight).unwrap().data().iter().map(|&v| v as f64).collect();
    let g_b: Vec<f64> = head.bias.sub(&tuned.head.bias).unwrap().data().iter().map(|&v| v as f64).collect();

    let hw = Array64::from_tensor(&head.weight);
    let hb: Vec<f64> = head.bias.data().iter().map(|&v| v as f64).collect();
    let (fd_theta, fd_w, fd_b) = fd_loss_gradient(&def, &params, &hw, &hb, &x, &labels, 1e-5).unwrap();
    assert!(rel_err(&g_theta, &fd_theta) < 1e-3, "theta2 gradient error {}", rel_err(&g_theta, &fd_theta));
    assert!(rel_err(&g_w, &fd_w) < 1e-3, "head weight gradient error {}", rel_err(&g_w, &fd_w));
    assert!(rel_err(&g_b, &fd_b) < 1e-3, "head bias gradient error {}", rel_err(&g_b, &fd_b));
    // theta1 is frozen.
    for name in def.theta1_names() {
        assert!(params.get(name).unwrap().weight.bit_eq(&tuned.backbone.params.get(name).unwrap().weight));
    }
}

#[test]
fn training_leaves_backbone_and_omega_untouched() {
    let def = NetworkDef::desk_default(1, 8);
    let data = gen_synthetic(&SyntheticSpec::new(3, 10, 8), 4).unwrap();
    let act = backbone(&def, 1);
    let grad = backbone(&def, 2);
    let before = (act.checksum(), grad.checksum());
    let omega = LinearHead::random(def.feature_dim().unwrap(), 3, 3);
    let mut model = FullModel::init(ModelKind::Full, act.clone(), grad.clone(), &omega).unwrap();
    let frozen = model.frozen_checksum();
    let cache = model.features(&data.images).unwrap();
    let cfg = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(20) };
    train_linear(&mut model, &cache, &data.labels, &cfg).unwrap();
    assert_eq!(model.frozen_checksum(), frozen);
    assert_eq!((act.checksum(), grad.checksum()), before);
    assert!(model.omega.bit_eq(&omega.weight));
    assert!(model.w2.norm() > 0.0, "w2 should have moved");
}

#[test]
fn zero_initialized_full_model_is_the_activation_model() {
    let def = NetworkDef::desk_default(1, 8);
    let bb = backbone(&def, 7);
    let mut r = rng::seeded(1);
    let x = Tensor::randn(&[5, 1, 8, 8], &mut r);
    let omega = LinearHead {
        weight: Tensor::randn(&[def.feature_dim().unwrap(), 4], &mut r),
        bias: Tensor::randn(&[4], &mut r),
    };
    let full = FullModel::init(ModelKind::Full, bb.clone(), bb.clone(), &omega).unwrap();
    let act = FullModel::init(ModelKind::Activation, bb.clone(), bb.clone(), &omega).unwrap();
    assert!(full.full_logits(&x).unwrap().bit_eq(&act.full_logits(&x).unwrap()));

    let zero = FullModel::init(ModelKind::Full, bb.clone(), bb, &LinearHead::zeros(def.feature_dim().unwrap(), 4)).unwrap();
    assert!(zero.full_logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_random_logits_score_chance() {
    let (n, c) = (20_000, 5);
    let mut r = rng::seeded(3);
    let logits = Tensor::randn(&[n, c], &mut r);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % c).collect();
    let acc = accuracy(&logits, &labels).unwrap();
    let p = 1.0 / c as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 4.0 * sd, "accuracy {acc}");
    assert_eq!(accuracy(&Tensor::zeros(&[3, 2]), &[0, 0, 1]).unwrap(), 2.0 / 3.0);
}

/// Fisher separation of every class pair along the line joining the means.
#[test]
fn synthetic_classes_are_separated() {
    let spec = SyntheticSpec::new(10, 60, 16);
    let data = gen_synthetic(&spec, 2).unwrap();
    let d = 256;
    let rows: Vec<&[f32]> = data.images.data().chunks(d).collect();
    let mean = |k: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        let members: Vec<&&[f32]> = rows.iter().zip(&data.labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
        for r in &members {
            for (a, &b) in m.iter_mut().zip(r.iter()) {
                *a += b as f64 / members.len() as f64;
            }
        }
        m
    };
    let means: Vec<Vec<f64>> = (0..10).map(mean).collect();
    let mut ratios = Vec::new();
    for a in 0..10 {
        for b in a + 1..10 {
            let dir: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let proj = |r: &[f32]| r.iter().zip(&dir).map(|(&x, v)| x as f64 * v / norm).sum::<f64>();
            let mut within = 0.0;
            let mut count = 0.0;
            for (r, &l) in rows.iter().zip(&data.labels) {
                if l == a || l == b {
                    let m = if l == a { &means[a] } else { &means[b] };
                    let mu = m.iter().zip(&dir).map(|(x, v)| x * v / norm).sum::<f64>();
                    within += (proj(r) - mu).powi(2);
                    count += 1.0;
                }
            }
            ratios.push(norm / (within / count).sqrt());
        }
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean_ratio > 3.0, "mean gap / within-class std = {mean_ratio}");
}

#[test]
fn raw_pixel_probe_beats_chance() {
    let spec = SyntheticSpec::new(6, 60, 12);
    let (train, test) = stratified_split(&gen_synthetic(&spec, 8).unwrap(), 20, 1).unwrap();
    let def = NetworkDef {
        input_shape: vec![1, 12, 12],
        layers: vec![LayerSpec::Flatten],
        split_index: 0,
    };
    let bb = Arc::new(Backbone::new(def, ParamSet::new()).unwrap());
    let cfg = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(800) };
    let (probe, _) = fit(ModelKind::Activation, bb.clone(), bb, None, &train, &cfg).unwrap();
    let acc = evaluate(&probe, &test).unwrap();
    assert!(acc > 1.0 / 6.0 + 0.15, "raw pixel probe accuracy {acc}");
}

#[test]
fn untrained_network_is_at_chance_on_rotations() {
    let def = NetworkDef::desk_default(1, 12);
    let data = rotation_dataset(&gen_synthetic(&SyntheticSpec::new(4, 40, 12), 3).unwrap()).unwrap();
    let mut all = def.clone();
    all.split_index = 0;
    let bb = backbone(&all, 4);
    let head = LinearHead::random(def.feature_dim().unwrap(), 4, 5);
    let model = FullModel::init(ModelKind::Activation, bb.clone(), bb, &head).unwrap();
    let acc = evaluate(&model, &data).unwrap();
    assert!((acc - 0.25).abs() < 0.1, "untrained rotation accuracy {acc}");
}

#[test]
fn pretrained_features_beat_random_features() {
    let def = NetworkDef::desk_default(1, 12);
    let spec = SyntheticSpec::new(6, 60, 12);
    let pool = gen_synthetic(&spec, 100).unwrap();
    let pcfg = TrainConfig { lr: 3e-3, ..TrainConfig::adam().with_iterations(400) };
    let pre = pretrain_rotation(&def, &pool, &pcfg, 1).unwrap();
    let (train, test) = stratified_split(&gen_synthetic(&spec, 200).unwrap(), 20, 2).unwrap();
    let cfg = TrainConfig { lr: 3e-2, ..TrainConfig::adam().with_iterations(3000) };
    let probe = |params: ParamSet| {
        let bb = Arc::new(Backbone::new(def.clone(), params).unwrap());
        let (m, _) = fit(ModelKind::Activation, bb.clone(), bb, None, &train, &cfg).unwrap();
        evaluate(&m, &test).unwrap()
    };
    let pretrained = probe(pre.params);
    let random = probe(build_network(&def, 1).unwrap());
    assert!(pretrained > random, "pretrained {pretrained} vs random {random}");
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DataConfig::Synthetic {
        spec: SyntheticSpec::new(3, 12, 8),
        test_per_class: 4,
        pretext_per_class: Some(8),
    });
    cfg.pretrain.train = TrainConfig { lr: 3e-3, ..TrainConfig::adam().with_iterations(20) };
    cfg.probe = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(30) };
    cfg.linear = TrainConfig { lr: 1e-2, ..TrainConfig::adam().with_iterations(6) };
    cfg.finetune = vec![TrainConfig::adam().with_iterations(4), TrainConfig::sgd().with_iterations(4)];
    cfg
}

#[test]
fn full_grid_has_table_layout_and_is_deterministic() {
    let mut cfg = tiny_experiment();
    cfg.theta2 = vec![vec!["conv3".into()], vec!["conv2".into(), "conv3".into()]];
    let recs = run_ablation(&cfg).unwrap();
    let count = |v: Variant| recs.iter().filter(|r| r.variant == v).count();
    assert_eq!(count(Variant::Gradient), 16);
    assert_eq!(count(Variant::Full), 16);
    assert_eq!(count(Variant::Activation), 2);
    assert_eq!(count(Variant::Finetune), 4);
    for sel in [vec!["conv3".to_string()], vec!["conv2".into(), "conv3".into()]] {
        let cells: Vec<Cell> = recs
            .iter()
            .filter(|r| r.variant == Variant::Full && r.theta2 == sel)
            .map(|r| r.provenance)
            .collect();
        assert_eq!(cells, Cell::all());
    }
    // Activation rows never depend on the gradient backbone.
    assert!(recs.iter().filter(|r| r.variant == Variant::Activation).all(|r| r.theta2.is_empty()));

    let again = run_ablation(&cfg).unwrap();
    assert_eq!(recs.len(), again.len());
    for (a, b) in recs.iter().zip(&again) {
        assert_eq!((a.label(), a.metric, a.train_metric), (b.label(), b.metric, b.train_metric));
        assert_eq!(a.curve, b.curve);
    }
}
