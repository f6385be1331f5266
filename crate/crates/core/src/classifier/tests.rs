use approx::assert_abs_diff_eq;
use rand::Rng;

use super::*;
use crate::graph::build_radius_graph;
use crate::rng::rng_for;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        num_kernels: 2,
        blocks: 2,
        head_hidden: 8,
        readout: Readout::Absorbing,
    }
}

fn random_input(rng: &mut impl Rng, in_dim: usize, shift: f64, readout: Readout) -> BranchInput {
    let m = rng.gen_range(4..20);
    let coords: Vec<[f64; 3]> = (0..m)
        .map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)])
        .collect();
    let features = Matrix::from_shape_simple_fn((m, in_dim), || rng.gen_range(-0.5..0.5) + shift);
    BranchInput::new(build_radius_graph(&coords, &features, 1.5).unwrap(), readout)
}

/// Samples whose features are shifted by their label.
fn dataset(n: usize, classes: usize, seed: u64, mode: BranchMode, readout: Readout) -> Vec<PreparedSample> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|id| {
            let label = id % classes;
            let shift = label as f64 - classes as f64 / 2.0;
            PreparedSample {
                id,
                label,
                point: mode.uses_points().then(|| random_input(&mut rng, 4, shift, readout)),
                voxel: mode.uses_voxels().then(|| random_input(&mut rng, 5, -shift, readout)),
            }
        })
        .collect()
}

fn model(mode: BranchMode, classes: usize, seed: u64) -> ModelParams {
    init_model(&tiny_config(), mode, 4, 5, classes, 0.2, seed).unwrap()
}

fn quick_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        lr_decay_epochs: vec![],
        batch_size: 4,
        dropout: 0.2,
        ..TrainConfig::default()
    }
}

#[test]
fn nll_examples() {
    assert_eq!(nll_loss(&[0.0, f64::NEG_INFINITY], 0).unwrap(), 0.0);
    let uniform = [(0.25f64).ln(); 4];
    assert_abs_diff_eq!(nll_loss(&uniform, 2).unwrap(), 1.386294, epsilon = 1e-6);
    assert!(matches!(nll_loss(&uniform, 4), Err(Error::InvalidArgument(_))));
}

#[test]
fn batch_loss_is_mean_of_sample_losses() {
    let m = model(BranchMode::Dual, 3, 1);
    let data = dataset(5, 3, 2, BranchMode::Dual, Readout::Absorbing);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let out = m.run_batch(&refs, HeadMode::Eval, false, false).unwrap();
    let mean: f64 = data
        .iter()
        .map(|s| nll_loss(&m.predict(s).unwrap(), s.label).unwrap())
        .sum::<f64>()
        / 5.0;
    assert_abs_diff_eq!(out.loss, mean, epsilon = 1e-12);
}

#[test]
fn log_probs_normalize_and_eval_is_deterministic() {
    for mode in [BranchMode::Dual, BranchMode::PointOnly, BranchMode::VoxelOnly] {
        let m = model(mode, 4, 3);
        for s in dataset(4, 4, 4, mode, Readout::Absorbing) {
            let a = m.predict(&s).unwrap();
            let b = m.predict(&s).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 4);
            assert_abs_diff_eq!(a.iter().map(|l| l.exp()).sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn head_width_follows_branch_mode() {
    assert_eq!(model(BranchMode::Dual, 3, 0).head.input_dim(), 12);
    assert_eq!(model(BranchMode::PointOnly, 3, 0).head.input_dim(), 6);
    let v = model(BranchMode::VoxelOnly, 3, 0);
    assert_eq!(v.head.input_dim(), 6);
    assert!(v.point.is_none());
}

#[test]
fn eval_outputs_do_not_depend_on_batch_composition() {
    let mut m = model(BranchMode::Dual, 3, 5);
    m.head.running_mean.fill(0.3);
    m.head.running_var.fill(1.7);
    let data = dataset(6, 3, 6, BranchMode::Dual, Readout::Absorbing);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let batch = m.run_batch(&refs, HeadMode::Eval, false, false).unwrap();
    for (i, s) in data.iter().enumerate() {
        let single = m.predict(s).unwrap();
        for (a, b) in single.iter().zip(batch.log_probs.row(i)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}

#[test]
fn feature_width_mismatch_is_an_error() {
    let m = model(BranchMode::PointOnly, 2, 0);
    let mut rng = rng_for(0, &[]);
    let s = PreparedSample {
        id: 0,
        label: 0,
        point: Some(random_input(&mut rng, 7, 0.0, Readout::Absorbing)),
        voxel: None,
    };
    assert!(matches!(m.predict(&s), Err(Error::Shape(_))));
    let missing = PreparedSample { point: None, ..s };
    assert!(matches!(m.predict(&missing), Err(Error::Shape(_))));
}

#[test]
fn maxpool_readout_is_channel_maximum() {
    let mut m = model(BranchMode::PointOnly, 2, 8);
    m.readout = Readout::MaxPool;
    let data = dataset(1, 2, 9, BranchMode::PointOnly, Readout::MaxPool);
    let s = &data[0];
    let emb = m.embed(s).unwrap();
    let p = s.point.as_ref().unwrap();
    let out = crate::agcn::forward(&p.plan, &p.states, m.point.as_ref().unwrap()).unwrap();
    let m_nodes = p.graph.num_event_nodes();
    for (d, e) in emb.iter().enumerate() {
        let max = (0..m_nodes).map(|i| out.output()[[i, d]]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(*e, max);
    }
}

#[test]
fn battery_passes_at_default_tolerance() {
    for inst in gradcheck_battery(11, 12, 1e-5, 1e-4, false).unwrap() {
        assert!(inst.report.passed(), "{}\n{}", inst.name, inst.report);
        assert!(inst.num_params <= 1000 && inst.max_nodes <= 30);
        assert!(inst.report.checked() > inst.num_params / 2, "{}", inst.name);
    }
}

#[test]
fn battery_fails_at_rounding_tolerance_and_under_corruption() {
    let strict = gradcheck_battery(12, 3, 1e-5, 1e-12, false).unwrap();
    assert!(strict.iter().any(|i| !i.report.passed()));
    let corrupt = gradcheck_battery(12, 3, 1e-5, 1e-4, true).unwrap();
    assert!(corrupt.iter().all(|i| !i.report.passed()));
}

#[test]
fn lr_schedule_steps_at_decay_epochs() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(&cfg, 0), 1e-3);
    assert_eq!(lr_at(&cfg, 59), 1e-3);
    assert_abs_diff_eq!(lr_at(&cfg, 60), 1e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(&cfg, 149), 1e-5, epsilon = 1e-18);
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            lr: -1.0,
            ..Default::default()
        },
        TrainConfig {
            lr_decay_epochs: vec![60, 60],
            ..Default::default()
        },
        TrainConfig {
            lr_decay_epochs: vec![150],
            ..Default::default()
        },
        TrainConfig {
            dropout: 1.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut adam = Adam::new(3);
    let mut p = vec![1.0, 1.0, 1.0];
    adam.update(&mut p, &[2.0, -0.5, 0.0], 0.1);
    assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-7);
    assert_abs_diff_eq!(p[1], 1.1, epsilon = 1e-7);
    assert_eq!(p[2], 1.0);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let m = model(BranchMode::Dual, 3, 1);
    let data = dataset(9, 3, 1, BranchMode::Dual, Readout::Absorbing);
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick_train_config(2)
    };
    let out = train(TrainState::new(m.clone(), 0), &data, &[], &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.state.model.flatten(), m.flatten());
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics[0].test_top1.is_nan());
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = dataset(24, 3, 3, BranchMode::Dual, Readout::Absorbing);
    let cfg = quick_train_config(8);
    let run = || {
        train(TrainState::new(model(BranchMode::Dual, 3, 2), 0), &data[..18], &data[18..], &cfg, &mut |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    let rows = |o: &TrainOutcome| o.metrics.iter().map(EpochMetrics::csv_row).collect::<Vec<_>>();
    assert_eq!(rows(&a), rows(&b));
    assert!(a.metrics.last().unwrap().train_loss < a.metrics[0].train_loss);
    assert_eq!(a.state.adam.step, 8 * 5);
}

#[test]
fn training_resumes_where_it_stopped() {
    let data = dataset(12, 3, 3, BranchMode::PointOnly, Readout::Absorbing);
    let m = model(BranchMode::PointOnly, 3, 2);
    let full = train(TrainState::new(m.clone(), 0), &data, &[], &quick_train_config(4), &mut |_| {}).unwrap();
    let half = train(TrainState::new(m, 0), &data, &[], &quick_train_config(2), &mut |_| {}).unwrap();
    let rest = train(half.state, &data, &[], &quick_train_config(4), &mut |_| {}).unwrap();
    assert_eq!(rest.state.model, full.state.model);
    let rows = |m: &[EpochMetrics]| m.iter().map(EpochMetrics::csv_row).collect::<Vec<_>>();
    assert_eq!(rows(&rest.metrics), rows(&full.metrics[2..]));
}

#[test]
fn empty_train_split_and_non_finite_loss_are_errors() {
    let m = model(BranchMode::Dual, 3, 1);
    let cfg = quick_train_config(1);
    assert!(matches!(
        train(TrainState::new(m.clone(), 0), &[], &[], &cfg, &mut |_| {}),
        Err(Error::Validation(_))
    ));
    let mut broken = m;
    broken.head.w2[[0, 0]] = f64::NAN;
    let data = dataset(6, 3, 1, BranchMode::Dual, Readout::Absorbing);
    match train(TrainState::new(broken, 0), &data, &[], &cfg, &mut |_| {}) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("batch 0"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn evaluation_metrics_are_consistent() {
    let classes = 6;
    let m = model(BranchMode::Dual, classes, 4);
    let data = dataset(18, classes, 5, BranchMode::Dual, Readout::Absorbing);
    let metrics = evaluate(&m, &data).unwrap();
    let trace: u64 = (0..classes).map(|c| metrics.confusion[c][c]).sum();
    assert_abs_diff_eq!(trace as f64 / 18.0, metrics.top1, epsilon = 1e-15);
    assert!(metrics.top5.unwrap() >= metrics.top1);
    for (c, row) in metrics.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<u64>(), data.iter().filter(|s| s.label == c).count() as u64);
    }
    assert_eq!(evaluate(&m, &data).unwrap(), metrics);
    let few = evaluate(&model(BranchMode::Dual, 3, 4), &dataset(3, 3, 5, BranchMode::Dual, Readout::Absorbing)).unwrap();
    assert!(few.top5.is_none());
}

#[test]
fn embeddings_match_the_head_input() {
    let m = model(BranchMode::Dual, 3, 4);
    let data = dataset(5, 3, 5, BranchMode::Dual, Readout::Absorbing);
    let mut buf = Vec::new();
    write_embeddings(&m, &data, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, s) in lines[1..].iter().zip(&data) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), m.embedding_dim() + 2);
        let mut expected = s.point.as_ref().map_or(vec![], |p| {
            crate::agcn::forward(&p.plan, &p.states, m.point.as_ref().unwrap()).unwrap().absorbing_state()
        });
        expected.extend(s.voxel.as_ref().map_or(vec![], |p| {
            crate::agcn::forward(&p.plan, &p.states, m.voxel.as_ref().unwrap()).unwrap().absorbing_state()
        }));
        assert_eq!(&cells[2..], &expected[..]);
    }
}
