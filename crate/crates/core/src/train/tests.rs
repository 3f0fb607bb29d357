use super::*;
use crate::attention::Variant;
use crate::vit::reverse_frames;

fn long_schedule() -> TrainConfig {
    TrainConfig {
        base_lr: 0.1,
        decay_epoch: 10,
        decay_factor: 10.0,
        ..TrainConfig::toy()
    }
}

#[test]
fn step_decay_schedule() {
    let cfg = long_schedule();
    assert_eq!(lr_at(1, &cfg), 0.1);
    assert_eq!(lr_at(9, &cfg), 0.1);
    assert_eq!(lr_at(10, &cfg), 0.1 / 10.0);
    assert_eq!(lr_at(30, &cfg), 0.01);
    let flat = TrainConfig {
        decay_factor: 1.0,
        ..cfg
    };
    assert!((1..40).all(|e| lr_at(e, &flat) == 0.1));
}

fn scalar_params(v: f64) -> ModelParams<Tensor> {
    let cfg = ModelConfig::tiny(Variant::Msa).with_kinds(vec![Variant::Msa]);
    crate::vit::init_params(&cfg, 0)
        .unwrap()
        .map(|t| Tensor::full(t.shape(), v))
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let mut p = scalar_params(1.0);
    let g = scalar_params(0.5);
    let mut s = SgdState::new(&p);
    sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
    assert!(p
        .tensors()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 1.0 - 0.1 * 0.5)));
}

#[test]
fn sgd_two_steps_match_hand_calculation() {
    // v1 = 2, θ1 = 1 − 0.1·2 = 0.8; v2 = 0.9·2 + 2 = 3.8, θ2 = 0.8 − 0.38 = 0.42
    let mut p = scalar_params(1.0);
    let g = scalar_params(2.0);
    let mut s = SgdState::new(&p);
    sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap();
    sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap();
    let v = p.head_b.data()[0];
    assert!((v - 0.42).abs() < 1e-15, "{v}");
    assert!((s.velocity.head_b.data()[0] - 3.8).abs() < 1e-15);
}

#[test]
fn zero_gradient_velocity_decays_geometrically() {
    let mut p = scalar_params(0.0);
    let mut s = SgdState::new(&p);
    sgd_momentum_step(&mut p, &scalar_params(1.0), &mut s, 1.0, 0.5).unwrap();
    let zero = scalar_params(0.0);
    let mut prev = s.velocity.head_b.data()[0];
    for _ in 0..5 {
        sgd_momentum_step(&mut p, &zero, &mut s, 1.0, 0.5).unwrap();
        let v = s.velocity.head_b.data()[0];
        assert_eq!(v, prev * 0.5);
        prev = v;
    }
    // θ → −(1 + 0.5 + 0.25 + …) = −2
    assert!((p.head_b.data()[0] + 2.0).abs() < 0.05);
}

#[test]
fn sgd_shape_mismatch_is_contract_error() {
    let mut p = scalar_params(1.0);
    let mut g = scalar_params(1.0);
    g.head_b = Tensor::zeros(&[7]);
    let mut s = SgdState::new(&p);
    assert!(matches!(
        sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.9),
        Err(Error::Contract(_))
    ));
}

fn task(kind: TaskKind) -> SyntheticTask {
    SyntheticTask::new(kind, 8, 32, 32)
}

#[test]
fn reversed_class_is_exact_reversal() {
    let b = generate_batch(&task(TaskKind::ForwardVsReversed), 6, 3).unwrap();
    assert_eq!(b.labels, [0, 1, 0, 1, 0, 1]);
    for i in (0..6).step_by(2) {
        assert_eq!(b.clips[i + 1], reverse_frames(&b.clips[i]));
        assert_ne!(b.clips[i + 1], b.clips[i]);
    }
}

fn frame_multiset(clip: &Tensor) -> Vec<Vec<u64>> {
    let mut frames: Vec<Vec<u64>> = (0..clip.shape()[0])
        .map(|t| {
            clip.index_leading(t)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        })
        .collect();
    frames.sort();
    frames
}

#[test]
fn bar_directions_share_frames() {
    let b = generate_batch(&task(TaskKind::MovingBarDirection), 4, 5).unwrap();
    for i in (0..4).step_by(2) {
        assert_eq!(frame_multiset(&b.clips[i]), frame_multiset(&b.clips[i + 1]));
    }
    // the bar of class 0 moves right: its mass centre increases over time
    let clip = &b.clips[0];
    let centre = |t: usize| {
        let f = clip.index_leading(t).index_leading(0);
        let (mut m, mut s) = (0.0, 0.0);
        for (i, &v) in f.data().iter().enumerate() {
            let v = v.max(0.0);
            m += v * (i % 32) as f64;
            s += v;
        }
        m / s
    };
    assert!(centre(7) > centre(0) + 8.0);
}

#[test]
fn texture_classes_differ_within_each_frame() {
    let mut t = task(TaskKind::FramewiseTexture);
    t.noise = 0.0;
    let b = generate_batch(&t, 4, 7).unwrap();
    let energy = |clip: &Tensor, frame: usize| {
        let f = clip.index_leading(frame).index_leading(0);
        let (mut dx, mut dy) = (0.0, 0.0);
        for y in 0..31 {
            for x in 0..31 {
                dx += (f.at(&[y, x + 1]) - f.at(&[y, x])).powi(2);
                dy += (f.at(&[y + 1, x]) - f.at(&[y, x])).powi(2);
            }
        }
        (dx, dy)
    };
    for (clip, &label) in b.clips.iter().zip(&b.labels) {
        for frame in 0..8 {
            let (dx, dy) = energy(clip, frame);
            assert_eq!(label == 0, dx > dy, "label {label}: {dx} {dy}");
        }
    }
}

#[test]
fn batches_are_deterministic() {
    for kind in [
        TaskKind::MovingBarDirection,
        TaskKind::ForwardVsReversed,
        TaskKind::FramewiseTexture,
    ] {
        let a = generate_batch(&task(kind), 5, 11).unwrap();
        assert_eq!(a, generate_batch(&task(kind), 5, 11).unwrap());
        assert_ne!(a, generate_batch(&task(kind), 5, 12).unwrap());
        assert_eq!(a.len(), 5);
    }
    assert!(generate_batch(&task(TaskKind::FramewiseTexture), 0, 1).is_err());
}

fn tiny_task(kind: TaskKind) -> SyntheticTask {
    SyntheticTask::new(kind, 2, 8, 8)
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        train_samples: 8,
        val_samples: 4,
        ..TrainConfig::toy()
    }
}

#[test]
fn single_sample_overfits() {
    let kv: Variant = "msca-kv".parse().unwrap();
    for kind in [Variant::Msa, Variant::TokenShift, kv] {
        let cfg = ModelConfig::tiny(kind).with_shift(1, 1);
        let mut model = Model::new(cfg).unwrap();
        let data = generate_batch(&tiny_task(TaskKind::FramewiseTexture), 1, 1).unwrap();
        let mut state = SgdState::new(&model.params);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let s = model
                .loss_and_grads(&data.clips[0], data.labels[0])
                .unwrap();
            loss = s.loss;
            if loss < 0.01 {
                break;
            }
            sgd_momentum_step(&mut model.params, &s.grads, &mut state, 0.1, 0.9).unwrap();
        }
        assert!(loss < 0.01, "{kind}: {loss}");
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::tiny("msca-kv".parse().unwrap()).with_shift(1, 1);
    let t = tiny_task(TaskKind::ForwardVsReversed);
    let a = train(&cfg, &tiny_train(), &t).unwrap();
    let b = train(&cfg, &tiny_train(), &t).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.records.len(), 2);
    assert_eq!(a.log.last().unwrap().step, 8);
}

#[test]
fn accumulation_matches_large_batch() {
    let cfg = ModelConfig::tiny("msca-kv".parse().unwrap()).with_shift(1, 1);
    let t = tiny_task(TaskKind::ForwardVsReversed);
    let big = TrainConfig {
        epochs: 1,
        batch_size: 4,
        grad_accum_steps: 1,
        ..tiny_train()
    };
    let acc = TrainConfig {
        batch_size: 2,
        grad_accum_steps: 2,
        ..big.clone()
    };
    let a = train(&cfg, &big, &t).unwrap();
    let b = train(&cfg, &acc, &t).unwrap();
    assert_eq!(a.log.last().unwrap().step, b.log.last().unwrap().step);
    for (x, y) in a
        .model
        .params
        .tensors()
        .iter()
        .zip(b.model.params.tensors())
    {
        assert!(x.max_abs_diff(y) <= 1e-9);
    }
    assert!((a.log.records[0].loss - b.log.records[0].loss).abs() <= 1e-12);
}

#[test]
fn baseline_cannot_tell_reversed_pairs_apart() {
    let cfg = ModelConfig::tiny(Variant::Msa);
    let t = tiny_task(TaskKind::ForwardVsReversed);
    let out = train(&cfg, &tiny_train(), &t).unwrap();
    let (train_set, _) = datasets(&t, &tiny_train()).unwrap();
    for i in (0..train_set.len()).step_by(2) {
        let a = out.model.logits(&train_set.clips[i]).unwrap();
        let b = out.model.logits(&train_set.clips[i + 1]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }
    assert!(out.log.records.iter().all(|r| r.train_acc == 0.5));
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let cfg = ModelConfig::tiny(Variant::Msa);
    let tc = TrainConfig {
        base_lr: 1e250,
        epochs: 3,
        ..tiny_train()
    };
    match train(&cfg, &tc, &tiny_task(TaskKind::FramewiseTexture)) {
        Err(Error::NonFiniteLoss { epoch, batch, loss }) => {
            assert!(epoch >= 1 && batch >= 1 && !loss.is_finite());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_task_is_config_error() {
    let cfg = ModelConfig::tiny(Variant::Msa);
    let t = SyntheticTask::new(TaskKind::FramewiseTexture, 3, 8, 8);
    assert!(matches!(
        train(&cfg, &tiny_train(), &t),
        Err(Error::Config(_))
    ));
}

#[test]
fn log_round_trips_through_csv() {
    let log = TrainingLog {
        records: vec![EpochRecord {
            epoch: 1,
            step: 4,
            lr: 0.05,
            loss: std::f64::consts::LN_2,
            train_acc: 0.5,
            val_acc: 0.25,
        }],
    };
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("epoch,step,lr,loss,train_acc,val_acc\n"));
    assert_eq!(TrainingLog::read_csv(&buf[..]).unwrap(), log);
}
