use super::*;
use crate::config::{Schedule, ScheduleUnit, SequenceMode};
use crate::data::{generate_dataset, Dataset, GeneratorSpec};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        img_h: 16,
        img_w: 16,
        conv_channels: vec![8, 16],
        embed_width: 16,
        context_width: 16,
        heads: 2,
        ff_width: 32,
        head_hidden: 32,
        unet_widths: vec![16, 16, 16, 16],
        batch_size: 2,
        seed,
        ..ModelConfig::for_mode(SequenceMode::Temporal)
    }
}

fn tiny_data(seed: u64) -> Dataset {
    let spec = GeneratorSpec {
        img_h: 16,
        img_w: 16,
        ..GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 1, seed)
    };
    generate_dataset(&spec).unwrap()
}

fn schedule(rate: f64, steps: usize) -> Schedule {
    Schedule {
        rate,
        decay: 1.0,
        decay_every: 1,
        unit: ScheduleUnit::Step,
        steps,
    }
}

fn snapshot(ps: &ParamSet<f32>, prefix: &str) -> Vec<(String, Vec<f32>)> {
    ps.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), t.data().to_vec()))
        .collect()
}

#[test]
fn fresh_model_validates() {
    let m = Model::<f32>::new(tiny(0)).unwrap();
    m.validate().unwrap();
    assert_eq!(m.stage(), 0);
    let ds = tiny_data(0);
    let full = m.forward_full(&ds.samples[0].frames).unwrap();
    assert_eq!(full.len(), 5);
    let preds = predict(&m, &ds, false).unwrap();
    assert_eq!(preds.joints2d.data()[..full.joints2d.numel()], *full.joints2d.data());
}

#[test]
fn sequence_encoder_is_permutation_equivariant_without_positions() {
    let mut cfg = tiny(3);
    cfg.use_positions = false;
    let m = Model::<f64>::new(cfg).unwrap();
    let mut rng = rng_for(9, 9);
    let x = nn::normal::<f64>(&[5, 16], 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(&x.data()[p * 16..(p + 1) * 16]);
    }
    let xp = Tensor::new(vec![5, 16], px).unwrap();
    let run = |input: &Tensor<f64>| {
        nn::evaluate(&m.params, |t, b| {
            let v = t.leaf(input);
            let v = t.reshape(v, [1, 5, 16])?;
            m.context_sequence(t, b, v)
        })
        .unwrap()
    };
    let (y, yp) = (run(&x), run(&xp));
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..16 {
            let d = (yp.data()[i * 16 + k] - y.data()[p * 16 + k]).abs();
            assert!(d < 1e-6, "row {i} feature {k}: {d}");
        }
    }
}

#[test]
fn ablation_path_is_frame_local() {
    let m = Model::<f32>::new(tiny(1)).unwrap();
    let ds = tiny_data(1);
    let before = predict(&m, &ds, true).unwrap();
    let mut changed = ds.clone();
    changed.samples[0].frames.data_mut()[..3 * 256].iter_mut().for_each(|v| *v = 1.0 - *v);
    let after = predict(&m, &changed, true).unwrap();
    let width = 21 * 3;
    assert_ne!(before.joints3d.data()[..width], after.joints3d.data()[..width]);
    assert_eq!(before.joints3d.data()[width..], after.joints3d.data()[width..]);

    let full_before = predict(&m, &ds, false).unwrap();
    let full_after = predict(&m, &changed, false).unwrap();
    assert_ne!(
        full_before.joints3d.data()[width..5 * width],
        full_after.joints3d.data()[width..5 * width]
    );
}

#[test]
fn zero_head_predicts_the_image_center_and_origin() {
    let mut m = Model::<f32>::new(tiny(2)).unwrap();
    for name in ["head.fc2.weight", "head.fc2.bias"] {
        m.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let ds = tiny_data(2);
    let frame = Tensor::new(vec![3, 16, 16], ds.samples[0].frames.data()[..768].to_vec()).unwrap();
    let (px, p3) = m.forward_ablation(&frame).unwrap();
    assert!(px.data().iter().all(|&v| v == 8.0));
    assert!(p3.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let mut m = Model::<f32>::new(tiny(4)).unwrap();
    let before = snapshot(&m.params, "");
    let report = train_step1(&mut m, &tiny_data(4), &schedule(0.0, 3)).unwrap();
    assert_eq!(report.records.len(), 3);
    let after = snapshot(&m.params, "");
    let strip = |v: Vec<(String, Vec<f32>)>| -> Vec<_> {
        v.into_iter().filter(|(n, _)| n != STAGE_MARKER).collect()
    };
    assert_eq!(strip(before), strip(after));
    assert_eq!(m.stage(), 1);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_data(5);
    let run = || {
        let mut m = Model::<f32>::new(tiny(5)).unwrap();
        let r1 = train_step1(&mut m, &ds, &schedule(1e-3, 4)).unwrap();
        let r2 = train_step2(&mut m, &ds, &schedule(1e-3, 4)).unwrap();
        (r1, r2, snapshot(&m.params, ""))
    };
    assert_eq!(run(), run());
}

/// 16 frames, one full batch per step.
fn sixteen_frames(seed: u64) -> (ModelConfig, Dataset) {
    let cfg = ModelConfig {
        seq_len: 4,
        batch_size: 4,
        ..tiny(seed)
    };
    let spec = GeneratorSpec {
        img_h: 16,
        img_w: 16,
        seq_len: 4,
        ..GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 1, 100 + seed)
    };
    (cfg, generate_dataset(&spec).unwrap())
}

fn strictly_decreasing(r: &TrainReport) -> bool {
    r.records.windows(2).all(|w| w[1].loss < w[0].loss)
}

#[test]
fn step1_loss_decreases_for_most_seeds() {
    let mut wins = 0;
    for seed in 1..=5 {
        let (cfg, ds) = sixteen_frames(seed);
        let mut m = Model::<f32>::new(cfg).unwrap();
        let r = train_step1(&mut m, &ds, &schedule(1e-3, 50)).unwrap();
        wins += usize::from(strictly_decreasing(&r));
    }
    assert!(wins >= 4, "loss fell monotonically for only {wins} of 5 seeds");
}

#[test]
fn step2_loss_decreases_for_most_seeds() {
    let mut wins = 0;
    for seed in 1..=5 {
        let (cfg, ds) = sixteen_frames(seed);
        let mut m = Model::<f32>::new(cfg).unwrap();
        train_step1(&mut m, &ds, &schedule(1e-3, 20)).unwrap();
        let r = train_step2(&mut m, &ds, &schedule(1e-3, 50)).unwrap();
        wins += usize::from(strictly_decreasing(&r));
    }
    assert!(wins >= 4, "loss fell monotonically for only {wins} of 5 seeds");
}

#[test]
fn step2_requires_step1() {
    let mut m = Model::<f32>::new(tiny(6)).unwrap();
    let err = train_step2(&mut m, &tiny_data(6), &schedule(1e-3, 2)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn step2_freezes_the_image_encoder() {
    let ds = tiny_data(7);
    let mut m = Model::<f32>::new(tiny(7)).unwrap();
    train_step1(&mut m, &ds, &schedule(1e-3, 3)).unwrap();
    let enc = snapshot(&m.params, "enc.");
    let fc = snapshot(&m.params, "fc.");
    let head = snapshot(&m.params, "head.");
    let report = train_step2(&mut m, &ds, &schedule(1e-3, 3)).unwrap();
    assert_eq!(report.stage, 2);
    assert_eq!(m.stage(), 2);
    assert_eq!(snapshot(&m.params, "enc."), enc);
    assert_eq!(snapshot(&m.params, "fc."), fc);
    assert_ne!(snapshot(&m.params, "head."), head);
}

#[test]
fn divergence_is_reported() {
    let ds = tiny_data(8);
    let mut cfg = tiny(8);
    cfg.divergence_factor = 1.0 + 1e-9;
    let mut m = Model::<f32>::new(cfg).unwrap();
    let err = train_step1(&mut m, &ds, &schedule(1.0, 50)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let mut m = Model::<f32>::new(ModelConfig {
        seq_len: 3,
        ..tiny(0)
    })
    .unwrap();
    let err = train_step1(&mut m, &tiny_data(0), &schedule(1e-3, 1)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn lifter_overfits_one_sample() {
    let m = Model::<f64>::new(ModelConfig::default()).unwrap();
    let lifter = m.lifter().unwrap();
    let mut rng = rng_for(11, 11);
    let sample = &tiny_data(11).samples[0];
    let u = m.normalize_2d(&Tensor::new(vec![1, 21, 2], sample.gt2d.data()[..42].to_vec()).unwrap());
    let gt = Tensor::new(vec![1, 21, 3], sample.gt3d.data()[..63].to_vec()).unwrap();
    let mut ps = ParamSet::new();
    lifter.init(&mut ps, &mut rng);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut last = f64::INFINITY;
    for step in 0..500 {
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, |_| true);
        let x = tape.leaf(&u);
        let g = tape.leaf(&gt);
        let p = lifter.forward(&mut tape, &b, x).unwrap();
        let l = loss::step2(&mut tape, p, g, crate::config::LossReduction::Mean).unwrap();
        last = tape.item(l);
        let mut grads = tape.backward(l).unwrap();
        ps.store_grads(&b, &mut grads).unwrap();
        adam.step(&mut ps, &names, 1e-2 * 0.5f64.powi(step as i32 / 50)).unwrap();
    }
    assert!(last < 1e-3, "loss after 500 steps {last}");
}
