//! Acceptance criteria AC-1 to AC-6.
//!
//! Runs without the libtest harness so that every criterion prints one
//! `PASS`/`FAIL` line. Positional arguments such as `AC-3` restrict the run.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sethpose::config::{ModelConfig, Schedule, ScheduleUnit, SequenceMode};
use sethpose::data::{format, generate_dataset, split, Dataset, GeneratorSpec, Split, SplitBy};
use sethpose::graph::{normalize_with_degrees, LearnableAdjacency};
use sethpose::metrics::{auc, epe, pck_curve, pck_from_errors, PckCurve, PckPooling};
use sethpose::nn::{self, ParamSet};
use sethpose::pipeline::{
    checkpoint, ground_truth, predict, train_step1, train_step2, train_step2_ablation, Model,
};
use sethpose::{gradcheck, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Rate 1e-3 halved every quarter of the budget.
fn schedule(steps: usize) -> Schedule {
    Schedule {
        rate: 1e-3,
        decay: 0.5,
        decay_every: steps / 4 + 1,
        unit: ScheduleUnit::Step,
        steps,
    }
}

const STEPS: usize = 2000;

fn ac1() -> Verdict {
    let suite = match gradcheck::run(1, gradcheck::DEFAULT_EPS, gradcheck::DEFAULT_TOLERANCE) {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("gradcheck errored: {e}")),
    };
    print!("{}", suite.render());
    let fast = suite.elapsed < Duration::from_secs(60);
    verdict(
        suite.passes() && fast,
        format!(
            "{} groups, max relative error {:.3e} (< 1e-4), {:.1} s (< 60 s)",
            suite.groups.len(),
            suite.max_rel_error(),
            suite.elapsed.as_secs_f64()
        ),
    )
}

/// Trains both stages on a 16-sequence set and returns the training-set 3D
/// EPE and the wall-clock time.
fn overfit(mode: SequenceMode, seed: u64) -> sethpose::Result<(f64, Duration)> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::for_mode(mode)
    };
    let ds = generate_dataset(&GeneratorSpec::new(mode, 4, 2, 2, seed))?;
    assert_eq!(ds.len(), 16);
    let start = Instant::now();
    let mut model = Model::<f32>::new(cfg)?;
    train_step1(&mut model, &ds, &schedule(STEPS))?;
    train_step2(&mut model, &ds, &schedule(STEPS))?;
    let pred = predict(&model, &ds, false)?;
    let err = epe(&pred.joints3d.cast::<f64>(), &ground_truth(&ds)?.joints3d)?;
    Ok((err, start.elapsed()))
}

fn overfit_criterion(mode: SequenceMode) -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5 {
        match overfit(mode, seed) {
            Ok((err, took)) => {
                let ok = err < 0.1 && took < Duration::from_secs(15 * 60);
                wins += usize::from(ok);
                println!(
                    "  {mode} seed {seed}: train 3D EPE {err:.4} in {:.0} s {}",
                    took.as_secs_f64(),
                    if ok { "ok" } else { "miss" }
                );
                rows.push(format!("{err:.4}"));
            }
            Err(e) => {
                println!("  {mode} seed {seed}: error {e}");
                rows.push("error".into());
            }
        }
    }
    verdict(
        wins >= 4,
        format!(
            "{wins}/5 seeds below EPE 0.1 within 15 min (EPE {})",
            rows.join(", ")
        ),
    )
}

fn ac2() -> Verdict {
    overfit_criterion(SequenceMode::Temporal)
}

fn ac6() -> Verdict {
    overfit_criterion(SequenceMode::Angular)
}

/// Test 3D EPE of the full model and of the single-frame ablation, trained
/// from one shared stage-1 model with identical stage-2 budgets.
fn ablation_pair(seed: u64) -> sethpose::Result<(f64, f64)> {
    let subjects = 10;
    let spec = GeneratorSpec {
        occlusion: 1.0,
        ..GeneratorSpec::new(SequenceMode::Temporal, subjects, 2, 20, seed)
    };
    let ds = generate_dataset(&spec)?;
    let split = Split::new(&ds, SplitBy::Subject, &split::default_test_ids(subjects))?;
    let (train, test) = (ds.subset(&split.train)?, ds.subset(&split.test)?);
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::for_mode(SequenceMode::Temporal)
    };
    let mut full = Model::<f32>::new(cfg)?;
    train_step1(&mut full, &train, &schedule(STEPS))?;
    let mut single = full.clone();
    train_step2(&mut full, &train, &schedule(STEPS))?;
    train_step2_ablation(&mut single, &train, &schedule(STEPS))?;
    let gt = ground_truth(&test)?.joints3d;
    let full_err = epe(&predict(&full, &test, false)?.joints3d.cast::<f64>(), &gt)?;
    let single_err = epe(&predict(&single, &test, true)?.joints3d.cast::<f64>(), &gt)?;
    Ok((full_err, single_err))
}

fn ac3() -> Verdict {
    let mut wins = 0;
    for seed in 1..=5 {
        match ablation_pair(seed) {
            Ok((full, single)) => {
                wins += usize::from(full < single);
                println!(
                    "  seed {seed}: test 3D EPE full {full:.4} single-frame {single:.4} {}",
                    if full < single { "ok" } else { "miss" }
                );
            }
            Err(e) => println!("  seed {seed}: error {e}"),
        }
    }
    verdict(
        wins >= 4,
        format!("full model beats the single-frame ablation in {wins}/5 seeds"),
    )
}

fn oracle_errors(p: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut j = 0;
    while j < p.len() {
        let mut s = 0.0;
        for d in 0..3 {
            s += (p[j + d] - g[j + d]) * (p[j + d] - g[j + d]);
        }
        out.push(s.sqrt());
        j += 3;
    }
    out
}

fn ac4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..100 {
        let frames = rng.random_range(1..6);
        let n = frames * 21 * 3;
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let p: Vec<f64> = g.iter().map(|v| v + rng.random_range(-40.0..40.0)).collect();
        let (pt, gt) = (
            Tensor::new(vec![frames, 21, 3], p.clone()).unwrap(),
            Tensor::new(vec![frames, 21, 3], g.clone()).unwrap(),
        );
        let errors = oracle_errors(&p, &g);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        worst = worst.max((epe(&pt, &gt).unwrap() - mean).abs());

        let lo = rng.random_range(0.0..20.0);
        let hi = lo + rng.random_range(1.0..60.0);
        let count = rng.random_range(2..120);
        let thresholds: Vec<f64> = (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect();
        let curve = pck_curve(&pt, &gt, &thresholds, PckPooling::PerJoint).unwrap();
        for (t, v) in thresholds.iter().zip(&curve.values) {
            let below = errors.iter().filter(|&&e| e < *t).count();
            worst = worst.max((v - below as f64 / errors.len() as f64).abs());
        }
        monotone &= curve.values.windows(2).all(|w| w[1] >= w[0]);

        let mut area = 0.0;
        for i in 1..count {
            area += (thresholds[i] - thresholds[i - 1]) * (curve.values[i] + curve.values[i - 1]) * 0.5;
        }
        worst = worst.max((auc(&curve).unwrap() - area / (hi - lo)).abs());
    }
    let ones = PckCurve {
        thresholds: vec![20.0, 30.0, 35.0, 50.0],
        values: vec![1.0; 4],
    };
    let unit = auc(&ones).unwrap();
    let exact = pck_from_errors(&[0.0], &[1.0, 2.0]).and_then(|c| auc(&c)).unwrap();
    verdict(
        worst < 1e-6 && unit == 1.0 && exact == 1.0 && monotone,
        format!(
            "100 instances, max deviation from scalar oracles {worst:.2e} (< 1e-6), AUC of constant 1 = {unit}, PCK monotone: {monotone}"
        ),
    )
}

fn adjacency_identity(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(2..=21);
        let raw: Tensor<f64> = nn::normal(&[k, k], 2.0, rng);
        let mut ps = ParamSet::new();
        ps.insert("adj", raw);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, |_| false);
        let adj = LearnableAdjacency::new("adj", k);
        let hat = adj.with_self_loops(&mut tape, &b).unwrap();
        let bar = normalize_with_degrees(&mut tape, hat).unwrap();
        let (h, a) = (tape.value(hat), tape.value(bar));
        let d: Vec<f64> = (0..k).map(|i| h[i * k..(i + 1) * k].iter().sum()).collect();
        for i in 0..k {
            for j in 0..k {
                worst = worst.max((a[i * k + j] - h[i * k + j] / (d[i] * d[j]).sqrt()).abs());
            }
        }
    }
    worst
}

fn permutation_gap() -> f64 {
    let mut model = Model::<f64>::new(ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    model.params.get_mut("seq.pos").unwrap().data_mut().fill(0.0);
    let (n, f) = (model.config.seq_len, model.config.embed_width);
    let x: Tensor<f64> = nn::normal(&[n, f], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let perm = [2, 4, 0, 3, 1];
    let permute = |t: &Tensor<f64>| {
        let data = perm.iter().flat_map(|&p| t.data()[p * f..(p + 1) * f].to_vec()).collect();
        Tensor::new(vec![n, f], data).unwrap()
    };
    let run = |input: &Tensor<f64>| {
        nn::evaluate(&model.params, |tape, b| {
            let v = tape.leaf(input);
            let v = tape.reshape(v, [1, n, f])?;
            let c = model.context_sequence(tape, b, v)?;
            tape.reshape(c, [n, f])
        })
        .unwrap()
    };
    let want = permute(&run(&x));
    let got = run(&permute(&x));
    want.data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn small_setup() -> (ModelConfig, Dataset) {
    let cfg = ModelConfig {
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
        seed: 6,
        ..ModelConfig::for_mode(SequenceMode::Temporal)
    };
    let spec = GeneratorSpec {
        img_h: 16,
        img_w: 16,
        ..GeneratorSpec::new(SequenceMode::Temporal, 2, 2, 1, 6)
    };
    (cfg, generate_dataset(&spec).unwrap())
}

fn encoder_bits(m: &Model<f32>) -> Vec<u32> {
    m.params
        .iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn ac5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let adj = adjacency_identity(&mut rng);
    let perm = permutation_gap();

    let (cfg, ds) = small_setup();
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    train_step1(&mut model, &ds, &schedule(5)).unwrap();
    let before = encoder_bits(&model);
    train_step2(&mut model, &ds, &schedule(5)).unwrap();
    let frozen = before == encoder_bits(&model);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.sthp");
    checkpoint::save_checkpoint(&ckpt, &model.params).unwrap();
    let loaded = Model::from_params(cfg, checkpoint::load_checkpoint(&ckpt).unwrap()).unwrap();
    let a = predict(&model, &ds, false).unwrap();
    let b = predict(&loaded, &ds, false).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ckpt_ok = checkpoint::to_bytes(&loaded.params).unwrap() == std::fs::read(&ckpt).unwrap()
        && bits(&a.joints3d) == bits(&b.joints3d)
        && bits(&a.joints2d) == bits(&b.joints2d);

    let data_path = dir.path().join("data.sthd");
    format::write_dataset(&data_path, &ds).unwrap();
    let back = format::read_dataset(&data_path).unwrap();
    let data_ok = back == ds && format::to_bytes(&back).unwrap() == std::fs::read(&data_path).unwrap();

    verdict(
        adj < 1e-6 && perm < 1e-6 && frozen && ckpt_ok && data_ok,
        format!(
            "adjacency identity {adj:.1e}, permutation gap {perm:.1e}, encoder frozen {frozen}, checkpoint round-trip {ckpt_ok}, dataset round-trip {data_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, &str, fn() -> Verdict); 6] = [
        ("AC-1", "gradient check", ac1),
        ("AC-2", "temporal overfit", ac2),
        ("AC-3", "ablation direction", ac3),
        ("AC-4", "metric oracles", ac4),
        ("AC-5", "structural invariants", ac5),
        ("AC-6", "angular overfit", ac6),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        failed += usize::from(!v.pass);
        println!(
            "{id} {} {name}: {} [{:.0} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
