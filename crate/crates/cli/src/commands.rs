use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sethpose::data::{self, split, Dataset, GeneratorSpec, Split, SplitBy};
use sethpose::metrics::{auc, epe, pck_curve, PckCurve};
use sethpose::pipeline::{
    ground_truth, load_checkpoint, predict, save_checkpoint, train_step1, train_step2,
    train_step2_ablation, Model, PoseSet,
};
use sethpose::tensor::fault;
use sethpose::{gradcheck, Error, Result, Tensor};

use crate::run_config::{RunConfig, Stage, Subset};

/// Sequences per inference chunk inside `predict`; worker blocks are
/// multiples of it so results do not depend on the worker count.
const PREDICT_BLOCK: usize = 16;

/// `dir/stem.suffix` for `dir/stem.ext`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let stem = file.file_stem().map_or_else(Default::default, |s| s.to_string_lossy().into_owned());
    file.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing `{what}` (pass --{what} or set it in the config)")))
}

fn load_data(cfg: &RunConfig, subset: Subset) -> Result<Dataset> {
    let path = require(&cfg.data, "data")?;
    let ds = data::read_dataset(path)?;
    let indices = match subset {
        Subset::All => return Ok(ds),
        side => {
            let manifest = sibling(path, "split.txt");
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let split = Split::from_manifest(&text)?;
            if side == Subset::Train {
                split.train
            } else {
                split.test
            }
        }
    };
    if indices.is_empty() {
        return Err(Error::Config(format!("the {subset} side of the split is empty")));
    }
    ds.subset(&indices)
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = require(&cfg.checkpoint, "checkpoint")?;
    Model::from_params(cfg.model.clone(), load_checkpoint(path)?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let spec = GeneratorSpec {
        seq_len: cfg.generated_len(),
        img_h: cfg.model.img_h,
        img_w: cfg.model.img_w,
        occlusion: cfg.occlusion,
        ..GeneratorSpec::new(cfg.mode, cfg.subjects, cfg.activities, cfg.sequences, cfg.model.seed)
    };
    let ds = data::generate_dataset(&spec)?;
    let count = match cfg.split {
        SplitBy::Subject => cfg.subjects,
        SplitBy::Activity => cfg.activities,
    };
    let ids = if cfg.test_ids.is_empty() {
        split::default_test_ids(count)
    } else {
        cfg.test_ids.clone()
    };
    let split = Split::new(&ds, cfg.split, &ids)?;
    write(&sibling(out, "config.txt"), cfg.to_text())?;
    data::write_dataset(out, &ds)?;
    write(&sibling(out, "split.txt"), split.to_manifest())?;
    println!(
        "wrote {} {} sequences of {} frames ({}x{}) to {}",
        ds.len(),
        cfg.mode,
        spec.seq_len,
        spec.img_w,
        spec.img_h,
        out.display()
    );
    let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    println!(
        "split by {}: train {} sequences ({} {}), test {} sequences ({} {})",
        split.by,
        split.train.len(),
        split.by,
        ids(&split.train_ids),
        split.test.len(),
        split.by,
        ids(&split.test_ids)
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let ds = load_data(&cfg, cfg.train_on)?;
    cfg.adopt_header(&ds.header)?;
    cfg.model.validate()?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let mut model = match cfg.checkpoint {
        Some(_) => load_model(&cfg)?,
        None => Model::new(cfg.model.clone())?,
    };
    if matches!(cfg.stage, Stage::One | Stage::Both) {
        let report = train_step1(&mut model, &ds, &cfg.model.stage1)?;
        write(&out.join("loss_stage1.csv"), report.to_csv())?;
        println!(
            "stage 1: {} steps, loss {:.5} -> {:.5}",
            report.records.len(),
            report.first_loss().unwrap_or(f64::NAN),
            report.last_loss().unwrap_or(f64::NAN)
        );
    }
    if matches!(cfg.stage, Stage::Two | Stage::Both) {
        if model.stage() < 1 {
            return Err(Error::Contract(
                "stage 2 needs a stage-1 checkpoint (pass --checkpoint)".into(),
            ));
        }
        let report = if cfg.ablation {
            train_step2_ablation(&mut model, &ds, &cfg.model.stage2)?
        } else {
            train_step2(&mut model, &ds, &cfg.model.stage2)?
        };
        write(&out.join("loss_stage2.csv"), report.to_csv())?;
        println!(
            "stage 2{}: {} steps, loss {:.5} -> {:.5}",
            if cfg.ablation { " (single-frame)" } else { "" },
            report.records.len(),
            report.first_loss().unwrap_or(f64::NAN),
            report.last_loss().unwrap_or(f64::NAN)
        );
    }
    let ckpt = out.join("model.sthp");
    save_checkpoint(&ckpt, &model.params)?;
    let single = cfg.ablation || model.stage() < 2;
    let pred = predict_all(&model, &ds, single, cfg.workers)?;
    let err = epe(&pred.joints3d.cast::<f64>(), &ground_truth(&ds)?.joints3d)?;
    println!("training-set 3D EPE {err:.4}");
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

/// Predictions for every sample, fanned out over `workers` threads in
/// contiguous blocks and concatenated in sample order.
pub fn predict_all(
    model: &Model<f32>,
    ds: &Dataset,
    single: bool,
    workers: usize,
) -> Result<PoseSet<f32>> {
    let blocks = ds.len().div_ceil(PREDICT_BLOCK);
    let workers = workers.clamp(1, blocks.max(1));
    if workers == 1 {
        return predict(model, ds, single);
    }
    let per = blocks.div_ceil(workers) * PREDICT_BLOCK;
    let parts = (0..ds.len())
        .step_by(per)
        .map(|s| ds.subset(&(s..(s + per).min(ds.len())).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<PoseSet<f32>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| scope.spawn(move || predict(model, p, single)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let (mut p2, mut p3) = (Vec::new(), Vec::new());
    for r in results {
        let r = r?;
        p2.extend_from_slice(r.joints2d.data());
        p3.extend_from_slice(r.joints3d.data());
    }
    let m = p2.len() / (data::JOINTS * 2);
    PoseSet::new(
        Tensor::new(vec![m, data::JOINTS, 2], p2)?,
        Tensor::new(vec![m, data::JOINTS, 3], p3)?,
    )
}

pub struct Scores {
    pub frames: usize,
    pub epe3d: f64,
    pub epe2d: f64,
    pub auc: f64,
    pub curve: PckCurve,
}

/// Scores predictions (or, in ground-truth mode, the ground truth itself)
/// on `cfg.eval_on`.
fn score(cfg: &mut RunConfig) -> Result<Scores> {
    let ds = load_data(cfg, cfg.eval_on)?;
    cfg.adopt_header(&ds.header)?;
    let gt = ground_truth(&ds)?;
    let pred = if cfg.ground_truth {
        gt.clone()
    } else {
        let model = load_model(cfg)?;
        let p = predict_all(&model, &ds, cfg.ablation, cfg.workers)?;
        PoseSet::new(p.joints2d.cast(), p.joints3d.cast())?
    };
    let curve = pck_curve(&pred.joints3d, &gt.joints3d, &cfg.thresholds()?, cfg.pck_pooling)?;
    Ok(Scores {
        frames: gt.len(),
        epe3d: epe(&pred.joints3d, &gt.joints3d)?,
        epe2d: epe(&pred.joints2d, &gt.joints2d)?,
        auc: auc(&curve)?,
        curve,
    })
}

pub fn eval(mut cfg: RunConfig) -> Result<()> {
    let s = score(&mut cfg)?;
    let mut report = String::new();
    let _ = writeln!(report, "frames = {}", s.frames);
    let _ = writeln!(report, "epe3d = {:.6}", s.epe3d);
    let _ = writeln!(report, "epe2d_px = {:.6}", s.epe2d);
    let _ = writeln!(report, "auc = {:.6}", s.auc);
    let _ = writeln!(report, "pck_range = {}..{}", cfg.pck_min, cfg.pck_max);
    print!("{report}");
    println!(
        "Avg. EPE {:.4}  AUC {:.4}{}",
        s.epe3d,
        s.auc,
        if cfg.ablation { "  (single-frame)" } else { "" }
    );
    if let Some(out) = &cfg.out {
        write(&out.join("config.txt"), cfg.to_text())?;
        write(&out.join("report.txt"), report)?;
        write(&out.join("pck.csv"), s.curve.to_csv())?;
    }
    Ok(())
}

pub fn export_curve(mut cfg: RunConfig) -> Result<()> {
    let s = score(&mut cfg)?;
    match &cfg.out {
        Some(out) => {
            write(&sibling(out, "config.txt"), cfg.to_text())?;
            write(out, s.curve.to_csv())?;
            println!("wrote {} PCK thresholds to {}", s.curve.thresholds.len(), out.display());
        }
        None => print!("{}", s.curve.to_csv()),
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, inject: Option<&str>) -> Result<()> {
    if let Some(op) = inject {
        fault::inject_sign_flip(op);
    }
    let suite = gradcheck::run(cfg.model.seed, cfg.gradcheck_eps, cfg.gradcheck_tolerance);
    fault::clear();
    let suite = suite?;
    let text = suite.render();
    print!("{text}");
    if let Some(out) = &cfg.out {
        write(&out.join("config.txt"), cfg.to_text())?;
        write(&out.join("gradcheck.txt"), &text)?;
    }
    if suite.passes() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed for: {}",
            suite.failing().join(", ")
        )))
    }
}

pub fn sweep_heads(mut cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let train = load_data(&cfg, cfg.train_on)?;
    let test = load_data(&cfg, cfg.eval_on)?;
    cfg.adopt_header(&train.header)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let thresholds = cfg.thresholds()?;
    let gt = ground_truth(&test)?.joints3d;
    let method = format!("sethpose_{}", train.header.mode);
    let mut csv = String::from("method,heads,epe,auc\n");
    for &h in &cfg.sweep_heads {
        if h == 0 || cfg.model.embed_width % h != 0 {
            eprintln!(
                "warning: skipping heads = {h}: embed_width {} is not divisible by it",
                cfg.model.embed_width
            );
            continue;
        }
        let mut model = Model::<f32>::new(sethpose::config::ModelConfig {
            heads: h,
            ..cfg.model.clone()
        })?;
        train_step1(&mut model, &train, &cfg.model.stage1)?;
        train_step2(&mut model, &train, &cfg.model.stage2)?;
        let pred = predict_all(&model, &test, false, cfg.workers)?.joints3d.cast::<f64>();
        let err = epe(&pred, &gt)?;
        let area = auc(&pck_curve(&pred, &gt, &thresholds, cfg.pck_pooling)?)?;
        println!("heads {h:>2}: EPE {err:.4}  AUC {area:.4}");
        let _ = writeln!(csv, "{method},{h},{err:.6},{area:.6}");
    }
    write(&out.join("sweep.csv"), csv)?;
    println!("table written to {}", out.join("sweep.csv").display());
    Ok(())
}
