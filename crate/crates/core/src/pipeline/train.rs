//! The two training stages and batched inference over datasets.
//!
//! Stage 1 trains image encoder, fully connected stand-in, 2D head and
//! lifter on individual frames. Stage 2 freezes the image encoder, trains a
//! freshly initialized sequence encoder and fine-tunes head and lifter on
//! whole sequences with a 3D-only loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{loss, rng_for, Adam, Model, PoseSet};
use crate::config::Schedule;
use crate::data::{Dataset, JOINTS};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub rate: f64,
}

/// Loss history of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: u32,
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    /// `step,loss,rate` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,rate\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.rate);
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Every frame of a dataset, flattened and prepared for the encoder.
struct FramePool<T: Scalar> {
    input: Vec<T>,
    frame_len: usize,
    frame_shape: Vec<usize>,
    gt2d: Vec<T>,
    gt3d: Vec<T>,
    frames: usize,
}

impl<T: Scalar> FramePool<T> {
    fn new(model: &Model<T>, data: &Dataset) -> Result<Self> {
        let c = &model.config;
        let h = &data.header;
        if (h.channels, h.img_h, h.img_w) != (c.channels, c.img_h, c.img_w) {
            return Err(Error::dim(format!(
                "dataset frames are {}×{}×{}, model expects {}×{}×{}",
                h.channels, h.img_h, h.img_w, c.channels, c.img_h, c.img_w
            )));
        }
        let enc = model.encoder();
        let frame_shape = vec![c.img_h, c.img_w, enc.input_channels()];
        let frame_len = frame_shape.iter().product();
        let mut pool = Self {
            input: Vec::new(),
            frame_len,
            frame_shape,
            gt2d: Vec::new(),
            gt3d: Vec::new(),
            frames: 0,
        };
        for s in &data.samples {
            let prepared: Tensor<T> = enc.prepare(&s.frames)?;
            pool.input.extend_from_slice(prepared.data());
            pool.gt2d.extend(s.gt2d.data().iter().map(|&v| T::of(v)));
            pool.gt3d.extend(s.gt3d.data().iter().map(|&v| T::of(v)));
            pool.frames += s.len();
        }
        Ok(pool)
    }

    fn pick(data: &[T], width: usize, idx: &[usize], shape: Vec<usize>) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        Tensor::new(shape, out)
    }

    fn inputs(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let mut shape = vec![idx.len()];
        shape.extend(&self.frame_shape);
        Self::pick(&self.input, self.frame_len, idx, shape)
    }

    fn joints2d(&self, idx: &[usize]) -> Result<Tensor<T>> {
        Self::pick(&self.gt2d, JOINTS * 2, idx, vec![idx.len(), JOINTS, 2])
    }

    fn joints3d(&self, idx: &[usize]) -> Result<Tensor<T>> {
        Self::pick(&self.gt3d, JOINTS * 3, idx, vec![idx.len(), JOINTS, 3])
    }
}

/// Endless shuffled minibatches over `0..len`; a batch covering the whole
/// set is always the identity order.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(len: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            batch: batch.min(len),
            rng,
        }
    }

    fn steps_per_epoch(&self) -> usize {
        (self.order.len() / self.batch.max(1)).max(1)
    }

    fn next(&mut self) -> &[usize] {
        if self.batch == self.order.len() {
            return &self.order;
        }
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

struct Guard {
    factor: f64,
    initial: Option<f64>,
}

impl Guard {
    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss became {loss}"),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "loss {loss:e} exceeds {}× the initial loss {initial:e}",
                    self.factor
                ),
            });
        }
        Ok(())
    }
}

fn trainable_names<T: Scalar>(ps: &ParamSet<T>, prefixes: &[&str]) -> Vec<String> {
    ps.names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect()
}

const STAGE1_PREFIXES: [&str; 4] = ["enc.", "fc.", "head.", "lift."];
const STAGE2_PREFIXES: [&str; 3] = ["seq.", "head.", "lift."];
const ABLATION2_PREFIXES: [&str; 3] = ["fc.", "head.", "lift."];

fn check_sequences<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    if data.header.seq_len != model.config.seq_len {
        return Err(Error::contract(format!(
            "dataset sequences have {} frames, model expects {}",
            data.header.seq_len, model.config.seq_len
        )));
    }
    Ok(())
}

/// Single-frame stage through the fully connected stand-in, minimizing
/// `α·L_2D + L_3D`. Minibatches hold `batch_size × seq_len` frames.
pub fn train_step1<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate("stage1")?;
    check_sequences(model, data)?;
    let pool = FramePool::new(model, data)?;
    let cfg = model.config.clone();
    let names = trainable_names(&model.params, &STAGE1_PREFIXES);
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut batches = Batcher::new(pool.frames, cfg.batch_size * cfg.seq_len, rng_for(cfg.seed, 1));
    let per_epoch = batches.steps_per_epoch();
    let mut guard = Guard {
        factor: cfg.divergence_factor,
        initial: None,
    };
    let mut records = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let idx = batches.next().to_vec();
        let mut tape = Tape::new();
        let b = model
            .params
            .bind(&mut tape, |n| STAGE1_PREFIXES.iter().any(|p| n.starts_with(p)));
        let x = tape.leaf(&pool.inputs(&idx)?);
        let gt2d = tape.leaf(&pool.joints2d(&idx)?);
        let gt3d = tape.leaf(&pool.joints3d(&idx)?);
        let e = model.embed(&mut tape, &b, x)?;
        let c = model.context_single(&mut tape, &b, e)?;
        let (u, p) = model.regress(&mut tape, &b, c)?;
        let px = model.pixels_on_tape(&mut tape, u)?;
        let l = loss::step1(&mut tape, px, gt2d, p, gt3d, cfg.alpha, cfg.loss_reduction)?;
        let value = tape.item(l).f64();
        guard.check(step, value)?;
        let mut grads = tape.backward(l)?;
        model.params.store_grads(&b, &mut grads)?;
        let rate = schedule.rate_at(step, per_epoch);
        adam.step(&mut model.params, &names, rate)?;
        records.push(LossRecord {
            step,
            loss: value,
            rate,
        });
    }
    model.params.clear_grads();
    model.set_stage(1);
    Ok(TrainReport { stage: 1, records })
}

/// Frame embeddings of every sequence, `[S·N·f]`, with all parameters frozen.
fn embed_all<T: Scalar>(model: &Model<T>, pool: &FramePool<T>) -> Result<Vec<T>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(pool.frames * model.config.embed_width);
    let all: Vec<usize> = (0..pool.frames).collect();
    for idx in all.chunks(CHUNK) {
        let input = pool.inputs(idx)?;
        let e = crate::nn::evaluate(&model.params, |tape, b| {
            let x = tape.leaf(&input);
            model.embed(tape, b, x)
        })?;
        out.extend_from_slice(e.data());
    }
    Ok(out)
}

/// Sequence stage: the image encoder is frozen, the sequence encoder starts
/// from a fresh initialization, and head and lifter continue from stage 1
/// (or restart when `reinit_stage2` is set). Minimizes the mean per-frame
/// 3D loss over batches of `batch_size` sequences.
pub fn train_step2<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    schedule: &Schedule,
) -> Result<TrainReport> {
    step2(model, data, schedule, false)
}

/// The second stage of the single-frame ablation: identical to
/// [`train_step2`] except that the fully connected stand-in keeps the place
/// of the sequence encoder and is fine-tuned along with head and lifter.
pub fn train_step2_ablation<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    schedule: &Schedule,
) -> Result<TrainReport> {
    step2(model, data, schedule, true)
}

fn step2<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    schedule: &Schedule,
    single: bool,
) -> Result<TrainReport> {
    if model.stage() < 1 {
        return Err(Error::contract(
            "stage 2 needs a model that has completed stage 1",
        ));
    }
    schedule.validate("stage2")?;
    check_sequences(model, data)?;
    let cfg = model.config.clone();
    let (n, f) = (cfg.seq_len, cfg.embed_width);
    let pool = FramePool::new(model, data)?;
    let embeddings = embed_all(model, &pool)?;

    let mut rng = rng_for(cfg.seed, 2);
    if !single {
        model.params.remove_prefix("seq.");
        model.sequence()?.init(&mut model.params, &mut rng);
    }
    if cfg.reinit_stage2 {
        model.params.remove_prefix("head.");
        model.params.remove_prefix("lift.");
        model.head().init(&mut model.params, &mut rng);
        model.lifter()?.init(&mut model.params, &mut rng);
    }

    let prefixes: &[&str] = if single {
        &ABLATION2_PREFIXES
    } else {
        &STAGE2_PREFIXES
    };
    let names = trainable_names(&model.params, prefixes);
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut batches = Batcher::new(data.len(), cfg.batch_size, rng_for(cfg.seed, 3));
    let per_epoch = batches.steps_per_epoch();
    let mut guard = Guard {
        factor: cfg.divergence_factor,
        initial: None,
    };
    let mut records = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let seqs = batches.next().to_vec();
        let frames: Vec<usize> = seqs.iter().flat_map(|&s| s * n..(s + 1) * n).collect();
        let mut tape = Tape::new();
        let b = model
            .params
            .bind(&mut tape, |name| prefixes.iter().any(|p| name.starts_with(p)));
        let gt3d = tape.leaf(&pool.joints3d(&frames)?);
        let c = if single {
            let x = FramePool::pick(&embeddings, f, &frames, vec![frames.len(), f])?;
            let x = tape.leaf(&x);
            model.context_single(&mut tape, &b, x)?
        } else {
            let x = FramePool::pick(&embeddings, n * f, &seqs, vec![seqs.len(), n, f])?;
            let x = tape.leaf(&x);
            let c = model.context_sequence(&mut tape, &b, x)?;
            tape.reshape(c, [frames.len(), cfg.context_width])?
        };
        let (_, p) = model.regress(&mut tape, &b, c)?;
        let l = loss::step2(&mut tape, p, gt3d, cfg.loss_reduction)?;
        let value = tape.item(l).f64();
        guard.check(step, value)?;
        let mut grads = tape.backward(l)?;
        model.params.store_grads(&b, &mut grads)?;
        let rate = schedule.rate_at(step, per_epoch);
        adam.step(&mut model.params, &names, rate)?;
        records.push(LossRecord {
            step,
            loss: value,
            rate,
        });
    }
    model.params.clear_grads();
    model.set_stage(2);
    Ok(TrainReport { stage: 2, records })
}

/// Predictions for every frame of `data`, in sample order. With `single`
/// each frame goes through the fully connected stand-in on its own;
/// otherwise whole sequences go through the sequence encoder.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset, single: bool) -> Result<PoseSet<T>> {
    check_sequences(model, data)?;
    let pool = FramePool::new(model, data)?;
    let n = model.config.seq_len;
    const CHUNK: usize = 16;
    let (mut p2, mut p3) = (Vec::new(), Vec::new());
    let seqs: Vec<usize> = (0..data.len()).collect();
    for chunk in seqs.chunks(CHUNK) {
        let frames: Vec<usize> = chunk.iter().flat_map(|&s| s * n..(s + 1) * n).collect();
        let input = pool.inputs(&frames)?;
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, |_| false);
        let x = tape.leaf(&input);
        let e = model.embed(&mut tape, &b, x)?;
        let c = if single {
            model.context_single(&mut tape, &b, e)?
        } else {
            let e = tape.reshape(e, [chunk.len(), n, model.config.embed_width])?;
            let c = model.context_sequence(&mut tape, &b, e)?;
            tape.reshape(c, [frames.len(), model.config.context_width])?
        };
        let (u, p) = model.regress(&mut tape, &b, c)?;
        let px = model.pixels_on_tape(&mut tape, u)?;
        p2.extend_from_slice(tape.value(px));
        p3.extend_from_slice(tape.value(p));
    }
    let m = pool.frames;
    PoseSet::new(
        Tensor::new(vec![m, JOINTS, 2], p2)?,
        Tensor::new(vec![m, JOINTS, 3], p3)?,
    )
}

/// Ground truth of every frame of `data`, in sample order.
pub fn ground_truth(data: &Dataset) -> Result<PoseSet<f64>> {
    let m: usize = data.samples.iter().map(|s| s.len()).sum();
    let p2 = data.samples.iter().flat_map(|s| s.gt2d.data().iter().copied()).collect();
    let p3 = data.samples.iter().flat_map(|s| s.gt3d.data().iter().copied()).collect();
    PoseSet::new(
        Tensor::new(vec![m, JOINTS, 2], p2)?,
        Tensor::new(vec![m, JOINTS, 3], p3)?,
    )
}
