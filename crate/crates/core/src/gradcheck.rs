//! Finite-difference verification of every trainable parameter group of the
//! pipeline, in `f64` at reduced sizes.
//!
//! The checked scalar is the stage-1 loss through the single-frame path plus
//! the stage-2 loss through the sequence encoder, so one backward pass reaches
//! every parameter.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::{LossReduction, ModelConfig, SequenceMode};
use crate::data::JOINTS;
use crate::error::Result;
use crate::nn::{self, Bindings, ParamSet};
use crate::pipeline::{loss, Model, STAGE_MARKER};
use crate::tensor::{fd_grad, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Parameter groups and the name prefixes that make them up.
pub const GROUPS: [(&str, &[&str]); 8] = [
    ("conv encoder", &["enc."]),
    ("fc ablation layer", &["fc."]),
    ("attention", &["seq.attn."]),
    ("encoder block", &["seq.pos", "seq.ln", "seq.ff"]),
    ("mlp head", &["head."]),
    ("gc layers", &["lift.enc.", "lift.dec.", "lift.out."]),
    ("adjacency raw", &["lift.adj."]),
    ("pooling matrices", &["lift.pool.", "lift.unpool."]),
];

/// 8×8 frames, two-frame sequences, width 8 with two heads, and a three-level
/// Graph U-Net with biases.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        seq_len: 2,
        img_h: 8,
        img_w: 8,
        conv_channels: vec![4, 4],
        embed_width: 8,
        context_width: 8,
        heads: 2,
        ff_width: 16,
        head_hidden: 8,
        unet_nodes: vec![21, 6, 3],
        unet_widths: vec![4, 6, 6],
        gc_bias: true,
        adjacency_init: 0.5,
        ..ModelConfig::for_mode(SequenceMode::Temporal)
    }
}

/// Worst per-tensor results of one parameter group.
#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub tensors: Vec<GradCheckReport>,
    /// Tensors whose gradient is zero in both computations, which would make
    /// the comparison vacuous.
    pub silent: Vec<String>,
}

impl GroupResult {
    pub fn worst(&self) -> Option<&GradCheckReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |r| r.max_rel_error)
    }

    pub fn elements(&self) -> usize {
        self.tensors.iter().map(|r| r.elements).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance && self.silent.is_empty() && !self.tensors.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Suite {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl Suite {
    pub fn passes(&self) -> bool {
        self.groups.iter().all(|g| g.passes(self.tolerance))
    }

    /// Names of the groups at or above the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passes(self.tolerance))
            .map(|g| g.name.as_str())
            .collect()
    }

    /// Worst relative error over every parameter.
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(GroupResult::max_rel_error).fold(0.0, f64::max)
    }

    /// One line per group plus a total line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let status = if g.passes(self.tolerance) { "ok  " } else { "FAIL" };
            let worst = g.worst().map_or("-", |r| r.group.as_str());
            let _ = write!(
                out,
                "{status} {:<18} {:>6} elements  max rel error {:.3e}  worst tensor {worst}",
                g.name,
                g.elements(),
                g.max_rel_error()
            );
            if !g.silent.is_empty() {
                let _ = write!(out, "  zero gradient: {}", g.silent.join(", "));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{} full pipeline      max rel error {:.3e} (tolerance {:e}, {:.1} s)",
            if self.passes() { "ok  " } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        );
        out
    }
}

/// Fixed random inputs and targets for one reduced-size check.
struct Probe {
    model: Model<f64>,
    input: Tensor<f64>,
    gt2d: Tensor<f64>,
    gt3d: Tensor<f64>,
}

impl Probe {
    fn new(seed: u64) -> Result<Self> {
        let mut model = Model::<f64>::new(ModelConfig {
            seed,
            ..reduced_config()
        })?;
        let mut rng = crate::pipeline::rng_for(seed, 0x6C);
        // Move away from the zero biases, unit gains and identical adjacency
        // entries of a fresh initialization so every code path is generic.
        for (name, t) in model.params.iter_mut() {
            if name == STAGE_MARKER {
                continue;
            }
            let std = if name.ends_with(".bias") { 0.01 } else { 0.2 };
            let noise: Tensor<f64> = nn::normal(t.shape(), std, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
        let c = &model.config;
        let n = c.seq_len;
        let frames = Tensor::new(
            vec![n, c.channels, c.img_h, c.img_w],
            (0..n * c.channels * c.img_h * c.img_w).map(|_| rng.random::<f64>()).collect(),
        )?;
        let input = model.encoder().prepare(&frames)?;
        let w = c.img_w as f64;
        let gt2d = Tensor::new(
            vec![n, JOINTS, 2],
            (0..n * JOINTS * 2).map(|_| rng.random::<f64>() * w).collect(),
        )?;
        let gt3d = nn::normal(&[n, JOINTS, 3], 1.0, &mut rng);
        Ok(Self {
            model,
            input,
            gt2d,
            gt3d,
        })
    }

    fn loss(&self, tape: &mut Tape<f64>, b: &Bindings) -> Result<Var> {
        let m = &self.model;
        let c = &m.config;
        let x = tape.leaf(&self.input);
        let gt2d = tape.leaf(&self.gt2d);
        let gt3d = tape.leaf(&self.gt3d);
        let e = m.embed(tape, b, x)?;

        let single = m.context_single(tape, b, e)?;
        let (u, p) = m.regress(tape, b, single)?;
        let px = m.pixels_on_tape(tape, u)?;
        let l1 = loss::step1(tape, px, gt2d, p, gt3d, c.alpha, LossReduction::Mean)?;

        let seq = tape.reshape(e, [1, c.seq_len, c.embed_width])?;
        let ctx = m.context_sequence(tape, b, seq)?;
        let ctx = tape.reshape(ctx, [c.seq_len, c.context_width])?;
        let (_, p) = m.regress(tape, b, ctx)?;
        let l2 = loss::step2(tape, p, gt3d, LossReduction::Mean)?;
        tape.add(l1, l2)
    }

    fn value(&self, params: &ParamSet<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| false);
        let l = self.loss(&mut tape, &b)?;
        Ok(tape.item(l))
    }
}

fn group_of(name: &str) -> Option<usize> {
    GROUPS
        .iter()
        .position(|(_, prefixes)| prefixes.iter().any(|p| name.starts_with(p)))
}

/// Compares backward gradients against central differences with step `eps`
/// for every parameter of a reduced model seeded by `seed`.
pub fn run(seed: u64, eps: f64, tolerance: f64) -> Result<Suite> {
    let start = Instant::now();
    let probe = Probe::new(seed)?;
    let mut tape = Tape::new();
    let b = probe.model.params.bind(&mut tape, |n| n != STAGE_MARKER);
    let l = probe.loss(&mut tape, &b)?;
    let grads = tape.backward(l)?;

    let mut groups: Vec<GroupResult> = GROUPS
        .iter()
        .map(|(name, _)| GroupResult {
            name: name.to_string(),
            tensors: Vec::new(),
            silent: Vec::new(),
        })
        .collect();
    let mut params = probe.model.params.clone();
    for (name, var) in b.trainable() {
        let Some(g) = group_of(name) else {
            return Err(crate::Error::contract(format!(
                "parameter `{name}` belongs to no gradient-check group"
            )));
        };
        let analytic = grads.get(var).map_or_else(
            || vec![0.0; tape.value(var).len()],
            <[f64]>::to_vec,
        );
        let original = probe.model.params.require(name)?.clone();
        let numeric = fd_grad(
            |t| {
                params.insert(name, t.clone());
                probe.value(&params)
            },
            &original,
            eps,
        )?;
        params.insert(name, original);
        if analytic.iter().chain(numeric.data()).all(|&v| v == 0.0) {
            groups[g].silent.push(name.to_string());
        }
        groups[g]
            .tensors
            .push(GradCheckReport::compare(name, &analytic, numeric.data()));
    }
    Ok(Suite {
        groups,
        tolerance,
        elapsed: start.elapsed(),
    })
}
