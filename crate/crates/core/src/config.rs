//! Model and training hyperparameters with a flat `key = value` text form.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

/// What the frames of one sequence have in common.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SequenceMode {
    /// Consecutive video frames from one camera.
    Temporal,
    /// One pose seen by several cameras at the same instant.
    Angular,
}

impl SequenceMode {
    /// Default sequence length: 5 frames in time, 3 camera views.
    pub fn default_len(self) -> usize {
        match self {
            SequenceMode::Temporal => 5,
            SequenceMode::Angular => 3,
        }
    }
}

impl fmt::Display for SequenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceMode::Temporal => "temporal",
            SequenceMode::Angular => "angular",
        })
    }
}

impl FromStr for SequenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(SequenceMode::Temporal),
            "angular" => Ok(SequenceMode::Angular),
            _ => Err(Error::Config(format!(
                "mode must be `temporal` or `angular`, got `{s}`"
            ))),
        }
    }
}

/// Unit of the learning-rate decay interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

impl fmt::Display for ScheduleUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleUnit::Epoch => "epoch",
            ScheduleUnit::Step => "step",
        })
    }
}

impl FromStr for ScheduleUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(ScheduleUnit::Epoch),
            "step" => Ok(ScheduleUnit::Step),
            _ => Err(Error::Config(format!(
                "schedule unit must be `epoch` or `step`, got `{s}`"
            ))),
        }
    }
}

/// Step-decay learning-rate schedule with an optimizer-step budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub rate: f64,
    /// Multiplicative factor applied every `decay_every` units.
    pub decay: f64,
    pub decay_every: usize,
    pub unit: ScheduleUnit,
    /// Number of optimizer steps.
    pub steps: usize,
}

impl Schedule {
    pub fn rate_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let elapsed = match self.unit {
            ScheduleUnit::Step => step,
            ScheduleUnit::Epoch => step / steps_per_epoch.max(1),
        };
        let decays = elapsed / self.decay_every.max(1);
        self.rate * self.decay.powi(decays as i32)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("{name}.rate must be non-negative")));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("{name}.decay must be positive")));
        }
        if self.decay_every == 0 {
            return Err(Error::Config(format!("{name}.decay_every must be positive")));
        }
        Ok(())
    }
}

/// How per-joint distances are combined within a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossReduction {
    /// Mean Euclidean distance over joints.
    Mean,
    /// Summed Euclidean distance over joints.
    Sum,
}

impl fmt::Display for LossReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            _ => Err(Error::Config(format!(
                "loss reduction must be `mean` or `sum`, got `{s}`"
            ))),
        }
    }
}

/// Every architectural and training hyperparameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    /// Output channels of each stride-2 convolution stage.
    pub conv_channels: Vec<usize>,
    /// Append normalized x/y coordinate planes to the encoder input.
    pub coord_channels: bool,
    pub embed_width: usize,
    pub heads: usize,
    pub context_width: usize,
    pub ff_width: usize,
    pub use_positions: bool,
    pub head_hidden: usize,
    pub joints: usize,
    pub unet_nodes: Vec<usize>,
    pub unet_widths: Vec<usize>,
    pub gc_bias: bool,
    /// Starting off-diagonal entry of every learnable adjacency.
    pub adjacency_init: f64,
    pub share_lifter: bool,
    pub alpha: f64,
    pub loss_reduction: LossReduction,
    pub stage1: Schedule,
    pub stage2: Schedule,
    /// Sequences per optimizer step (stage 1 uses all of their frames).
    pub batch_size: usize,
    /// Re-initialize the 2D head and lifter at the start of stage 2.
    pub reinit_stage2: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Abort when the loss exceeds this multiple of its first value.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 5,
            img_h: 32,
            img_w: 32,
            channels: 3,
            conv_channels: vec![16, 32, 32, 64],
            coord_channels: true,
            embed_width: 64,
            heads: 8,
            context_width: 64,
            ff_width: 128,
            use_positions: true,
            head_hidden: 128,
            joints: 21,
            unet_nodes: vec![21, 12, 6, 3],
            unet_widths: vec![32, 64, 128, 128],
            gc_bias: false,
            adjacency_init: 0.01,
            share_lifter: true,
            alpha: 0.1,
            loss_reduction: LossReduction::Mean,
            stage1: Schedule {
                rate: 1e-3,
                decay: 0.1,
                decay_every: 100,
                unit: ScheduleUnit::Epoch,
                steps: 2000,
            },
            stage2: Schedule {
                rate: 1e-3,
                decay: 0.9,
                decay_every: 100,
                unit: ScheduleUnit::Epoch,
                steps: 2000,
            },
            batch_size: 8,
            reinit_stage2: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            divergence_factor: 1e3,
            seed: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v))
        .collect::<Result<Vec<_>>>()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Defaults for `mode`; only the sequence length differs.
    pub fn for_mode(mode: SequenceMode) -> Self {
        Self {
            seq_len: mode.default_len(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        if self.joints != 21 {
            return fail(format!("joints must be 21, got {}", self.joints));
        }
        if self.heads == 0 || self.embed_width % self.heads != 0 {
            return fail(format!(
                "embed_width {} is not divisible by heads {}",
                self.embed_width, self.heads
            ));
        }
        if self.context_width != self.embed_width {
            return fail(format!(
                "context_width {} must equal embed_width {} (residual encoder)",
                self.context_width, self.embed_width
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            s.validate(name)?;
            if s.rate <= 0.0 {
                return fail(format!("{name}.rate must be positive"));
            }
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return fail("conv_channels must list positive stage widths".into());
        }
        if self.unet_nodes.first() != Some(&self.joints) {
            return fail(format!(
                "unet_nodes must start at the joint count {}",
                self.joints
            ));
        }
        if !(self.adjacency_init > 0.0 && self.adjacency_init.is_finite()) {
            return fail("adjacency_init must be positive".into());
        }
        if !self.share_lifter {
            return fail("share_lifter = false is reserved and not supported".into());
        }
        if self.batch_size == 0 || self.img_h < 4 || self.img_w < 4 || self.channels == 0 {
            return fail("batch_size, image size and channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Sets one key from its text form. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seq_len" => self.seq_len = parse(key, v)?,
            "img_h" => self.img_h = parse(key, v)?,
            "img_w" => self.img_w = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "conv_channels" => self.conv_channels = parse_list(key, v)?,
            "coord_channels" => self.coord_channels = parse(key, v)?,
            "embed_width" => self.embed_width = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "context_width" => self.context_width = parse(key, v)?,
            "ff_width" => self.ff_width = parse(key, v)?,
            "use_positions" => self.use_positions = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "joints" => self.joints = parse(key, v)?,
            "unet_nodes" => self.unet_nodes = parse_list(key, v)?,
            "unet_widths" => self.unet_widths = parse_list(key, v)?,
            "gc_bias" => self.gc_bias = parse(key, v)?,
            "adjacency_init" => self.adjacency_init = parse(key, v)?,
            "share_lifter" => self.share_lifter = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "loss_reduction" => self.loss_reduction = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "reinit_stage2" => self.reinit_stage2 = parse(key, v)?,
            "adam.beta1" => self.adam_beta1 = parse(key, v)?,
            "adam.beta2" => self.adam_beta2 = parse(key, v)?,
            "adam.eps" => self.adam_eps = parse(key, v)?,
            "divergence_factor" => self.divergence_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => {
                let (stage, field) = key
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                let s = match stage {
                    "stage1" => &mut self.stage1,
                    "stage2" => &mut self.stage2,
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                };
                match field {
                    "rate" => s.rate = parse(key, v)?,
                    "decay" => s.decay = parse(key, v)?,
                    "decay_every" => s.decay_every = parse(key, v)?,
                    "unit" => s.unit = v.parse()?,
                    "steps" => s.steps = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Serializes every field as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seq_len", self.seq_len.to_string());
        put("img_h", self.img_h.to_string());
        put("img_w", self.img_w.to_string());
        put("channels", self.channels.to_string());
        put("conv_channels", join(&self.conv_channels));
        put("coord_channels", self.coord_channels.to_string());
        put("embed_width", self.embed_width.to_string());
        put("heads", self.heads.to_string());
        put("context_width", self.context_width.to_string());
        put("ff_width", self.ff_width.to_string());
        put("use_positions", self.use_positions.to_string());
        put("head_hidden", self.head_hidden.to_string());
        put("joints", self.joints.to_string());
        put("unet_nodes", join(&self.unet_nodes));
        put("unet_widths", join(&self.unet_widths));
        put("gc_bias", self.gc_bias.to_string());
        put("adjacency_init", self.adjacency_init.to_string());
        put("share_lifter", self.share_lifter.to_string());
        put("alpha", self.alpha.to_string());
        put("loss_reduction", self.loss_reduction.to_string());
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            put(&format!("{name}.rate"), s.rate.to_string());
            put(&format!("{name}.decay"), s.decay.to_string());
            put(&format!("{name}.decay_every"), s.decay_every.to_string());
            put(&format!("{name}.unit"), s.unit.to_string());
            put(&format!("{name}.steps"), s.steps.to_string());
        }
        put("batch_size", self.batch_size.to_string());
        put("reinit_stage2", self.reinit_stage2.to_string());
        put("adam.beta1", self.adam_beta1.to_string());
        put("adam.beta2", self.adam_beta2.to_string());
        put("adam.eps", self.adam_eps.to_string());
        put("divergence_factor", self.divergence_factor.to_string());
        put("seed", self.seed.to_string());
        out
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::for_mode(SequenceMode::Angular);
        c.stage2.unit = ScheduleUnit::Step;
        c.unet_widths = vec![8, 8, 8, 8];
        c.alpha = 0.25;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::from_kv("heads = 4\nhedas = 2\n").unwrap_err();
        assert!(err.to_string().contains("hedas"), "{err}");
        let err = ModelConfig::from_kv("stage3.rate = 1").unwrap_err();
        assert!(err.to_string().contains("stage3.rate"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::for_mode(SequenceMode::Angular).seq_len, 3);
        assert_eq!(ModelConfig::default().heads, 8);
        assert_eq!(ModelConfig::default().alpha, 0.1);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = Schedule {
            rate: 0.001,
            decay: 0.1,
            decay_every: 100,
            unit: ScheduleUnit::Epoch,
            steps: 0,
        };
        assert_eq!(s.rate_at(0, 2), 0.001);
        assert_eq!(s.rate_at(199, 2), 0.001);
        assert!((s.rate_at(200, 2) - 1e-4).abs() < 1e-12);
        let it = Schedule {
            unit: ScheduleUnit::Step,
            decay: 0.95,
            decay_every: 50,
            ..s
        };
        assert!((it.rate_at(120, 7) - 0.001 * 0.95f64.powi(2)).abs() < 1e-15);
    }
}
