//! The end-to-end model: image encoder, sequence encoder (or its fully
//! connected stand-in), 2D joint head and Graph U-Net lifter, plus the two
//! training stages.

pub mod checkpoint;
pub mod encoder;
pub mod loss;
pub mod optim;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::ConvEncoderParams;
pub use loss::{loss_step1, loss_step2};
pub use optim::Adam;
pub use train::{
    ground_truth, predict, train_step1, train_step2, train_step2_ablation, LossRecord, TrainReport,
};

use crate::attention::EncoderBlockParams;
use crate::config::ModelConfig;
use crate::data::JOINTS;
use crate::error::{Error, Result, StageExt};
use crate::graph::GraphUNetParams;
use crate::nn::{self, expect_shape, Bindings, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Name of the one-element tensor recording the last completed stage.
pub const STAGE_MARKER: &str = "meta.stage";

/// Predicted or ground-truth poses of `N` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet<T: Scalar = f32> {
    /// `[N, 21, 2]` pixel coordinates.
    pub joints2d: Tensor<T>,
    /// `[N, 21, 3]` root-relative, bone-normalized coordinates.
    pub joints3d: Tensor<T>,
}

impl<T: Scalar> PoseSet<T> {
    pub fn new(joints2d: Tensor<T>, joints3d: Tensor<T>) -> Result<Self> {
        let n = joints2d.shape().first().copied().unwrap_or(0);
        if joints2d.shape() != [n, JOINTS, 2] || joints3d.shape() != [n, JOINTS, 3] {
            return Err(Error::dim(format!(
                "pose set shapes {:?} and {:?}",
                joints2d.shape(),
                joints3d.shape()
            )));
        }
        if !joints2d.all_finite() || !joints3d.all_finite() {
            return Err(Error::Numeric("pose set holds non-finite values".into()));
        }
        Ok(Self { joints2d, joints3d })
    }

    pub fn len(&self) -> usize {
        self.joints2d.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two-layer MLP from a context vector to 21 image-centered 2D joints.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub prefix: String,
    pub in_width: usize,
    pub hidden: usize,
    pub joints: usize,
}

impl HeadParams {
    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        nn::init_linear(ps, &format!("{}.fc1", self.prefix), self.in_width, self.hidden, true, rng);
        nn::init_linear(ps, &format!("{}.fc2", self.prefix), self.hidden, 2 * self.joints, false, rng);
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        expect_shape(ps, &format!("{}.fc1.weight", self.prefix), &[self.in_width, self.hidden])?;
        expect_shape(ps, &format!("{}.fc2.weight", self.prefix), &[self.hidden, 2 * self.joints])
    }

    /// `[M, L]` context to `[M, 21, 2]` normalized joints.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, c: Var) -> Result<Var> {
        let s = tape.shape(c).to_vec();
        if s.len() != 2 || s[1] != self.in_width {
            return Err(Error::dim(format!(
                "2D head input {s:?}, expected [M, {}]",
                self.in_width
            )));
        }
        let h = nn::linear(tape, b, &format!("{}.fc1", self.prefix), c)?;
        let h = tape.relu(h);
        let z = nn::linear(tape, b, &format!("{}.fc2", self.prefix), h)?;
        tape.reshape(z, [s[0], self.joints, 2])
    }
}

/// Sub-generator seeded from the model seed and a purpose tag.
pub(crate) fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag)
}

/// Parameters and hyperparameters of the whole pipeline.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model for a validated `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config,
            params: ParamSet::new(),
        };
        let mut rng = rng_for(m.config.seed, 0);
        m.encoder().init(&mut m.params, &mut rng);
        nn::init_linear(
            &mut m.params,
            "fc",
            m.config.embed_width,
            m.config.context_width,
            false,
            &mut rng,
        );
        m.sequence()?.init(&mut m.params, &mut rng);
        m.head().init(&mut m.params, &mut rng);
        m.lifter()?.init(&mut m.params, &mut rng);
        m.params.insert(STAGE_MARKER, Tensor::zeros([1]));
        Ok(m)
    }

    pub fn encoder(&self) -> ConvEncoderParams {
        let c = &self.config;
        ConvEncoderParams {
            prefix: "enc".into(),
            img_h: c.img_h,
            img_w: c.img_w,
            channels: c.channels,
            coord_channels: c.coord_channels,
            stages: c.conv_channels.clone(),
            out_width: c.embed_width,
        }
    }

    pub fn sequence(&self) -> Result<EncoderBlockParams> {
        let c = &self.config;
        let mut block = EncoderBlockParams::new("seq", c.embed_width, c.heads, c.seq_len)?;
        block.ff_width = c.ff_width;
        block.use_positions = c.use_positions;
        Ok(block)
    }

    pub fn head(&self) -> HeadParams {
        HeadParams {
            prefix: "head".into(),
            in_width: self.config.context_width,
            hidden: self.config.head_hidden,
            joints: self.config.joints,
        }
    }

    pub fn lifter(&self) -> Result<GraphUNetParams> {
        let c = &self.config;
        let mut g = GraphUNetParams::new("lift", c.unet_nodes.clone(), c.unet_widths.clone(), 2, 3)?;
        g.bias = c.gc_bias;
        g.adjacency_init = c.adjacency_init;
        Ok(g)
    }

    /// Last completed training stage (0 for an untrained model).
    pub fn stage(&self) -> u32 {
        self.params
            .get(STAGE_MARKER)
            .map_or(0, |t| t.data()[0].f64() as u32)
    }

    pub(crate) fn set_stage(&mut self, stage: u32) {
        self.params
            .insert(STAGE_MARKER, Tensor::full([1], T::of(f64::from(stage))));
    }

    /// Checks that every component finds its parameters with the right shapes.
    pub fn validate(&self) -> Result<()> {
        self.encoder().validate(&self.params).stage("image encoder")?;
        expect_shape(
            &self.params,
            "fc.weight",
            &[self.config.embed_width, self.config.context_width],
        )
        .stage("fully connected stand-in")?;
        self.sequence()?.validate(&self.params).stage("sequence encoder")?;
        self.head().validate(&self.params).stage("2D head")?;
        self.lifter()?.validate(&self.params).stage("3D lifter")
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// `(center, half extent)` of the image in pixels, per axis.
    fn pixel_frame(&self) -> ([f64; 2], [f64; 2]) {
        let (w, h) = (self.config.img_w as f64, self.config.img_h as f64);
        ([w / 2.0, h / 2.0], [w / 2.0, h / 2.0])
    }

    /// Pixel coordinates to the image-centered normalized frame of the head.
    pub fn normalize_2d<S: Scalar>(&self, px: &Tensor<S>) -> Tensor<T> {
        let (c, h) = self.pixel_frame();
        let data = px
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::of((v.f64() - c[i % 2]) / h[i % 2]))
            .collect();
        Tensor::new(px.shape().to_vec(), data).expect("same shape")
    }

    /// `[M, 21, 2]` normalized joints to pixels, on the tape.
    pub fn pixels_on_tape(&self, tape: &mut Tape<T>, u: Var) -> Result<Var> {
        let (c, h) = self.pixel_frame();
        let n = tape.value(u).len();
        let shape = tape.shape(u).to_vec();
        let half = tape.constant(shape.clone(), (0..n).map(|i| T::of(h[i % 2])).collect())?;
        let center = tape.constant(shape, (0..n).map(|i| T::of(c[i % 2])).collect())?;
        let scaled = tape.mul(u, half)?;
        tape.add(scaled, center)
    }

    /// Frame embeddings `[M, f]` of prepared encoder input.
    pub fn embed(&self, tape: &mut Tape<T>, b: &Bindings, input: Var) -> Result<Var> {
        self.encoder().forward(tape, b, input).stage("image encoder")
    }

    /// Fully connected stand-in for the sequence encoder, `[M, f]` to `[M, L]`.
    pub fn context_single(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        nn::linear(tape, b, "fc", x).stage("fully connected stand-in")
    }

    /// Sequence context `[S, N, f]` to `[S, N, L]`.
    pub fn context_sequence(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let n = tape.shape(x).get(1).copied().unwrap_or(0);
        let positions: Vec<usize> = (0..n).collect();
        self.sequence()?
            .forward(tape, b, x, &positions, None)
            .stage("sequence encoder")
    }

    /// Context `[M, L]` to normalized 2D joints `[M, 21, 2]` and 3D joints
    /// `[M, 21, 3]`.
    pub fn regress(&self, tape: &mut Tape<T>, b: &Bindings, c: Var) -> Result<(Var, Var)> {
        let u = self.head().forward(tape, b, c).stage("2D head")?;
        let p = self.lifter()?.forward(tape, b, u).stage("3D lifter")?;
        Ok((u, p))
    }

    fn check_frames<S: Scalar>(&self, frames: &Tensor<S>, rank: usize) -> Result<()> {
        let c = &self.config;
        let mut want = vec![c.channels, c.img_h, c.img_w];
        if rank == 4 {
            want.insert(0, c.seq_len);
        }
        if frames.shape() != want {
            return Err(Error::dim(format!(
                "frames of shape {:?}, expected {want:?}",
                frames.shape()
            )));
        }
        Ok(())
    }

    /// Embedding `[1, f]` of one `[3, img_h, img_w]` frame.
    pub fn image_encode(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames(frame, 3)?;
        let input: Tensor<T> = self.encoder().prepare(frame)?;
        nn::evaluate(&self.params, |tape, b| {
            let x = tape.leaf(&input);
            self.embed(tape, b, x)
        })
    }

    /// Normalized image-centered 2D joints `[21, 2]` from one `[1, L]`
    /// context vector.
    pub fn joints2d_head(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        nn::evaluate(&self.params, |tape, b| {
            let x = tape.leaf(c);
            let u = self.head().forward(tape, b, x)?;
            tape.reshape(u, [JOINTS, 2])
        })
    }

    /// Poses of one `[N, 3, img_h, img_w]` sequence through the sequence
    /// encoder.
    pub fn forward_full(&self, frames: &Tensor<T>) -> Result<PoseSet<T>> {
        self.check_frames(frames, 4).stage("input")?;
        let n = self.config.seq_len;
        let input: Tensor<T> = self.encoder().prepare(frames)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let x = tape.leaf(&input);
        let e = self.embed(&mut tape, &b, x)?;
        let e = tape.reshape(e, [1, n, self.config.embed_width])?;
        let c = self.context_sequence(&mut tape, &b, e)?;
        let c = tape.reshape(c, [n, self.config.context_width])?;
        let (u, p) = self.regress(&mut tape, &b, c)?;
        let px = self.pixels_on_tape(&mut tape, u)?;
        PoseSet::new(tape.to_tensor(px), tape.to_tensor(p))
    }

    /// Poses of one `[3, img_h, img_w]` frame on its own, through the fully
    /// connected stand-in. Returns pixel 2D joints and 3D joints.
    pub fn forward_ablation(&self, frame: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_frames(frame, 3).stage("input")?;
        let input: Tensor<T> = self.encoder().prepare(frame)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let x = tape.leaf(&input);
        let e = self.embed(&mut tape, &b, x)?;
        let c = self.context_single(&mut tape, &b, e)?;
        let (u, p) = self.regress(&mut tape, &b, c)?;
        let px = self.pixels_on_tape(&mut tape, u)?;
        let px = tape.reshape(px, [JOINTS, 2])?;
        let p = tape.reshape(p, [JOINTS, 3])?;
        Ok((tape.to_tensor(px), tape.to_tensor(p)))
    }
}

#[cfg(test)]
mod tests;
