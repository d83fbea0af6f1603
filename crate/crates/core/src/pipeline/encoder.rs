//! Per-frame image encoder: stride-2 3×3 convolutions, global average
//! pooling and a linear projection to the embedding width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, expect_shape, Bindings, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var, GATHER_ZERO};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoderParams {
    pub prefix: String,
    pub img_h: usize,
    pub img_w: usize,
    /// Color channels of the frames.
    pub channels: usize,
    /// Append x and y coordinate planes in `[-1, 1]` to the input.
    pub coord_channels: bool,
    /// Output channels of each convolution stage.
    pub stages: Vec<usize>,
    pub out_width: usize,
}

fn halve(n: usize) -> usize {
    (n + 1) / 2
}

impl ConvEncoderParams {
    pub fn input_channels(&self) -> usize {
        self.channels + if self.coord_channels { 2 } else { 0 }
    }

    fn conv(&self, i: usize) -> String {
        format!("{}.conv{i}", self.prefix)
    }

    fn proj(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        let mut c_in = self.input_channels();
        for (i, &c) in self.stages.iter().enumerate() {
            nn::init_linear(ps, &self.conv(i), 9 * c_in, c, true, rng);
            c_in = c;
        }
        nn::init_linear(ps, &self.proj(), c_in, self.out_width, false, rng);
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        let mut c_in = self.input_channels();
        for (i, &c) in self.stages.iter().enumerate() {
            expect_shape(ps, &format!("{}.weight", self.conv(i)), &[9 * c_in, c])?;
            expect_shape(ps, &format!("{}.bias", self.conv(i)), &[c])?;
            c_in = c;
        }
        expect_shape(ps, &format!("{}.weight", self.proj()), &[c_in, self.out_width])?;
        expect_shape(ps, &format!("{}.bias", self.proj()), &[self.out_width])
    }

    /// Converts `[M, C, H, W]` frames (or one `[C, H, W]` frame) to the
    /// channel-last encoder input, appending coordinate planes if enabled.
    pub fn prepare<T: Scalar, S: Scalar>(&self, frames: &Tensor<S>) -> Result<Tensor<T>> {
        let s = frames.shape();
        let (m, c, h, w) = match *s {
            [c, h, w] => (1, c, h, w),
            [m, c, h, w] => (m, c, h, w),
            _ => return Err(Error::dim(format!("frames of shape {s:?}"))),
        };
        if (c, h, w) != (self.channels, self.img_h, self.img_w) {
            return Err(Error::dim(format!(
                "frame of shape [{c}, {h}, {w}], encoder expects [{}, {}, {}]",
                self.channels, self.img_h, self.img_w
            )));
        }
        let ci = self.input_channels();
        let src = frames.data();
        let mut out = Vec::with_capacity(m * h * w * ci);
        for f in 0..m {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out.push(T::of(src[((f * c + ch) * h + y) * w + x].f64()));
                    }
                    if self.coord_channels {
                        out.push(T::of((2 * x + 1) as f64 / w as f64 - 1.0));
                        out.push(T::of((2 * y + 1) as f64 / h as f64 - 1.0));
                    }
                }
            }
        }
        Tensor::new(vec![m, h, w, ci], out)
    }

    /// Embeds prepared `[M, H, W, C']` input into `[M, out_width]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [self.img_h, self.img_w, self.input_channels()] {
            return Err(Error::dim(format!(
                "encoder input {s:?}, expected [M, {}, {}, {}]",
                self.img_h,
                self.img_w,
                self.input_channels()
            )));
        }
        let (m, mut h, mut w, mut c) = (s[0], s[1], s[2], s[3]);
        let mut cur = x;
        for (i, &c_out) in self.stages.iter().enumerate() {
            let (ho, wo) = (halve(h), halve(w));
            let cols = tape.gather(cur, im2col(m, h, w, c), [m * ho * wo, 9 * c])?;
            let y = nn::linear(tape, b, &self.conv(i), cols)?;
            let y = tape.relu(y);
            cur = tape.reshape(y, [m, ho, wo, c_out])?;
            (h, w, c) = (ho, wo, c_out);
        }
        let pooled = tape.mean(cur, &[1, 2])?;
        nn::linear(tape, b, &self.proj(), pooled)
    }
}

/// Gather indices turning `[m, h, w, c]` into rows of 3×3 patches for a
/// stride-2 convolution with one pixel of zero padding. Each row holds the
/// nine taps in row-major order, channels innermost.
fn im2col(m: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let (ho, wo) = (halve(h), halve(w));
    let mut idx = Vec::with_capacity(m * ho * wo * 9 * c);
    for f in 0..m {
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let y = (2 * oy + dy) as isize - 1;
                        let x = (2 * ox + dx) as isize - 1;
                        let inside = (0..h as isize).contains(&y) && (0..w as isize).contains(&x);
                        for ch in 0..c {
                            idx.push(if inside {
                                ((f * h + y as usize) * w + x as usize) * c + ch
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}
