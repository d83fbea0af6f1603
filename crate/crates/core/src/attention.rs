//! Scaled dot-product attention, multi-head self-attention and the
//! transformer encoder block that turns frame embeddings into context
//! features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, expect_shape, Bindings, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `softmax(Q Kᵀ / √d_k) V`.
///
/// Inputs are `[n, d]` or batched `[batch, n, d]`. When `lengths` is given
/// (one entry per batch item), keys at positions `>= length` receive zero
/// weight. Returns the attended values and the attention weight matrix.
pub fn scaled_dot_product_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    lengths: Option<&[usize]>,
) -> Result<(Var, Var)> {
    let rank = tape.shape(q).len();
    let lift = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        match tape.shape(x).len() {
            2 => {
                let s = tape.shape(x).to_vec();
                tape.reshape(x, [1, s[0], s[1]])
            }
            3 => Ok(x),
            _ => Err(Error::dim(format!("attention input of shape {:?}", tape.shape(x)))),
        }
    };
    let (q3, k3, v3) = (lift(tape, q)?, lift(tape, k)?, lift(tape, v)?);
    let (sq, sk, sv) = (
        tape.shape(q3).to_vec(),
        tape.shape(k3).to_vec(),
        tape.shape(v3).to_vec(),
    );
    if sq[2] != sk[2] {
        return Err(Error::dim(format!(
            "query width {} differs from key width {}",
            sq[2], sk[2]
        )));
    }
    if sk[1] != sv[1] || sq[0] != sk[0] || sk[0] != sv[0] {
        return Err(Error::dim(format!(
            "attention shapes Q{sq:?} K{sk:?} V{sv:?} are inconsistent"
        )));
    }
    let (batch, n_q, n_k) = (sq[0], sq[1], sk[1]);
    let scores = tape.bmm(q3, k3, false, true)?;
    let scaled = tape.scale(scores, T::of(1.0 / (sq[2] as f64).sqrt()));
    let weights = match lengths {
        None => tape.softmax_rows(scaled)?,
        Some(lens) => {
            if lens.len() != batch {
                return Err(Error::dim(format!(
                    "{} sequence lengths for a batch of {batch}",
                    lens.len()
                )));
            }
            let valid: Vec<usize> = lens
                .iter()
                .flat_map(|&l| std::iter::repeat_n(l.min(n_k), n_q))
                .collect();
            tape.softmax_masked(scaled, Some(&valid))?
        }
    };
    let out = tape.bmm(weights, v3, false, false)?;
    if rank == 2 {
        let out = tape.reshape(out, [n_q, sv[2]])?;
        let weights = tape.reshape(weights, [n_q, n_k])?;
        Ok((out, weights))
    } else {
        Ok((out, weights))
    }
}

/// Per-head query/key/value projections plus the output projection of one
/// multi-head self-attention layer.
///
/// Parameters live in a [`ParamSet`] under `{prefix}.q.{h}`, `{prefix}.k.{h}`,
/// `{prefix}.v.{h}` and `{prefix}.out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub out_width: usize,
}

impl AttentionParams {
    pub fn new(
        prefix: impl Into<String>,
        width: usize,
        heads: usize,
        key_dim: usize,
        value_dim: usize,
        out_width: usize,
    ) -> Result<Self> {
        if heads == 0 || key_dim == 0 || value_dim == 0 || width == 0 || out_width == 0 {
            return Err(Error::Config(
                "attention needs at least one head and non-zero widths".into(),
            ));
        }
        Ok(Self {
            prefix: prefix.into(),
            width,
            heads,
            key_dim,
            value_dim,
            out_width,
        })
    }

    /// `d_q = d_k = d_v = width / heads`, output width equal to `width`.
    pub fn split_heads(prefix: impl Into<String>, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {width} is not divisible by {heads} heads"
            )));
        }
        Self::new(prefix, width, heads, width / heads, width / heads, width)
    }

    pub fn query(&self, h: usize) -> String {
        format!("{}.q.{h}", self.prefix)
    }

    pub fn key(&self, h: usize) -> String {
        format!("{}.k.{h}", self.prefix)
    }

    pub fn value(&self, h: usize) -> String {
        format!("{}.v.{h}", self.prefix)
    }

    pub fn output(&self) -> String {
        format!("{}.out", self.prefix)
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        for h in 0..self.heads {
            ps.insert(self.query(h), nn::glorot(self.width, self.key_dim, rng));
            ps.insert(self.key(h), nn::glorot(self.width, self.key_dim, rng));
            ps.insert(self.value(h), nn::glorot(self.width, self.value_dim, rng));
        }
        ps.insert(
            self.output(),
            nn::glorot(self.heads * self.value_dim, self.out_width, rng),
        );
    }

    /// Shape check of every projection, including `d_q == d_k` and the
    /// output projection taking `heads · d_v` inputs.
    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        for h in 0..self.heads {
            let q = ps.require(&self.query(h))?;
            let k = ps.require(&self.key(h))?;
            if q.shape().get(1) != k.shape().get(1) {
                return Err(Error::dim(format!(
                    "head {h}: query width {:?} differs from key width {:?}",
                    q.shape(),
                    k.shape()
                )));
            }
            expect_shape(ps, &self.query(h), &[self.width, self.key_dim])?;
            expect_shape(ps, &self.key(h), &[self.width, self.key_dim])?;
            expect_shape(ps, &self.value(h), &[self.width, self.value_dim])?;
        }
        expect_shape(
            ps,
            &self.output(),
            &[self.heads * self.value_dim, self.out_width],
        )
    }

    /// Multi-head self-attention on `[n, f]` or `[batch, n, f]` input.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        x: Var,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.last() != Some(&self.width) {
            return Err(Error::dim(format!(
                "attention input {s:?} does not have width {}",
                self.width
            )));
        }
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.matmul(x, b.var(&self.query(h))?)?;
            let k = tape.matmul(x, b.var(&self.key(h))?)?;
            let v = tape.matmul(x, b.var(&self.value(h))?)?;
            heads.push(scaled_dot_product_attention(tape, q, k, v, lengths)?.0);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_last(&heads)?
        };
        tape.matmul(cat, b.var(&self.output())?)
    }
}

/// One pre-norm transformer encoder block: learned position embeddings,
/// multi-head self-attention with a residual, and a two-layer feed-forward
/// network with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams {
    pub prefix: String,
    pub attention: AttentionParams,
    pub max_len: usize,
    pub ff_width: usize,
    pub use_positions: bool,
    pub ln_eps: f64,
}

impl EncoderBlockParams {
    /// Block of width `width` with `heads` heads and a `2·width` feed-forward.
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize, max_len: usize) -> Result<Self> {
        let prefix = prefix.into();
        let attention = AttentionParams::split_heads(format!("{prefix}.attn"), width, heads)?;
        Ok(Self {
            prefix,
            attention,
            max_len,
            ff_width: 2 * width,
            use_positions: true,
            ln_eps: 1e-5,
        })
    }

    pub fn width(&self) -> usize {
        self.attention.width
    }

    pub fn positions(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        let f = self.width();
        self.attention.init(ps, rng);
        ps.insert(self.positions(), nn::normal(&[self.max_len, f], 0.1, rng));
        for ln in ["ln1", "ln2"] {
            ps.insert(self.name(&format!("{ln}.gain")), Tensor::full([f], T::one()));
            ps.insert(self.name(&format!("{ln}.bias")), Tensor::zeros([f]));
        }
        nn::init_linear(ps, &self.name("ff1"), f, self.ff_width, true, rng);
        nn::init_linear(ps, &self.name("ff2"), self.ff_width, f, false, rng);
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        let f = self.width();
        if self.attention.out_width != f {
            return Err(Error::dim(format!(
                "attention output width {} must equal block width {f} for the residual",
                self.attention.out_width
            )));
        }
        self.attention.validate(ps)?;
        expect_shape(ps, &self.positions(), &[self.max_len, f])?;
        for ln in ["ln1", "ln2"] {
            expect_shape(ps, &self.name(&format!("{ln}.gain")), &[f])?;
            expect_shape(ps, &self.name(&format!("{ln}.bias")), &[f])?;
        }
        expect_shape(ps, &self.name("ff1.weight"), &[f, self.ff_width])?;
        expect_shape(ps, &self.name("ff2.weight"), &[self.ff_width, f])
    }

    /// Encodes `[n, f]` or `[batch, n, f]`; `positions[i]` is the sequence
    /// index (time step or camera) of row `i`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        x: Var,
        positions: &[usize],
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let f = self.width();
        let (batch, n) = match s.as_slice() {
            [n, w] if *w == f => (1, *n),
            [bt, n, w] if *w == f => (*bt, *n),
            _ => {
                return Err(Error::dim(format!(
                    "encoder input {s:?} does not have width {f}"
                )))
            }
        };
        if n > self.max_len {
            return Err(Error::Capacity(format!(
                "sequence of length {n} exceeds the encoder capacity {}",
                self.max_len
            )));
        }
        if positions.len() != n {
            return Err(Error::dim(format!(
                "{} positions for a sequence of length {n}",
                positions.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::Capacity(format!(
                "position {p} exceeds the encoder capacity {}",
                self.max_len
            )));
        }
        let h0 = if self.use_positions {
            let mut idx = Vec::with_capacity(batch * n * f);
            for _ in 0..batch {
                for &p in positions {
                    idx.extend(p * f..(p + 1) * f);
                }
            }
            let pos = tape.gather(b.var(&self.positions())?, idx, s.clone())?;
            tape.add(x, pos)?
        } else {
            x
        };
        let a = tape.layer_norm(
            h0,
            b.var(&self.name("ln1.gain"))?,
            b.var(&self.name("ln1.bias"))?,
            self.ln_eps,
        )?;
        let m = self.attention.forward(tape, b, a, lengths)?;
        let h1 = tape.add(h0, m)?;
        let c = tape.layer_norm(
            h1,
            b.var(&self.name("ln2.gain"))?,
            b.var(&self.name("ln2.bias"))?,
            self.ln_eps,
        )?;
        let hidden = nn::linear(tape, b, &self.name("ff1"), c)?;
        let hidden = tape.relu(hidden);
        let ff = nn::linear(tape, b, &self.name("ff2"), hidden)?;
        tape.add(h1, ff)
    }
}
