//! Graph convolution over a learnable, symmetrically normalized adjacency and
//! the Graph U-Net that lifts 2D joints to 3D.
//!
//! Node features are laid out `[batch, nodes, features]`, so one adjacency or
//! pooling matrix is applied to every item of the batch at once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, expect_shape, Bindings, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `raw` value whose softplus is `value`.
pub fn raw_for(value: f64) -> f64 {
    value.exp_m1().ln()
}

/// Trainable `K×K` adjacency stored as unconstrained `raw` values.
///
/// The positivity map is `Â = softplus(raw) + I`, so every entry is
/// non-negative and every diagonal entry is at least 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableAdjacency {
    pub name: String,
    pub nodes: usize,
    /// Every entry of `softplus(raw)` at initialization. Small values start
    /// `Â` near `I`; large ones mix all nodes evenly from the first step.
    pub init: f64,
}

impl LearnableAdjacency {
    pub fn new(name: impl Into<String>, nodes: usize) -> Self {
        Self {
            name: name.into(),
            nodes,
            init: 0.01,
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        ps.insert(
            self.name.clone(),
            Tensor::full([self.nodes, self.nodes], T::of(raw_for(self.init))),
        );
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        expect_shape(ps, &self.name, &[self.nodes, self.nodes])
    }

    /// `Â = softplus(raw) + I`.
    pub fn with_self_loops<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings) -> Result<Var> {
        let raw = b.var(&self.name)?;
        let pos = tape.softplus(raw);
        let eye = tape.leaf(&Tensor::identity(self.nodes));
        tape.add(pos, eye)
    }

    /// `Ā = D^{-1/2} Â D^{-1/2}` with `D` the row sums of `Â`.
    pub fn normalized<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings) -> Result<Var> {
        let hat = self.with_self_loops(tape, b)?;
        normalize_with_degrees(tape, hat)
    }
}

/// Symmetric degree normalization of an adjacency that already carries its
/// self loops: `Ā_ij = Â_ij / √(d_i d_j)` with `d_i = Σ_j Â_ij`.
pub fn normalize_with_degrees<T: Scalar>(tape: &mut Tape<T>, hat: Var) -> Result<Var> {
    let s = tape.shape(hat).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim(format!("adjacency must be square, got {s:?}")));
    }
    let k = s[0];
    let degree = tape.sum(hat, &[1])?;
    let inv_sqrt = tape.powf(degree, -0.5);
    let col = tape.reshape(inv_sqrt, [k, 1])?;
    let row = tape.reshape(inv_sqrt, [1, k])?;
    let outer = tape.matmul(col, row)?;
    tape.mul(hat, outer)
}

/// Tensor-level [`LearnableAdjacency::normalized`] for a raw matrix.
pub fn normalize_adjacency<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    let s = raw.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim(format!("adjacency must be square, got {s:?}")));
    }
    let adj = LearnableAdjacency::new("adj", s[0]);
    let mut ps = ParamSet::new();
    ps.insert("adj", raw.clone());
    nn::evaluate(&ps, |tape, b| adj.normalized(tape, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One graph convolution `O = σ(Ā X W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GCLayerParams {
    pub prefix: String,
    pub in_features: usize,
    pub out_features: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl GCLayerParams {
    pub fn new(
        prefix: impl Into<String>,
        in_features: usize,
        out_features: usize,
        activation: Activation,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            in_features,
            out_features,
            activation,
            bias: false,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        let w = match self.activation {
            Activation::Relu => nn::he(self.in_features, self.out_features, rng),
            Activation::Identity => nn::glorot(self.in_features, self.out_features, rng),
        };
        ps.insert(self.weight(), w);
        if self.bias {
            ps.insert(self.bias_name(), Tensor::zeros([self.out_features]));
        }
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        expect_shape(ps, &self.weight(), &[self.in_features, self.out_features])?;
        if self.bias {
            expect_shape(ps, &self.bias_name(), &[self.out_features])?;
        }
        Ok(())
    }

    /// `x` is `[K, F]` or `[batch, K, F]`; `adj` is the normalized `[K, K]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var, adj: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x3 = match s.len() {
            2 => tape.reshape(x, [1, s[0], s[1]])?,
            3 => x,
            _ => return Err(Error::dim(format!("graph features of shape {s:?}"))),
        };
        if s[s.len() - 1] != self.in_features {
            return Err(Error::dim(format!(
                "{}: input width {} but layer expects {}",
                self.prefix,
                s[s.len() - 1],
                self.in_features
            )));
        }
        let mixed = tape.node_mix(adj, x3)?;
        let mut out = tape.matmul(mixed, b.var(&self.weight())?)?;
        if self.bias {
            out = tape.add_bias(out, b.var(&self.bias_name())?)?;
        }
        if self.activation == Activation::Relu {
            out = tape.relu(out);
        }
        if s.len() == 2 {
            out = tape.reshape(out, [s[0], self.out_features])?;
        }
        Ok(out)
    }
}

fn lift_rank3<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => Ok((tape.reshape(x, [1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::dim(format!("graph features of shape {s:?}"))),
    }
}

fn node_projection<T: Scalar>(tape: &mut Tape<T>, x: Var, proj: Var) -> Result<Var> {
    let (x3, squeeze) = lift_rank3(tape, x)?;
    let out = tape.node_mix(proj, x3)?;
    if squeeze {
        let s = tape.shape(out).to_vec();
        tape.reshape(out, [s[1], s[2]])
    } else {
        Ok(out)
    }
}

/// Coarsens `[K, F]` node features to `[K', F]` with a learned `[K', K]`
/// projection.
pub fn graph_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, pool: Var) -> Result<Var> {
    let (kp, k) = match tape.shape(pool) {
        [kp, k] => (*kp, *k),
        s => return Err(Error::dim(format!("pooling matrix of shape {s:?}"))),
    };
    if kp >= k {
        return Err(Error::dim(format!("pooling must shrink the graph, got {kp}×{k}")));
    }
    node_projection(tape, x, pool)
}

/// Refines `[K', F]` node features back to `[K, F]` with a learned `[K, K']`
/// projection.
pub fn graph_unpool<T: Scalar>(tape: &mut Tape<T>, x: Var, unpool: Var) -> Result<Var> {
    node_projection(tape, x, unpool)
}

/// Contiguous near-equal partition of `fine` nodes into `coarse` groups.
fn groups(fine: usize, coarse: usize) -> Vec<std::ops::Range<usize>> {
    (0..coarse)
        .map(|g| (g * fine / coarse)..((g + 1) * fine / coarse))
        .collect()
}

/// Encoder-decoder stack of graph convolutions with learned node pooling,
/// mirrored unpooling, and additive skip connections between levels of
/// equal node count.
///
/// Level `l` has `nodes[l]` nodes and `widths[l]` features. The encoder runs
/// a GC layer at every level (the deepest one is the bottleneck); the decoder
/// maps level `l` back to width `widths[l-1]`, unpools to `nodes[l-1]` and adds
/// the encoder features of that level.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphUNetParams {
    pub prefix: String,
    pub nodes: Vec<usize>,
    pub widths: Vec<usize>,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub adjacency_init: f64,
}

impl GraphUNetParams {
    pub fn new(
        prefix: impl Into<String>,
        nodes: Vec<usize>,
        widths: Vec<usize>,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let p = Self {
            prefix: prefix.into(),
            nodes,
            widths,
            in_features,
            out_features,
            bias: false,
            adjacency_init: 0.01,
        };
        p.check_schedule()?;
        Ok(p)
    }

    fn check_schedule(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "Graph U-Net needs one width per node level, got nodes {:?} widths {:?}",
                self.nodes, self.widths
            )));
        }
        if self.nodes.windows(2).any(|w| w[1] >= w[0]) || self.nodes.contains(&0) {
            return Err(Error::Config(format!(
                "pooling schedule {:?} must strictly decrease",
                self.nodes
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("Graph U-Net widths must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self, level: usize) -> LearnableAdjacency {
        LearnableAdjacency {
            init: self.adjacency_init,
            ..LearnableAdjacency::new(format!("{}.adj.{level}", self.prefix), self.nodes[level])
        }
    }

    pub fn pool_name(&self, level: usize) -> String {
        format!("{}.pool.{level}", self.prefix)
    }

    pub fn unpool_name(&self, level: usize) -> String {
        format!("{}.unpool.{level}", self.prefix)
    }

    pub fn encoder_layer(&self, level: usize) -> GCLayerParams {
        let fan_in = if level == 0 {
            self.in_features
        } else {
            self.widths[level - 1]
        };
        let mut l = GCLayerParams::new(
            format!("{}.enc.{level}", self.prefix),
            fan_in,
            self.widths[level],
            Activation::Relu,
        );
        l.bias = self.bias;
        l
    }

    /// Decoder layer at `level ≥ 1`, mapping `widths[level]` to `widths[level-1]`.
    pub fn decoder_layer(&self, level: usize) -> GCLayerParams {
        let mut l = GCLayerParams::new(
            format!("{}.dec.{level}", self.prefix),
            self.widths[level],
            self.widths[level - 1],
            Activation::Relu,
        );
        l.bias = self.bias;
        l
    }

    pub fn output_layer(&self) -> GCLayerParams {
        let mut l = GCLayerParams::new(
            format!("{}.out", self.prefix),
            self.widths[0],
            self.out_features,
            Activation::Identity,
        );
        l.bias = self.bias;
        l
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        for level in 0..self.levels() {
            self.adjacency(level).init(ps);
            self.encoder_layer(level).init(ps, rng);
        }
        for level in 1..self.levels() {
            let (fine, coarse) = (self.nodes[level - 1], self.nodes[level]);
            let mut pool = nn::normal::<T>(&[coarse, fine], 0.01, rng);
            let mut unpool = nn::normal::<T>(&[fine, coarse], 0.01, rng);
            for (g, range) in groups(fine, coarse).into_iter().enumerate() {
                let w = 1.0 / range.len() as f64;
                for j in range {
                    let p = &mut pool.data_mut()[g * fine + j];
                    *p = *p + T::of(w);
                    let u = &mut unpool.data_mut()[j * coarse + g];
                    *u = *u + T::one();
                }
            }
            ps.insert(self.pool_name(level), pool);
            ps.insert(self.unpool_name(level), unpool);
            self.decoder_layer(level).init(ps, rng);
        }
        self.output_layer().init(ps, rng);
    }

    pub fn validate<T: Scalar>(&self, ps: &ParamSet<T>) -> Result<()> {
        self.check_schedule()?;
        for level in 0..self.levels() {
            self.adjacency(level).validate(ps)?;
            self.encoder_layer(level).validate(ps)?;
        }
        for level in 1..self.levels() {
            let (fine, coarse) = (self.nodes[level - 1], self.nodes[level]);
            expect_shape(ps, &self.pool_name(level), &[coarse, fine])?;
            expect_shape(ps, &self.unpool_name(level), &[fine, coarse])?;
            self.decoder_layer(level).validate(ps)?;
        }
        self.output_layer().validate(ps)
    }

    /// Lifts `[K, in]` or `[batch, K, in]` joints to `[.., K, out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, z: Var) -> Result<Var> {
        let (z3, squeeze) = lift_rank3(tape, z)?;
        let s = tape.shape(z3).to_vec();
        if s[1] != self.nodes[0] || s[2] != self.in_features {
            return Err(Error::dim(format!(
                "Graph U-Net expects [{}, {}] joints, got {s:?}",
                self.nodes[0], self.in_features
            )));
        }
        let adj = (0..self.levels())
            .map(|l| self.adjacency(l).normalized(tape, b))
            .collect::<Result<Vec<_>>>()?;

        let mut skips = Vec::with_capacity(self.levels());
        let mut h = self.encoder_layer(0).forward(tape, b, z3, adj[0])?;
        skips.push(h);
        for level in 1..self.levels() {
            h = graph_pool(tape, h, b.var(&self.pool_name(level))?)?;
            h = self.encoder_layer(level).forward(tape, b, h, adj[level])?;
            skips.push(h);
        }
        for level in (1..self.levels()).rev() {
            h = self.decoder_layer(level).forward(tape, b, h, adj[level])?;
            h = graph_unpool(tape, h, b.var(&self.unpool_name(level))?)?;
            h = tape.add(h, skips[level - 1])?;
        }
        let out = self.output_layer().forward(tape, b, h, adj[0])?;
        if squeeze {
            tape.reshape(out, [s[1], self.out_features])
        } else {
            Ok(out)
        }
    }
}
