use super::{fault, gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for "no source element" in [`Tape::gather`]; the output is zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sqrt,
    Square,
    Softplus,
    Exp,
    Powf(f64),
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Powf(_) => "powf",
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Reduce {
        a: Var,
        map: Vec<usize>,
        scale: T,
    },
    Softmax {
        a: Var,
        n: usize,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    NodeMix {
        m: Var,
        x: Var,
        batch: usize,
        kout: usize,
        kin: usize,
        f: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { kind, .. } => kind.name(),
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::AddBias { .. } => "add_bias",
            Op::Concat { .. } => "concat",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NodeMix { .. } => "node_mix",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of primitive ops.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Binary { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Unary { a, .. }
            | Op::Reduce { a, .. }
            | Op::Softmax { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a } => vec![*a],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Concat { parts } => parts.iter().map(|p| p.0).collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::NodeMix { m, x, .. } => vec![*m, *x],
        }
    }

    /// Records a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = t.requires_grad();
        v
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Fails with a numeric error if any element of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. `a` may carry leading batch dimensions when it is not
    /// transposed; they are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.len() < 2 || (ta && sa.len() != 2) {
            return Err(Error::dim(format!("matmul of ranks {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta {
            (sa[1], sa[0])
        } else {
            (sa[..sa.len() - 1].iter().product(), sa[sa.len() - 1])
        };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        let shape = if ta {
            vec![m, n]
        } else {
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            s
        };
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched matrix product over rank-3 operands `[batch, rows, cols]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm of shapes {sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "bmm inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    ta,
                    tb,
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Applies a `[kout, kin]` matrix to the node axis of `[batch, kin, f]`,
    /// giving `[batch, kout, f]`.
    pub fn node_mix(&mut self, m: Var, x: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sx = self.shape(x).to_vec();
        if sm.len() != 2 || sx.len() != 3 || sm[1] != sx[1] {
            return Err(Error::dim(format!(
                "node mixing matrix {sm:?} does not fit features {sx:?}"
            )));
        }
        let (kout, kin, batch, f) = (sm[0], sm[1], sx[0], sx[2]);
        let mut out = vec![T::zero(); batch * kout * f];
        {
            let mv = self.value(m);
            let xv = self.value(x);
            for b in 0..batch {
                gemm(
                    false,
                    false,
                    kout,
                    kin,
                    f,
                    mv,
                    &xv[b * kin * f..(b + 1) * kin * f],
                    T::zero(),
                    &mut out[b * kout * f..(b + 1) * kout * f],
                );
            }
        }
        Ok(self.push(
            vec![batch, kout, f],
            out,
            Op::NodeMix {
                m,
                x,
                batch,
                kout,
                kin,
                f,
            },
        ))
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) || nb == 1 {
            self.shape(a).to_vec()
        } else if na == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(Error::dim(format!(
                "element-wise op on shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        let n = na.max(nb);
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<T> = (0..n)
            .map(|i| f(av[if na == 1 { 0 } else { i }], bv[if nb == 1 { 0 } else { i }]))
            .collect();
        Ok(self.push(shape, out, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar { a })
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Square => x * x,
                UnaryKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Powf(p) => x.powf(T::of(p)),
            })
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Unary { kind, a })
    }

    /// ReLU with `relu'(0) = 0`.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// Square root with derivative defined as 0 where the output is 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(UnaryKind::Powf(p), a)
    }

    /// Adds a `[n]` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::dim("bias on a scalar"))?;
        if self.value(b).len() != n || self.shape(b).len() != 1 {
            return Err(Error::dim(format!(
                "bias of shape {:?} for input {sx:?}",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        Ok(self.push(sx, out, Op::AddBias { x, b }))
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::dim(format!(
                "reduction axis {bad} out of range for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        // Output stride per input axis (0 for reduced axes).
        let mut out_stride = vec![0usize; shape.len()];
        let mut s = 1;
        for i in (0..shape.len()).rev() {
            if !axes.contains(&i) {
                out_stride[i] = s;
                s *= shape[i];
            }
        }
        let numel = self.value(a).len();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..numel {
            map.push(counter.iter().zip(&out_stride).map(|(c, s)| c * s).sum());
            for d in (0..shape.len()).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let scale = if mean && count > 0 {
            T::one() / T::of(count as f64)
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&v, &o) in self.value(a).iter().zip(&map) {
            out[o] = out[o] + v;
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        Ok(self.push(out_shape, out, Op::Reduce { a, map, scale }))
    }

    /// Sums over `axes`; an empty axis list returns the input unchanged.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, true)
    }

    // ---- structured ops ---------------------------------------------------

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax over the last axis where row `r` only covers its first
    /// `valid[r]` entries; the remaining outputs are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, valid: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let x = self.value(a);
        let rows = if n == 0 { 0 } else { x.len() / n };
        if let Some(v) = valid {
            if v.len() != rows || v.iter().any(|&l| l == 0 || l > n) {
                return Err(Error::dim(format!(
                    "softmax mask lengths {v:?} for {rows} rows of width {n}"
                )));
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let len = valid.map_or(n, |v| v[r]);
            let row = &x[r * n..r * n + len];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite softmax input in row {r}")));
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * n + j] = e;
                total = total + e;
            }
            for o in &mut out[r * n..r * n + len] {
                *o = *o / total;
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a, n }))
    }

    /// `out[i] = a[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::dim(format!(
                "gather of {} indices into shape {shape:?}",
                idx.len()
            )));
        }
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] })
            .collect();
        Ok(self.push(shape, out, Op::Gather { a, idx }))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape { a }))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!("transpose of shape {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).len() / (r * c).max(1);
        let mut idx = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    idx.push(b * r * c + i * c + j);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        self.gather(a, idx, shape)
    }

    /// Concatenates along the last axis. All leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat of {:?} onto leading shape {lead:?}",
                    s
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(shape, out, Op::Concat { parts }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::dim("layer norm of a scalar"))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "layer norm parameters {:?}/{:?} for width {n}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / n;
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let rs = (var + T::of(eps)).sqrt().recip();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every reachable node that requires
    /// a gradient receives exactly one accumulated gradient buffer.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if fault::flipped(node.op.name()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        if !ta {
                            // dA = G op(B)ᵀ
                            gemm(false, !tb, m, n, k, g, bv, T::one(), ga);
                        } else {
                            // dA (k×m) = op(B) Gᵀ
                            gemm(tb, true, k, n, m, bv, g, T::one(), ga);
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        if !tb {
                            // dB = op(A)ᵀ G
                            gemm(!ta, false, k, m, n, av, g, T::one(), gb);
                        } else {
                            // dB (n×k) = Gᵀ op(A)
                            gemm(true, ta, n, m, k, g, av, T::one(), gb);
                        }
                    });
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if self.wants(a) {
                    accumulate(&mut grads[a.0], batch * sa, |ga| {
                        for i in 0..batch {
                            let gi = &g[i * sg..(i + 1) * sg];
                            let bi = &bv[i * sb..(i + 1) * sb];
                            let out = &mut ga[i * sa..(i + 1) * sa];
                            if !ta {
                                gemm(false, !tb, m, n, k, gi, bi, T::one(), out);
                            } else {
                                gemm(tb, true, k, n, m, bi, gi, T::one(), out);
                            }
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], batch * sb, |gb| {
                        for i in 0..batch {
                            let gi = &g[i * sg..(i + 1) * sg];
                            let ai = &av[i * sa..(i + 1) * sa];
                            let out = &mut gb[i * sb..(i + 1) * sb];
                            if !tb {
                                gemm(!ta, false, k, m, n, ai, gi, T::one(), out);
                            } else {
                                gemm(true, ta, n, m, k, gi, ai, T::one(), out);
                            }
                        }
                    });
                }
            }
            &Op::NodeMix {
                m,
                x,
                batch,
                kout,
                kin,
                f,
            } => {
                let (mv, xv) = (self.value(m), self.value(x));
                if self.wants(m) {
                    accumulate(&mut grads[m.0], kout * kin, |gm| {
                        for b in 0..batch {
                            // dM += G_b X_bᵀ
                            gemm(
                                false,
                                true,
                                kout,
                                f,
                                kin,
                                &g[b * kout * f..(b + 1) * kout * f],
                                &xv[b * kin * f..(b + 1) * kin * f],
                                T::one(),
                                gm,
                            );
                        }
                    });
                }
                if self.wants(x) {
                    accumulate(&mut grads[x.0], batch * kin * f, |gx| {
                        for b in 0..batch {
                            // dX_b = Mᵀ G_b
                            gemm(
                                true,
                                false,
                                kin,
                                kout,
                                f,
                                mv,
                                &g[b * kout * f..(b + 1) * kout * f],
                                T::one(),
                                &mut gx[b * kin * f..(b + 1) * kin * f],
                            );
                        }
                    });
                }
            }
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (na, nb) = (av.len(), bv.len());
                let n = g.len();
                let at = |v: &[T], i: usize| v[if v.len() == 1 { 0 } else { i }];
                if self.wants(a) {
                    accumulate(&mut grads[a.0], na, |ga| {
                        for i in 0..n {
                            let d = match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[i],
                                BinaryKind::Mul => g[i] * at(bv, i),
                            };
                            let j = if na == 1 { 0 } else { i };
                            ga[j] = ga[j] + d;
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], nb, |gb| {
                        for i in 0..n {
                            let d = match kind {
                                BinaryKind::Add => g[i],
                                BinaryKind::Sub => -g[i],
                                BinaryKind::Mul => g[i] * at(av, i),
                            };
                            let j = if nb == 1 { 0 } else { i };
                            gb[j] = gb[j] + d;
                        }
                    });
                }
            }
            &Op::Scale { a, c } => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi * c);
                    });
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi);
                    });
                }
            }
            &Op::Unary { kind, a } => {
                if !self.wants(a) {
                    return;
                }
                let xv = self.value(a);
                let yv = &node.value;
                let half = T::of(0.5);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        let (x, y) = (xv[i], yv[i]);
                        let d = match kind {
                            UnaryKind::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Sqrt => {
                                if y > T::zero() {
                                    half / y
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Square => x + x,
                            UnaryKind::Softplus => T::one() / (T::one() + (-x).exp()),
                            UnaryKind::Exp => y,
                            UnaryKind::Powf(p) => T::of(p) * y / x,
                        };
                        ga[i] = ga[i] + g[i] * d;
                    }
                });
            }
            Op::Reduce { a, map, scale } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], map.len(), |ga| {
                        for (o, &j) in ga.iter_mut().zip(map) {
                            *o = *o + g[j] * *scale;
                        }
                    });
                }
            }
            &Op::Softmax { a, n } => {
                if !self.wants(a) || n == 0 {
                    return;
                }
                let y = &node.value;
                accumulate(&mut grads[a.0], y.len(), |ga| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { a, idx } => {
                if self.wants(*a) {
                    let len = self.value(*a).len();
                    accumulate(&mut grads[a.0], len, |ga| {
                        for (&i, &gi) in idx.iter().zip(g) {
                            if i != GATHER_ZERO {
                                ga[i] = ga[i] + gi;
                            }
                        }
                    });
                }
            }
            &Op::AddBias { x, b } => {
                if self.wants(x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi);
                    });
                }
                if self.wants(b) {
                    let n = self.value(b).len();
                    accumulate(&mut grads[b.0], n, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % n] = gb[i % n] + gi;
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], rows * w, |gp| {
                            for r in 0..rows {
                                for j in 0..w {
                                    gp[r * w + j] = gp[r * w + j] + g[r * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let rows = g.len() / n;
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], n, |gg| {
                        for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % n] = gg[i % n] + gi * h;
                        }
                    });
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], n, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % n] = gb[i % n] + gi;
                        }
                    });
                }
                if self.wants(*x) {
                    let gv = self.value(*gain);
                    let nf = T::of(n as f64);
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        for r in 0..rows {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..n {
                                let d = g[r * n + j] * gv[j];
                                mean_d = mean_d + d;
                                mean_dh = mean_dh + d * xhat[r * n + j];
                            }
                            mean_d = mean_d / nf;
                            mean_dh = mean_dh / nf;
                            for j in 0..n {
                                let d = g[r * n + j] * gv[j];
                                let h = xhat[r * n + j];
                                gx[r * n + j] = gx[r * n + j] + rstd[r] * (d - mean_d - h * mean_dh);
                            }
                        }
                    });
                }
            }
        }
    }
}
