//! Reverse-mode automatic differentiation over small vector-valued nodes.
//!
//! Trainable state lives in a [`ParamStore`] of named flat `f64` tensors.
//! A [`Tape`] records one forward evaluation that reads from the store;
//! [`Tape::backward`] walks the record in reverse and accumulates
//! `∂root/∂param` into a [`Gradients`] buffer laid out like the store.
//! Parameters themselves are never copied onto the tape: the parameter ops
//! (`gather`, `gather_mix`, `matvec`, `affine`) read the store directly and
//! scatter their adjoints straight into the gradient buffer.
//!
//! Every op checks operand shapes when it is recorded. There is no implicit
//! broadcasting; `mul_scalar` is the one explicit vector-by-scalar op.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

/// Magnitude floor applied to denominators in [`Tape::div`].
pub const DIV_GUARD: f64 = 1e-12;
/// Argument floor applied in [`Tape::log`].
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be scalar, got length {0}")]
    NonScalarRoot(usize),
    #[error("tape already consumed by a previous backward pass")]
    AlreadyConsumed,
    #[error("unknown node")]
    UnknownNode,
}

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::Shape { op, detail }
}

/// Which learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Network weights (decoder, per-level MLPs, projections).
    Decoder,
    /// Point features and tri-plane grids.
    Features,
}

impl ParamGroup {
    pub fn as_u8(self) -> u8 {
        match self {
            ParamGroup::Decoder => 0,
            ParamGroup::Features => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ParamGroup::Decoder),
            1 => Some(ParamGroup::Features),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u32);

impl TensorId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named flat tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, TensorId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Panics if the name is taken or `data` does not match `shape`.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: ParamGroup,
        data: Vec<f64>,
    ) -> TensorId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: data length does not match shape {shape:?}"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate tensor name {name}"
        );
        let id = TensorId(self.tensors.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.tensors.push(Tensor {
            name,
            shape,
            group,
            data,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).copied()
    }

    #[inline]
    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.index()]
    }

    #[inline]
    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.index()].data
    }

    #[inline]
    pub fn data_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.tensors[id.index()].data
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.tensors.len() as u32).map(TensorId)
    }
}

/// Gradient buffers with the same layout as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: TensorId) -> &[f64] {
        &self.bufs[id.index()]
    }

    #[inline]
    pub fn get_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.bufs[id.index()]
    }

    pub fn fill_zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += other`, element by element.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.bufs
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Gather { tensor: TensorId, offset: usize },
    GatherMix { terms: Range<u32> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    Dot(Var, Var),
    MatVec { weight: TensorId, input: Var },
    Affine { weight: TensorId, bias: TensorId, input: Var },
    Concat { parts: Range<u32> },
    Scale(Var, f64),
    Offset(Var),
    ClampMin(Var, f64),
    MulScalar(Var, Var),
    LinComb { terms: Range<u32> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    start: u32,
    len: u32,
}

/// One forward evaluation, recorded for a single reverse pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    values: Vec<f64>,
    adjoints: Vec<f64>,
    mix_terms: Vec<(TensorId, usize, f64)>,
    comb_terms: Vec<(Var, f64)>,
    var_list: Vec<Var>,
    consumed: bool,
}

type OpResult = Result<Var, TapeError>;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn guard_denominator(d: f64) -> (f64, bool) {
    if d.abs() >= DIV_GUARD {
        (d, false)
    } else if d < 0.0 {
        (-DIV_GUARD, true)
    } else {
        (DIV_GUARD, true)
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            mix_terms: Vec::new(),
            comb_terms: Vec::new(),
            var_list: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every recorded node so the buffers can be reused for a new forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.adjoints.clear();
        self.mix_terms.clear();
        self.comb_terms.clear();
        self.var_list.clear();
        self.consumed = false;
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.idx()];
        &self.values[n.start as usize..(n.start + n.len) as usize]
    }

    #[inline]
    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.idx()].len as usize
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Adjoint of a node after [`Tape::backward`]; empty before.
    pub fn adjoint(&self, v: Var) -> &[f64] {
        if self.adjoints.is_empty() {
            return &[];
        }
        let n = &self.nodes[v.idx()];
        &self.adjoints[n.start as usize..(n.start + n.len) as usize]
    }

    /// Branch taken by every ReLU and clamp element, in recording order.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let (a, lo) = match n.op {
                Op::Relu(a) => (a, 0.0),
                Op::ClampMin(a, lo) => (a, lo),
                _ => continue,
            };
            out.extend(self.value(a).iter().map(|&x| x > lo));
        }
        out
    }

    #[inline]
    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&mut [f64], &[f64])) -> Var {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let (before, out) = self.values.split_at_mut(start);
        fill(out, before);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            start: start as u32,
            len: len as u32,
        });
        id
    }

    #[inline]
    fn range(&self, v: Var) -> Range<usize> {
        let n = &self.nodes[v.idx()];
        n.start as usize..(n.start + n.len) as usize
    }

    fn check(&self, v: Var) -> Result<(), TapeError> {
        if v.idx() < self.nodes.len() {
            Ok(())
        } else {
            Err(TapeError::UnknownNode)
        }
    }

    /// Constant input; receives an adjoint but contributes to no parameter.
    pub fn input(&mut self, data: &[f64]) -> Var {
        self.push_with(Op::Input, data.len(), |out, _| out.copy_from_slice(data))
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(&[value])
    }

    /// Reads `len` consecutive scalars of a tensor starting at `offset`.
    pub fn gather(&mut self, tensor: TensorId, offset: usize, len: usize) -> OpResult {
        let data = self.params.data(tensor);
        if offset + len > data.len() {
            return Err(shape_err(
                "gather",
                format!(
                    "range {}..{} exceeds tensor of length {}",
                    offset,
                    offset + len,
                    data.len()
                ),
            ));
        }
        let src = &data[offset..offset + len];
        Ok(self.push_with(Op::Gather { tensor, offset }, len, |out, _| {
            out.copy_from_slice(src)
        }))
    }

    /// `Σ weight · tensor[offset..offset+len]` over the given terms, with constant weights.
    pub fn gather_mix(&mut self, len: usize, terms: &[(TensorId, usize, f64)]) -> OpResult {
        for &(t, off, _) in terms {
            if off + len > self.params.data(t).len() {
                return Err(shape_err(
                    "gather_mix",
                    format!("term at offset {off} overruns tensor {}", t.0),
                ));
            }
        }
        let begin = self.mix_terms.len() as u32;
        self.mix_terms.extend_from_slice(terms);
        let end = self.mix_terms.len() as u32;
        let params = self.params;
        Ok(self.push_with(
            Op::GatherMix { terms: begin..end },
            len,
            |out, _| {
                for &(t, off, w) in terms {
                    let src = &params.data(t)[off..off + len];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            },
        ))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<usize, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(shape_err(op, format!("lengths {la} and {lb}")));
        }
        Ok(la)
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> OpResult {
        let len = self.binary_shapes(name, a, b)?;
        let (ra, rb) = (self.range(a), self.range(b));
        Ok(self.push_with(op, len, |out, vals| {
            for ((o, x), y) in out.iter_mut().zip(&vals[ra]).zip(&vals[rb]) {
                *o = f(*x, *y);
            }
        }))
    }

    fn elementwise1(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> OpResult {
        self.check(a)?;
        let ra = self.range(a);
        let len = ra.len();
        Ok(self.push_with(op, len, |out, vals| {
            for (o, x) in out.iter_mut().zip(&vals[ra]) {
                *o = f(*x);
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.elementwise2("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.elementwise2("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.elementwise2("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Elementwise `a / b`; denominators with magnitude below [`DIV_GUARD`] are
    /// clamped to `±DIV_GUARD` and pass no gradient to `b`.
    pub fn div(&mut self, a: Var, b: Var) -> OpResult {
        self.elementwise2("div", Op::Div(a, b), a, b, |x, y| x / guard_denominator(y).0)
    }

    pub fn neg(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Neg(a), a, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Exp(a), a, f64::exp)
    }

    /// Natural log with the argument clamped to at least [`LOG_GUARD`].
    pub fn log(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Log(a), a, |x| x.max(LOG_GUARD).ln())
    }

    pub fn relu(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Softplus(a), a, softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> OpResult {
        self.elementwise1(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> OpResult {
        self.elementwise1(Op::Scale(a, s), a, |x| x * s)
    }

    /// Adds a constant to every component.
    pub fn offset(&mut self, a: Var, c: f64) -> OpResult {
        self.elementwise1(Op::Offset(a), a, |x| x + c)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> OpResult {
        self.elementwise1(Op::ClampMin(a, lo), a, |x| x.max(lo))
    }

    pub fn sum(&mut self, a: Var) -> OpResult {
        self.check(a)?;
        let ra = self.range(a);
        Ok(self.push_with(Op::Sum(a), 1, |out, vals| {
            out[0] = vals[ra].iter().sum();
        }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> OpResult {
        self.binary_shapes("dot", a, b)?;
        let (ra, rb) = (self.range(a), self.range(b));
        Ok(self.push_with(Op::Dot(a, b), 1, |out, vals| {
            out[0] = dot4(&vals[ra], &vals[rb]);
        }))
    }

    /// Multiplies every component of `v` by the length-1 node `s`.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> OpResult {
        self.check(v)?;
        self.check(s)?;
        if self.len_of(s) != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scalar operand has length {}", self.len_of(s)),
            ));
        }
        let (rv, rs) = (self.range(v), self.range(s));
        Ok(self.push_with(Op::MulScalar(v, s), rv.len(), |out, vals| {
            let k = vals[rs.start];
            for (o, x) in out.iter_mut().zip(&vals[rv]) {
                *o = x * k;
            }
        }))
    }

    fn matrix_dims(&self, op: &'static str, weight: TensorId, input: Var) -> Result<(usize, usize), TapeError> {
        self.check(input)?;
        let t = self.params.tensor(weight);
        if t.shape.len() != 2 {
            return Err(shape_err(op, format!("{} is not a matrix: {:?}", t.name, t.shape)));
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        if cols != self.len_of(input) {
            return Err(shape_err(
                op,
                format!("{} has {cols} columns, input has length {}", t.name, self.len_of(input)),
            ));
        }
        Ok((rows, cols))
    }

    /// `W · x` for a parameter matrix `W` of shape `[rows, cols]` (row-major).
    pub fn matvec(&mut self, weight: TensorId, input: Var) -> OpResult {
        let (rows, cols) = self.matrix_dims("matvec", weight, input)?;
        let w = self.params.data(weight);
        let ri = self.range(input);
        Ok(self.push_with(Op::MatVec { weight, input }, rows, |out, vals| {
            let x = &vals[ri];
            for (r, o) in out.iter_mut().enumerate() {
                *o = dot4(&w[r * cols..(r + 1) * cols], x);
            }
        }))
    }

    /// `W · x + b` as one node.
    pub fn affine(&mut self, weight: TensorId, bias: TensorId, input: Var) -> OpResult {
        let (rows, cols) = self.matrix_dims("affine", weight, input)?;
        let b = self.params.data(bias);
        if b.len() != rows {
            return Err(shape_err(
                "affine",
                format!("bias length {} for {rows} rows", b.len()),
            ));
        }
        let w = self.params.data(weight);
        let ri = self.range(input);
        Ok(self.push_with(Op::Affine { weight, bias, input }, rows, |out, vals| {
            let x = &vals[ri];
            for (r, o) in out.iter_mut().enumerate() {
                *o = dot4(&w[r * cols..(r + 1) * cols], x) + b[r];
            }
        }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> OpResult {
        for &p in parts {
            self.check(p)?;
        }
        let len: usize = parts.iter().map(|&p| self.len_of(p)).sum();
        let ranges: Vec<Range<usize>> = parts.iter().map(|&p| self.range(p)).collect();
        let begin = self.var_list.len() as u32;
        self.var_list.extend_from_slice(parts);
        let end = self.var_list.len() as u32;
        Ok(self.push_with(Op::Concat { parts: begin..end }, len, |out, vals| {
            let mut at = 0;
            for r in ranges {
                let n = r.len();
                out[at..at + n].copy_from_slice(&vals[r]);
                at += n;
            }
        }))
    }

    /// `Σ weight · node` with constant weights; all nodes must share one length.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> OpResult {
        let Some(&(first, _)) = terms.first() else {
            return Err(shape_err("lin_comb", "no terms".into()));
        };
        self.check(first)?;
        let len = self.len_of(first);
        for &(v, _) in terms {
            self.check(v)?;
            if self.len_of(v) != len {
                return Err(shape_err(
                    "lin_comb",
                    format!("lengths {len} and {}", self.len_of(v)),
                ));
            }
        }
        let ranges: Vec<(Range<usize>, f64)> = terms.iter().map(|&(v, w)| (self.range(v), w)).collect();
        let begin = self.comb_terms.len() as u32;
        self.comb_terms.extend_from_slice(terms);
        let end = self.comb_terms.len() as u32;
        Ok(self.push_with(Op::LinComb { terms: begin..end }, len, |out, vals| {
            for (r, w) in ranges {
                for (o, x) in out.iter_mut().zip(&vals[r]) {
                    *o += w * x;
                }
            }
        }))
    }

    /// Reverse pass from a scalar `root`, accumulating parameter gradients into `grads`.
    ///
    /// A tape supports exactly one backward pass; call [`Tape::clear`] before recording again.
    pub fn backward(&mut self, root: Var, grads: &mut Gradients) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::AlreadyConsumed);
        }
        self.check(root)?;
        let root_len = self.len_of(root);
        if root_len != 1 {
            return Err(TapeError::NonScalarRoot(root_len));
        }
        self.consumed = true;
        self.adjoints.clear();
        self.adjoints.resize(self.values.len(), 0.0);
        let root_start = self.nodes[root.idx()].start as usize;
        self.adjoints[root_start] = 1.0;

        let params = self.params;
        let vals = &self.values[..];
        let nodes = &self.nodes[..];
        let range_of = |v: Var| {
            let n = &nodes[v.idx()];
            n.start as usize..(n.start + n.len) as usize
        };

        for node in nodes[..=root.idx()].iter().rev() {
            let start = node.start as usize;
            let len = node.len as usize;
            let (lower, upper) = self.adjoints.split_at_mut(start);
            let g = &upper[..len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out = &vals[start..start + len];
            match &node.op {
                Op::Input => {}
                Op::Gather { tensor, offset } => {
                    let dst = &mut grads.get_mut(*tensor)[*offset..*offset + len];
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                Op::GatherMix { terms } => {
                    for &(t, off, w) in &self.mix_terms[terms.start as usize..terms.end as usize] {
                        let dst = &mut grads.get_mut(t)[off..off + len];
                        for (d, gi) in dst.iter_mut().zip(g) {
                            *d += w * gi;
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (ra, rb) = (range_of(*a), range_of(*b));
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        lower[rb.start + i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    let (ra, rb) = (range_of(*a), range_of(*b));
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        lower[rb.start + i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (range_of(*a), range_of(*b));
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi * vals[rb.start + i];
                    }
                    for (i, gi) in g.iter().enumerate() {
                        lower[rb.start + i] += gi * vals[ra.start + i];
                    }
                }
                Op::Div(a, b) => {
                    let (ra, rb) = (range_of(*a), range_of(*b));
                    for (i, gi) in g.iter().enumerate() {
                        let (d, clamped) = guard_denominator(vals[rb.start + i]);
                        lower[ra.start + i] += gi / d;
                        if !clamped {
                            lower[rb.start + i] -= gi * vals[ra.start + i] / (d * d);
                        }
                    }
                }
                Op::Neg(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] -= gi;
                    }
                }
                Op::Exp(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi * out[i];
                    }
                }
                Op::Log(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        let x = vals[ra.start + i];
                        if x >= LOG_GUARD {
                            lower[ra.start + i] += gi / x;
                        }
                    }
                }
                Op::Relu(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        if vals[ra.start + i] > 0.0 {
                            lower[ra.start + i] += gi;
                        }
                    }
                }
                Op::Softplus(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi * sigmoid(vals[ra.start + i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Sum(a) => {
                    let ra = range_of(*a);
                    for x in &mut lower[ra] {
                        *x += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (ra, rb) = (range_of(*a), range_of(*b));
                    let n = ra.len();
                    for i in 0..n {
                        lower[ra.start + i] += g[0] * vals[rb.start + i];
                    }
                    for i in 0..n {
                        lower[rb.start + i] += g[0] * vals[ra.start + i];
                    }
                }
                Op::MulScalar(v, s) => {
                    let (rv, rs) = (range_of(*v), range_of(*s));
                    let k = vals[rs.start];
                    let mut acc = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        lower[rv.start + i] += gi * k;
                        acc += gi * vals[rv.start + i];
                    }
                    lower[rs.start] += acc;
                }
                Op::MatVec { weight, input } | Op::Affine { weight, input, .. } => {
                    let ri = range_of(*input);
                    let cols = ri.len();
                    let w = params.data(*weight);
                    let x = &vals[ri.clone()];
                    {
                        let gx = &mut lower[ri];
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &w[r * cols..(r + 1) * cols];
                            for (d, wv) in gx.iter_mut().zip(row) {
                                *d += gr * wv;
                            }
                        }
                    }
                    let gw = grads.get_mut(*weight);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * cols..(r + 1) * cols];
                        for (d, xv) in row.iter_mut().zip(x) {
                            *d += gr * xv;
                        }
                    }
                    if let Op::Affine { bias, .. } = &node.op {
                        for (d, gr) in grads.get_mut(*bias).iter_mut().zip(g) {
                            *d += gr;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for &p in &self.var_list[parts.start as usize..parts.end as usize] {
                        let rp = range_of(p);
                        let n = rp.len();
                        for i in 0..n {
                            lower[rp.start + i] += g[at + i];
                        }
                        at += n;
                    }
                }
                Op::Scale(a, s) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi * s;
                    }
                }
                Op::Offset(a) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        lower[ra.start + i] += gi;
                    }
                }
                Op::ClampMin(a, lo) => {
                    let ra = range_of(*a);
                    for (i, gi) in g.iter().enumerate() {
                        if vals[ra.start + i] > *lo {
                            lower[ra.start + i] += gi;
                        }
                    }
                }
                Op::LinComb { terms } => {
                    for &(v, w) in &self.comb_terms[terms.start as usize..terms.end as usize] {
                        let rv = range_of(v);
                        for (i, gi) in g.iter().enumerate() {
                            lower[rv.start + i] += w * gi;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: Vec<usize>, data: Vec<f64>) -> (ParamStore, TensorId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, shape, ParamGroup::Decoder, data);
        (s, id)
    }

    fn grad_of_scalar_fn(x0: f64, f: impl Fn(&mut Tape, Var) -> Var) -> (f64, f64) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(&[x0]);
        let y = f(&mut tape, x);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(y, &mut grads).unwrap();
        (tape.scalar(y), tape.adjoint(x)[0])
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let (v, d) = grad_of_scalar_fn(0.0, |t, x| t.sigmoid(x).unwrap());
        assert_eq!(v, 0.5);
        assert_eq!(d, 0.25);
    }

    #[test]
    fn softplus_derivative_matches_finite_difference() {
        let x0 = 1.3;
        let (_, d) = grad_of_scalar_fn(x0, |t, x| t.softplus(x).unwrap());
        let h = 1e-5;
        let fd = (softplus(x0 + h) - softplus(x0 - h)) / (2.0 * h);
        assert!(((d - fd) / fd).abs() < 1e-7, "{d} vs {fd}");
        assert!((d - sigmoid(x0)).abs() < 1e-15);
    }

    #[test]
    fn gather_backward_scatters_to_read_index() {
        let (store, w) = store_with("w", vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut tape = Tape::new(&store);
        let g = tape.gather(w, 2, 1).unwrap();
        let s = tape.sum(g).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn squared_residual_matrix_gradient_is_closed_form() {
        let wdata = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let (store, w) = store_with("W", vec![2, 3], wdata.clone());
        let x = [1.0, -2.0, 0.5];
        let y = [0.3, -0.4];
        let mut tape = Tape::new(&store);
        let xv = tape.input(&x);
        let yv = tape.input(&y);
        let wx = tape.matvec(w, xv).unwrap();
        let r = tape.sub(wx, yv).unwrap();
        let loss = tape.dot(r, r).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(loss, &mut grads).unwrap();
        for i in 0..2 {
            let wxi: f64 = (0..3).map(|j| wdata[i * 3 + j] * x[j]).sum();
            for j in 0..3 {
                let expect = 2.0 * (wxi - y[i]) * x[j];
                assert_eq!(grads.get(w)[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", vec![2], ParamGroup::Features, vec![1.0, 2.0]);
        let b = store.insert("b", vec![2], ParamGroup::Features, vec![3.0, 4.0]);
        let mut tape = Tape::new(&store);
        let ga = tape.gather(a, 0, 2).unwrap();
        let _gb = tape.gather(b, 0, 2).unwrap();
        let s = tape.sum(ga).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(a), &[1.0, 1.0]);
        assert_eq!(grads.get(b), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected_at_construction() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[1.0, 2.0]);
        let b = tape.input(&[1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(a, b), Err(TapeError::Shape { .. })));
        assert!(matches!(tape.dot(a, b), Err(TapeError::Shape { .. })));
        assert!(matches!(tape.mul_scalar(a, b), Err(TapeError::Shape { .. })));
    }

    #[test]
    fn non_scalar_root_and_second_backward_fail() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[1.0, 2.0]);
        let mut grads = Gradients::zeros_like(&store);
        assert_eq!(tape.backward(a, &mut grads), Err(TapeError::NonScalarRoot(2)));
        let s = tape.sum(a).unwrap();
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(tape.backward(s, &mut grads), Err(TapeError::AlreadyConsumed));
        tape.clear();
        let a = tape.input(&[1.0]);
        tape.backward(a, &mut grads).unwrap();
    }

    #[test]
    fn guarded_div_and_log_flush_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[1.0]);
        let b = tape.input(&[0.0]);
        let q = tape.div(a, b).unwrap();
        assert_eq!(tape.scalar(q), 1.0 / DIV_GUARD);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(q, &mut grads).unwrap();
        assert_eq!(tape.adjoint(b)[0], 0.0);
        assert_eq!(tape.adjoint(a)[0], 1.0 / DIV_GUARD);

        let mut tape = Tape::new(&store);
        let z = tape.input(&[-3.0]);
        let l = tape.log(z).unwrap();
        assert_eq!(tape.scalar(l), LOG_GUARD.ln());
        tape.backward(l, &mut grads).unwrap();
        assert_eq!(tape.adjoint(z)[0], 0.0);
    }

    #[test]
    fn forward_values_survive_backward() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[0.3, -0.7]);
        let e = tape.exp(a).unwrap();
        let s = tape.sum(e).unwrap();
        let before: Vec<f64> = tape.value(e).to_vec();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(tape.value(e), &before[..]);
        assert_eq!(tape.adjoint(a), &before[..]);
    }

    #[test]
    fn branch_pattern_tracks_relu_and_clamp() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[0.5, -1.0, 0.0]);
        tape.relu(a).unwrap();
        let e = tape.exp(a).unwrap();
        tape.clamp_min(e, 1.0).unwrap();
        let want = vec![true, false, false, true, false, false];
        assert_eq!(tape.branch_pattern(), want);
    }

    /// Central differences over every primitive composed into one scalar.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.insert("w", vec![3, 4], ParamGroup::Decoder, (0..12).map(|i| 0.1 * i as f64 - 0.55).collect());
        let b = store.insert("b", vec![3], ParamGroup::Decoder, vec![0.1, -0.2, 0.05]);
        let f = store.insert("f", vec![2, 4], ParamGroup::Features, vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.4, 0.6, -0.9]);

        let eval = |store: &ParamStore, grads: Option<&mut Gradients>| -> f64 {
            let mut t = Tape::new(store);
            let g0 = t.gather(f, 0, 4).unwrap();
            let mix = t.gather_mix(4, &[(f, 0, 0.25), (f, 4, 0.75)]).unwrap();
            let comb = t.lin_comb(&[(g0, 0.4), (mix, 0.6)]).unwrap();
            let h = t.affine(w, b, comb).unwrap();
            let hr = t.relu(h).unwrap();
            let hs = t.softplus(h).unwrap();
            let sg = t.sigmoid(hs).unwrap();
            let m = t.matvec(w, mix).unwrap();
            let e = t.exp(m).unwrap();
            let lg = t.log(e).unwrap();
            let dv = t.div(sg, e).unwrap();
            let cl = t.clamp_min(lg, -0.2).unwrap();
            let ng = t.neg(cl).unwrap();
            let sub = t.sub(dv, ng).unwrap();
            let mu = t.mul(sub, hr).unwrap();
            let off = t.offset(mu, 0.3).unwrap();
            let sc = t.scale(off, 1.7).unwrap();
            let s1 = t.sum(sc).unwrap();
            let cat = t.concat(&[sg, s1]).unwrap();
            let k = t.mul_scalar(cat, s1).unwrap();
            let d = t.dot(k, cat).unwrap();
            let root = t.add(d, s1).unwrap();
            let v = t.scalar(root);
            if let Some(gr) = grads {
                t.backward(root, gr).unwrap();
            }
            v
        };

        let mut grads = Gradients::zeros_like(&store);
        eval(&store, Some(&mut grads));
        for id in store.ids() {
            for i in 0..store.data(id).len() {
                let theta = store.data(id)[i];
                let h = 1e-5 * theta.abs().max(1.0);
                let mut p = store.clone();
                p.data_mut(id)[i] = theta + h;
                let fp = eval(&p, None);
                p.data_mut(id)[i] = theta - h;
                let fm = eval(&p, None);
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(id)[i];
                if fd.abs() > 1e-8 {
                    assert!(((an - fd) / fd).abs() < 1e-6, "{} [{i}]: {an} vs {fd}", store.tensor(id).name);
                } else {
                    assert!(an.abs() < 1e-7);
                }
            }
        }
    }
}
