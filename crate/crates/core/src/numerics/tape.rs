//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every primitive appends a node holding its output value. When the tape is
//! recording, the node also keeps the operation and its inputs so that
//! [`Tape::backward`] can replay adjoints in exact reverse order. An
//! inference tape runs the same forward code but keeps no operation records,
//! so tracked and untracked forwards agree bitwise.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::tensor::{numel, ParamId, ParamStore, Tensor};
use crate::numerics::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear sample: up to four weighted taps into a flattened plane.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps<T> {
    pub index: [usize; 4],
    pub weight: [T; 4],
}

/// Axis-aligned rectangle in continuous feature-grid coordinates, where grid
/// point `(row i, col j)` sits at `(x = j, y = i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatVec { w: Var, x: Var, m: usize, k: usize },
    Transpose { a: Var, m: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddCol { a: Var, v: Var, m: usize, n: usize },
    AddRow { a: Var, v: Var, n: usize },
    MulCols { a: Var, w: Var, m: usize, n: usize },
    Outer { u: Var, v: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Softmax { a: Var, n: usize },
    Concat { parts: Vec<Var> },
    HConcat { a: Var, b: Var, rows: usize, p: usize, q: usize },
    RepeatRows { v: Var },
    Reshape { a: Var },
    Slice { a: Var, start: usize },
    StackRows { rows: Vec<Var> },
    IndexRows { a: Var, idx: Vec<usize>, n: usize },
    Sum { a: Var },
    MeanCols { a: Var, n: usize },
    MeanOf { parts: Vec<Var> },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    RoiAlign { x: Var, taps: Vec<BilinearTaps<T>>, channels: usize, plane: usize, bins: usize },
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, classes: usize },
    BceLogits { logits: Var, picks: Vec<(usize, T)> },
    SmoothL1 { pred: Var, rows: Vec<(usize, Vec<T>)>, width: usize, beta: T },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    tracked: bool,
}

/// Record of primitive operations with enough context to replay adjoints.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    params: HashMap<ParamId, Var>,
}

/// Parameter adjoints produced by [`Tape::backward`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum; absent entries behave as zero.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, &b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Adds every present gradient into the matching parameter's `grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn dims2(op: &str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(format!("{op}: expected a matrix, got shape {s:?}"))),
    }
}

fn dims1(op: &str, s: &[usize]) -> Result<usize> {
    match s {
        [n] => Ok(*n),
        _ => Err(Error::shape(format!("{op}: expected a vector, got shape {s:?}"))),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, params: HashMap::new() }
    }

    /// A tape that evaluates forward values only.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false, params: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let tracked = self.recording && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Constant };
        self.nodes.push(Node { value, shape, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input value.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Constant, &[])
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let tracked = self.recording && t.requires_grad;
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: if tracked { Op::Param(id) } else { Op::Constant },
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `w[m×k] · x[k]`
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = dims2("matvec", self.shape(w))?;
        let kx = dims1("matvec", self.shape(x))?;
        if k != kx {
            return Err(Error::shape(format!(
                "matvec: {:?} cannot multiply {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let out = (0..m).map(|i| kernels::dot(&wv[i * k..(i + 1) * k], xv)).collect();
        Ok(self.push(out, vec![m], Op::MatVec { w, x, m, k }, &[w, x]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let av = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(out, vec![n, m], Op::Transpose { a, m, n }, &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        check_same(name, self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((out, self.shape(a).to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, shape, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, shape, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, shape, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, s }, &[a])
    }

    /// `a[m×n] + v·1ᵀ`, adding `v[m]` to every column.
    pub fn add_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = dims2("add_col", self.shape(a))?;
        if dims1("add_col", self.shape(v))? != m {
            return Err(Error::shape(format!(
                "add_col: vector {:?} does not match rows of {:?}",
                self.shape(v),
                self.shape(a)
            )));
        }
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = av.to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x += vv[i]);
        }
        Ok(self.push(out, vec![m, n], Op::AddCol { a, v, m, n }, &[a, v]))
    }

    /// `a[m×n] + 1·vᵀ`, adding `v[n]` to every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = dims2("add_row", self.shape(a))?;
        if dims1("add_row", self.shape(v))? != n {
            return Err(Error::shape(format!(
                "add_row: vector {:?} does not match columns of {:?}",
                self.shape(v),
                self.shape(a)
            )));
        }
        let vv = self.value(v).to_vec();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&vv).for_each(|(x, &y)| *x += y);
        }
        Ok(self.push(out, vec![m, n], Op::AddRow { a, v, n }, &[a, v]))
    }

    /// Scales column `j` of `a[m×n]` by `w[j]`.
    pub fn mul_cols(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = dims2("mul_cols", self.shape(a))?;
        if dims1("mul_cols", self.shape(w))? != n {
            return Err(Error::shape(format!(
                "mul_cols: weights {:?} do not match columns of {:?}",
                self.shape(w),
                self.shape(a)
            )));
        }
        let wv = self.value(w).to_vec();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&wv).for_each(|(x, &y)| *x *= y);
        }
        Ok(self.push(out, vec![m, n], Op::MulCols { a, w, m, n }, &[a, w]))
    }

    /// `u[m] · v[n]ᵀ`
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let m = dims1("outer", self.shape(u))?;
        let n = dims1("outer", self.shape(v))?;
        let uv = self.value(u);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(m * n);
        for &x in uv {
            out.extend(vv.iter().map(|&y| x * y));
        }
        Ok(self.push(out, vec![m, n], Op::Outer { u, v }, &[u, v]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Tanh { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sigmoid { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu { a }, &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax: scalar input"))?;
        if n == 0 {
            return Err(Error::shape("softmax: empty axis"));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for (src, dst) in av.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_into(src, dst);
        }
        Ok(self.push(out, shape, Op::Softmax { a, n }, &[a]))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat: no inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        Ok(self.push(out, vec![len], Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// `[a | b]` for `a[r×p]`, `b[r×q]`.
    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, p) = dims2("hconcat", self.shape(a))?;
        let (rows_b, q) = dims2("hconcat", self.shape(b))?;
        if rows != rows_b {
            return Err(Error::shape(format!(
                "hconcat: row counts differ for {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        Ok(self.push(out, vec![rows, p + q], Op::HConcat { a, b, rows, p, q }, &[a, b]))
    }

    /// Stacks `rows` copies of `v[n]` into `[rows×n]`.
    pub fn repeat_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let n = dims1("repeat_rows", self.shape(v))?;
        if rows == 0 {
            return Err(Error::shape("repeat_rows: zero rows"));
        }
        let vv = self.value(v);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(vv);
        }
        Ok(self.push(out, vec![rows, n], Op::RepeatRows { v }, &[v]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "reshape: {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape { a }, &[a]))
    }

    /// Contiguous range of the flattened value, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(a).len();
        if len == 0 || start + len > total {
            return Err(Error::shape(format!(
                "slice: [{start}, {}) outside {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(out, vec![len], Op::Slice { a, start }, &[a]))
    }

    /// Row `i` of a matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = dims2("row", self.shape(a))?;
        if i >= m {
            return Err(Error::shape(format!("row: index {i} outside {:?}", self.shape(a))));
        }
        self.slice(a, i * n, n)
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| Error::shape("stack_rows: no inputs"))?;
        let n = dims1("stack_rows", self.shape(*first))?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if dims1("stack_rows", self.shape(r))? != n {
                return Err(Error::shape(format!(
                    "stack_rows: row {:?} differs from [{n}]",
                    self.shape(r)
                )));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(out, vec![rows.len(), n], Op::StackRows { rows: rows.to_vec() }, rows))
    }

    /// Gathers rows `idx` of `a[m×n]` into `[|idx|×n]`.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("index_rows", self.shape(a))?;
        if idx.is_empty() {
            return Err(Error::shape("index_rows: no indices"));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::shape(format!("index_rows: row {i} outside {m} rows")));
            }
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        Ok(self.push(out, vec![idx.len(), n], Op::IndexRows { a, idx: idx.to_vec(), n }, &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![1], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of_usize(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Mean over the last axis of `a[m×n]`, giving `[m]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("mean_cols", self.shape(a))?;
        let inv = T::one() / T::of_usize(n);
        let out = self.value(a).chunks(n).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(out, vec![m], Op::MeanCols { a, n }, &[a]))
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("mean_of: no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); self.value(first).len()];
        for &p in parts {
            check_same("mean_of", self.shape(p), &shape)?;
            out.iter_mut().zip(self.value(p)).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::of_usize(parts.len());
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(out, shape, Op::MeanOf { parts: parts.to_vec() }, parts))
    }

    // ---- model primitives -----------------------------------------------

    /// Row lookup `table[ids[t]]` into `[|ids|×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = dims2("embedding", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::shape("embedding: no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("embedding: id {bad} outside table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec(), d }, &[table]))
    }

    /// Single-image convolution `x[C×H×W] ⊛ w[F×C×kh×kw] (+ b[F])`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("conv2d: input must be C×H×W, got {s:?}"))),
        };
        let (f, c2, kh, kw) = match self.shape(w) {
            [f, c, kh, kw] => (*f, *c, *kh, *kw),
            s => return Err(Error::shape(format!("conv2d: kernels must be F×C×kh×kw, got {s:?}"))),
        };
        if c != c2 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} has {c} channels, kernels {:?} expect {c2}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: zero stride"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::shape(format!("conv2d: bias {:?} for {f} filters", self.shape(b))));
            }
        }
        let g = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            filters: f,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let ohw = g.out_len();
        let mut out = vec![T::zero(); f * ohw];
        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            kernels::gemm_acc(self.value(w), self.value(x), &mut out, f, c, ohw);
        } else {
            let mut cols = vec![T::zero(); g.patch_len() * ohw];
            kernels::im2col(self.value(x), &g, &mut cols);
            kernels::gemm_acc(self.value(w), &cols, &mut out, f, g.patch_len(), ohw);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for (plane, &bias) in out.chunks_mut(ohw).zip(bv) {
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, vec![f, g.out_h, g.out_w], Op::Conv2d { x, w, b, g }, &inputs))
    }

    /// Bilinear ROI alignment of `x[C×H×W]`: each rect is split into `bins×bins`
    /// cells sampled once at their centers, with coordinates clamped to the
    /// grid. Output is `[|rects| × (C·bins·bins)]`, channel-major per row.
    pub fn roi_align(&mut self, x: Var, rects: &[GridRect], bins: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("roi_align: input must be C×H×W, got {s:?}"))),
        };
        if rects.is_empty() || bins == 0 {
            return Err(Error::shape("roi_align: no rois or zero bins"));
        }
        let mut taps = Vec::with_capacity(rects.len() * bins * bins);
        for r in rects {
            if !(r.x2 > r.x1 && r.y2 > r.y1) || ![r.x1, r.y1, r.x2, r.y2].iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!("roi_align: degenerate roi {r:?}")));
            }
            let bw = (r.x2 - r.x1) / bins as f64;
            let bh = (r.y2 - r.y1) / bins as f64;
            for by in 0..bins {
                for bx in 0..bins {
                    let sx = r.x1 + (bx as f64 + 0.5) * bw;
                    let sy = r.y1 + (by as f64 + 0.5) * bh;
                    taps.push(bilinear_taps::<T>(sx, sy, h, w));
                }
            }
        }
        let plane = h * w;
        let per = bins * bins;
        let xv = self.value(x);
        let mut out = vec![T::zero(); rects.len() * c * per];
        for (ri, row) in out.chunks_mut(c * per).enumerate() {
            let rtaps = &taps[ri * per..(ri + 1) * per];
            for ch in 0..c {
                let src = &xv[ch * plane..(ch + 1) * plane];
                for (o, t) in row[ch * per..(ch + 1) * per].iter_mut().zip(rtaps) {
                    *o = (0..4).map(|q| t.weight[q] * src[t.index[q]]).sum();
                }
            }
        }
        let shape = vec![rects.len(), c * per];
        Ok(self.push(out, shape, Op::RoiAlign { x, taps, channels: c, plane, bins }, &[x]))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy over the listed `(row, target class)` pairs
    /// of `logits[n×classes]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[(usize, usize)]) -> Result<Var> {
        let (n, classes) = dims2("cross_entropy", self.shape(logits))?;
        if rows.is_empty() {
            return Err(Error::contract("cross_entropy: no rows selected"));
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for &(r, t) in rows {
            if r >= n || t >= classes {
                return Err(Error::shape(format!(
                    "cross_entropy: (row {r}, class {t}) outside {n}×{classes}"
                )));
            }
            let row = &lv[r * classes..(r + 1) * classes];
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = total / T::of_usize(rows.len());
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, rows: rows.to_vec(), classes },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits over `(index, target)` picks.
    pub fn bce_with_logits(&mut self, logits: Var, picks: &[(usize, T)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(Error::contract("bce_with_logits: nothing selected"));
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for &(i, y) in picks {
            let x = *lv
                .get(i)
                .ok_or_else(|| Error::shape(format!("bce_with_logits: index {i} outside {}", lv.len())))?;
            total += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        let loss = total / T::of_usize(picks.len());
        Ok(self.push(vec![loss], vec![1], Op::BceLogits { logits, picks: picks.to_vec() }, &[logits]))
    }

    /// Smooth-L1 between rows of `pred[n×width]` and fixed targets, summed
    /// over the row and averaged over the listed rows.
    pub fn smooth_l1(&mut self, pred: Var, rows: &[(usize, Vec<T>)], beta: T) -> Result<Var> {
        let (n, width) = dims2("smooth_l1", self.shape(pred))?;
        if rows.is_empty() {
            return Err(Error::contract("smooth_l1: no rows selected"));
        }
        let pv = self.value(pred);
        let mut total = T::zero();
        for (r, target) in rows {
            if *r >= n || target.len() != width {
                return Err(Error::shape(format!(
                    "smooth_l1: row {r} / target width {} against {n}×{width}",
                    target.len()
                )));
            }
            for (&p, &t) in pv[r * width..(r + 1) * width].iter().zip(target) {
                let d = (p - t).abs();
                total += if d < beta { T::of(0.5) * d * d / beta } else { d - T::of(0.5) * beta };
            }
        }
        let loss = total / T::of_usize(rows.len());
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SmoothL1 { pred, rows: rows.to_vec(), width, beta },
            &[pred],
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Replays adjoints from the scalar `loss` back to every tracked parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let num_params = self.params.keys().map(|id| id.0 + 1).max().unwrap_or(0);
        let mut out = Gradients::empty(num_params);
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(out);
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                out.grads[id.0] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(adj, *a) {
                    kernels::gemm_nt_acc(g, bv, ga, *m, *n, *k);
                }
                if let Some(gb) = self.grad_slot(adj, *b) {
                    kernels::gemm_tn_acc(av, g, gb, *k, *m, *n);
                }
            }
            Op::MatVec { w, x, m, k } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                if let Some(gw) = self.grad_slot(adj, *w) {
                    for i in 0..*m {
                        let gi = g[i];
                        gw[i * k..(i + 1) * k].iter_mut().zip(xv).for_each(|(o, &xj)| *o += gi * xj);
                    }
                }
                if let Some(gx) = self.grad_slot(adj, *x) {
                    kernels::gemm_tn_acc(wv, g, gx, *k, *m, 1);
                }
            }
            Op::Transpose { a, m, n } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for i in 0..*m {
                        for j in 0..*n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_slot(adj, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if let Some(gb) = self.grad_slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &d)| *o -= d);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (&d, &y))| *o += d * y);
                }
                if let Some(gb) = self.grad_slot(adj, *b) {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&d, &x))| *o += d * x);
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d * *s);
                }
            }
            Op::AddCol { a, v, m, n } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if let Some(gv) = self.grad_slot(adj, *v) {
                    for i in 0..*m {
                        gv[i] += g[i * n..(i + 1) * n].iter().copied().sum::<T>();
                    }
                }
            }
            Op::AddRow { a, v, n } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if let Some(gv) = self.grad_slot(adj, *v) {
                    for row in g.chunks(*n) {
                        gv.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::MulCols { a, w, m, n } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for i in 0..*m {
                        for j in 0..*n {
                            ga[i * n + j] += g[i * n + j] * wv[j];
                        }
                    }
                }
                if let Some(gw) = self.grad_slot(adj, *w) {
                    for i in 0..*m {
                        for j in 0..*n {
                            gw[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::Outer { u, v } => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let n = vv.len();
                if let Some(gu) = self.grad_slot(adj, *u) {
                    for (i, o) in gu.iter_mut().enumerate() {
                        *o += kernels::dot(&g[i * n..(i + 1) * n], vv);
                    }
                }
                if let Some(gv) = self.grad_slot(adj, *v) {
                    for (i, &ui) in uv.iter().enumerate() {
                        gv.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(o, &d)| *o += d * ui);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for ((o, &d), &t) in ga.iter_mut().zip(g).zip(y) {
                        *o += d * (T::one() - t * t);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for ((o, &d), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o += d * s * (T::one() - s);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for ((o, &d), &r) in ga.iter_mut().zip(g).zip(y) {
                        if r > T::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::Softmax { a, n } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for ((go, gr), yr) in ga.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                        let inner = kernels::dot(gr, yr);
                        for ((o, &d), &p) in go.iter_mut().zip(gr).zip(yr) {
                            *o += p * (d - inner);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.grad_slot(adj, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, &d)| *o += d);
                    }
                    off += len;
                }
            }
            Op::HConcat { a, b, rows, p, q } => {
                let w = p + q;
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for r in 0..*rows {
                        ga[r * p..(r + 1) * p].iter_mut().zip(&g[r * w..r * w + p]).for_each(|(o, &d)| *o += d);
                    }
                }
                if let Some(gb) = self.grad_slot(adj, *b) {
                    for r in 0..*rows {
                        gb[r * q..(r + 1) * q]
                            .iter_mut()
                            .zip(&g[r * w + p..(r + 1) * w])
                            .for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::RepeatRows { v } => {
                if let Some(gv) = self.grad_slot(adj, *v) {
                    let n = gv.len();
                    for row in g.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
            }
            Op::Slice { a, start } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga[*start..*start + g.len()].iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
            }
            Op::StackRows { rows } => {
                let n = g.len() / rows.len();
                for (i, r) in rows.iter().enumerate() {
                    if let Some(gr) = self.grad_slot(adj, *r) {
                        gr.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::IndexRows { a, idx, n } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i * n..(i + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(adj, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MeanCols { a, n } => {
                let inv = T::one() / T::of_usize(*n);
                if let Some(ga) = self.grad_slot(adj, *a) {
                    for (row, &d) in ga.chunks_mut(*n).zip(g) {
                        row.iter_mut().for_each(|o| *o += d * inv);
                    }
                }
            }
            Op::MeanOf { parts } => {
                let inv = T::one() / T::of_usize(parts.len());
                for p in parts {
                    if let Some(gp) = self.grad_slot(adj, *p) {
                        gp.iter_mut().zip(g).for_each(|(o, &d)| *o += d * inv);
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if let Some(gt) = self.grad_slot(adj, *table) {
                    for (t, &i) in ids.iter().enumerate() {
                        gt[i * d..(i + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Conv2d { x, w, b, g: geom } => self.conv_backward(*x, *w, *b, geom, g, adj),
            Op::RoiAlign { x, taps, channels, plane, bins } => {
                if let Some(gx) = self.grad_slot(adj, *x) {
                    let per = bins * bins;
                    for (ri, grow) in g.chunks(channels * per).enumerate() {
                        let rtaps = &taps[ri * per..(ri + 1) * per];
                        for ch in 0..*channels {
                            let dst = &mut gx[ch * plane..(ch + 1) * plane];
                            for (&d, t) in grow[ch * per..(ch + 1) * per].iter().zip(rtaps) {
                                for q in 0..4 {
                                    dst[t.index[q]] += d * t.weight[q];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, rows, classes } => {
                let lv = self.value(*logits);
                if let Some(gl) = self.grad_slot(adj, *logits) {
                    let scale = g[0] / T::of_usize(rows.len());
                    let mut p = vec![T::zero(); *classes];
                    for &(r, t) in rows {
                        kernels::softmax_into(&lv[r * classes..(r + 1) * classes], &mut p);
                        p[t] -= T::one();
                        gl[r * classes..(r + 1) * classes]
                            .iter_mut()
                            .zip(&p)
                            .for_each(|(o, &v)| *o += scale * v);
                    }
                }
            }
            Op::BceLogits { logits, picks } => {
                let lv = self.value(*logits);
                if let Some(gl) = self.grad_slot(adj, *logits) {
                    let scale = g[0] / T::of_usize(picks.len());
                    for &(i, yv) in picks {
                        gl[i] += scale * (kernels::sigmoid(lv[i]) - yv);
                    }
                }
            }
            Op::SmoothL1 { pred, rows, width, beta } => {
                let pv = self.value(*pred);
                if let Some(gp) = self.grad_slot(adj, *pred) {
                    let scale = g[0] / T::of_usize(rows.len());
                    for (r, target) in rows {
                        for c in 0..*width {
                            let diff = pv[r * width + c] - target[c];
                            let d = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                            gp[r * width + c] += scale * d;
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let ohw = geom.out_len();
        let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
        if let Some(b) = b {
            if let Some(gb) = self.grad_slot(adj, b) {
                for (o, plane) in gb.iter_mut().zip(g.chunks(ohw)) {
                    *o += plane.iter().copied().sum::<T>();
                }
            }
        }
        let need_w = self.nodes[w.0].tracked;
        let need_x = self.nodes[x.0].tracked;
        if pointwise {
            if need_w {
                let xv = self.value(x);
                let gw = self.grad_slot(adj, w).expect("tracked");
                kernels::gemm_nt_acc(g, xv, gw, geom.filters, ohw, geom.channels);
            }
            if need_x {
                let wv = self.value(w);
                let gx = self.grad_slot(adj, x).expect("tracked");
                kernels::gemm_tn_acc(wv, g, gx, geom.channels, geom.filters, ohw);
            }
            return;
        }
        if need_w {
            let mut cols = vec![T::zero(); geom.patch_len() * ohw];
            kernels::im2col(self.value(x), geom, &mut cols);
            let gw = self.grad_slot(adj, w).expect("tracked");
            kernels::gemm_nt_acc(g, &cols, gw, geom.filters, ohw, geom.patch_len());
        }
        if need_x {
            let wv = self.value(w);
            let mut gcols = vec![T::zero(); geom.patch_len() * ohw];
            kernels::gemm_tn_acc(wv, g, &mut gcols, geom.patch_len(), geom.filters, ohw);
            let gx = self.grad_slot(adj, x).expect("tracked");
            kernels::col2im_acc(&gcols, geom, gx);
        }
    }
}

/// Bilinear taps for sampling point `(x, y)` on an `h×w` grid with edge clamping.
pub fn bilinear_taps<T: Real>(x: f64, y: f64, h: usize, w: usize) -> BilinearTaps<T> {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    BilinearTaps {
        index: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        weight: [
            T::of((1.0 - fy) * (1.0 - fx)),
            T::of((1.0 - fy) * fx),
            T::of(fy * (1.0 - fx)),
            T::of(fy * fx),
        ],
    }
}
