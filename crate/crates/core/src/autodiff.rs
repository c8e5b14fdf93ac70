//! Tape-based reverse-mode automatic differentiation over small dense matrices.
//!
//! Every node holds a row-major `rows × cols` value. Operations are recorded
//! in order on a [`Tape`]; [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar node with respect to every node. Model
//! parameters enter through [`Tape::param`], which remembers the [`ParamId`]
//! so gradients can be routed back to a [`ParamStore`].

use crate::scalar::Scalar;

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new(), names: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Grads<T> {
        Grads(self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect())
    }
}

/// Per-parameter gradient accumulators, indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.0 {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data.iter()).map(|g| g.f64() * g.f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|t| t.data.iter().all(|g| g.is_finite()))
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gather { table: Var, indices: Vec<usize> },
    Conv1d { input: Var, weight: Var, kernel: usize, stride: usize, dilation: usize },
    FlipRows(Var),
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    LayerNorm { input: Var, gain: Var, bias: Var, normed: Vec<T>, inv_std: Vec<T> },
    CausalSoftmax { scores: Var, bias: Option<(Var, usize)> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Sum(Var),
    External { input: Var, grad: Vec<T> },
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter; repeated calls on one tape return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul inner dimensions");
        let mut out = Tensor::zeros(x.rows, y.cols);
        matmul_into(&x.data, &y.data, &mut out.data, x.rows, x.cols, y.cols);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_t inner dimensions");
        let mut out = Tensor::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            let xi = x.row(i);
            for j in 0..y.rows {
                out.data[i * y.rows + j] = dot(xi, y.row(j));
            }
        }
        self.push(out, Op::MatMulT(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shapes");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows, y.cols), (1, x.cols), "add_row expects a 1 x cols bias");
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols) {
            row.iter_mut().zip(&y.data).for_each(|(o, &bias)| *o += bias);
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| v * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    /// Which inputs of every `relu` on the tape are positive, in recording order.
    /// Two evaluations with equal patterns lie in the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(_) => Some(n.value.data.iter().map(|&v| v > T::zero())),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Rows of `table` selected by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            assert!(i < t.rows, "gather index {i} out of {} rows", t.rows);
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(indices.len(), t.cols, data);
        self.push(out, Op::Gather { table, indices: indices.to_vec() })
    }

    /// Causal strided dilated 1-D convolution (no bias).
    ///
    /// `input` is `T × C_in`, `weight` is `(kernel·C_in) × C_out` with tap `j`
    /// in rows `j·C_in..(j+1)·C_in`. Output row `t` reads input rows
    /// `stride·t + stride − 1 − j·dilation` (zero when negative), so it never
    /// depends on inputs after the last sample of its stride block.
    pub fn conv1d(&mut self, input: Var, weight: Var, kernel: usize, stride: usize, dilation: usize) -> Var {
        let (x, w) = (self.value(input), self.value(weight));
        let cin = x.cols;
        assert_eq!(w.rows, kernel * cin, "conv weight rows must be kernel * C_in");
        assert!(stride > 0 && x.rows % stride == 0, "input length must be a multiple of the stride");
        let cout = w.cols;
        let t_out = x.rows / stride;
        let mut out = Tensor::zeros(t_out, cout);
        for j in 0..kernel {
            let wj = &w.data[j * cin * cout..(j + 1) * cin * cout];
            for t in 0..t_out {
                let Some(src) = conv_source(t, j, stride, dilation) else { continue };
                let o = &mut out.data[t * cout..(t + 1) * cout];
                vec_mat_acc(x.row(src), wj, o, cout);
            }
        }
        self.push(out, Op::Conv1d { input, weight, kernel, stride, dilation })
    }

    /// Reverses the row order.
    pub fn flip_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in (0..x.rows).rev() {
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::FlipRows(a))
    }

    /// Nearest-neighbour upsampling along rows.
    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * factor);
        for r in 0..x.rows {
            for _ in 0..factor {
                data.extend_from_slice(x.row(r));
            }
        }
        let out = Tensor::new(x.rows * factor, x.cols, data);
        self.push(out, Op::RepeatRows(a, factor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        assert!(parts.iter().all(|&p| self.value(p).rows == rows), "concat row counts");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::new(x.rows, len, data);
        self.push(out, Op::SliceCols { input: a, start })
    }

    /// Row-wise layer normalisation with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Var {
        let eps = T::of(1e-5);
        let (x, g, b) = (self.value(input), self.value(gain), self.value(bias));
        let n = T::of_usize(x.cols);
        let mut normed = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normed.push(h);
                out.push(h * g.data[c] + b.data[c]);
            }
        }
        let out = Tensor::new(x.rows, x.cols, out);
        self.push(out, Op::LayerNorm { input, gain, bias, normed, inv_std })
    }

    /// Row-wise softmax over keys `j ≤ i` of a square score matrix; entries
    /// above the diagonal are exactly zero. With `rel_bias = Some((table, clip))`
    /// the learned `1 × (clip + 1)` table entry `min(i − j, clip)` is added to
    /// each score first.
    pub fn causal_softmax(&mut self, scores: Var, rel_bias: Option<(Var, usize)>) -> Var {
        let s = self.value(scores);
        assert_eq!(s.rows, s.cols, "causal softmax expects square scores");
        let n = s.rows;
        let bias = rel_bias.map(|(b, clip)| {
            let t = self.value(b);
            assert_eq!(t.len(), clip + 1, "relative bias table must have clip + 1 entries");
            (&t.data, clip)
        });
        let mut out = Tensor::zeros(n, n);
        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            logits.clear();
            for j in 0..=i {
                let mut v = s.data[i * n + j];
                if let Some((table, clip)) = bias {
                    v += table[(i - j).min(clip)];
                }
                logits.push(v);
            }
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (j, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                out.data[i * n + j] = e;
                total += e;
            }
            for j in 0..=i {
                out.data[i * n + j] /= total;
            }
        }
        self.push(out, Op::CausalSoftmax { scores, bias: rel_bias })
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])`, a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let l = self.value(logits);
        assert_eq!(targets.len(), l.rows, "one target per logit row");
        assert_eq!(weights.len(), l.rows, "one weight per logit row");
        let mut probs = Vec::with_capacity(l.len());
        let mut loss = T::zero();
        for (r, (&target, &w)) in targets.iter().zip(weights).enumerate() {
            assert!(target < l.cols, "target {target} out of {} classes", l.cols);
            let row = l.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
            if w != T::zero() {
                loss += w * (log_z - row[target]);
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// A scalar computed outside the tape, with its gradient with respect to
    /// `input` supplied by the caller.
    pub fn external(&mut self, input: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(grad.len(), self.value(input).len(), "external gradient shape");
        self.push(Tensor::scalar(value), Op::External { input, grad })
    }

    /// Forward value `forward`, backward identity into `input`.
    pub fn straight_through(&mut self, input: Var, forward: Tensor<T>) -> Var {
        let x = self.value(input);
        assert_eq!((x.rows, x.cols), (forward.rows, forward.cols), "straight-through shape");
        self.push(forward, Op::StraightThrough(input))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.rows, x.cols, y.cols);
                let ga = slot(grads, *a, x.len());
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        ga[i * k + p] += dot(gi, &y.data[p * m..(p + 1) * m]);
                    }
                }
                let gb = slot(grads, *b, y.len());
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        axpy(x.data[i * k + p], gi, &mut gb[p * m..(p + 1) * m]);
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, m, k) = (x.rows, y.rows, x.cols);
                let ga = slot(grads, *a, x.len());
                for i in 0..n {
                    for j in 0..m {
                        axpy(g[i * m + j], y.row(j), &mut ga[i * k..(i + 1) * k]);
                    }
                }
                let gb = slot(grads, *b, y.len());
                for i in 0..n {
                    for j in 0..m {
                        axpy(g[i * m + j], x.row(i), &mut gb[j * k..(j + 1) * k]);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let gb = slot(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y.data[i];
                }
                let gb = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * x.data[i];
                }
            }
            Op::AddRow(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let cols = out.cols;
                let gb = slot(grads, *b, cols);
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
            Op::Relu(a) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if out.data[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let y = out.data[i];
                    ga[i] += g[i] * (T::one() - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let y = out.data[i];
                    ga[i] += g[i] * y * (T::one() - y);
                }
            }
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let cols = t.cols;
                let gt = slot(grads, *table, t.len());
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::Conv1d { input, weight, kernel, stride, dilation } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (cin, cout) = (x.cols, w.cols);
                let t_out = out.rows;
                {
                    let gx = slot(grads, *input, x.len());
                    for j in 0..*kernel {
                        let wj = &w.data[j * cin * cout..(j + 1) * cin * cout];
                        for t in 0..t_out {
                            let Some(src) = conv_source(t, j, *stride, *dilation) else { continue };
                            let gt = &g[t * cout..(t + 1) * cout];
                            let dst = &mut gx[src * cin..(src + 1) * cin];
                            for (ci, d) in dst.iter_mut().enumerate() {
                                *d += dot(gt, &wj[ci * cout..(ci + 1) * cout]);
                            }
                        }
                    }
                }
                let gw = slot(grads, *weight, w.len());
                for j in 0..*kernel {
                    let gwj = &mut gw[j * cin * cout..(j + 1) * cin * cout];
                    for t in 0..t_out {
                        let Some(src) = conv_source(t, j, *stride, *dilation) else { continue };
                        let gt = &g[t * cout..(t + 1) * cout];
                        for (ci, &xv) in x.row(src).iter().enumerate() {
                            axpy(xv, gt, &mut gwj[ci * cout..(ci + 1) * cout]);
                        }
                    }
                }
            }
            Op::FlipRows(a) => {
                let cols = out.cols;
                let rows = out.rows;
                let ga = slot(grads, *a, g.len());
                for r in 0..rows {
                    let src = rows - 1 - r;
                    add_into(&mut ga[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::RepeatRows(a, factor) => {
                let cols = out.cols;
                let ga = slot(grads, *a, g.len() / factor);
                for (r, row) in g.chunks(cols).enumerate() {
                    let src = r / factor;
                    add_into(&mut ga[src * cols..(src + 1) * cols], row);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols;
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let gp = slot(grads, p, rows * cols);
                    for r in 0..rows {
                        add_into(&mut gp[r * cols..(r + 1) * cols], &g[r * total + start..r * total + start + cols]);
                    }
                    start += cols;
                }
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = self.shape(*input);
                let len = out.cols;
                let gi = slot(grads, *input, rows * cols);
                for r in 0..rows {
                    add_into(&mut gi[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::LayerNorm { input, gain, bias, normed, inv_std } => {
                let cols = out.cols;
                let n = T::of_usize(cols);
                let gvals = &self.value(*gain).data;
                {
                    let gi = slot(grads, *input, g.len());
                    let mut dh = vec![T::zero(); cols];
                    for r in 0..out.rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &normed[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dh[c] = gr[c] * gvals[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let dst = &mut gi[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                {
                    let gg = slot(grads, *gain, cols);
                    for r in 0..out.rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                }
                let gb = slot(grads, *bias, cols);
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            Op::CausalSoftmax { scores, bias } => {
                let n = out.rows;
                let mut ds = vec![T::zero(); n * n];
                for i in 0..n {
                    let p = &out.data[i * n..i * n + i + 1];
                    let gi = &g[i * n..i * n + i + 1];
                    let inner = dot(p, gi);
                    for j in 0..=i {
                        ds[i * n + j] = p[j] * (gi[j] - inner);
                    }
                }
                if let Some((table, clip)) = bias {
                    let gt = slot(grads, *table, clip + 1);
                    for i in 0..n {
                        for j in 0..=i {
                            gt[(i - j).min(*clip)] += ds[i * n + j];
                        }
                    }
                }
                add_into(slot(grads, *scores, n * n), &ds);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let cols = self.value(*logits).cols;
                let gl = slot(grads, *logits, probs.len());
                for (r, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    let dst = &mut gl[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dst[c] += scale * probs[r * cols + c];
                    }
                    dst[target] -= scale;
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                slot(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::External { input, grad } => {
                let gi = slot(grads, *input, grad.len());
                axpy(g[0], grad, gi);
            }
            Op::StraightThrough(a) => {
                add_into(slot(grads, *a, g.len()), g);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient on `tape` into `acc`.
    pub fn accumulate(&self, tape: &Tape<T>, acc: &mut Grads<T>) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[idx]) {
                add_into(&mut acc.0[id.0].data, g);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn conv_source(t: usize, tap: usize, stride: usize, dilation: usize) -> Option<usize> {
    (stride * t + stride - 1).checked_sub(tap * dilation)
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut total = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

/// `out += x · W` for one row vector `x` and a row-major `len(x) × cols` matrix.
#[inline]
fn vec_mat_acc<T: Scalar>(x: &[T], w: &[T], out: &mut [T], cols: usize) {
    for (p, &xv) in x.iter().enumerate() {
        if xv != T::zero() {
            axpy(xv, &w[p * cols..(p + 1) * cols], out);
        }
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        vec_mat_acc(&a[i * k..(i + 1) * k], b, &mut out[i * m..(i + 1) * m], m);
    }
}
