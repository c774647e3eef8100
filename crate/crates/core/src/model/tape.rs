//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Batched quantities are laid out feature-major: rows are features and
//! columns are batch items. A [`Tape`] records every operation of one
//! forward pass; [`Tape::backward`] then accumulates gradients for the
//! model parameters that were read through it.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ModelParams;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(usize),
    /// Columns of an embedding parameter.
    Gather { param: usize, ids: Vec<u32> },
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a` plus a column vector broadcast over columns.
    AddCol(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    /// `a` scaled column-wise by a `1 x n` row.
    MulRow(Var, Var),
    /// Column-wise `a * m + b * (1 - m)` for a 0/1 (or fractional) mask `m`.
    Blend { a: Var, b: Var, mask: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Column gather; `None` yields a zero column.
    SelectCols { x: Var, index: Vec<Option<usize>> },
    Reshape(Var),
    Transpose(Var),
    /// `m x (blocks * n)` to `m x n` by summing the column blocks.
    SumColBlocks { x: Var, blocks: usize },
    /// Softmax down each column over its first `valid[c]` rows; the
    /// remaining rows are zero.
    MaskedSoftmaxCols { x: Var, valid: Vec<usize> },
    /// Fused LSTM cell. Input: gate pre-activations (i, f, g, o stacked,
    /// `4k x n`) and the previous cell state. Output: `[h; c]`.
    LstmCell { gates: Var, c_prev: Var },
    CausalDots(CausalDots),
    CausalWeightedSum { h: Var, w: Var, batch: usize, steps: usize },
    /// Summed negative log-likelihood of the target rows of a column-wise
    /// softmax, times `scale`. Columns with no target are skipped.
    SoftmaxNll { logits: Var, targets: Vec<Option<usize>>, scale: f64 },
}

/// Pairwise dot products between step `t` and every earlier step `j < t`
/// of the same sequence. Inputs are step-major (`column = t * batch + i`);
/// the output row `j` of column `t * batch + i` holds `q[t,i] . k[j,i]`.
/// Rows at or beyond `t`, or for padded steps, are zero.
struct CausalDots {
    q: Var,
    k: Var,
    batch: usize,
    steps: usize,
    lens: Vec<usize>,
}

struct Node {
    value: Mat,
    op: Op,
    /// Activations kept for the backward pass of fused ops.
    cache: Option<Mat>,
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

/// Parameter gradients in [`ModelParams`] order.
pub type Grads = Vec<Mat>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, index: usize) -> Var {
        let value = self.params.value(index).clone();
        self.push(value, Op::Param(index))
    }

    pub fn gather(&mut self, param: usize, ids: Vec<u32>) -> Var {
        let table = self.params.value(param);
        let mut out = Mat::zeros((table.nrows(), ids.len()));
        for (c, &id) in ids.iter().enumerate() {
            out.column_mut(c).assign(&table.column(id as usize));
        }
        self.push(out, Op::Gather { param, ids })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = self.value(a) + self.value(col);
        self.push(v, Op::AddCol(a, col))
    }

    /// `w x + b` for a weight matrix, input and bias column.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matmul(w, x);
        self.add_col(wx, b)
    }

    /// `w [x_1; x_2; ...] + b` without stacking the inputs, so constant
    /// parts never receive an input gradient.
    pub fn affine_split(&mut self, w: Var, parts: &[Var], b: Var) -> Var {
        if let [x] = parts {
            return self.affine(w, *x, b);
        }
        let mut start = 0;
        let mut sum: Option<Var> = None;
        for &x in parts {
            let rows = self.shape(x).0;
            let wx = self.slice_cols(w, start, start + rows);
            start += rows;
            let y = self.matmul(wx, x);
            sum = Some(match sum {
                Some(acc) => self.add(acc, y),
                None => y,
            });
        }
        self.add_col(sum.expect("at least one part"), b)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Const)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn blend(&mut self, a: Var, b: Var, mask: Vec<f64>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut v = va.clone();
        Zip::from(v.axis_iter_mut(Axis(1)))
            .and(vb.axis_iter(Axis(1)))
            .and(&mask)
            .for_each(|mut col, bcol, &m| {
                if m != 1.0 {
                    col.zip_mut_with(&bcol, |x, &y| *x = *x * m + y * (1.0 - m));
                }
            });
        self.push(v, Op::Blend { a, b, mask })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn select_cols(&mut self, x: Var, index: Vec<Option<usize>>) -> Var {
        let src = self.value(x);
        let mut v = Mat::zeros((src.nrows(), index.len()));
        for (c, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                v.column_mut(c).assign(&src.column(i));
            }
        }
        self.push(v, Op::SelectCols { x, index })
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), data).expect("element count preserved");
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_col_blocks(&mut self, x: Var, blocks: usize) -> Var {
        let src = self.value(x);
        let n = src.ncols() / blocks;
        let mut v = Mat::zeros((src.nrows(), n));
        for b in 0..blocks {
            v += &src.slice(s![.., b * n..(b + 1) * n]);
        }
        self.push(v, Op::SumColBlocks { x, blocks })
    }

    pub fn masked_softmax_cols(&mut self, x: Var, valid: Vec<usize>) -> Var {
        let src = self.value(x);
        let mut v = Mat::zeros(src.dim());
        for (c, &n) in valid.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let col = src.slice(s![..n, c]);
            let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for r in 0..n {
                let e = (src[[r, c]] - max).exp();
                v[[r, c]] = e;
                sum += e;
            }
            for r in 0..n {
                v[[r, c]] /= sum;
            }
        }
        self.push(v, Op::MaskedSoftmaxCols { x, valid })
    }

    /// Returns the `[h; c]` stack for one LSTM step.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let g = self.value(gates);
        let k = g.nrows() / 4;
        let n = g.ncols();
        let mut act = g.clone();
        act.slice_mut(s![..2 * k, ..]).mapv_inplace(sigmoid);
        act.slice_mut(s![2 * k..3 * k, ..]).mapv_inplace(f64::tanh);
        act.slice_mut(s![3 * k.., ..]).mapv_inplace(sigmoid);
        let cp = self.value(c_prev);
        let mut out = Mat::zeros((2 * k, n));
        for r in 0..k {
            for c in 0..n {
                let i = act[[r, c]];
                let f = act[[k + r, c]];
                let gg = act[[2 * k + r, c]];
                let o = act[[3 * k + r, c]];
                let cell = f * cp[[r, c]] + i * gg;
                out[[k + r, c]] = cell;
                out[[r, c]] = o * cell.tanh();
            }
        }
        let v = self.push(out, Op::LstmCell { gates, c_prev });
        self.nodes[v.0].cache = Some(act);
        v
    }

    /// See [`CausalDots`]. `width` is the number of output rows (at least
    /// `steps`); `lens[i]` is the real length of sequence `i`.
    pub fn causal_dots(&mut self, q: Var, k: Var, batch: usize, lens: Vec<usize>, width: usize) -> Var {
        let (vq, vk) = (self.value(q), self.value(k));
        let steps = vq.ncols() / batch;
        debug_assert!(width >= steps);
        let mut out = Mat::zeros((width, steps * batch));
        for (i, &len) in lens.iter().enumerate() {
            for t in 0..len {
                let qc = vq.column(t * batch + i);
                for j in 0..t {
                    out[[j, t * batch + i]] = qc.dot(&vk.column(j * batch + i));
                }
            }
        }
        self.push(
            out,
            Op::CausalDots(CausalDots {
                q,
                k,
                batch,
                steps,
                lens,
            }),
        )
    }

    /// Column `t * batch + i` of the result is `sum_j w[j, t*batch+i] * h[:, j*batch+i]`.
    pub fn causal_weighted_sum(&mut self, h: Var, w: Var, batch: usize) -> Var {
        let (vh, vw) = (self.value(h), self.value(w));
        let steps = vh.ncols() / batch;
        let mut out = Mat::zeros(vh.dim());
        for t in 0..steps {
            for i in 0..batch {
                let col = t * batch + i;
                for j in 0..t {
                    let a = vw[[j, col]];
                    if a != 0.0 {
                        out.column_mut(col).scaled_add(a, &vh.column(j * batch + i));
                    }
                }
            }
        }
        self.push(out, Op::CausalWeightedSum { h, w, batch, steps })
    }

    pub fn softmax_nll(&mut self, logits: Var, targets: Vec<Option<usize>>, scale: f64) -> Var {
        let z = self.value(logits);
        let mut total = 0.0;
        for (c, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let p = softmax_col(z.column(c).iter().copied());
                total -= p[t].max(PROB_FLOOR).ln();
            }
        }
        self.push(Mat::from_elem((1, 1), total * scale), Op::SoftmaxNll { logits, targets, scale })
    }

    /// Backpropagates from the scalar `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward starts from a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        let mut out: Grads = self.params.zeros_like();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Const) {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(p) => out[*p] += &g,
                Op::Gather { param, ids } => {
                    let table = &mut out[*param];
                    for (c, &id) in ids.iter().enumerate() {
                        table.column_mut(id as usize).scaled_add(1.0, &g.column(c));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs_grad(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddCol(a, col) => {
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, grow);
                    acc(&mut grads, *a, ga);
                }
                Op::Blend { a, b, mask } => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(ga.axis_iter_mut(Axis(1)))
                        .and(gb.axis_iter_mut(Axis(1)))
                        .and(mask)
                        .for_each(|mut ca, mut cb, &m| {
                            ca.mapv_inplace(|x| x * m);
                            cb.mapv_inplace(|x| x * (1.0 - m));
                        });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let ga = acc_slot(&mut grads, *a, self.value(*a).dim());
                    let mut region = ga.slice_mut(s![*start..*end, ..]);
                    region += &g;
                }
                Op::SliceCols(a, start, end) => {
                    let ga = acc_slot(&mut grads, *a, self.value(*a).dim());
                    let mut region = ga.slice_mut(s![.., *start..*end]);
                    region += &g;
                }
                Op::SelectCols { x, index } => {
                    let gx = acc_slot(&mut grads, *x, self.value(*x).dim());
                    for (c, i) in index.iter().enumerate() {
                        if let Some(i) = *i {
                            gx.column_mut(i).scaled_add(1.0, &g.column(c));
                        }
                    }
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Mat::from_shape_vec(dim, data).expect("same size"));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SumColBlocks { x, blocks } => {
                    let n = g.ncols();
                    let mut gx = Mat::zeros((g.nrows(), n * blocks));
                    for b in 0..*blocks {
                        gx.slice_mut(s![.., b * n..(b + 1) * n]).assign(&g);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MaskedSoftmaxCols { x, valid } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for (c, &n) in valid.iter().enumerate() {
                        let dot: f64 = (0..n).map(|r| y[[r, c]] * g[[r, c]]).sum();
                        for r in 0..n {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LstmCell { gates, c_prev } => {
                    let act = node.cache.as_ref().expect("lstm cache");
                    let k = act.nrows() / 4;
                    let n = act.ncols();
                    let cp = self.value(*c_prev);
                    let mut dgates = Mat::zeros((4 * k, n));
                    let mut dcp = Mat::zeros((k, n));
                    for r in 0..k {
                        for c in 0..n {
                            let i = act[[r, c]];
                            let f = act[[k + r, c]];
                            let gg = act[[2 * k + r, c]];
                            let o = act[[3 * k + r, c]];
                            let cell = node.value[[k + r, c]];
                            let tc = cell.tanh();
                            let dh = g[[r, c]];
                            let dc = g[[k + r, c]] + dh * o * (1.0 - tc * tc);
                            dgates[[r, c]] = dc * gg * i * (1.0 - i);
                            dgates[[k + r, c]] = dc * cp[[r, c]] * f * (1.0 - f);
                            dgates[[2 * k + r, c]] = dc * i * (1.0 - gg * gg);
                            dgates[[3 * k + r, c]] = dh * tc * o * (1.0 - o);
                            dcp[[r, c]] = dc * f;
                        }
                    }
                    acc(&mut grads, *gates, dgates);
                    acc(&mut grads, *c_prev, dcp);
                }
                Op::CausalDots(cd) => {
                    let (vq, vk) = (self.value(cd.q), self.value(cd.k));
                    let mut gq = Mat::zeros(vq.dim());
                    let mut gk = Mat::zeros(vk.dim());
                    let b = cd.batch;
                    debug_assert_eq!(vq.ncols(), cd.steps * b);
                    for (i, &len) in cd.lens.iter().enumerate() {
                        for t in 0..len {
                            let col = t * b + i;
                            for j in 0..t {
                                let d = g[[j, col]];
                                if d == 0.0 {
                                    continue;
                                }
                                gq.column_mut(col).scaled_add(d, &vk.column(j * b + i));
                                gk.column_mut(j * b + i).scaled_add(d, &vq.column(col));
                            }
                        }
                    }
                    acc(&mut grads, cd.q, gq);
                    acc(&mut grads, cd.k, gk);
                }
                Op::CausalWeightedSum { h, w, batch, steps } => {
                    let (vh, vw) = (self.value(*h), self.value(*w));
                    let mut gh = Mat::zeros(vh.dim());
                    let mut gw = Mat::zeros(vw.dim());
                    for t in 0..*steps {
                        for i in 0..*batch {
                            let col = t * batch + i;
                            let gcol = g.column(col);
                            for j in 0..t {
                                let hj = j * batch + i;
                                gw[[j, col]] = gcol.dot(&vh.column(hj));
                                let a = vw[[j, col]];
                                if a != 0.0 {
                                    gh.column_mut(hj).scaled_add(a, &gcol);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *h, gh);
                    acc(&mut grads, *w, gw);
                }
                Op::SoftmaxNll {
                    logits,
                    targets,
                    scale,
                } => {
                    let z = self.value(*logits);
                    let mut gz = Mat::zeros(z.dim());
                    let up = g[[0, 0]] * scale;
                    for (c, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = softmax_col(z.column(c).iter().copied());
                            if p[t] <= PROB_FLOOR {
                                continue;
                            }
                            for (r, pr) in p.iter().enumerate() {
                                let y = if r == t { 1.0 } else { 0.0 };
                                gz[[r, c]] = up * (pr - y);
                            }
                        }
                    }
                    acc(&mut grads, *logits, gz);
                }
            }
        }
        out
    }
}

/// Floor applied inside the log of the likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax_col(z: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = z.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gradient slot of `v`, zero-filled on first use. Lets slicing ops add
/// into a region instead of materializing a full-size zero matrix each.
fn acc_slot(grads: &mut [Option<Mat>], v: Var, dim: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(dim))
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
