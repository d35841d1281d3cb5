//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep is a reverse walk over the node
//! vector. Parameters enter through [`Graph::param`]; only parameters marked
//! trainable when the graph was created receive gradients, and nothing
//! upstream of a non-trainable subgraph is visited during backward.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{gemm, Matrix};
use super::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    LogFloor { a: Var, floor: f64 },
    SoftmaxRows(Var),
    LayerNormRows { a: Var, inv_std: Vec<f64> },
    MaskMul { a: Var, mask: Matrix },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Gather(Vec<Option<(Var, usize)>>),
    BroadcastRows(Var),
    MeanRows(Var),
    SumAll(Var),
    Unfold { a: Var, kernel: usize, stride: usize, pad: usize },
    GruCell { x: Var, h: Var, w: Var, b: Var, mask: Option<Vec<f64>>, gates: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients of a scalar with respect to the trainable parameters of a graph.
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(id.index()).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::new(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
}

impl Graph {
    /// `trainable[i]` marks parameter `i` of the store as requiring gradient.
    pub fn new(trainable: Vec<bool>, training: bool, seed: u64) -> Self {
        let n = trainable.len();
        Self {
            nodes: Vec::with_capacity(1024),
            trainable,
            param_vars: vec![None; n],
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Graph with no trainable parameters, in inference mode.
    pub fn inference(store: &ParamStore, seed: u64) -> Self {
        Self::new(vec![false; store.len()], false, seed)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let needs = self.trainable[id.index()];
        let v = self.push(store.get(id).clone(), Op::Param(id), needs);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = Matrix::zeros(m, n);
        gemm(self.value(a), ta, self.value(b), tb, &mut out, 1.0, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a [1 x {c}] row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `[1 × c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a [1 x {c}] row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Elementwise clamp; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp { a, lo, hi }, ng)
    }

    /// `ln(max(a, floor))`.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::LogFloor { a, floor }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows { a, inv_std }, ng)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: Var, mask: Matrix) -> Var {
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.ng(a);
        self.push(out, Op::MaskMul { a, mask }, ng)
    }

    /// Inverted dropout, active only when the graph is in training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        self.dropout_always(a, p)
    }

    /// Inverted dropout applied regardless of mode.
    pub fn dropout_always(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - p;
        // each 64-bit draw yields four 16-bit uniforms
        let threshold = (keep * 65536.0).round() as u64;
        let mut data = Vec::with_capacity(r * c);
        while data.len() < r * c {
            let bits = self.rng.next_u64();
            for k in 0..4.min(r * c - data.len()) {
                let u = (bits >> (16 * k)) & 0xffff;
                data.push(if u < threshold { 1.0 / keep } else { 0.0 });
            }
        }
        self.mask_mul(a, Matrix::from_vec(r, c, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            let pc = v.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + pc].copy_from_slice(v.row(r));
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.rows(), "slice_rows out of range");
        let c = src.cols();
        let out = Matrix::from_vec(len, c, src.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    /// Builds a matrix whose rows are copied from other nodes; `None` rows are zero.
    pub fn gather_rows(&mut self, rows: Vec<Option<(Var, usize)>>, cols: usize) -> Var {
        let mut out = Matrix::zeros(rows.len(), cols);
        let mut ng = false;
        for (i, src) in rows.iter().enumerate() {
            if let Some((v, r)) = *src {
                let m = self.value(v);
                assert_eq!(m.cols(), cols, "gather_rows column mismatch");
                out.row_mut(i).copy_from_slice(m.row(r));
                ng |= self.ng(v);
            }
        }
        self.push(out, Op::Gather(rows), ng)
    }

    /// Repeats a `[1 × c]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * src.cols());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let out = Matrix::from_vec(n, src.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::BroadcastRows(a), ng)
    }

    /// Mean over rows (time), giving `[1 × c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sliding-window unfold over time (im2col) for 1-d convolution.
    /// Output row `t` holds frames `t·stride − pad .. t·stride − pad + kernel`,
    /// concatenated, with zeros outside the sequence.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let src = self.value(a);
        let (t_in, c) = src.shape();
        let t_out = conv_out_len(t_in, kernel, stride, pad);
        let mut out = Matrix::zeros(t_out, kernel * c);
        for t in 0..t_out {
            for j in 0..kernel {
                let s = (t * stride + j) as isize - pad as isize;
                if s >= 0 && (s as usize) < t_in {
                    out.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(src.row(s as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Unfold { a, kernel, stride, pad }, ng)
    }

    /// Fused GRU cell. `x` holds the input projection `[B × 3H]` with input
    /// bias already applied (gate order r, z, n); `w` is `[H × 3H]`, `b` is
    /// `[1 × 3H]`. Rows with `mask == 0` carry their previous state through.
    pub fn gru_cell(&mut self, x: Var, h: Var, w: Var, b: Var, mask: Option<Vec<f64>>) -> Var {
        let (bsz, hd) = self.shape(h);
        assert_eq!(self.shape(x), (bsz, 3 * hd), "gru_cell input shape");
        assert_eq!(self.shape(w), (hd, 3 * hd), "gru_cell weight shape");
        assert_eq!(self.shape(b), (1, 3 * hd), "gru_cell bias shape");
        let mut hh = Matrix::zeros(bsz, 3 * hd);
        gemm(self.value(h), false, self.value(w), false, &mut hh, 1.0, 0.0);
        let xv = self.value(x);
        let hv = self.value(h);
        let bv = self.value(b).data();
        // gates row layout: [r | z | n | hn]
        let mut gates = Matrix::zeros(bsz, 4 * hd);
        let mut out = Matrix::zeros(bsz, hd);
        for i in 0..bsz {
            let xr = xv.row(i);
            let hr = hh.row(i);
            let hprev = hv.row(i);
            let m = mask.as_ref().map_or(1.0, |m| m[i]);
            let grow = gates.row_mut(i);
            for k in 0..hd {
                let r = sigmoid(xr[k] + hr[k] + bv[k]);
                let z = sigmoid(xr[hd + k] + hr[hd + k] + bv[hd + k]);
                let hn = hr[2 * hd + k] + bv[2 * hd + k];
                let n = (xr[2 * hd + k] + r * hn).tanh();
                grow[k] = r;
                grow[hd + k] = z;
                grow[2 * hd + k] = n;
                grow[3 * hd + k] = hn;
            }
            let orow = out.row_mut(i);
            for k in 0..hd {
                let z = grow[hd + k];
                let n = grow[2 * hd + k];
                let hnew = (1.0 - z) * n + z * hprev[k];
                orow[k] = m * hnew + (1.0 - m) * hprev[k];
            }
        }
        let ng = self.ng(x) || self.ng(h) || self.ng(w) || self.ng(b);
        self.push(
            out,
            Op::GruCell {
                x,
                h,
                w,
                b,
                mask,
                gates,
            },
            ng,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut by_param: Vec<Option<Matrix>> = vec![None; self.trainable.len()];
        if !self.nodes[loss.0].needs_grad {
            return Gradients { by_param };
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut by_param);
        }
        Gradients { by_param }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        by_param: &mut [Option<Matrix>],
    ) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let want = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                by_param[id.index()] = Some(g);
            }
            &Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = slot(grads, a, val(a).shape());
                    if !ta {
                        gemm(&g, false, val(b), !tb, ga, 1.0, 1.0);
                    } else {
                        gemm(val(b), tb, &g, true, ga, 1.0, 1.0);
                    }
                }
                if want(b) {
                    let gb = slot(grads, b, val(b).shape());
                    if !tb {
                        gemm(val(a), !ta, &g, false, gb, 1.0, 1.0);
                    } else {
                        gemm(&g, true, val(a), ta, gb, 1.0, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, a, &g);
                }
                if want(b) {
                    accumulate(grads, b, &g);
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    accumulate(grads, a, &g);
                }
                if want(b) {
                    let gb = slot(grads, b, g.shape());
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    accumulate_with(grads, a, &g, val(b), |gi, bi| gi * bi);
                }
                if want(b) {
                    accumulate_with(grads, b, &g, val(a), |gi, ai| gi * ai);
                }
            }
            &Op::AddRow(a, row) => {
                if want(a) {
                    accumulate(grads, a, &g);
                }
                if want(row) {
                    let gr = slot(grads, row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let rv = val(row).data();
                if want(a) {
                    let ga = slot(grads, a, g.shape());
                    for r in 0..g.rows() {
                        for ((o, x), m) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv) {
                            *o += x * m;
                        }
                    }
                }
                if want(row) {
                    let av = val(a);
                    let gr = slot(grads, row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for ((o, x), y) in gr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += x * y;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = slot(grads, a, g.shape());
                for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += s * x;
                }
            }
            &Op::AddScalar(a) => accumulate(grads, a, &g),
            &Op::Tanh(a) => {
                accumulate_with(grads, a, &g, &node.value, |gi, y| gi * (1.0 - y * y))
            }
            &Op::Sigmoid(a) => {
                accumulate_with(grads, a, &g, &node.value, |gi, y| gi * y * (1.0 - y))
            }
            &Op::Relu(a) => {
                accumulate_with(grads, a, &g, &node.value, |gi, y| if y > 0.0 { gi } else { 0.0 })
            }
            &Op::Exp(a) => accumulate_with(grads, a, &g, &node.value, |gi, y| gi * y),
            &Op::Square(a) => accumulate_with(grads, a, &g, val(a), |gi, x| 2.0 * gi * x),
            &Op::Clamp { a, lo, hi } => accumulate_with(grads, a, &g, val(a), |gi, x| {
                if x >= lo && x <= hi {
                    gi
                } else {
                    0.0
                }
            }),
            &Op::LogFloor { a, floor } => accumulate_with(grads, a, &g, val(a), |gi, x| {
                if x > floor {
                    gi / x
                } else {
                    0.0
                }
            }),
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, a, g.shape());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNormRows { a, inv_std } => {
                let y = &node.value;
                let c = g.cols() as f64;
                let ga = slot(grads, *a, g.shape());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    let inv = inv_std[r];
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o += inv * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::MaskMul { a, mask } => accumulate_with(grads, *a, &g, mask, |gi, m| gi * m),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if want(p) {
                        let gp = slot(grads, p, val(p).shape());
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + pc]) {
                                *o += x;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    if want(p) {
                        let gp = slot(grads, p, val(p).shape());
                        let c = g.cols();
                        for (o, x) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * c..(off + pr) * c])
                        {
                            *o += x;
                        }
                    }
                    off += pr;
                }
            }
            &Op::SliceCols { a, start } => {
                let ga = slot(grads, a, val(a).shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    for (o, x) in ga.row_mut(r)[start..start + len].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let ga = slot(grads, a, val(a).shape());
                let c = g.cols();
                for (o, x) in ga.data_mut()[start * c..(start + g.rows()) * c]
                    .iter_mut()
                    .zip(g.data())
                {
                    *o += x;
                }
            }
            Op::Gather(rows) => {
                for (i, src) in rows.iter().enumerate() {
                    if let Some((v, r)) = *src {
                        if want(v) {
                            let gv = slot(grads, v, val(v).shape());
                            for (o, x) in gv.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            &Op::BroadcastRows(a) => {
                let ga = slot(grads, a, (1, g.cols()));
                for r in 0..g.rows() {
                    for (o, x) in ga.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            &Op::MeanRows(a) => {
                let (rows, _) = val(a).shape();
                let inv = 1.0 / rows as f64;
                let ga = slot(grads, a, val(a).shape());
                for r in 0..rows {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o += x * inv;
                    }
                }
            }
            &Op::SumAll(a) => {
                let s = g.item();
                let ga = slot(grads, a, val(a).shape());
                ga.data_mut().iter_mut().for_each(|o| *o += s);
            }
            &Op::Unfold {
                a,
                kernel,
                stride,
                pad,
            } => {
                let (t_in, c) = val(a).shape();
                let ga = slot(grads, a, (t_in, c));
                for t in 0..g.rows() {
                    for j in 0..kernel {
                        let s = (t * stride + j) as isize - pad as isize;
                        if s >= 0 && (s as usize) < t_in {
                            let src = &g.row(t)[j * c..(j + 1) * c];
                            for (o, x) in ga.row_mut(s as usize).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::GruCell {
                x,
                h,
                w,
                b,
                mask,
                gates,
            } => {
                let (x, h, w, b) = (*x, *h, *w, *b);
                let (bsz, hd) = val(h).shape();
                let hv = val(h);
                let mut dx = Matrix::zeros(bsz, 3 * hd);
                let mut dh = Matrix::zeros(bsz, hd);
                for i in 0..bsz {
                    let m = mask.as_ref().map_or(1.0, |m| m[i]);
                    let gr = gates.row(i);
                    let go = g.row(i);
                    let hp = hv.row(i);
                    let dxr = dx.row_mut(i);
                    let mut dh_direct = vec![0.0; hd];
                    for k in 0..hd {
                        let r = gr[k];
                        let z = gr[hd + k];
                        let n = gr[2 * hd + k];
                        let hn = gr[3 * hd + k];
                        let dhnew = m * go[k];
                        dh_direct[k] = (1.0 - m) * go[k] + z * dhnew;
                        let dn = dhnew * (1.0 - z);
                        let dz = dhnew * (hp[k] - n);
                        let dan = dn * (1.0 - n * n);
                        let dr = dan * hn;
                        dxr[k] = dr * r * (1.0 - r);
                        dxr[hd + k] = dz * z * (1.0 - z);
                        dxr[2 * hd + k] = dan;
                    }
                    dh.row_mut(i).copy_from_slice(&dh_direct);
                }
                // dhh equals dx except the n block, which is scaled by r
                let mut dhh = dx.clone();
                for i in 0..bsz {
                    let gr = gates.row(i);
                    let row = dhh.row_mut(i);
                    for k in 0..hd {
                        row[2 * hd + k] *= gr[k];
                    }
                }
                if want(x) {
                    accumulate(grads, x, &dx);
                }
                if want(w) {
                    let gw = slot(grads, w, (hd, 3 * hd));
                    gemm(hv, true, &dhh, false, gw, 1.0, 1.0);
                }
                if want(b) {
                    let gb = slot(grads, b, (1, 3 * hd));
                    for i in 0..bsz {
                        for (o, v) in gb.data_mut().iter_mut().zip(dhh.row(i)) {
                            *o += v;
                        }
                    }
                }
                if want(h) {
                    gemm(&dhh, false, val(w), true, &mut dh, 1.0, 1.0);
                    accumulate(grads, h, &dh);
                }
            }
        }
    }
}

pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = t_in + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

fn accumulate_with(
    grads: &mut [Option<Matrix>],
    v: Var,
    g: &Matrix,
    other: &Matrix,
    f: impl Fn(f64, f64) -> f64,
) {
    let gv = slot(grads, v, g.shape());
    for ((o, &gi), &y) in gv.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o += f(gi, y);
    }
}
