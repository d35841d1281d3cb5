//! Parameterized building blocks shared by the encoder, prosody module and decoder.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use super::params::{glorot, uniform, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Glorot,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Glorot => glorot(rng, d_in, d_out),
            Init::Zero => Matrix::zeros(d_in, d_out),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// 1-d convolution over time on `[T × C_in]` sequences.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Glorot => glorot(rng, kernel * c_in, c_out),
            Init::Zero => Matrix::zeros(kernel * c_in, c_out),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, c_out)),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let cols = g.unfold(x, self.kernel, self.stride, self.pad);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w);
        g.add_row(y, b)
    }
}

/// Position-wise feed-forward network `W2 · relu(W1 · x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_inner: usize,
        dropout: f64,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d_model, d_inner, true, Init::Glorot),
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_inner, d_model, true, Init::Glorot),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(g, store, x);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.outer.forward(g, store, h)
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must divide into heads");
        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, part: &str| {
            Linear::new(store, rng, &format!("{name}.{part}"), d_model, d_model, true, Init::Glorot)
        };
        Self {
            query: mk(store, rng, "query"),
            key: mk(store, rng, "key"),
            value: mk(store, rng, "value"),
            output: mk(store, rng, "output"),
            heads,
            dropout,
        }
    }

    /// Attends from `queries` `[Tq × d]` over `memory` `[Tk × d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Var {
        let d_model = g.shape(queries).1;
        let d_head = d_model / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, memory);
        let v = self.value.forward(g, store, memory);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d_head, d_head);
            let kh = g.slice_cols(k, h * d_head, d_head);
            let vh = g.slice_cols(v, h * d_head, d_head);
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores);
            let probs = g.dropout(probs, self.dropout);
            heads.push(g.matmul(probs, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.output.forward(g, store, joined)
    }
}

/// Single-layer GRU. Gate order in the stacked weights is (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, d_in, 3 * hidden, k)),
            b_ih: store.add(format!("{name}.b_ih"), uniform(rng, 1, 3 * hidden, k)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, hidden, 3 * hidden, k)),
            b_hh: store.add(format!("{name}.b_hh"), uniform(rng, 1, 3 * hidden, k)),
            input_dim: d_in,
            hidden,
        }
    }

    /// Input-side gate pre-activations for a whole sequence, `[T × 3H]`.
    pub fn project_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b_ih);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_proj: Var,
        h: Var,
        mask: Option<Vec<f64>>,
    ) -> Var {
        let w = g.param(store, self.w_hh);
        let b = g.param(store, self.b_hh);
        g.gru_cell(x_proj, h, w, b, mask)
    }

    /// Runs several variable-length sequences as one padded batch.
    ///
    /// `projections[i]` is the `[T_i × 3H]` output of [`Gru::project_inputs`].
    /// Returns the per-sequence hidden states `[T_i × H]` and the final state
    /// of each sequence `[B × H]` (state frozen past each sequence's end).
    pub fn run(&self, g: &mut Graph, store: &ParamStore, projections: &[Var]) -> (Vec<Var>, Var) {
        let lens: Vec<usize> = projections.iter().map(|&p| g.shape(p).0).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let bsz = projections.len();
        let mut h = g.constant(Matrix::zeros(bsz, self.hidden));
        let mut states = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let rows = projections
                .iter()
                .zip(&lens)
                .map(|(&p, &len)| (t < len).then_some((p, t)))
                .collect();
            let x_t = g.gather_rows(rows, 3 * self.hidden);
            let mask = if lens.iter().all(|&l| t < l) {
                None
            } else {
                Some(lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect())
            };
            h = self.step(g, store, x_t, h, mask);
            states.push(h);
        }
        let outputs = lens
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let rows = (0..len).map(|t| Some((states[t], i))).collect();
                g.gather_rows(rows, self.hidden)
            })
            .collect();
        (outputs, h)
    }
}

/// Sinusoidal positional encoding table `[T × d]`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.set(t, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
