//! Self-attention encoder with weighted aggregation across layers.
//!
//! Frame-level content is the output of the last block; the sentential vector
//! attends from the last block's summary over the summaries of every block.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{positional_encoding, Conv1d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Matrix, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Prenet {
    pub fc0: Linear,
    pub fc1: Linear,
    pub proj: Linear,
    pub dropout: f64,
}

impl Prenet {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bn: Var) -> Var {
        let h = self.fc0.forward(g, store, bn);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.fc1.forward(g, store, h);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.proj.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct SaBlock {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl SaBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, cfg.attn_dropout),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_inner, cfg.attn_dropout),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d_model),
        }
    }

    /// Returns `(m, f)`: the post-attention and post-FFN sequences.
    /// With `query` set, attends from it over `x` and takes the residual from the query.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, query: Option<Var>) -> (Var, Var) {
        let q = query.unwrap_or(x);
        let a = self.attn.forward(g, store, q, x);
        let a = g.add(a, q);
        let m = self.ln_attn.forward(g, store, a);
        let f = self.ffn.forward(g, store, m);
        let f = g.add(f, m);
        let f = self.ln_ffn.forward(g, store, f);
        (m, f)
    }
}

/// Graph-level encoder outputs for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[T × d_model]`
    pub content: Var,
    /// `[1 × d_model]`
    pub sentential: Var,
    /// `[N × d_model]`
    pub summaries: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub content: Matrix,
    pub sentential: Vec<f64>,
    pub per_layer_summaries: Matrix,
}

#[derive(Clone, Debug)]
pub struct SawaEncoder {
    pub prenet: Prenet,
    pub blocks: Vec<SaBlock>,
    pub summary_convs: Vec<Conv1d>,
    pub aggregate: SaBlock,
    pub positional: bool,
    pub d_model: usize,
}

impl SawaEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, d_bn: usize) -> Self {
        let [p0, p1] = cfg.enc_prenet;
        let prenet = Prenet {
            fc0: Linear::new(store, rng, "encoder.prenet.fc0", d_bn, p0, true, Init::Glorot),
            fc1: Linear::new(store, rng, "encoder.prenet.fc1", p0, p1, true, Init::Glorot),
            proj: Linear::new(store, rng, "encoder.prenet.proj", p1, cfg.d_model, true, Init::Glorot),
            dropout: cfg.enc_prenet_dropout,
        };
        let blocks = (0..cfg.n_blocks)
            .map(|i| SaBlock::new(store, rng, &format!("encoder.block{i}"), cfg))
            .collect();
        let summary_convs = (0..cfg.n_blocks)
            .map(|i| {
                let name = format!("encoder.summary{i}");
                let mut conv = Conv1d::new(store, rng, &name, cfg.d_model, cfg.d_model, cfg.summary_kernel, 1, Init::Glorot);
                conv.pad = 0;
                conv
            })
            .collect();
        Self {
            prenet,
            blocks,
            summary_convs,
            aggregate: SaBlock::new(store, rng, "encoder.aggregate", cfg),
            positional: cfg.positional_encoding,
            d_model: cfg.d_model,
        }
    }

    /// `MeanPool(Conv1d(f_n))` as `[1 × d_model]`, with edge frames replicated
    /// as padding so a constant sequence pools to the same value at any length.
    pub fn layer_summary(&self, g: &mut Graph, store: &ParamStore, layer: usize, f_n: Var) -> Var {
        let conv = &self.summary_convs[layer];
        let t = g.shape(f_n).0;
        let pad = conv.kernel / 2;
        let rows = (0..t + 2 * pad)
            .map(|i| Some((f_n, i.saturating_sub(pad).min(t - 1))))
            .collect();
        let padded = g.gather_rows(rows, self.d_model);
        let c = conv.forward(g, store, padded);
        g.mean_rows(c)
    }

    /// Aggregates `[N × d_model]` summaries into one sentential row.
    pub fn weighted_aggregate(&self, g: &mut Graph, store: &ParamStore, summaries: Var) -> Var {
        let n = g.shape(summaries).0;
        let last = g.slice_rows(summaries, n - 1, 1);
        self.aggregate.forward(g, store, summaries, Some(last)).1
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bn: Var) -> EncoderVars {
        let t = g.shape(bn).0;
        let mut f = self.prenet.forward(g, store, bn);
        if self.positional {
            let pe = g.constant(positional_encoding(t, self.d_model));
            f = g.add(f, pe);
        }
        let mut summaries = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            f = block.forward(g, store, f, None).1;
            summaries.push(self.layer_summary(g, store, i, f));
        }
        let summaries = g.concat_rows(&summaries);
        let sentential = self.weighted_aggregate(g, store, summaries);
        EncoderVars {
            content: f,
            sentential,
            summaries,
        }
    }
}

/// Inference-mode encoding of one bottleneck sequence.
pub fn encode(enc: &SawaEncoder, store: &ParamStore, bn: &Matrix) -> Result<EncoderOutput> {
    if bn.rows() == 0 {
        return Err(Error::InvalidInput("bottleneck features have no frames".into()));
    }
    if !bn.all_finite() {
        return Err(Error::NonFinite("bottleneck features"));
    }
    let mut g = Graph::inference(store, 0);
    let x = g.constant(bn.clone());
    let out = enc.forward(&mut g, store, x);
    Ok(EncoderOutput {
        content: g.value(out.content).clone(),
        sentential: g.value(out.sentential).row(0).to_vec(),
        per_layer_summaries: g.value(out.summaries).clone(),
    })
}
