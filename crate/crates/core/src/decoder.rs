//! Frame-synchronous autoregressive mel decoder.
//!
//! At frame `t` the previous mel frame passes a two-layer prenet (dropout on
//! in both training and inference), is concatenated with the frame's
//! conditions, and drives a GRU; the mel frame is projected from the GRU
//! state together with the conditions. A convolutional postnet adds a
//! residual to the whole predicted sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv1d, Gru, Init, Linear};
use crate::nn::{Graph, Matrix, ParamId, ParamStore, Var};

/// Name of the speaker embedding table; it belongs to the decoder group.
pub const SPEAKER_TABLE: &str = "decoder.speaker_embedding";

/// Per-frame decoder conditions before flattening.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInputFrame {
    pub content_t: Vec<f64>,
    pub sentential: Vec<f64>,
    /// `[lf0_norm, vuv, energy_norm]`, omitted when explicit prosody is off.
    pub explicit: Option<[f64; 3]>,
    /// `z ∥ r`, omitted when implicit prosody is off.
    pub prosody_embedding: Option<Vec<f64>>,
    pub spk: Vec<f64>,
    pub prev_mel: Vec<f64>,
}

impl DecoderInputFrame {
    /// Conditions in decoder order: content, sentential, explicit, implicit, speaker.
    pub fn condition(&self) -> Vec<f64> {
        let mut c = self.content_t.clone();
        c.extend(&self.sentential);
        if let Some(e) = self.explicit {
            c.extend(e);
        }
        if let Some(p) = &self.prosody_embedding {
            c.extend(p);
        }
        c.extend(&self.spk);
        c
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub speaker_table: ParamId,
    pub prenet: [Linear; 2],
    pub prenet_dropout: f64,
    pub rnn: Gru,
    pub out: Linear,
    pub postnet: Vec<Conv1d>,
    pub n_mels: usize,
    pub d_cond: usize,
    pub d_spk: usize,
}

/// Dimensions the decoder is built from.
#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub n_mels: usize,
    pub d_cond: usize,
    pub d_spk: usize,
    pub n_speakers: usize,
    pub prenet: [usize; 2],
    pub prenet_dropout: f64,
    pub hidden: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: DecoderDims) -> Self {
        let table = Matrix::from_vec(
            d.n_speakers,
            d.d_spk,
            (0..d.n_speakers * d.d_spk).map(|_| rng.random_range(-0.5..0.5)).collect(),
        );
        let speaker_table = store.add(SPEAKER_TABLE, table);
        let [p0, p1] = d.prenet;
        let prenet = [
            Linear::new(store, rng, "decoder.prenet.fc0", d.n_mels, p0, true, Init::Glorot),
            Linear::new(store, rng, "decoder.prenet.fc1", p0, p1, true, Init::Glorot),
        ];
        let rnn = Gru::new(store, rng, "decoder.rnn", p1 + d.d_cond, d.hidden);
        let out = Linear::new(store, rng, "decoder.out", d.hidden + d.d_cond, d.n_mels, true, Init::Zero);
        let c = d.postnet_channels;
        let k = d.postnet_kernel;
        let postnet = (0..d.postnet_layers)
            .map(|i| {
                let c_in = if i == 0 { d.n_mels } else { c };
                let last = i + 1 == d.postnet_layers;
                let (c_out, init) = if last { (d.n_mels, Init::Zero) } else { (c, Init::Glorot) };
                Conv1d::new(store, rng, &format!("decoder.postnet{i}"), c_in, c_out, k, 1, init)
            })
            .collect();
        Self {
            speaker_table,
            prenet,
            prenet_dropout: d.prenet_dropout,
            rnn,
            out,
            postnet,
            n_mels: d.n_mels,
            d_cond: d.d_cond,
            d_spk: d.d_spk,
        }
    }

    fn prenet_dim(&self) -> usize {
        self.rnn.input_dim - self.d_cond
    }

    /// Speaker embedding row `[1 × d_spk]`.
    pub fn speaker(&self, g: &mut Graph, store: &ParamStore, speaker_id: usize) -> Var {
        let table = g.param(store, self.speaker_table);
        g.gather_rows(vec![Some((table, speaker_id))], self.d_spk)
    }

    pub fn num_speakers(&self, store: &ParamStore) -> usize {
        store.get(self.speaker_table).rows()
    }

    /// Concatenates frame-level and broadcast conditions into `[T × d_cond]`.
    pub fn conditions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        content: Var,
        sentential: Var,
        explicit: Option<Var>,
        implicit: Option<Var>,
        speaker_id: usize,
    ) -> Var {
        let t = g.shape(content).0;
        let mut parts = vec![content, g.broadcast_rows(sentential, t)];
        if let Some(e) = explicit {
            parts.push(e);
        }
        if let Some(i) = implicit {
            parts.push(g.broadcast_rows(i, t));
        }
        let spk = self.speaker(g, store, speaker_id);
        parts.push(g.broadcast_rows(spk, t));
        let c = g.concat_cols(&parts);
        assert_eq!(g.shape(c).1, self.d_cond, "decoder condition width");
        c
    }

    fn prenet_forward(&self, g: &mut Graph, store: &ParamStore, prev: Var) -> Var {
        let mut h = prev;
        for layer in &self.prenet {
            h = layer.forward(g, store, h);
            h = g.relu(h);
            h = g.dropout_always(h, self.prenet_dropout);
        }
        h
    }

    /// Splits the GRU input weights into the prenet and condition parts.
    fn input_weights(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var, Var) {
        let w = g.param(store, self.rnn.w_ih);
        let p = self.prenet_dim();
        let wp = g.slice_rows(w, 0, p);
        let wc = g.slice_rows(w, p, self.d_cond);
        let b = g.param(store, self.rnn.b_ih);
        (wp, wc, b)
    }

    fn condition_projection(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Var {
        let (_, wc, b) = self.input_weights(g, store);
        let y = g.matmul(cond, wc);
        g.add_row(y, b)
    }

    /// One autoregressive step over a batch: `prev` `[B × n_mels]`, `cond_proj`
    /// `[B × 3H]`, `cond` `[B × d_cond]`, `h` `[B × H]`. Returns `(mel_t, h')`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: Var,
        cond_proj: Var,
        cond: Var,
        h: Var,
        mask: Option<Vec<f64>>,
    ) -> (Var, Var) {
        let (wp, _, _) = self.input_weights(g, store);
        let p = self.prenet_forward(g, store, prev);
        let x = g.matmul(p, wp);
        let x = g.add(x, cond_proj);
        let h = self.rnn.step(g, store, x, h, mask);
        let joined = g.concat_cols(&[h, cond]);
        (self.out.forward(g, store, joined), h)
    }

    /// Residual `[T × n_mels]` added by the postnet.
    pub fn postnet(&self, g: &mut Graph, store: &ParamStore, mel_pre: Var) -> Var {
        let last = self.postnet.len() - 1;
        let mut h = mel_pre;
        for (i, conv) in self.postnet.iter().enumerate() {
            h = conv.forward(g, store, h);
            if i < last {
                h = g.tanh(h);
            }
        }
        h
    }

    fn with_postnet(&self, g: &mut Graph, store: &ParamStore, pre: Vec<Var>) -> Vec<(Var, Var)> {
        pre.into_iter()
            .map(|p| {
                let r = self.postnet(g, store, p);
                (p, g.add(p, r))
            })
            .collect()
    }

    /// Teacher-forced pass over a batch; returns `(mel_pre, mel_post)` per utterance.
    pub fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, conds: &[Var], targets: &[Var]) -> Vec<(Var, Var)> {
        assert_eq!(conds.len(), targets.len(), "one target per condition");
        let (wp, wc, b) = self.input_weights(g, store);
        let mut projections = Vec::with_capacity(conds.len());
        for (&c, &y) in conds.iter().zip(targets) {
            let t = g.shape(y).0;
            let go = g.constant(Matrix::zeros(1, self.n_mels));
            let prev = if t > 1 {
                let shifted = g.slice_rows(y, 0, t - 1);
                g.concat_rows(&[go, shifted])
            } else {
                go
            };
            let p = self.prenet_forward(g, store, prev);
            let xp = g.matmul(p, wp);
            let xc = g.matmul(c, wc);
            let x = g.add(xp, xc);
            projections.push(g.add_row(x, b));
        }
        let (states, _) = self.rnn.run(g, store, &projections);
        let pre = states
            .into_iter()
            .zip(conds)
            .map(|(h, &c)| {
                let joined = g.concat_cols(&[h, c]);
                self.out.forward(g, store, joined)
            })
            .collect();
        self.with_postnet(g, store, pre)
    }

    /// Free-running pass: each step consumes the previous predicted frame.
    pub fn free_running(&self, g: &mut Graph, store: &ParamStore, conds: &[Var]) -> Vec<(Var, Var)> {
        let lens: Vec<usize> = conds.iter().map(|&c| g.shape(c).0).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let bsz = conds.len();
        let cproj: Vec<Var> = conds.iter().map(|&c| self.condition_projection(g, store, c)).collect();
        let three_h = 3 * self.rnn.hidden;
        let mut prev = g.constant(Matrix::zeros(bsz, self.n_mels));
        let mut h = g.constant(Matrix::zeros(bsz, self.rnn.hidden));
        let mut frames = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let live = |v: &[Var]| -> Vec<Option<(Var, usize)>> {
                v.iter().zip(&lens).map(|(&x, &l)| (t < l).then_some((x, t))).collect()
            };
            let cp = g.gather_rows(live(&cproj), three_h);
            let c = g.gather_rows(live(conds), self.d_cond);
            let mask = (!lens.iter().all(|&l| t < l)).then(|| lens.iter().map(|&l| f64::from(u8::from(t < l))).collect());
            let (mel, h_next) = self.step(g, store, prev, cp, c, h, mask);
            frames.push(mel);
            prev = mel;
            h = h_next;
        }
        let pre = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| g.gather_rows((0..l).map(|t| Some((frames[t], i))).collect(), self.n_mels))
            .collect();
        self.with_postnet(g, store, pre)
    }
}

/// Mean squared error of the pre-postnet output plus that of the post-postnet output.
pub fn recon_loss(pre: &Matrix, post: &Matrix, target: &Matrix) -> Result<f64> {
    if pre.shape() != target.shape() || post.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}/{:?} vs target {:?}",
            pre.shape(),
            post.shape(),
            target.shape()
        )));
    }
    if target.is_empty() {
        return Err(Error::InvalidInput("empty mel".into()));
    }
    let mse = |a: &Matrix| {
        a.data().iter().zip(target.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / target.len() as f64
    };
    Ok(mse(pre) + mse(post))
}

/// Graph form of [`recon_loss`] pooled over every frame of the batch.
pub fn recon_loss_graph(g: &mut Graph, outputs: &[(Var, Var)], targets: &[Var]) -> Var {
    let pre: Vec<Var> = outputs.iter().map(|o| o.0).collect();
    let post: Vec<Var> = outputs.iter().map(|o| o.1).collect();
    let pre = g.concat_rows(&pre);
    let post = g.concat_rows(&post);
    let y = g.concat_rows(targets);
    let d1 = g.sub(pre, y);
    let d2 = g.sub(post, y);
    let s1 = g.square(d1);
    let s2 = g.square(d2);
    let l1 = g.mean_all(s1);
    let l2 = g.mean_all(s2);
    g.add(l1, l2)
}

/// Single-frame inference step from flattened inputs; `h` is the recurrent state.
pub fn decode_step(
    dec: &Decoder,
    store: &ParamStore,
    h: &[f64],
    input: &DecoderInputFrame,
    dropout_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cond = input.condition();
    if cond.len() != dec.d_cond || input.prev_mel.len() != dec.n_mels || h.len() != dec.rnn.hidden {
        return Err(Error::ShapeMismatch("decoder input frame does not match decoder dimensions".into()));
    }
    if cond.iter().chain(&input.prev_mel).chain(h).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder input frame"));
    }
    let mut g = Graph::inference(store, dropout_seed);
    let c = g.constant(Matrix::row_vector(cond));
    let cp = dec.condition_projection(&mut g, store, c);
    let prev = g.constant(Matrix::row_vector(input.prev_mel.clone()));
    let hv = g.constant(Matrix::row_vector(h.to_vec()));
    let (mel, h2) = dec.step(&mut g, store, prev, cp, c, hv, None);
    Ok((g.value(mel).row(0).to_vec(), g.value(h2).row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dims() -> DecoderDims {
        DecoderDims {
            n_mels: 8,
            d_cond: 7,
            d_spk: 2,
            n_speakers: 3,
            prenet: [6, 5],
            prenet_dropout: 0.0,
            hidden: 4,
            postnet_channels: 4,
            postnet_layers: 3,
            postnet_kernel: 3,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = random(r, c, seed + id.index() as u64);
        }
    }

    #[test]
    fn zero_init_outputs_and_identity_postnet() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), dims());
        let mut g = Graph::inference(&store, 0);
        let cond = g.constant(random(6, 7, 2));
        let outs = dec.free_running(&mut g, &store, &[cond]);
        let (pre, post) = outs[0];
        assert_eq!(g.shape(pre), (6, 8));
        assert!(g.value(pre).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(post), g.value(pre));
        for t in [1, 240] {
            let x = g.constant(random(t, 8, t as u64));
            let r = dec.postnet(&mut g, &store, x);
            assert_eq!(g.shape(r), (t, 8));
            assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn teacher_forcing_matches_stepwise_decoding() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), dims());
        randomize(&mut store, 10);
        let conds = [random(5, 7, 3), random(3, 7, 4)];
        let targets = [random(5, 8, 5), random(3, 8, 6)];
        let mut g = Graph::inference(&store, 0);
        let cv: Vec<Var> = conds.iter().map(|c| g.constant(c.clone())).collect();
        let tv: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
        let outs = dec.teacher_forced(&mut g, &store, &cv, &tv);
        for (i, (c, y)) in conds.iter().zip(&targets).enumerate() {
            let mut h = vec![0.0; 4];
            let mut prev = vec![0.0; 8];
            for t in 0..c.rows() {
                let frame = DecoderInputFrame {
                    content_t: c.row(t)[..5].to_vec(),
                    sentential: vec![],
                    explicit: None,
                    prosody_embedding: None,
                    spk: c.row(t)[5..].to_vec(),
                    prev_mel: prev,
                };
                let (mel, h2) = decode_step(&dec, &store, &h, &frame, 0).unwrap();
                for (a, b) in mel.iter().zip(g.value(outs[i].0).row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
                h = h2;
                prev = y.row(t).to_vec();
            }
        }
    }

    #[test]
    fn batched_free_running_matches_single() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), dims());
        randomize(&mut store, 20);
        let conds = [random(4, 7, 7), random(6, 7, 8)];
        let mut g = Graph::inference(&store, 0);
        let cv: Vec<Var> = conds.iter().map(|c| g.constant(c.clone())).collect();
        let both = dec.free_running(&mut g, &store, &cv);
        for (i, &c) in cv.iter().enumerate() {
            let single = dec.free_running(&mut g, &store, &[c]);
            assert!(g.value(single[0].1).max_abs_diff(g.value(both[i].1)) < 1e-12);
        }
    }

    #[test]
    fn recon_loss_examples() {
        let y = random(4, 3, 1);
        assert_eq!(recon_loss(&y, &y, &y).unwrap(), 0.0);
        let plus = y.map(|v| v + 1.0);
        assert!((recon_loss(&y, &plus, &y).unwrap() - 1.0).abs() < 1e-12);
        let minus = y.map(|v| v - 1.0);
        assert_eq!(recon_loss(&plus, &minus, &y).unwrap(), recon_loss(&minus, &plus, &y).unwrap());
        assert!(matches!(recon_loss(&y, &y, &random(3, 3, 1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn decode_step_is_repeatable_with_dropout_seed() {
        let mut store = ParamStore::new();
        let mut d = dims();
        d.prenet_dropout = 0.5;
        let dec = Decoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), d);
        randomize(&mut store, 30);
        let frame = DecoderInputFrame {
            content_t: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            sentential: vec![],
            explicit: None,
            prosody_embedding: None,
            spk: vec![0.3, -0.2],
            prev_mel: vec![0.5; 8],
        };
        let a = decode_step(&dec, &store, &[0.0; 4], &frame, 9).unwrap();
        assert_eq!(a, decode_step(&dec, &store, &[0.0; 4], &frame, 9).unwrap());
        assert!(decode_step(&dec, &store, &[0.0; 3], &frame, 9).is_err());
    }
}
