//! Implicit prosody modelling: an utterance-level VAE over mel, a reference
//! encoder over bottleneck features, and the adversarial speaker classifier
//! with its cross-entropy and uniformity losses.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv1d, Gru, Init, Linear};
use crate::nn::{Graph, Matrix, ParamStore, Var};

/// Floor inside the log of the cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

/// Utterance-level latents for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyLatent {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
}

impl ProsodyLatent {
    /// `z ∥ r`, the vector broadcast to every decoder frame.
    pub fn embedding(&self) -> Vec<f64> {
        self.z.iter().chain(&self.r).copied().collect()
    }
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")))
    }
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    check_len(mu.len(), logvar.len(), "mu/logvar")?;
    check_len(mu.len(), noise.len(), "mu/noise")?;
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// `KL(N(mu, diag e^logvar) ‖ N(0, I))`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    check_len(mu.len(), logvar.len(), "mu/logvar")?;
    check_finite(mu, "mu")?;
    check_finite(logvar, "logvar")?;
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>())
}

/// `−log max(p[label], 1e-12)`.
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    check_finite(probs, "speaker probabilities")?;
    let p = probs
        .get(label)
        .ok_or_else(|| Error::ShapeMismatch(format!("label {label} outside {} classes", probs.len())))?;
    Ok(-p.max(CE_FLOOR).ln())
}

/// Squared distance from the uniform distribution.
pub fn adv_loss(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::ShapeMismatch("empty speaker distribution".into()));
    }
    check_finite(probs, "speaker probabilities")?;
    let e = 1.0 / probs.len() as f64;
    Ok(probs.iter().map(|p| (p - e).powi(2)).sum())
}

/// Batched graph forms of the losses; rows are utterances, results are batch means.
pub mod graph_loss {
    use super::*;

    pub fn kl(g: &mut Graph, mu: Var, logvar: Var) -> Var {
        let rows = g.shape(mu).0 as f64;
        let e = g.exp(logvar);
        let m2 = g.square(mu);
        let s = g.add(e, m2);
        let s = g.sub(s, logvar);
        let s = g.add_scalar(s, -1.0);
        let total = g.sum_all(s);
        g.scale(total, 0.5 / rows)
    }

    pub fn ce(g: &mut Graph, probs: Var, labels: &[usize]) -> Var {
        let (rows, classes) = g.shape(probs);
        assert_eq!(rows, labels.len(), "one label per row");
        let mut onehot = Matrix::zeros(rows, classes);
        for (i, &l) in labels.iter().enumerate() {
            onehot.set(i, l, 1.0);
        }
        let logp = g.log_floor(probs, CE_FLOOR);
        let picked = g.mask_mul(logp, onehot);
        let total = g.sum_all(picked);
        g.scale(total, -1.0 / rows as f64)
    }

    pub fn adv(g: &mut Graph, probs: Var) -> Var {
        let (rows, classes) = g.shape(probs);
        let d = g.add_scalar(probs, -1.0 / classes as f64);
        let sq = g.square(d);
        let total = g.sum_all(sq);
        g.scale(total, 1.0 / rows as f64)
    }

    /// Per-dimension standardization across the rows of a batch.
    pub fn standardize_batch(g: &mut Graph, x: Var, eps: f64) -> Var {
        let rows = g.shape(x).0;
        let mean = g.mean_rows(x);
        let mean = g.broadcast_rows(mean, rows);
        let centered = g.sub(x, mean);
        let sq = g.square(centered);
        let var = g.mean_rows(sq);
        let var = g.add_scalar(var, eps);
        let log_var = g.log_floor(var, eps);
        let half = g.scale(log_var, -0.5);
        let inv_std = g.exp(half);
        g.mul_row(centered, inv_std)
    }

    pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, noise: Matrix) -> Var {
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let scaled = g.mask_mul(std, noise);
        g.add(mu, scaled)
    }
}

fn conv_stack(g: &mut Graph, store: &ParamStore, convs: &[Conv1d], x: Var) -> Var {
    convs.iter().fold(x, |h, c| {
        let y = c.forward(g, store, h);
        g.relu(y)
    })
}

/// Utterance-level VAE: two stride-2 convolutions, a GRU, and mean/log-variance heads.
#[derive(Clone, Debug)]
pub struct Vae {
    pub convs: Vec<Conv1d>,
    pub rnn: Gru,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub logvar_clamp: [f64; 2],
}

impl Vae {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, n_mels: usize, logvar_clamp: [f64; 2]) -> Self {
        let c = cfg.vae_channels;
        let convs = vec![
            Conv1d::new(store, rng, "vae.conv0", n_mels, c, 3, 2, Init::Glorot),
            Conv1d::new(store, rng, "vae.conv1", c, c, 3, 2, Init::Glorot),
        ];
        Self {
            convs,
            rnn: Gru::new(store, rng, "vae.rnn", c, cfg.vae_hidden),
            mu_head: Linear::new(store, rng, "vae.mu", cfg.vae_hidden, cfg.d_z, true, Init::Zero),
            logvar_head: Linear::new(store, rng, "vae.logvar", cfg.vae_hidden, cfg.d_z, true, Init::Zero),
            logvar_clamp,
        }
    }

    /// Encodes a batch of `[T_i × n_mels]` mels to `(mu, logvar)`, each `[B × d_z]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mels: &[Var]) -> (Var, Var) {
        let projections: Vec<Var> = mels
            .iter()
            .map(|&m| {
                let h = conv_stack(g, store, &self.convs, m);
                self.rnn.project_inputs(g, store, h)
            })
            .collect();
        let (_, last) = self.rnn.run(g, store, &projections);
        let mu = self.mu_head.forward(g, store, last);
        let lv = self.logvar_head.forward(g, store, last);
        let lv = g.clamp(lv, self.logvar_clamp[0], self.logvar_clamp[1]);
        (mu, lv)
    }
}

/// Reference encoder over bottleneck features: four stride-2 convolutions, a GRU, tanh projection.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub convs: Vec<Conv1d>,
    pub rnn: Gru,
    pub proj: Linear,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, d_bn: usize) -> Self {
        let c = cfg.ref_channels;
        let convs = (0..4)
            .map(|i| {
                let c_in = if i == 0 { d_bn } else { c };
                Conv1d::new(store, rng, &format!("reference.conv{i}"), c_in, c, 3, 2, Init::Glorot)
            })
            .collect();
        Self {
            convs,
            rnn: Gru::new(store, rng, "reference.rnn", c, cfg.ref_hidden),
            proj: Linear::new(store, rng, "reference.proj", cfg.ref_hidden, cfg.d_r, true, Init::Glorot),
        }
    }

    /// `[B × d_r]` for a batch of `[T_i × d_bn]` inputs.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bns: &[Var]) -> Var {
        let projections: Vec<Var> = bns
            .iter()
            .map(|&b| {
                let h = conv_stack(g, store, &self.convs, b);
                self.rnn.project_inputs(g, store, h)
            })
            .collect();
        let (_, last) = self.rnn.run(g, store, &projections);
        let r = self.proj.forward(g, store, last);
        g.tanh(r)
    }
}

/// Three fully connected layers ending in a softmax over the pretraining speakers.
#[derive(Clone, Debug)]
pub struct SpeakerClassifier {
    pub layers: [Linear; 3],
}

impl SpeakerClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, hidden: usize, n_speakers: usize) -> Self {
        Self {
            layers: [
                Linear::new(store, rng, &format!("{prefix}.fc0"), d_in, hidden, true, Init::Glorot),
                Linear::new(store, rng, &format!("{prefix}.fc1"), hidden, hidden, true, Init::Glorot),
                Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, n_speakers, true, Init::Zero),
            ],
        }
    }

    /// Speaker posteriors `[B × S]` for latents `[B × d_z]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let h = self.layers[0].forward(g, store, z);
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h);
        let h = g.relu(h);
        let logits = self.layers[2].forward(g, store, h);
        g.softmax_rows(logits)
    }
}

fn single_row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).row(0).to_vec()
}

/// Inference-mode `(mu, logvar)` for one mel `[T × n_mels]`.
pub fn vae_encode(vae: &Vae, store: &ParamStore, mel: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if mel.rows() == 0 {
        return Err(Error::InvalidInput("mel has no frames".into()));
    }
    if !mel.all_finite() {
        return Err(Error::NonFinite("mel"));
    }
    let mut g = Graph::inference(store, 0);
    let m = g.constant(mel.clone());
    let (mu, lv) = vae.forward(&mut g, store, &[m]);
    Ok((single_row(&g, mu), single_row(&g, lv)))
}

/// Inference-mode reference embedding for one BN sequence.
pub fn reference_encode(enc: &ReferenceEncoder, store: &ParamStore, bn: &Matrix) -> Result<Vec<f64>> {
    if bn.rows() == 0 {
        return Err(Error::InvalidInput("bottleneck features have no frames".into()));
    }
    if !bn.all_finite() {
        return Err(Error::NonFinite("bottleneck features"));
    }
    let mut g = Graph::inference(store, 0);
    let b = g.constant(bn.clone());
    let r = enc.forward(&mut g, store, &[b]);
    Ok(single_row(&g, r))
}

pub fn classify_speaker(clf: &SpeakerClassifier, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z, "latent")?;
    let mut g = Graph::inference(store, 0);
    let zv = g.constant(Matrix::row_vector(z.to_vec()));
    let p = clf.forward(&mut g, store, zv);
    Ok(single_row(&g, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn closed_forms() {
        assert_eq!(reparameterize(&[1.0], &[4f64.ln()], &[0.5]).unwrap(), vec![2.0]);
        assert_eq!(reparameterize(&[0.3, -1.0], &[0.7, 2.0], &[0.0, 0.0]).unwrap(), vec![0.3, -1.0]);
        assert!(close(kl_loss(&[1.0], &[0.0]).unwrap(), 0.5, 1e-12));
        assert!(close(kl_loss(&[0.0], &[2f64.ln()]).unwrap(), 0.5 * (1.0 - 2f64.ln()), 1e-12));
        assert!(close(ce_loss(&[0.25; 4], 2).unwrap(), 4f64.ln(), 1e-12));
        assert_eq!(ce_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(close(ce_loss(&[0.0, 1.0], 0).unwrap(), -CE_FLOOR.ln(), 1e-9));
        assert!(close(adv_loss(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75, 1e-12));
        assert!(close(adv_loss(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 0.25, 1e-12));
    }

    #[test]
    fn batch_standardization_ignores_column_scale() {
        let data = vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 2.5, 1.0];
        let scaled: Vec<f64> = data.iter().enumerate().map(|(i, v)| v * if i % 2 == 0 { 1e-3 } else { 40.0 }).collect();
        let run = |d: Vec<f64>| {
            let mut g = Graph::new(vec![], false, 0);
            let x = g.constant(Matrix::from_vec(4, 2, d));
            let y = graph_loss::standardize_batch(&mut g, x, 1e-12);
            g.value(y).clone()
        };
        let (a, b) = (run(data), run(scaled));
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| a.get(r, c)).collect();
            assert!(close(col.iter().sum::<f64>(), 0.0, 1e-9));
            assert!(close(col.iter().map(|v| v * v).sum::<f64>() / 4.0, 1.0, 1e-6));
            for r in 0..4 {
                assert!(close(a.get(r, c), b.get(r, c), 1e-5));
            }
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        assert!(matches!(reparameterize(&[1.0], &[0.0, 0.0], &[0.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(kl_loss(&[f64::NAN], &[0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(ce_loss(&[0.5, 0.5], 2), Err(Error::ShapeMismatch(_))));
        assert!(adv_loss(&[]).is_err());
    }

    #[test]
    fn fresh_modules_have_neutral_outputs() {
        let cfg = ModelConfig::compact();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vae = Vae::new(&mut store, &mut rng, &cfg, 16, [-8.0, 4.0]);
        let refenc = ReferenceEncoder::new(&mut store, &mut rng, &cfg, 12);
        let clf = SpeakerClassifier::new(&mut store, &mut rng, "classifier", cfg.d_z, 8, 4);
        let mel = Matrix::from_vec(9, 16, (0..144).map(|i| (i as f64 * 0.37).sin()).collect());
        let (mu, lv) = vae_encode(&vae, &store, &mel).unwrap();
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
        assert_eq!(vae_encode(&vae, &store, &mel.clone()).unwrap().0, mu);
        for t in [80, 240, 1] {
            let bn = Matrix::filled(t, 12, 0.1);
            assert_eq!(reference_encode(&refenc, &store, &bn).unwrap().len(), cfg.d_r);
        }
        let p = classify_speaker(&clf, &store, &[0.4; 16]).unwrap();
        assert!(p.iter().all(|&v| close(v, 0.25, 1e-15)));
    }
}
