//! The full conversion model: encoder, implicit prosody module, decoder, and
//! the mel normalization statistics the model was trained with.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FrameConfig, RunConfig};
use crate::corpus::Utterance;
use crate::decoder::{Decoder, DecoderDims};
use crate::dsp::{MelSpectrogram, ProsodyTrack};
use crate::encoder::SawaEncoder;
use crate::error::{Error, Result};
use crate::nn::{Graph, Matrix, ParamStore, Var};
use crate::prosody::{graph_loss, ReferenceEncoder, SpeakerClassifier, Vae};
use crate::seeds::substream_seed;

/// Parameter name prefix of the adversarial speaker classifier.
pub const CLASSIFIER_PREFIX: &str = "classifier.";
/// Parameter name prefix of the decoder group, including the speaker table.
pub const DECODER_PREFIX: &str = "decoder.";

const MIN_STD: f64 = 1e-3;

/// Per-band mean and standard deviation of log-mel over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    pub fn from_mels<'a>(mels: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mels {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            if m.cols() != sum.len() {
                return Err(Error::ShapeMismatch("mel band counts differ".into()));
            }
            for r in 0..m.rows() {
                for (b, &v) in m.row(r).iter().enumerate() {
                    sum[b] += v;
                    sq[b] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::InsufficientData("no frames for mel statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (b, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[b]) / self.std[b];
            }
        }
        out
    }

    pub fn denormalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (b, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[b] + self.mean[b];
            }
        }
        out
    }
}

/// `[T × 3]` explicit conditions `(lf0_norm, vuv, energy_norm)`, with the
/// normalized contours scaled and clipped back to `[0, 1]`.
pub fn explicit_features(p: &ProsodyTrack, scale_f0: f64, scale_energy: f64) -> Matrix {
    let t = p.len();
    let mut m = Matrix::zeros(t, 3);
    for i in 0..t {
        m.set(i, 0, (p.lf0_norm[i] * scale_f0).clamp(0.0, 1.0));
        m.set(i, 1, f64::from(p.vuv[i]));
        m.set(i, 2, (p.energy_norm[i] * scale_energy).clamp(0.0, 1.0));
    }
    m
}

#[derive(Clone, Debug)]
pub struct ImplicitProsody {
    pub vae: Vae,
    pub reference: ReferenceEncoder,
    pub classifier: SpeakerClassifier,
}

/// Model-ready tensors for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub bn: Matrix,
    /// Normalized log-mel; the VAE input and the teacher-forcing target.
    pub mel: Matrix,
    pub explicit: Matrix,
    pub speaker: usize,
}

/// How the utterance latent is drawn from the VAE posterior.
#[derive(Clone, Debug)]
pub enum Latent {
    /// `[B × d_z]` standard-normal noise for reparameterization.
    Sample(Matrix),
    Mean,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub outputs: Vec<(Var, Var)>,
    pub targets: Vec<Var>,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    pub z: Option<Var>,
}

/// Frozen upstream outputs for one utterance, enough to drive the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderContext {
    pub content: Matrix,
    pub sentential: Matrix,
    pub explicit: Option<Matrix>,
    pub implicit: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub run: RunConfig,
    pub store: ParamStore,
    pub encoder: SawaEncoder,
    pub implicit: Option<ImplicitProsody>,
    pub decoder: Decoder,
    pub mel_stats: MelStats,
    /// Optimizer steps applied so far; conversion refuses a model with none.
    pub trained_steps: u64,
}

impl Model {
    pub fn new(run: &RunConfig, mel_stats: MelStats) -> Result<Self> {
        run.validate()?;
        let cfg = &run.model;
        let n_mels = run.frame.n_mels;
        if mel_stats.mean.len() != n_mels || mel_stats.std.len() != n_mels {
            return Err(Error::ShapeMismatch("mel statistics do not match n_mels".into()));
        }
        let d_bn = run.corpus.d_bn;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(run.seed, "init", 0));
        let mut store = ParamStore::new();
        let encoder = SawaEncoder::new(&mut store, &mut rng, cfg, d_bn);
        let implicit = cfg.use_implicit_prosody.then(|| ImplicitProsody {
            vae: Vae::new(&mut store, &mut rng, cfg, n_mels, run.train.logvar_clamp),
            reference: ReferenceEncoder::new(&mut store, &mut rng, cfg, d_bn),
            classifier: SpeakerClassifier::new(
                &mut store,
                &mut rng,
                "classifier",
                cfg.d_z,
                cfg.classifier_hidden,
                run.corpus.n_speakers,
            ),
        });
        let d_cond = 2 * cfg.d_model
            + if cfg.use_explicit_prosody { 3 } else { 0 }
            + if cfg.use_implicit_prosody { cfg.d_z + cfg.d_r } else { 0 }
            + cfg.d_spk;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            DecoderDims {
                n_mels,
                d_cond,
                d_spk: cfg.d_spk,
                n_speakers: run.corpus.n_speakers + 1,
                prenet: cfg.dec_prenet,
                prenet_dropout: cfg.dec_prenet_dropout,
                hidden: cfg.dec_hidden,
                postnet_channels: cfg.postnet_channels,
                postnet_layers: cfg.postnet_layers,
                postnet_kernel: cfg.postnet_kernel,
            },
        );
        Ok(Self {
            run: run.clone(),
            store,
            encoder,
            implicit,
            decoder,
            mel_stats,
            trained_steps: 0,
        })
    }

    pub fn frame(&self) -> &FrameConfig {
        &self.run.frame
    }

    pub fn num_speakers(&self) -> usize {
        self.decoder.num_speakers(&self.store)
    }

    pub fn classifier_mask(&self) -> Vec<bool> {
        self.store.mask(|n| n.starts_with(CLASSIFIER_PREFIX))
    }

    pub fn generator_mask(&self) -> Vec<bool> {
        self.store.mask(|n| !n.starts_with(CLASSIFIER_PREFIX))
    }

    pub fn decoder_mask(&self) -> Vec<bool> {
        self.store.mask(|n| n.starts_with(DECODER_PREFIX))
    }

    /// Prepares model inputs from an analyzed utterance.
    pub fn input(&self, u: &Utterance, speaker: usize, scale_f0: f64, scale_energy: f64) -> Result<ModelInput> {
        if u.mel.cols() != self.run.frame.n_mels || u.bn.cols() != self.run.corpus.d_bn {
            return Err(Error::ShapeMismatch(format!(
                "utterance {} has {} mel bands and {} BN dims, model expects {} and {}",
                u.id,
                u.mel.cols(),
                u.bn.cols(),
                self.run.frame.n_mels,
                self.run.corpus.d_bn
            )));
        }
        if u.num_frames() == 0 {
            return Err(Error::InvalidInput(format!("utterance {} has no frames", u.id)));
        }
        if !u.mel.all_finite() || !u.bn.all_finite() {
            return Err(Error::NonFinite("utterance features"));
        }
        Ok(ModelInput {
            bn: u.bn.clone(),
            mel: self.mel_stats.normalize(&u.mel),
            explicit: explicit_features(&u.prosody, scale_f0, scale_energy),
            speaker,
        })
    }

    /// VAE posterior parameters for a batch of normalized mels.
    pub fn vae_forward(&self, g: &mut Graph, mels: &[Var]) -> Option<(Var, Var)> {
        self.implicit.as_ref().map(|ip| ip.vae.forward(g, &self.store, mels))
    }

    pub fn classify(&self, g: &mut Graph, z: Var) -> Option<Var> {
        self.implicit.as_ref().map(|ip| ip.classifier.forward(g, &self.store, z))
    }

    /// Runs encoder, prosody module and decoder over a batch.
    pub fn forward(&self, g: &mut Graph, items: &[&ModelInput], latent: Latent, teacher_forced: bool) -> ForwardVars {
        let store = &self.store;
        let bns: Vec<Var> = items.iter().map(|i| g.constant(i.bn.clone())).collect();
        let mels: Vec<Var> = items.iter().map(|i| g.constant(i.mel.clone())).collect();
        let enc: Vec<_> = bns.iter().map(|&b| self.encoder.forward(g, store, b)).collect();
        let (mut mu, mut logvar, mut z, mut emb) = (None, None, None, None);
        if let Some(ip) = &self.implicit {
            let (m, lv) = ip.vae.forward(g, store, &mels);
            let zz = match latent {
                Latent::Sample(noise) => graph_loss::reparameterize(g, m, lv, noise),
                Latent::Mean => m,
            };
            let r = ip.reference.forward(g, store, &bns);
            emb = Some(g.concat_cols(&[zz, r]));
            mu = Some(m);
            logvar = Some(lv);
            z = Some(zz);
        }
        let conds: Vec<Var> = items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let explicit = self
                    .run
                    .model
                    .use_explicit_prosody
                    .then(|| g.constant(item.explicit.clone()));
                let implicit = emb.map(|e| g.slice_rows(e, i, 1));
                self.decoder
                    .conditions(g, store, enc[i].content, enc[i].sentential, explicit, implicit, item.speaker)
            })
            .collect();
        let outputs = if teacher_forced {
            self.decoder.teacher_forced(g, store, &conds, &mels)
        } else {
            self.decoder.free_running(g, store, &conds)
        };
        ForwardVars {
            outputs,
            targets: mels,
            mu,
            logvar,
            z,
        }
    }

    /// Inference-mode upstream outputs (posterior mean latent) for caching.
    pub fn decoder_context(&self, item: &ModelInput) -> DecoderContext {
        let mut g = Graph::inference(&self.store, 0);
        let b = g.constant(item.bn.clone());
        let m = g.constant(item.mel.clone());
        let enc = self.encoder.forward(&mut g, &self.store, b);
        let implicit = self.implicit.as_ref().map(|ip| {
            let (mu, _) = ip.vae.forward(&mut g, &self.store, &[m]);
            let r = ip.reference.forward(&mut g, &self.store, &[b]);
            let e = g.concat_cols(&[mu, r]);
            g.value(e).clone()
        });
        DecoderContext {
            content: g.value(enc.content).clone(),
            sentential: g.value(enc.sentential).clone(),
            explicit: self.run.model.use_explicit_prosody.then(|| item.explicit.clone()),
            implicit,
        }
    }

    /// Decoder conditions built from cached upstream outputs.
    pub fn context_conditions(&self, g: &mut Graph, ctx: &DecoderContext, speaker: usize) -> Var {
        let c = g.constant(ctx.content.clone());
        let s = g.constant(ctx.sentential.clone());
        let e = ctx.explicit.as_ref().map(|m| g.constant(m.clone()));
        let i = ctx.implicit.as_ref().map(|m| g.constant(m.clone()));
        self.decoder.conditions(g, &self.store, c, s, e, i, speaker)
    }

    /// Converts `source` to `target_speaker`, scaling the normalized lf0 and
    /// energy contours before clipping. Output is a de-normalized log-mel with
    /// the source's frame count. `dropout_seed` fixes the decoder prenet mask.
    pub fn convert(
        &self,
        source: &Utterance,
        target_speaker: usize,
        scale_f0: f64,
        scale_energy: f64,
        dropout_seed: u64,
    ) -> Result<MelSpectrogram> {
        if self.trained_steps == 0 {
            return Err(Error::Untrained("no optimizer steps have been applied".into()));
        }
        if target_speaker >= self.num_speakers() {
            return Err(Error::UnknownSpeaker(target_speaker));
        }
        for s in [scale_f0, scale_energy] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidInput(format!("scale {s} must be positive and finite")));
            }
        }
        let item = self.input(source, target_speaker, scale_f0, scale_energy)?;
        let mut g = Graph::inference(&self.store, dropout_seed);
        let out = self.forward(&mut g, &[&item], Latent::Mean, false);
        let post = g.value(out.outputs[0].1);
        if !post.all_finite() {
            return Err(Error::NonFinite("converted mel"));
        }
        Ok(MelSpectrogram {
            frames: self.mel_stats.denormalize(post),
            frame_shift_ms: self.run.frame.frame_shift_ms,
            frame_length_ms: self.run.frame.frame_length_ms,
        })
    }

    /// Posterior mean `mu` for one utterance.
    pub fn latent_mean(&self, u: &Utterance) -> Result<Vec<f64>> {
        let ip = self
            .implicit
            .as_ref()
            .ok_or_else(|| Error::Config("model has no implicit prosody module".into()))?;
        let mel = self.mel_stats.normalize(&u.mel);
        let (mu, _) = crate::prosody::vae_encode(&ip.vae, &self.store, &mel)?;
        Ok(mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            n_blocks: 2,
            ..ModelConfig::compact()
        };
        run
    }

    fn fake_utterance(t: usize, run: &RunConfig) -> Utterance {
        let mel = Matrix::from_vec(t, run.frame.n_mels, (0..t * run.frame.n_mels).map(|i| ((i % 17) as f64 * 0.3).sin() - 3.0).collect());
        let bn = Matrix::from_vec(t, run.corpus.d_bn, (0..t * run.corpus.d_bn).map(|i| ((i % 11) as f64 * 0.2).cos()).collect());
        let lf0: Vec<f64> = (0..t).map(|i| (150.0 + i as f64).ln()).collect();
        let prosody = ProsodyTrack::from_raw(lf0, vec![1; t], (0..t).map(|i| 0.1 + 0.01 * i as f64).collect()).unwrap();
        Utterance {
            id: "u".into(),
            speaker_id: 0,
            split: crate::corpus::Split::Test,
            mel,
            bn,
            prosody,
            oracle_f0: vec![150.0; t],
            oracle_energy: vec![0.1; t],
        }
    }

    #[test]
    fn stats_round_trip() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = MelStats::from_mels([&a]).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-12 && s.std[1] == MIN_STD);
        assert!(s.denormalize(&s.normalize(&a)).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn scaled_explicit_features_stay_in_unit_range() {
        let p = ProsodyTrack::from_raw(vec![4.0, 5.0, 6.0], vec![1, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
        let m = explicit_features(&p, 1.5, 0.5);
        assert_eq!(m.row(2), &[1.0, 1.0, 0.5]);
        for (got, want) in m.row(1).iter().zip([0.75, 1.0, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conversion_contracts() {
        let run = tiny_run();
        let mut model = Model::new(&run, MelStats::identity(run.frame.n_mels)).unwrap();
        let u = fake_utterance(7, &run);
        assert!(matches!(model.convert(&u, 4, 1.0, 1.0, 0), Err(Error::Untrained(_))));
        model.trained_steps = 1;
        let out = model.convert(&u, 4, 1.0, 1.0, 3).unwrap();
        assert_eq!(out.num_frames(), 7);
        assert_eq!(out, model.convert(&u, 4, 1.0, 1.0, 3).unwrap());
        assert!(matches!(model.convert(&u, 5, 1.0, 1.0, 0), Err(Error::UnknownSpeaker(5))));
        assert!(model.convert(&u, 4, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn parameter_groups_partition_the_store() {
        let run = tiny_run();
        let model = Model::new(&run, MelStats::identity(run.frame.n_mels)).unwrap();
        let c = model.classifier_mask();
        let gmask = model.generator_mask();
        let d = model.decoder_mask();
        assert!(c.iter().zip(&gmask).all(|(a, b)| a != b));
        assert!(d.iter().zip(&gmask).all(|(d, g)| !d || *g));
        assert!(model.store.find(crate::decoder::SPEAKER_TABLE).is_some_and(|id| d[id.index()]));
        let mut ablated = run.clone();
        ablated.model.use_explicit_prosody = false;
        ablated.model.use_implicit_prosody = false;
        let m2 = Model::new(&ablated, MelStats::identity(run.frame.n_mels)).unwrap();
        assert!(m2.implicit.is_none() && m2.classifier_mask().iter().all(|&b| !b));
    }
}
