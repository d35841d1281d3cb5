//! Joint optimization with alternating discriminator/generator phases, KL
//! annealing, step-decayed learning rate, and decoder-only adaptation.
//!
//! Every random draw of step `s` comes from a named substream of the run seed
//! indexed by `s`, so a run resumed from a checkpoint continues exactly.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ClassifierInput, RunConfig, TrainConfig};
use crate::corpus::{Corpus, Split};
use crate::decoder::recon_loss_graph;
use crate::error::{Error, Result};
use crate::model::{DecoderContext, Latent, MelStats, Model, ModelInput};
use crate::nn::optim::{clip_global_norm, Adam};
use crate::nn::{Graph, Matrix};
use crate::prosody::graph_loss;
use crate::seeds::{substream, substream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    D,
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub gamma: f64,
    pub phase: Phase,
}

/// Learning rate, KL weight and phase at pretraining step `step`.
pub fn schedule(cfg: &TrainConfig, step: u64) -> Schedule {
    let lr = cfg.lr0 * cfg.lr_decay.powi((step / cfg.lr_decay_every) as i32);
    let ramp = cfg.gamma_ramp_frac * cfg.pretrain_steps as f64;
    let gamma = if ramp > 0.0 {
        cfg.gamma_max * (step as f64 / ramp).min(1.0)
    } else {
        cfg.gamma_max
    };
    let phase = if step % (cfg.d_steps + cfg.g_steps) < cfg.d_steps {
        Phase::D
    } else {
        Phase::G
    };
    Schedule { lr, gamma, phase }
}

/// Learning rate used throughout adaptation: the last pretraining value.
pub fn adapt_lr(cfg: &TrainConfig) -> f64 {
    schedule(cfg, cfg.pretrain_steps.saturating_sub(1)).lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLosses {
    pub recon: f64,
    pub adv: f64,
    pub kl: f64,
}

impl GeneratorLosses {
    /// `L_recons + β·L_adv + γ·L_kl`.
    pub fn total(&self, beta: f64, gamma: f64) -> f64 {
        self.recon + beta * self.adv + gamma * self.kl
    }

    pub fn check(&self, step: u64) -> Result<()> {
        for (name, v) in [("recon", self.recon), ("adv", self.adv), ("kl", self.kl)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    component: name.into(),
                });
            }
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: Stage,
    pub phase: Phase,
    pub lr: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
}

impl MetricRecord {
    pub(crate) fn new(step: u64, stage: Stage, phase: Phase, lr: f64, gamma: f64) -> Self {
        Self {
            step,
            stage,
            phase,
            lr,
            gamma,
            loss: None,
            recon: None,
            adv: None,
            kl: None,
            ce: None,
            grad_norm: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

/// Prepared utterances with classifier labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub items: Vec<ModelInput>,
    pub labels: Vec<usize>,
}

impl TrainData {
    pub fn from_split(model: &Model, corpus: &Corpus, split: Split) -> Result<Self> {
        Self::from_utterances(model, &corpus.split(split))
    }

    pub fn from_utterances(model: &Model, utts: &[&crate::corpus::Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::InsufficientData("no utterances to train on".into()));
        }
        let items = utts
            .iter()
            .map(|u| model.input(u, u.speaker_id, 1.0, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            labels: utts.iter().map(|u| u.speaker_id).collect(),
        })
    }

    /// Adaptation utterances and the held-out validation tail.
    pub fn adaptation(model: &Model, corpus: &Corpus) -> Result<(Self, Self)> {
        let (train, held) = corpus.adapt_partition();
        if held.is_empty() {
            return Err(Error::InsufficientData("adaptation hold-out is empty".into()));
        }
        Ok((Self::from_utterances(model, &train)?, Self::from_utterances(model, &held)?))
    }

    fn batch(&self, seed: u64, name: &str, step: u64, size: usize) -> Vec<usize> {
        let mut rng = substream(seed, name, step);
        sample(&mut rng, self.items.len(), size.min(self.items.len())).into_vec()
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub stage: Stage,
    /// Steps completed in the current stage.
    pub step: u64,
    pub log: Vec<MetricRecord>,
}

impl TrainState {
    /// Fresh model whose mel statistics come from the corpus training split.
    pub fn new(run: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let train = corpus.split(Split::Train);
        let stats = MelStats::from_mels(train.iter().map(|u| &u.mel))?;
        let model = Model::new(run, stats)?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            adam,
            stage: Stage::Pretrain,
            step: 0,
            log: Vec::new(),
        })
    }

    fn seed(&self) -> u64 {
        self.model.run.seed
    }

    fn cfg(&self) -> &TrainConfig {
        &self.model.run.train
    }

    /// One pretraining step at `self.step`.
    pub fn pretrain_step(&mut self, data: &TrainData) -> Result<MetricRecord> {
        let step = self.step;
        let sched = schedule(self.cfg(), step);
        let batch = data.batch(self.seed(), "batch", step, self.cfg().batch_size);
        let mut rec = MetricRecord::new(step, Stage::Pretrain, sched.phase, sched.lr, sched.gamma);
        match sched.phase {
            Phase::D if self.model.implicit.is_some() => self.discriminator_step(data, &batch, &mut rec)?,
            Phase::D => {}
            Phase::G => self.generator_step(data, &batch, &mut rec)?,
        }
        self.step += 1;
        self.log.push(rec.clone());
        Ok(rec)
    }

    fn noise(&self, name: &str, rows: usize) -> Matrix {
        let d_z = self.model.run.model.d_z;
        let mut rng = substream(self.seed(), name, self.step);
        Matrix::from_vec(rows, d_z, (0..rows * d_z).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn apply(&mut self, g: &Graph, loss: crate::nn::Var, lr: f64, rec: &mut MetricRecord) -> Result<()> {
        let mut grads = g.backward(loss);
        let norm = clip_global_norm(&mut grads, self.cfg().grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                component: "gradient".into(),
            });
        }
        rec.grad_norm = Some(norm);
        self.adam.step(&mut self.model.store, &grads, lr);
        self.model.trained_steps += 1;
        Ok(())
    }

    /// Classifier update on detached posterior samples; only classifier parameters change.
    fn discriminator_step(&mut self, data: &TrainData, batch: &[usize], rec: &mut MetricRecord) -> Result<()> {
        let model = &self.model;
        let mut g = Graph::new(model.classifier_mask(), true, substream_seed(self.seed(), "dropout", self.step));
        let mels: Vec<_> = batch.iter().map(|&i| g.constant(data.items[i].mel.clone())).collect();
        let (mu, lv) = model.vae_forward(&mut g, &mels).expect("implicit prosody present");
        let z = match self.cfg().classifier_input {
            ClassifierInput::Sample => graph_loss::reparameterize(&mut g, mu, lv, self.noise("sampling", batch.len())),
            ClassifierInput::Mean => graph_loss::standardize_batch(&mut g, mu, 1e-6),
        };
        let z = g.detach(z);
        let probs = model.classify(&mut g, z).expect("implicit prosody present");
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let ce = graph_loss::ce(&mut g, probs, &labels);
        let value = g.value(ce).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                component: "ce".into(),
            });
        }
        rec.ce = Some(value);
        rec.loss = Some(value);
        self.apply(&g, ce, rec.lr, rec)
    }

    /// Generator update of everything except the classifier.
    fn generator_step(&mut self, data: &TrainData, batch: &[usize], rec: &mut MetricRecord) -> Result<()> {
        let model = &self.model;
        let beta = self.cfg().beta;
        let mut g = Graph::new(model.generator_mask(), true, substream_seed(self.seed(), "dropout", self.step));
        let items: Vec<&ModelInput> = batch.iter().map(|&i| &data.items[i]).collect();
        let noise = self.noise("sampling", batch.len());
        let fwd = model.forward(&mut g, &items, Latent::Sample(noise), true);
        let recon = recon_loss_graph(&mut g, &fwd.outputs, &fwd.targets);
        let mut total = recon;
        let mut losses = GeneratorLosses {
            recon: g.value(recon).item(),
            adv: 0.0,
            kl: 0.0,
        };
        if let (Some(mu), Some(lv), Some(z)) = (fwd.mu, fwd.logvar, fwd.z) {
            let seen = match self.cfg().classifier_input {
                ClassifierInput::Sample => z,
                ClassifierInput::Mean => graph_loss::standardize_batch(&mut g, mu, 1e-6),
            };
            let probs = model.classify(&mut g, seen).expect("implicit prosody present");
            let adv = graph_loss::adv(&mut g, probs);
            let kl = graph_loss::kl(&mut g, mu, lv);
            losses.adv = g.value(adv).item();
            losses.kl = g.value(kl).item();
            let a = g.scale(adv, beta);
            let k = g.scale(kl, rec.gamma);
            total = g.add(total, a);
            total = g.add(total, k);
            rec.adv = Some(losses.adv);
            rec.kl = Some(losses.kl);
        }
        losses.check(self.step)?;
        rec.recon = Some(losses.recon);
        rec.loss = Some(losses.total(beta, rec.gamma));
        self.apply(&g, total, rec.lr, rec)
    }

    /// Runs pretraining until `self.step == pretrain_steps`, calling `after_step` after each step.
    pub fn pretrain(&mut self, data: &TrainData, mut after_step: impl FnMut(&TrainState, &MetricRecord) -> Result<()>) -> Result<()> {
        if self.stage != Stage::Pretrain {
            return Ok(());
        }
        while self.step < self.cfg().pretrain_steps {
            let rec = self.pretrain_step(data)?;
            after_step(self, &rec)?;
        }
        Ok(())
    }

    /// Switches to adaptation; the stage step counter restarts at zero.
    pub fn begin_adapt(&mut self) {
        if self.stage == Stage::Pretrain {
            self.stage = Stage::Adapt;
            self.step = 0;
        }
    }

    /// Fine-tunes only the decoder group on the target speaker. Upstream
    /// modules are frozen and run in inference mode, so their outputs are
    /// computed once.
    pub fn adapt(&mut self, data: &TrainData, mut after_step: impl FnMut(&TrainState, &MetricRecord) -> Result<()>) -> Result<()> {
        self.begin_adapt();
        let contexts: Vec<DecoderContext> = data.items.iter().map(|i| self.model.decoder_context(i)).collect();
        let lr = adapt_lr(self.cfg());
        let gamma = self.cfg().gamma_max;
        while self.step < self.cfg().adapt_steps {
            let batch = data.batch(self.seed(), "adapt-batch", self.step, self.cfg().batch_size);
            let mut rec = MetricRecord::new(self.step, Stage::Adapt, Phase::G, lr, gamma);
            let model = &self.model;
            let mut g = Graph::new(model.decoder_mask(), true, substream_seed(self.seed(), "adapt-dropout", self.step));
            let conds: Vec<_> = batch
                .iter()
                .map(|&i| model.context_conditions(&mut g, &contexts[i], data.items[i].speaker))
                .collect();
            let targets: Vec<_> = batch.iter().map(|&i| g.constant(data.items[i].mel.clone())).collect();
            let outputs = model.decoder.teacher_forced(&mut g, &model.store, &conds, &targets);
            let recon = recon_loss_graph(&mut g, &outputs, &targets);
            let value = g.value(recon).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    component: "recon".into(),
                });
            }
            rec.recon = Some(value);
            rec.loss = Some(value);
            self.apply(&g, recon, lr, &mut rec)?;
            self.step += 1;
            self.log.push(rec.clone());
            after_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Teacher-forced reconstruction loss with the posterior mean latent, averaged over utterances.
pub fn teacher_forced_loss(model: &Model, data: &TrainData, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, item) in data.items.iter().enumerate() {
        let mut g = Graph::inference(&model.store, substream_seed(seed, "validation", i as u64));
        let fwd = model.forward(&mut g, &[item], Latent::Mean, true);
        let l = recon_loss_graph(&mut g, &fwd.outputs, &fwd.targets);
        total += g.value(l).item();
    }
    let mean = total / data.items.len() as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFinite("validation loss"))
    }
}

/// Mean of the recon values in the first and last `window` generator records.
pub fn smoothed_recon(log: &[MetricRecord], window: usize) -> Option<(f64, f64)> {
    let recon: Vec<f64> = log
        .iter()
        .filter(|r| r.stage == Stage::Pretrain)
        .filter_map(|r| r.recon)
        .collect();
    if recon.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&recon[..window]), mean(&recon[recon.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        let s0 = schedule(&cfg, 0);
        assert_eq!((s0.lr, s0.gamma, s0.phase), (cfg.lr0, 0.0, Phase::D));
        let phases: Vec<Phase> = (0..15).map(|s| schedule(&cfg, s).phase).collect();
        assert!(phases[..5].iter().all(|&p| p == Phase::D));
        assert!(phases[5..10].iter().all(|&p| p == Phase::G));
        assert!(phases[10..].iter().all(|&p| p == Phase::D));
        let full_scale = TrainConfig {
            lr0: 2e-4,
            lr_decay: 0.5,
            lr_decay_every: 25_000,
            ..TrainConfig::default()
        };
        assert_eq!(schedule(&full_scale, 25_000).lr, 1e-4);
        assert_eq!(schedule(&full_scale, 24_999).lr, 2e-4);
        let ramp_end = (cfg.gamma_ramp_frac * cfg.pretrain_steps as f64) as u64;
        assert_eq!(schedule(&cfg, ramp_end).gamma, cfg.gamma_max);
        assert_eq!(schedule(&cfg, cfg.pretrain_steps).gamma, cfg.gamma_max);
    }

    #[test]
    fn schedule_is_monotone() {
        let cfg = TrainConfig::default();
        let mut prev = schedule(&cfg, 0);
        for s in 1..3000 {
            let cur = schedule(&cfg, s);
            assert!(cur.gamma >= prev.gamma && cur.lr <= prev.lr);
            prev = cur;
        }
    }

    #[test]
    fn generator_loss_arithmetic() {
        let l = GeneratorLosses {
            recon: 1.0,
            adv: 0.5,
            kl: 2.0,
        };
        assert!((l.total(0.1, 0.001) - 1.052).abs() < 1e-12);
        assert_eq!(l.total(0.0, 0.0), 1.0);
        let bad = GeneratorLosses { kl: f64::NAN, ..l };
        assert!(matches!(bad.check(7), Err(Error::Divergence { step: 7, .. })));
    }

    #[test]
    fn metric_records_round_trip() {
        let mut r = MetricRecord::new(3, Stage::Pretrain, Phase::G, 1e-3, 0.5);
        r.recon = Some(0.25);
        let back: MetricRecord = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}
