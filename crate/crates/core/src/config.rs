//! Run configuration: one versioned document holding every module's settings.
//!
//! Unknown keys are rejected at every level. Any value can be overridden with
//! a dotted path, e.g. `train.beta=0` or `frame.f0_range=[60,400]`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub n_fft: usize,
    pub f0_range: [f64; 2],
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length_ms: 50.0,
            frame_shift_ms: 12.5,
            n_mels: 128,
            n_fft: 2048,
            f0_range: [70.0, 420.0],
        }
    }
}

impl FrameConfig {
    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of analysis frames for `len` samples (no padding).
    pub fn num_frames(&self, len: usize) -> usize {
        let fl = self.frame_length();
        if len < fl {
            0
        } else {
            (len - fl) / self.frame_shift() + 1
        }
    }

    /// Waveform length that yields exactly `frames` analysis frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.frame_shift() + self.frame_length()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("frame.sample_rate must be positive".into()));
        }
        if self.frame_length() == 0 || self.frame_shift() == 0 {
            return Err(Error::Config("frame length and shift must be at least one sample".into()));
        }
        if self.n_fft < self.frame_length() {
            return Err(Error::Config("frame.n_fft must be at least the frame length".into()));
        }
        if self.n_mels < 2 {
            return Err(Error::Config("frame.n_mels must be at least 2".into()));
        }
        let [lo, hi] = self.f0_range;
        if !(lo > 0.0 && lo < hi && hi < self.sample_rate as f64 / 4.0) {
            return Err(Error::Config(format!(
                "frame.f0_range must satisfy 0 < min < max < sample_rate/4, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Pretraining speakers; the adaptation target gets id `n_speakers`.
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub target_utterances: usize,
    /// Held-out target utterances used to validate adaptation.
    pub adapt_holdout: usize,
    pub test_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_phones: usize,
    pub n_unvoiced_phones: usize,
    pub d_bn: usize,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utterances_per_speaker: 50,
            target_utterances: 50,
            adapt_holdout: 10,
            test_per_speaker: 10,
            min_frames: 80,
            max_frames: 240,
            n_phones: 12,
            n_unvoiced_phones: 3,
            d_bn: 64,
            min_phone_frames: 6,
            max_phone_frames: 20,
        }
    }
}

impl CorpusConfig {
    pub fn target_speaker_id(&self) -> usize {
        self.n_speakers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers < 2 {
            return bad("corpus.n_speakers must be at least 2");
        }
        if self.utterances_per_speaker == 0 || self.target_utterances == 0 {
            return bad("corpus utterance counts must be positive");
        }
        if self.adapt_holdout >= self.target_utterances {
            return bad("corpus.adapt_holdout must be smaller than corpus.target_utterances");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("corpus frame range must satisfy 0 < min_frames <= max_frames");
        }
        if self.n_unvoiced_phones == 0 || self.n_unvoiced_phones >= self.n_phones {
            return bad("corpus.n_unvoiced_phones must be in [1, n_phones)");
        }
        if self.d_bn < self.n_phones {
            return bad("corpus.d_bn must be at least corpus.n_phones");
        }
        if self.min_phone_frames == 0 || self.min_phone_frames > self.max_phone_frames {
            return bad("corpus phone duration range is empty");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_inner: usize,
    pub enc_prenet: [usize; 2],
    pub enc_prenet_dropout: f64,
    pub attn_dropout: f64,
    pub summary_kernel: usize,
    pub positional_encoding: bool,
    pub vae_channels: usize,
    pub vae_hidden: usize,
    pub d_z: usize,
    pub ref_channels: usize,
    pub ref_hidden: usize,
    pub d_r: usize,
    pub classifier_hidden: usize,
    pub d_spk: usize,
    pub dec_prenet: [usize; 2],
    pub dec_prenet_dropout: f64,
    pub dec_hidden: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    /// Explicit lf0/vuv/energy conditioning at the decoder.
    pub use_explicit_prosody: bool,
    /// VAE and reference-encoder embeddings at the decoder.
    pub use_implicit_prosody: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_blocks: 6,
            n_heads: 2,
            ffn_inner: 512,
            enc_prenet: [256, 128],
            enc_prenet_dropout: 0.5,
            attn_dropout: 0.1,
            summary_kernel: 3,
            positional_encoding: true,
            vae_channels: 64,
            vae_hidden: 64,
            d_z: 16,
            ref_channels: 32,
            ref_hidden: 64,
            d_r: 16,
            classifier_hidden: 64,
            d_spk: 32,
            dec_prenet: [128, 128],
            dec_prenet_dropout: 0.5,
            dec_hidden: 256,
            postnet_channels: 128,
            postnet_layers: 5,
            postnet_kernel: 5,
            use_explicit_prosody: true,
            use_implicit_prosody: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths that pretrain in a few minutes on one CPU core.
    /// Block count, head count and every structural choice are unchanged.
    pub fn compact() -> Self {
        Self {
            d_model: 32,
            ffn_inner: 64,
            enc_prenet: [64, 32],
            vae_channels: 32,
            vae_hidden: 32,
            ref_channels: 16,
            ref_hidden: 32,
            classifier_hidden: 32,
            d_spk: 16,
            dec_prenet: [64, 32],
            dec_hidden: 64,
            postnet_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_blocks == 0 {
            return bad("model.n_blocks must be at least 1");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("model.d_model must be divisible by model.n_heads");
        }
        if self.postnet_layers < 2 {
            return bad("model.postnet_layers must be at least 2");
        }
        if self.summary_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return bad("convolution kernels must be odd for same-padding");
        }
        for p in [self.enc_prenet_dropout, self.attn_dropout, self.dec_prenet_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma_max: f64,
    pub gamma_ramp_frac: f64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    /// Consecutive discriminator steps per cycle.
    pub d_steps: u64,
    /// Consecutive generator steps per cycle.
    pub g_steps: u64,
    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub adapt_steps: u64,
    pub grad_clip: f64,
    pub logvar_clamp: [f64; 2],
    pub checkpoint_every: u64,
    /// What the speaker classifier reads in both phases.
    pub classifier_input: ClassifierInput,
}

/// Utterance latent seen by the speaker classifier during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// Reparameterized sample `z`.
    Sample,
    /// Posterior mean `mu`, standardized per dimension across the batch.
    Mean,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma_max: 1e-3,
            gamma_ramp_frac: 0.2,
            lr0: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 1000,
            d_steps: 5,
            g_steps: 5,
            batch_size: 8,
            pretrain_steps: 2000,
            adapt_steps: 500,
            grad_clip: 1.0,
            logvar_clamp: [-8.0, 4.0],
            checkpoint_every: 500,
            classifier_input: ClassifierInput::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad("train.beta must be a finite value >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("train.lr_decay_every must be positive");
        }
        if self.d_steps + self.g_steps == 0 || self.g_steps == 0 {
            return bad("train.g_steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr0 > 0.0) || self.gamma_max < 0.0 || self.gamma_ramp_frac < 0.0 {
            return bad("train.lr0 must be positive and KL schedule values non-negative");
        }
        if self.logvar_clamp[0] >= self.logvar_clamp[1] {
            return bad("train.logvar_clamp must be an increasing pair");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sweep_coefficients: Vec<f64>,
    pub probe_folds: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_hidden: usize,
    pub comb_harmonics: usize,
    pub comb_max_freq: f64,
    pub comb_threshold: f64,
    pub export_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sweep_coefficients: vec![0.5, 1.0, 1.5],
            probe_folds: 5,
            probe_epochs: 300,
            probe_lr: 1e-2,
            probe_hidden: 32,
            comb_harmonics: 8,
            comb_max_freq: 2000.0,
            comb_threshold: 0.25,
            export_points: 30,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep_coefficients.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("eval.sweep_coefficients must be positive".into()));
        }
        if self.probe_folds < 2 {
            return Err(Error::Config("eval.probe_folds must be at least 2".into()));
        }
        if self.comb_harmonics == 0 {
            return Err(Error::Config("eval.comb_harmonics must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub frame: FrameConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            frame: FrameConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.frame.validate()?;
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.frame.n_mels < 64 {
            return Err(Error::Config(
                "frame.n_mels must be at least 64 for mel-domain pitch estimation".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when possible,
    /// otherwise as a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut cursor = &mut doc;
            let parts: Vec<&str> = path.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = cursor
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{path}` does not name a config key")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key `{path}`")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                cursor = obj.get_mut(*part).expect("checked above");
            }
        }
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every leaf key with its default value, one `key = value` per line.
    pub fn describe_defaults() -> String {
        let doc = serde_json::to_value(Self::default()).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &doc, &mut lines);
        lines.join("\n")
    }

    /// Stable short hash of the canonical config text, used to name run directories.
    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_geometry_at_16k() {
        let f = FrameConfig::default();
        assert_eq!(f.frame_length(), 800);
        assert_eq!(f.frame_shift(), 200);
        assert_eq!(f.num_frames(16_000), 77);
    }

    #[test]
    fn overrides_reach_nested_keys_and_reject_unknown() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.beta=0", "frame.f0_range=[60,400]"])
            .unwrap();
        assert_eq!(cfg.train.beta, 0.0);
        assert_eq!(cfg.frame.f0_range, [60.0, 400.0]);
        assert!(RunConfig::default().with_overrides(&["train.bogus=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.beta=-1"]).is_err());
    }

    #[test]
    fn unknown_keys_rejected_in_documents() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        doc["model"]["extra"] = Value::from(3);
        assert!(RunConfig::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn describe_lists_every_leaf() {
        let text = RunConfig::describe_defaults();
        for key in [
            "train.beta = 0.1",
            "train.classifier_input = \"mean\"",
            "frame.n_mels = 128",
            "model.n_blocks = 6",
            "seed = 7",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
