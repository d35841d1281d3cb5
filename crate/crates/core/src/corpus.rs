//! Deterministic multi-speaker synthetic corpus with known prosody.
//!
//! Each utterance is a phone sequence with per-phone durations, a
//! piecewise-linear f0 contour scaled to the speaker's range, an energy
//! contour and a voicing plan. Voiced frames render the first eight
//! harmonics of f0 shaped by a per-phone formant envelope and the
//! speaker's timbre curve; unvoiced phones render band-limited noise.
//! Bottleneck features are built from phone identity alone, so they are
//! speaker independent by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusConfig, FrameConfig, RunConfig};
use crate::dsp::{compute_mel, hz_to_mel, ProsodyTrack, Waveform};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::seeds::substream;
use crate::tensorfile::{Field, TensorFile};

/// Harmonics rendered for voiced frames.
pub const N_HARMONICS: usize = 8;
/// Seed of the phone inventory and the bottleneck projection; shared by every corpus.
pub const GLOBAL_SEED: u64 = 0x5eed_b0771e;
/// Standard deviation of the additive background noise floor.
pub const NOISE_FLOOR: f64 = 1e-4;
/// Voiced f0 is kept inside this band so the analysis range always covers it.
pub const F0_LIMITS: [f64; 2] = [80.0, 400.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: usize,
    pub base_f0: f64,
    /// Contour excursion in octaves for a unit style value.
    pub f0_span: f64,
    /// Spectral tilt/filter in dB, one value per mel band.
    pub timbre_gains: Vec<f64>,
    pub harmonic_phases: Vec<f64>,
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(100.0..=320.0).contains(&self.base_f0) {
            return Err(Error::InvalidInput(format!(
                "speaker {} base_f0 {} outside [100, 320]",
                self.speaker_id, self.base_f0
            )));
        }
        if self.timbre_gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("timbre gains"));
        }
        if self.harmonic_phases.len() != N_HARMONICS {
            return Err(Error::InvalidInput("one phase per harmonic required".into()));
        }
        Ok(())
    }

    /// Timbre gain in dB at `freq`, interpolated between mel-band centers.
    pub fn gain_db(&self, freq: f64, sample_rate: u32) -> f64 {
        let n = self.timbre_gains.len();
        if n == 0 {
            return 0.0;
        }
        let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
        let pos = hz_to_mel(freq) / (mel_max / (n + 1) as f64) - 1.0;
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let i = pos.floor() as usize;
        let j = (i + 1).min(n - 1);
        let frac = pos - i as f64;
        self.timbre_gains[i] * (1.0 - frac) + self.timbre_gains[j] * frac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSpec {
    pub phones: Vec<PhoneSegment>,
    /// Hz per frame, defined on every frame (ignored where unvoiced).
    pub f0_contour: Vec<f64>,
    /// Target mean absolute amplitude per frame.
    pub energy_contour: Vec<f64>,
    pub voicing_plan: Vec<u8>,
}

impl UtteranceSpec {
    pub fn num_frames(&self) -> usize {
        self.voicing_plan.len()
    }

    /// Active phone for every frame.
    pub fn frame_phones(&self) -> Vec<usize> {
        self.phones
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.phone, s.frames))
            .collect()
    }

    pub fn validate(&self, inventory: &PhoneInventory) -> Result<()> {
        let t: usize = self.phones.iter().map(|s| s.frames).sum();
        if t == 0 {
            return Err(Error::InvalidInput("utterance has no frames".into()));
        }
        if self.f0_contour.len() != t || self.energy_contour.len() != t || self.voicing_plan.len() != t
        {
            return Err(Error::ShapeMismatch(format!(
                "phone durations sum to {t} but contours have lengths {}/{}/{}",
                self.f0_contour.len(),
                self.energy_contour.len(),
                self.voicing_plan.len()
            )));
        }
        if self.f0_contour.iter().chain(&self.energy_contour).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utterance contours"));
        }
        if self.f0_contour.iter().any(|&f| f <= 0.0) || self.energy_contour.iter().any(|&e| e < 0.0) {
            return Err(Error::InvalidInput("f0 must be positive and energy non-negative".into()));
        }
        for (t, p) in self.frame_phones().into_iter().enumerate() {
            if p >= inventory.n_phones() {
                return Err(Error::InvalidInput(format!("phone {p} out of range")));
            }
            if self.voicing_plan[t] > 1 || (self.voicing_plan[t] == 1) != inventory.is_voiced(p) {
                return Err(Error::InvalidInput(format!(
                    "voicing plan disagrees with phone class at frame {t}"
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth f0 per frame, 0 where unvoiced.
    pub fn oracle_f0(&self) -> Vec<f64> {
        self.f0_contour
            .iter()
            .zip(&self.voicing_plan)
            .map(|(&f, &v)| if v == 1 { f } else { 0.0 })
            .collect()
    }
}

/// Fixed phone classes: voiced phones carry two formants, unvoiced phones a noise band.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneInventory {
    pub formants: Vec<[f64; 2]>,
    pub noise_bands: Vec<[f64; 2]>,
}

impl PhoneInventory {
    pub fn new(n_phones: usize, n_unvoiced: usize) -> Self {
        let mut rng = substream(GLOBAL_SEED, "phones", 0);
        let n_voiced = n_phones - n_unvoiced;
        let formants = (0..n_voiced)
            .map(|i| {
                // spread F1 over the voiced classes so phones stay distinct
                let f1 = 300.0 + 500.0 * (i as f64 + rng.random_range(0.2..0.8)) / n_voiced as f64;
                let f2 = rng.random_range(900.0..2500.0);
                [f1, f2]
            })
            .collect();
        let noise_bands = (0..n_unvoiced)
            .map(|_| {
                let lo: f64 = rng.random_range(1800.0..4000.0);
                let hi = (lo + rng.random_range(1500.0..3500.0)).min(7600.0);
                [lo, hi]
            })
            .collect();
        Self {
            formants,
            noise_bands,
        }
    }

    pub fn n_phones(&self) -> usize {
        self.formants.len() + self.noise_bands.len()
    }

    pub fn is_voiced(&self, phone: usize) -> bool {
        phone < self.formants.len()
    }

    /// Spectral envelope of a voiced phone at `freq` (linear amplitude).
    pub fn envelope(&self, phone: usize, freq: f64) -> f64 {
        let [f1, f2] = self.formants[phone];
        let bump = |c: f64, bw: f64| (-0.5 * ((freq - c) / bw).powi(2)).exp();
        0.25 + bump(f1, 150.0) + 0.7 * bump(f2, 250.0)
    }
}

fn interp(track: &[f64], pos: f64) -> f64 {
    let last = track.len() - 1;
    let p = pos.clamp(0.0, last as f64);
    let i = p.floor() as usize;
    let j = (i + 1).min(last);
    let frac = p - i as f64;
    track[i] * (1.0 - frac) + track[j] * frac
}

/// Mean absolute value over one period of `Σ a_k sin(kθ + φ_k)`.
fn mean_abs_harmonic_sum(amps: &[f64], phases: &[f64]) -> f64 {
    const N: usize = 1024;
    (0..N)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / N as f64;
            amps.iter()
                .zip(phases)
                .enumerate()
                .map(|(k, (a, p))| a * ((k + 1) as f64 * theta + p).sin())
                .sum::<f64>()
                .abs()
        })
        .sum::<f64>()
        / N as f64
}

/// Renders a waveform whose frame-wise mean absolute amplitude follows
/// `utt.energy_contour` and whose voiced frames have fundamental `utt.f0_contour`.
pub fn synth_utterance(
    spk: &SpeakerSpec,
    utt: &UtteranceSpec,
    inventory: &PhoneInventory,
    cfg: &FrameConfig,
    seed: u64,
) -> Result<Waveform> {
    spk.validate()?;
    utt.validate(inventory)?;
    let t_frames = utt.num_frames();
    let sr = cfg.sample_rate as f64;
    let nyquist = sr / 2.0;
    let half = cfg.frame_length() as f64 / 2.0;
    let shift = cfg.frame_shift() as f64;
    let n_samples = cfg.samples_for_frames(t_frames);
    let frame_phone = utt.frame_phones();
    let mut rng = substream(seed, "render", 0);

    // per-frame harmonic amplitudes, normalized to unit mean absolute value
    let harmonics: Vec<[f64; N_HARMONICS]> = (0..t_frames)
        .map(|t| {
            let mut amps = [0.0; N_HARMONICS];
            if utt.voicing_plan[t] == 0 {
                return amps;
            }
            let f0 = utt.f0_contour[t];
            for (k, a) in amps.iter_mut().enumerate() {
                let f = (k + 1) as f64 * f0;
                if f < nyquist {
                    let g = 10f64.powf(spk.gain_db(f, cfg.sample_rate) / 20.0);
                    *a = inventory.envelope(frame_phone[t], f) * g / (k + 1) as f64;
                }
            }
            let m = mean_abs_harmonic_sum(&amps, &spk.harmonic_phases);
            amps.iter_mut().for_each(|a| *a /= m);
            amps
        })
        .collect();

    let frame_of = |n: usize| ((n as f64 - half) / shift).round().clamp(0.0, (t_frames - 1) as f64) as usize;
    let pos_of = |n: usize| (n as f64 - half) / shift;

    let mut out = vec![0.0; n_samples];
    let mut phase = 0.0;
    for (n, o) in out.iter_mut().enumerate() {
        let p = pos_of(n);
        let f0 = interp(&utt.f0_contour, p);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let t = frame_of(n);
        if utt.voicing_plan[t] == 1 {
            let e = interp(&utt.energy_contour, p);
            let s: f64 = harmonics[t]
                .iter()
                .zip(&spk.harmonic_phases)
                .enumerate()
                .map(|(k, (a, ph))| a * ((k + 1) as f64 * phase + ph).sin())
                .sum();
            *o = e * s;
        }
    }

    // unvoiced runs: band-limited noise, one run per contiguous phone segment
    let mut planner = FftPlanner::new();
    let mut n = 0;
    while n < n_samples {
        let t = frame_of(n);
        if utt.voicing_plan[t] == 1 {
            n += 1;
            continue;
        }
        let phone = frame_phone[t];
        let start = n;
        while n < n_samples && utt.voicing_plan[frame_of(n)] == 0 && frame_phone[frame_of(n)] == phone {
            n += 1;
        }
        let len = n - start;
        let size = len.next_power_of_two().max(64);
        let mut buf: Vec<Complex<f64>> = (0..size)
            .map(|i| {
                let v: f64 = if i < len { StandardNormal.sample(&mut rng) } else { 0.0 };
                Complex::new(v, 0.0)
            })
            .collect();
        planner.plan_fft_forward(size).process(&mut buf);
        let [lo, hi] = inventory.noise_bands[phone - inventory.formants.len()];
        for (k, b) in buf.iter_mut().enumerate() {
            let bin = k.min(size - k);
            let f = bin as f64 * sr / size as f64;
            let w = if f >= lo && f <= hi {
                10f64.powf(spk.gain_db(f, cfg.sample_rate) / 20.0)
            } else {
                0.0
            };
            *b *= w;
        }
        planner.plan_fft_inverse(size).process(&mut buf);
        let seg: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
        let mean_abs = seg.iter().map(|v| v.abs()).sum::<f64>() / len as f64;
        if mean_abs > 0.0 {
            for (i, v) in seg.iter().enumerate() {
                let e = interp(&utt.energy_contour, pos_of(start + i));
                out[start + i] = e * v / mean_abs;
            }
        }
    }

    for o in out.iter_mut() {
        let v: f64 = StandardNormal.sample(&mut rng);
        *o += NOISE_FLOOR * v;
    }
    Waveform::new(out, cfg.sample_rate)
}

/// Fixed `[P × d_bn]` map with orthonormal rows, from the global seed.
pub fn bn_projection(n_phones: usize, d_bn: usize) -> Matrix {
    let mut rng = substream(GLOBAL_SEED, "bn-projection", (n_phones * 1000 + d_bn) as u64);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_phones);
    while rows.len() < n_phones {
        let mut v: Vec<f64> = (0..d_bn).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

/// Speaker-independent bottleneck features: one-hot phone identity smoothed by
/// a 5-frame triangular window, projected to `d_bn`.
pub fn synth_bn(utt: &UtteranceSpec, n_phones: usize, d_bn: usize) -> Result<Matrix> {
    let phones = utt.frame_phones();
    if phones.is_empty() {
        return Err(Error::InvalidInput("utterance has no frames".into()));
    }
    if phones.iter().any(|&p| p >= n_phones) {
        return Err(Error::InvalidInput("phone id out of range".into()));
    }
    const WINDOW: [f64; 5] = [1.0, 2.0, 3.0, 2.0, 1.0];
    let t_frames = phones.len();
    let mut smoothed = Matrix::zeros(t_frames, n_phones);
    for t in 0..t_frames {
        let mut total = 0.0;
        for (j, w) in WINDOW.iter().enumerate() {
            let s = t as isize + j as isize - 2;
            if s >= 0 && (s as usize) < t_frames {
                let p = phones[s as usize];
                let row = smoothed.row_mut(t);
                row[p] += w;
                total += w;
            }
        }
        smoothed.row_mut(t).iter_mut().for_each(|v| *v /= total);
    }
    Ok(smoothed.matmul(&bn_projection(n_phones, d_bn)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Adapt,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Adapt, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Adapt => "adapt",
            Split::Test => "test",
        }
    }
}

/// Per-utterance feature bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    pub split: Split,
    /// `[T × n_mels]` log-mel.
    pub mel: Matrix,
    /// `[T × d_bn]`.
    pub bn: Matrix,
    pub prosody: ProsodyTrack,
    pub oracle_f0: Vec<f64>,
    pub oracle_energy: Vec<f64>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn oracle_vuv(&self) -> Vec<u8> {
        self.oracle_f0.iter().map(|&f| u8::from(f > 0.0)).collect()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let t = self.num_frames();
        let mut f = TensorFile::new();
        f.push_text("id", &self.id);
        f.push_f32("mel", vec![t, self.mel.cols()], self.mel.data().iter().copied());
        f.push_f32("bn", vec![t, self.bn.cols()], self.bn.data().iter().copied());
        f.push_f32("lf0", vec![t], self.prosody.lf0.iter().copied());
        f.push_f32("vuv", vec![t], self.prosody.vuv.iter().map(|&v| v as f64));
        f.push_f32("energy", vec![t], self.prosody.energy.iter().copied());
        f.push_f32("lf0_norm", vec![t], self.prosody.lf0_norm.iter().copied());
        f.push_f32("energy_norm", vec![t], self.prosody.energy_norm.iter().copied());
        f.push_f32("oracle_f0", vec![t], self.oracle_f0.iter().copied());
        f.push_f32("oracle_energy", vec![t], self.oracle_energy.iter().copied());
        f.push(
            "speaker_id",
            Field::I32 {
                shape: vec![1],
                data: vec![self.speaker_id as i32],
            },
        );
        f
    }

    pub fn from_tensor_file(f: &TensorFile, split: Split, path: &Path) -> Result<Self> {
        let matrix = |name: &str| -> Result<Matrix> {
            let (shape, data) = f.f32_field(name, path)?;
            if shape.len() != 2 {
                return Err(Error::format(path, format!("{name} must be 2-d")));
            }
            Ok(Matrix::from_vec(shape[0], shape[1], data.iter().map(|&v| v as f64).collect()))
        };
        let vector = |name: &str| -> Result<Vec<f64>> {
            Ok(f.f32_field(name, path)?.1.iter().map(|&v| v as f64).collect())
        };
        let mel = matrix("mel")?;
        let bn = matrix("bn")?;
        let t = mel.rows();
        let prosody = ProsodyTrack {
            lf0: vector("lf0")?,
            vuv: vector("vuv")?.iter().map(|&v| u8::from(v > 0.5)).collect(),
            energy: vector("energy")?,
            lf0_norm: vector("lf0_norm")?,
            energy_norm: vector("energy_norm")?,
        };
        let oracle_f0 = vector("oracle_f0")?;
        let oracle_energy = vector("oracle_energy")?;
        if bn.rows() != t || prosody.len() != t || oracle_f0.len() != t || oracle_energy.len() != t {
            return Err(Error::format(path, "fields disagree on frame count"));
        }
        let speaker = f.i32_field("speaker_id", path)?.1;
        let speaker_id = *speaker
            .first()
            .ok_or_else(|| Error::format(path, "empty speaker_id"))? as usize;
        Ok(Self {
            id: f.text_field("id", path)?.to_string(),
            speaker_id,
            split,
            mel,
            bn,
            prosody,
            oracle_f0,
            oracle_energy,
        })
    }
}

/// Rounds through `f32` so in-memory features equal what the file format stores.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Runs the analysis front end on a synthesized waveform.
pub fn analyze(
    id: String,
    speaker_id: usize,
    split: Split,
    wave: &Waveform,
    spec: &UtteranceSpec,
    frame: &FrameConfig,
    corpus: &CorpusConfig,
) -> Result<Utterance> {
    let mel = compute_mel(wave, frame)?.frames.map(quantize);
    let bn = synth_bn(spec, corpus.n_phones, corpus.d_bn)?.map(quantize);
    let p = ProsodyTrack::extract(wave, frame)?;
    let q = |v: Vec<f64>| v.into_iter().map(quantize).collect::<Vec<_>>();
    let prosody = ProsodyTrack {
        lf0: q(p.lf0),
        vuv: p.vuv,
        energy: q(p.energy),
        lf0_norm: q(p.lf0_norm),
        energy_norm: q(p.energy_norm),
    };
    Ok(Utterance {
        id,
        speaker_id,
        split,
        mel,
        bn,
        prosody,
        oracle_f0: q(spec.oracle_f0()),
        oracle_energy: q(spec.energy_contour.clone()),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct StyleRange {
    pub offset: f64,
    pub range: [f64; 2],
    pub energy: [f64; 2],
}

impl StyleRange {
    pub const NORMAL: StyleRange = StyleRange {
        offset: 0.3,
        range: [0.3, 0.8],
        energy: [0.08, 0.35],
    };
    /// Wider pitch and loudness excursions for the styled test set.
    pub const RICH: StyleRange = StyleRange {
        offset: 0.5,
        range: [0.7, 1.2],
        energy: [0.04, 0.45],
    };
}

pub fn make_speaker(speaker_id: usize, n_total: usize, n_mels: usize, rng: &mut ChaCha8Rng) -> SpeakerSpec {
    // stratify base pitch so speakers are separable by construction
    let slot = (speaker_id as f64 + rng.random_range(0.25..0.75)) / n_total as f64;
    let base_f0 = 100.0 + 220.0 * slot;
    let f0_span = rng.random_range(0.3..0.5);
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-4.0..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tilt = rng.random_range(-6.0..3.0);
    let timbre_gains = (0..n_mels)
        .map(|b| {
            let x = b as f64 / (n_mels - 1).max(1) as f64;
            tilt * x
                + comps
                    .iter()
                    .map(|(a, f, p)| a * (2.0 * PI * f * x + p).sin())
                    .sum::<f64>()
        })
        .collect();
    let harmonic_phases = (0..N_HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    SpeakerSpec {
        speaker_id,
        base_f0,
        f0_span,
        timbre_gains,
        harmonic_phases,
    }
}

fn piecewise_linear(t_frames: usize, rng: &mut ChaCha8Rng, mut knot: impl FnMut(&mut ChaCha8Rng) -> f64) -> Vec<f64> {
    let mut knots = vec![(0usize, knot(rng))];
    let mut pos = 0;
    while pos < t_frames - 1 {
        pos = (pos + rng.random_range(15..40)).min(t_frames - 1);
        knots.push((pos, knot(rng)));
    }
    let mut out = Vec::with_capacity(t_frames);
    for w in knots.windows(2) {
        let ((a, va), (b, vb)) = (w[0], w[1]);
        for t in a..b {
            let f = (t - a) as f64 / (b - a) as f64;
            out.push(va * (1.0 - f) + vb * f);
        }
    }
    out.push(knots.last().expect("non-empty").1);
    out.truncate(t_frames);
    out
}

pub fn make_utterance(
    spk: &SpeakerSpec,
    cfg: &CorpusConfig,
    inventory: &PhoneInventory,
    style: StyleRange,
    rng: &mut ChaCha8Rng,
) -> UtteranceSpec {
    let target = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let mut phones: Vec<PhoneSegment> = Vec::new();
    let mut total = 0;
    while total < target {
        let phone = loop {
            let p = rng.random_range(0..cfg.n_phones);
            if phones.last().is_none_or(|s| s.phone != p) {
                break p;
            }
        };
        let frames = rng.random_range(cfg.min_phone_frames..=cfg.max_phone_frames);
        phones.push(PhoneSegment { phone, frames });
        total += frames;
    }
    let excess = total - target;
    let last = phones.last_mut().expect("non-empty");
    if last.frames > excess {
        last.frames -= excess;
    } else {
        let removed = phones.pop().expect("non-empty").frames;
        phones.last_mut().expect("at least two phones").frames += removed - excess;
    }
    let t_frames = target;

    let offset = rng.random_range(-style.offset..=style.offset);
    let range = rng.random_range(style.range[0]..style.range[1]);
    let f0_contour = piecewise_linear(t_frames, rng, |r| {
        let s = offset + range * r.random_range(-1.0..1.0);
        (spk.base_f0 * 2f64.powf(spk.f0_span * s)).clamp(F0_LIMITS[0], F0_LIMITS[1])
    });
    let [e_lo, e_hi] = style.energy;
    let base_energy = piecewise_linear(t_frames, rng, |r| r.random_range(e_lo..e_hi));
    let mut voicing_plan = Vec::with_capacity(t_frames);
    for s in &phones {
        voicing_plan.extend(std::iter::repeat_n(u8::from(inventory.is_voiced(s.phone)), s.frames));
    }
    let energy_contour = base_energy
        .iter()
        .zip(&voicing_plan)
        .map(|(&e, &v)| if v == 1 { e } else { 0.35 * e })
        .collect();
    UtteranceSpec {
        phones,
        f0_contour,
        energy_contour,
        voicing_plan,
    }
}

/// In-memory corpus: speakers and analyzed utterances for every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: RunConfig,
    pub seed: u64,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn target_speaker_id(&self) -> usize {
        self.config.corpus.target_speaker_id()
    }

    /// Adaptation utterances used for fine-tuning and the held-out tail.
    pub fn adapt_partition(&self) -> (Vec<&Utterance>, Vec<&Utterance>) {
        let adapt = self.split(Split::Adapt);
        let keep = adapt.len().saturating_sub(self.config.corpus.adapt_holdout);
        let (a, b) = adapt.split_at(keep);
        (a.to_vec(), b.to_vec())
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Writes per-utterance files and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusManifest> {
        fs::create_dir_all(dir)?;
        let mut splits: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
        for split in Split::ALL {
            let entries = splits.entry(split.name().to_string()).or_default();
            for u in self.split(split) {
                let file = PathBuf::from(split.name()).join(format!("{}.pvc", u.id));
                u.to_tensor_file().write(&dir.join(&file))?;
                entries.push(ManifestEntry {
                    id: u.id.clone(),
                    file: file.to_string_lossy().into_owned(),
                    speaker_id: u.speaker_id,
                    frames: u.num_frames(),
                });
            }
        }
        let manifest = CorpusManifest {
            format: "pvc-corpus".into(),
            version: 1,
            seed: self.seed,
            target_speaker_id: self.target_speaker_id(),
            speakers: self.speakers.clone(),
            splits,
            config: self.config.clone(),
        };
        fs::write(dir.join("manifest.json"), manifest.to_json())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.config.validate()?;
        let mut utterances = Vec::new();
        for split in Split::ALL {
            for e in manifest.splits.get(split.name()).into_iter().flatten() {
                let p = dir.join(&e.file);
                utterances.push(Utterance::from_tensor_file(&TensorFile::read(&p)?, split, &p)?);
            }
        }
        Ok(Self {
            config: manifest.config,
            seed: manifest.seed,
            speakers: manifest.speakers,
            utterances,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub speaker_id: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub target_speaker_id: usize,
    pub speakers: Vec<SpeakerSpec>,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
    pub config: RunConfig,
}

impl CorpusManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

struct Job {
    id: String,
    speaker: usize,
    split: Split,
    style: StyleRange,
}

fn corpus_jobs(cc: &CorpusConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    let mut push = |id: String, speaker, split, style| jobs.push(Job { id, speaker, split, style });
    for s in 0..cc.n_speakers {
        for k in 0..cc.utterances_per_speaker {
            push(format!("spk{s}_train{k:03}"), s, Split::Train, StyleRange::NORMAL);
        }
    }
    let target = cc.target_speaker_id();
    for k in 0..cc.target_utterances {
        push(format!("spk{target}_adapt{k:03}"), target, Split::Adapt, StyleRange::NORMAL);
    }
    for s in 0..cc.n_speakers {
        for k in 0..cc.test_per_speaker {
            push(format!("spk{s}_test{k:03}"), s, Split::Test, StyleRange::RICH);
        }
    }
    jobs
}

/// Speakers, and for every utterance its job, plan and rendered waveform.
fn synthesize(cfg: &RunConfig, seed: u64) -> Result<(Vec<SpeakerSpec>, Vec<(Job, UtteranceSpec, Waveform)>)> {
    cfg.validate()?;
    let cc = &cfg.corpus;
    let inventory = PhoneInventory::new(cc.n_phones, cc.n_unvoiced_phones);
    let n_total = cc.n_speakers + 1;
    let speakers: Vec<SpeakerSpec> = (0..n_total)
        .map(|i| make_speaker(i, n_total, cfg.frame.n_mels, &mut substream(seed, "speaker", i as u64)))
        .collect();
    let rendered = corpus_jobs(cc)
        .into_iter()
        .enumerate()
        .map(|(i, job)| {
            let mut rng = substream(seed, "utterance", i as u64);
            let spk = &speakers[job.speaker];
            let spec = make_utterance(spk, cc, &inventory, job.style, &mut rng);
            let wave = synth_utterance(spk, &spec, &inventory, &cfg.frame, rng.random())?;
            Ok((job, spec, wave))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((speakers, rendered))
}

/// Synthesizes and analyzes the whole corpus. A pure function of `(cfg, seed)`.
pub fn generate_corpus(cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    let (speakers, rendered) = synthesize(cfg, seed)?;
    let utterances = rendered
        .into_iter()
        .map(|(job, spec, wave)| analyze(job.id, job.speaker, job.split, &wave, &spec, &cfg.frame, &cfg.corpus))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        speakers,
        utterances,
    })
}

/// The corpus waveforms as `(utterance id, speaker id, waveform)`, identical
/// to the audio `generate_corpus` analyzes.
pub fn generate_waveforms(cfg: &RunConfig, seed: u64) -> Result<Vec<(String, usize, Waveform)>> {
    let (_, rendered) = synthesize(cfg, seed)?;
    Ok(rendered.into_iter().map(|(job, _, wave)| (job.id, job.speaker, wave)).collect())
}

/// Generates the corpus and writes it under `dir`.
pub fn build_corpus(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    generate_corpus(cfg, seed)?.write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{compute_energy, extract_f0_vuv};

    fn inventory() -> PhoneInventory {
        PhoneInventory::new(12, 3)
    }

    fn speaker(id: usize) -> SpeakerSpec {
        make_speaker(id, 5, 128, &mut substream(1, "speaker", id as u64))
    }

    fn single_phone(phone: usize, frames: usize, f0: f64, energy: f64, voiced: bool) -> UtteranceSpec {
        UtteranceSpec {
            phones: vec![PhoneSegment { phone, frames }],
            f0_contour: vec![f0; frames],
            energy_contour: vec![energy; frames],
            voicing_plan: vec![u8::from(voiced); frames],
        }
    }

    #[test]
    fn constant_voiced_phone_recovers_f0_and_energy() {
        let cfg = FrameConfig::default();
        let spk = speaker(2);
        let utt = single_phone(3, 60, spk.base_f0, 0.5, true);
        let w = synth_utterance(&spk, &utt, &inventory(), &cfg, 11).unwrap();
        let (lf0, vuv) = extract_f0_vuv(&w, &cfg, cfg.f0_range).unwrap();
        assert_eq!(lf0.len(), 60);
        for (l, v) in lf0.iter().zip(&vuv) {
            assert_eq!(*v, 1);
            assert!((l.exp() - spk.base_f0).abs() / spk.base_f0 <= 0.05);
        }
        let e = compute_energy(&w, &cfg).unwrap();
        for v in e {
            assert!((v - 0.5).abs() / 0.5 <= 0.03, "energy {v}");
        }
    }

    #[test]
    fn unvoiced_plan_yields_unvoiced_frames() {
        let cfg = FrameConfig::default();
        let spk = speaker(1);
        let (mut voiced, mut total) = (0, 0);
        for seed in 0..20 {
            let utt = single_phone(10, 40, 150.0, 0.2, false);
            let w = synth_utterance(&spk, &utt, &inventory(), &cfg, seed).unwrap();
            let (_, vuv) = extract_f0_vuv(&w, &cfg, cfg.f0_range).unwrap();
            voiced += vuv.iter().filter(|&&v| v == 1).count();
            total += vuv.len();
        }
        assert!(voiced as f64 <= 0.05 * total as f64, "{voiced}/{total}");
    }

    #[test]
    fn bn_is_speaker_free_and_duration_sensitive() {
        let inv = inventory();
        let cc = CorpusConfig::default();
        let utt = make_utterance(&speaker(0), &cc, &inv, StyleRange::NORMAL, &mut substream(3, "u", 0));
        let a = synth_bn(&utt, 12, 64).unwrap();
        let b = synth_bn(&utt, 12, 64).unwrap();
        assert_eq!(a, b);

        let one = single_phone(4, 30, 120.0, 0.3, true);
        let bn = synth_bn(&one, 12, 64).unwrap();
        for t in 1..30 {
            assert_eq!(bn.row(t), bn.row(0));
        }

        let mk = |d1: usize, d2: usize| UtteranceSpec {
            phones: vec![PhoneSegment { phone: 1, frames: d1 }, PhoneSegment { phone: 5, frames: d2 }],
            f0_contour: vec![120.0; d1 + d2],
            energy_contour: vec![0.2; d1 + d2],
            voicing_plan: vec![1; d1 + d2],
        };
        let short = synth_bn(&mk(10, 20), 12, 64).unwrap();
        let long = synth_bn(&mk(14, 16), 12, 64).unwrap();
        // rows agree away from the boundary, differ in the shifted segment
        assert_eq!(short.row(2), long.row(2));
        assert_ne!(short.row(11), long.row(11));
        assert_eq!(short.row(25), long.row(25));
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let q = bn_projection(12, 64);
        let g = q.matmul(&q.transpose());
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn timbre_changes_band_profile() {
        let cfg = FrameConfig::default();
        let inv = inventory();
        let utt = make_utterance(&speaker(0), &CorpusConfig::default(), &inv, StyleRange::NORMAL, &mut substream(5, "u", 1));
        let a = compute_mel(&synth_utterance(&speaker(0), &utt, &inv, &cfg, 1).unwrap(), &cfg).unwrap();
        let b = compute_mel(&synth_utterance(&speaker(3), &utt, &inv, &cfg, 1).unwrap(), &cfg).unwrap();
        let argmax = |m: &Matrix, t: usize| {
            let r = m.row(t);
            (0..r.len()).max_by(|&x, &y| r[x].total_cmp(&r[y])).unwrap()
        };
        let differing = (0..a.num_frames()).filter(|&t| argmax(&a.frames, t) != argmax(&b.frames, t)).count();
        assert!(differing > 0);
    }

    #[test]
    fn mismatched_contours_rejected() {
        let mut utt = single_phone(2, 20, 150.0, 0.2, true);
        utt.energy_contour.pop();
        let r = synth_utterance(&speaker(0), &utt, &inventory(), &FrameConfig::default(), 0);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn generated_specs_are_valid() {
        let inv = inventory();
        let cc = CorpusConfig::default();
        for i in 0..30 {
            let spk = speaker(i % 5);
            let style = if i % 2 == 0 { StyleRange::NORMAL } else { StyleRange::RICH };
            let u = make_utterance(&spk, &cc, &inv, style, &mut substream(9, "u", i as u64));
            u.validate(&inv).unwrap();
            assert!((cc.min_frames..=cc.max_frames).contains(&u.num_frames()));
        }
    }
}
