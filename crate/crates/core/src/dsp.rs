//! Frame-level acoustic analysis: log-mel spectrogram, autocorrelation pitch
//! with voicing decision, short-term average amplitude, and per-utterance
//! min-max normalization.
//!
//! All extractors share one framing: frame `t` covers samples
//! `[t·shift, t·shift + length)` with no padding, so they agree on `T`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::FrameConfig;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::tensorfile::{Field, TensorFile};

/// Floor inside the log compression of mel energies.
pub const LOG_EPS: f64 = 1e-10;

/// Peak normalized-autocorrelation value required to call a frame voiced.
pub const VOICING_THRESHOLD: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if self.samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(())
    }
}

impl Waveform {
    /// Stores `samples` (f32) and `sample_rate`.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push_f32("samples", vec![self.samples.len()], self.samples.iter().copied());
        f.push(
            "sample_rate",
            Field::I32 {
                shape: vec![1],
                data: vec![self.sample_rate as i32],
            },
        );
        f
    }

    pub fn from_tensor_file(f: &TensorFile, path: &std::path::Path) -> Result<Self> {
        let samples = f.f32_field("samples", path)?.1.iter().map(|&v| f64::from(v)).collect();
        let rate = f
            .i32_field("sample_rate", path)?
            .1
            .first()
            .copied()
            .filter(|&r| r > 0)
            .ok_or_else(|| Error::format(path, "sample_rate must be one positive integer"))?;
        Self::new(samples, rate as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `[T × n_mels]` natural-log mel magnitudes.
    pub frames: Matrix,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

/// Frame-aligned explicit prosody features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyTrack {
    pub lf0: Vec<f64>,
    pub vuv: Vec<u8>,
    pub energy: Vec<f64>,
    pub lf0_norm: Vec<f64>,
    pub energy_norm: Vec<f64>,
}

impl ProsodyTrack {
    pub fn extract(w: &Waveform, cfg: &FrameConfig) -> Result<Self> {
        let (lf0, vuv) = extract_f0_vuv(w, cfg, cfg.f0_range)?;
        let energy = compute_energy(w, cfg)?;
        Self::from_raw(lf0, vuv, energy)
    }

    pub fn from_raw(lf0: Vec<f64>, vuv: Vec<u8>, energy: Vec<f64>) -> Result<Self> {
        if lf0.len() != vuv.len() || lf0.len() != energy.len() {
            return Err(Error::ShapeMismatch("prosody track lengths differ".into()));
        }
        let lf0_norm = minmax_normalize(&lf0, Some(&vuv))?;
        let energy_norm = minmax_normalize(&energy, None)?;
        Ok(Self {
            lf0,
            vuv,
            energy,
            lf0_norm,
            energy_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.lf0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lf0.is_empty()
    }
}

/// Mel spectrogram and explicit prosody of one waveform, on one shared framing.
pub fn extract_features(w: &Waveform, cfg: &FrameConfig) -> Result<(MelSpectrogram, ProsodyTrack)> {
    Ok((compute_mel(w, cfg)?, ProsodyTrack::extract(w, cfg)?))
}

/// Feature bundle as written by `extract-features`.
pub fn features_tensor_file(id: &str, mel: &MelSpectrogram, p: &ProsodyTrack) -> TensorFile {
    let t = mel.num_frames();
    let mut f = TensorFile::new();
    f.push_text("id", id);
    f.push_f32("mel", vec![t, mel.n_mels()], mel.frames.data().iter().copied());
    f.push_f32("lf0", vec![t], p.lf0.iter().copied());
    f.push_f32("vuv", vec![t], p.vuv.iter().map(|&v| f64::from(v)));
    f.push_f32("energy", vec![t], p.energy.iter().copied());
    f.push_f32("lf0_norm", vec![t], p.lf0_norm.iter().copied());
    f.push_f32("energy_norm", vec![t], p.energy_norm.iter().copied());
    f
}

fn check_frames(w: &Waveform, cfg: &FrameConfig) -> Result<usize> {
    w.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "waveform sample rate {} does not match configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let need = cfg.frame_length();
    if w.samples.len() < need || need == 0 {
        return Err(Error::TooShort {
            len: w.samples.len(),
            need,
        });
    }
    Ok(cfg.num_frames(w.samples.len()))
}

fn frame<'a>(w: &'a Waveform, cfg: &FrameConfig, t: usize) -> &'a [f64] {
    let start = t * cfg.frame_shift();
    &w.samples[start..start + cfg.frame_length()]
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over `[0, sample_rate/2]`, unit peak height.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `i` peaks at `edges[i + 1]`.
    pub edges: Vec<f64>,
    /// Per filter: first FFT bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrameConfig) -> Self {
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let n = cfg.n_mels;
        let edges: Vec<f64> = (0..n + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let n_bins = cfg.n_fft / 2 + 1;
        let filters = (0..n)
            .map(|i| {
                let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
                let first = (lo / bin_hz).ceil() as usize;
                let last = ((hi / bin_hz).floor() as usize).min(n_bins - 1);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= mid {
                            ((f - lo) / (mid - lo)).max(0.0)
                        } else {
                            ((hi - f) / (hi - mid)).max(0.0)
                        }
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Self { edges, filters }
    }

    /// Center frequency of each band in Hz.
    pub fn centers(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w
                .iter()
                .zip(&magnitudes[*first..])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
}

/// Hann-windowed STFT magnitudes for one frame, zero-padded to `n_fft`.
struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
}

impl Stft {
    fn new(cfg: &FrameConfig) -> Self {
        let fl = cfg.frame_length();
        let window = (0..fl)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / fl as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window,
            n_fft: cfg.n_fft,
        }
    }

    fn magnitudes(&self, x: &[f64], buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        buf.clear();
        buf.extend(x.iter().zip(&self.window).map(|(s, w)| Complex::new(s * w, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm();
        }
    }
}

pub fn compute_mel(w: &Waveform, cfg: &FrameConfig) -> Result<MelSpectrogram> {
    let t_frames = check_frames(w, cfg)?;
    let bank = MelFilterbank::new(cfg);
    let stft = Stft::new(cfg);
    let mut buf = Vec::with_capacity(cfg.n_fft);
    let mut mags = vec![0.0; cfg.n_fft / 2 + 1];
    let mut frames = Matrix::zeros(t_frames, cfg.n_mels);
    for t in 0..t_frames {
        stft.magnitudes(frame(w, cfg, t), &mut buf, &mut mags);
        let row = frames.row_mut(t);
        bank.apply(&mags, row);
        row.iter_mut().for_each(|v| *v = (*v + LOG_EPS).ln());
    }
    Ok(MelSpectrogram {
        frames,
        frame_shift_ms: cfg.frame_shift_ms,
        frame_length_ms: cfg.frame_length_ms,
    })
}

/// Mean absolute amplitude per frame.
pub fn compute_energy(w: &Waveform, cfg: &FrameConfig) -> Result<Vec<f64>> {
    let t_frames = check_frames(w, cfg)?;
    Ok((0..t_frames)
        .map(|t| {
            let x = frame(w, cfg, t);
            x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
        })
        .collect())
}

/// Normalized autocorrelation pitch estimator.
///
/// Per frame: remove the mean, compute `r(τ) = Σ x[n]x[n+τ] / sqrt(E_head(τ)·E_tail(τ))`
/// over the overlap, take the smallest-lag local maximum within 90% of the best
/// peak in the lag range, refine by parabolic interpolation. Frames whose best
/// peak is below [`VOICING_THRESHOLD`] are unvoiced (`lf0 = 0`, `vuv = 0`).
pub fn extract_f0_vuv(
    w: &Waveform,
    cfg: &FrameConfig,
    f0_range: [f64; 2],
) -> Result<(Vec<f64>, Vec<u8>)> {
    let [f_min, f_max] = f0_range;
    if !(f_min > 0.0 && f_min < f_max && f_max < w.sample_rate as f64 / 4.0) {
        return Err(Error::InvalidInput(format!(
            "f0 range [{f_min}, {f_max}] must satisfy 0 < min < max < sample_rate/4"
        )));
    }
    let t_frames = check_frames(w, cfg)?;
    let sr = w.sample_rate as f64;
    let fl = cfg.frame_length();
    let lag_min = ((sr / f_max).floor() as usize).max(2);
    let lag_max = ((sr / f_min).ceil() as usize).min(fl - 2);
    if lag_min + 2 > lag_max {
        return Err(Error::InvalidInput("frame too short for the f0 range".into()));
    }
    let n_fft = (2 * fl).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut x = vec![0.0; fl];
    let mut prefix = vec![0.0; fl + 1];
    let mut r = vec![0.0; lag_max + 2];
    let mut lf0 = Vec::with_capacity(t_frames);
    let mut vuv = Vec::with_capacity(t_frames);

    for t in 0..t_frames {
        let src = frame(w, cfg, t);
        let mean = src.iter().sum::<f64>() / fl as f64;
        for (d, s) in x.iter_mut().zip(src) {
            *d = s - mean;
        }
        for i in 0..fl {
            prefix[i + 1] = prefix[i] + x[i] * x[i];
        }
        let total = prefix[fl];
        if total <= 1e-12 * fl as f64 {
            lf0.push(0.0);
            vuv.push(0);
            continue;
        }
        for (b, &v) in buf.iter_mut().zip(x.iter().chain(std::iter::repeat(&0.0))) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex::new(b.norm_sqr(), 0.0);
        }
        inv.process(&mut buf);
        let scale = 1.0 / n_fft as f64;
        for lag in lag_min - 1..=lag_max + 1 {
            let head = prefix[fl - lag];
            let tail = total - prefix[lag];
            let denom = (head * tail).sqrt();
            r[lag] = if denom > 0.0 {
                buf[lag].re * scale / denom
            } else {
                0.0
            };
        }
        let peaks: Vec<usize> = (lag_min..=lag_max)
            .filter(|&l| r[l] > 0.0 && r[l] >= r[l - 1] && r[l] >= r[l + 1])
            .collect();
        let best = peaks.iter().map(|&l| r[l]).fold(f64::NEG_INFINITY, f64::max);
        if peaks.is_empty() || best < VOICING_THRESHOLD {
            lf0.push(0.0);
            vuv.push(0);
            continue;
        }
        let lag = *peaks
            .iter()
            .find(|&&l| r[l] >= 0.9 * best)
            .expect("best peak qualifies");
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let curvature = a - 2.0 * b + c;
        let delta = if curvature.abs() > 1e-12 {
            (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let f0 = sr / (lag as f64 + delta);
        if f0 < f_min * 0.97 || f0 > f_max * 1.03 {
            lf0.push(0.0);
            vuv.push(0);
        } else {
            lf0.push(f0.ln());
            vuv.push(1);
        }
    }
    Ok((lf0, vuv))
}

/// Per-utterance min-max normalization to `[0, 1]` over the masked support.
/// Unmasked positions map to 0; a degenerate (constant or empty) support maps
/// everything to 0.
pub fn minmax_normalize(x: &[f64], mask: Option<&[u8]>) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalization input"));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs input length {}",
                m.len(),
                x.len()
            )));
        }
    }
    let on = |i: usize| mask.is_none_or(|m| m[i] != 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if on(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if on(i) && range > 0.0 {
                ((v - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, secs: f64) -> Waveform {
        let sr = 16_000;
        let n = (secs * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn silence_mel_is_log_floor_with_77_frames() {
        let cfg = FrameConfig::default();
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let mel = compute_mel(&w, &cfg).unwrap();
        assert_eq!(mel.num_frames(), 77);
        assert!(mel.frames.data().iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn sine_peaks_in_band_nearest_its_frequency() {
        let cfg = FrameConfig::default();
        let centers = MelFilterbank::new(&cfg).centers();
        // oracle: band whose center is closest to 220 Hz
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 220.0).abs().total_cmp(&(b.1 - 220.0).abs()))
            .unwrap()
            .0;
        let mel = compute_mel(&sine(220.0, 0.5, 1.0), &cfg).unwrap();
        for t in 0..mel.num_frames() {
            let row = mel.frames.row(t);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn too_short_and_non_finite_are_rejected() {
        let cfg = FrameConfig::default();
        let w = Waveform {
            samples: vec![0.0; 799],
            sample_rate: 16_000,
        };
        assert!(matches!(compute_mel(&w, &cfg), Err(Error::TooShort { .. })));
        let w = Waveform {
            samples: vec![f64::NAN; 1600],
            sample_rate: 16_000,
        };
        assert!(matches!(compute_energy(&w, &cfg), Err(Error::NonFinite(_))));
        assert!(Waveform::new(vec![f64::INFINITY], 16_000).is_err());
    }

    #[test]
    fn pure_tone_pitch() {
        let cfg = FrameConfig::default();
        let (lf0, vuv) = extract_f0_vuv(&sine(220.0, 0.5, 1.0), &cfg, cfg.f0_range).unwrap();
        assert!(vuv.iter().all(|&v| v == 1));
        let good = lf0
            .iter()
            .filter(|&&l| (l.exp() - 220.0).abs() / 220.0 <= 0.05)
            .count();
        assert!(good as f64 >= 0.9 * lf0.len() as f64);
    }

    #[test]
    fn silence_is_unvoiced_with_zero_lf0() {
        let cfg = FrameConfig::default();
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let (lf0, vuv) = extract_f0_vuv(&w, &cfg, cfg.f0_range).unwrap();
        assert!(lf0.iter().all(|&v| v == 0.0));
        assert!(vuv.iter().all(|&v| v == 0));
    }

    #[test]
    fn sweep_pitch_is_nondecreasing() {
        let cfg = FrameConfig::default();
        let sr = 16_000.0;
        let mut phase = 0.0;
        let samples = (0..16_000)
            .map(|i| {
                let f = 100.0 + 100.0 * i as f64 / sr;
                phase += 2.0 * PI * f / sr;
                0.5 * phase.sin()
            })
            .collect();
        let w = Waveform::new(samples, 16_000).unwrap();
        let (lf0, vuv) = extract_f0_vuv(&w, &cfg, cfg.f0_range).unwrap();
        let voiced: Vec<f64> = lf0
            .iter()
            .zip(&vuv)
            .filter(|(_, &v)| v == 1)
            .map(|(l, _)| l.exp())
            .collect();
        assert!(voiced.len() > 60);
        for pair in voiced.windows(2) {
            assert!(pair[1] >= pair[0] * 0.95, "{pair:?}");
        }
    }

    #[test]
    fn invalid_f0_range_rejected() {
        let cfg = FrameConfig::default();
        let w = sine(220.0, 0.5, 0.2);
        assert!(extract_f0_vuv(&w, &cfg, [300.0, 200.0]).is_err());
        assert!(extract_f0_vuv(&w, &cfg, [0.0, 200.0]).is_err());
        assert!(extract_f0_vuv(&w, &cfg, [70.0, 4000.0]).is_err());
    }

    #[test]
    fn constant_energy() {
        let cfg = FrameConfig::default();
        let w = Waveform::new(vec![0.3; 4000], 16_000).unwrap();
        let e = compute_energy(&w, &cfg).unwrap();
        assert!(e.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        assert!(compute_energy(&w, &cfg).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0], None).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0], None).unwrap(), vec![0.0; 3]);
        let lf0 = [0.0, 200f64.ln(), 300f64.ln(), 0.0];
        assert_eq!(
            minmax_normalize(&lf0, Some(&[0, 1, 1, 0])).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
        assert!(minmax_normalize(&[1.0, f64::NAN], None).is_err());
    }

    #[test]
    fn extractors_agree_on_frame_count() {
        let cfg = FrameConfig::default();
        let w = sine(150.0, 0.4, 0.73);
        let mel = compute_mel(&w, &cfg).unwrap();
        let e = compute_energy(&w, &cfg).unwrap();
        let (lf0, vuv) = extract_f0_vuv(&w, &cfg, cfg.f0_range).unwrap();
        assert_eq!(mel.num_frames(), e.len());
        assert_eq!(e.len(), lf0.len());
        assert_eq!(lf0.len(), vuv.len());
    }
}
