//! Objective evaluation: prosody estimation from converted mel, Pearson
//! correlation against the source oracle, prosody-control sweeps, a
//! speaker-leakage probe on VAE latents, and a 2-D projection for plotting.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, FrameConfig};
use crate::corpus::{Corpus, Split, Utterance};
use crate::dsp::{MelFilterbank, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::optim::Adam;
use crate::nn::{Graph, Matrix, ParamStore};
use crate::prosody::{graph_loss, vae_encode, SpeakerClassifier};
use crate::seeds::{substream, substream_seed};

/// Minimum mel resolution for harmonic-comb pitch estimation.
pub const MIN_MELS_FOR_PITCH: usize = 64;

/// Candidate f0 grid density, steps per octave.
const GRID_PER_OCTAVE: f64 = 96.0;

/// Minimum latents per speaker for the leakage probe.
pub const MIN_PROBE_PER_SPEAKER: usize = 10;

/// Sample Pearson coefficient. `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("pearson inputs have lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("pearson needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Prosody measured on a (converted) mel spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyEstimate {
    /// Hz, 0 where the frame is judged unvoiced.
    pub f0_hat: Vec<f64>,
    /// Per-frame sum of exponentiated mel bands.
    pub energy_hat: Vec<f64>,
    /// Best comb candidate regardless of the voicing decision.
    pub f0_best: Vec<f64>,
    /// Normalized comb score in `[-1, 1]` of the best candidate.
    pub voicing_score: Vec<f64>,
}

/// Harmonic-comb pitch estimator over mel band magnitudes.
#[derive(Clone, Debug)]
pub struct CombPitch {
    centers: Vec<f64>,
    candidates: Vec<f64>,
    harmonics: usize,
    threshold: f64,
}

impl CombPitch {
    pub fn new(frame: &FrameConfig, eval: &EvalConfig) -> Result<Self> {
        if frame.n_mels < MIN_MELS_FOR_PITCH {
            return Err(Error::InvalidInput(format!(
                "mel pitch estimation needs at least {MIN_MELS_FOR_PITCH} bands, got {}",
                frame.n_mels
            )));
        }
        let [lo, hi] = frame.f0_range;
        let steps = ((hi / lo).log2() * GRID_PER_OCTAVE).ceil() as usize;
        let candidates = (0..=steps)
            .map(|i| lo * 2f64.powf(i as f64 / GRID_PER_OCTAVE))
            .filter(|&f| f <= hi * (1.0 + 1e-12))
            .collect();
        Ok(Self {
            centers: MelFilterbank::new(frame).centers(),
            candidates,
            harmonics: eval.comb_harmonics,
            threshold: eval.comb_threshold,
        })
    }

    /// Linear interpolation of band magnitudes at `freq`; zero outside the bank.
    fn sample(&self, mags: &[f64], freq: f64) -> f64 {
        let c = &self.centers;
        if freq < c[0] || freq > c[c.len() - 1] {
            return 0.0;
        }
        let i = c.partition_point(|&x| x <= freq).clamp(1, c.len() - 1);
        let w = (freq - c[i - 1]) / (c[i] - c[i - 1]);
        mags[i - 1] * (1.0 - w) + mags[i] * w
    }

    /// Peak and trough sums of the comb at `f0`.
    fn comb(&self, mags: &[f64], f0: f64) -> (f64, f64) {
        (1..=self.harmonics).fold((0.0, 0.0), |(p, t), k| {
            let k = k as f64;
            (p + self.sample(mags, k * f0), t + self.sample(mags, (k - 0.5) * f0))
        })
    }

    /// `(best f0, normalized score)` for one frame of band magnitudes.
    pub fn frame(&self, mags: &[f64]) -> (f64, f64) {
        let mut best = (self.candidates[0], f64::NEG_INFINITY, 0.0);
        for &f0 in &self.candidates {
            let (p, t) = self.comb(mags, f0);
            if p - t > best.1 {
                best = (f0, p - t, p + t);
            }
        }
        let score = if best.2 > 0.0 { best.1 / best.2 } else { 0.0 };
        (best.0, score)
    }

    pub fn estimate(&self, mel: &MelSpectrogram) -> Result<ProsodyEstimate> {
        if mel.n_mels() != self.centers.len() {
            return Err(Error::ShapeMismatch(format!(
                "mel has {} bands, estimator expects {}",
                mel.n_mels(),
                self.centers.len()
            )));
        }
        if !mel.frames.all_finite() {
            return Err(Error::NonFinite("mel spectrogram"));
        }
        let t = mel.num_frames();
        let mut est = ProsodyEstimate {
            f0_hat: Vec::with_capacity(t),
            energy_hat: Vec::with_capacity(t),
            f0_best: Vec::with_capacity(t),
            voicing_score: Vec::with_capacity(t),
        };
        let mut mags = vec![0.0; mel.n_mels()];
        for r in 0..t {
            for (m, &v) in mags.iter_mut().zip(mel.frames.row(r)) {
                *m = v.exp();
            }
            let (f0, score) = self.frame(&mags);
            est.energy_hat.push(mags.iter().sum());
            est.f0_best.push(f0);
            est.voicing_score.push(score);
            est.f0_hat.push(if score >= self.threshold { f0 } else { 0.0 });
        }
        Ok(est)
    }
}

pub fn estimate_prosody_from_mel(mel: &MelSpectrogram, frame: &FrameConfig, eval: &EvalConfig) -> Result<ProsodyEstimate> {
    CombPitch::new(frame, eval)?.estimate(mel)
}

/// Correlations of one converted utterance against its source oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceCorrelation {
    pub id: String,
    pub speaker_id: usize,
    pub energy: Option<f64>,
    /// Over oracle-voiced frames, log of the best comb candidate vs log oracle f0.
    pub lf0: Option<f64>,
}

/// Frame-level trajectories of one conversion, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub oracle_f0: Vec<f64>,
    pub f0_hat: Vec<f64>,
    pub oracle_energy: Vec<f64>,
    pub energy_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub system: String,
    /// Macro average over utterances with a defined coefficient.
    pub mean_energy: Option<f64>,
    pub mean_lf0: Option<f64>,
    /// Single coefficient over all frames pooled.
    pub pooled_energy: Option<f64>,
    pub pooled_lf0: Option<f64>,
    pub undefined_energy: usize,
    pub undefined_lf0: usize,
    pub per_utterance: Vec<UtteranceCorrelation>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), undefined)
}

fn conversion_seed(seed: u64, id: &str) -> u64 {
    substream_seed(seed, "eval-dropout", crate::config::fnv1a(id.as_bytes()))
}

/// Converts every utterance (to `target`, or to its own speaker when `None`)
/// and correlates the estimated prosody with the source oracle contours.
pub fn correlation_eval(
    model: &Model,
    utterances: &[&Utterance],
    target: Option<usize>,
    system: &str,
    seed: u64,
) -> Result<CorrelationSummary> {
    if utterances.is_empty() {
        return Err(Error::InsufficientData("no utterances to evaluate".into()));
    }
    let comb = CombPitch::new(&model.run.frame, &model.run.eval)?;
    let mut per_utterance = Vec::with_capacity(utterances.len());
    let mut trajectories = Vec::with_capacity(utterances.len());
    let (mut pool_e, mut pool_eh, mut pool_f, mut pool_fh) = (vec![], vec![], vec![], vec![]);
    for u in utterances {
        let spk = target.unwrap_or(u.speaker_id);
        let mel = model.convert(u, spk, 1.0, 1.0, conversion_seed(seed, &u.id))?;
        let est = comb.estimate(&mel)?;
        let energy = pearson(&est.energy_hat, &u.oracle_energy)?;
        let (lf, lfh): (Vec<f64>, Vec<f64>) = u
            .oracle_f0
            .iter()
            .zip(&est.f0_best)
            .filter(|(&f, _)| f > 0.0)
            .map(|(&f, &h)| (f.ln(), h.ln()))
            .unzip();
        let lf0 = if lf.len() >= 2 { pearson(&lfh, &lf)? } else { None };
        pool_e.extend_from_slice(&u.oracle_energy);
        pool_eh.extend_from_slice(&est.energy_hat);
        pool_f.extend(lf);
        pool_fh.extend(lfh);
        per_utterance.push(UtteranceCorrelation {
            id: u.id.clone(),
            speaker_id: u.speaker_id,
            energy,
            lf0,
        });
        trajectories.push(Trajectory {
            id: u.id.clone(),
            oracle_f0: u.oracle_f0.clone(),
            f0_hat: est.f0_hat,
            oracle_energy: u.oracle_energy.clone(),
            energy_hat: est.energy_hat,
        });
    }
    let (mean_energy, undefined_energy) = mean_defined(per_utterance.iter().map(|c| c.energy));
    let (mean_lf0, undefined_lf0) = mean_defined(per_utterance.iter().map(|c| c.lf0));
    let pooled = |a: &[f64], b: &[f64]| if a.len() >= 2 { pearson(a, b) } else { Ok(None) };
    Ok(CorrelationSummary {
        system: system.to_string(),
        mean_energy,
        mean_lf0,
        pooled_energy: pooled(&pool_eh, &pool_e)?,
        pooled_lf0: pooled(&pool_fh, &pool_f)?,
        undefined_energy,
        undefined_lf0,
        per_utterance,
        trajectories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    F0,
    Energy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: String,
    pub channel: Channel,
    pub coefficient: f64,
    /// Mean best-candidate f0 over the source's voiced frames.
    pub mean_f0: f64,
    pub mean_energy: f64,
}

/// Converts `u` with each coefficient applied to one channel, keeping the
/// other at 1. Every conversion of the sweep shares one dropout seed.
pub fn control_sweep(
    model: &Model,
    u: &Utterance,
    target: usize,
    coefficients: &[f64],
    channel: Channel,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let comb = CombPitch::new(&model.run.frame, &model.run.eval)?;
    let voiced: Vec<usize> = (0..u.oracle_f0.len()).filter(|&i| u.oracle_f0[i] > 0.0).collect();
    let dropout_seed = conversion_seed(seed, &u.id);
    coefficients
        .iter()
        .map(|&c| {
            let (sf, se) = match channel {
                Channel::F0 => (c, 1.0),
                Channel::Energy => (1.0, c),
            };
            let mel = model.convert(u, target, sf, se, dropout_seed)?;
            let est = comb.estimate(&mel)?;
            let mean_f0 = if voiced.is_empty() {
                0.0
            } else {
                voiced.iter().map(|&i| est.f0_best[i]).sum::<f64>() / voiced.len() as f64
            };
            Ok(SweepRow {
                id: u.id.clone(),
                channel,
                coefficient: c,
                mean_f0,
                mean_energy: est.energy_hat.iter().sum::<f64>() / est.energy_hat.len() as f64,
            })
        })
        .collect()
}

/// True when the sweep rows of one channel increase strictly with the coefficient.
pub fn strictly_increasing(rows: &[SweepRow]) -> bool {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.coefficient.total_cmp(&b.coefficient));
    sorted.windows(2).all(|w| match w[0].channel {
        Channel::F0 => w[1].mean_f0 > w[0].mean_f0,
        Channel::Energy => w[1].mean_energy > w[0].mean_energy,
    })
}

/// Posterior mean `mu` of the implicit prosody encoder per utterance, with its speaker.
pub fn collect_latents(model: &Model, utterances: &[&Utterance]) -> Result<Vec<(Vec<f64>, usize)>> {
    let ip = model
        .implicit
        .as_ref()
        .ok_or_else(|| Error::Config("model has no implicit prosody module".into()))?;
    utterances
        .iter()
        .map(|u| {
            let mel = model.mel_stats.normalize(&u.mel);
            let (mu, _) = vae_encode(&ip.vae, &model.store, &mel)?;
            Ok((mu, u.speaker_id))
        })
        .collect()
}

/// Latents of every source-speaker utterance (train and test splits), the set
/// the leakage probe is run on.
pub fn source_latents(model: &Model, corpus: &Corpus) -> Result<Vec<(Vec<f64>, usize)>> {
    let utts: Vec<&Utterance> = corpus
        .utterances
        .iter()
        .filter(|u| matches!(u.split, Split::Train | Split::Test))
        .collect();
    collect_latents(model, &utts)
}

/// Probe accuracy for one trained model.
pub fn probe_model(model: &Model, corpus: &Corpus, system: &str, seed: u64) -> Result<ProbeResult> {
    let latents = source_latents(model, corpus)?;
    let (accuracy, fold_accuracies) = leakage_probe(&latents, &model.run.eval, seed)?;
    Ok(ProbeResult {
        system: system.to_string(),
        accuracy,
        fold_accuracies,
        n_latents: latents.len(),
    })
}

/// Interleaves speakers and keeps at most `n` latents, for the 2-D export.
pub fn interleave_by_speaker(latents: &[(Vec<f64>, usize)], n: usize) -> Vec<(Vec<f64>, usize)> {
    let n_spk = latents.iter().map(|l| l.1 + 1).max().unwrap_or(0);
    let mut queues: Vec<std::collections::VecDeque<&(Vec<f64>, usize)>> = vec![Default::default(); n_spk];
    for l in latents {
        queues[l.1].push_back(l);
    }
    let mut out = Vec::with_capacity(n.min(latents.len()));
    while out.len() < n && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if out.len() < n {
                if let Some(l) = q.pop_front() {
                    out.push(l.clone());
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub system: String,
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub n_latents: usize,
}

fn standardize(rows: &[&[f64]], fit: &[usize]) -> impl Fn(&[f64]) -> Vec<f64> {
    let d = rows[0].len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in fit {
        for (m, x) in mean.iter_mut().zip(rows[i]) {
            *m += x / n;
        }
    }
    for &i in fit {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(rows[i]) {
            *v += (x - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    move |x: &[f64]| x.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect()
}

/// Cross-validated accuracy of a fresh 3-layer classifier trained on frozen
/// latents. Inputs are standardized with training-fold statistics.
pub fn leakage_probe(latents: &[(Vec<f64>, usize)], cfg: &EvalConfig, seed: u64) -> Result<(f64, Vec<f64>)> {
    if latents.is_empty() {
        return Err(Error::InsufficientData("no latents to probe".into()));
    }
    let n_classes = latents.iter().map(|l| l.1).max().expect("non-empty") + 1;
    let mut counts = vec![0usize; n_classes];
    for l in latents {
        counts[l.1] += 1;
    }
    if let Some((s, &c)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c < MIN_PROBE_PER_SPEAKER) {
        return Err(Error::InsufficientData(format!(
            "speaker {s} has {c} latents, the probe needs at least {MIN_PROBE_PER_SPEAKER}"
        )));
    }
    let d = latents[0].0.len();
    if d == 0 || latents.iter().any(|l| l.0.len() != d) {
        return Err(Error::ShapeMismatch("latents must share one non-zero dimension".into()));
    }
    let rows: Vec<&[f64]> = latents.iter().map(|l| l.0.as_slice()).collect();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut substream(seed, "probe-folds", 0));
    let folds = cfg.probe_folds;
    let mut accs = Vec::with_capacity(folds);
    for k in 0..folds {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == k).map(|(_, &j)| j).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != k).map(|(_, &j)| j).collect();
        if test.is_empty() || train.is_empty() {
            return Err(Error::InsufficientData("too few latents for the requested folds".into()));
        }
        let norm = standardize(&rows, &train);
        let to_matrix = |idx: &[usize]| Matrix::from_rows(&idx.iter().map(|&i| norm(rows[i])).collect::<Vec<_>>());
        let (x_train, x_test) = (to_matrix(&train), to_matrix(&test));
        let y_train: Vec<usize> = train.iter().map(|&i| latents[i].1).collect();

        let mut store = ParamStore::new();
        let mut rng = substream(seed, "probe-init", k as u64);
        let clf = SpeakerClassifier::new(&mut store, &mut rng, "probe", d, cfg.probe_hidden, n_classes);
        let mut adam = Adam::new(&store);
        let all = vec![true; store.len()];
        for _ in 0..cfg.probe_epochs {
            let mut g = Graph::new(all.clone(), true, 0);
            let x = g.constant(x_train.clone());
            let p = clf.forward(&mut g, &store, x);
            let loss = graph_loss::ce(&mut g, p, &y_train);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads, cfg.probe_lr);
        }
        let mut g = Graph::inference(&store, 0);
        let x = g.constant(x_test);
        let p = clf.forward(&mut g, &store, x);
        let probs = g.value(p);
        let correct = test
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let row = probs.row(r);
                let pred = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("classes");
                pred == latents[i].1
            })
            .count();
        accs.push(correct as f64 / test.len() as f64);
    }
    Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2d {
    pub x: f64,
    pub y: f64,
    pub speaker_id: usize,
}

/// Projection onto the top two principal directions of the centered latents.
/// Returns zeros and `degenerate = true` when the covariance vanishes.
pub fn export_latents_2d(latents: &[(Vec<f64>, usize)]) -> Result<(Vec<Point2d>, bool)> {
    if latents.len() < 3 {
        return Err(Error::InsufficientData("2-D export needs at least three latents".into()));
    }
    let d = latents[0].0.len();
    if d == 0 || latents.iter().any(|l| l.0.len() != d) {
        return Err(Error::ShapeMismatch("latents must share one non-zero dimension".into()));
    }
    let n = latents.len();
    let x = DMatrix::from_fn(n, d, |i, j| latents[i].0[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[idx[0]];
    if !(top > 1e-12) {
        let pts = latents.iter().map(|l| Point2d { x: 0.0, y: 0.0, speaker_id: l.1 }).collect();
        return Ok((pts, true));
    }
    let axis = |k: usize| -> Vec<f64> {
        if k >= d {
            return vec![0.0; d];
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    let pts = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            Point2d {
                x: dot(&a0),
                y: dot(&a1),
                speaker_id: latents[i].1,
            }
        })
        .collect();
    Ok((pts, false))
}

/// Everything `evaluate` produces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro-averaged correlations of the primary system.
    pub pearson_energy: Option<f64>,
    pub pearson_lf0: Option<f64>,
    pub systems: Vec<CorrelationSummary>,
    pub sweep: Vec<SweepRow>,
    pub probes: Vec<ProbeResult>,
    pub points: Vec<Point2d>,
    pub points_degenerate: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn correlation_tsv(&self) -> String {
        let mut s = String::from("system\tid\tspeaker\tenergy\tlf0\n");
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        for sys in &self.systems {
            for c in &sys.per_utterance {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", sys.system, c.id, c.speaker_id, opt(c.energy), opt(c.lf0));
            }
        }
        s
    }

    pub fn trajectory_tsv(&self) -> String {
        let mut s = String::from("system\tid\tframe\toracle_f0\tf0_hat\toracle_energy\tenergy_hat\n");
        for sys in &self.systems {
            for t in &sys.trajectories {
                for i in 0..t.f0_hat.len() {
                    let _ = writeln!(
                        s,
                        "{}\t{}\t{i}\t{:.3}\t{:.3}\t{:.6}\t{:.6}",
                        sys.system, t.id, t.oracle_f0[i], t.f0_hat[i], t.oracle_energy[i], t.energy_hat[i]
                    );
                }
            }
        }
        s
    }

    pub fn sweep_tsv(&self) -> String {
        let mut s = String::from("id\tchannel\tcoefficient\tmean_f0\tmean_energy\n");
        for r in &self.sweep {
            let ch = match r.channel {
                Channel::F0 => "f0",
                Channel::Energy => "energy",
            };
            let _ = writeln!(s, "{}\t{ch}\t{}\t{:.3}\t{:.6}", r.id, r.coefficient, r.mean_f0, r.mean_energy);
        }
        s
    }

    pub fn points_tsv(&self) -> String {
        let mut s = String::from("x\ty\tspeaker\n");
        for p in &self.points {
            let _ = writeln!(s, "{:.6}\t{:.6}\t{}", p.x, p.y, p.speaker_id);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_edge_cases() {
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::InsufficientData(_))));
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
    }

    #[test]
    fn mean_skips_undefined() {
        let (m, u) = mean_defined([Some(1.0), None, Some(0.5)].into_iter());
        assert_eq!((m, u), (Some(0.75), 1));
        assert_eq!(mean_defined([None].into_iter()), (None, 1));
    }

    #[test]
    fn low_resolution_is_rejected() {
        let frame = FrameConfig {
            n_mels: 40,
            ..FrameConfig::default()
        };
        assert!(CombPitch::new(&frame, &EvalConfig::default()).is_err());
    }

    #[test]
    fn sweep_monotonicity_check() {
        let row = |c: f64, e: f64| SweepRow {
            id: "u".into(),
            channel: Channel::Energy,
            coefficient: c,
            mean_f0: 0.0,
            mean_energy: e,
        };
        assert!(strictly_increasing(&[row(1.5, 3.0), row(0.5, 1.0), row(1.0, 2.0)]));
        assert!(!strictly_increasing(&[row(0.5, 1.0), row(1.0, 1.0)]));
    }
}
