use proptest::prelude::*;
use pvc_core::config::{EvalConfig, FrameConfig};
use pvc_core::corpus::{make_speaker, synth_utterance, PhoneInventory, PhoneSegment, UtteranceSpec};
use pvc_core::dsp::{compute_mel, MelSpectrogram, LOG_EPS};
use pvc_core::evaluation::{estimate_prosody_from_mel, export_latents_2d, leakage_probe, pearson};
use pvc_core::nn::Matrix;
use pvc_core::seeds::substream;
use pvc_core::Error;
use rand::Rng;

/// Textbook single-pass formula, independent of the library's centered sums.
fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sx, sy) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sxy: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sxx: f64 = a.iter().map(|x| x * x).sum();
    let syy: f64 = b.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn pearson_examples() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
    let (a, b) = ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 100.0]);
    let r = pearson(&a, &b).unwrap().unwrap();
    assert!((r - brute_pearson(&a, &b)).abs() < 1e-12);
    assert!(r > 0.78 && r < 0.79);
}

proptest! {
    #[test]
    fn pearson_identities(a in prop::collection::vec(-100.0f64..100.0, 3..40),
                          b in prop::collection::vec(-100.0f64..100.0, 40),
                          scale in 0.01f64..50.0, shift in -100.0f64..100.0) {
        let spread = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - a.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((pearson(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((pearson(&a, &neg).unwrap().unwrap() + 1.0).abs() < 1e-9);
        let b = &b[..a.len()];
        if let Some(r) = pearson(&a, b).unwrap() {
            let moved: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
            let r2 = pearson(&moved, b).unwrap().unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            prop_assert!((r - brute_pearson(&a, b)).abs() < 1e-6);
        }
    }
}

fn constant_pitch_mel(speaker: usize, f0: f64, frames: usize) -> MelSpectrogram {
    let frame = FrameConfig::default();
    let inventory = PhoneInventory::new(12, 3);
    let spk = make_speaker(speaker, 4, frame.n_mels, &mut substream(11, "spk", speaker as u64));
    let phones: Vec<PhoneSegment> = (0..frames / 10)
        .map(|i| PhoneSegment {
            phone: 3 + i % 9,
            frames: 10,
        })
        .collect();
    let t = phones.len() * 10;
    let utt = UtteranceSpec {
        phones,
        f0_contour: vec![f0; t],
        energy_contour: vec![0.2; t],
        voicing_plan: vec![1; t],
    };
    let wave = synth_utterance(&spk, &utt, &inventory, &frame, 5).unwrap();
    compute_mel(&wave, &frame).unwrap()
}

#[test]
fn comb_pitch_tracks_constant_f0() {
    let frame = FrameConfig::default();
    let eval = EvalConfig::default();
    for (speaker, f0) in [(0, 100.0), (1, 150.0), (2, 220.0), (3, 300.0), (1, 380.0)] {
        let mel = constant_pitch_mel(speaker, f0, 60);
        let est = estimate_prosody_from_mel(&mel, &frame, &eval).unwrap();
        assert_eq!(est.f0_hat.len(), mel.num_frames());
        let good = est.f0_hat.iter().filter(|&&h| h > 0.0 && (h - f0).abs() / f0 <= 0.08).count();
        let frac = good as f64 / est.f0_hat.len() as f64;
        assert!(frac >= 0.85, "f0 {f0}: {frac:.2} of frames within 8%");
    }
}

#[test]
fn silence_is_unvoiced_and_quiet() {
    let frame = FrameConfig::default();
    let mel = MelSpectrogram {
        frames: Matrix::filled(20, frame.n_mels, LOG_EPS.ln()),
        frame_shift_ms: frame.frame_shift_ms,
        frame_length_ms: frame.frame_length_ms,
    };
    let est = estimate_prosody_from_mel(&mel, &frame, &EvalConfig::default()).unwrap();
    assert!(est.f0_hat.iter().all(|&f| f == 0.0));
    assert!(est.energy_hat.iter().all(|&e| e <= frame.n_mels as f64 * LOG_EPS * 1.0001));
}

#[test]
fn energy_is_linear_in_amplitude() {
    let frame = FrameConfig::default();
    let mel = constant_pitch_mel(2, 180.0, 30);
    let louder = MelSpectrogram {
        frames: mel.frames.map(|v| v + 2f64.ln()),
        ..mel.clone()
    };
    let eval = EvalConfig::default();
    let a = estimate_prosody_from_mel(&mel, &frame, &eval).unwrap();
    let b = estimate_prosody_from_mel(&louder, &frame, &eval).unwrap();
    for (x, y) in a.energy_hat.iter().zip(&b.energy_hat) {
        assert!((y / x - 2.0).abs() < 1e-9);
    }
    assert_eq!(a.f0_hat, b.f0_hat);
}

#[test]
fn too_few_mel_bands_is_an_error() {
    let frame = FrameConfig {
        n_mels: 32,
        ..FrameConfig::default()
    };
    let mel = MelSpectrogram {
        frames: Matrix::zeros(4, 32),
        frame_shift_ms: 12.5,
        frame_length_ms: 50.0,
    };
    assert!(estimate_prosody_from_mel(&mel, &frame, &EvalConfig::default()).is_err());
}

fn clustered_latents(per_speaker: usize, spread: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = substream(seed, "latents", 0);
    (0..4 * per_speaker)
        .map(|i| {
            let s = i % 4;
            let z = (0..8)
                .map(|d| if d == s { 3.0 } else { 0.0 } + spread * rng.random_range(-1.0..1.0))
                .collect();
            (z, s)
        })
        .collect()
}

#[test]
fn probe_separates_clusters_and_falls_to_chance_on_shuffled_labels() {
    let cfg = EvalConfig::default();
    let latents = clustered_latents(30, 0.5, 1);
    let (acc, folds) = leakage_probe(&latents, &cfg, 3).unwrap();
    assert_eq!(folds.len(), cfg.probe_folds);
    assert!(acc > 0.95, "separable accuracy {acc}");

    let mut rng = substream(9, "perm", 0);
    let shuffled: Vec<(Vec<f64>, usize)> = latents
        .iter()
        .map(|(z, _)| (z.clone(), rng.random_range(0..4)))
        .collect();
    let (chance, _) = leakage_probe(&shuffled, &cfg, 3).unwrap();
    assert!((chance - 0.25).abs() <= 0.08, "shuffled accuracy {chance}");
}

#[test]
fn probe_needs_ten_latents_per_speaker() {
    let latents = clustered_latents(9, 0.5, 2);
    assert!(matches!(
        leakage_probe(&latents, &EvalConfig::default(), 0),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn pca_is_exact_on_planar_latents() {
    let mut rng = substream(4, "plane", 0);
    let u = [1.0, 2.0, 0.0, -1.0, 0.5];
    let v = [0.0, 1.0, 1.0, 1.0, -2.0];
    let latents: Vec<(Vec<f64>, usize)> = (0..30)
        .map(|i| {
            let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            ((0..5).map(|d| 0.3 + a * u[d] + b * v[d]).collect(), i % 5)
        })
        .collect();
    let (points, degenerate) = export_latents_2d(&latents).unwrap();
    assert!(!degenerate);
    assert_eq!(points.len(), 30);
    // A rank-2 projection preserves all pairwise distances.
    for i in 0..30 {
        for j in 0..30 {
            let d_full: f64 = (0..5).map(|d| (latents[i].0[d] - latents[j].0[d]).powi(2)).sum::<f64>().sqrt();
            let d_2d = ((points[i].x - points[j].x).powi(2) + (points[i].y - points[j].y).powi(2)).sqrt();
            assert!((d_full - d_2d).abs() < 1e-6);
        }
    }
    let doubled: Vec<_> = latents.iter().chain(&latents).cloned().collect();
    let (twice, _) = export_latents_2d(&doubled).unwrap();
    for i in 0..30 {
        assert!((twice[i].x - twice[i + 30].x).abs() < 1e-12 && (twice[i].y - twice[i + 30].y).abs() < 1e-12);
        assert!((twice[i].x - points[i].x).abs() < 1e-9 && (twice[i].y - points[i].y).abs() < 1e-9);
    }
}

#[test]
fn pca_degenerate_and_small_inputs() {
    let same = vec![(vec![1.0, 2.0], 0); 5];
    let (pts, degenerate) = export_latents_2d(&same).unwrap();
    assert!(degenerate && pts.iter().all(|p| p.x == 0.0 && p.y == 0.0));
    assert!(export_latents_2d(&same[..2]).is_err());
}
