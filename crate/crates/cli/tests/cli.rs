use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--compact",
    "--set",
    "corpus.utterances_per_speaker=4",
    "--set",
    "corpus.target_utterances=4",
    "--set",
    "corpus.adapt_holdout=1",
    "--set",
    "corpus.test_per_speaker=2",
    "--set",
    "corpus.max_frames=100",
    "--set",
    "model.n_blocks=1",
    "--set",
    "train.pretrain_steps=12",
    "--set",
    "train.adapt_steps=4",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.checkpoint_every=4",
];

fn pvc(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvc"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .output()
        .expect("pvc runs")
}

fn tiny(runs: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = TINY.to_vec();
    all.extend_from_slice(args);
    pvc(runs, &all)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file below `dir`, recursively, in path order.
fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(sorted_files(&p));
        } else {
            v.push(p);
        }
    }
    v.sort();
    v
}

/// The single run directory created under `runs`.
fn run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "expected one run directory, found {dirs:?}");
    dirs[0].clone()
}

#[test]
fn help_lists_config_keys_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pvc(tmp.path(), &["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["train.beta", "model.d_model", "frame.f0_range", "eval.sweep_coefficients"] {
        assert!(text.contains(key), "help is missing {key}");
    }
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    assert_eq!(pvc(runs, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(pvc(runs, &["--set", "train.bogus=1", "gen-corpus"]).status.code(), Some(1));
    assert_eq!(pvc(runs, &["--set", "train.beta=-1", "gen-corpus"]).status.code(), Some(1));
    let missing = runs.join("missing.ckpt");
    let out = pvc(runs, &["convert", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = pvc(tmp.path(), &["convert", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, seed) in dirs.iter().zip(["3", "3", "4"]) {
        ok(&tiny(tmp.path(), &["--seed", seed, "gen-corpus", "--out", dir.to_str().unwrap()]));
    }
    let (a, b, c) = (sorted_files(&dirs[0]), sorted_files(&dirs[1]), sorted_files(&dirs[2]));
    assert_eq!(a.len(), 4 * (4 + 2) + 4 + 1, "bundles plus manifest");
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
    let differs = a.iter().zip(&c).any(|(x, y)| fs::read(x).unwrap() != fs::read(y).unwrap());
    assert!(differs, "a different seed should change the corpus");
}

#[test]
fn extract_features_from_written_waveforms() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&tiny(tmp.path(), &["gen-corpus", "--out", corpus.to_str().unwrap(), "--waveforms"]));
    let feats = tmp.path().join("features");
    ok(&tiny(
        tmp.path(),
        &["extract-features", "--input", corpus.join("wav").to_str().unwrap(), "--out", feats.to_str().unwrap()],
    ));
    assert_eq!(sorted_files(&feats).len(), sorted_files(&corpus.join("wav")).len());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tmp.path().join("straight");
    ok(&tiny(&straight, &["train"]));
    let run = run_dir(&straight);
    let reference = fs::read(run.join("model.ckpt")).unwrap();
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12 + 4);

    // Resume from the middle of pretraining into a fresh runs directory.
    let resumed = tmp.path().join("resumed");
    let ckpt = tmp.path().join("mid.ckpt");
    fs::copy(run.join("checkpoints/pretrain-000008.ckpt"), &ckpt).unwrap();
    let corpus = run.join("corpus");
    ok(&pvc(
        &resumed,
        &["train", "--resume", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()],
    ));
    let again = run_dir(&resumed);
    assert!(fs::read(again.join("model.ckpt")).unwrap() == reference, "resumed checkpoint differs");
    assert_eq!(fs::read_to_string(again.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn converted_scales_appear_in_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    ok(&tiny(runs, &["train"]));
    let run = run_dir(runs);
    ok(&tiny(runs, &["convert", "--scale-f0", "1.5"]));
    let converted = sorted_files(&run.join("converted"));
    assert_eq!(converted.len(), 4 * 2);
    assert!(converted.iter().all(|p| p.to_string_lossy().contains("__f0x1p5__enx1.pvc")));

    ok(&tiny(runs, &["evaluate", "--sweep"]));
    let sweep = fs::read_to_string(run.join("eval/sweep.tsv")).unwrap();
    let coefficients: Vec<&str> = sweep.lines().skip(1).filter_map(|l| l.split('\t').nth(2)).collect();
    assert!(coefficients.contains(&"1.5"));
    for c in ["0.5", "1", "1.5"] {
        assert_eq!(coefficients.iter().filter(|&&x| x == c).count(), 8 * 2, "rows for coefficient {c}");
    }

    let out = tiny(runs, &["convert", "--target", "99"]);
    assert_eq!(out.status.code(), Some(1));
}
