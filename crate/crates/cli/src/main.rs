//! `pvc`: batch driver for corpus generation, feature extraction, training,
//! conversion, evaluation and ablation runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use pvc_core::checkpoint;
use pvc_core::corpus::{generate_corpus, generate_waveforms, Corpus, Split, Utterance};
use pvc_core::dsp::{extract_features, features_tensor_file, Waveform};
use pvc_core::evaluation::{
    control_sweep, correlation_eval, export_latents_2d, interleave_by_speaker, probe_model, Channel,
    EvalReport,
};
use pvc_core::model::Model;
use pvc_core::tensorfile::{Field, TensorFile};
use pvc_core::training::{TrainData, TrainState, Stage};
use pvc_core::config::ModelConfig;
use pvc_core::RunConfig;

/// A problem with the invocation or its inputs (exit code 1).
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "pvc", version, about = "Prosody-aware voice conversion on a synthetic corpus")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value by dotted path, e.g. `--set train.beta=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Use the reduced desk-scale model widths before applying `--set`.
    #[arg(long, global = true)]
    compact: bool,

    /// Root seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    runs_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the multi-speaker corpus and write its feature bundles.
    GenCorpus {
        /// Output directory (default: <run>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the synthesized waveforms under <out>/wav.
        #[arg(long)]
        waveforms: bool,
    },
    /// Compute mel and explicit prosody features from waveform files.
    ExtractFeatures {
        /// A waveform file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the multi-speaker split, then adapt the decoder to the target speaker.
    Train {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop after pretraining.
        #[arg(long)]
        skip_adapt: bool,
    },
    /// Convert utterances to the target speaker, optionally scaling lf0 and energy.
    Convert {
        #[command(flatten)]
        model: ModelArgs,
        /// Utterance ids to convert; all of `--split` when omitted.
        #[arg(long = "utterance", value_name = "ID")]
        utterances: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Target speaker id (default: the adaptation speaker).
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        scale_f0: f64,
        #[arg(long, default_value_t = 1.0)]
        scale_energy: f64,
        /// Output directory (default: <run>/converted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation, control sweep, leakage probe and 2-D latent export.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        parts: EvalParts,
        /// Checkpoint of a model trained with beta = 0, probed for comparison.
        #[arg(long, value_name = "CKPT")]
        baseline: Option<PathBuf>,
        /// Checkpoint of the no-prosody-module ablation, correlated for comparison.
        #[arg(long, value_name = "CKPT")]
        ablation: Option<PathBuf>,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the beta = 0 and no-prosody-module variants and compare them with the full system.
    Ablate {
        #[command(flatten)]
        corpus: CorpusArg,
    },
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// Corpus directory (default: <run>/corpus, generated when missing).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained checkpoint (default: <run>/model.ckpt).
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArg,
}

#[derive(Args, Debug, Clone, Copy)]
struct EvalParts {
    #[arg(long)]
    correlation: bool,
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    probe: bool,
    #[arg(long)]
    export: bool,
}

impl EvalParts {
    fn or_all(self) -> Self {
        if self.correlation || self.sweep || self.probe || self.export {
            self
        } else {
            Self {
                correlation: true,
                sweep: true,
                probe: true,
                export: true,
            }
        }
    }
}

fn config_help() -> String {
    format!(
        "Config keys and defaults (override with --set KEY=VALUE):\n{}",
        RunConfig::describe_defaults()
            .lines()
            .map(|l| format!("  {l}"))
            .collect::<Vec<_>>()
            .join("\n")
    )
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let base = if cli.compact {
        RunConfig {
            model: ModelConfig {
                use_explicit_prosody: base.model.use_explicit_prosody,
                use_implicit_prosody: base.model.use_implicit_prosody,
                ..ModelConfig::compact()
            },
            ..base
        }
    } else {
        base
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(base.with_overrides(&overrides)?)
}

fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-s{}", cfg.hash_hex(), cfg.seed))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Loads `--corpus`, or the run's own corpus (generating it when missing).
fn obtain_corpus(arg: &CorpusArg, cfg: &RunConfig, run: &Path) -> Result<Corpus> {
    let corpus = match &arg.corpus {
        Some(dir) => {
            require_file(&dir.join("manifest.json"), "corpus manifest")?;
            Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?
        }
        None => {
            let dir = run.join("corpus");
            if dir.join("manifest.json").is_file() {
                Corpus::load(&dir)?
            } else {
                eprintln!("generating corpus in {}", dir.display());
                let corpus = generate_corpus(cfg, cfg.seed)?;
                corpus.write(&dir)?;
                corpus
            }
        }
    };
    if corpus.config.frame != cfg.frame || corpus.config.corpus != cfg.corpus {
        return Err(invalid("corpus was built with different frame or corpus settings than the run config"));
    }
    Ok(corpus)
}

fn gen_corpus(cfg: &RunConfig, run: &Path, out: Option<PathBuf>, waveforms: bool) -> Result<()> {
    let dir = out.unwrap_or_else(|| run.join("corpus"));
    let corpus = generate_corpus(cfg, cfg.seed)?;
    corpus.write(&dir)?;
    if waveforms {
        let wav = dir.join("wav");
        fs::create_dir_all(&wav)?;
        for (id, _, w) in generate_waveforms(cfg, cfg.seed)? {
            w.to_tensor_file().write(&wav.join(format!("{id}.pvc")))?;
        }
    }
    println!("{} utterances written to {}", corpus.utterances.len(), dir.display());
    Ok(())
}

fn extract(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = if input.is_dir() {
        fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "pvc"))
            .collect()
    } else {
        require_file(input, "waveform file")?;
        vec![input.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no waveform files in {}", input.display())));
    }
    fs::create_dir_all(out)?;
    for path in &files {
        let wave = Waveform::from_tensor_file(&TensorFile::read(path)?, path)?;
        let (mel, prosody) = extract_features(&wave, &cfg.frame).with_context(|| format!("analyzing {}", path.display()))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        features_tensor_file(&id, &mel, &prosody).write(&out.join(format!("{id}.pvc")))?;
    }
    println!("extracted features for {} files into {}", files.len(), out.display());
    Ok(())
}

/// Appends metric lines and writes periodic checkpoints during training.
struct Recorder {
    metrics: BufWriter<File>,
    ckpt_dir: PathBuf,
    every: u64,
}

impl Recorder {
    fn new(run: &Path, state: &TrainState) -> Result<Self> {
        let ckpt_dir = run.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        let mut metrics = BufWriter::new(File::create(run.join("metrics.jsonl"))?);
        for rec in &state.log {
            writeln!(metrics, "{}", rec.to_json_line())?;
        }
        Ok(Self {
            metrics,
            ckpt_dir,
            every: state.model.run.train.checkpoint_every,
        })
    }

    fn record(&mut self, state: &TrainState, rec: &pvc_core::training::MetricRecord) -> pvc_core::Result<()> {
        writeln!(self.metrics, "{}", rec.to_json_line())?;
        if self.every > 0 && state.step % self.every == 0 {
            self.metrics.flush()?;
            let stage = match state.stage {
                Stage::Pretrain => "pretrain",
                Stage::Adapt => "adapt",
            };
            checkpoint::save(state, &self.ckpt_dir.join(format!("{stage}-{:06}.ckpt", state.step)))?;
            checkpoint::save(state, &self.ckpt_dir.join("latest.ckpt"))?;
        }
        if rec.step % 100 == 0 {
            eprintln!(
                "{:?} step {} loss {:.4}",
                rec.stage,
                rec.step,
                rec.loss.unwrap_or(f64::NAN)
            );
        }
        Ok(())
    }
}

fn train_run(state: &mut TrainState, corpus: &Corpus, run: &Path, skip_adapt: bool) -> Result<()> {
    fs::create_dir_all(run)?;
    fs::write(run.join("config.json"), state.model.run.to_json())?;
    let mut rec = Recorder::new(run, state)?;
    let fail = |e: pvc_core::Error| {
        anyhow::Error::from(e).context(format!(
            "training aborted; last good checkpoint is {}",
            run.join("checkpoints/latest.ckpt").display()
        ))
    };
    if state.stage == Stage::Pretrain {
        let data = TrainData::from_split(&state.model, corpus, Split::Train)?;
        state.pretrain(&data, |s, r| rec.record(s, r)).map_err(fail)?;
        checkpoint::save(state, &run.join("pretrained.ckpt"))?;
    }
    if !skip_adapt {
        let (data, _) = TrainData::adaptation(&state.model, corpus)?;
        state.adapt(&data, |s, r| rec.record(s, r)).map_err(fail)?;
    }
    rec.metrics.flush()?;
    checkpoint::save(state, &run.join("model.ckpt"))?;
    println!("model written to {}", run.join("model.ckpt").display());
    Ok(())
}

fn train(cli: &Cli, corpus: &CorpusArg, resume: Option<&Path>, skip_adapt: bool) -> Result<()> {
    let mut state = match resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            checkpoint::load(p)?
        }
        None => {
            let cfg = load_config(cli)?;
            let run = run_dir(&cli.runs_dir, &cfg);
            let corpus = obtain_corpus(corpus, &cfg, &run)?;
            TrainState::new(&cfg, &corpus)?
        }
    };
    let cfg = state.model.run.clone();
    let run = run_dir(&cli.runs_dir, &cfg);
    let corpus = obtain_corpus(corpus, &cfg, &run)?;
    train_run(&mut state, &corpus, &run, skip_adapt)
}

fn load_model(args: &ModelArgs, run: &Path) -> Result<Model> {
    let path = args.checkpoint.clone().unwrap_or_else(|| run.join("model.ckpt"));
    require_file(&path, "checkpoint")?;
    Ok(checkpoint::load(&path)?.model)
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| invalid(format!("unknown split `{name}` (expected train, adapt or test)")))
}

/// Resolves the run directory: from the checkpoint's embedded config when
/// one is named, otherwise from the command-line config.
fn model_context(cli: &Cli, args: &ModelArgs) -> Result<(Model, Corpus, PathBuf)> {
    let cfg = match &args.checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            checkpoint::load(p)?.model.run
        }
        None => load_config(cli)?,
    };
    let run = run_dir(&cli.runs_dir, &cfg);
    let model = load_model(args, &run)?;
    let corpus = obtain_corpus(&args.corpus, &model.run, &run)?;
    Ok((model, corpus, run))
}

fn fmt_scale(s: f64) -> String {
    format!("{s}").replace('.', "p")
}

#[allow(clippy::too_many_arguments)]
fn convert(
    cli: &Cli,
    args: &ModelArgs,
    ids: &[String],
    split: &str,
    target: Option<usize>,
    scale_f0: f64,
    scale_energy: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, corpus, run) = model_context(cli, args)?;
    let target = target.unwrap_or(corpus.target_speaker_id());
    let utts: Vec<&Utterance> = if ids.is_empty() {
        corpus.split(parse_split(split)?)
    } else {
        ids.iter()
            .map(|id| corpus.find(id).ok_or_else(|| invalid(format!("unknown utterance `{id}`"))))
            .collect::<Result<_>>()?
    };
    let out = out.unwrap_or_else(|| run.join("converted"));
    fs::create_dir_all(&out)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| run.join("model.ckpt"));
    for u in &utts {
        let seed = pvc_core::seeds::substream_seed(model.run.seed, "convert", 0);
        let mel = model.convert(u, target, scale_f0, scale_energy, seed)?;
        let mut f = TensorFile::new();
        f.push_f32("mel", vec![mel.num_frames(), mel.n_mels()], mel.frames.data().iter().copied());
        f.push_text("source", &u.id);
        f.push(
            "target_speaker",
            Field::I32 {
                shape: vec![1],
                data: vec![target as i32],
            },
        );
        f.push_text("scale_f0", scale_f0.to_string());
        f.push_text("scale_energy", scale_energy.to_string());
        f.push_text("checkpoint", ckpt.display().to_string());
        f.push_text("config_hash", model.run.hash_hex());
        let name = format!("{}__to{target}__f0x{}__enx{}.pvc", u.id, fmt_scale(scale_f0), fmt_scale(scale_energy));
        f.write(&out.join(name))?;
    }
    println!("converted {} utterances into {}", utts.len(), out.display());
    Ok(())
}

/// Scales recorded in earlier conversions of this run.
fn converted_scales(dir: &Path) -> Vec<f64> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for e in entries.flatten() {
        let p = e.path();
        if let Ok(f) = TensorFile::read(&p) {
            for key in ["scale_f0", "scale_energy"] {
                if let Some(v) = f.text_field(key, &p).ok().and_then(|s| s.parse::<f64>().ok()) {
                    out.push(v);
                }
            }
        }
    }
    out
}

struct Comparison<'a> {
    baseline: Option<&'a Model>,
    ablation: Option<&'a Model>,
}

fn evaluate_into(model: &Model, corpus: &Corpus, parts: EvalParts, extra_scales: &[f64], cmp: Comparison) -> Result<EvalReport> {
    let seed = model.run.seed;
    let target = corpus.target_speaker_id();
    let test = corpus.split(Split::Test);
    let mut report = EvalReport::default();
    if parts.correlation {
        let full = correlation_eval(model, &test, Some(target), "full", seed)?;
        report.pearson_energy = full.mean_energy;
        report.pearson_lf0 = full.mean_lf0;
        report.systems.push(full);
        if let Some(m) = cmp.ablation {
            report.systems.push(correlation_eval(m, &test, Some(target), "no-prosody", seed)?);
        }
    }
    if parts.sweep {
        let mut coefs: Vec<f64> = model.run.eval.sweep_coefficients.iter().chain(extra_scales).copied().collect();
        coefs.sort_by(f64::total_cmp);
        coefs.dedup();
        for u in &test {
            for ch in [Channel::F0, Channel::Energy] {
                report.sweep.extend(control_sweep(model, u, target, &coefs, ch, seed)?);
            }
        }
    }
    if model.implicit.is_some() {
        if parts.probe {
            report.probes.push(probe_model(model, corpus, "adversarial", seed)?);
            if let Some(m) = cmp.baseline {
                report.probes.push(probe_model(m, corpus, "beta0", seed)?);
            }
        }
        if parts.export {
            let test_latents = pvc_core::evaluation::collect_latents(model, &test)?;
            let chosen = interleave_by_speaker(&test_latents, model.run.eval.export_points);
            let (points, degenerate) = export_latents_2d(&chosen)?;
            if degenerate {
                eprintln!("warning: latent covariance is degenerate; 2-D export is all zeros");
            }
            report.points = points;
            report.points_degenerate = degenerate;
        }
    } else if parts.probe || parts.export {
        eprintln!("note: model has no implicit prosody module; skipping probe and export");
    }
    Ok(report)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(dir.join("correlation.tsv"), report.correlation_tsv())?;
    fs::write(dir.join("trajectories.tsv"), report.trajectory_tsv())?;
    fs::write(dir.join("sweep.tsv"), report.sweep_tsv())?;
    fs::write(dir.join("points.tsv"), report.points_tsv())?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
    for s in &report.systems {
        println!("{}: energy r = {}, lf0 r = {}", s.system, opt(s.mean_energy), opt(s.mean_lf0));
    }
    for p in &report.probes {
        println!("probe {}: accuracy {:.3} over {} latents", p.system, p.accuracy, p.n_latents);
    }
    if !report.sweep.is_empty() {
        println!("sweep: {} rows", report.sweep.len());
    }
}

fn load_checkpoint_model(p: &Path) -> Result<Model> {
    require_file(p, "checkpoint")?;
    Ok(checkpoint::load(p)?.model)
}

fn evaluate(
    cli: &Cli,
    args: &ModelArgs,
    parts: EvalParts,
    baseline: Option<&Path>,
    ablation: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, corpus, run) = model_context(cli, args)?;
    let baseline = baseline.map(load_checkpoint_model).transpose()?;
    let ablation = ablation.map(load_checkpoint_model).transpose()?;
    let scales = converted_scales(&run.join("converted"));
    let report = evaluate_into(
        &model,
        &corpus,
        parts.or_all(),
        &scales,
        Comparison {
            baseline: baseline.as_ref(),
            ablation: ablation.as_ref(),
        },
    )?;
    let dir = out.unwrap_or_else(|| run.join("eval"));
    write_report(&report, &dir)?;
    print_summary(&report);
    println!("report written to {}", dir.display());
    Ok(())
}

fn ablate(cli: &Cli, corpus_arg: &CorpusArg) -> Result<()> {
    let cfg = load_config(cli)?;
    let run = run_dir(&cli.runs_dir, &cfg);
    let corpus = obtain_corpus(corpus_arg, &cfg, &run)?;
    let dir = run.join("ablation");
    let mut beta0 = cfg.clone();
    beta0.train.beta = 0.0;
    let mut bare = cfg.clone();
    bare.model.use_explicit_prosody = false;
    bare.model.use_implicit_prosody = false;
    let mut trained = Vec::new();
    for (name, variant) in [("beta0", beta0), ("no-prosody", bare)] {
        let vdir = dir.join(name);
        let ckpt = vdir.join("model.ckpt");
        let model = if ckpt.is_file() {
            checkpoint::load(&ckpt)?.model
        } else {
            eprintln!("training variant {name}");
            let mut state = TrainState::new(&variant, &corpus)?;
            train_run(&mut state, &corpus, &vdir, false)?;
            state.model
        };
        trained.push(model);
    }
    let full_ckpt = run.join("model.ckpt");
    if !full_ckpt.is_file() {
        println!("variants trained under {}; run `train` with the same config to compare", dir.display());
        return Ok(());
    }
    let full = checkpoint::load(&full_ckpt)?.model;
    let parts = EvalParts {
        correlation: true,
        sweep: false,
        probe: true,
        export: false,
    };
    let report = evaluate_into(
        &full,
        &corpus,
        parts,
        &[],
        Comparison {
            baseline: Some(&trained[0]),
            ablation: Some(&trained[1]),
        },
    )?;
    write_report(&report, &dir)?;
    print_summary(&report);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus { out, waveforms } => {
            let cfg = load_config(cli)?;
            gen_corpus(&cfg, &run_dir(&cli.runs_dir, &cfg), out.clone(), *waveforms)
        }
        Command::ExtractFeatures { input, out } => extract(&load_config(cli)?, input, out),
        Command::Train {
            corpus,
            resume,
            skip_adapt,
        } => train(cli, corpus, resume.as_deref(), *skip_adapt),
        Command::Convert {
            model,
            utterances,
            split,
            target,
            scale_f0,
            scale_energy,
            out,
        } => convert(cli, model, utterances, split, *target, *scale_f0, *scale_energy, out.clone()),
        Command::Evaluate {
            model,
            parts,
            baseline,
            ablation,
            out,
        } => evaluate(cli, model, *parts, baseline.as_deref(), ablation.as_deref(), out.clone()),
        Command::Ablate { corpus } => ablate(cli, corpus),
    }
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some()
            || c.downcast_ref::<pvc_core::Error>().is_some_and(pvc_core::Error::is_validation)
    })
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(config_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn scales_format_for_file_names() {
        assert_eq!(fmt_scale(1.5), "1p5");
        assert_eq!(fmt_scale(1.0), "1");
    }
}
