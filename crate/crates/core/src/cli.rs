//! Command-line front end: corpus creation, both training stages, synthesis,
//! evaluation and speed benchmarks.
//!
//! Every verb resolves its settings from defaults, an optional `--config`
//! TOML file and repeated `--override key=value` flags, and writes the result
//! as `config.toml` into its output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_audio_at, make_toy_corpus, write_wav, Dataset, DatasetSpec, Split, ToyCorpusOptions, WavFormat};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_generation, emit_report, evaluate_generation, score_item, BenchResult, MetricReport, ReportFormat,
};
use crate::flow::{ode_sample_audio, Solver, TimeGrid};
use crate::signal::{mel_spectrogram, AudioBuffer, MelSpectrogram};
use crate::train::{load_generator, resolve_layers, Checkpoint, Init, Stage, TrainConfig, Trainer, CONFIG_SNAPSHOT};

/// Environment variable naming the directory that relative corpus paths are
/// resolved against.
pub const CACHE_ENV: &str = "TURBOWAVE_CACHE";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "turbowave", about = "Few-step waveform generation by adversarial flow matching")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Common {
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` setting, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Write the synthetic harmonic corpus.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Flow-matching pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adversarial fine-tuning of the fixed-step generator.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Pretrained checkpoint providing the initial generator.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Generate audio from WAV files (copy synthesis) or Mel JSON files.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// ODE steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        solver: Option<Solver>,
        /// Input `.wav` or `.json` Mel files.
        inputs: Vec<PathBuf>,
    },
    /// Score generated audio and write metric reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        solver: Option<Solver>,
    },
    /// Measure NFE, wall clock and real-time factor.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        solver: Option<Solver>,
    },
}

/// Settings of `make-corpus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSettings {
    pub n_items: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub segment_length: usize,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let o = ToyCorpusOptions::default();
        Self {
            n_items: o.n_items,
            duration: o.duration,
            sample_rate: o.sample_rate,
            segment_length: o.segment_length,
            seed: o.seed,
        }
    }
}

/// Settings of `synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub checkpoint: String,
    pub steps: usize,
    pub solver: Solver,
    pub seed: u64,
    pub inputs: Vec<String>,
}

/// Settings of `evaluate`. Either a checkpoint generates the split, or a
/// manifest lists `reference generated` WAV pairs, one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    /// Corpus directory; defaults to the checkpoint's training corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    pub split: String,
    pub steps: usize,
    pub solver: Solver,
    pub seed: u64,
    /// `json`, `csv`, `md`, or `all`.
    pub format: String,
}

/// Settings of `bench`: each grid is `[steps, "solver"]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    pub split: String,
    pub seed: u64,
    pub grids: Vec<(usize, Solver)>,
}

/// Parses `args` (including the program name), runs the verb and returns
/// the process exit code. Failures print one `error[class]: message` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), single_line(&e.to_string()));
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.verb {
        Verb::MakeCorpus { common } => make_corpus(&common),
        Verb::Pretrain { common, steps } => train(Stage::Fm, &common, steps, None),
        Verb::Finetune { common, steps, teacher } => train(Stage::Turbo, &common, steps, teacher.as_deref()),
        Verb::Synthesize {
            common,
            checkpoint,
            steps,
            solver,
            inputs,
        } => synthesize(&common, checkpoint.as_deref(), steps, solver, &inputs),
        Verb::Evaluate {
            common,
            checkpoint,
            steps,
            solver,
        } => evaluate(&common, checkpoint.as_deref(), steps, solver),
        Verb::Bench {
            common,
            checkpoint,
            steps,
            solver,
        } => bench(&common, checkpoint.as_deref(), steps, solver),
    }
}

/// Resolves a relative corpus path against `TURBOWAVE_CACHE` when it is set.
pub fn corpus_dir(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    match std::env::var_os(CACHE_ENV) {
        Some(cache) if p.is_relative() => PathBuf::from(cache).join(p),
        _ => p,
    }
}

fn read_config(common: &Common) -> Result<Option<String>> {
    common
        .config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()
}

/// Layers defaults, the config file, overrides and finally the dedicated
/// flags given as `(key, value)` pairs.
fn settings<T: Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    common: &Common,
    flags: Vec<(&str, Option<String>)>,
) -> Result<T> {
    let mut overrides = common.overrides.clone();
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
    resolve_layers(defaults, read_config(common)?.as_deref(), &overrides)
}

fn quoted(v: impl std::fmt::Display) -> String {
    toml::Value::String(v.to_string()).to_string()
}

fn solver_name(s: Solver) -> String {
    quoted(match s {
        Solver::Euler => "euler",
        Solver::Midpoint => "midpoint",
    })
}

fn write_snapshot(dir: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn make_corpus(common: &Common) -> Result<()> {
    let s: CorpusSettings = settings(
        &CorpusSettings::default(),
        common,
        vec![("seed", common.seed.map(|v| v.to_string()))],
    )?;
    let out = common.out.clone().unwrap_or_else(|| corpus_dir("corpus"));
    let opts = ToyCorpusOptions {
        n_items: s.n_items,
        duration: s.duration,
        sample_rate: s.sample_rate,
        segment_length: s.segment_length,
        seed: s.seed,
    };
    let spec = make_toy_corpus(&out, &opts)?;
    write_snapshot(&out, &s)?;
    println!(
        "corpus {}: {} train, {} dev, {} test items",
        out.display(),
        spec.train.len(),
        spec.dev.len(),
        spec.test.len()
    );
    Ok(())
}

fn train(stage: Stage, common: &Common, steps: Option<usize>, teacher: Option<&Path>) -> Result<()> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(steps) = steps {
        overrides.push(format!("steps={steps}"));
    }
    if let Some(t) = teacher {
        overrides.push(format!("teacher={}", quoted(t.display())));
    }
    let cfg = TrainConfig::resolve(stage, read_config(common)?.as_deref(), &overrides)?;
    let spec = DatasetSpec::load(corpus_dir(&cfg.data.corpus))?;
    let out = out_dir(common, &format!("runs/{}", stage.as_str()));
    let teacher_ck = match (stage, cfg.init, &cfg.teacher) {
        (Stage::Turbo, Init::FromCheckpoint, Some(path)) => Some(Checkpoint::load(path)?),
        _ => None,
    };
    let mut trainer = Trainer::new(cfg, Dataset::open(&spec, Split::Train)?, teacher_ck.as_ref())?.with_output(&out)?;
    let ck = trainer.run()?;
    let last = trainer.log().last().map(|r| format!("{:?}", r.losses)).unwrap_or_default();
    println!("{} finished at step {} {last} -> {}", stage.as_str(), ck.meta.step, out.display());
    Ok(())
}

fn load_inference(path: &str) -> Result<(Checkpoint, crate::model::VectorFieldEstimator)> {
    let ck = Checkpoint::load(path)?;
    let g = load_generator(&ck, DType::F32, &Device::Cpu)?;
    Ok((ck, g))
}

fn grid(steps: usize, solver: Solver) -> Result<TimeGrid> {
    TimeGrid::uniform(steps, solver)
}

fn synthesize(
    common: &Common,
    checkpoint: Option<&Path>,
    steps: Option<usize>,
    solver: Option<Solver>,
    inputs: &[PathBuf],
) -> Result<()> {
    let defaults = SynthSettings {
        checkpoint: String::new(),
        steps: 4,
        solver: Solver::Euler,
        seed: 0,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let s: SynthSettings = settings(
        &defaults,
        common,
        vec![
            ("checkpoint", checkpoint.map(|p| quoted(p.display()))),
            ("steps", steps.map(|v| v.to_string())),
            ("solver", solver.map(solver_name)),
            ("seed", common.seed.map(|v| v.to_string())),
        ],
    )?;
    if s.checkpoint.is_empty() {
        return Err(Error::Config("synthesize needs --checkpoint".into()));
    }
    if s.inputs.is_empty() {
        return Err(Error::Config("synthesize needs at least one input file".into()));
    }
    let (ck, g) = load_inference(&s.checkpoint)?;
    let grid = grid(s.steps, s.solver)?;
    let out = out_dir(common, "synth");
    write_snapshot(&out, &s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for input in &s.inputs {
        let path = Path::new(input);
        let mel = read_condition(path, &ck)?;
        let x0 = standard_noise(mel.sample_len(), ck.meta.sample_rate, &mut rng)?;
        let audio = ode_sample_audio(&g, &x0, &mel, &grid, DType::F32, &Device::Cpu)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dest = out.join(format!("{stem}.wav"));
        write_wav(&dest, &audio, WavFormat::Float32)?;
        println!("{} -> {} ({} NFE)", path.display(), dest.display(), grid.nfe());
    }
    Ok(())
}

fn standard_noise(len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Result<AudioBuffer> {
    let t = crate::flow::standard_normal(1, len, rng, DType::F32, &Device::Cpu)?;
    AudioBuffer::from_tensor(&t, sample_rate)
}

/// Conditioning from a WAV (trimmed to whole frames) or a Mel JSON file.
fn read_condition(path: &Path, ck: &Checkpoint) -> Result<MelSpectrogram> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mel = if is_json {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MelSpectrogram = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        MelSpectrogram::new(m.n_mels, m.frames, m.hop_size, m.values)?
    } else {
        let audio = load_audio_at(path, ck.meta.sample_rate)?;
        let hop = ck.meta.stft.hop_size;
        let len = (audio.len() / hop).max(1) * hop;
        let mut samples = audio.into_samples();
        samples.resize(len, 0.0);
        mel_spectrogram(&AudioBuffer::new(samples, ck.meta.sample_rate)?, &ck.meta.stft, &ck.meta.mel)?
    };
    let est = &ck.meta.estimator;
    if mel.n_mels != est.n_mels || mel.hop_size != est.conditioning_hop {
        return Err(Error::Shape(format!(
            "{}: {} mels at hop {}, model expects {} at hop {}",
            path.display(),
            mel.n_mels,
            mel.hop_size,
            est.n_mels,
            est.conditioning_hop
        )));
    }
    Ok(mel)
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn open_split(corpus: Option<&str>, ck: &Checkpoint, split: &str) -> Result<Dataset> {
    let dir = corpus_dir(corpus.unwrap_or(&ck.meta.config.data.corpus));
    Dataset::open(&DatasetSpec::load(dir)?, parse_split(split)?)
}

fn evaluate(common: &Common, checkpoint: Option<&Path>, steps: Option<usize>, solver: Option<Solver>) -> Result<()> {
    let defaults = EvalSettings {
        checkpoint: None,
        manifest: None,
        corpus: None,
        split: "dev".into(),
        steps: 4,
        solver: Solver::Euler,
        seed: 0,
        format: "all".into(),
    };
    let s: EvalSettings = settings(
        &defaults,
        common,
        vec![
            ("checkpoint", checkpoint.map(|p| quoted(p.display()))),
            ("steps", steps.map(|v| v.to_string())),
            ("solver", solver.map(solver_name)),
            ("seed", common.seed.map(|v| v.to_string())),
        ],
    )?;
    let formats = match s.format.as_str() {
        "all" => vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown],
        f => vec![f.parse::<ReportFormat>()?],
    };
    let (model, items) = match (&s.checkpoint, &s.manifest) {
        (Some(path), None) => {
            let (ck, g) = load_inference(path)?;
            let data = open_split(s.corpus.as_deref(), &ck, &s.split)?;
            let items = data
                .eval_items()?
                .into_iter()
                .zip(data.spec().files(parse_split(&s.split)?))
                .map(|(ex, name)| (name.clone(), ex.segment, ex.condition))
                .collect::<Vec<_>>();
            let metrics = evaluate_generation(&g, &grid(s.steps, s.solver)?, &items, s.seed, DType::F32, &Device::Cpu)?;
            (path.clone(), metrics)
        }
        (None, Some(manifest)) => (manifest.clone(), score_manifest(Path::new(manifest))?),
        _ => {
            return Err(Error::Config(
                "evaluate needs exactly one of --checkpoint or manifest=<file>".into(),
            ))
        }
    };
    let report = MetricReport::new(model, &s, items)?;
    let out = out_dir(common, "eval");
    write_snapshot(&out, &s)?;
    for f in formats {
        let ext = match f {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        };
        emit_report(&report, out.join(format!("report.{ext}")), f)?;
    }
    println!(
        "evaluated {} items: M-STFT {:.4} -> {}",
        report.items.len(),
        report.aggregate.mstft,
        out.display()
    );
    Ok(())
}

/// Scores `reference generated` pairs listed one per line; relative paths
/// are taken from the manifest's directory.
fn score_manifest(manifest: &Path) -> Result<Vec<crate::eval::ItemMetrics>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [reference, generated] = parts[..] else {
            return Err(Error::InvalidInput(format!(
                "{} line {}: expected `reference generated`",
                manifest.display(),
                i + 1
            )));
        };
        let reference = crate::data::load_audio(base.join(reference))?;
        let generated = load_audio_at(base.join(generated), reference.sample_rate())?;
        out.push(score_item(parts[0], &reference, &generated)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no pairs", manifest.display())));
    }
    Ok(out)
}

fn bench(common: &Common, checkpoint: Option<&Path>, steps: Option<usize>, solver: Option<Solver>) -> Result<()> {
    let mut defaults = BenchSettings {
        checkpoint: String::new(),
        corpus: None,
        split: "dev".into(),
        seed: 0,
        grids: vec![(4, Solver::Euler), (16, Solver::Midpoint)],
    };
    if steps.is_some() || solver.is_some() {
        defaults.grids = vec![(steps.unwrap_or(4), solver.unwrap_or(Solver::Euler))];
    }
    let s: BenchSettings = settings(
        &defaults,
        common,
        vec![
            ("checkpoint", checkpoint.map(|p| quoted(p.display()))),
            ("seed", common.seed.map(|v| v.to_string())),
        ],
    )?;
    if s.checkpoint.is_empty() {
        return Err(Error::Config("bench needs --checkpoint".into()));
    }
    let (ck, g) = load_inference(&s.checkpoint)?;
    let data = open_split(s.corpus.as_deref(), &ck, &s.split)?;
    let conds: Vec<MelSpectrogram> = data.eval_items()?.into_iter().map(|e| e.condition).collect();
    let mut rows: Vec<(usize, Solver, BenchResult)> = Vec::new();
    for &(steps, solver) in &s.grids {
        let r = benchmark_generation(&g, &grid(steps, solver)?, &conds, ck.meta.sample_rate, s.seed, DType::F32, &Device::Cpu)?;
        rows.push((steps, solver, r));
    }
    let out = out_dir(common, "bench");
    write_snapshot(&out, &s)?;
    let mut table = String::from("| Solver | Steps | NFE | Wall clock (s) | Audio (s) | xRT |\n|---|---|---|---|---|---|\n");
    for (steps, solver, r) in &rows {
        table.push_str(&format!(
            "| {} | {steps} | {} | {:.3} | {:.3} | {:.2} |\n",
            solver_name(*solver).trim_matches('"'),
            r.nfe,
            r.wall_clock_s,
            r.audio_s,
            r.xrt
        ));
    }
    let md = out.join("bench.md");
    std::fs::write(&md, &table).map_err(|e| Error::io(&md, e))?;
    let json = out.join("bench.json");
    let records: Vec<_> = rows
        .iter()
        .map(|(steps, solver, r)| serde_json::json!({"steps": steps, "solver": solver, "result": r}))
        .collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    print!("{table}");
    Ok(())
}
