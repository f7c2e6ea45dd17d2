mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use envfake_core::audio::{read_wav, Crop};
use envfake_core::datakit::{self, load_manifest, split_manifest, write_manifest, Manifest, Shift};
use envfake_core::encoder::{self, EncoderKind, Index};
use envfake_core::eval::{self, attach_labels, compute_eer, read_scores, write_scores};
use envfake_core::features::{compute_global_stats, read_melspec, write_melspec, NormStats};
use envfake_core::model::Checkpoint;
use envfake_core::stacks::{clip_features, IndexSource, OnlineStubSource, StackSource};
use envfake_core::training::{self, Dataset, RunFiles};

use config::{RunConfig, SourceKind};

#[derive(Parser)]
#[command(name = "envfake", version, about = "Environmental sound deepfake detection pipeline")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.apply_overrides(&[format!("seed={seed}")])?;
        }
        cfg.validate()?;
        log::info!("resolved config:\n{}", cfg.to_text());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its train/dev/eval split.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_bona: usize,
        #[arg(long, default_value_t = 800)]
        n_spoof: usize,
        /// none | domain2
        #[arg(long, default_value = "none")]
        shift: String,
        /// Train,dev,eval fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
    },
    /// Unnormalized log-Mel features (offset-0 crop) for every manifest entry.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; receives one feature file per trial and index.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Global mean/std over the features of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Feature index written by `extract`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer stacks for every manifest entry.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        /// Feature index (stub) or external layerstack index (file).
        #[arg(long)]
        features: PathBuf,
        /// Normalization statistics (stub only).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// stub | file; overrides `encoder_kind`.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train from scratch; writes best.ckpt, metrics.csv, fusion.csv, config.resolved.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a checkpoint at `finetune_lr` with a fresh optimizer.
    Finetune {
        /// Base checkpoint; overrides `finetune_from`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Eval-mode detection scores, one `trial_id<TAB>score` line per trial.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Equal error rate of a score file against manifest labels.
    EvalEer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the report line here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fusion-weight trajectory stored in a checkpoint as step,layer,weight CSV.
    FusionWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { out, seed, n_bona, n_spoof, shift, split } => {
            synth_data(&out, seed, n_bona, n_spoof, shift.parse()?, &split)
        }
        Command::Extract { manifest, out } => extract(&manifest, &out),
        Command::Stats { manifest, features, out } => stats(&manifest, &features, &out),
        Command::Encode { manifest, features, stats, kind, out, cfg } => {
            let mut cfg = cfg.clone();
            if let Some(k) = kind {
                cfg.set.push(format!("encoder_kind={k}"));
            }
            encode(&manifest, &features, stats.as_deref(), &out, &cfg.resolve()?)
        }
        Command::Train { out, cfg } => train(&out, &cfg.resolve()?),
        Command::Finetune { checkpoint, out, cfg } => {
            let mut cfg = cfg.resolve()?;
            if let Some(c) = checkpoint {
                cfg.finetune_from = Some(c);
            }
            finetune(&out, &cfg)
        }
        Command::Score { manifest, checkpoint, out, cfg } => score(&manifest, &checkpoint, &out, &cfg.resolve()?),
        Command::EvalEer { scores, labels, out } => eval_eer(&scores, &labels, out.as_deref()),
        Command::FusionWeights { checkpoint, out } => {
            let csv = Checkpoint::load(&checkpoint)?.trajectory.to_csv();
            emit(&csv, out.as_deref())
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing to stdout"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth_data(out: &Path, seed: u64, n_bona: usize, n_spoof: usize, shift: Shift, split: &str) -> Result<()> {
    let fractions: Vec<f64> = split
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("bad split fraction {s:?}")))
        .collect::<Result<_>>()?;
    let fractions: [f64; 3] = fractions.try_into().map_err(|_| anyhow!("--split needs three fractions"))?;
    create_dir(out)?;
    let corpus = datakit::gen_synthetic_corpus(seed, n_bona, n_spoof, out, shift)?;
    let parts = split_manifest(&corpus, fractions, seed)?;
    write_manifest(&parts.merged(), &out.join("manifest.tsv"))?;
    for (name, part) in [("train", &parts.train), ("dev", &parts.dev), ("eval", &parts.eval)] {
        write_manifest(part, &out.join(format!("{name}.tsv")))?;
    }
    Ok(())
}

fn extract(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    manifest.check_files()?;
    create_dir(out)?;
    let entries = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mel = read_wav(&manifest.resolve(e))
                .and_then(|clip| clip_features(&clip, Crop::Start))
                .with_context(|| format!("trial {}", e.trial_id))?;
            let path = out.join(format!("{i:06}_{}.mels", sanitize(&e.trial_id)));
            write_melspec(&mel, &path)?;
            Ok((e.trial_id.clone(), path))
        })
        .collect::<Result<Vec<_>>>()?;
    Index::new(entries).write(&out.join("index.tsv"))?;
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn feature_paths(manifest: &Manifest, index: &Index) -> Result<Vec<PathBuf>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            index.get(&e.trial_id).map(Path::to_path_buf).ok_or_else(|| anyhow!("trial {}: no features listed", e.trial_id))
        })
        .collect()
}

fn stats(manifest_path: &Path, features_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let paths = feature_paths(&manifest, &Index::read(features_path)?)?;
    let source = manifest_path.file_name().map_or("features".into(), |n| n.to_string_lossy().into_owned());
    let stats = compute_global_stats(&source, paths.len(), |i| read_melspec(&paths[i]))?;
    stats.save(out)?;
    Ok(())
}

fn encode(manifest_path: &Path, features_path: &Path, stats: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let stats = match (cfg.encoder.kind, stats) {
        (EncoderKind::Stub, Some(p)) => Some(NormStats::load(p)?),
        (EncoderKind::Stub, None) => bail!("stub encoding needs --stats"),
        (EncoderKind::File, _) => None,
    };
    encoder::encode(&manifest.ids(), &Index::read(features_path)?, &cfg.encoder, stats.as_ref(), out)?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| anyhow!("config key {key} is required"))
}

/// Stack source for a manifest, in manifest order.
fn source_for(manifest: &Manifest, cfg: &RunConfig, layer_set: &[usize]) -> Result<Box<dyn StackSource>> {
    Ok(match cfg.source {
        SourceKind::Embeddings => {
            let index = Index::read(required(&cfg.embeddings, "embeddings")?)?;
            Box::new(IndexSource::new(&manifest.ids(), &index, layer_set)?)
        }
        SourceKind::Online => {
            manifest.check_files()?;
            let stats = NormStats::load(required(&cfg.stats, "stats")?)?;
            let items = manifest.entries.iter().map(|e| (e.trial_id.clone(), manifest.resolve(e))).collect();
            Box::new(OnlineStubSource::new(items, &cfg.encoder, stats, layer_set, cfg.seed)?)
        }
    })
}

fn load_split(cfg: &RunConfig) -> Result<(Manifest, Manifest)> {
    Ok((load_manifest(required(&cfg.train_manifest, "train_manifest")?)?, load_manifest(required(&cfg.dev_manifest, "dev_manifest")?)?))
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    let p = out.join("config.resolved");
    fs::write(&p, cfg.to_text()).with_context(|| format!("writing {}", p.display()))
}

fn report_run<T: envfake_core::numerics::Real>(run: &training::TrainRun<T>) {
    log::info!("best dev EER {:.6} at step {}", run.best_dev_eer, run.best_step);
}

fn train(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_resolved(out, cfg)?;
    let (train_m, dev_m) = load_split(cfg)?;
    let (train_src, dev_src) = (source_for(&train_m, cfg, &cfg.model.layer_set)?, source_for(&dev_m, cfg, &cfg.model.layer_set)?);
    let train_set = Dataset::new(train_m.ids(), train_m.labels(), train_src.as_ref())?;
    let dev_set = Dataset::new(dev_m.ids(), dev_m.labels(), dev_src.as_ref())?;
    let files = RunFiles { dir: out.to_path_buf() };
    let run = training::train::<f32>(&train_set, &dev_set, &cfg.model, &cfg.train, Some(&files))?;
    report_run(&run);
    Ok(())
}

fn finetune(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_resolved(out, cfg)?;
    let base_path = required(&cfg.finetune_from, "finetune_from")?;
    let base = training::load_base(base_path, Some(cfg.encoder.dim))?;
    let layer_set = base.params.fusion.layer_set.clone();
    let (train_m, dev_m) = load_split(cfg)?;
    let (train_src, dev_src) = (source_for(&train_m, cfg, &layer_set)?, source_for(&dev_m, cfg, &layer_set)?);
    let train_set = Dataset::new(train_m.ids(), train_m.labels(), train_src.as_ref())?;
    let dev_set = Dataset::new(dev_m.ids(), dev_m.labels(), dev_src.as_ref())?;
    let files = RunFiles { dir: out.to_path_buf() };
    let run = training::finetune::<f32>(&base, &train_set, &dev_set, &cfg.train, Some(&files))?;
    report_run(&run);
    Ok(())
}

fn score(manifest_path: &Path, checkpoint: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let source = source_for(&manifest, cfg, &ckpt.params.fusion.layer_set)?;
    let scores = eval::score_manifest(&manifest, &ckpt.params, source.as_ref())?;
    write_scores(&scores, out)?;
    Ok(())
}

fn eval_eer(scores_path: &Path, labels_path: &Path, out: Option<&Path>) -> Result<()> {
    let mut scores = read_scores(scores_path)?;
    attach_labels(&mut scores, &load_manifest(labels_path)?);
    if let Some(s) = scores.iter().find(|s| s.label.is_none()) {
        bail!("trial {} has no label in {}", s.trial_id, labels_path.display());
    }
    let result = compute_eer(&scores)?;
    let line = format!("{result}\n");
    print!("{line}");
    if let Some(p) = out {
        fs::write(p, &line).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
