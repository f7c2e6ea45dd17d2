//! Acceptance suite: one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use envfake_core::audio::{fit_duration, read_wav, resample, to_mono, write_wav, AudioClip, Crop, CLIP_SAMPLES};
use envfake_core::datakit::{load_manifest, Label};
use envfake_core::encoder::{read_layerstack, write_layerstack, LayerStack};
use envfake_core::eval::{compute_eer, eer_oracle, TrialScore};
use envfake_core::features::{fit_frames, logmel, normalize, NormStats};
use envfake_core::model::{fuse, Checkpoint, FusionParams, ModelConfig, ModelParams, PARAM_NAMES};
use envfake_core::numerics::{finite_diff_check, seeded_rng, Tensor};
use envfake_core::stacks::MemorySource;
use envfake_core::training::{
    batch_loss_and_grad, class_weights_from_counts, metrics_to_csv, train, weighted_loss, ClassWeighting, ClassWeights,
    Dataset, TrainConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_envfake")
}

fn envfake(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("envfake {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn random_stacks(seed: u64, n: usize, t: usize, d: usize) -> (Vec<LayerStack>, Vec<Label>) {
    let mut rng = seeded_rng(seed, &[]);
    let mut stacks = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = if i % 4 == 0 { Label::Bona } else { Label::Spoof };
        let bias = if label == Label::Bona { 0.3f32 } else { -0.3 };
        let layers = (0..12)
            .map(|l| {
                let data = (0..t * d).map(|k| rng.gen_range(-1.0f32..1.0) + if k % d == l % d { bias } else { 0.0 }).collect();
                Tensor::matrix(t, d, data).unwrap()
            })
            .collect();
        stacks.push(LayerStack::new(layers).unwrap());
        labels.push(label);
    }
    (stacks, labels)
}

fn small_model() -> ModelConfig {
    ModelConfig { dim: 8, hidden: 8, attn_dim: 4, ..ModelConfig::default() }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let (stacks, labels) = random_stacks(1, 4, 16, 8);
    let refs: Vec<&LayerStack> = stacks.iter().collect();
    let mut params = ModelParams::<f64>::init(&small_model(), 1).map_err(|e| e.to_string())?;
    params.fusion.logits.data_mut().copy_from_slice(&[0.4, -0.3, 0.2, 0.0, -0.1, 0.3]);
    params.backend.k_att.data_mut()[0] = 0.1;
    let weights = ClassWeights::new(3.0, 1.0).unwrap();
    let report =
        finite_diff_check(|p: &ModelParams<f64>| batch_loss_and_grad(p, &refs, &labels, &weights, None), &params, 1e-5)
            .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(report.groups.len() == PARAM_NAMES.len(), "missing parameter groups")?;
    let worst = report.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    check(report.max_rel_err() < 1e-4, format!("{} rel err {:.3e}", worst.param, worst.max_rel_err))?;
    check(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("11 groups, max rel err {:.2e} ({}), {secs:.2}s", worst.max_rel_err, worst.param))
}

fn fusion_invariants() -> Outcome {
    let (stacks, labels) = random_stacks(2, 32, 8, 8);
    let source = MemorySource::new(stacks.clone());
    let set = Dataset::new((0..32).map(|i| format!("t{i}")).collect(), labels, &source).unwrap();
    let cfg = TrainConfig { batch_size: 8, max_steps: 200, eval_every: 50, seed: 3, lr: 1e-2, ..TrainConfig::default() };
    let run = train::<f32>(&set, &set, &small_model(), &cfg, None).map_err(|e| e.to_string())?;
    check(run.trajectory.rows.len() == 200, "trajectory does not cover 200 steps")?;
    let worst = run.trajectory.rows.iter().map(|(_, w)| (w.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    check(worst <= 1e-9, format!("weight sum off by {worst:.2e}"))?;

    let g = run.last.fusion.logits.cast::<f64>();
    let restricted = FusionParams { layer_set: vec![4, 5, 6, 7, 8, 9], logits: g.clone() };
    let mut full_logits = vec![-1e6; 12];
    full_logits[3..9].copy_from_slice(g.data());
    let full = FusionParams { layer_set: (1..=12).collect(), logits: Tensor::vector(full_logits).unwrap() };
    let mut diff: f64 = 0.0;
    for s in &stacks[..4] {
        let (a, b) = (fuse(s, &restricted).unwrap(), fuse(s, &full).unwrap());
        diff = a.data().iter().zip(b.data()).fold(diff, |m, (x, y)| m.max((x - y).abs()));
    }
    check(diff <= 1e-6, format!("restricted vs pinned 12-layer fusion differ by {diff:.2e}"))?;
    Ok(format!("200 steps, max |Σw−1| {worst:.1e}; restricted vs pinned fusion max diff {diff:.1e}"))
}

fn labeled(bona: &[f64], spoof: &[f64]) -> Vec<TrialScore> {
    let mk = |i: usize, score: f64, label| TrialScore { trial_id: format!("{label}{i}"), score, label: Some(label) };
    bona.iter()
        .enumerate()
        .map(|(i, &s)| mk(i, s, Label::Bona))
        .chain(spoof.iter().enumerate().map(|(i, &s)| mk(i, s, Label::Spoof)))
        .collect()
}

fn eer_oracle_equivalence() -> Outcome {
    let mut rng = seeded_rng(3, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let nb = rng.gen_range(1..n);
        let levels = rng.gen_range(2..40);
        let mut draw = |shift: f64| (rng.gen_range(0..levels) as f64) / levels as f64 + shift;
        let bona: Vec<f64> = (0..nb).map(|_| draw(0.2)).collect();
        let spoof: Vec<f64> = (0..n - nb).map(|_| draw(0.0)).collect();
        let s = labeled(&bona, &spoof);
        let (a, b) = (compute_eer(&s).map_err(|e| e.to_string())?, eer_oracle(&s).map_err(|e| e.to_string())?);
        worst = worst.max((a.eer - b.eer).abs());
    }
    check(worst < 1e-9, format!("max disagreement {worst:.2e}"))?;
    let examples = [
        compute_eer(&labeled(&[0.9, 0.8], &[0.2, 0.1])).unwrap().eer,
        compute_eer(&labeled(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1])).unwrap().eer,
        compute_eer(&labeled(&[0.4, 0.4], &[0.4, 0.4])).unwrap().eer,
    ];
    check(examples == [0.0, 1.0 / 3.0, 0.5], format!("worked examples gave {examples:?}"))?;
    Ok(format!("1000 sets, max |Δ| {worst:.1e}; examples {examples:?}"))
}

fn pipeline_shapes() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(4, &[]);
    let stats = NormStats::new(-5.0, 3.0, "fixed", 1).unwrap();
    let rates = [8_000u32, 16_000, 22_050, 32_000, 44_100, 48_000];
    let chain = |path: &Path, rng: &mut envfake_core::numerics::SeededRng| -> Result<(usize, usize, Vec<usize>), String> {
        let clip = read_wav(path).map_err(|e| e.to_string())?;
        let mono = resample(&to_mono(&clip).map_err(|e| e.to_string())?, 16_000).map_err(|e| e.to_string())?;
        let fixed = fit_duration(&mono, 10, Crop::Random(rng)).map_err(|e| e.to_string())?;
        let mel = logmel(&fixed).map_err(|e| e.to_string())?;
        let raw_frames = mel.num_frames();
        let out = fit_frames(&normalize(&mel, &stats).map_err(|e| e.to_string())?, 1024).map_err(|e| e.to_string())?;
        Ok((fixed.samples().len(), raw_frames, out.frames().shape().to_vec()))
    };
    for i in 0..100 {
        let rate = rates[rng.gen_range(0..rates.len())];
        let channels = rng.gen_range(1..=2u16);
        let frames = (rng.gen_range(2.0..12.0) * rate as f64) as usize;
        let samples = (0..frames * channels as usize).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
        let path = dir.path().join(format!("{i}.wav"));
        write_wav(&AudioClip::new(samples, channels, rate).unwrap(), &path).map_err(|e| e.to_string())?;
        let (n, _, shape) = chain(&path, &mut rng)?;
        check(n == CLIP_SAMPLES && shape == [1024, 128], format!("clip {i} ({rate} Hz x{channels}): {n} samples, {shape:?}"))?;
    }
    let ten = dir.path().join("ten.wav");
    write_wav(&AudioClip::mono((0..160_000).map(|i| ((i % 50) as f32 - 25.0) / 100.0).collect(), 16_000).unwrap(), &ten)
        .map_err(|e| e.to_string())?;
    let (_, raw, _) = chain(&ten, &mut rng)?;
    check(raw == 998, format!("10 s clip gave {raw} frames"))?;
    Ok("100 random clips → 160000 samples and 1024x128; 10 s clip → 998 frames".into())
}

fn class_weighting() -> Outcome {
    let w = class_weights_from_counts(27_811, 111_244).map_err(|e| e.to_string())?;
    check(w.ratio() == 4.0, format!("ratio {}", w.ratio()))?;
    let (loss, _) = weighted_loss(&[[0.0f64, 0.0]; 5], &[Label::Bona, Label::Spoof, Label::Spoof, Label::Spoof, Label::Bona], &w)
        .map_err(|e| e.to_string())?;
    check((loss - std::f64::consts::LN_2).abs() < 1e-12, format!("uniform loss {loss}"))?;

    let (stacks, labels) = random_stacks(5, 40, 8, 8);
    let source = MemorySource::new(stacks);
    let set = Dataset::new((0..40).map(|i| format!("t{i}")).collect(), labels.clone(), &source).unwrap();
    let auto = envfake_core::training::auto_class_weights(&labels).map_err(|e| e.to_string())?;
    let cfg = |w: ClassWeights| TrainConfig {
        batch_size: 8,
        max_steps: 50,
        eval_every: 10,
        seed: 9,
        lr: 1e-3,
        class_weighting: ClassWeighting::Explicit(w),
        ..TrainConfig::default()
    };
    let scaled = ClassWeights::new(auto.bona * 10.0, auto.spoof * 10.0).unwrap();
    let a = train::<f64>(&set, &set, &small_model(), &cfg(auto), None).map_err(|e| e.to_string())?;
    let b = train::<f64>(&set, &set, &small_model(), &cfg(scaled), None).map_err(|e| e.to_string())?;
    check(a.last == b.last, "final parameters differ")?;
    check(a.trajectory == b.trajectory, "fusion trajectories differ")?;
    check(metrics_to_csv(&a.metrics) == metrics_to_csv(&b.metrics), "metrics differ")?;
    Ok(format!(
        "ratio 4.0 exactly; |loss−ln2| {:.1e}; 50-step f64 run with weights ({},{}) vs x10 bitwise identical",
        (loss - std::f64::consts::LN_2).abs(),
        auto.bona,
        auto.spoof
    ))
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    Workspace { _tmp: tmp, root }
}

fn read_metrics(path: &Path) -> Result<Vec<(u64, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 3 && !f[2].is_empty()).then(|| (f[0].parse().unwrap(), f[2].parse().unwrap()))
        })
        .collect())
}

/// Runs criterion 6 and leaves its artifacts for criterion 7.
fn end_to_end(ws: &Workspace) -> Outcome {
    let start = Instant::now();
    let data = ws.root.join("track1");
    envfake(&["synth-data", "--out", p(&data), "--seed", "1", "--n-bona", "200", "--n-spoof", "800"])?;
    envfake(&["extract", "--manifest", p(&data.join("train.tsv")), "--out", p(&ws.root.join("feats1"))])?;
    envfake(&[
        "stats",
        "--manifest",
        p(&data.join("train.tsv")),
        "--features",
        p(&ws.root.join("feats1/index.tsv")),
        "--out",
        p(&ws.root.join("stats1.txt")),
    ])?;
    let cfg = ws.root.join("track1.cfg");
    fs::write(
        &cfg,
        "train_manifest=track1/train.tsv\ndev_manifest=track1/dev.tsv\nsource=online\nstats=stats1.txt\n\
         dim=32\nhidden=32\nattn_dim=16\nmax_steps=500\neval_every=25\nlr=1e-4\nbatch_size=32\ndropout=0.1\n",
    )
    .map_err(|e| e.to_string())?;
    envfake(&["train", "--config", p(&cfg), "--seed", "1", "--out", p(&ws.root.join("run1"))])?;
    let secs = start.elapsed().as_secs_f64();

    let evals = read_metrics(&ws.root.join("run1/metrics.csv"))?;
    let best = evals.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let first_hit = evals.iter().find(|e| e.1 <= 0.05).map(|e| e.0);
    let ckpt = Checkpoint::load(&ws.root.join("run1/best.ckpt")).map_err(|e| e.to_string())?;
    let full = fs::read_to_string(ws.root.join("run1/fusion.csv")).map_err(|e| e.to_string())?;
    let drift = full
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok())
        .map(|w| (w - 1.0 / 6.0).abs())
        .fold(0.0, f64::max);
    check(best <= 0.05, format!("best dev EER {best:.4} > 0.05"))?;
    check(ckpt.dev_eer == Some(best), "checkpoint does not hold the best dev EER")?;
    check(drift > 1e-3, format!("fusion weights stayed uniform (max drift {drift:.1e})"))?;
    check(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "dev EER {:.2}% (first ≤5% at step {}), checkpoint step {}, fusion drift from 1/6 up to {drift:.4}, {secs:.0}s",
        best * 100.0,
        first_hit.unwrap_or(0),
        ckpt.step
    ))
}

fn finetuning(ws: &Workspace) -> Outcome {
    let base = ws.root.join("run1/best.ckpt");
    check(base.is_file(), "criterion 6 checkpoint missing")?;
    let data = ws.root.join("track2");
    envfake(&["synth-data", "--out", p(&data), "--seed", "2", "--n-bona", "50", "--n-spoof", "200", "--shift", "domain2"])?;
    let cfg = ws.root.join("track2.cfg");
    fs::write(
        &cfg,
        "train_manifest=track2/train.tsv\ndev_manifest=track2/dev.tsv\nsource=online\nstats=stats1.txt\n\
         dim=32\nhidden=32\nattn_dim=16\nmax_steps=200\neval_every=25\nfinetune_lr=5e-5\n",
    )
    .map_err(|e| e.to_string())?;

    let zero_scores = ws.root.join("zero_shot.tsv");
    envfake(&["score", "--manifest", p(&data.join("dev.tsv")), "--checkpoint", p(&base), "--config", p(&cfg), "--out", p(&zero_scores)])?;
    let report = envfake(&["eval-eer", "--scores", p(&zero_scores), "--labels", p(&data.join("dev.tsv"))])?;
    let zero_shot: f64 = report
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("eer="))
        .and_then(|v| v.parse().ok())
        .ok_or("unreadable eval-eer report")?;

    envfake(&["finetune", "--config", p(&cfg), "--checkpoint", p(&base), "--seed", "1", "--out", p(&ws.root.join("ft"))])?;
    let tuned = Checkpoint::load(&ws.root.join("ft/best.ckpt")).map_err(|e| e.to_string())?;
    let tuned_eer = tuned.dev_eer.ok_or("fine-tuned checkpoint has no dev EER")?;
    let step0 = read_metrics(&ws.root.join("ft/metrics.csv"))?.first().map(|e| e.1).ok_or("no evaluations")?;
    check((step0 - zero_shot).abs() < 1e-6, format!("step-0 EER {step0} vs scored zero-shot {zero_shot}"))?;
    check(tuned_eer <= zero_shot, format!("fine-tuned {tuned_eer:.4} > zero-shot {zero_shot:.4}"))?;

    envfake(&["finetune", "--config", p(&cfg), "--checkpoint", p(&base), "--set", "max_steps=0", "--out", p(&ws.root.join("ft0"))])?;
    let base_ckpt = Checkpoint::load(&base).map_err(|e| e.to_string())?;
    let zero = Checkpoint::load(&ws.root.join("ft0/best.ckpt")).map_err(|e| e.to_string())?;
    check(zero.params == base_ckpt.params, "0-step fine-tune changed the parameters")?;
    let strict = if tuned_eer < zero_shot { "improved" } else { "no strict improvement" };
    Ok(format!(
        "zero-shot dev EER {:.2}% → fine-tuned {:.2}% at step {} ({strict}); 0-step fine-tune bitwise equal",
        zero_shot * 100.0,
        tuned_eer * 100.0,
        tuned.step
    ))
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline_run(root: &Path) -> Result<Vec<String>, String> {
    let data = root.join("data");
    let mut stdout = Vec::new();
    envfake(&["synth-data", "--out", p(&data), "--seed", "4", "--n-bona", "8", "--n-spoof", "24", "--split", "0.5,0.25,0.25"])?;
    envfake(&["extract", "--manifest", p(&data.join("manifest.tsv")), "--out", p(&root.join("feats"))])?;
    envfake(&["stats", "--manifest", p(&data.join("train.tsv")), "--features", p(&root.join("feats/index.tsv")), "--out", p(&root.join("stats.txt"))])?;
    envfake(&[
        "encode", "--manifest", p(&data.join("manifest.tsv")), "--features", p(&root.join("feats/index.tsv")),
        "--stats", p(&root.join("stats.txt")), "--kind", "stub", "--set", "dim=16", "--out", p(&root.join("emb")),
    ])?;
    envfake(&[
        "encode", "--manifest", p(&data.join("manifest.tsv")), "--features", p(&root.join("emb/index.tsv")),
        "--kind", "file", "--set", "dim=16", "--out", p(&root.join("emb_copy")),
    ])?;
    let cfg = root.join("c.cfg");
    fs::write(
        &cfg,
        "train_manifest=data/train.tsv\ndev_manifest=data/dev.tsv\nembeddings=emb/index.tsv\n\
         dim=16\nhidden=8\nattn_dim=4\nmax_steps=8\neval_every=2\nbatch_size=8\nlr=1e-2\n",
    )
    .map_err(|e| e.to_string())?;
    envfake(&["train", "--config", p(&cfg), "--seed", "7", "--out", p(&root.join("run"))])?;
    envfake(&["finetune", "--config", p(&cfg), "--checkpoint", p(&root.join("run/best.ckpt")), "--set", "max_steps=4", "--out", p(&root.join("ft"))])?;
    envfake(&["score", "--manifest", p(&data.join("eval.tsv")), "--checkpoint", p(&root.join("run/best.ckpt")), "--config", p(&cfg), "--out", p(&root.join("scores.tsv"))])?;
    stdout.push(envfake(&["eval-eer", "--scores", p(&root.join("scores.tsv")), "--labels", p(&data.join("eval.tsv")), "--out", p(&root.join("eer.txt"))])?);
    stdout.push(envfake(&["fusion-weights", "--checkpoint", p(&root.join("run/best.ckpt"))])?);
    Ok(stdout)
}

fn determinism_and_formats() -> Outcome {
    let (a, b) = (workspace(), workspace());
    let out_a = pipeline_run(&a.root)?;
    let out_b = pipeline_run(&b.root)?;
    let (ta, tb) = (tree_bytes(&a.root), tree_bytes(&b.root));
    check(ta.len() == tb.len(), "different file sets")?;
    // resolved configs record absolute paths, which differ only by the root
    let rooted = |path: &Path, bytes: &[u8], root: &Path| -> Vec<u8> {
        if path.ends_with("config.resolved") {
            String::from_utf8_lossy(bytes).replace(p(root), "<root>").into_bytes()
        } else {
            bytes.to_vec()
        }
    };
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x.0 != y.0 || rooted(&x.0, &x.1, &a.root) != rooted(&y.0, &y.1, &b.root))
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    check(differing.is_empty(), format!("outputs differ: {differing:?}"))?;
    check(out_a == out_b, "stdout differs between reruns")?;

    let stack = read_layerstack(&a.root.join("emb").join(fs::read_to_string(a.root.join("emb/index.tsv")).unwrap().lines().next().unwrap().split('\t').nth(1).unwrap()))
        .map_err(|e| e.to_string())?;
    let tmp = workspace();
    let sp = tmp.root.join("s.lstk");
    write_layerstack(&stack, &sp).map_err(|e| e.to_string())?;
    check(read_layerstack(&sp).map_err(|e| e.to_string())? == stack, "layerstack round trip")?;
    let ckpt = Checkpoint::load(&a.root.join("run/best.ckpt")).map_err(|e| e.to_string())?;
    check(Checkpoint::from_bytes(&ckpt.to_bytes()).map_err(|e| e.to_string())? == ckpt, "checkpoint round trip")?;

    let mut bad = fs::read(&sp).unwrap();
    bad[..4].copy_from_slice(b"XXXX");
    fs::write(&sp, &bad).unwrap();
    let stack_err = read_layerstack(&sp).err().map(|e| e.is_format()).unwrap_or(false);
    let mut bad = ckpt.to_bytes();
    bad[0] ^= 0xff;
    let ckpt_err = Checkpoint::from_bytes(&bad).err().map(|e| e.is_format()).unwrap_or(false);
    let mut bad = ckpt.to_bytes();
    bad[4..8].copy_from_slice(&99u32.to_le_bytes());
    let version_err = Checkpoint::from_bytes(&bad).err().map(|e| e.is_format()).unwrap_or(false);
    check(stack_err && ckpt_err && version_err, "corrupted headers not rejected with format errors")?;
    let labels = load_manifest(&a.root.join("data/eval.tsv")).map_err(|e| e.to_string())?;
    Ok(format!(
        "9 subcommands rerun: {} files byte-identical ({} eval trials); round trips lossless; corrupt magic/version → format errors",
        ta.len(),
        labels.len()
    ))
}

fn main() {
    let ws = workspace();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient fidelity", Box::new(gradient_fidelity)),
        ("2 fusion invariants", Box::new(fusion_invariants)),
        ("3 EER oracle equivalence", Box::new(eer_oracle_equivalence)),
        ("4 pipeline shape contract", Box::new(pipeline_shapes)),
        ("5 class-weighting contracts", Box::new(class_weighting)),
        ("6 end-to-end synthetic detection", Box::new(|| end_to_end(&ws))),
        ("7 fine-tuning flow", Box::new(|| finetuning(&ws))),
        ("8 determinism and formats", Box::new(determinism_and_formats)),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
