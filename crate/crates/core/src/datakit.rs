//! Trial manifests and a seeded synthetic corpus of environmental-like clips.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{write_wav, AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::features::MelBank;
use crate::numerics::{derive_seed, seeded_rng, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bona,
    Spoof,
}

impl Label {
    /// Class index used by the classifier (bona = 0, spoof = 1).
    pub fn index(self) -> usize {
        match self {
            Self::Bona => 0,
            Self::Spoof => 1,
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona" => Ok(Self::Bona),
            "spoof" => Ok(Self::Spoof),
            other => Err(Error::format(format!("bad label {other:?} (bona | spoof)"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bona => "bona",
            Self::Spoof => "spoof",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "eval" => Ok(Self::Eval),
            other => Err(Error::format(format!("bad split {other:?} (train | dev | eval)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub trial_id: String,
    /// As written in the file; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

const HEADER: &str = "trial_id\tpath\tlabel\tsplit";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    /// `#` lines, without the marker.
    pub comments: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { comments: Vec::new(), entries, base_dir: PathBuf::new() };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.trial_id.as_str()) {
                return Err(Error::format(format!("duplicate trial id {:?}", e.trial_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.trial_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn filter_split(&self, split: Split) -> Self {
        Self {
            comments: self.comments.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Errors with the first trial whose file is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(Error::io_at(
                    format!("trial {} ({})", e.trial_id, p.display()),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        let mut first_record = true;
        for (n, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix('#') {
                m.comments.push(c.trim_start().to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if std::mem::take(&mut first_record) && line == HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(format!("line {}: expected 4 tab-separated fields", n + 1)));
            }
            let ctx = |e: Error| Error::format(format!("line {}: {e}", n + 1));
            m.entries.push(ManifestEntry {
                trial_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label: fields[2].parse().map_err(ctx)?,
                split: fields[3].parse().map_err(ctx)?,
            });
        }
        m.check_unique()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            s.push_str(&format!("# {c}\n"));
        }
        s.push_str(HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.trial_id, e.path.display(), e.label, e.split));
        }
        s
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path.display(), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text)
        .map(|m| m.with_base_dir(base))
        .map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io_at(path.display(), e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifests {
    pub train: Manifest,
    pub dev: Manifest,
    pub eval: Manifest,
}

impl SplitManifests {
    /// Train, dev and eval entries concatenated, each tagged with its split.
    pub fn merged(&self) -> Manifest {
        Manifest {
            comments: self.train.comments.clone(),
            entries: [&self.train, &self.dev, &self.eval].iter().flat_map(|m| m.entries.iter().cloned()).collect(),
            base_dir: self.train.base_dir.clone(),
        }
    }
}

/// Seeded stratified split with per-class largest-remainder allocation.
/// Entries keep their original relative order inside each split.
pub fn split_manifest(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<SplitManifests> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut assign = vec![Split::Train; manifest.len()];
    for (ci, label) in [Label::Bona, Label::Spoof].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.entries[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < active {
            return Err(Error::param(format!("class {label} has {} samples for {active} splits", idx.len())));
        }
        idx.shuffle(&mut seeded_rng(seed, &[ci as u64]));
        let n = idx.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &s in order.iter().cycle().take(n - counts.iter().sum::<usize>()) {
            counts[s] += 1;
        }
        let mut it = idx.into_iter();
        for (s, &c) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(c) {
                assign[i] = *s;
            }
        }
    }
    let part = |split: Split| Manifest {
        comments: manifest.comments.clone(),
        entries: manifest
            .entries
            .iter()
            .zip(&assign)
            .filter(|(_, &s)| s == split)
            .map(|(e, _)| ManifestEntry { split, ..e.clone() })
            .collect(),
        base_dir: manifest.base_dir.clone(),
    };
    Ok(SplitManifests { train: part(Split::Train), dev: part(Split::Dev), eval: part(Split::Eval) })
}

/// Acoustic domain of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    None,
    Domain2,
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "domain2" => Ok(Self::Domain2),
            other => Err(Error::param(format!("unknown shift {other:?} (none | domain2)"))),
        }
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Domain2 => "domain2",
        })
    }
}

impl Shift {
    /// Mel filters at the centre of each notch: every eighth filter.
    pub fn notch_filters(self) -> Vec<usize> {
        let first = match self {
            Self::None => 12,
            Self::Domain2 => 16,
        };
        (first..=120).step_by(8).collect()
    }

    /// Frequency bands (Hz) removed from spoofed clips: the joint support of
    /// filters `m-1..=m+1` around each notch centre.
    pub fn notch_bands(self) -> Vec<(f64, f64)> {
        let bank = MelBank::standard();
        self.notch_filters().iter().map(|&m| (bank.support_hz(m - 1).0, bank.support_hz(m + 1).1)).collect()
    }
}

pub const ENVELOPE_LEVELS: usize = 8;
const ENVELOPE_BLOCK: usize = 160;

struct BurstStats {
    count: (usize, usize),
    freq: (f64, f64),
    seconds: (f64, f64),
}

fn burst_stats(shift: Shift) -> BurstStats {
    match shift {
        Shift::None => BurstStats { count: (2, 8), freq: (150.0, 6000.0), seconds: (0.1, 1.5) },
        Shift::Domain2 => BurstStats { count: (6, 14), freq: (300.0, 7000.0), seconds: (0.05, 0.6) },
    }
}

fn log_uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn gauss(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// RBJ constant-peak band-pass biquad, run in place.
fn bandpass(x: &mut [f64], f0: f64, q: f64, rate: f64) {
    let w0 = 2.0 * std::f64::consts::PI * f0 / rate;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn environmental_scene(rng: &mut SeededRng, n: usize, shift: Shift) -> Vec<f64> {
    let rate = TARGET_RATE as f64;
    let mut out = vec![0.0; n];

    let (brown, white) = (rng.gen_range(0.05..0.4), rng.gen_range(0.005..0.05));
    let mut lp = 0.0;
    for v in out.iter_mut() {
        lp = 0.995 * lp + 0.1 * gauss(rng);
        *v = brown * lp + white * gauss(rng);
    }

    let stats = burst_stats(shift);
    for _ in 0..rng.gen_range(stats.count.0..=stats.count.1) {
        let len = ((rng.gen_range(stats.seconds.0..stats.seconds.1) * rate) as usize).clamp(16, n);
        let start = rng.gen_range(0..=n - len);
        let f0 = log_uniform(rng, stats.freq.0, stats.freq.1);
        let q = rng.gen_range(1.0..6.0);
        let amp = rng.gen_range(0.2..1.0);
        let attack = (rng.gen_range(0.01..0.1) * rate).min(len as f64 / 2.0);
        let decay = rng.gen_range(3.0..12.0) / len as f64;
        let mut burst: Vec<f64> = (0..len).map(|_| gauss(rng)).collect();
        bandpass(&mut burst, f0, q, rate);
        for (i, b) in burst.iter().enumerate() {
            let env = (i as f64 / attack).min(1.0) * (-(i as f64) * decay).exp();
            out[start + i] += amp * env * b;
        }
    }

    for _ in 0..rng.gen_range(1..=3) {
        let len = rng.gen_range(n / 4..=n);
        let start = rng.gen_range(0..=n - len);
        let f = log_uniform(rng, 100.0, 4000.0);
        let (rate_am, depth) = (rng.gen_range(0.5..8.0), rng.gen_range(0.3..1.0));
        let amp = rng.gen_range(0.05..0.4);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..len {
            let t = i as f64 / rate;
            let am = 1.0 - depth * 0.5 * (1.0 - (std::f64::consts::TAU * rate_am * t).cos());
            out[start + i] += amp * am * (std::f64::consts::TAU * f * t + phase).sin();
        }
    }
    out
}

/// Rescale per block so the block RMS envelope takes one of 8 levels.
fn quantize_envelope(x: &mut [f64]) {
    let rms: Vec<f64> = x
        .chunks(ENVELOPE_BLOCK)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return;
    }
    let step = peak / ENVELOPE_LEVELS as f64;
    for (block, &r) in x.chunks_mut(ENVELOPE_BLOCK).zip(&rms) {
        if r > 0.0 {
            let q = ((r / step).ceil().clamp(1.0, ENVELOPE_LEVELS as f64)) * step;
            block.iter_mut().for_each(|v| *v *= q / r);
        }
    }
}

/// Zero every DFT bin whose frequency falls inside one of `bands`.
fn notch(x: &mut [f64], bands: &[(f64, f64)], planner: &mut FftPlanner<f64>) {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let rate = TARGET_RATE as f64;
    for k in 0..=n / 2 {
        let f = k as f64 * rate / n as f64;
        if bands.iter().any(|&(lo, hi)| f >= lo && f <= hi) {
            buf[k] = Complex::new(0.0, 0.0);
            if k != 0 {
                buf[n - k] = Complex::new(0.0, 0.0);
            }
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, c) in x.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// One synthetic clip at 16 kHz; `spoof` adds the notch comb and the quantized envelope.
pub fn synth_clip(seed: u64, index: u64, spoof: bool, shift: Shift) -> AudioClip {
    let mut rng = seeded_rng(seed, &[index]);
    let n = (rng.gen_range(2.0..12.0) * TARGET_RATE as f64) as usize;
    let mut x = environmental_scene(&mut rng, n, shift);
    if spoof {
        quantize_envelope(&mut x);
        notch(&mut x, &shift.notch_bands(), &mut FftPlanner::new());
    }
    let target_rms = log_uniform(&mut rng, 0.02, 0.15);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let mut gain = target_rms / rms;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) * gain;
    if peak > 0.99 {
        gain *= 0.99 / peak;
    }
    AudioClip::mono(x.iter().map(|v| (v * gain) as f32).collect(), TARGET_RATE).expect("finite synthetic samples")
}

/// Write `n_bona + n_spoof` PCM16 WAVs under `out_dir/audio` plus
/// `out_dir/manifest.tsv` (all rows in the train split). Labels are assigned
/// to clip positions by a seeded shuffle.
pub fn gen_synthetic_corpus(seed: u64, n_bona: usize, n_spoof: usize, out_dir: &Path, shift: Shift) -> Result<Manifest> {
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::param("synthetic corpus needs at least one clip per class"));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io_at(audio_dir.display(), e))?;
    let mut labels: Vec<Label> =
        std::iter::repeat(Label::Bona).take(n_bona).chain(std::iter::repeat(Label::Spoof).take(n_spoof)).collect();
    labels.shuffle(&mut seeded_rng(derive_seed(seed, &[u64::MAX]), &[]));
    let labels = Arc::new(labels);
    let entries = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let id = format!("syn_{i:05}");
            let rel = PathBuf::from("audio").join(format!("{id}.wav"));
            let clip = synth_clip(seed, i as u64, labels[i] == Label::Spoof, shift);
            write_wav(&clip, &out_dir.join(&rel))?;
            Ok(ManifestEntry { trial_id: id, path: rel, label: labels[i], split: Split::Train })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::new(entries)?.with_base_dir(out_dir);
    manifest.comments.push(format!("synthetic corpus seed={seed} n_bona={n_bona} n_spoof={n_spoof} shift={shift}"));
    write_manifest(&manifest, &out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
