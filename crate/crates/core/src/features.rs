//! 128-band log-Mel filterbank front-end and corpus-level normalization.
//!
//! Framing: 400-sample (25 ms) symmetric Hann windows hopped by 160 samples
//! (10 ms), zero-padded to a 512-point FFT, power spectrum, HTK-mel
//! triangular filters over 20 Hz to 8 kHz, then `ln(max(energy, 1e-10))`.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const N_MELS: usize = 128;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 8000.0;
pub const ENERGY_FLOOR: f64 = 1e-10;
pub const TARGET_FRAMES: usize = 1024;
pub const STD_FLOOR: f64 = 1e-5;

// sub-samples per FFT bin when integrating a triangle over the bin width
const BIN_SUBSAMPLES: usize = 16;

pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) {
        return Err(Error::param(format!("frequency {hz} must be non-negative")));
    }
    Ok(2595.0 * (1.0 + hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of frames produced for `n` samples: `1 + (n - 400) / 160`.
pub fn frame_count(n: usize) -> usize {
    if n < WIN_LENGTH {
        0
    } else {
        1 + (n - WIN_LENGTH) / HOP_LENGTH
    }
}

#[derive(Debug, Clone)]
struct Filter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Triangular filters on the HTK mel scale, stored sparsely over FFT bins.
///
/// Each weight is the mean of the mel-domain triangle across its FFT bin's
/// frequency span, so narrow low-frequency filters that fall between bin
/// centres still receive energy.
#[derive(Debug, Clone)]
pub struct MelBank {
    filters: Vec<Filter>,
    centers_hz: Vec<f64>,
    n_bins: usize,
}

impl MelBank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_fft < 2 || !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::param(format!(
                "invalid filterbank: {n_mels} mels, {n_fft}-point FFT, {f_min}..{f_max} Hz at {sample_rate} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let (lo, hi) = (hz_to_mel(f_min)?, hz_to_mel(f_max)?);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| lo + (hi - lo) * i as f64 / (n_mels + 1) as f64).collect();
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let tri = |hz: f64| {
                let mel = 2595.0 * (1.0 + hz.max(0.0) / 700.0).log10();
                if mel <= left || mel >= right {
                    0.0
                } else if mel <= center {
                    (mel - left) / (center - left)
                } else {
                    (right - mel) / (right - center)
                }
            };
            let weights: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let start = (k as f64 - 0.5) * bin_hz;
                    (0..BIN_SUBSAMPLES)
                        .map(|s| tri(start + (s as f64 + 0.5) * bin_hz / BIN_SUBSAMPLES as f64))
                        .sum::<f64>()
                        / BIN_SUBSAMPLES as f64
                })
                .collect();
            let first = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            filters.push(Filter { first_bin: first, weights: weights[first..=last].to_vec() });
        }
        let centers_hz = edges[1..=n_mels].iter().map(|&m| mel_to_hz(m)).collect();
        Ok(Self { filters, centers_hz, n_bins })
    }

    pub fn standard() -> Self {
        Self::new(N_MELS, N_FFT, TARGET_RATE, F_MIN, F_MAX).expect("standard filterbank parameters")
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense weight row of filter `m` over all FFT bins.
    pub fn dense_row(&self, m: usize) -> Vec<f64> {
        let f = &self.filters[m];
        let mut row = vec![0.0; self.n_bins];
        row[f.first_bin..f.first_bin + f.weights.len()].copy_from_slice(&f.weights);
        row
    }

    /// Frequency range `[left, right]` in Hz covered by filter `m`'s triangle.
    pub fn support_hz(&self, m: usize) -> (f64, f64) {
        let lo = hz_to_mel(F_MIN).unwrap_or(0.0);
        let hi = hz_to_mel(F_MAX).unwrap_or(0.0);
        let step = (hi - lo) / (self.filters.len() + 1) as f64;
        (mel_to_hz(lo + step * m as f64), mel_to_hz(lo + step * (m + 2) as f64))
    }

    fn apply(&self, power: &[f32], out: &mut [f32]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let p = &power[f.first_bin..f.first_bin + f.weights.len()];
            *o = f.weights.iter().zip(p).map(|(&w, &e)| w * e as f64).sum::<f64>() as f32;
        }
    }
}

/// Frame-level log-Mel matrix (`T × 128`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    frames: Tensor<f32>,
    normalized: bool,
}

impl MelSpec {
    pub fn new(frames: Tensor<f32>, normalized: bool) -> Result<Self> {
        let (_, width) = frames.dims2()?;
        if width != N_MELS {
            return Err(Error::dim(format!("mel width {width}, expected {N_MELS}")));
        }
        Ok(Self { frames, normalized })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Reusable framing/FFT/filterbank pipeline.
pub struct FbankExtractor {
    bank: MelBank,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl FbankExtractor {
    pub fn new() -> Self {
        let window = (0..WIN_LENGTH)
            .map(|n| {
                (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (WIN_LENGTH - 1) as f64).cos()) as f32
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self { bank: MelBank::standard(), window, fft }
    }

    pub fn bank(&self) -> &MelBank {
        &self.bank
    }

    fn check_clip(clip: &AudioClip) -> Result<()> {
        if clip.channels() != 1 || clip.sample_rate() != TARGET_RATE {
            return Err(Error::param(format!(
                "log-Mel input must be mono {TARGET_RATE} Hz, got {} ch at {} Hz",
                clip.channels(),
                clip.sample_rate()
            )));
        }
        if clip.frames() < WIN_LENGTH {
            return Err(Error::param(format!(
                "clip of {} samples is shorter than one {WIN_LENGTH}-sample window",
                clip.frames()
            )));
        }
        Ok(())
    }

    /// Pre-log mel energies, `T × 128` row-major.
    pub fn mel_energies(&self, clip: &AudioClip) -> Result<Vec<f32>> {
        Self::check_clip(clip)?;
        let samples = clip.samples();
        let t = frame_count(samples.len());
        let mut out = vec![0.0f32; t * N_MELS];
        let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f32; N_FFT / 2 + 1];
        for (i, row) in out.chunks_exact_mut(N_MELS).enumerate() {
            let frame = &samples[i * HOP_LENGTH..i * HOP_LENGTH + WIN_LENGTH];
            for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            buf[WIN_LENGTH..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, row);
        }
        Ok(out)
    }

    pub fn logmel(&self, clip: &AudioClip) -> Result<MelSpec> {
        let energies = self.mel_energies(clip)?;
        let t = energies.len() / N_MELS;
        let data = energies.into_iter().map(|e| (e as f64).max(ENERGY_FLOOR).ln() as f32).collect();
        MelSpec::new(Tensor::from_parts_unchecked(vec![t, N_MELS], data), false)
    }
}

impl Default for FbankExtractor {
    fn default() -> Self {
        Self::new()
    }
}

fn shared_extractor() -> &'static FbankExtractor {
    static EXTRACTOR: OnceLock<FbankExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(FbankExtractor::new)
}

/// Unnormalized log-Mel features of a mono 16 kHz clip.
pub fn logmel(clip: &AudioClip) -> Result<MelSpec> {
    shared_extractor().logmel(clip)
}

/// Scalar corpus statistics used for feature normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub source: String,
    /// Number of clips the statistics were computed over.
    pub count: u64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64, source: impl Into<String>, count: u64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::param(format!("invalid statistics mean={mean} std={std}")));
        }
        Ok(Self { mean, std, source: source.into(), count })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0, source: "identity".into(), count: 0 }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean={:.16e}", self.mean);
        let _ = writeln!(s, "std={:.16e}", self.std);
        let _ = writeln!(s, "source={}", self.source);
        let _ = writeln!(s, "count={}", self.count);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut mean, mut std, mut source, mut count) = (None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::format(format!("stats line without '=': {line}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| Error::format(format!("stats {key}: {e}")));
            match key {
                "mean" => mean = Some(num(value)?),
                "std" => std = Some(num(value)?),
                "source" => source = Some(value.to_string()),
                "count" => {
                    count = Some(value.parse::<u64>().map_err(|e| Error::format(format!("stats count: {e}")))?)
                }
                other => return Err(Error::format(format!("unknown stats key {other}"))),
            }
        }
        let missing = |k: &str| Error::format(format!("stats file lacks {k}"));
        Self::new(
            mean.ok_or_else(|| missing("mean"))?,
            std.ok_or_else(|| missing("std"))?,
            source.ok_or_else(|| missing("source"))?,
            count.ok_or_else(|| missing("count"))?,
        )
        .map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io_at(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path.display(), e))?;
        Self::parse(&text)
    }
}

/// Population mean and standard deviation over every cell of every clip.
///
/// Two deterministic passes (sum, then squared deviations). Per-clip partial
/// sums may be computed in parallel; they are combined in clip order.
pub fn compute_global_stats<F>(source: &str, n_clips: usize, load: F) -> Result<NormStats>
where
    F: Fn(usize) -> Result<MelSpec> + Sync,
{
    if n_clips == 0 {
        return Err(Error::param("cannot compute statistics over an empty manifest"));
    }
    let check = |spec: &MelSpec| -> Result<()> {
        if spec.is_normalized() {
            return Err(Error::State("statistics need unnormalized features".into()));
        }
        Ok(())
    };
    let firsts: Vec<(f64, usize)> = (0..n_clips)
        .into_par_iter()
        .map(|i| {
            let spec = load(i)?;
            check(&spec)?;
            let d = spec.frames().data();
            Ok((d.iter().map(|&v| v as f64).sum::<f64>(), d.len()))
        })
        .collect::<Result<_>>()?;
    let (total, cells) = firsts.iter().fold((0.0, 0usize), |(s, n), &(a, b)| (s + a, n + b));
    let mean = total / cells as f64;
    let seconds: Vec<f64> = (0..n_clips)
        .into_par_iter()
        .map(|i| {
            let spec = load(i)?;
            Ok(spec.frames().data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let var = seconds.iter().sum::<f64>() / cells as f64;
    NormStats::new(mean, var.sqrt().max(STD_FLOOR), source, n_clips as u64)
}

/// `(cell − mean) / std`. Normalizing twice is a state error.
pub fn normalize(spec: &MelSpec, stats: &NormStats) -> Result<MelSpec> {
    if spec.normalized {
        return Err(Error::State("features are already normalized".into()));
    }
    if !(stats.std > 0.0) {
        return Err(Error::param(format!("statistics std {} must be positive", stats.std)));
    }
    let frames = spec.frames.map(|v| ((v as f64 - stats.mean) / stats.std) as f32);
    Ok(MelSpec { frames, normalized: true })
}

/// Inverse of [`normalize`].
pub fn denormalize(spec: &MelSpec, stats: &NormStats) -> Result<MelSpec> {
    if !spec.normalized {
        return Err(Error::State("features are not normalized".into()));
    }
    let frames = spec.frames.map(|v| (v as f64 * stats.std + stats.mean) as f32);
    Ok(MelSpec { frames, normalized: false })
}

/// Zero-pads (post-normalization zero is the corpus mean) or truncates to `target` frames.
pub fn fit_frames(spec: &MelSpec, target: usize) -> Result<MelSpec> {
    if !spec.normalized {
        return Err(Error::State("fit_frames expects normalized features".into()));
    }
    if target == 0 {
        return Err(Error::param("target frame count must be positive"));
    }
    let t = spec.num_frames();
    let mut data = spec.frames.data()[..t.min(target) * N_MELS].to_vec();
    data.resize(target * N_MELS, 0.0);
    Ok(MelSpec { frames: Tensor::from_parts_unchecked(vec![target, N_MELS], data), normalized: true })
}

const MEL_MAGIC: &[u8; 4] = b"MELS";
const MEL_VERSION: u32 = 1;

/// Little-endian feature file: `"MELS"`, version u32 = 1, T u32, width u32,
/// flags u32 (bit 0: normalized), then `T·width` f32 values row-major.
pub fn write_melspec(spec: &MelSpec, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + spec.frames.len() * 4);
    bytes.extend_from_slice(MEL_MAGIC);
    for v in [MEL_VERSION, spec.num_frames() as u32, N_MELS as u32, spec.normalized as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in spec.frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path.display(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io_at(path.display(), e))
}

pub fn read_melspec(path: &Path) -> Result<MelSpec> {
    let mut f = fs::File::open(path).map_err(|e| Error::io_at(path.display(), e))?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header).map_err(|e| Error::io_at(path.display(), e))?;
    if &header[..4] != MEL_MAGIC {
        return Err(Error::format(format!("{}: bad feature magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, t, width, flags) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != MEL_VERSION || width != N_MELS || t == 0 || flags > 1 {
        return Err(Error::format(format!(
            "{}: unsupported feature header (version {version}, {t}x{width}, flags {flags})",
            path.display()
        )));
    }
    let mut payload = vec![0u8; t * width * 4];
    f.read_exact(&mut payload).map_err(|e| Error::io_at(path.display(), e))?;
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let frames = Tensor::new(vec![t, width], data).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    MelSpec::new(frames, flags == 1)
}
