//! WAV ingestion and clip normalization: mono, 16 kHz, exactly 10 s.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const TARGET_RATE: u32 = 16_000;
pub const CLIP_SECONDS: u32 = 10;
pub const CLIP_SAMPLES: usize = (TARGET_RATE * CLIP_SECONDS) as usize;

/// Interleaved waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    channels: u16,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, channels: u16, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::format("audio clip has no samples"));
        }
        if channels == 0 || samples.len() % channels as usize != 0 {
            return Err(Error::format(format!(
                "{} samples do not divide into {channels} channels",
                samples.len()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::format("non-finite sample"));
        }
        Ok(Self { samples, channels, sample_rate })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(samples, 1, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Samples per channel.
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io_at(path.display(), e),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

/// Reads PCM16 or float32 WAV. PCM16 maps `v` to `v / 32768`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.channels, spec.sample_rate)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes 16-bit PCM, rounding `x · 32768` and saturating.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: clip.channels,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &clip.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Averages stereo channels; mono passes through untouched.
pub fn to_mono(clip: &AudioClip) -> Result<AudioClip> {
    match clip.channels {
        1 => Ok(clip.clone()),
        2 => {
            let samples = clip.samples.chunks_exact(2).map(|lr| (lr[0] + lr[1]) / 2.0).collect();
            AudioClip::mono(samples, clip.sample_rate)
        }
        n => Err(Error::format(format!("{n} channels; only mono and stereo are supported"))),
    }
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;
const CUTOFF_FRACTION: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase windowed-sinc resampler for a fixed rational rate ratio.
///
/// The low-pass cutoff sits at 0.95 of the lower Nyquist frequency and the
/// sinc is tapered by a Kaiser window spanning 16 zero crossings per side.
#[derive(Debug, Clone)]
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    up: u64,
    down: u64,
    half_taps: usize,
    // `up` phases × `2 * half_taps` coefficients
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if source_rate == 0 || target_rate == 0 {
            return Err(Error::param("sample rates must be positive"));
        }
        let g = gcd(source_rate as u64, target_rate as u64);
        let up = target_rate as u64 / g;
        let down = source_rate as u64 / g;
        // cutoff in cycles per input sample
        let cutoff = CUTOFF_FRACTION * 0.5 * (target_rate.min(source_rate) as f64) / source_rate as f64;
        let half_width = SINC_ZERO_CROSSINGS / (2.0 * cutoff);
        let half_taps = half_width.ceil() as usize;
        let taps = 2 * half_taps;
        let norm = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up as usize * taps];
        for phase in 0..up as usize {
            let frac = phase as f64 / up as f64;
            let row = &mut table[phase * taps..(phase + 1) * taps];
            for (j, w) in row.iter_mut().enumerate() {
                // tap j sits at input offset (j + 1 - half_taps) from floor(t)
                let x = frac - (j as f64 + 1.0 - half_taps as f64);
                let u = x / half_width;
                if u.abs() >= 1.0 {
                    continue;
                }
                let arg = 2.0 * cutoff * x;
                let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                *w = 2.0 * cutoff * sinc * bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / norm;
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { source_rate, target_rate, up, down, half_taps, table })
    }

    /// `round(len · target / source)`.
    pub fn output_len(&self, len: usize) -> usize {
        let num = len as u128 * self.target_rate as u128;
        let den = self.source_rate as u128;
        ((2 * num + den) / (2 * den)) as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        if self.source_rate == self.target_rate {
            return input.to_vec();
        }
        let taps = 2 * self.half_taps;
        let n_out = self.output_len(input.len());
        (0..n_out)
            .map(|n| {
                let pos = n as u64 * self.down;
                let base = (pos / self.up) as i64;
                let phase = (pos % self.up) as usize;
                let row = &self.table[phase * taps..(phase + 1) * taps];
                let start = base + 1 - self.half_taps as i64;
                let mut acc = 0.0f64;
                for (j, &w) in row.iter().enumerate() {
                    let k = start + j as i64;
                    if k >= 0 && (k as usize) < input.len() {
                        acc += w * input[k as usize] as f64;
                    }
                }
                acc.clamp(-1.0, 1.0) as f32
            })
            .collect()
    }
}

/// Resamples every channel to `target_rate`. Equal rates return the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let resampler = Resampler::new(clip.sample_rate, target_rate)?;
    let ch = clip.channels as usize;
    if ch == 1 {
        return AudioClip::mono(resampler.process(&clip.samples), target_rate);
    }
    let per_channel: Vec<Vec<f32>> = (0..ch)
        .map(|c| {
            let lane: Vec<f32> = clip.samples.iter().skip(c).step_by(ch).copied().collect();
            resampler.process(&lane)
        })
        .collect();
    let n = per_channel[0].len();
    let samples = (0..n).flat_map(|i| per_channel.iter().map(move |lane| lane[i])).collect();
    AudioClip::new(samples, clip.channels, target_rate)
}

/// Where to cut a clip that is longer than the target.
#[derive(Debug)]
pub enum Crop<'a> {
    /// Offset drawn uniformly from `[0, len - target]`.
    Random(&'a mut SeededRng),
    /// Offset 0.
    Start,
}

/// Tiles short clips end to end and crops long ones to exactly
/// `target_seconds · sample_rate` samples.
pub fn fit_duration(clip: &AudioClip, target_seconds: u32, crop: Crop<'_>) -> Result<AudioClip> {
    if clip.channels != 1 {
        return Err(Error::format("fit_duration expects a mono clip"));
    }
    let target = target_seconds as usize * clip.sample_rate as usize;
    if target == 0 {
        return Err(Error::param("target duration must be positive"));
    }
    let len = clip.samples.len();
    let samples = match len.cmp(&target) {
        std::cmp::Ordering::Equal => return Ok(clip.clone()),
        std::cmp::Ordering::Less => clip.samples.iter().copied().cycle().take(target).collect(),
        std::cmp::Ordering::Greater => {
            let offset = match crop {
                Crop::Random(rng) => rng.gen_range(0..=len - target),
                Crop::Start => 0,
            };
            clip.samples[offset..offset + target].to_vec()
        }
    };
    AudioClip::mono(samples, clip.sample_rate)
}

/// to_mono → resample(16 kHz) → fit_duration(10 s).
pub fn normalize_clip(clip: &AudioClip, crop: Crop<'_>) -> Result<AudioClip> {
    let mono = to_mono(clip)?;
    let resampled = resample(&mono, TARGET_RATE)?;
    fit_duration(&resampled, CLIP_SECONDS, crop)
}
