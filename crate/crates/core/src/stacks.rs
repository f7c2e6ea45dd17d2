//! Providers of per-trial layer stacks for training and scoring.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use crate::audio::{fit_duration, read_wav, resample, to_mono, AudioClip, Crop, CLIP_SAMPLES, CLIP_SECONDS, TARGET_RATE};
use crate::encoder::{read_layerstack, with_trial, EncoderSpec, Index, LayerStack, StubEncoder};
use crate::error::{Error, Result};
use crate::features::{self, MelSpec, NormStats, TARGET_FRAMES};
use crate::numerics::seeded_rng;

/// Seed stream for per-epoch crop offsets.
pub const OFFSET_STREAM: u64 = 0x0FF5;

pub trait StackSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stack for item `index`. `epoch` selects the training view (long clips
    /// get a fresh crop per epoch); `None` is the deterministic evaluation view.
    fn stack(&self, index: usize, epoch: Option<u64>) -> Result<Arc<LayerStack>>;
}

pub struct MemorySource {
    stacks: Vec<Arc<LayerStack>>,
}

impl MemorySource {
    pub fn new(stacks: Vec<LayerStack>) -> Self {
        Self { stacks: stacks.into_iter().map(Arc::new).collect() }
    }
}

impl StackSource for MemorySource {
    fn len(&self) -> usize {
        self.stacks.len()
    }

    fn stack(&self, index: usize, _epoch: Option<u64>) -> Result<Arc<LayerStack>> {
        self.stacks.get(index).cloned().ok_or_else(|| Error::param(format!("no stack {index}")))
    }
}

fn missing(id: &str) -> Error {
    Error::io_at(format!("trial {id}"), std::io::Error::new(std::io::ErrorKind::NotFound, "no embedding listed"))
}

/// Layerstack files listed in an embedding index. Features were fixed when
/// the files were written, so every epoch sees the same view.
pub struct IndexSource {
    items: Vec<(String, PathBuf)>,
    layer_set: Vec<usize>,
    cache: Vec<OnceLock<Arc<LayerStack>>>,
}

impl IndexSource {
    /// Fails with an I/O error naming the first trial absent from `index`.
    pub fn new(trial_ids: &[String], index: &Index, layer_set: &[usize]) -> Result<Self> {
        let items = trial_ids
            .iter()
            .map(|id| index.get(id).map(|p| (id.clone(), p.to_path_buf())).ok_or_else(|| missing(id)))
            .collect::<Result<Vec<_>>>()?;
        let cache = items.iter().map(|_| OnceLock::new()).collect();
        Ok(Self { items, layer_set: layer_set.to_vec(), cache })
    }
}

impl StackSource for IndexSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn stack(&self, index: usize, _epoch: Option<u64>) -> Result<Arc<LayerStack>> {
        if let Some(s) = self.cache[index].get() {
            return Ok(s.clone());
        }
        let (id, path) = &self.items[index];
        let stack = read_layerstack(path).and_then(|s| s.select(&self.layer_set)).map_err(|e| with_trial(id, e))?;
        Ok(self.cache[index].get_or_init(|| Arc::new(stack)).clone())
    }
}

/// Unnormalized log-Mel of a clip after mono → 16 kHz → 10 s.
pub fn clip_features(clip: &AudioClip, crop: Crop<'_>) -> Result<MelSpec> {
    let mono = resample(&to_mono(clip)?, TARGET_RATE)?;
    features::logmel(&fit_duration(&mono, CLIP_SECONDS, crop)?)
}

/// Audio files run through the stub encoder on demand. Clips longer than
/// 10 s are re-cropped at a random offset on every training epoch and
/// cropped at offset 0 for evaluation; every other view is cached.
pub struct OnlineStubSource {
    items: Vec<(String, PathBuf)>,
    encoder: StubEncoder,
    stats: NormStats,
    layer_set: Vec<usize>,
    seed: u64,
    cache: Vec<OnceLock<Arc<LayerStack>>>,
    long: Vec<OnceLock<bool>>,
}

impl OnlineStubSource {
    pub fn new(
        items: Vec<(String, PathBuf)>,
        spec: &EncoderSpec,
        stats: NormStats,
        layer_set: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let encoder = StubEncoder::new(spec)?;
        if let Some(&bad) = layer_set.iter().find(|&&l| l == 0 || l > spec.num_layers) {
            return Err(Error::param(format!("layer {bad} outside the encoder's 1..={}", spec.num_layers)));
        }
        let cache = items.iter().map(|_| OnceLock::new()).collect();
        let long = items.iter().map(|_| OnceLock::new()).collect();
        Ok(Self { items, encoder, stats, layer_set: layer_set.to_vec(), seed, cache, long })
    }

    fn encode(&self, mel: MelSpec) -> Result<LayerStack> {
        let mel = features::fit_frames(&features::normalize(&mel, &self.stats)?, TARGET_FRAMES)?;
        self.encoder.encode(&mel)?.select(&self.layer_set)
    }
}

impl StackSource for OnlineStubSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn stack(&self, index: usize, epoch: Option<u64>) -> Result<Arc<LayerStack>> {
        let fixed_view = epoch.is_none() || self.long[index].get() == Some(&false);
        if fixed_view {
            if let Some(s) = self.cache[index].get() {
                return Ok(s.clone());
            }
        }
        let (id, path) = &self.items[index];
        let run = || -> Result<(bool, LayerStack)> {
            let clip = resample(&to_mono(&read_wav(path)?)?, TARGET_RATE)?;
            let is_long = clip.frames() > CLIP_SAMPLES;
            let mel = match (is_long, epoch) {
                (true, Some(e)) => {
                    let mut rng = seeded_rng(self.seed, &[OFFSET_STREAM, e, index as u64]);
                    features::logmel(&fit_duration(&clip, CLIP_SECONDS, Crop::Random(&mut rng))?)?
                }
                _ => features::logmel(&fit_duration(&clip, CLIP_SECONDS, Crop::Start)?)?,
            };
            Ok((is_long, self.encode(mel)?))
        };
        let (is_long, stack) = run().map_err(|e| with_trial(id, e))?;
        let _ = self.long[index].set(is_long);
        if is_long && epoch.is_some() {
            return Ok(Arc::new(stack));
        }
        Ok(self.cache[index].get_or_init(|| Arc::new(stack)).clone())
    }
}

/// Embedding index path → source restricted to `trial_ids`.
pub fn index_source(trial_ids: &[String], index_path: &Path, layer_set: &[usize]) -> Result<IndexSource> {
    IndexSource::new(trial_ids, &Index::read(index_path)?, layer_set)
}
