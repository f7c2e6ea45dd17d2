//! Frozen multi-layer feature extractor abstraction.
//!
//! Two sources of hidden states feed the back-end: a deterministic random
//! stub that maps log-Mel frames through 12 seeded tanh blocks, and layerstack
//! files produced by any external tool.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{self, MelSpec, NormStats, N_MELS, TARGET_FRAMES};
use crate::numerics::{ops_internal, seeded_rng, Tensor};

pub const DEFAULT_NUM_LAYERS: usize = 12;

/// Per-layer hidden states of one clip. Layers are numbered from 1 (first
/// block output) to `L`; a stack may hold a subset after [`LayerStack::select`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Tensor<f32>>,
    layer_ids: Vec<usize>,
}

impl LayerStack {
    /// A complete stack holding layers `1..=layers.len()`.
    pub fn new(layers: Vec<Tensor<f32>>) -> Result<Self> {
        let ids = (1..=layers.len()).collect();
        Self::with_ids(layers, ids)
    }

    pub fn with_ids(layers: Vec<Tensor<f32>>, layer_ids: Vec<usize>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::dim("layer stack without layers"))?;
        let shape = first.dims2()?;
        if layers.len() != layer_ids.len() {
            return Err(Error::dim("layer id count differs from layer count"));
        }
        for (l, t) in layers.iter().enumerate() {
            if t.dims2()? != shape {
                return Err(Error::dim(format!("layer {} has shape {:?}, expected {shape:?}", l + 1, t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::numeric(format!("layer {} has non-finite values", l + 1)));
            }
        }
        Ok(Self { layers, layer_ids })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn layers(&self) -> &[Tensor<f32>] {
        &self.layers
    }

    /// Layer by 1-based id.
    pub fn layer(&self, id: usize) -> Option<&Tensor<f32>> {
        self.layer_ids.iter().position(|&l| l == id).map(|i| &self.layers[i])
    }

    /// Keeps only the listed layers, in the listed order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let layers = ids
            .iter()
            .map(|&id| {
                self.layer(id)
                    .cloned()
                    .ok_or_else(|| Error::param(format!("layer {id} not in stack {:?}", self.layer_ids)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_ids(layers, ids.to_vec())
    }

    fn is_complete(&self) -> bool {
        self.layer_ids.iter().enumerate().all(|(i, &id)| id == i + 1)
    }
}

const STACK_MAGIC: &[u8; 4] = b"LSTK";
const STACK_VERSION: u32 = 1;

/// Little-endian: `"LSTK"`, version u32 = 1, L, T', D (u32), then `L·T'·D`
/// f32 values, layer-major then row-major.
pub fn write_layerstack(stack: &LayerStack, path: &Path) -> Result<()> {
    if !stack.is_complete() {
        return Err(Error::param("only complete stacks (layers 1..=L) can be written"));
    }
    let mut bytes = Vec::with_capacity(20 + stack.num_layers() * stack.frames() * stack.dim() * 4);
    bytes.extend_from_slice(STACK_MAGIC);
    for v in [STACK_VERSION, stack.num_layers() as u32, stack.frames() as u32, stack.dim() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &stack.layers {
        for v in layer.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path.display(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io_at(path.display(), e))
}

pub fn read_layerstack(path: &Path) -> Result<LayerStack> {
    let mut f = fs::File::open(path).map_err(|e| Error::io_at(path.display(), e))?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header).map_err(|e| Error::io_at(path.display(), e))?;
    if &header[..4] != STACK_MAGIC {
        return Err(Error::format(format!("{}: bad layerstack magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, l, t, d) = (word(0), word(1), word(2), word(3));
    if version != STACK_VERSION as usize {
        return Err(Error::format(format!("{}: unsupported layerstack version {version}", path.display())));
    }
    let per_layer = t.checked_mul(d).filter(|&n| n > 0 && l > 0);
    let total_bytes = per_layer.and_then(|n| n.checked_mul(l)).and_then(|n| n.checked_mul(4));
    let (per_layer, total_bytes) = match (per_layer, total_bytes) {
        (Some(p), Some(b)) if b <= isize::MAX as usize => (p, b),
        _ => return Err(Error::format(format!("{}: invalid layerstack shape {l}x{t}x{d}", path.display()))),
    };
    let mut payload = vec![0u8; total_bytes];
    f.read_exact(&mut payload).map_err(|e| Error::io_at(path.display(), e))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing).map_err(|e| Error::io_at(path.display(), e))? != 0 {
        return Err(Error::format(format!("{}: trailing bytes after layerstack payload", path.display())));
    }
    let layers = payload
        .chunks_exact(per_layer * 4)
        .map(|chunk| {
            let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Tensor::new(vec![t, d], data).map_err(|e| Error::format(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    LayerStack::new(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    File,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "file" => Ok(Self::File),
            other => Err(Error::param(format!("unknown encoder kind {other:?} (stub | file)"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stub => "stub",
            Self::File => "file",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub num_layers: usize,
    pub dim: usize,
    /// Mel frames averaged into one hidden step.
    pub downsample: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: EncoderKind::Stub, num_layers: DEFAULT_NUM_LAYERS, dim: 768, downsample: 2, seed: 0 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.dim == 0 {
            return Err(Error::param("encoder needs at least one layer and a positive width"));
        }
        if self.downsample == 0 || TARGET_FRAMES % self.downsample != 0 {
            return Err(Error::param(format!(
                "downsample factor {} must divide {TARGET_FRAMES}",
                self.downsample
            )));
        }
        Ok(())
    }

    pub fn hidden_frames(&self) -> usize {
        TARGET_FRAMES / self.downsample
    }
}

/// Deterministic stand-in for a frozen 12-block audio encoder.
///
/// With `M` the mel frames averaged in groups of `downsample`:
/// `H_1 = tanh(M·P_1)` and `H_l = tanh(0.7·H_{l-1}·A_l + 0.3·M·P_l)`.
/// `P_l` (128×D) and `A_l` (D×D) hold standard normals scaled by
/// `1/sqrt(fan_in)`, drawn from the stream `derive_seed(seed, [l - 1])`.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    spec: EncoderSpec,
    input_proj: Vec<Vec<f32>>,
    recurrent: Vec<Vec<f32>>,
}

impl StubEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut input_proj = Vec::with_capacity(spec.num_layers);
        let mut recurrent = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let mut rng = seeded_rng(spec.seed, &[l as u64]);
            let mut draw = |n: usize, fan_in: usize| -> Vec<f32> {
                let scale = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * scale) as f32
                    })
                    .collect()
            };
            input_proj.push(draw(N_MELS * d, N_MELS));
            recurrent.push(if l == 0 { Vec::new() } else { draw(d * d, d) });
        }
        Ok(Self { spec: spec.clone(), input_proj, recurrent })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn encode(&self, mel: &MelSpec) -> Result<LayerStack> {
        if mel.frames().shape() != [TARGET_FRAMES, N_MELS] {
            return Err(Error::dim(format!(
                "stub encoder expects {TARGET_FRAMES}x{N_MELS} mel input, got {:?}",
                mel.frames().shape()
            )));
        }
        if !mel.is_normalized() {
            return Err(Error::State("stub encoder expects normalized features".into()));
        }
        let (ds, d) = (self.spec.downsample, self.spec.dim);
        let t = TARGET_FRAMES / ds;
        let mut pooled = vec![0.0f32; t * N_MELS];
        for (i, out) in pooled.chunks_exact_mut(N_MELS).enumerate() {
            for k in 0..ds {
                out.iter_mut().zip(mel.frames().row(i * ds + k)).for_each(|(o, &v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= ds as f32);
        }
        let mut layers = Vec::with_capacity(self.spec.num_layers);
        let mut prev: Vec<f32> = Vec::new();
        for l in 0..self.spec.num_layers {
            let mut drive = vec![0.0f32; t * d];
            ops_internal::gemm_acc(&pooled, &self.input_proj[l], &mut drive, t, N_MELS, d);
            let h: Vec<f32> = if l == 0 {
                drive.iter().map(|v| v.tanh()).collect()
            } else {
                let mut rec = vec![0.0f32; t * d];
                ops_internal::gemm_acc(&prev, &self.recurrent[l], &mut rec, t, d, d);
                rec.iter().zip(&drive).map(|(&r, &x)| (0.7 * r + 0.3 * x).tanh()).collect()
            };
            layers.push(Tensor::from_parts_unchecked(vec![t, d], h.clone()));
            prev = h;
        }
        LayerStack::new(layers)
    }
}

/// `trial_id<TAB>relative_path` lines; paths resolve against the index's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Index {
    entries: Vec<(String, PathBuf)>,
}

impl Index {
    pub fn new(entries: Vec<(String, PathBuf)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, PathBuf)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, trial_id: &str) -> Option<&Path> {
        self.entries.iter().find(|(id, _)| id == trial_id).map(|(_, p)| p.as_path())
    }

    /// Writes paths relative to `path`'s directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut text = String::new();
        for (id, p) in &self.entries {
            let rel = p.strip_prefix(base).unwrap_or(p);
            text.push_str(&format!("{id}\t{}\n", rel.display()));
        }
        fs::write(path, text).map_err(|e| Error::io_at(path.display(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path.display(), e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, rel) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(format!("{}:{}: expected id<TAB>path", path.display(), n + 1)))?;
            if entries.iter().any(|(e, _): &(String, PathBuf)| e == id) {
                return Err(Error::format(format!("{}: duplicate trial id {id}", path.display())));
            }
            entries.push((id.to_string(), base.join(rel)));
        }
        Ok(Self { entries })
    }
}

/// Stable per-trial file name: manifest position plus a sanitized id.
pub(crate) fn trial_file_name(position: usize, trial_id: &str, ext: &str) -> String {
    let clean: String =
        trial_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{position:06}_{clean}.{ext}")
}

/// Encodes every listed trial into `out_dir` and writes `out_dir/index.tsv`.
///
/// With [`EncoderKind::Stub`] the feature index must point at unnormalized
/// log-Mel files; they are normalized with `stats`, fitted to 1024 frames and
/// run through the stub. With [`EncoderKind::File`] the index points at
/// existing layerstack files, which are validated against `spec` and copied.
pub fn encode(
    trial_ids: &[String],
    source: &Index,
    spec: &EncoderSpec,
    stats: Option<&NormStats>,
    out_dir: &Path,
) -> Result<Index> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir.display(), e))?;
    let paths = trial_ids
        .iter()
        .map(|id| {
            source.get(id).map(Path::to_path_buf).ok_or_else(|| {
                Error::io_at(
                    format!("trial {id}"),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no input listed for trial"),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stub = match spec.kind {
        EncoderKind::Stub => Some(StubEncoder::new(spec)?),
        EncoderKind::File => None,
    };
    let entries = trial_ids
        .par_iter()
        .zip(paths.par_iter())
        .enumerate()
        .map(|(i, (id, input))| {
            let stack = match &stub {
                Some(stub) => {
                    let stats = stats.ok_or_else(|| Error::param("stub encoding needs normalization stats"))?;
                    let raw = features::read_melspec(input).map_err(|e| with_trial(id, e))?;
                    let mel = features::fit_frames(&features::normalize(&raw, stats)?, TARGET_FRAMES)?;
                    stub.encode(&mel)?
                }
                None => {
                    let stack = read_layerstack(input).map_err(|e| with_trial(id, e))?;
                    if stack.num_layers() != spec.num_layers || stack.dim() != spec.dim {
                        return Err(Error::format(format!(
                            "trial {id}: layerstack is {}x{}x{}, encoder spec expects {} layers of width {}",
                            stack.num_layers(),
                            stack.frames(),
                            stack.dim(),
                            spec.num_layers,
                            spec.dim
                        )));
                    }
                    stack
                }
            };
            let path = out_dir.join(trial_file_name(i, id, "lstk"));
            write_layerstack(&stack, &path)?;
            Ok((id.clone(), path))
        })
        .collect::<Result<Vec<_>>>()?;
    let index = Index::new(entries);
    index.write(&out_dir.join("index.tsv"))?;
    Ok(index)
}

pub(crate) fn with_trial(id: &str, err: Error) -> Error {
    match err {
        Error::Io(e) => Error::io_at(format!("trial {id}"), e),
        Error::Format(m) => Error::Format(format!("trial {id}: {m}")),
        other => other,
    }
}
