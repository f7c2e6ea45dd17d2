//! Trainable back-end: softmax layer fusion, two ReLU projections with
//! dropout, attentive statistics pooling, and a shared two-logit classifier.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::encoder::{LayerStack, DEFAULT_NUM_LAYERS};
use crate::error::{Error, Result};
use crate::numerics::ops_internal::{gemm_acc, gemm_tn_acc, transpose_slice};
use crate::numerics::{
    seeded_rng, softmax_backward, softmax_slice, DropoutMask, GradRecord, Gradients, ParamStore, Real,
    SeededRng, Tensor,
};

pub const DEFAULT_LAYER_SET: [usize; 6] = [4, 5, 6, 7, 8, 9];
/// Variance floor inside the pooling standard deviation.
pub const POOL_EPS: f64 = 1e-9;

pub const PARAM_NAMES: [&str; 11] = [
    "fusion.logits",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "pool.w_att",
    "pool.b_att",
    "pool.v",
    "pool.k",
    "cls.w",
    "cls.b",
];

const INIT_STREAM: u64 = 0x1417;

/// Hyperparameters needed to build or rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    pub layer_set: Vec<usize>,
    /// Layers the encoder exposes; bounds `layer_set`.
    pub num_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            hidden: 256,
            attn_dim: 128,
            dropout: 0.1,
            layer_set: DEFAULT_LAYER_SET.to_vec(),
            num_layers: DEFAULT_NUM_LAYERS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.attn_dim == 0 {
            return Err(Error::param("model widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.layer_set.is_empty() || self.layer_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param(format!("layer set {:?} must be non-empty and increasing", self.layer_set)));
        }
        if let Some(&bad) = self.layer_set.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return Err(Error::param(format!("layer {bad} outside 1..={}", self.num_layers)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub layer_set: Vec<usize>,
    pub logits: Tensor<T>,
}

impl<T: Real> FusionParams<T> {
    /// Uniform weights (all logits zero).
    pub fn uniform(layer_set: Vec<usize>) -> Self {
        let n = layer_set.len();
        Self { layer_set, logits: Tensor::zeros(&[n]) }
    }

    /// `softmax(logits)`, evaluated in f64.
    pub fn weights(&self) -> Vec<f64> {
        let g: Vec<f64> = self.logits.data().iter().map(|v| v.as_f64()).collect();
        softmax_slice(&g).expect("fusion logits are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w_att: Tensor<T>,
    pub b_att: Tensor<T>,
    pub v_att: Tensor<T>,
    pub k_att: Tensor<T>,
    pub w_cls: Tensor<T>,
    pub b_cls: Tensor<T>,
    pub dropout: f64,
}

impl<T: Real> BackendParams<T> {
    pub fn zeros(dim: usize, hidden: usize, attn_dim: usize, dropout: f64) -> Self {
        Self {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            w_att: Tensor::zeros(&[hidden, attn_dim]),
            b_att: Tensor::zeros(&[attn_dim]),
            v_att: Tensor::zeros(&[attn_dim]),
            k_att: Tensor::zeros(&[1]),
            w_cls: Tensor::zeros(&[2 * hidden, 2]),
            b_cls: Tensor::zeros(&[2]),
            dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn attn_dim(&self) -> usize {
        self.w_att.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub fusion: FusionParams<T>,
    pub backend: BackendParams<T>,
}

fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts_unchecked(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect())
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, zero fusion logits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h, a) = (config.dim, config.hidden, config.attn_dim);
        let mut rng = seeded_rng(seed, &[INIT_STREAM]);
        let mut backend = BackendParams::zeros(d, h, a, config.dropout);
        backend.w1 = glorot(&[d, h], d, h, &mut rng);
        backend.w2 = glorot(&[h, h], h, h, &mut rng);
        backend.w_att = glorot(&[h, a], h, a, &mut rng);
        backend.v_att = glorot(&[a], a, 1, &mut rng);
        backend.w_cls = glorot(&[2 * h, 2], 2 * h, 2, &mut rng);
        Ok(Self { fusion: FusionParams::uniform(config.layer_set.clone()), backend })
    }

    pub fn config(&self, num_layers: usize) -> ModelConfig {
        ModelConfig {
            dim: self.backend.dim(),
            hidden: self.backend.hidden(),
            attn_dim: self.backend.attn_dim(),
            dropout: self.backend.dropout,
            layer_set: self.fusion.layer_set.clone(),
            num_layers,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let b = &self.backend;
        ModelParams {
            fusion: FusionParams { layer_set: self.fusion.layer_set.clone(), logits: self.fusion.logits.cast() },
            backend: BackendParams {
                w1: b.w1.cast(),
                b1: b.b1.cast(),
                w2: b.w2.cast(),
                b2: b.b2.cast(),
                w_att: b.w_att.cast(),
                b_att: b.b_att.cast(),
                v_att: b.v_att.cast(),
                k_att: b.k_att.cast(),
                w_cls: b.w_cls.cast(),
                b_cls: b.b_cls.cast(),
                dropout: b.dropout,
            },
        }
    }

    /// Layers of `stack` selected by the fusion set, in fusion order.
    pub fn fusion_inputs<'a>(&self, stack: &'a LayerStack) -> Result<Vec<&'a Tensor<f32>>> {
        let inputs = self
            .fusion
            .layer_set
            .iter()
            .map(|&id| {
                stack.layer(id).ok_or_else(|| {
                    Error::param(format!("fusion layer {id} not available (stack has {:?})", stack.layer_ids()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (t, d) = inputs[0].dims2()?;
        if t == 0 {
            return Err(Error::dim("layer stack has no frames"));
        }
        if d != self.backend.dim() {
            return Err(Error::dim(format!("stack width {d}, model expects {}", self.backend.dim())));
        }
        Ok(inputs)
    }
}

impl<T: Real> ParamStore<T> for ModelParams<T> {
    fn param_names(&self) -> Vec<&'static str> {
        PARAM_NAMES.to_vec()
    }

    fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let b = &self.backend;
        Some(match name {
            "fusion.logits" => &self.fusion.logits,
            "ffn.w1" => &b.w1,
            "ffn.b1" => &b.b1,
            "ffn.w2" => &b.w2,
            "ffn.b2" => &b.b2,
            "pool.w_att" => &b.w_att,
            "pool.b_att" => &b.b_att,
            "pool.v" => &b.v_att,
            "pool.k" => &b.k_att,
            "cls.w" => &b.w_cls,
            "cls.b" => &b.b_cls,
            _ => return None,
        })
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let b = &mut self.backend;
        Some(match name {
            "fusion.logits" => &mut self.fusion.logits,
            "ffn.w1" => &mut b.w1,
            "ffn.b1" => &mut b.b1,
            "ffn.w2" => &mut b.w2,
            "ffn.b2" => &mut b.b2,
            "pool.w_att" => &mut b.w_att,
            "pool.b_att" => &mut b.b_att,
            "pool.v" => &mut b.v_att,
            "pool.k" => &mut b.k_att,
            "cls.w" => &mut b.w_cls,
            "cls.b" => &mut b.b_cls,
            _ => return None,
        })
    }
}

fn fuse_slices<T: Real>(layers: &[&Tensor<f32>], weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); layers[0].len()];
    for (layer, &w) in layers.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(layer.data()) {
            *o += w * T::from_f32(v);
        }
    }
    out
}

/// `Σ_l softmax(g)_l · layer_l` over the fusion set.
pub fn fuse<T: Real>(stack: &LayerStack, fusion: &FusionParams<T>) -> Result<Tensor<T>> {
    let layers = fusion
        .layer_set
        .iter()
        .map(|&id| stack.layer(id).ok_or_else(|| Error::param(format!("fusion layer {id} out of range"))))
        .collect::<Result<Vec<_>>>()?;
    if layers.len() != fusion.logits.len() {
        return Err(Error::dim("one fusion logit per selected layer"));
    }
    let w = softmax_slice(fusion.logits.data())?;
    Ok(Tensor::from_parts_unchecked(layers[0].shape().to_vec(), fuse_slices(&layers, &w)))
}

fn add_bias_rows<T: Real>(m: &mut [T], bias: &[T]) {
    for row in m.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
}

fn col_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

struct FfnCache<T> {
    z1: Vec<T>,
    mask1: DropoutMask<T>,
    h1: Vec<T>,
    z2: Vec<T>,
    mask2: DropoutMask<T>,
    h2: Vec<T>,
}

fn ffn_cached<T: Real>(
    x: &[T],
    frames: usize,
    b: &BackendParams<T>,
    rng: &mut SeededRng,
    training: bool,
) -> Result<FfnCache<T>> {
    let (d, h) = b.w1.dims2()?;
    if x.len() != frames * d || b.w2.dims2()? != (h, h) || b.b1.len() != h || b.b2.len() != h {
        return Err(Error::dim(format!("FFN input {}x{} does not match W1 {d}x{h}", frames, x.len() / frames.max(1))));
    }
    let sample = |rng: &mut SeededRng| -> Result<DropoutMask<T>> {
        if training {
            DropoutMask::sample(frames * h, b.dropout, rng)
        } else {
            Ok(DropoutMask::identity())
        }
    };
    let mut z1 = vec![T::zero(); frames * h];
    gemm_acc(x, b.w1.data(), &mut z1, frames, d, h);
    add_bias_rows(&mut z1, b.b1.data());
    let mut h1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
    let mask1 = sample(rng)?;
    mask1.apply_in_place(&mut h1);

    let mut z2 = vec![T::zero(); frames * h];
    gemm_acc(&h1, b.w2.data(), &mut z2, frames, h, h);
    add_bias_rows(&mut z2, b.b2.data());
    let mut h2: Vec<T> = z2.iter().map(|&v| v.max(T::zero())).collect();
    let mask2 = sample(rng)?;
    mask2.apply_in_place(&mut h2);
    Ok(FfnCache { z1, mask1, h1, z2, mask2, h2 })
}

/// `h1 = dropout(relu(x·W1 + b1))`, `h2 = dropout(relu(h1·W2 + b2))`.
pub fn ffn_forward<T: Real>(
    x: &Tensor<T>,
    backend: &BackendParams<T>,
    rng: &mut SeededRng,
    training: bool,
) -> Result<Tensor<T>> {
    let (frames, _) = x.dims2()?;
    let cache = ffn_cached(x.data(), frames, backend, rng, training)?;
    Ok(Tensor::from_parts_unchecked(vec![frames, backend.hidden()], cache.h2))
}

struct PoolCache<T> {
    u: Vec<T>,
    alpha: Vec<T>,
    mu: Vec<T>,
    var: Vec<T>,
    sigma: Vec<T>,
}

fn pool_cached<T: Real>(h: &[T], frames: usize, b: &BackendParams<T>) -> Result<(Vec<T>, PoolCache<T>)> {
    if frames == 0 {
        return Err(Error::dim("attentive pooling over zero frames"));
    }
    let (hd, a) = b.w_att.dims2()?;
    if h.len() != frames * hd || b.b_att.len() != a || b.v_att.len() != a || b.k_att.len() != 1 {
        return Err(Error::dim("pooling parameters do not match the hidden width"));
    }
    let mut u = vec![T::zero(); frames * a];
    gemm_acc(h, b.w_att.data(), &mut u, frames, hd, a);
    add_bias_rows(&mut u, b.b_att.data());
    u.iter_mut().for_each(|v| *v = v.tanh());
    let k = b.k_att.data()[0];
    let energies: Vec<T> = u
        .chunks_exact(a)
        .map(|row| row.iter().zip(b.v_att.data()).map(|(&x, &v)| x * v).sum::<T>() + k)
        .collect();
    let alpha = softmax_slice(&energies)?;
    let mut mu = vec![T::zero(); hd];
    let mut m2 = vec![T::zero(); hd];
    for (row, &w) in h.chunks_exact(hd).zip(&alpha) {
        for ((m, s), &x) in mu.iter_mut().zip(m2.iter_mut()).zip(row) {
            *m += w * x;
            *s += w * x * x;
        }
    }
    let eps = T::from_f64(POOL_EPS);
    let var: Vec<T> = m2.iter().zip(&mu).map(|(&s, &m)| s - m * m).collect();
    let sigma: Vec<T> = var.iter().map(|&v| v.max(eps).sqrt()).collect();
    let pooled = mu.iter().chain(&sigma).copied().collect();
    Ok((pooled, PoolCache { u, alpha, mu, var, sigma }))
}

/// Attention-weighted mean and standard deviation over frames, concatenated (`2H`).
pub fn attentive_stats_pool<T: Real>(h: &Tensor<T>, backend: &BackendParams<T>) -> Result<Tensor<T>> {
    let (frames, _) = h.dims2()?;
    let (pooled, _) = pool_cached(h.data(), frames, backend)?;
    Ok(Tensor::from_parts_unchecked(vec![pooled.len()], pooled))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification<T> {
    pub logit_bona: T,
    pub logit_spoof: T,
}

impl<T: Real> Classification<T> {
    /// `logit_bona − logit_spoof`; higher means more likely bona fide.
    pub fn score(&self) -> T {
        self.logit_bona - self.logit_spoof
    }

    pub fn logits(&self) -> [T; 2] {
        [self.logit_bona, self.logit_spoof]
    }
}

fn classify_slice<T: Real>(pooled: &[T], b: &BackendParams<T>) -> Result<Classification<T>> {
    if b.w_cls.dims2()? != (pooled.len(), 2) || b.b_cls.len() != 2 {
        return Err(Error::dim(format!("classifier expects {} inputs", b.w_cls.rows())));
    }
    let mut logits = [b.b_cls.data()[0], b.b_cls.data()[1]];
    for (&p, w) in pooled.iter().zip(b.w_cls.data().chunks_exact(2)) {
        logits[0] += p * w[0];
        logits[1] += p * w[1];
    }
    Ok(Classification { logit_bona: logits[0], logit_spoof: logits[1] })
}

pub fn classify<T: Real>(pooled: &Tensor<T>, backend: &BackendParams<T>) -> Result<Classification<T>> {
    classify_slice(pooled.data(), backend)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: [T; 2],
    pub score: T,
    /// Softmax of the fusion logits (f64), one per fused layer.
    pub fusion_weights: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<T> {
    frames: usize,
    weights: Vec<T>,
    x: Vec<T>,
    ffn: FfnCache<T>,
    pool: PoolCache<T>,
    pooled: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// fuse → FFN → attentive pooling → classifier, keeping what backward needs.
    pub fn forward_cached(
        &self,
        layers: &[&Tensor<f32>],
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        if layers.len() != self.fusion.logits.len() {
            return Err(Error::dim("one fusion logit per selected layer"));
        }
        let frames = layers[0].rows();
        let weights = softmax_slice(self.fusion.logits.data())?;
        let x = fuse_slices(layers, &weights);
        let ffn = ffn_cached(&x, frames, &self.backend, rng, training)?;
        let (pooled, pool) = pool_cached(&ffn.h2, frames, &self.backend)?;
        let cls = classify_slice(&pooled, &self.backend)?;
        let out = ForwardOutput { logits: cls.logits(), score: cls.score(), fusion_weights: self.fusion.weights() };
        Ok((out, ForwardCache { frames, weights, x, ffn, pool, pooled }))
    }

    /// Gradients of every parameter given `∂L/∂logits`.
    pub fn backward(&self, layers: &[&Tensor<f32>], cache: &ForwardCache<T>, dlogits: [T; 2]) -> Gradients<T> {
        let b = &self.backend;
        let (d, h, a) = (b.dim(), b.hidden(), b.attn_dim());
        let frames = cache.frames;
        let zero = T::zero();

        // classifier
        let mut dw_cls = Vec::with_capacity(2 * h * 2);
        for &p in &cache.pooled {
            dw_cls.push(p * dlogits[0]);
            dw_cls.push(p * dlogits[1]);
        }
        let dpooled: Vec<T> =
            b.w_cls.data().chunks_exact(2).map(|w| w[0] * dlogits[0] + w[1] * dlogits[1]).collect();
        let (dmu, dsigma) = dpooled.split_at(h);

        // statistics
        let pc = &cache.pool;
        let eps = T::from_f64(POOL_EPS);
        let two = T::from_f64(2.0);
        let dvar: Vec<T> = pc
            .var
            .iter()
            .zip(&pc.sigma)
            .zip(dsigma)
            .map(|((&v, &s), &g)| if v > eps { g / (two * s) } else { zero })
            .collect();
        let dmu_total: Vec<T> = dmu.iter().zip(&pc.mu).zip(&dvar).map(|((&g, &m), &dv)| g - two * m * dv).collect();
        let h2 = &cache.ffn.h2;
        let mut dh2 = vec![zero; frames * h];
        let mut dalpha = vec![zero; frames];
        for t in 0..frames {
            let row = &h2[t * h..(t + 1) * h];
            let drow = &mut dh2[t * h..(t + 1) * h];
            let at = pc.alpha[t];
            let mut acc = zero;
            for j in 0..h {
                let x = row[j];
                drow[j] = at * (dmu_total[j] + two * x * dvar[j]);
                acc += x * dmu_total[j] + x * x * dvar[j];
            }
            dalpha[t] = acc;
        }

        // attention
        let de = softmax_backward(&pc.alpha, &dalpha);
        let dk: T = de.iter().copied().sum();
        let mut dv = vec![zero; a];
        let mut dpre = vec![zero; frames * a];
        for t in 0..frames {
            let urow = &pc.u[t * a..(t + 1) * a];
            for j in 0..a {
                dv[j] += urow[j] * de[t];
                dpre[t * a + j] = de[t] * b.v_att.data()[j] * (T::one() - urow[j] * urow[j]);
            }
        }
        let mut dw_att = vec![zero; h * a];
        gemm_tn_acc(h2, &dpre, &mut dw_att, frames, h, a);
        let db_att = col_sums(&dpre, a);
        gemm_acc(&dpre, &transpose_slice(b.w_att.data(), h, a), &mut dh2, frames, a, h);

        // second projection
        let fc = &cache.ffn;
        fc.mask2.apply_in_place(&mut dh2);
        let dz2: Vec<T> = dh2.iter().zip(&fc.z2).map(|(&g, &z)| if z > zero { g } else { zero }).collect();
        let mut dw2 = vec![zero; h * h];
        gemm_tn_acc(&fc.h1, &dz2, &mut dw2, frames, h, h);
        let db2 = col_sums(&dz2, h);
        let mut dh1 = vec![zero; frames * h];
        gemm_acc(&dz2, &transpose_slice(b.w2.data(), h, h), &mut dh1, frames, h, h);

        // first projection
        fc.mask1.apply_in_place(&mut dh1);
        let dz1: Vec<T> = dh1.iter().zip(&fc.z1).map(|(&g, &z)| if z > zero { g } else { zero }).collect();
        let mut dw1 = vec![zero; d * h];
        gemm_tn_acc(&cache.x, &dz1, &mut dw1, frames, d, h);
        let db1 = col_sums(&dz1, h);
        let mut dx = vec![zero; frames * d];
        gemm_acc(&dz1, &transpose_slice(b.w1.data(), d, h), &mut dx, frames, h, d);

        // fusion
        let dweights: Vec<T> = layers
            .iter()
            .map(|layer| layer.data().iter().zip(&dx).map(|(&v, &g)| T::from_f32(v) * g).sum())
            .collect();
        let dlogits_fusion = softmax_backward(&cache.weights, &dweights);

        let rec = |param: &'static str, shape: &[usize], data: Vec<T>| GradRecord {
            param,
            grad: Tensor::from_parts_unchecked(shape.to_vec(), data),
        };
        Gradients::new(vec![
            rec("fusion.logits", &[layers.len()], dlogits_fusion),
            rec("ffn.w1", &[d, h], dw1),
            rec("ffn.b1", &[h], db1),
            rec("ffn.w2", &[h, h], dw2),
            rec("ffn.b2", &[h], db2),
            rec("pool.w_att", &[h, a], dw_att),
            rec("pool.b_att", &[a], db_att),
            rec("pool.v", &[a], dv),
            rec("pool.k", &[1], vec![dk]),
            rec("cls.w", &[2 * h, 2], dw_cls),
            rec("cls.b", &[2], dlogits.to_vec()),
        ])
    }
}

/// Full forward pass on one layer stack.
pub fn forward<T: Real>(
    stack: &LayerStack,
    params: &ModelParams<T>,
    rng: &mut SeededRng,
    training: bool,
) -> Result<ForwardOutput<T>> {
    let layers = params.fusion_inputs(stack)?;
    Ok(params.forward_cached(&layers, rng, training)?.0)
}

/// Deterministic evaluation-mode score.
pub fn score<T: Real>(stack: &LayerStack, params: &ModelParams<T>) -> Result<T> {
    let mut rng = seeded_rng(0, &[]);
    Ok(forward(stack, params, &mut rng, false)?.score)
}

/// Fusion weights recorded after successive optimizer steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrajectory {
    pub layer_set: Vec<usize>,
    /// `(step, weights)` rows in increasing step order.
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl FusionTrajectory {
    pub fn new(layer_set: Vec<usize>) -> Self {
        Self { layer_set, rows: Vec::new() }
    }

    pub fn push(&mut self, step: u64, weights: Vec<f64>) {
        self.rows.push((step, weights));
    }

    pub fn truncated(&self, last_step: u64) -> Self {
        Self {
            layer_set: self.layer_set.clone(),
            rows: self.rows.iter().filter(|(s, _)| *s <= last_step).cloned().collect(),
        }
    }

    /// `step,layer,weight` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,layer,weight\n");
        for (step, weights) in &self.rows {
            for (layer, w) in self.layer_set.iter().zip(weights) {
                s.push_str(&format!("{step},{layer},{w:.6}\n"));
            }
        }
        s
    }
}

/// Trained parameters plus the metadata needed to rebuild and audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub num_layers: usize,
    pub step: u64,
    pub dev_eer: Option<f64>,
    pub trajectory: FusionTrajectory,
}

const CKPT_MAGIC: &[u8; 4] = b"EFFN";
const CKPT_VERSION: u32 = 1;
const TRAJECTORY_ENTRY: &str = "fusion.trajectory";

impl Checkpoint {
    /// Little-endian layout: `"EFFN"`, version u32, meta length u32 and UTF-8
    /// `key=value` lines, entry count u32, then per entry the name (u32 length
    /// + bytes), rank u32, dims (u32 each) and a u64 byte offset into the
    /// payload, followed by the f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.params.config(self.num_layers);
        let layers: Vec<String> = cfg.layer_set.iter().map(|l| l.to_string()).collect();
        let mut meta = BTreeMap::new();
        meta.insert("dim", cfg.dim.to_string());
        meta.insert("hidden", cfg.hidden.to_string());
        meta.insert("attn_dim", cfg.attn_dim.to_string());
        meta.insert("dropout", format!("{:?}", cfg.dropout));
        meta.insert("layers", layers.join(","));
        meta.insert("num_layers", self.num_layers.to_string());
        meta.insert("step", self.step.to_string());
        meta.insert("dev_eer", self.dev_eer.map_or("none".into(), |e| format!("{e:?}")));
        meta.insert("trajectory_start", self.trajectory.rows.first().map_or(0, |r| r.0).to_string());
        let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut entries: Vec<(&str, Vec<usize>, Vec<f32>)> = PARAM_NAMES
            .iter()
            .map(|&name| {
                let t = self.params.param(name).expect("known parameter");
                (name, t.shape().to_vec(), t.data().to_vec())
            })
            .collect();
        if !self.trajectory.rows.is_empty() {
            let n = self.trajectory.rows.len();
            let data = self.trajectory.rows.iter().flat_map(|(_, w)| w.iter().map(|&v| v as f32)).collect();
            entries.push((TRAJECTORY_ENTRY, vec![n, cfg.layer_set.len()], data));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, data) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &s in shape {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += data.len() as u64 * 4;
        }
        for (_, _, data) in &entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format("checkpoint metadata is not UTF-8"))?;
        let meta: BTreeMap<&str, &str> = meta_text
            .lines()
            .map(|l| l.split_once('=').ok_or_else(|| Error::format(format!("bad metadata line {l:?}"))))
            .collect::<Result<_>>()?;
        let get = |k: &str| meta.get(k).copied().ok_or_else(|| Error::format(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(format!("checkpoint {k} is not an integer")))
        };
        let layer_set = get("layers")?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| Error::format("bad layer list")))
            .collect::<Result<Vec<_>>>()?;
        let dropout: f64 = get("dropout")?.parse().map_err(|_| Error::format("bad dropout"))?;
        let cfg = ModelConfig {
            dim: num("dim")?,
            hidden: num("hidden")?,
            attn_dim: num("attn_dim")?,
            dropout,
            layer_set,
            num_layers: num("num_layers")?,
        };
        cfg.validate().map_err(|e| Error::format(format!("checkpoint hyperparameters: {e}")))?;
        let step = num("step")? as u64;
        let dev_eer = match get("dev_eer")? {
            "none" => None,
            v => Some(v.parse::<f64>().map_err(|_| Error::format("bad dev_eer"))?),
        };
        let trajectory_start = num("trajectory_start")? as u64;

        let n_entries = r.u32()? as usize;
        if n_entries > 64 {
            return Err(Error::format(format!("implausible entry count {n_entries}")));
        }
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::format(format!("entry {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            entries.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];

        let mut params = ModelParams::<f32> {
            fusion: FusionParams::uniform(cfg.layer_set.clone()),
            backend: BackendParams::zeros(cfg.dim, cfg.hidden, cfg.attn_dim, cfg.dropout),
        };
        let mut seen = Vec::new();
        let mut trajectory = FusionTrajectory::new(cfg.layer_set.clone());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let start = usize::try_from(offset).map_err(|_| Error::format("offset overflow"))?;
            let end = n.checked_mul(4).and_then(|b| b.checked_add(start)).ok_or_else(|| Error::format("entry size overflow"))?;
            let raw = payload.get(start..end).ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!("checkpoint payload truncated in entry {name}"),
                ))
            })?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(shape.clone(), data).map_err(|e| Error::format(format!("entry {name}: {e}")))?;
            if name == TRAJECTORY_ENTRY {
                if shape.len() != 2 || shape[1] != cfg.layer_set.len() {
                    return Err(Error::format("trajectory shape does not match the fusion set"));
                }
                for (i, row) in tensor.data().chunks_exact(shape[1]).enumerate() {
                    trajectory.push(trajectory_start + i as u64, row.iter().map(|&v| v as f64).collect());
                }
                continue;
            }
            let slot = params
                .param_mut(&name)
                .ok_or_else(|| Error::format(format!("unknown checkpoint entry {name}")))?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "entry {name} has shape {shape:?}, hyperparameters imply {:?}",
                    slot.shape()
                )));
            }
            *slot = tensor;
            seen.push(name);
        }
        if let Some(missing) = PARAM_NAMES.iter().find(|n| !seen.iter().any(|s| s == *n)) {
            return Err(Error::format(format!("checkpoint lacks entry {missing}")));
        }
        Ok(Self { params, num_layers: cfg.num_layers, step, dev_eer, trajectory })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io_at(path.display(), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io_at(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io_at(path.display(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "checkpoint header truncated"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_from(layers: Vec<Vec<f32>>, t: usize, d: usize) -> LayerStack {
        LayerStack::new(layers.into_iter().map(|v| Tensor::matrix(t, d, v).unwrap()).collect()).unwrap()
    }

    fn random_stack(seed: u64, l: usize, t: usize, d: usize) -> LayerStack {
        let mut rng = seeded_rng(seed, &[]);
        stack_from((0..l).map(|_| (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect(), t, d)
    }

    fn small_config() -> ModelConfig {
        ModelConfig { dim: 8, hidden: 8, attn_dim: 4, dropout: 0.1, ..ModelConfig::default() }
    }

    #[test]
    fn fuse_cases() {
        let stack = random_stack(1, 12, 5, 3);
        let uniform = FusionParams::<f64>::uniform(DEFAULT_LAYER_SET.to_vec());
        let fused = fuse(&stack, &uniform).unwrap();
        for (i, &v) in fused.data().iter().enumerate() {
            let avg: f64 = (4..=9).map(|l| stack.layer(l).unwrap().data()[i] as f64).sum::<f64>() / 6.0;
            assert!((v - avg).abs() < 1e-12);
        }

        let peaked = FusionParams {
            layer_set: DEFAULT_LAYER_SET.to_vec(),
            logits: Tensor::vector(vec![30.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        };
        let fused = fuse(&stack, &peaked).unwrap();
        for (&v, &l4) in fused.data().iter().zip(stack.layer(4).unwrap().data()) {
            assert!((v - l4 as f64).abs() <= 1e-9 * (l4 as f64).abs().max(1e-3));
        }

        let same = stack_from(vec![vec![0.5, -0.25, 0.125, 1.0]; 12], 2, 2);
        let skewed = FusionParams {
            layer_set: DEFAULT_LAYER_SET.to_vec(),
            logits: Tensor::vector(vec![1.0, -2.0, 0.3, 4.0, 0.0, -1.0]).unwrap(),
        };
        let fused = fuse(&same, &skewed).unwrap();
        for (&v, &x) in fused.data().iter().zip(same.layer(1).unwrap().data()) {
            assert!((v - x as f64).abs() < 1e-12);
        }

        let out_of_range = FusionParams::<f64>::uniform(vec![4, 13]);
        assert!(matches!(fuse(&stack, &out_of_range), Err(Error::Parameter(_))));
    }

    #[test]
    fn fuse_is_linear() {
        let (x, y) = (random_stack(2, 12, 4, 3), random_stack(3, 12, 4, 3));
        let (a, b) = (0.75f32, -1.5f32);
        let combo = LayerStack::new(
            x.layers()
                .iter()
                .zip(y.layers())
                .map(|(p, q)| {
                    Tensor::matrix(4, 3, p.data().iter().zip(q.data()).map(|(&u, &v)| a * u + b * v).collect()).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let fusion = FusionParams {
            layer_set: DEFAULT_LAYER_SET.to_vec(),
            logits: Tensor::vector(vec![0.2, -0.4, 1.1, 0.0, 0.5, -0.9]).unwrap(),
        };
        let lhs = fuse::<f64>(&combo, &fusion).unwrap();
        let (fx, fy) = (fuse(&x, &fusion).unwrap(), fuse(&y, &fusion).unwrap());
        for ((&l, &p), &q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((l - (a as f64 * p + b as f64 * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn ffn_cases() {
        let mut rng = seeded_rng(0, &[]);
        let x = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 - 6.0).collect()).unwrap();
        let zero = BackendParams::<f64>::zeros(4, 4, 2, 0.0);
        assert!(ffn_forward(&x, &zero, &mut rng, true).unwrap().data().iter().all(|&v| v == 0.0));

        let mut eye = BackendParams::<f64>::zeros(4, 4, 2, 0.0);
        for i in 0..4 {
            eye.w1.data_mut()[i * 4 + i] = 1.0;
            eye.w2.data_mut()[i * 4 + i] = 1.0;
        }
        let out = ffn_forward(&x, &eye, &mut rng, true).unwrap();
        assert_eq!(out, crate::numerics::relu(&x));

        let bad = Tensor::matrix(3, 5, vec![0.0; 15]).unwrap();
        assert!(matches!(ffn_forward(&bad, &eye, &mut rng, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_cases() {
        let mut b = BackendParams::<f64>::zeros(1, 1, 2, 0.0);
        b.w_att.data_mut().copy_from_slice(&[0.3, -0.7]);
        b.v_att.data_mut().copy_from_slice(&[1.5, 0.5]);
        let eps_sqrt = POOL_EPS.sqrt();

        let constant = Tensor::matrix(4, 1, vec![2.5; 4]).unwrap();
        let p = attentive_stats_pool(&constant, &b).unwrap();
        assert!((p.data()[0] - 2.5).abs() < 1e-12);
        assert!((p.data()[1] - eps_sqrt).abs() < 1e-12);

        let single = Tensor::matrix(1, 1, vec![-0.75]).unwrap();
        let p = attentive_stats_pool(&single, &b).unwrap();
        assert_eq!(p.data()[0], -0.75);
        assert!((p.data()[1] - eps_sqrt).abs() < 1e-12);

        // v = 0 forces uniform attention regardless of k
        b.v_att.data_mut().fill(0.0);
        b.k_att.data_mut()[0] = 3.7;
        let two = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let p = attentive_stats_pool(&two, &b).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && (p.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_cases() {
        let mut b = BackendParams::<f64>::zeros(1, 1, 1, 0.0);
        let pooled = Tensor::vector(vec![0.4, -1.2]).unwrap();
        let c = classify(&pooled, &b).unwrap();
        assert_eq!((c.logits(), c.score()), ([0.0, 0.0], 0.0));
        b.b_cls.data_mut().copy_from_slice(&[2.0, 1.0]);
        assert_eq!(classify(&pooled, &b).unwrap().score(), 1.0);
        b.w_cls.data_mut().copy_from_slice(&[0.5, -0.25, 1.5, 0.75]);
        let s1 = classify(&pooled, &b).unwrap().score();
        b.b_cls.data_mut().iter_mut().for_each(|v| *v += 10.0);
        assert!((classify(&pooled, &b).unwrap().score() - s1).abs() < 1e-12);
    }

    #[test]
    fn forward_determinism() {
        let params = ModelParams::<f32>::init(&small_config(), 9).unwrap();
        let stack = random_stack(4, 12, 16, 8);
        let a = forward(&stack, &params, &mut seeded_rng(1, &[]), false).unwrap();
        let b = forward(&stack, &params, &mut seeded_rng(2, &[]), false).unwrap();
        assert_eq!(a, b);
        let c = forward(&stack, &params, &mut seeded_rng(5, &[]), true).unwrap();
        let d = forward(&stack, &params, &mut seeded_rng(5, &[]), true).unwrap();
        assert_eq!(c, d);
        assert!((a.fusion_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_statistics_envelope() {
        let params = ModelParams::<f64>::init(&small_config(), 3).unwrap();
        let stack = random_stack(6, 12, 16, 8);
        let layers = params.fusion_inputs(&stack).unwrap();
        let (_, cache) = params.forward_cached(&layers, &mut seeded_rng(0, &[]), false).unwrap();
        let h = 8;
        for j in 0..h {
            let col: Vec<f64> = cache.ffn.h2.chunks_exact(h).map(|r| r[j]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(cache.pool.mu[j] >= lo - 1e-12 && cache.pool.mu[j] <= hi + 1e-12);
            assert!(cache.pool.sigma[j] >= POOL_EPS.sqrt());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let params = ModelParams::<f32>::init(&small_config(), 11).unwrap();
        let mut trajectory = FusionTrajectory::new(DEFAULT_LAYER_SET.to_vec());
        trajectory.push(1, vec![1.0 / 6.0; 6]);
        trajectory.push(2, vec![0.2, 0.2, 0.15, 0.15, 0.15, 0.15]);
        let ckpt = Checkpoint { params, num_layers: 12, step: 2, dev_eer: Some(0.125), trajectory };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.step, 2);
        assert_eq!(back.dev_eer, Some(0.125));
        assert_eq!(back.trajectory.rows.len(), 2);
        assert_eq!(back.trajectory.rows[1].0, 2);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().is_format());
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().is_format());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err().is_io());

        let text = String::from_utf8_lossy(&bytes);
        let pos = text.find("hidden=8").unwrap() + "hidden=".len();
        let mut bad = bytes.clone();
        bad[pos] = b'9';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().is_format());
    }
}
