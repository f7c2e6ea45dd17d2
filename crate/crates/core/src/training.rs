//! Class-weighted objective, Adam, and the train / fine-tune loops with
//! dev-EER checkpoint selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::datakit::Label;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, score_source};
use crate::model::{Checkpoint, FusionTrajectory, ModelConfig, ModelParams};
use crate::numerics::{seeded_rng, Gradients, ParamStore, Real, Tensor};
use crate::stacks::StackSource;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const DROPOUT_STREAM: u64 = 0xD_0907;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub bona: f64,
    pub spoof: f64,
}

impl ClassWeights {
    pub fn new(bona: f64, spoof: f64) -> Result<Self> {
        if !(bona > 0.0 && spoof > 0.0 && bona.is_finite() && spoof.is_finite()) {
            return Err(Error::param(format!("class weights ({bona}, {spoof}) must be positive and finite")));
        }
        Ok(Self { bona, spoof })
    }

    pub fn uniform() -> Self {
        Self { bona: 1.0, spoof: 1.0 }
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Bona => self.bona,
            Label::Spoof => self.spoof,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.bona / self.spoof
    }
}

/// `(N_spoof / N_bona, 1)`.
pub fn class_weights_from_counts(n_bona: usize, n_spoof: usize) -> Result<ClassWeights> {
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::param(format!("both classes needed (bona {n_bona}, spoof {n_spoof})")));
    }
    ClassWeights::new(n_spoof as f64 / n_bona as f64, 1.0)
}

pub fn auto_class_weights(labels: &[Label]) -> Result<ClassWeights> {
    let n_bona = labels.iter().filter(|&&l| l == Label::Bona).count();
    class_weights_from_counts(n_bona, labels.len() - n_bona)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassWeighting {
    Auto,
    Explicit(ClassWeights),
}

/// Weighted mean cross-entropy `Σ wᵢ·CEᵢ / Σ wᵢ` and its gradient with
/// respect to each sample's logits (`[bona, spoof]`).
///
/// Weights are first divided by the larger one, so equal weights reduce to
/// the plain mean and a common rescaling of both weights changes nothing.
pub fn weighted_loss<T: Real>(logits: &[[T; 2]], labels: &[Label], weights: &ClassWeights) -> Result<(T, Vec<[T; 2]>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::param(format!("batch of {} logits and {} labels", logits.len(), labels.len())));
    }
    let top = weights.bona.max(weights.spoof);
    let rel = [T::from_f64(weights.bona / top), T::from_f64(weights.spoof / top)];
    let r: Vec<T> = labels.iter().map(|l| rel[l.index()]).collect();
    let total: T = r.iter().copied().sum();
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for ((l, &y), &ri) in logits.iter().zip(labels).zip(&r) {
        let m = l[0].max(l[1]);
        let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
        let z = e0 + e1;
        let ce = m + z.ln() - l[y.index()];
        loss += ri * ce;
        let c = ri / total;
        let mut g = [c * e0 / z, c * e1 / z];
        g[y.index()] -= c;
        grads.push(g);
    }
    Ok((loss / total, grads))
}

/// Adam moments for every parameter group, in `param_names` order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamStore<T>>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .param_names()
            .into_iter()
            .map(|n| Tensor::zeros(params.param(n).expect("listed parameter").shape()))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, lr }
    }
}

pub fn adam_step<T: Real, P: ParamStore<T>>(params: &mut P, grads: &Gradients<T>, state: &mut AdamState<T>) -> Result<()> {
    let names = params.param_names();
    if grads.records().len() != names.len() || state.m.len() != names.len() {
        return Err(Error::dim("gradient groups do not match the parameters"));
    }
    for (rec, &name) in grads.records().iter().zip(&names) {
        let p = params.param(name).expect("listed parameter");
        if rec.param != name || rec.grad.shape() != p.shape() {
            return Err(Error::dim(format!("gradient for {} does not match parameter {name}", rec.param)));
        }
        if !rec.grad.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient in {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::from_f64(state.lr), T::from_f64(state.eps));
    for (i, &name) in names.iter().enumerate() {
        let g = grads.records()[i].grad.data();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for ((mj, vj), &gj) in m.iter_mut().zip(v.iter_mut()).zip(g) {
            *mj = b1 * *mj + c1 * gj;
            *vj = b2 * *vj + c2 * gj * gj;
        }
        if state.lr == 0.0 {
            continue;
        }
        let theta = params.param_mut(name).expect("listed parameter").data_mut();
        for ((th, &mj), &vj) in theta.iter_mut().zip(state.m[i].data()).zip(state.v[i].data()) {
            *th -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_steps: u64,
    /// Optional cap on passes over the training set.
    pub max_epochs: Option<u64>,
    pub eval_every: u64,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            dropout: 0.1,
            max_steps: 500,
            max_epochs: None,
            eval_every: 50,
            seed: 0,
            class_weighting: ClassWeighting::Auto,
            finetune_lr: 5e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::param("learning rates must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::param("batch_size and eval_every must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Labeled items backed by a stack source.
pub struct Dataset<'a> {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub source: &'a dyn StackSource,
}

impl<'a> Dataset<'a> {
    pub fn new(ids: Vec<String>, labels: Vec<Label>, source: &'a dyn StackSource) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != source.len() {
            return Err(Error::dim("dataset ids, labels and stacks differ in length"));
        }
        Ok(Self { ids, labels, source })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: Option<f64>,
    pub dev_eer: Option<f64>,
}

/// `step,loss,dev_eer` CSV with a header; absent values are left empty.
pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,dev_eer\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.step, opt(r.loss), opt(r.dev_eer));
    }
    s
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub best: ModelParams<T>,
    pub best_step: u64,
    pub best_dev_eer: f64,
    pub last: ModelParams<T>,
    pub last_step: u64,
    pub metrics: Vec<MetricRow>,
    pub trajectory: FusionTrajectory,
    pub num_layers: usize,
}

impl<T: Real> TrainRun<T> {
    /// Best parameters with the trajectory up to the step they were taken.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.best.cast(),
            num_layers: self.num_layers,
            step: self.best_step,
            dev_eer: Some(self.best_dev_eer),
            trajectory: self.trajectory.truncated(self.best_step),
        }
    }

    pub fn evaluations(&self) -> Vec<(u64, f64)> {
        self.metrics.iter().filter_map(|r| r.dev_eer.map(|e| (r.step, e))).collect()
    }
}

/// Files a run keeps up to date: `best.ckpt` after each improvement,
/// `metrics.csv` and `fusion.csv` after every evaluation and at the end.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn fusion(&self) -> PathBuf {
        self.dir.join("fusion.csv")
    }

    fn write_logs(&self, metrics: &[MetricRow], trajectory: &FusionTrajectory) -> Result<()> {
        let write = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io_at(p.display(), e));
        write(self.metrics(), metrics_to_csv(metrics))?;
        write(self.fusion(), trajectory.to_csv())
    }
}

fn dev_eer<T: Real>(params: &ModelParams<T>, dev: &Dataset<'_>) -> Result<f64> {
    let labels: Vec<Option<Label>> = dev.labels.iter().copied().map(Some).collect();
    Ok(compute_eer(&score_source(params, &dev.ids, &labels, dev.source)?)?.eer)
}

/// Weighted loss and summed gradients over one batch; per-sample passes run
/// in parallel and are reduced in batch order.
pub fn batch_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    stacks: &[&crate::encoder::LayerStack],
    labels: &[Label],
    weights: &ClassWeights,
    dropout_seeds: Option<&[u64]>,
) -> Result<(T, Gradients<T>)> {
    let passes = stacks
        .par_iter()
        .enumerate()
        .map(|(i, stack)| {
            let layers = params.fusion_inputs(stack)?;
            let (training, mut rng) = match dropout_seeds {
                Some(seeds) => (true, seeded_rng(seeds[i], &[])),
                None => (false, seeded_rng(0, &[])),
            };
            let (out, cache) = params.forward_cached(&layers, &mut rng, training)?;
            Ok((layers, out.logits, cache))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<[T; 2]> = passes.iter().map(|p| p.1).collect();
    let (loss, dlogits) = weighted_loss(&logits, labels, weights)?;
    if !loss.as_f64().is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }
    let parts: Vec<Gradients<T>> =
        passes.par_iter().zip(&dlogits).map(|((layers, _, cache), &d)| params.backward(layers, cache, d)).collect();
    let mut total = Gradients::zeros_like(params);
    for g in &parts {
        total.accumulate(g)?;
    }
    Ok((loss, total))
}

struct LoopStart<T> {
    params: ModelParams<T>,
    step: u64,
    trajectory: FusionTrajectory,
    lr: f64,
    weights: ClassWeights,
}

fn run_loop<T: Real>(
    start: LoopStart<T>,
    num_layers: usize,
    train: &Dataset<'_>,
    dev: &Dataset<'_>,
    config: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainRun<T>> {
    let LoopStart { mut params, step: first_step, mut trajectory, lr, weights } = start;
    if let Some(f) = files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io_at(f.dir.display(), e))?;
    }
    let mut metrics = Vec::new();
    let mut step = first_step;
    let eer0 = dev_eer(&params, dev)?;
    metrics.push(MetricRow { step, loss: None, dev_eer: Some(eer0) });
    let mut run = TrainRun {
        best: params.clone(),
        best_step: step,
        best_dev_eer: eer0,
        last: params.clone(),
        last_step: step,
        metrics: Vec::new(),
        trajectory: FusionTrajectory::new(Vec::new()),
        num_layers,
    };
    let save_best = |run: &TrainRun<T>, trajectory: &FusionTrajectory| -> Result<()> {
        if let Some(f) = files {
            let ckpt = Checkpoint {
                params: run.best.cast(),
                num_layers,
                step: run.best_step,
                dev_eer: Some(run.best_dev_eer),
                trajectory: trajectory.truncated(run.best_step),
            };
            ckpt.save(&f.best_checkpoint())?;
        }
        Ok(())
    };
    save_best(&run, &trajectory)?;

    let mut adam = AdamState::new(&params, lr);
    let n = train.len();
    let end_step = first_step + config.max_steps;
    let mut epoch = 0u64;
    let result: Result<()> = (|| {
        'outer: while step < end_step && config.max_epochs.map_or(true, |e| epoch < e) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeded_rng(config.seed, &[SHUFFLE_STREAM, epoch]));
            for batch in order.chunks(config.batch_size) {
                if step >= end_step {
                    break 'outer;
                }
                step += 1;
                let stacks = batch.iter().map(|&i| train.source.stack(i, Some(epoch))).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&crate::encoder::LayerStack> = stacks.iter().map(|s| s.as_ref()).collect();
                let labels: Vec<Label> = batch.iter().map(|&i| train.labels[i]).collect();
                let seeds: Vec<u64> = (0..batch.len())
                    .map(|k| crate::numerics::derive_seed(config.seed, &[DROPOUT_STREAM, step, k as u64]))
                    .collect();
                let (loss, grads) = batch_loss_and_grad(&params, &refs, &labels, &weights, Some(&seeds))?;
                adam_step(&mut params, &grads, &mut adam)?;
                trajectory.push(step, params.fusion.weights());
                let mut row = MetricRow { step, loss: Some(loss.as_f64()), dev_eer: None };
                if step % config.eval_every == 0 || step == end_step {
                    let eer = dev_eer(&params, dev)?;
                    row.dev_eer = Some(eer);
                    if eer < run.best_dev_eer {
                        run.best = params.clone();
                        run.best_step = step;
                        run.best_dev_eer = eer;
                        save_best(&run, &trajectory)?;
                    }
                    metrics.push(row);
                    if let Some(f) = files {
                        f.write_logs(&metrics, &trajectory)?;
                    }
                    log::info!("step {step} loss {:.6} dev_eer {:.6}", loss.as_f64(), eer);
                    continue;
                }
                metrics.push(row);
            }
            epoch += 1;
        }
        Ok(())
    })();
    if let Some(f) = files {
        f.write_logs(&metrics, &trajectory)?;
    }
    result?;
    run.last = params;
    run.last_step = step;
    run.metrics = metrics;
    run.trajectory = trajectory;
    Ok(run)
}

fn resolve_weights(config: &TrainConfig, train: &Dataset<'_>) -> Result<ClassWeights> {
    match config.class_weighting {
        ClassWeighting::Auto => auto_class_weights(&train.labels),
        ClassWeighting::Explicit(w) => Ok(w),
    }
}

fn check_sets(train: &Dataset<'_>, dev: &Dataset<'_>) -> Result<()> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::param(format!("empty manifest (train {}, dev {})", train.len(), dev.len())));
    }
    Ok(())
}

/// Trains from a seeded initialization at `config.lr`, evaluating dev EER at
/// step 0, every `eval_every` steps and at the last step. The best
/// checkpoint is the lowest dev EER, earliest step on ties.
pub fn train<T: Real>(
    train: &Dataset<'_>,
    dev: &Dataset<'_>,
    model: &ModelConfig,
    config: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    check_sets(train, dev)?;
    let model = ModelConfig { dropout: config.dropout, ..model.clone() };
    let params = ModelParams::<T>::init(&model, config.seed)?;
    let start = LoopStart {
        trajectory: FusionTrajectory::new(model.layer_set.clone()),
        params,
        step: 0,
        lr: config.lr,
        weights: resolve_weights(config, train)?,
    };
    run_loop(start, model.num_layers, train, dev, config, files)
}

/// Continues every parameter of `base` at `config.finetune_lr` with a fresh
/// Adam state. Steps and the fusion trajectory continue from the checkpoint.
pub fn finetune<T: Real>(
    base: &Checkpoint,
    train: &Dataset<'_>,
    dev: &Dataset<'_>,
    config: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    check_sets(train, dev)?;
    let start = LoopStart {
        params: base.params.cast(),
        step: base.step,
        trajectory: base.trajectory.clone(),
        lr: config.finetune_lr,
        weights: resolve_weights(config, train)?,
    };
    run_loop(start, base.num_layers, train, dev, config, files)
}

/// Loads a base checkpoint and checks it against the stacks it will see.
pub fn load_base(path: &Path, expected_dim: Option<usize>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(d) = expected_dim {
        if ckpt.params.backend.dim() != d {
            return Err(Error::format(format!(
                "{}: checkpoint width {} does not match embedding width {d}",
                path.display(),
                ckpt.params.backend.dim()
            )));
        }
    }
    Ok(ckpt)
}
