//! Desk-scale training engine: distillation from a full-precision twin
//! and supervised fine-tuning, both on hand-derived gradients.
//!
//! Quantized projections train through full-precision latents: every
//! forward re-quantizes the latent, gradients reach the latent by
//! straight-through estimation, and the optimizer only ever touches
//! latents and full-precision tensors.

mod backward;
mod losses;

pub use backward::{
    backward, sparse_ternary_matmul_backward, GatedLinearGrads, Gradients, OutputGrad,
};
pub use losses::{
    distill_loss, distill_loss_grad, multisim_loss, multisim_loss_grad, MultisimParams,
};

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::gate::{sample_sparsity, ScheduleConfig};
use crate::kernels::OpsCounter;
use crate::model::{forward, forward_cached, VitModel};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Prng};

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Shared training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Distillation defaults: the sparsity ramp spans the whole run.
    pub fn distill_default(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 4,
            learning_rate: 1e-3,
            adam: AdamParams::default(),
            schedule: ScheduleConfig::ramp(steps.saturating_sub(1).max(1))
                .expect("default ramp is valid"),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps - 1 > self.schedule.total_steps {
            return Err(Error::Config(format!(
                "schedule covers {} steps but the run has {}",
                self.schedule.total_steps + 1,
                self.steps
            )));
        }
        Ok(())
    }
}

/// Fine-tuning settings on top of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Gate level held fixed for every fine-tuning forward.
    pub sparsity: f64,
    /// Images drawn per sampled place (the K of P-places x K-images).
    pub images_per_place: usize,
    pub multisim: MultisimParams,
}

impl FinetuneConfig {
    pub fn new(train: TrainConfig, sparsity: f64) -> Self {
        Self { train, sparsity, images_per_place: 2, multisim: MultisimParams::default() }
    }
}

/// Set of tensor names the optimizer may update.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        Self { trainable: names.into_iter().collect() }
    }

    /// Every tensor trainable.
    pub fn all<T: Scalar>(model: &VitModel<T>) -> Self {
        Self::from_names(model.tensor_names())
    }

    /// Fine-tune default: descriptor head (parameter-free for the CLS
    /// head), the final LayerNorm, and the last two blocks.
    pub fn head_and_last_two<T: Scalar>(model: &VitModel<T>) -> Self {
        let depth = model.config.depth;
        let mut names: Vec<String> = vec!["norm.weight".into(), "norm.bias".into()];
        for i in depth.saturating_sub(2)..depth {
            names.extend(model.block_tensor_names(i));
        }
        Self::from_names(names)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn validate<T: Scalar>(&self, model: &VitModel<T>) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::Usage("empty trainable set".into()));
        }
        let names: BTreeSet<String> = model.tensor_names().into_iter().collect();
        for n in &self.trainable {
            if !names.contains(n) {
                return Err(Error::Usage(format!("unknown tensor in freeze mask: {n}")));
            }
        }
        Ok(())
    }
}

/// Adam with f64 moment state keyed by tensor name.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    learning_rate: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: AdamParams) -> Self {
        Self { params, learning_rate, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One optimizer step over the trainable tensors present in `grads`.
    /// A zero gradient is an exact parameter no-op.
    pub fn step<T: Scalar>(
        &mut self,
        model: &mut VitModel<T>,
        grads: &Gradients<T>,
        trainable: &FreezeMask,
    ) -> Result<()> {
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let eps = self.params.epsilon;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);

        for (name, param) in model.dense_params_mut() {
            if !trainable.contains(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != param.shape() {
                return Err(Error::Usage(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let numel = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let p = param.data_mut();
            for idx in 0..numel {
                let gi = g.data()[idx].wide();
                m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
                v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                let next = p[idx].wide() - self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                p[idx] = T::from_wide(next);
            }
        }
        Ok(())
    }
}

/// One `(step, sparsity, loss)` record of a training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub sparsity: f64,
    pub loss: f64,
}

fn check_aligned<T: Scalar>(student: &VitModel<T>, teacher: &VitModel<T>) -> Result<()> {
    let s = &student.config;
    let t = &teacher.config;
    let arch_matches = s.image == t.image
        && s.patch == t.patch
        && s.dim == t.dim
        && s.depth == t.depth
        && s.heads == t.heads
        && s.mlp_ratio == t.mlp_ratio
        && s.head_type == t.head_type;
    if !arch_matches {
        return Err(Error::Usage(
            "student and teacher architectures are not aligned".into(),
        ));
    }
    if t.quantized {
        return Err(Error::Usage("teacher must be full precision".into()));
    }
    Ok(())
}

/// Draw `k` distinct indices from `0..n` (partial Fisher-Yates).
fn sample_distinct(prng: &mut Prng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + prng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Distillation stage: per step, sample a batch and a sparsity level from
/// the ramp schedule, match the teacher's final-layer tokens under the
/// token MSE loss, and update the student with Adam.
///
/// The teacher runs ungated (`s = 0`) and frozen; its token targets are
/// cached per image. A full-precision student also runs at `s = 0`, so an
/// identical frozen twin distills to an exact zero loss.
pub fn train_distill<T: Scalar>(
    student: &mut VitModel<T>,
    teacher: &VitModel<T>,
    images: &[DenseTensor<T>],
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    check_aligned(student, teacher)?;
    if images.is_empty() {
        return Err(Error::Usage("distillation needs a non-empty image pool".into()));
    }
    student.ensure_latents()?;

    let mut prng = Prng::new(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let trainable = FreezeMask::all(student);
    let mut teacher_tokens: Vec<Option<DenseTensor<T>>> = vec![None; images.len()];
    let mut scratch = OpsCounter::new();
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| prng.below(images.len()))
            .collect();
        let s = sample_sparsity(&mut prng, step, &cfg.schedule)?;
        let s_eff = if student.config.quantized { s } else { 0.0 };

        let mut grads = Gradients::new();
        let mut loss_sum = 0.0f64;
        for &idx in &batch {
            let img = &images[idx];
            if teacher_tokens[idx].is_none() {
                let (tokens, _) = forward(teacher, img, 0.0, &mut scratch)?;
                teacher_tokens[idx] = Some(tokens);
            }
            let target = teacher_tokens[idx].as_ref().expect("cached above");

            let cache = forward_cached(student, img, s_eff, &mut scratch)?;
            loss_sum += distill_loss(&cache.tokens, target)?;
            let d_tokens = distill_loss_grad(&cache.tokens, target)?
                .scale(T::from_wide(1.0 / cfg.batch_size as f64));
            backward(
                student,
                &cache,
                &OutputGrad { tokens: Some(d_tokens), descriptor: None },
                &mut grads,
            )?;
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite distillation loss at step {step}"
            )));
        }
        adam.step(student, &grads, &trainable)?;
        records.push(StepRecord { step, sparsity: s, loss });
    }
    Ok(records)
}

/// Fine-tuning stage: P-places x K-images batches under the
/// multi-similarity loss, with the gate held at a fixed sparsity and only
/// the tensors named by `freeze` updated.
pub fn train_finetune<T: Scalar>(
    model: &mut VitModel<T>,
    places: &[Vec<DenseTensor<T>>],
    cfg: &FinetuneConfig,
    freeze: &FreezeMask,
) -> Result<Vec<StepRecord>> {
    cfg.train.validate()?;
    freeze.validate(model)?;
    let k = cfg.images_per_place;
    if k < 2 {
        return Err(Error::Config("images_per_place must be >= 2".into()));
    }
    if cfg.train.batch_size % k != 0 {
        return Err(Error::Config(format!(
            "batch_size {} must be a multiple of images_per_place {k}",
            cfg.train.batch_size
        )));
    }
    let places_per_batch = cfg.train.batch_size / k;
    if places_per_batch < 2 {
        return Err(Error::Config(
            "fine-tune batches need at least 2 places".into(),
        ));
    }
    if places.len() < places_per_batch {
        return Err(Error::Usage(format!(
            "dataset has {} places, batch needs {places_per_batch}",
            places.len()
        )));
    }
    if let Some(short) = places.iter().position(|p| p.len() < k) {
        return Err(Error::Usage(format!(
            "place {short} has fewer than {k} images"
        )));
    }

    model.ensure_latents()?;
    let mut prng = Prng::new(cfg.train.seed);
    let mut adam = Adam::new(cfg.train.learning_rate, cfg.train.adam);
    let mut scratch = OpsCounter::new();
    let mut records = Vec::with_capacity(cfg.train.steps);

    for step in 0..cfg.train.steps {
        let chosen = sample_distinct(&mut prng, places.len(), places_per_batch);
        let mut caches = Vec::with_capacity(cfg.train.batch_size);
        let mut labels = Vec::with_capacity(cfg.train.batch_size);
        for &p in &chosen {
            let imgs = sample_distinct(&mut prng, places[p].len(), k);
            for ii in imgs {
                let cache = forward_cached(model, &places[p][ii], cfg.sparsity, &mut scratch)?;
                caches.push(cache);
                labels.push(p as u32);
            }
        }
        let descriptors: Vec<_> = caches.iter().map(|c| c.descriptor.clone()).collect();
        let (loss, d_desc) = multisim_loss_grad(&descriptors, &labels, &cfg.multisim)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fine-tune loss at step {step}"
            )));
        }

        let mut grads = Gradients::new();
        for (cache, g) in caches.iter().zip(&d_desc) {
            let g_desc = DenseTensor::new(
                vec![g.len()],
                g.iter().map(|&x| T::from_wide(x)).collect(),
            )?;
            backward(
                model,
                cache,
                &OutputGrad { tokens: None, descriptor: Some(g_desc) },
                &mut grads,
            )?;
        }
        adam.step(model, &grads, freeze)?;
        records.push(StepRecord { step, sparsity: cfg.sparsity, loss });
    }
    Ok(records)
}

#[cfg(test)]
mod tests;
