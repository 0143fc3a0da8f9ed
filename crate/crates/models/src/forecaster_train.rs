//! Forecaster training: pair sampling from a dataset split, the MSE
//! objective in normalized space, and lead-time fine-tuning.

use std::sync::Arc;

use candle_core::Tensor;
use candle_nn::VarMap;

use crate::error::{ModelError, Result};
use crate::optim::{named_vars, AdamW, AdamWConfig, LrSchedule};
use crate::swin::Forecaster;
use crate::tensor::{scalar_f64, tensor_from_array2, tensor_from_array3, NoiseRng};
use regioncast_core::dataset::{DatasetReader, Split};
use regioncast_core::transform::{normalize, normalize_boundary, normalize_topography};
use regioncast_core::{extract_boundary, NormStats};

pub const FINETUNE_LEADS: [u32; 3] = [3, 6, 24];

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 2,
            lr: 3e-4,
            weight_decay: 1e-4,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

/// Draws `(state_t, boundary_{t+s}, state_{t+s})` batches from one split,
/// normalized and tensorized. The boundary comes from the target-time truth.
pub struct ForecastBatcher {
    reader: Arc<DatasetReader>,
    stats: NormStats,
    lead: u32,
    pair_starts: Vec<usize>,
    rng: NoiseRng,
    boundary_width: usize,
    dtype: candle_core::DType,
    topography: Tensor,
}

impl ForecastBatcher {
    pub fn new(
        reader: Arc<DatasetReader>,
        stats: NormStats,
        split: Split,
        lead: u32,
        boundary_width: usize,
        dtype: candle_core::DType,
        seed: u64,
    ) -> Result<Self> {
        let manifest = reader.manifest();
        let indices = manifest.split_indices(split);
        let pair_starts: Vec<usize> = indices
            .into_iter()
            .filter(|&i| {
                manifest
                    .time_at(i)
                    .map(|t| manifest.index_of(t.plus_hours(lead as i64)).is_some())
                    .unwrap_or(false)
            })
            .collect();
        if pair_starts.is_empty() {
            return Err(ModelError::InvalidArgument(format!(
                "split {split:?} has no (t, t+{lead}h) pairs"
            )));
        }
        let dev = candle_core::Device::Cpu;
        let topo_norm = normalize_topography(&reader.topography().view(), &stats);
        let topography = tensor_from_array2(&topo_norm.view(), dtype, &dev)?
            .unsqueeze(0)?
            .unsqueeze(0)?;
        Ok(Self {
            reader,
            stats,
            lead,
            pair_starts,
            rng: NoiseRng::for_stream(seed, "batcher", lead as u64),
            boundary_width,
            dtype,
            topography,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_starts.len()
    }

    pub fn topography(&self) -> &Tensor {
        &self.topography
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// Random batch (with replacement).
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Batch> {
        let picks: Vec<usize> = (0..batch_size)
            .map(|_| self.pair_starts[self.rng.uniform_index(self.pair_starts.len())])
            .collect();
        self.batch_at(&picks)
    }

    /// Deterministic batch from explicit pair indices (for validation and
    /// overfit runs).
    pub fn batch_at(&self, pair_indices: &[usize]) -> Result<Batch> {
        let manifest = self.reader.manifest();
        let mut xs = Vec::new();
        let mut bs = Vec::new();
        let mut ys = Vec::new();
        for &index in pair_indices {
            let t = manifest
                .time_at(index)
                .ok_or_else(|| ModelError::InvalidArgument(format!("bad index {index}")))?;
            let target_t = t.plus_hours(self.lead as i64);
            let x = normalize(&self.reader.load_state(t)?, &self.stats)?;
            let y = normalize(&self.reader.load_state(target_t)?, &self.stats)?;
            let strip = extract_boundary(&self.reader.load_state(target_t)?, self.boundary_width)?;
            let strip = normalize_boundary(&strip, &self.stats)?;
            let dev = candle_core::Device::Cpu;
            xs.push(tensor_from_array3(&x.values(), self.dtype, &dev)?);
            bs.push(tensor_from_array3(&strip.values(), self.dtype, &dev)?);
            ys.push(tensor_from_array3(&y.values(), self.dtype, &dev)?);
        }
        Ok(Batch {
            x: Tensor::stack(&xs, 0)?,
            boundary: Tensor::stack(&bs, 0)?,
            target: Tensor::stack(&ys, 0)?,
        })
    }

    /// The first `n` validation pairs as one batch.
    pub fn first_pairs(&self, n: usize) -> Vec<usize> {
        self.pair_starts.iter().copied().take(n).collect()
    }
}

pub struct Batch {
    pub x: Tensor,
    pub boundary: Tensor,
    pub target: Tensor,
}

/// Mean squared error over all channels and pixels, in normalized space.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// One optimizer update; a non-finite loss aborts with diagnostics.
pub fn train_step(
    model: &Forecaster,
    batch: &Batch,
    topography: &Tensor,
    vars: &[(String, candle_core::Var)],
    optimizer: &mut AdamW,
) -> Result<f64> {
    let pred = model.forward(&batch.x, Some(&batch.boundary), topography, false)?;
    let loss = mse_loss(&pred, &batch.target)?;
    let value = scalar_f64(&loss)?;
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: optimizer.step_count() + 1,
            details: format!("forecaster mse = {value}"),
        });
    }
    let grads = loss.backward()?;
    optimizer.step(vars, &grads)?;
    Ok(value)
}

/// Runs `opts.steps` updates, returning the `(step, loss)` curve.
/// `on_step` fires after every update (checkpoint hooks live there).
pub fn fit(
    model: &Forecaster,
    varmap: &VarMap,
    batcher: &mut ForecastBatcher,
    opts: &TrainOptions,
    optimizer: &mut AdamW,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<(u64, f64)>> {
    let vars = named_vars(varmap);
    let mut curve = Vec::with_capacity(opts.steps as usize);
    let start = optimizer.step_count();
    for _ in 0..opts.steps {
        let step = optimizer.step_count() + 1;
        optimizer.set_lr(opts.schedule.lr_at(opts.lr, step - 1));
        let batch = batcher.sample_batch(opts.batch_size)?;
        let topo = batcher.topography().clone();
        let loss = train_step(model, &batch, &topo, &vars, optimizer)?;
        curve.push((step, loss));
        on_step(step, loss)?;
    }
    debug_assert_eq!(optimizer.step_count(), start + opts.steps);
    Ok(curve)
}

/// Validation MSE over fixed pairs.
pub fn validation_mse(
    model: &Forecaster,
    batcher: &ForecastBatcher,
    pair_indices: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pair_indices.chunks(4) {
        let batch = batcher.batch_at(chunk)?;
        let pred = model.forward(&batch.x, Some(&batch.boundary), batcher.topography(), true)?;
        let loss = mse_loss(&pred, &batch.target)?;
        total += scalar_f64(&loss)? * chunk.len() as f64;
    }
    Ok(total / pair_indices.len() as f64)
}

/// Checks the fine-tuning contract: the target lead must be one of the
/// published fine-tune steps and the base parameters must be the 1-hour
/// model.
pub fn validate_finetune(base_lead: u32, new_lead: u32) -> Result<()> {
    if base_lead != 1 {
        return Err(ModelError::InvalidArgument(format!(
            "fine-tuning starts from the 1-hour base model, got {base_lead}h"
        )));
    }
    if !FINETUNE_LEADS.contains(&new_lead) {
        return Err(ModelError::InvalidArgument(format!(
            "fine-tune lead must be one of {FINETUNE_LEADS:?}, got {new_lead}"
        )));
    }
    Ok(())
}

/// Default optimizer for the published settings: Adam with decoupled weight
/// decay at an initial rate of 3e-4.
pub fn default_optimizer(opts: &TrainOptions) -> AdamW {
    AdamW::new(AdamWConfig {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        ..Default::default()
    })
}
