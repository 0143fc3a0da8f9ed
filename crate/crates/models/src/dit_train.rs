//! Diffusion training: noise-prediction MSE plus the variational-bound
//! term for the learned variance, with the codecs held frozen (they are
//! never part of this optimizer's variable set and conditioning latents
//! arrive as plain tensors).

use candle_core::Tensor;
use candle_nn::VarMap;

use crate::diffusion::{q_sample_batch, vlb_term, NoiseSchedule, SamplingSchedule};
use crate::dit::DiT;
use crate::error::{ModelError, Result};
use crate::optim::{named_vars, AdamW, AdamWConfig};
use crate::tensor::{scalar_f64, NoiseRng};

#[derive(Debug, Clone)]
pub struct DiffusionTrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub vlb_weight: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainOptions {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-5,
            vlb_weight: 1.0,
            seed: 0,
        }
    }
}

pub struct DiffusionTrainer {
    pub model: DiT,
    pub vars: VarMap,
    schedule: NoiseSchedule,
    full_sampling: SamplingSchedule,
    optimizer: AdamW,
    rng: NoiseRng,
    vlb_weight: f64,
}

pub struct DiffusionStepStats {
    pub total: f64,
    pub mse: f64,
    pub vlb: f64,
}

impl DiffusionTrainer {
    pub fn new(model: DiT, vars: VarMap, schedule: NoiseSchedule, opts: DiffusionTrainOptions) -> Self {
        let full_sampling = SamplingSchedule::full(&schedule);
        let optimizer = AdamW::new(AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..Default::default()
        });
        let rng = NoiseRng::for_stream(opts.seed, "dit_train", 0);
        Self {
            model,
            vars,
            schedule,
            full_sampling,
            optimizer,
            rng,
            vlb_weight: opts.vlb_weight,
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn optimizer_mut(&mut self) -> &mut AdamW {
        &mut self.optimizer
    }

    /// One update on a batch of `(conditioning, target latent)`.
    pub fn train_step(&mut self, cond: &Tensor, x0: &Tensor) -> Result<DiffusionStepStats> {
        let b = x0.dim(0)?;
        let t_max = self.schedule.n_steps();
        let ts: Vec<usize> = (0..b).map(|_| self.rng.uniform_index(t_max) + 1).collect();
        let eps = self.rng.normal(x0.dims(), x0.dtype(), x0.device())?;
        let x_t = q_sample_batch(x0, &ts, &eps, &self.schedule)?;
        let (eps_hat, v_hat) = self.model.forward(&x_t, cond, &ts)?;
        let mse = (eps_hat.clone() - &eps)?.sqr()?.mean_all()?;

        // Per-sample posterior coefficients differ, so the bound term is
        // accumulated sample by sample.
        let mut vlb_sum: Option<Tensor> = None;
        for (i, &t) in ts.iter().enumerate() {
            let term = vlb_term(
                &self.full_sampling,
                t - 1,
                &x0.narrow(0, i, 1)?,
                &x_t.narrow(0, i, 1)?,
                &eps_hat.narrow(0, i, 1)?,
                &v_hat.narrow(0, i, 1)?,
            )?;
            vlb_sum = Some(match vlb_sum {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let vlb = (vlb_sum.expect("non-empty batch") / b as f64)?;

        let total = (&mse + (&vlb * self.vlb_weight)?)?;
        let stats = DiffusionStepStats {
            total: scalar_f64(&total)?,
            mse: scalar_f64(&mse)?,
            vlb: scalar_f64(&vlb)?,
        };
        if !stats.total.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: self.optimizer.step_count() + 1,
                details: format!("diffusion loss = {}", stats.total),
            });
        }
        let grads = total.backward()?;
        self.optimizer.step(&named_vars(&self.vars), &grads)?;
        Ok(stats)
    }
}
