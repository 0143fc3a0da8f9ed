//! Adam with decoupled weight decay over named variables. The moment state
//! is keyed by variable path so it can be checkpointed and restored for
//! exact training resumption.

use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::VarMap;
use std::collections::HashMap;

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

/// Named variables in deterministic (sorted) order.
pub fn named_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().unwrap();
    let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// One update over every variable that received a gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, var) in vars {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (grad * (1.0 - b1))?)?,
                None => (grad * (1.0 - b1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (grad.sqr()? * (1.0 - b2))?)?,
                None => (grad.sqr()? * (1.0 - b2))?,
            };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let mut new_val = (var.as_tensor() - (update * self.cfg.lr)?)?;
            if self.cfg.weight_decay > 0.0 {
                // Decoupled decay: applied to the parameter, not the gradient.
                new_val = (new_val - (var.as_tensor() * (self.cfg.lr * self.cfg.weight_decay))?)?;
            }
            var.set(&new_val)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, prefixed `adam_m.` / `adam_v.`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (k, v) in &self.m {
            out.push((format!("adam_m.{k}"), v.clone()));
        }
        for (k, v) in &self.v {
            out.push((format!("adam_v.{k}"), v.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn restore_state(&mut self, step: u64, tensors: HashMap<String, Tensor>) -> Result<()> {
        self.step = step;
        for (name, tensor) in tensors {
            if let Some(key) = name.strip_prefix("adam_m.") {
                self.m.insert(key.to_string(), tensor);
            } else if let Some(key) = name.strip_prefix("adam_v.") {
                self.v.insert(key.to_string(), tensor);
            } else {
                return Err(ModelError::Checkpoint(format!(
                    "unexpected optimizer tensor {name}"
                )));
            }
        }
        Ok(())
    }
}

/// Cosine or constant learning-rate schedule from an initial rate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    Cosine { total_steps: u64, min_lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base_lr: f64, step: u64) -> f64 {
        match self {
            Self::Constant => base_lr,
            Self::Cosine { total_steps, min_lr } => {
                let t = (step.min(*total_steps)) as f64 / (*total_steps).max(1) as f64;
                min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let dev = Device::Cpu;
        let var = Var::from_tensor(
            &Tensor::from_vec(vec![5.0f64, -3.0], (2,), &dev).unwrap(),
        )
        .unwrap();
        let vars = vec![("p".to_string(), var.clone())];
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let loss_of = |v: &Var| v.as_tensor().sqr().unwrap().sum_all().unwrap();
        let initial = loss_of(&var).to_scalar::<f64>().unwrap();
        for _ in 0..200 {
            let loss = loss_of(&var);
            let grads = loss.backward().unwrap();
            opt.step(&vars, &grads).unwrap();
        }
        let final_loss = loss_of(&var).to_scalar::<f64>().unwrap();
        assert!(final_loss < initial * 1e-4, "{final_loss}");
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let dev = Device::Cpu;
        let make = || {
            Var::from_tensor(&Tensor::from_vec(vec![1.0f64, 2.0, -1.0], (3,), &dev).unwrap())
                .unwrap()
        };
        let run = |steps_before: u64, reload: bool| -> Vec<f64> {
            let var = make();
            let vars = vec![("p".to_string(), var.clone())];
            let mut opt = AdamW::new(AdamWConfig::with_lr(0.05));
            let mut do_step = |opt: &mut AdamW| {
                let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                opt.step(&vars, &grads).unwrap();
            };
            for _ in 0..steps_before {
                do_step(&mut opt);
            }
            if reload {
                let state: HashMap<String, Tensor> =
                    opt.state_tensors().into_iter().collect();
                let step = opt.step_count();
                let mut fresh = AdamW::new(AdamWConfig::with_lr(0.05));
                fresh.restore_state(step, state).unwrap();
                opt = fresh;
            }
            for _ in 0..5 {
                do_step(&mut opt);
            }
            var.as_tensor().to_vec1::<f64>().unwrap()
        };
        assert_eq!(run(7, false), run(7, true));
    }

    #[test]
    fn dtype_matches_variables() {
        // f32 variables keep f32 moments.
        let dev = Device::Cpu;
        let var = Var::from_tensor(&Tensor::ones((2,), DType::F32, &dev).unwrap()).unwrap();
        let vars = vec![("w".to_string(), var.clone())];
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&vars, &grads).unwrap();
        assert_eq!(opt.state_tensors()[0].1.dtype(), DType::F32);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            total_steps: 100,
            min_lr: 1e-5,
        };
        assert!((s.lr_at(3e-4, 0) - 3e-4).abs() < 1e-12);
        assert!((s.lr_at(3e-4, 100) - 1e-5).abs() < 1e-12);
    }
}
