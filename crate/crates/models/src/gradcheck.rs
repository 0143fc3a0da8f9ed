//! Central finite-difference gradient verification for toy configurations.

use candle_nn::VarMap;

use crate::error::Result;
use crate::optim::named_vars;
use crate::tensor::scalar_f64;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub n_matched: usize,
    pub max_rel_err: f64,
    /// `(var name, flat index, analytic, finite-difference)` of the worst
    /// offenders, capped at 16 entries.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn match_fraction(&self) -> f64 {
        if self.n_params == 0 {
            1.0
        } else {
            self.n_matched as f64 / self.n_params as f64
        }
    }
}

/// Compares backprop gradients of `loss_fn` (a deterministic closure over
/// the current variable values) against central finite differences with
/// step `h`, elementwise over every parameter in the map. Relative error is
/// measured against `max(|analytic|, |numeric|, abs_floor)`.
pub fn finite_difference_check(
    varmap: &VarMap,
    mut loss_fn: impl FnMut() -> Result<candle_core::Tensor>,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    let vars = named_vars(varmap);
    let loss = loss_fn()?;
    let grads = loss.backward()?;

    let mut report = GradCheckReport {
        n_params: 0,
        n_matched: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for (name, var) in &vars {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g
                .to_dtype(candle_core::DType::F64)?
                .flatten_all()?
                .to_vec1()?,
            None => vec![0.0; var.shape().elem_count()],
        };
        let base: Vec<f64> = var
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let shape = var.shape().dims().to_vec();
        let dtype = var.dtype();
        let dev = var.device().clone();

        let set = |values: &[f64]| -> Result<()> {
            let t = candle_core::Tensor::from_vec(values.to_vec(), shape.as_slice(), &dev)?
                .to_dtype(dtype)?;
            var.set(&t)?;
            Ok(())
        };

        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            set(&plus)?;
            let lp = scalar_f64(&loss_fn()?)?;
            let mut minus = base.clone();
            minus[i] -= h;
            set(&minus)?;
            let lm = scalar_f64(&loss_fn()?)?;
            set(&base)?;

            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[i];
            let denom = an.abs().max(fd.abs()).max(abs_floor);
            let rel = (fd - an).abs() / denom;
            report.n_params += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel <= rel_tol {
                report.n_matched += 1;
            } else if report.failures.len() < 16 {
                report.failures.push((name.clone(), i, an, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};
    use candle_nn::{Module, VarBuilder};

    #[test]
    fn quadratic_layer_gradients_verify() {
        let dev = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F64, &dev);
        let layer = candle_nn::linear(3, 2, vb.pp("l")).unwrap();
        crate::tensor::deterministic_init(&varmap, 4).unwrap();
        let x = Tensor::from_vec(vec![0.3f64, -0.7, 1.1], (1, 3), &dev).unwrap();
        let report = finite_difference_check(
            &varmap,
            move || Ok(layer.forward(&x)?.sqr()?.sum_all()?),
            1e-5,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.n_params, 8);
        assert_eq!(report.n_matched, 8, "max rel err {}", report.max_rel_err);
    }
}
