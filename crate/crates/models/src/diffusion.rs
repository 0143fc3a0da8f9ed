//! Denoising diffusion: linear schedule, forward noising, respaced
//! ancestral sampling with learned variances, and the variational-bound
//! term used alongside the noise-prediction MSE during training.

use candle_core::Tensor;

use crate::error::{ModelError, Result};
use crate::tensor::NoiseRng;

/// Linear beta schedule over `T` training steps; `alpha_bar(0) == 1` by
/// convention and `alpha_bar` is strictly decreasing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>, // index t-1 holds alpha_bar(t)
}

impl NoiseSchedule {
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps < 1 {
            return Err(ModelError::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(ModelError::Config(
                "betas must satisfy 0 < beta_1 < beta_T < 1".into(),
            ));
        }
        let betas: Vec<f64> = (0..n_steps)
            .map(|i| {
                if n_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(n_steps);
        let mut prod = 1.0;
        for beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        debug_assert!(alpha_bars.windows(2).all(|w| w[1] < w[0]));
        Ok(Self { betas, alpha_bars })
    }

    /// Canonical 1000-step schedule from 1e-4 to 0.02.
    pub fn default_1000() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid canonical schedule")
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    /// `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `t` in `0..=T`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.n_steps() {
            return Err(ModelError::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`, one `t` for
/// the whole tensor.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched forward noising with a per-sample step.
pub fn q_sample_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(ModelError::InvalidArgument(format!(
            "{} steps for batch of {b}",
            ts.len()
        )));
    }
    let mut sq_ab = Vec::with_capacity(b);
    let mut sq_1m = Vec::with_capacity(b);
    for &t in ts {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        sq_ab.push(ab.sqrt());
        sq_1m.push((1.0 - ab).sqrt());
    }
    let shape: Vec<usize> = std::iter::once(b)
        .chain(std::iter::repeat(1).take(x0.dims().len() - 1))
        .collect();
    let ca = Tensor::from_vec(sq_ab, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let cb = Tensor::from_vec(sq_1m, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&ca)? + eps.broadcast_mul(&cb)?)?)
}

/// Per-step coefficients of a (possibly respaced) sampling run. Index `i`
/// orders the retained steps ascending; `orig_t[i]` is the original step
/// fed to the denoiser.
#[derive(Debug, Clone)]
pub struct SamplingSchedule {
    pub orig_t: Vec<usize>,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub alpha_bars_prev: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    pub posterior_log_variance_clipped: Vec<f64>,
    pub posterior_mean_coef_x0: Vec<f64>,
    pub posterior_mean_coef_xt: Vec<f64>,
}

impl SamplingSchedule {
    /// Every step of the base schedule.
    pub fn full(schedule: &NoiseSchedule) -> Self {
        let steps: Vec<usize> = (1..=schedule.n_steps()).collect();
        Self::from_steps(schedule, &steps)
    }

    /// `n_steps` evenly spaced steps of the base schedule. With
    /// `n_steps == T` this reduces exactly to [`SamplingSchedule::full`].
    pub fn respaced(schedule: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let t_max = schedule.n_steps();
        if n_steps < 1 || n_steps > t_max {
            return Err(ModelError::InvalidArgument(format!(
                "cannot respace {t_max} steps to {n_steps}"
            )));
        }
        let steps: Vec<usize> = if n_steps == 1 {
            vec![t_max]
        } else {
            (0..n_steps)
                .map(|i| {
                    let frac = i as f64 * (t_max - 1) as f64 / (n_steps - 1) as f64;
                    frac.round() as usize + 1
                })
                .collect()
        };
        debug_assert!(steps.windows(2).all(|w| w[0] < w[1]));
        Ok(Self::from_steps(schedule, &steps))
    }

    fn from_steps(schedule: &NoiseSchedule, steps: &[usize]) -> Self {
        let n = steps.len();
        let mut betas = Vec::with_capacity(n);
        let mut alpha_bars = Vec::with_capacity(n);
        let mut alpha_bars_prev = Vec::with_capacity(n);
        for (i, &t) in steps.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            let ab_prev = if i == 0 {
                1.0
            } else {
                schedule.alpha_bar(steps[i - 1])
            };
            // Consecutive retained steps keep the exact base beta; gaps use
            // the alpha-bar ratio (identical algebra, fewer roundings).
            let beta = if i == 0 && t == 1 {
                schedule.beta(1)
            } else if i > 0 && steps[i - 1] + 1 == t {
                schedule.beta(t)
            } else {
                1.0 - ab / ab_prev
            };
            betas.push(beta);
            alpha_bars.push(ab);
            alpha_bars_prev.push(ab_prev);
        }
        let posterior_variance: Vec<f64> = (0..n)
            .map(|i| betas[i] * (1.0 - alpha_bars_prev[i]) / (1.0 - alpha_bars[i]))
            .collect();
        // The first entry is zero; clip its log to the next one the way the
        // usual implementations do.
        let posterior_log_variance_clipped: Vec<f64> = (0..n)
            .map(|i| {
                let v = if i == 0 && posterior_variance[0] <= 0.0 {
                    if n > 1 {
                        posterior_variance[1]
                    } else {
                        betas[0]
                    }
                } else {
                    posterior_variance[i]
                };
                v.max(1e-20).ln()
            })
            .collect();
        let posterior_mean_coef_x0: Vec<f64> = (0..n)
            .map(|i| betas[i] * alpha_bars_prev[i].sqrt() / (1.0 - alpha_bars[i]))
            .collect();
        let posterior_mean_coef_xt: Vec<f64> = (0..n)
            .map(|i| {
                (1.0 - alpha_bars_prev[i]) * (1.0 - betas[i]).sqrt() / (1.0 - alpha_bars[i])
            })
            .collect();
        Self {
            orig_t: steps.to_vec(),
            betas,
            alpha_bars,
            alpha_bars_prev,
            posterior_variance,
            posterior_log_variance_clipped,
            posterior_mean_coef_x0,
            posterior_mean_coef_xt,
        }
    }

    pub fn len(&self) -> usize {
        self.orig_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orig_t.is_empty()
    }
}

/// Anything that predicts `(eps_hat, v_hat)` from a noisy latent and the
/// original-schedule step index.
pub trait Denoiser {
    fn denoise(&self, x_t: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor)>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize]) -> Result<(Tensor, Tensor)>,
{
    fn denoise(&self, x_t: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor)> {
        self(x_t, t)
    }
}

/// Model mean and log-variance of `p(x_{i-1} | x_i)` at retained step `i`.
pub fn p_mean_logvar(
    sampling: &SamplingSchedule,
    i: usize,
    x_t: &Tensor,
    eps_hat: &Tensor,
    v_hat: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let ab = sampling.alpha_bars[i];
    // x0 prediction from the noise estimate.
    let x0 = ((x_t * (1.0 / ab.sqrt()))? - (eps_hat * (1.0 / ab - 1.0).sqrt())?)?;
    let mean = ((x0 * sampling.posterior_mean_coef_x0[i])?
        + (x_t * sampling.posterior_mean_coef_xt[i])?)?;
    // Variance interpolation between the posterior floor and beta, from the
    // [-1, 1] raw head output.
    let frac = ((v_hat + 1.0)? * 0.5)?;
    let log_beta = sampling.betas[i].max(1e-20).ln();
    let log_floor = sampling.posterior_log_variance_clipped[i];
    let logvar = ((frac.clone() * log_beta)? + (frac.affine(-1.0, 1.0)? * log_floor)?)?;
    Ok((mean, logvar))
}

/// Ancestral sampling over the retained steps, descending; the final step
/// adds no noise. Deterministic for a given RNG state.
pub fn sample(
    denoiser: &dyn Denoiser,
    sampling: &SamplingSchedule,
    shape: &[usize],
    dtype: candle_core::DType,
    dev: &candle_core::Device,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    let mut x = rng.normal(shape, dtype, dev)?;
    for i in (0..sampling.len()).rev() {
        let t = sampling.orig_t[i];
        let batch = shape[0];
        let ts = vec![t; batch];
        let (eps_hat, v_hat) = denoiser.denoise(&x, &ts)?;
        let (mean, logvar) = p_mean_logvar(sampling, i, &x, &eps_hat, &v_hat)?;
        if i == 0 {
            x = mean;
        } else {
            let z = rng.normal(shape, dtype, dev)?;
            x = (mean + ((logvar * 0.5)?.exp()? * z)?)?;
        }
        x = x.detach();
    }
    Ok(x)
}

/// KL between the forward posterior `q(x_{t-1} | x_t, x_0)` and the model
/// distribution, per batch element averaged over pixels. The mean path is
/// detached so this term trains only the variance head; with
/// `eps_hat == eps` and the variance head at the posterior point it
/// vanishes.
pub fn vlb_term(
    sampling: &SamplingSchedule,
    i: usize,
    x0: &Tensor,
    x_t: &Tensor,
    eps_hat: &Tensor,
    v_hat: &Tensor,
) -> Result<Tensor> {
    let true_mean = ((x0 * sampling.posterior_mean_coef_x0[i])?
        + (x_t * sampling.posterior_mean_coef_xt[i])?)?;
    let true_logvar = sampling.posterior_log_variance_clipped[i];
    let (mean, logvar) = p_mean_logvar(sampling, i, &x_t.detach(), &eps_hat.detach(), v_hat)?;
    // KL(N(mu_q, var_q) || N(mu_p, var_p)) elementwise.
    let var_ratio = (logvar.affine(-1.0, true_logvar)?).exp()?;
    let diff = (true_mean.detach() - mean)?;
    let mean_term = (diff.sqr()? * (logvar.clone().neg()?.exp()?))?;
    let kl = (((var_ratio + mean_term)? - 1.0)? + (logvar - true_logvar)?)?;
    Ok((kl.mean_all()? * 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default_1000();
        assert_eq!(s.n_steps(), 1000);
        assert!(s.beta(1) > 0.0 && s.beta(1000) < 1.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn q_sample_zero_noise_path() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(vec![2.0f64, -4.0], (2,), &dev()).unwrap();
        let eps = Tensor::zeros((2,), DType::F64, &dev()).unwrap();
        let xt = q_sample(&x0, 5, &eps, &s).unwrap().to_vec1::<f64>().unwrap();
        let scale = s.alpha_bar(5).sqrt();
        assert!((xt[0] - 2.0 * scale).abs() < 1e-12);
        assert!((xt[1] + 4.0 * scale).abs() < 1e-12);
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 11, &eps, &s).is_err());
    }

    #[test]
    fn q_sample_near_identity_at_first_step() {
        let s = NoiseSchedule::default_1000();
        let x0 = Tensor::from_vec(vec![1.0f64], (1,), &dev()).unwrap();
        let eps = Tensor::from_vec(vec![1.0f64], (1,), &dev()).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap().to_scalar::<f64>().unwrap();
        // |x_1 - x_0| <= (1 - sqrt(ab_1)) + sqrt(beta_1)|eps|
        assert!((xt - 1.0).abs() <= s.beta(1).sqrt() + 1e-4);
    }

    #[test]
    fn respacing_identity_equals_full() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let full = SamplingSchedule::full(&s);
        let respaced = SamplingSchedule::respaced(&s, 10).unwrap();
        assert_eq!(full.orig_t, respaced.orig_t);
        for i in 0..10 {
            assert_eq!(full.betas[i], respaced.betas[i], "beta {i}");
            assert_eq!(
                full.posterior_variance[i], respaced.posterior_variance[i],
                "posterior {i}"
            );
            assert_eq!(
                full.posterior_mean_coef_x0[i],
                respaced.posterior_mean_coef_x0[i]
            );
        }
        // And the full-schedule betas are the base betas exactly.
        for (i, t) in full.orig_t.iter().enumerate() {
            assert_eq!(full.betas[i], s.beta(*t));
        }
    }

    #[test]
    fn respaced_subset_is_sorted_unique_and_bounded() {
        let s = NoiseSchedule::default_1000();
        let r = SamplingSchedule::respaced(&s, 250).unwrap();
        assert_eq!(r.len(), 250);
        assert_eq!(*r.orig_t.first().unwrap(), 1);
        assert_eq!(*r.orig_t.last().unwrap(), 1000);
        assert!(r.orig_t.windows(2).all(|w| w[0] < w[1]));
        assert!(SamplingSchedule::respaced(&s, 1001).is_err());
    }

    #[test]
    fn q_sample_statistics_match_schedule() {
        // Monte-Carlo check of the mean and variance at one step.
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let x0 = Tensor::from_vec(vec![1.5f64], (1,), &dev()).unwrap();
        let n = 10_000;
        let mut rng = NoiseRng::new(33);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps = rng.normal(&[1], DType::F64, &dev()).unwrap();
            let xt = q_sample(&x0, t, &eps, &s).unwrap().to_scalar::<f64>().unwrap();
            sum += xt;
            sumsq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want_mean = s.alpha_bar(t).sqrt() * 1.5;
        let want_var = 1.0 - s.alpha_bar(t);
        // 4-sigma Monte-Carlo bands.
        let mean_band = 4.0 * want_var.sqrt() / (n as f64).sqrt();
        let var_band = 4.0 * want_var * (2.0 / n as f64).sqrt();
        assert!((mean - want_mean).abs() < mean_band, "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < var_band, "{var} vs {want_var}");
    }

    #[test]
    fn vlb_vanishes_at_the_posterior_point() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let sampling = SamplingSchedule::full(&s);
        let mut rng = NoiseRng::new(5);
        let x0 = rng.normal(&[2, 3], DType::F64, &dev()).unwrap();
        for i in [0usize, 7, 19] {
            let t = sampling.orig_t[i];
            let eps = rng.normal(&[2, 3], DType::F64, &dev()).unwrap();
            let x_t = q_sample(&x0, t, &eps, &s).unwrap();
            // Perfect noise prediction, variance head at the posterior
            // floor (raw -1 -> frac 0 -> log_floor).
            let v = Tensor::full(-1.0f64, (2, 3), &dev()).unwrap();
            let kl = vlb_term(&sampling, i, &x0, &x_t, &eps, &v)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(kl.abs() < 1e-9, "step {i}: kl {kl}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let sampling = SamplingSchedule::full(&s);
        let identity = |x_t: &Tensor, _t: &[usize]| -> Result<(Tensor, Tensor)> {
            Ok((x_t.zeros_like()?, x_t.zeros_like()?.affine(0.0, -1.0)?))
        };
        let run = |seed: u64| -> Vec<f64> {
            let mut rng = NoiseRng::new(seed);
            sample(&identity, &sampling, &[1, 4], DType::F64, &dev(), &mut rng)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
