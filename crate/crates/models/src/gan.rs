//! Adversarial pieces of the codec training: a small patch discriminator,
//! the hinge losses, the four-component generator objective and the
//! adaptive adversarial weight.

use candle_core::{Tensor};
use candle_nn::{Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::perceptual::FeatureDistance;
use crate::tensor::scalar_f64;

/// Patch-level convolutional discriminator; emits one score per receptive
/// patch, `[B, 1, h', w']`.
pub struct PatchDiscriminator {
    convs: Vec<candle_nn::Conv2d>,
    head: candle_nn::Conv2d,
}

impl PatchDiscriminator {
    pub fn new(vb: VarBuilder, in_channels: usize, base_width: usize) -> Result<Self> {
        let cfg = candle_nn::Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let widths = [base_width, base_width * 2, base_width * 4];
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            convs.push(candle_nn::conv2d(c_in, c_out, 4, cfg, vb.pp(format!("conv{i}")))?);
            c_in = c_out;
        }
        let head_cfg = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let head = candle_nn::conv2d(c_in, 1, 3, head_cfg, vb.pp("head"))?;
        Ok(Self { convs, head })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(self.head.forward(&h)?)
    }
}

/// Hinge discriminator loss `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn discriminator_loss(real_score: &Tensor, fake_score: &Tensor) -> Result<Tensor> {
    let real_term = real_score.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake_term = fake_score.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

/// Generator-side hinge objective on the discriminator's score of the
/// reconstruction: `-mean(score)`.
pub fn generator_adversarial(fake_score: &Tensor) -> Result<Tensor> {
    Ok(fake_score.mean_all()?.neg()?)
}

/// Closed-form KL of a diagonal Gaussian to the standard normal, averaged
/// over every element; non-negative.
pub fn gaussian_kl(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    // -0.5 * (1 + logvar - mean^2 - exp(logvar))
    let term = ((logvar + 1f64)? - mean.sqr()?)?;
    let term = (term - logvar.exp()?)?;
    Ok((term.mean_all()? * (-0.5))?)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenLossWeights {
    /// Perceptual-distance weight.
    pub lambda: f64,
    /// KL weight.
    pub gamma: f64,
    /// Adversarial weight; usually the adaptive ratio, zero during warm-up.
    pub psi: f64,
    pub disc_warmup_steps: u64,
}

impl Default for GenLossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 1e-6,
            psi: 0.0,
            disc_warmup_steps: 200,
        }
    }
}

impl GenLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 || !self.psi.is_finite() || self.psi < 0.0 {
            return Err(ModelError::Config(
                "generator loss weights must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Total plus the four components (by value) of the generator objective:
/// reconstruction MAE, perceptual distance, KL, adversarial.
pub struct GenLoss {
    pub total: Tensor,
    pub mae: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub adversarial: f64,
}

pub fn generator_loss(
    x: &Tensor,
    reconstruction: &Tensor,
    mean: &Tensor,
    logvar: &Tensor,
    fake_score: Option<&Tensor>,
    perceptual: &FeatureDistance,
    weights: &GenLossWeights,
) -> Result<GenLoss> {
    weights.validate()?;
    let mae = (reconstruction - x)?.abs()?.mean_all()?;
    let lpips = perceptual.distance(x, reconstruction)?;
    let kl = gaussian_kl(mean, logvar)?;
    let adv = match fake_score {
        Some(score) => generator_adversarial(score)?,
        None => Tensor::zeros((), x.dtype(), x.device())?,
    };

    let components = [
        ("mae", scalar_f64(&mae)?),
        ("perceptual", scalar_f64(&lpips)?),
        ("kl", scalar_f64(&kl)?),
        ("adversarial", scalar_f64(&adv)?),
    ];
    for (name, value) in &components {
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                stage: format!("generator loss component {name}"),
            });
        }
    }

    let total = (((&mae + (lpips * weights.lambda)?)? + (kl * weights.gamma)?)?
        + (adv * weights.psi)?)?;
    Ok(GenLoss {
        total,
        mae: components[0].1,
        perceptual: components[1].1,
        kl: components[2].1,
        adversarial: components[3].1,
    })
}

/// Adaptive adversarial weight: the ratio of the reconstruction and
/// adversarial gradient norms at the decoder's final layer, clamped to
/// `[0, 1e4]`, and zero while the discriminator warms up.
pub fn adaptive_psi(grad_norm_rec: f64, grad_norm_adv: f64, in_warmup: bool) -> f64 {
    if in_warmup {
        return 0.0;
    }
    (grad_norm_rec / (grad_norm_adv + 1e-6)).clamp(0.0, 1e4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use crate::tensor::NoiseRng;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn hinge_loss_values() {
        // real=+1, fake=-1 -> 0; real=0, fake=0 -> 2.
        let ones = Tensor::ones((2, 1, 3, 3), DType::F64, &dev()).unwrap();
        let neg = ones.neg().unwrap();
        let zeros = Tensor::zeros((2, 1, 3, 3), DType::F64, &dev()).unwrap();
        let v = discriminator_loss(&ones, &neg).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(v, 0.0);
        let v = discriminator_loss(&zeros, &zeros).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn hinge_gradients_match_finite_differences() {
        use candle_core::Var;
        let real = Var::from_tensor(
            &Tensor::from_vec(vec![0.3f64, 1.4, -0.2, 0.9], (4,), &dev()).unwrap(),
        )
        .unwrap();
        let fake = Var::from_tensor(
            &Tensor::from_vec(vec![-1.2f64, 0.1, 0.8, -0.5], (4,), &dev()).unwrap(),
        )
        .unwrap();
        let loss = discriminator_loss(real.as_tensor(), fake.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let g_real = grads.get(real.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let g_fake = grads.get(fake.as_tensor()).unwrap().to_vec1::<f64>().unwrap();

        let h = 1e-6;
        let eval = |r: &[f64], f: &[f64]| -> f64 {
            let rt = Tensor::from_vec(r.to_vec(), (4,), &dev()).unwrap();
            let ft = Tensor::from_vec(f.to_vec(), (4,), &dev()).unwrap();
            discriminator_loss(&rt, &ft).unwrap().to_scalar::<f64>().unwrap()
        };
        let rv = real.as_tensor().to_vec1::<f64>().unwrap();
        let fv = fake.as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..4 {
            let mut plus = rv.clone();
            plus[i] += h;
            let mut minus = rv.clone();
            minus[i] -= h;
            let fd = (eval(&plus, &fv) - eval(&minus, &fv)) / (2.0 * h);
            assert!((fd - g_real[i]).abs() < 1e-4, "real[{i}] {fd} vs {}", g_real[i]);
            let mut plus = fv.clone();
            plus[i] += h;
            let mut minus = fv.clone();
            minus[i] -= h;
            let fd = (eval(&rv, &plus) - eval(&rv, &minus)) / (2.0 * h);
            assert!((fd - g_fake[i]).abs() < 1e-4, "fake[{i}] {fd} vs {}", g_fake[i]);
        }
    }

    #[test]
    fn generator_loss_reduces_to_mae_with_zero_weights() {
        let mut rng = NoiseRng::new(3);
        let x = rng.normal(&[1, 2, 16, 16], DType::F64, &dev()).unwrap();
        let recon = rng.normal(&[1, 2, 16, 16], DType::F64, &dev()).unwrap();
        let mean = rng.normal(&[1, 4, 4, 4], DType::F64, &dev()).unwrap();
        let logvar = rng.normal(&[1, 4, 4, 4], DType::F64, &dev()).unwrap();
        let fd = FeatureDistance::seeded(2, 1, DType::F64, &dev()).unwrap();
        let weights = GenLossWeights {
            lambda: 0.0,
            gamma: 0.0,
            psi: 0.0,
            disc_warmup_steps: 0,
        };
        let loss = generator_loss(&x, &recon, &mean, &logvar, None, &fd, &weights).unwrap();
        let mae = (&recon - &x)
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((loss.total.to_scalar::<f64>().unwrap() - mae).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_kl_is_zero_and_kl_is_nonnegative() {
        let zeros = Tensor::zeros((1, 4, 4, 4), DType::F64, &dev()).unwrap();
        let kl = gaussian_kl(&zeros, &zeros).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(kl, 0.0);
        let mut rng = NoiseRng::new(4);
        for i in 0..10 {
            let mean = rng.normal(&[1, 2, 3, 3], DType::F64, &dev()).unwrap();
            let logvar = rng.normal(&[1, 2, 3, 3], DType::F64, &dev()).unwrap();
            let kl = gaussian_kl(&mean, &logvar).unwrap().to_scalar::<f64>().unwrap();
            assert!(kl >= 0.0, "trial {i}: {kl}");
        }
    }

    #[test]
    fn hand_computed_two_by_two_case() {
        // x = [[0,1],[1,0]], recon = [[0,1],[1,1]] -> MAE 0.25; total equals
        // the weighted component sum.
        let x = Tensor::from_vec(vec![0f64, 1.0, 1.0, 0.0], (1, 1, 2, 2), &dev()).unwrap();
        let recon = Tensor::from_vec(vec![0f64, 1.0, 1.0, 1.0], (1, 1, 2, 2), &dev()).unwrap();
        let mean = Tensor::from_vec(vec![0.5f64, -0.5], (1, 2, 1, 1), &dev()).unwrap();
        let logvar = Tensor::from_vec(vec![0.1f64, -0.2], (1, 2, 1, 1), &dev()).unwrap();
        let score = Tensor::from_vec(vec![0.3f64, -0.1], (1, 1, 2, 1), &dev()).unwrap();
        let fd = FeatureDistance::seeded(1, 2, DType::F64, &dev()).unwrap();
        let weights = GenLossWeights {
            lambda: 0.1,
            gamma: 1e-6,
            psi: 0.7,
            disc_warmup_steps: 0,
        };
        let loss =
            generator_loss(&x, &recon, &mean, &logvar, Some(&score), &fd, &weights).unwrap();
        assert!((loss.mae - 0.25).abs() < 1e-12);
        let total = loss.total.to_scalar::<f64>().unwrap();
        let sum = loss.mae
            + weights.lambda * loss.perceptual
            + weights.gamma * loss.kl
            + weights.psi * loss.adversarial;
        assert!((total - sum).abs() < 1e-10, "{total} vs {sum}");
    }

    #[test]
    fn adaptive_psi_rules() {
        assert!((adaptive_psi(2.0, 2.0, false) - 1.0).abs() < 1e-5);
        assert_eq!(adaptive_psi(3.0, 0.0, false), 1e4.min(3.0 / 1e-6));
        assert_eq!(adaptive_psi(5.0, 1.0, true), 0.0);
        assert_eq!(adaptive_psi(0.0, 0.0, false), 0.0);
    }
}
