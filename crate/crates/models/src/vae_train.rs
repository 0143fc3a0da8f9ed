//! Adversarially augmented codec training: alternating discriminator and
//! generator updates with the adaptive adversarial weight.

use candle_core::Tensor;
use candle_nn::{VarBuilder, VarMap};

use crate::error::{ModelError, Result};
use crate::gan::{
    adaptive_psi, discriminator_loss, generator_adversarial, generator_loss, GenLoss,
    GenLossWeights, PatchDiscriminator,
};
use crate::optim::{named_vars, AdamW, AdamWConfig};
use crate::perceptual::FeatureDistance;
use crate::tensor::{deterministic_init, scalar_f64, NoiseRng};
use crate::vae::{CodecSpec, Vae};

#[derive(Debug, Clone)]
pub struct VaeTrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: GenLossWeights,
    pub disc_base_width: usize,
    pub seed: u64,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-5,
            weights: GenLossWeights::default(),
            disc_base_width: 16,
            seed: 0,
        }
    }
}

pub struct VaeStepStats {
    pub generator_total: f64,
    pub mae: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub psi: f64,
}

pub struct VaeTrainer {
    pub vae: Vae,
    pub vae_vars: VarMap,
    disc: PatchDiscriminator,
    disc_vars: VarMap,
    perceptual: FeatureDistance,
    adam_g: AdamW,
    adam_d: AdamW,
    opts: VaeTrainOptions,
    rng: NoiseRng,
    step: u64,
}

impl VaeTrainer {
    pub fn new(spec: &CodecSpec, opts: VaeTrainOptions) -> Result<Self> {
        let (vae, vae_vars) = Vae::seeded(spec, opts.seed)?;
        let disc_vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&disc_vars, vae.dtype(), vae.device());
        let disc = PatchDiscriminator::new(vb, spec.in_channels, opts.disc_base_width)?;
        deterministic_init(&disc_vars, opts.seed ^ 0x9e37_79b9)?;
        let perceptual =
            FeatureDistance::seeded(spec.in_channels, opts.seed ^ 0x51_7cc1, vae.dtype(), vae.device())?;
        let adam_g = AdamW::new(AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..Default::default()
        });
        let adam_d = AdamW::new(AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..Default::default()
        });
        let rng = NoiseRng::for_stream(opts.seed, "vae_train", 0);
        Ok(Self {
            vae,
            vae_vars,
            disc,
            disc_vars,
            perceptual,
            adam_g,
            adam_d,
            opts,
            rng,
            step: 0,
        })
    }

    pub fn from_parts(vae: Vae, vae_vars: VarMap, opts: VaeTrainOptions) -> Result<Self> {
        let spec = vae.spec().clone();
        let disc_vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&disc_vars, vae.dtype(), vae.device());
        let disc = PatchDiscriminator::new(vb, spec.in_channels, opts.disc_base_width)?;
        deterministic_init(&disc_vars, opts.seed ^ 0x9e37_79b9)?;
        let perceptual =
            FeatureDistance::seeded(spec.in_channels, opts.seed ^ 0x51_7cc1, vae.dtype(), vae.device())?;
        let adam_g = AdamW::new(AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..Default::default()
        });
        let adam_d = adam_g_clone(&opts);
        let rng = NoiseRng::for_stream(opts.seed, "vae_train", 0);
        Ok(Self {
            vae,
            vae_vars,
            disc,
            disc_vars,
            perceptual,
            adam_g,
            adam_d,
            opts,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn generator_steps(&self) -> u64 {
        self.adam_g.step_count()
    }

    /// One alternating update: discriminator first on detached
    /// reconstructions, then the generator with the adaptive weight.
    pub fn train_step(&mut self, x: &Tensor) -> Result<VaeStepStats> {
        self.step += 1;
        let in_warmup = self.step <= self.opts.weights.disc_warmup_steps;

        let mean_dims = {
            let spec = self.vae.spec();
            vec![
                x.dim(0)?,
                spec.latent_channels,
                spec.latent_h,
                spec.latent_w,
            ]
        };
        let eps = self.rng.normal(&mean_dims, self.vae.dtype(), self.vae.device())?;
        let block = self.vae.encode(x, Some(eps))?;
        let recon = self.vae.decode(&block.sample)?;

        // Discriminator update on detached reconstructions.
        let d_loss_value = {
            let real = self.disc.forward(x)?;
            let fake = self.disc.forward(&recon.detach())?;
            let d_loss = discriminator_loss(&real, &fake)?;
            let value = scalar_f64(&d_loss)?;
            if !value.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    step: self.step,
                    details: format!("discriminator loss = {value}"),
                });
            }
            let grads = d_loss.backward()?;
            self.adam_d.step(&named_vars(&self.disc_vars), &grads)?;
            value
        };

        // Adaptive adversarial weight from gradient norms at the decoder's
        // final layer.
        let psi = if in_warmup {
            0.0
        } else {
            let last = self.last_decoder_var()?;
            let rec_proxy = {
                let mae = (recon.clone() - x)?.abs()?.mean_all()?;
                let lpips = self.perceptual.distance(x, &recon)?;
                (mae + (lpips * self.opts.weights.lambda)?)?
            };
            let g_rec = grad_norm(&rec_proxy, &last)?;
            let adv = generator_adversarial(&self.disc.forward(&recon)?)?;
            let g_adv = grad_norm(&adv, &last)?;
            adaptive_psi(g_rec, g_adv, false)
        };

        let mut weights = self.opts.weights;
        weights.psi = psi;
        let fake_score = if in_warmup {
            None
        } else {
            Some(self.disc.forward(&recon)?)
        };
        let GenLoss {
            total,
            mae,
            perceptual,
            kl,
            adversarial,
        } = generator_loss(
            x,
            &recon,
            &block.mean,
            &block.logvar,
            fake_score.as_ref(),
            &self.perceptual,
            &weights,
        )?;
        let total_value = scalar_f64(&total)?;
        if !total_value.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: self.step,
                details: format!("generator loss = {total_value}"),
            });
        }
        let grads = total.backward()?;
        self.adam_g.step(&named_vars(&self.vae_vars), &grads)?;

        Ok(VaeStepStats {
            generator_total: total_value,
            mae,
            perceptual,
            kl,
            adversarial,
            discriminator: d_loss_value,
            psi,
        })
    }

    fn last_decoder_var(&self) -> Result<candle_core::Var> {
        let name = Vae::last_decoder_layer_name();
        let data = self.vae_vars.data().lock().unwrap();
        data.get(name)
            .cloned()
            .ok_or_else(|| ModelError::Config(format!("missing decoder layer {name}")))
    }
}

fn adam_g_clone(opts: &VaeTrainOptions) -> AdamW {
    AdamW::new(AdamWConfig {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        ..Default::default()
    })
}

/// L2 norm of `d loss / d var`.
fn grad_norm(loss: &Tensor, var: &candle_core::Var) -> Result<f64> {
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(scalar_f64(&g.sqr()?.sum_all()?)?.sqrt()),
        None => Ok(0.0),
    }
}
