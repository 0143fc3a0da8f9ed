//! Transformer denoiser over latent patches with adaptive layer-norm
//! conditioning on the noise step. The noisy target latent is concatenated
//! channelwise with the conditioning latents; the head emits a noise
//! estimate and a raw variance-interpolation map, both latent-shaped.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{layer_norm, LayerNorm, LayerNormConfig, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::fingerprint;
use crate::embed::{Mlp, StepEmbed};
use crate::error::{ModelError, Result};
use crate::tensor::{deterministic_init, parse_dtype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    /// Square patch edge over the latent grid.
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Channels of the target latent (the denoised quantity).
    pub latent_channels: usize,
    /// Channels of the conditioning stack concatenated onto the target.
    pub cond_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub mlp_ratio: usize,
    pub dtype: String,
}

impl DiTConfig {
    /// Published full-scale setting: patch 2, width 192, 12 blocks over
    /// 32x32 latents with the three conditioning latents concatenated.
    pub fn full_scale() -> Self {
        Self {
            patch: 2,
            width: 192,
            depth: 12,
            heads: 6,
            latent_channels: 16,
            cond_channels: 256 + 16 + 16,
            latent_h: 32,
            latent_w: 32,
            mlp_ratio: 4,
            dtype: "f32".into(),
        }
    }

    pub fn toy(latent_channels: usize, cond_channels: usize, latent_hw: usize) -> Self {
        Self {
            patch: 2,
            width: 64,
            depth: 4,
            heads: 4,
            latent_channels,
            cond_channels,
            latent_h: latent_hw,
            latent_w: latent_hw,
            mlp_ratio: 2,
            dtype: "f32".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_h % self.patch != 0 || self.latent_w % self.patch != 0 {
            return Err(ModelError::Config(
                "latent dims must be divisible by the patch size".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(ModelError::Config("width not divisible by heads".into()));
        }
        parse_dtype(&self.dtype)?;
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        (self.latent_h / self.patch) * (self.latent_w / self.patch)
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }
}

struct DiTBlock {
    norm1: LayerNorm,
    qkv: candle_nn::Linear,
    proj: candle_nn::Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    /// Emits shift/scale/gate pairs for both sublayers; zero-initialized so
    /// blocks start as identities.
    modulation_zero_init: candle_nn::Linear,
    heads: usize,
    head_dim: usize,
}

impl DiTBlock {
    fn new(vb: VarBuilder, cfg: &DiTConfig) -> Result<Self> {
        let w = cfg.width;
        let ln = LayerNormConfig {
            affine: false,
            ..Default::default()
        };
        Ok(Self {
            norm1: layer_norm(w, ln, vb.pp("norm1"))?,
            qkv: candle_nn::linear(w, 3 * w, vb.pp("qkv"))?,
            proj: candle_nn::linear(w, w, vb.pp("proj"))?,
            norm2: layer_norm(w, ln, vb.pp("norm2"))?,
            mlp: Mlp::new(vb.pp("mlp"), w, w * cfg.mlp_ratio, w)?,
            modulation_zero_init: candle_nn::linear(w, 6 * w, vb.pp("modulation_zero_init"))?,
            heads: cfg.heads,
            head_dim: w / cfg.heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let qkv = self.qkv.forward(x)?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((b, t, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .force_contiguous()?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = (self.head_dim as f64).powf(-0.5);
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = probs.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        Ok(self.proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let w = x.dim(2)?;
        let m = self.modulation_zero_init.forward(&t_emb.silu()?)?; // [B, 6W]
        let chunk = |i: usize| -> Result<Tensor> {
            Ok(m.narrow(1, i * w, w)?.unsqueeze(1)?) // [B, 1, W]
        };
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let modulate = |x: &Tensor, shift: &Tensor, scale: &Tensor| -> Result<Tensor> {
            Ok(x
                .broadcast_mul(&(scale + 1.0)?)?
                .broadcast_add(shift)?)
        };

        let h = modulate(&self.norm1.forward(x)?, &shift1, &scale1)?;
        let x = (x + self.attention(&h)?.broadcast_mul(&gate1)?)?;
        let h = modulate(&self.norm2.forward(&x)?, &shift2, &scale2)?;
        let x = (&x + self.mlp.forward(&h)?.broadcast_mul(&gate2)?)?;
        Ok(x)
    }
}

pub struct DiT {
    cfg: DiTConfig,
    patch_proj: candle_nn::Linear,
    pos_embed: Tensor,
    step_embed: StepEmbed,
    blocks: Vec<DiTBlock>,
    final_norm: LayerNorm,
    final_modulation_zero_init: candle_nn::Linear,
    head_zero_init: candle_nn::Linear,
    device: Device,
    dtype: DType,
}

impl DiT {
    pub fn new(cfg: &DiTConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.dtype()?;
        let dev = vb.device().clone();
        let in_per_patch = (cfg.latent_channels + cfg.cond_channels) * cfg.patch * cfg.patch;
        let out_per_patch = 2 * cfg.latent_channels * cfg.patch * cfg.patch;
        let ln = LayerNormConfig {
            affine: false,
            ..Default::default()
        };
        let blocks = (0..cfg.depth)
            .map(|i| DiTBlock::new(vb.pp(format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj: candle_nn::linear(in_per_patch, cfg.width, vb.pp("patch_proj"))?,
            pos_embed: sincos_2d(cfg.latent_h / cfg.patch, cfg.latent_w / cfg.patch, cfg.width, dtype, &dev)?,
            step_embed: StepEmbed::new(vb.pp("step_embed"), cfg.width)?,
            blocks,
            final_norm: layer_norm(cfg.width, ln, vb.pp("final_norm"))?,
            final_modulation_zero_init: candle_nn::linear(
                cfg.width,
                2 * cfg.width,
                vb.pp("final_modulation_zero_init"),
            )?,
            head_zero_init: candle_nn::linear(cfg.width, out_per_patch, vb.pp("head_zero_init"))?,
            device: dev,
            dtype,
        })
    }

    pub fn seeded(cfg: &DiTConfig, seed: u64) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, cfg.dtype()?, &Device::Cpu);
        let model = Self::new(cfg, vb)?;
        deterministic_init(&varmap, seed)?;
        Ok((model, varmap))
    }

    pub fn config(&self) -> &DiTConfig {
        &self.cfg
    }

    /// Patchify `[B, C, H, W] -> [B, T, C*p*p]`.
    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.cfg.patch;
        let (b, c, h, w) = x.dims4()?;
        let x = x
            .reshape(vec![b, c, h / p, p, w / p, p])?
            .permute(vec![0usize, 2, 4, 1, 3, 5])?
            .contiguous()?;
        Ok(x.reshape((b, (h / p) * (w / p), c * p * p))?)
    }

    /// Inverse of [`DiT::patchify`] for `ch` channels.
    fn unpatchify(&self, tokens: &Tensor, ch: usize) -> Result<Tensor> {
        let p = self.cfg.patch;
        let (b, _t, _d) = tokens.dims3()?;
        let (gh, gw) = (self.cfg.latent_h / p, self.cfg.latent_w / p);
        let x = tokens
            .reshape(vec![b, gh, gw, ch, p, p])?
            .permute(vec![0usize, 3, 1, 4, 2, 5])?
            .contiguous()?;
        Ok(x.reshape((b, ch, gh * p, gw * p))?)
    }

    /// `x_t`: `[B, latent_c, h, w]`; `cond`: `[B, cond_c, h, w]`;
    /// `steps`: original-schedule noise step per batch element.
    /// Returns `(eps_hat, v_hat)`, both latent-shaped; `v_hat` is squashed
    /// to `(-1, 1)`.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<(Tensor, Tensor)> {
        let cfg = &self.cfg;
        let (b, c, h, w) = x_t.dims4()?;
        if (c, h, w) != (cfg.latent_channels, cfg.latent_h, cfg.latent_w) {
            return Err(ModelError::Shape {
                context: "denoiser x_t".into(),
                expected: format!(
                    "[_, {}, {}, {}]",
                    cfg.latent_channels, cfg.latent_h, cfg.latent_w
                ),
                got: format!("{:?}", x_t.dims()),
            });
        }
        let (cb, cc, chh, cww) = cond.dims4()?;
        if (cb, cc, chh, cww) != (b, cfg.cond_channels, h, w) {
            return Err(ModelError::Shape {
                context: "denoiser conditioning".into(),
                expected: format!("[{b}, {}, {h}, {w}]", cfg.cond_channels),
                got: format!("{:?}", cond.dims()),
            });
        }
        if steps.len() != b {
            return Err(ModelError::InvalidArgument(format!(
                "{} steps for batch {b}",
                steps.len()
            )));
        }
        let stacked = Tensor::cat(&[x_t, cond], 1)?;
        let tokens = self.patchify(&stacked)?;
        let mut x = self
            .patch_proj
            .forward(&tokens)?
            .broadcast_add(&self.pos_embed.unsqueeze(0)?)?;
        let t_emb = self.step_embed.forward(steps, self.dtype, &self.device)?;
        for block in &self.blocks {
            x = block.forward(&x, &t_emb)?;
        }
        let m = self
            .final_modulation_zero_init
            .forward(&t_emb.silu()?)?;
        let wdt = cfg.width;
        let shift = m.narrow(1, 0, wdt)?.unsqueeze(1)?;
        let scale = m.narrow(1, wdt, wdt)?.unsqueeze(1)?;
        let x = self
            .final_norm
            .forward(&x)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let out = self.head_zero_init.forward(&x)?; // [B, T, 2*lc*p*p]
        let both = self.unpatchify(&out, 2 * cfg.latent_channels)?;
        let eps_hat = both.narrow(1, 0, cfg.latent_channels)?.contiguous()?;
        let v_raw = both
            .narrow(1, cfg.latent_channels, cfg.latent_channels)?
            .contiguous()?;
        Ok((eps_hat, v_raw.tanh()?))
    }
}

/// Fixed 2-D sine-cosine position embedding `[T, width]`.
fn sincos_2d(gh: usize, gw: usize, width: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let quarter = width / 4;
    let mut data = Vec::with_capacity(gh * gw * width);
    for i in 0..gh {
        for j in 0..gw {
            let mut row = Vec::with_capacity(width);
            for axis_pos in [i as f64, j as f64] {
                for k in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(k as f64 / quarter.max(1) as f64);
                    row.push((axis_pos * omega).sin());
                }
                for k in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(k as f64 / quarter.max(1) as f64);
                    row.push((axis_pos * omega).cos());
                }
            }
            row.resize(width, 0.0);
            data.extend(row);
        }
    }
    Ok(Tensor::from_vec(data, (gh * gw, width), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NoiseRng;

    #[test]
    fn output_shapes_match_latent() {
        let cfg = DiTConfig::toy(4, 6, 8);
        let (model, _vm) = DiT::seeded(&cfg, 7).unwrap();
        let mut rng = NoiseRng::new(1);
        let x = rng.normal(&[3, 4, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let cond = rng.normal(&[3, 6, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let (eps, v) = model.forward(&x, &cond, &[1, 500, 1000]).unwrap();
        assert_eq!(eps.dims(), &[3, 4, 8, 8]);
        assert_eq!(v.dims(), &[3, 4, 8, 8]);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = DiTConfig::toy(2, 3, 8);
        let (model, _vm) = DiT::seeded(&cfg, 9).unwrap();
        let mut rng = NoiseRng::new(2);
        let x = rng.normal(&[2, 2, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let cond = rng.normal(&[2, 3, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let (eps, _) = model.forward(&x, &cond, &[3, 40]).unwrap();

        let flip = Tensor::from_vec(vec![1u32, 0], (2,), &Device::Cpu).unwrap();
        let xf = x.index_select(&flip, 0).unwrap();
        let cf = cond.index_select(&flip, 0).unwrap();
        let (eps_f, _) = model.forward(&xf, &cf, &[40, 3]).unwrap();
        let diff = (eps.index_select(&flip, 0).unwrap() - eps_f)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn patchify_round_trip() {
        let cfg = DiTConfig::toy(3, 0, 8);
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let mut cfg2 = cfg.clone();
        cfg2.cond_channels = 0;
        let model = DiT::new(&cfg2, vb).unwrap();
        let mut rng = NoiseRng::new(3);
        let x = rng.normal(&[2, 6, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let tokens = model.patchify(&x).unwrap();
        assert_eq!(tokens.dims(), &[2, 16, 6 * 4]);
        let back = model.unpatchify(&tokens, 6).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }
}
