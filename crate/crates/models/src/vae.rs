//! Variational codecs compressing fields to fixed-size latent blocks.
//!
//! Each codec carries a fixed (non-learned) bilinear resampling adapter
//! expressed as matrix operators into a power-of-two working size, followed
//! by a stride-2 convolution stack; the decoder mirrors it. This keeps the
//! full path differentiable while hitting the exact published latent shapes
//! (181x281 and 900x1400 inputs both land on 32x32 latents).

use candle_core::{DType, Device, Tensor};
use candle_nn::{Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::fingerprint;
use crate::error::{ModelError, Result};
use crate::tensor::{deterministic_init, interp_matrix, parse_dtype, resample_hw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecId {
    /// Non-precipitation state channels.
    Vx,
    /// Coarse total precipitation.
    Vp,
    /// High-resolution precipitation analysis.
    Vcmpas,
}

impl CodecId {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Vx => "v_x",
            Self::Vp => "v_p",
            Self::Vcmpas => "v_cmpas",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v_x" | "vx" => Ok(Self::Vx),
            "v_p" | "vp" => Ok(Self::Vp),
            "v_cmpas" | "vcmpas" => Ok(Self::Vcmpas),
            other => Err(ModelError::Config(format!("unknown codec id {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub id: CodecId,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Width of the first convolution stage; doubles each downsampling.
    pub base_width: usize,
    /// Number of stride-2 stages; the adapter works at `latent_hw << n_down`.
    pub n_down: usize,
    pub dtype: String,
}

impl CodecSpec {
    /// 69x181x281 -> 256x32x32.
    pub fn full_vx() -> Self {
        Self {
            id: CodecId::Vx,
            in_channels: 69,
            in_h: 181,
            in_w: 281,
            latent_channels: 256,
            latent_h: 32,
            latent_w: 32,
            base_width: 64,
            n_down: 3,
            dtype: "f32".into(),
        }
    }

    /// 1x181x281 -> 16x32x32.
    pub fn full_vp() -> Self {
        Self {
            id: CodecId::Vp,
            latent_channels: 16,
            in_channels: 1,
            ..Self::full_vx()
        }
    }

    /// 1x900x1400 -> 16x32x32.
    pub fn full_vcmpas() -> Self {
        Self {
            id: CodecId::Vcmpas,
            in_channels: 1,
            in_h: 900,
            in_w: 1400,
            latent_channels: 16,
            latent_h: 32,
            latent_w: 32,
            base_width: 64,
            n_down: 3,
            dtype: "f32".into(),
        }
    }

    pub fn toy(id: CodecId, in_channels: usize, in_h: usize, in_w: usize) -> Self {
        Self {
            id,
            in_channels,
            in_h,
            in_w,
            latent_channels: if id == CodecId::Vx { 16 } else { 4 },
            latent_h: 8,
            latent_w: 8,
            base_width: 16,
            n_down: 2,
            dtype: "f32".into(),
        }
    }

    pub fn adapter_hw(&self) -> (usize, usize) {
        (self.latent_h << self.n_down, self.latent_w << self.n_down)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width % 8 != 0 && self.base_width < 8 {
            return Err(ModelError::Config("base_width must be at least 8".into()));
        }
        if self.n_down == 0 {
            return Err(ModelError::Config("n_down must be >= 1".into()));
        }
        parse_dtype(&self.dtype)?;
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }
}

/// Encoder output: posterior mean/log-variance, the reparameterized sample
/// and the noise that produced it, tagged with the codec identity.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
    pub eps: Tensor,
    pub codec_id: CodecId,
}

fn group_norm(vb: VarBuilder, channels: usize) -> Result<candle_nn::GroupNorm> {
    let groups = if channels % 8 == 0 { 8 } else { 1 };
    Ok(candle_nn::group_norm(groups, channels, 1e-6, vb)?)
}

struct ConvBlock {
    norm: candle_nn::GroupNorm,
    conv: candle_nn::Conv2d,
}

impl ConvBlock {
    fn down(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let cfg = candle_nn::Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            norm: group_norm(vb.pp("norm"), c_in)?,
            conv: candle_nn::conv2d(c_in, c_out, 3, cfg, vb.pp("conv"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(&self.norm.forward(x)?.silu()?)?)
    }
}

struct UpBlock {
    norm: candle_nn::GroupNorm,
    conv: candle_nn::ConvTranspose2d,
}

impl UpBlock {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let cfg = candle_nn::ConvTranspose2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            norm: group_norm(vb.pp("norm"), c_in)?,
            conv: candle_nn::conv_transpose2d(c_in, c_out, 4, cfg, vb.pp("conv"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(&self.norm.forward(x)?.silu()?)?)
    }
}

pub struct Vae {
    spec: CodecSpec,
    enc_in: Tensor,  // row operator in_h -> adapter_h
    enc_in_w: Tensor,
    dec_out: Tensor, // row operator adapter_h -> in_h
    dec_out_w: Tensor,
    enc_stem: candle_nn::Conv2d,
    enc_blocks: Vec<ConvBlock>,
    enc_norm: candle_nn::GroupNorm,
    enc_head: candle_nn::Conv2d,
    dec_stem: candle_nn::Conv2d,
    dec_blocks: Vec<UpBlock>,
    dec_norm: candle_nn::GroupNorm,
    dec_head: candle_nn::Conv2d,
    device: Device,
    dtype: DType,
}

impl Vae {
    pub fn new(spec: &CodecSpec, vb: VarBuilder) -> Result<Self> {
        spec.validate()?;
        let dtype = spec.dtype()?;
        let dev = vb.device().clone();
        let (ah, aw) = spec.adapter_hw();
        let enc_in = interp_matrix(spec.in_h, ah, dtype, &dev)?;
        let enc_in_w = interp_matrix(spec.in_w, aw, dtype, &dev)?;
        let dec_out = interp_matrix(ah, spec.in_h, dtype, &dev)?;
        let dec_out_w = interp_matrix(aw, spec.in_w, dtype, &dev)?;

        let w = spec.base_width;
        let stem_cfg = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let enc_stem = candle_nn::conv2d(spec.in_channels, w, 3, stem_cfg, vb.pp("enc_stem"))?;
        let mut enc_blocks = Vec::new();
        let mut width = w;
        for i in 0..spec.n_down {
            let next = (width * 2).min(4 * w);
            enc_blocks.push(ConvBlock::down(vb.pp(format!("enc_down{i}")), width, next)?);
            width = next;
        }
        let enc_norm = group_norm(vb.pp("enc_norm"), width)?;
        let enc_head = candle_nn::conv2d(
            width,
            2 * spec.latent_channels,
            3,
            stem_cfg,
            vb.pp("enc_head"),
        )?;

        let dec_stem = candle_nn::conv2d(spec.latent_channels, width, 3, stem_cfg, vb.pp("dec_stem"))?;
        let mut dec_blocks = Vec::new();
        for i in 0..spec.n_down {
            let next = if i + 1 == spec.n_down {
                w
            } else {
                (width / 2).max(w)
            };
            dec_blocks.push(UpBlock::new(vb.pp(format!("dec_up{i}")), width, next)?);
            width = next;
        }
        let dec_norm = group_norm(vb.pp("dec_norm"), width)?;
        let dec_head = candle_nn::conv2d(width, spec.in_channels, 3, stem_cfg, vb.pp("dec_head"))?;

        Ok(Self {
            spec: spec.clone(),
            enc_in,
            enc_in_w,
            dec_out,
            dec_out_w,
            enc_stem,
            enc_blocks,
            enc_norm,
            enc_head,
            dec_stem,
            dec_blocks,
            dec_norm,
            dec_head,
            device: dev,
            dtype,
        })
    }

    pub fn seeded(spec: &CodecSpec, seed: u64) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, spec.dtype()?, &Device::Cpu);
        let model = Self::new(spec, vb)?;
        deterministic_init(&varmap, seed)?;
        Ok((model, varmap))
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_b, c, h, w) = x.dims4()?;
        if (c, h, w) != (self.spec.in_channels, self.spec.in_h, self.spec.in_w) {
            return Err(ModelError::Shape {
                context: format!("{} encode", self.spec.id.as_str()),
                expected: format!(
                    "[_, {}, {}, {}]",
                    self.spec.in_channels, self.spec.in_h, self.spec.in_w
                ),
                got: format!("{:?}", x.dims()),
            });
        }
        Ok(())
    }

    /// Posterior parameters and a reparameterized sample. `eps` defaults to
    /// zeros, so unseeded encoding is the posterior mean.
    pub fn encode(&self, x: &Tensor, eps: Option<Tensor>) -> Result<LatentBlock> {
        self.check_input(x)?;
        let x = resample_hw(x, &self.enc_in, &self.enc_in_w)?;
        let mut h = self.enc_stem.forward(&x)?;
        for block in &self.enc_blocks {
            h = block.forward(&h)?;
        }
        let h = self.enc_head.forward(&self.enc_norm.forward(&h)?.silu()?)?;
        let mean = h.narrow(1, 0, self.spec.latent_channels)?.contiguous()?;
        let logvar = h
            .narrow(1, self.spec.latent_channels, self.spec.latent_channels)?
            .clamp(-30.0, 20.0)?
            .contiguous()?;
        let eps = match eps {
            Some(e) => {
                if e.dims() != mean.dims() {
                    return Err(ModelError::Shape {
                        context: "encode eps".into(),
                        expected: format!("{:?}", mean.dims()),
                        got: format!("{:?}", e.dims()),
                    });
                }
                e
            }
            None => Tensor::zeros(mean.dims(), self.dtype, &self.device)?,
        };
        let sample = (&mean + ((logvar.clone() * 0.5)?.exp()? * &eps)?)?;
        Ok(LatentBlock {
            mean,
            logvar,
            sample,
            eps,
            codec_id: self.spec.id,
        })
    }

    /// Decodes a raw latent tensor `[B, latent_c, latent_h, latent_w]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (_b, c, h, w) = latent.dims4()?;
        if (c, h, w) != (self.spec.latent_channels, self.spec.latent_h, self.spec.latent_w) {
            return Err(ModelError::Shape {
                context: format!("{} decode", self.spec.id.as_str()),
                expected: format!(
                    "[_, {}, {}, {}]",
                    self.spec.latent_channels, self.spec.latent_h, self.spec.latent_w
                ),
                got: format!("{:?}", latent.dims()),
            });
        }
        let mut x = self.dec_stem.forward(latent)?;
        for block in &self.dec_blocks {
            x = block.forward(&x)?;
        }
        let x = self.dec_head.forward(&self.dec_norm.forward(&x)?.silu()?)?;
        resample_hw(&x, &self.dec_out, &self.dec_out_w)
    }

    /// Decodes a tagged block, refusing a mismatched codec identity.
    pub fn decode_block(&self, block: &LatentBlock) -> Result<Tensor> {
        if block.codec_id != self.spec.id {
            return Err(ModelError::InvalidArgument(format!(
                "latent tagged {} fed to codec {}",
                block.codec_id.as_str(),
                self.spec.id.as_str()
            )));
        }
        self.decode(&block.sample)
    }

    /// Name of the decoder layer whose weight gradient norms drive the
    /// adaptive adversarial weight.
    pub fn last_decoder_layer_name() -> &'static str {
        "dec_head.weight"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NoiseRng;

    #[test]
    fn toy_codec_shape_contract() {
        let spec = CodecSpec::toy(CodecId::Vp, 1, 18, 32);
        let (vae, _vm) = Vae::seeded(&spec, 3).unwrap();
        let mut rng = NoiseRng::new(1);
        let x = rng.normal(&[2, 1, 18, 32], DType::F32, &Device::Cpu).unwrap();
        let block = vae.encode(&x, None).unwrap();
        assert_eq!(block.mean.dims(), &[2, 4, 8, 8]);
        let y = vae.decode_block(&block).unwrap();
        assert_eq!(y.dims(), &[2, 1, 18, 32]);
    }

    #[test]
    fn wrong_codec_id_refused() {
        let spec_p = CodecSpec::toy(CodecId::Vp, 1, 16, 16);
        let spec_c = CodecSpec::toy(CodecId::Vcmpas, 1, 16, 16);
        let (vp, _a) = Vae::seeded(&spec_p, 3).unwrap();
        let (vc, _b) = Vae::seeded(&spec_c, 4).unwrap();
        let mut rng = NoiseRng::new(1);
        let x = rng.normal(&[1, 1, 16, 16], DType::F32, &Device::Cpu).unwrap();
        let block = vp.encode(&x, None).unwrap();
        assert!(vc.decode_block(&block).is_err());
        assert!(vp.decode_block(&block).is_ok());
    }

    #[test]
    fn reparameterization_identity() {
        let spec = CodecSpec::toy(CodecId::Vp, 1, 16, 16);
        let (vae, _vm) = Vae::seeded(&spec, 9).unwrap();
        let mut rng = NoiseRng::new(2);
        let x = rng.normal(&[1, 1, 16, 16], DType::F32, &Device::Cpu).unwrap();
        let eps = rng.normal(&[1, 4, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let block = vae.encode(&x, Some(eps.clone())).unwrap();
        // sample == mean + exp(logvar/2) * eps
        let expect = (&block.mean
            + ((block.logvar.clone() * 0.5).unwrap().exp().unwrap() * &eps).unwrap())
        .unwrap();
        let d = (&block.sample - &expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
        // same eps -> identical encode
        let again = vae.encode(&x, Some(eps)).unwrap();
        let d = (&block.sample - &again.sample)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }
}
