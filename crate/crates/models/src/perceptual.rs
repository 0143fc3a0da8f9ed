//! Frozen convolutional feature distance.
//!
//! A perceptual loss needs fixed features, not necessarily pretrained ones;
//! at this scale a seeded random feature pyramid stands in, with unit
//! channel normalization and squared distances per stage like the usual
//! learned-perceptual setups. Swap in pretrained weights by constructing
//! from explicit stage tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::tensor::NoiseRng;

pub struct FeatureDistance {
    /// Stage convolution kernels `[out, in, 3, 3]`, applied stride 2.
    stages: Vec<Tensor>,
}

impl FeatureDistance {
    pub fn seeded(in_channels: usize, seed: u64, dtype: DType, dev: &Device) -> Result<Self> {
        let widths = [16usize, 32, 64];
        let mut stages = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            let mut rng = NoiseRng::for_stream(seed, "feature_stage", i as u64);
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = rng
                .normal_vec(c_out * c_in * 9)
                .into_iter()
                .map(|v| v * std)
                .collect();
            let w = Tensor::from_vec(data, (c_out, c_in, 3, 3), dev)?.to_dtype(dtype)?;
            stages.push(w);
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    pub fn from_stages(stages: Vec<Tensor>) -> Self {
        Self { stages }
    }

    /// Mean squared distance between unit-normalized features, summed over
    /// stages. Inputs are `[B, C, H, W]`.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut fa = a.clone();
        let mut fb = b.clone();
        let mut total: Option<Tensor> = None;
        for w in &self.stages {
            fa = fa.conv2d(w, 1, 2, 1, 1)?.relu()?;
            fb = fb.conv2d(w, 1, 2, 1, 1)?.relu()?;
            let na = unit_normalize(&fa)?;
            let nb = unit_normalize(&fb)?;
            let d = (na - nb)?.sqr()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("at least one stage"))
    }
}

/// Scales each pixel's channel vector to unit length.
fn unit_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-10)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_is_zero_on_identical_inputs_and_positive_otherwise() {
        let dev = Device::Cpu;
        let fd = FeatureDistance::seeded(2, 5, DType::F32, &dev).unwrap();
        let mut rng = NoiseRng::new(8);
        let a = rng.normal(&[1, 2, 24, 24], DType::F32, &dev).unwrap();
        let b = rng.normal(&[1, 2, 24, 24], DType::F32, &dev).unwrap();
        let zero = fd.distance(&a, &a).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(zero, 0.0);
        let pos = fd.distance(&a, &b).unwrap().to_scalar::<f32>().unwrap();
        assert!(pos > 0.0);
    }

    #[test]
    fn seeded_features_are_reproducible() {
        let dev = Device::Cpu;
        let a = FeatureDistance::seeded(3, 7, DType::F32, &dev).unwrap();
        let b = FeatureDistance::seeded(3, 7, DType::F32, &dev).unwrap();
        for (x, y) in a.stages.iter().zip(&b.stages) {
            let d = (x - y).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }
}
