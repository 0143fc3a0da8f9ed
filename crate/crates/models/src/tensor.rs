//! Tensor plumbing: seeded noise streams, ndarray bridges, padding and roll
//! helpers, depth-looped 3-D convolutions, linear resampling operators and
//! the name-keyed deterministic parameter initializer.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarMap;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ModelError, Result};

/// FNV-1a over a byte string; used to derive independent seeds from labels.
pub fn hash_label(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(label.as_bytes());
    eat(&index.to_le_bytes());
    h
}

/// Deterministic Gaussian noise source. All stochastic tensors in this crate
/// come from here, never from the device RNG, so a seed pins every result.
pub struct NoiseRng {
    rng: ChaCha20Rng,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, label, index)`.
    pub fn for_stream(seed: u64, label: &str, index: u64) -> Self {
        Self::new(hash_label(seed, label, index))
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng))
            .collect()
    }

    pub fn normal(&mut self, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = self.normal_vec(n);
        let t = Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?;
        Ok(t)
    }

    pub fn uniform_index(&mut self, bound: usize) -> usize {
        use rand::Rng;
        self.rng.random_range(0..bound)
    }
}

// --- ndarray bridges ---------------------------------------------------------

pub fn tensor_from_array3(arr: &ArrayView3<f32>, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (c, h, w) = arr.dim();
    let data: Vec<f32> = arr.iter().copied().collect();
    Ok(Tensor::from_vec(data, (c, h, w), dev)?.to_dtype(dtype)?)
}

pub fn tensor_from_array2(arr: &ArrayView2<f32>, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = arr.dim();
    let data: Vec<f32> = arr.iter().copied().collect();
    Ok(Tensor::from_vec(data, (h, w), dev)?.to_dtype(dtype)?)
}

pub fn array3_from_tensor(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| ModelError::InvalidArgument(e.to_string()))
}

pub fn array2_from_tensor(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| ModelError::InvalidArgument(e.to_string()))
}

// --- shape helpers -----------------------------------------------------------

/// Token count along an axis: `ceil(len / stride)`.
pub fn token_count(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Centered padding so that a kernel-`k` stride-`s` convolution emits
/// `ceil(len/s)` positions: total pad is `(out-1)*s + k - len`.
pub fn centered_pads(len: usize, k: usize, s: usize) -> (usize, usize) {
    let out = token_count(len, s);
    let needed = (out - 1) * s + k;
    let pad = needed.saturating_sub(len);
    (pad / 2, pad - pad / 2)
}

/// Replicate-pad one axis.
pub fn pad_replicate(x: &Tensor, dim: usize, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_same(dim, left, right)?)
}

/// Cyclic shift along an axis (positive shifts move content toward higher
/// indices), implemented as narrow + concatenate.
pub fn roll(x: &Tensor, dim: usize, shift: i64) -> Result<Tensor> {
    let len = x.dim(dim)? as i64;
    let shift = shift.rem_euclid(len);
    if shift == 0 {
        return Ok(x.clone());
    }
    let split = (len - shift) as usize;
    let a = x.narrow(dim, 0, split)?;
    let b = x.narrow(dim, split, (len as usize) - split)?;
    Ok(Tensor::cat(&[&b, &a], dim)?)
}

// --- depth-looped 3-D convolutions --------------------------------------------

/// 3-D convolution expressed as one 2-D convolution per output depth, with
/// the depth window folded into channels. `weight` is `[O, C, kd, kh, kw]`,
/// input `[B, C, D, H, W]`, already padded.
pub fn conv3d(x: &Tensor, weight: &Tensor, stride_d: usize, stride_hw: usize) -> Result<Tensor> {
    let (b, c, d, _h, _w) = x.dims5()?;
    let wdims = weight.dims5()?;
    let (o, wc, kd, kh, kw) = wdims;
    if wc != c {
        return Err(ModelError::Shape {
            context: "conv3d".into(),
            expected: format!("{c} input channels"),
            got: format!("{wc}"),
        });
    }
    let d_out = (d - kd) / stride_d + 1;
    let w2 = weight.reshape((o, c * kd, kh, kw))?;
    let mut planes = Vec::with_capacity(d_out);
    for od in 0..d_out {
        let slice = x.narrow(2, od * stride_d, kd)?; // [B, C, kd, H, W]
        let (_, _, _, h, w) = slice.dims5()?;
        let merged = slice.reshape((b, c * kd, h, w))?;
        let out = merged.conv2d(&w2, 0, stride_hw, 1, 1)?;
        planes.push(out.unsqueeze(2)?);
    }
    Ok(Tensor::cat(&planes, 2)?)
}

/// Transposed 3-D convolution via per-depth 2-D transposed convolutions and
/// overlap-add along depth. `weight` is `[C_in, C_out, kd, kh, kw]`, input
/// `[B, C_in, D, H, W]`. Output depth is `(D-1)*stride_d + kd`.
pub fn conv_transpose3d(
    x: &Tensor,
    weight: &Tensor,
    stride_d: usize,
    stride_hw: usize,
) -> Result<Tensor> {
    let (_b, c_in, d, _h, _w) = x.dims5()?;
    let (wc, c_out, kd, kh, kw) = weight.dims5()?;
    if wc != c_in {
        return Err(ModelError::Shape {
            context: "conv_transpose3d".into(),
            expected: format!("{c_in} input channels"),
            got: format!("{wc}"),
        });
    }
    let d_full = (d - 1) * stride_d + kd;
    let w2 = weight.reshape((c_in, c_out * kd, kh, kw))?;
    let mut acc: Option<Tensor> = None;
    for dt in 0..d {
        let plane = x.narrow(2, dt, 1)?.squeeze(2)?; // [B, C_in, H, W]
        let out = plane.conv_transpose2d(&w2, 0, 0, stride_hw, 1)?;
        let (b, _, oh, ow) = out.dims4()?;
        let out = out.reshape((b, c_out, kd, oh, ow))?;
        let left = dt * stride_d;
        let right = d_full - left - kd;
        let padded = out.pad_with_zeros(2, left, right)?;
        acc = Some(match acc {
            Some(a) => (a + padded)?,
            None => padded,
        });
    }
    Ok(acc.expect("d >= 1"))
}

// --- linear resampling as matrix operators ------------------------------------

/// `[dst, src]` row-stochastic linear interpolation operator.
pub fn interp_matrix(src: usize, dst: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let weights = regioncast_core::interp::linear_interp_weights(src, dst);
    let mut data = vec![0f64; dst * src];
    for (i, (i0, i1, w0, w1)) in weights.into_iter().enumerate() {
        data[i * src + i0] += w0;
        data[i * src + i1] += w1;
    }
    Ok(Tensor::from_vec(data, (dst, src), dev)?.to_dtype(dtype)?)
}

/// Applies row/column resampling operators to `[B, C, H, W]`:
/// `R_h x R_w^T`, differentiable and exact in shape.
pub fn resample_hw(x: &Tensor, r_h: &Tensor, r_w: &Tensor) -> Result<Tensor> {
    let rh = r_h.unsqueeze(0)?.unsqueeze(0)?; // [1,1,dst_h,src_h]
    let rw_t = r_w.t()?.unsqueeze(0)?.unsqueeze(0)?; // [1,1,src_w,dst_w]
    let y = rh.broadcast_matmul(x)?;
    Ok(y.broadcast_matmul(&rw_t)?)
}

// --- deterministic initialization ---------------------------------------------

/// Re-initializes every variable in a `VarMap` deterministically, keyed by
/// `(seed, variable name)` so construction order is irrelevant:
///
/// * names containing `zero_init` or ending in `.bias` -> zeros
/// * norm scales (`norm*.weight`, `.ln.weight`) -> ones
/// * `rel_bias` tables -> N(0, 0.02)
/// * everything else -> Kaiming normal over fan-in
pub fn deterministic_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<String> = data.keys().cloned().collect();
    names.sort();
    for name in names {
        let var = &data[&name];
        let shape = var.shape().dims().to_vec();
        let dtype = var.dtype();
        let dev = var.device().clone();
        let n: usize = shape.iter().product();
        let is_norm_weight = name.ends_with(".weight")
            && (name.contains("norm") || name.contains(".ln") || name.contains("_ln"));
        let value = if name.contains("zero_init") || name.ends_with(".bias") {
            Tensor::zeros(shape.as_slice(), dtype, &dev)?
        } else if is_norm_weight {
            Tensor::ones(shape.as_slice(), dtype, &dev)?
        } else {
            let mut rng = NoiseRng::for_stream(seed, &name, 0);
            let std = if name.contains("rel_bias") {
                0.02
            } else {
                let fan_in: usize = if shape.len() >= 2 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                (2.0 / fan_in.max(1) as f64).sqrt()
            };
            let data = rng.normal_vec(n).into_iter().map(|v| v * std).collect();
            Tensor::from_vec::<_, f64>(data, shape.as_slice(), &dev)?.to_dtype(dtype)?
        };
        var.set(&value)?;
    }
    Ok(())
}

/// Sets every variable to zero (architecture sanity anchor in tests).
pub fn zero_all_vars(varmap: &VarMap) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    for var in data.values() {
        var.set(&Tensor::zeros(
            var.shape().dims(),
            var.dtype(),
            var.device(),
        )?)?;
    }
    Ok(())
}

/// Fails with the stage name if the tensor holds NaN or infinities.
pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let sum = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if sum.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            stage: stage.to_string(),
        })
    }
}

/// Parses the serializable dtype tag used in model configs.
pub fn parse_dtype(tag: &str) -> Result<DType> {
    match tag {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(ModelError::Config(format!("unsupported dtype {other}"))),
    }
}

/// Mean over every element, returned as a scalar tensor.
pub fn mean_all(t: &Tensor) -> Result<Tensor> {
    Ok(t.mean_all()?)
}

/// Scalar read-out.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattens trailing dims: `[B, ...] -> [B, N]`.
pub fn flatten_from(t: &Tensor, dim: usize) -> Result<Tensor> {
    Ok(t.flatten(dim, D::Minus1)?)
}
