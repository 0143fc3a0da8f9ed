//! Patch embedding and recovery.
//!
//! The sliding variant keeps the stride (so token-grid shapes never change)
//! but enlarges the kernel beyond it; the overhang is supplied by centered
//! replicate padding. Recovery uses the transposed convolution with the same
//! kernel, cropped back to the field size.

use candle_core::{Tensor, D};
use candle_nn::VarBuilder;

use crate::error::{ModelError, Result};
use crate::tensor::{
    centered_pads, conv3d, conv_transpose3d, pad_replicate, token_count,
};

/// 2-D patch embedding: `[B, C, H, W] -> [B, D, ceil(H/s), ceil(W/s)]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed2d {
    weight: Tensor,
    bias: Tensor,
    kernel: (usize, usize),
    stride: usize,
}

impl PatchEmbed2d {
    pub fn new(
        vb: VarBuilder,
        in_channels: usize,
        dim: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        if kernel.0 < stride || kernel.1 < stride {
            return Err(ModelError::Config(
                "embedding kernel must cover the stride".into(),
            ));
        }
        let weight = vb.get((dim, in_channels, kernel.0, kernel.1), "weight")?;
        let bias = vb.get(dim, "bias")?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, _c, h, w) = x.dims4()?;
        let (ph_l, ph_r) = centered_pads(h, self.kernel.0, self.stride);
        let (pw_l, pw_r) = centered_pads(w, self.kernel.1, self.stride);
        let x = pad_replicate(x, 2, ph_l, ph_r)?;
        let x = pad_replicate(&x, 3, pw_l, pw_r)?;
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        let bias = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// 3-D patch embedding over `[B, C, depth, H, W]` with its own depth stride.
#[derive(Debug, Clone)]
pub struct PatchEmbed3d {
    weight: Tensor,
    bias: Tensor,
    kernel: (usize, usize, usize),
    stride_d: usize,
    stride_hw: usize,
}

impl PatchEmbed3d {
    pub fn new(
        vb: VarBuilder,
        in_channels: usize,
        dim: usize,
        kernel: (usize, usize, usize),
        stride_d: usize,
        stride_hw: usize,
    ) -> Result<Self> {
        if kernel.0 < stride_d || kernel.1 < stride_hw || kernel.2 < stride_hw {
            return Err(ModelError::Config(
                "embedding kernel must cover the stride".into(),
            ));
        }
        let weight = vb.get(
            (dim, in_channels, kernel.0, kernel.1, kernel.2),
            "weight",
        )?;
        let bias = vb.get(dim, "bias")?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride_d,
            stride_hw,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, _c, d, h, w) = x.dims5()?;
        let (pd_l, pd_r) = centered_pads(d, self.kernel.0, self.stride_d);
        let (ph_l, ph_r) = centered_pads(h, self.kernel.1, self.stride_hw);
        let (pw_l, pw_r) = centered_pads(w, self.kernel.2, self.stride_hw);
        let x = pad_replicate(x, 2, pd_l, pd_r)?;
        let x = pad_replicate(&x, 3, ph_l, ph_r)?;
        let x = pad_replicate(&x, 4, pw_l, pw_r)?;
        let y = conv3d(&x, &self.weight, self.stride_d, self.stride_hw)?;
        let bias = self.bias.reshape((1, (), 1, 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// Recovery head: transposed convolution with the embedding kernel, cropped
/// to the original field size.
#[derive(Debug, Clone)]
pub struct PatchRecover2d {
    weight: Tensor,
    bias: Tensor,
    kernel: (usize, usize),
    stride: usize,
}

impl PatchRecover2d {
    pub fn new(
        vb: VarBuilder,
        in_dim: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let weight = vb.get((in_dim, out_channels, kernel.0, kernel.1), "weight")?;
        let bias = vb.get(out_channels, "bias")?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    /// `tokens` is `[B, D, Ht, Wt]`; output `[B, C, out_h, out_w]`.
    pub fn forward(&self, tokens: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let y = tokens.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?;
        let (ph_l, _) = centered_pads(out_h, self.kernel.0, self.stride);
        let (pw_l, _) = centered_pads(out_w, self.kernel.1, self.stride);
        let y = y.narrow(2, ph_l, out_h)?.narrow(3, pw_l, out_w)?;
        let bias = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct PatchRecover3d {
    weight: Tensor,
    bias: Tensor,
    kernel: (usize, usize, usize),
    stride_d: usize,
    stride_hw: usize,
}

impl PatchRecover3d {
    pub fn new(
        vb: VarBuilder,
        in_dim: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride_d: usize,
        stride_hw: usize,
    ) -> Result<Self> {
        let weight = vb.get(
            (in_dim, out_channels, kernel.0, kernel.1, kernel.2),
            "weight",
        )?;
        let bias = vb.get(out_channels, "bias")?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride_d,
            stride_hw,
        })
    }

    /// `tokens` is `[B, D, Dt, Ht, Wt]`; output `[B, C, out_d, out_h, out_w]`.
    pub fn forward(
        &self,
        tokens: &Tensor,
        out_d: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let y = conv_transpose3d(tokens, &self.weight, self.stride_d, self.stride_hw)?;
        let (pd_l, _) = centered_pads(out_d, self.kernel.0, self.stride_d);
        let (ph_l, _) = centered_pads(out_h, self.kernel.1, self.stride_hw);
        let (pw_l, _) = centered_pads(out_w, self.kernel.2, self.stride_hw);
        let y = y
            .narrow(2, pd_l, out_d)?
            .narrow(3, ph_l, out_h)?
            .narrow(4, pw_l, out_w)?;
        let bias = self.bias.reshape((1, (), 1, 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// Which edge of the domain a boundary token came from.
pub const BOUNDARY_PARTS: usize = 4;

/// Separate embedding for the lateral boundary strip.
///
/// The `[C, width, perimeter]` strip is embedded like a 2-D field, flattened
/// to a token sequence, split into its four edge groups (top, bottom, left,
/// right — the perimeter layout of the strip), and each group receives a
/// learned edge embedding. In null mode (no strip supplied) a single learned
/// token stands in so downstream shapes stay fixed.
#[derive(Debug, Clone)]
pub struct BoundaryEmbed {
    embed: PatchEmbed2d,
    edge_embed: Tensor,
    null_token: Tensor,
    stride: usize,
    /// Pixel offsets of the four perimeter segments.
    segment_ends: [usize; BOUNDARY_PARTS],
}

impl BoundaryEmbed {
    pub fn new(
        vb: VarBuilder,
        in_channels: usize,
        dim: usize,
        kernel: (usize, usize),
        stride: usize,
        n_lat: usize,
        n_lon: usize,
    ) -> Result<Self> {
        let embed = PatchEmbed2d::new(vb.pp("embed"), in_channels, dim, kernel, stride)?;
        let edge_embed = vb.get((BOUNDARY_PARTS, dim), "edge_embed")?;
        let null_token = vb.get((1, dim), "null_token")?;
        let segment_ends = [n_lon, 2 * n_lon, 2 * n_lon + n_lat, 2 * (n_lon + n_lat)];
        Ok(Self {
            embed,
            edge_embed,
            null_token,
            stride,
            segment_ends,
        })
    }

    /// Token count produced for a strip of this perimeter (ceil over the
    /// embedding stride on both strip axes).
    pub fn token_count(&self, width: usize, perimeter: usize) -> usize {
        token_count(width, self.stride) * token_count(perimeter, self.stride)
    }

    /// Returns `(tokens [B, N, dim], N)`. `strip` is `[B, C, width, P]`.
    pub fn forward(&self, strip: Option<&Tensor>, batch: usize) -> Result<(Tensor, usize)> {
        match strip {
            None => {
                let tok = self.null_token.unsqueeze(0)?; // [1, 1, dim]
                let tok = tok.broadcast_as((batch, 1, self.null_token.dim(1)?))?;
                Ok((tok.contiguous()?, 1))
            }
            Some(strip) => {
                let (b, _c, width, perimeter) = strip.dims4()?;
                if b != batch {
                    return Err(ModelError::Shape {
                        context: "boundary strip".into(),
                        expected: format!("batch {batch}"),
                        got: format!("{b}"),
                    });
                }
                if perimeter != self.segment_ends[3] {
                    return Err(ModelError::Shape {
                        context: "boundary strip".into(),
                        expected: format!("perimeter {}", self.segment_ends[3]),
                        got: format!("{perimeter}"),
                    });
                }
                let _ = width;
                let grid = self.embed.forward(strip)?; // [B, dim, Wt, Pt]
                let (_, dim, wt, pt) = grid.dims4()?;
                let tokens = grid
                    .reshape((b, dim, wt * pt))?
                    .transpose(1, 2)?
                    .contiguous()?; // [B, N, dim]
                // Edge group of each token along the perimeter axis, by the
                // segment containing its stride-start pixel.
                let mut part_ids: Vec<u32> = Vec::with_capacity(wt * pt);
                for _ in 0..wt {
                    for j in 0..pt {
                        let pixel = j * self.stride;
                        let part = self
                            .segment_ends
                            .iter()
                            .position(|&end| pixel < end)
                            .unwrap_or(3);
                        part_ids.push(part as u32);
                    }
                }
                let idx = Tensor::from_vec(part_ids, wt * pt, strip.device())?;
                let edges = self.edge_embed.index_select(&idx, 0)?; // [N, dim]
                let tokens = tokens.broadcast_add(&edges.unsqueeze(0)?)?;
                Ok((tokens, wt * pt))
            }
        }
    }
}

/// Linear map applied per token (thin wrapper keeping names stable).
#[derive(Debug, Clone)]
pub struct TokenLinear {
    inner: candle_nn::Linear,
}

impl TokenLinear {
    pub fn new(vb: VarBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            inner: candle_nn::linear(in_dim, out_dim, vb)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_nn::Module;
        Ok(self.inner.forward(x)?)
    }
}

/// Two-layer MLP with GELU, over the last dimension.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
}

impl Mlp {
    pub fn new(vb: VarBuilder, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, out, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_nn::Module;
        let x = self.fc1.forward(x)?.gelu_erf()?;
        Ok(self.fc2.forward(&x)?)
    }
}

/// Sinusoidal embedding of integer steps followed by an MLP, used for the
/// diffusion noise-step conditioning.
#[derive(Debug, Clone)]
pub struct StepEmbed {
    mlp: Mlp,
    dim: usize,
}

impl StepEmbed {
    pub fn new(vb: VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(vb.pp("mlp"), dim, dim * 2, dim)?,
            dim,
        })
    }

    pub fn forward(
        &self,
        steps: &[usize],
        dtype: candle_core::DType,
        dev: &candle_core::Device,
    ) -> Result<Tensor> {
        let half = self.dim / 2;
        let mut data = Vec::with_capacity(steps.len() * self.dim);
        for &t in steps {
            for i in 0..half {
                let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
                data.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
                data.push((t as f64 * freq).cos());
            }
            for _ in (2 * half)..self.dim {
                data.push(0.0);
            }
        }
        let base = Tensor::from_vec(data, (steps.len(), self.dim), dev)?.to_dtype(dtype)?;
        self.mlp.forward(&base)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn mean_last_dims(x: &Tensor, keep: usize) -> Result<Tensor> {
    let dims = x.dims().len();
    let mut y = x.clone();
    for _ in keep..dims {
        y = y.mean(D::Minus1)?;
    }
    Ok(y)
}
