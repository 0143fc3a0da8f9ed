//! Shifted-window 3-D attention over `[B, D, H, W, C]` token grids.
//!
//! Boundary tokens ride along the grid as a separate `[B, Nb, C]` sequence:
//! every window sees them as extra keys/values (they carry the lateral
//! forcing to the whole domain), and they update themselves by attending to
//! their own group with the same projection weights. Padded window positions
//! are masked out of attention so pad content never reaches valid tokens.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{layer_norm, LayerNorm, LayerNormConfig, Module, VarBuilder};

use crate::embed::Mlp;
use crate::error::{ModelError, Result};
use crate::tensor::roll;

pub const MASK_OFF: f64 = -1e9;
const PAD_REGION: i64 = 27;

/// Static geometry of one windowed layer: valid and padded token dims and
/// the attention masks for the unshifted and shifted variants.
#[derive(Debug, Clone)]
pub struct WindowGeometry {
    pub valid: (usize, usize, usize),
    pub padded: (usize, usize, usize),
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub n_windows: usize,
    mask_plain: Tensor,
    mask_shifted: Tensor,
}

impl WindowGeometry {
    pub fn new(
        valid: (usize, usize, usize),
        window: [usize; 3],
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        if window.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("window sizes must be positive".into()));
        }
        let padded = (
            valid.0.div_ceil(window[0]) * window[0],
            valid.1.div_ceil(window[1]) * window[1],
            valid.2.div_ceil(window[2]) * window[2],
        );
        // No shifting along an axis that holds a single window.
        let shift = [
            if padded.0 > window[0] { window[0] / 2 } else { 0 },
            if padded.1 > window[1] { window[1] / 2 } else { 0 },
            if padded.2 > window[2] { window[2] / 2 } else { 0 },
        ];
        let n_windows =
            (padded.0 / window[0]) * (padded.1 / window[1]) * (padded.2 / window[2]);
        let mask_plain = build_mask(valid, padded, window, [0, 0, 0], dtype, dev)?;
        let mask_shifted = build_mask(valid, padded, window, shift, dtype, dev)?;
        Ok(Self {
            valid,
            padded,
            window,
            shift,
            n_windows,
            mask_plain,
            mask_shifted,
        })
    }

    pub fn mask(&self, shifted: bool) -> &Tensor {
        if shifted {
            &self.mask_shifted
        } else {
            &self.mask_plain
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }
}

/// Region map in the post-roll frame plus pad positions; tokens attend only
/// within equal region ids.
fn build_mask(
    valid: (usize, usize, usize),
    padded: (usize, usize, usize),
    window: [usize; 3],
    shift: [usize; 3],
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    let (pd, ph, pw) = padded;
    let segment = |size: usize, win: usize, sh: usize, c: usize| -> i64 {
        if sh == 0 {
            0
        } else if c < size - win {
            0
        } else if c < size - sh {
            1
        } else {
            2
        }
    };
    // Pad flags live in the pre-roll frame and move with the data.
    let pad_flag = |size_valid: usize, size_padded: usize, sh: usize, c: usize| -> bool {
        let pre = (c + sh) % size_padded;
        pre >= size_valid
    };
    let mut region = vec![0i64; pd * ph * pw];
    for d in 0..pd {
        for h in 0..ph {
            for w in 0..pw {
                let idx = (d * ph + h) * pw + w;
                let is_pad = pad_flag(valid.0, pd, shift[0], d)
                    || pad_flag(valid.1, ph, shift[1], h)
                    || pad_flag(valid.2, pw, shift[2], w);
                region[idx] = if is_pad {
                    PAD_REGION
                } else {
                    (segment(pd, window[0], shift[0], d) * 3
                        + segment(ph, window[1], shift[1], h))
                        * 3
                        + segment(pw, window[2], shift[2], w)
                };
            }
        }
    }
    // Partition the region map into windows and compare pairwise.
    let (wd, wh, ww) = (window[0], window[1], window[2]);
    let (nd, nh, nw) = (pd / wd, ph / wh, pw / ww);
    let t = wd * wh * ww;
    let n_windows = nd * nh * nw;
    let mut mask = vec![0f32; n_windows * t * t];
    let mut ids = vec![0i64; t];
    for win_idx in 0..n_windows {
        let wz = win_idx / (nh * nw);
        let wy = (win_idx / nw) % nh;
        let wx = win_idx % nw;
        let mut k = 0;
        for dz in 0..wd {
            for dy in 0..wh {
                for dx in 0..ww {
                    let d = wz * wd + dz;
                    let h = wy * wh + dy;
                    let w = wx * ww + dx;
                    ids[k] = region[(d * ph + h) * pw + w];
                    k += 1;
                }
            }
        }
        for i in 0..t {
            for j in 0..t {
                if ids[i] != ids[j] {
                    mask[(win_idx * t + i) * t + j] = MASK_OFF as f32;
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (n_windows, t, t), dev)?.to_dtype(dtype)?)
}

/// `[B, D, H, W, C] -> [B*nW, T, C]` with window-major ordering.
pub fn window_partition(x: &Tensor, window: [usize; 3]) -> Result<Tensor> {
    let (b, d, h, w, c) = x.dims5()?;
    let (wd, wh, ww) = (window[0], window[1], window[2]);
    let x = x.reshape(vec![b, d / wd, wd, h / wh, wh, w / ww, ww, c])?;
    let x = x.permute(vec![0usize, 1, 3, 5, 2, 4, 6, 7])?.contiguous()?;
    let n_windows = (d / wd) * (h / wh) * (w / ww);
    Ok(x.reshape((b * n_windows, wd * wh * ww, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    window: [usize; 3],
    batch: usize,
    dims: (usize, usize, usize),
) -> Result<Tensor> {
    let (d, h, w) = dims;
    let (wd, wh, ww) = (window[0], window[1], window[2]);
    let c = windows.dim(2)?;
    let x = windows.reshape(vec![batch, d / wd, h / wh, w / ww, wd, wh, ww, c])?;
    let x = x.permute(vec![0usize, 1, 4, 2, 5, 3, 6, 7])?.contiguous()?;
    Ok(x.reshape((batch, d, h, w, c))?)
}

/// Relative-position index for a 3-D window, into a
/// `(2wd-1)(2wh-1)(2ww-1)` bias table.
fn relative_position_index(window: [usize; 3], dev: &Device) -> Result<Tensor> {
    let (wd, wh, ww) = (window[0], window[1], window[2]);
    let t = wd * wh * ww;
    let mut coords = Vec::with_capacity(t);
    for d in 0..wd as i64 {
        for h in 0..wh as i64 {
            for w in 0..ww as i64 {
                coords.push((d, h, w));
            }
        }
    }
    let (sh, sw) = ((2 * wh - 1) as i64, (2 * ww - 1) as i64);
    let mut idx = Vec::with_capacity(t * t);
    for &(d1, h1, w1) in &coords {
        for &(d2, h2, w2) in &coords {
            let rd = d1 - d2 + wd as i64 - 1;
            let rh = h1 - h2 + wh as i64 - 1;
            let rw = w1 - w2 + ww as i64 - 1;
            idx.push(((rd * sh + rh) * sw + rw) as u32);
        }
    }
    Ok(Tensor::from_vec(idx, t * t, dev)?)
}

/// Window attention with learned relative position bias and optional global
/// boundary keys/values.
#[derive(Debug, Clone)]
pub struct WindowAttention3d {
    qkv: candle_nn::Linear,
    proj: candle_nn::Linear,
    rel_bias_table: Tensor,
    rel_index: Tensor,
    n_heads: usize,
    head_dim: usize,
    scale: f64,
    window: [usize; 3],
}

impl WindowAttention3d {
    pub fn new(vb: VarBuilder, dim: usize, n_heads: usize, window: [usize; 3]) -> Result<Self> {
        if dim % n_heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {dim} not divisible by {n_heads} heads"
            )));
        }
        let table_len = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
        let rel_bias_table = vb.get((table_len, n_heads), "rel_bias_table")?;
        let rel_index = relative_position_index(window, vb.device())?;
        Ok(Self {
            qkv: candle_nn::linear(dim, dim * 3, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            rel_bias_table,
            rel_index,
            n_heads,
            head_dim: dim / n_heads,
            scale: (dim as f64 / n_heads as f64).powf(-0.5),
            window,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        // x: [N, T, C] -> qkv [N, T, 3C] -> 3 x [N, heads, T, hd]
        let (n, t, c) = x.dims3()?;
        let qkv = self.qkv.forward(x)?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((n, t, self.n_heads, self.head_dim))?
                .transpose(1, 2)?
                .force_contiguous()?)
        };
        Ok((part(0)?, part(1)?, part(2)?))
    }

    fn bias(&self) -> Result<Tensor> {
        let t = self.window.iter().product::<usize>();
        let bias = self.rel_bias_table.index_select(&self.rel_index, 0)?; // [T*T, heads]
        let bias = bias.reshape((t, t, self.n_heads))?;
        Ok(bias.permute((2, 0, 1))?.contiguous()?) // [heads, T, T]
    }

    /// Grid windows attend to `[window tokens ; boundary tokens]`; boundary
    /// tokens self-attend. `windows` is `[B*nW, T, C]`, `boundary`
    /// `[B, Nb, C]`, `mask` `[nW, T, T]`.
    pub fn forward(
        &self,
        windows: &Tensor,
        boundary: &Tensor,
        mask: &Tensor,
        batch: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (bw, t, c) = windows.dims3()?;
        let n_windows = bw / batch;
        let (nb_b, nb, _) = boundary.dims3()?;
        if nb_b != batch {
            return Err(ModelError::Shape {
                context: "boundary tokens".into(),
                expected: format!("batch {batch}"),
                got: format!("{nb_b}"),
            });
        }
        let (q, k, v) = self.split_heads(windows)?;
        let (qb, kb, vbv) = self.split_heads(boundary)?;

        // Grid-to-grid logits with relative bias and the window mask.
        let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * self.scale)?; // [Bw, heads, T, T]
        logits = logits.broadcast_add(&self.bias()?.unsqueeze(0)?)?;
        let mask5 = mask.reshape((1, n_windows, 1, t, t))?;
        logits = logits
            .reshape((batch, n_windows, self.n_heads, t, t))?
            .broadcast_add(&mask5)?
            .reshape((bw, self.n_heads, t, t))?;

        // Grid-to-boundary logits: boundary keys replicated per window
        // (the CPU matmul kernel handles rank-4 batches only).
        let expand = |x: &Tensor| -> Result<Tensor> {
            let (bb, heads, rows, cols) = x.dims4()?;
            debug_assert_eq!(bb, batch);
            Ok(x
                .unsqueeze(1)?
                .broadcast_as((batch, n_windows, heads, rows, cols))?
                .force_contiguous()?
                .reshape((bw, heads, rows, cols))?)
        };
        let kb_rep = expand(&kb)?;
        let vb_rep = expand(&vbv)?;
        let logits_b = (q.matmul(&kb_rep.transpose(2, 3)?.force_contiguous()?)? * self.scale)?;

        let joint = Tensor::cat(&[&logits, &logits_b], D::Minus1)?;
        let probs = candle_nn::ops::softmax(&joint, D::Minus1)?;
        let pg = probs.narrow(D::Minus1, 0, t)?.contiguous()?;
        let pb = probs.narrow(D::Minus1, t, nb)?.contiguous()?;

        let out = (pg.matmul(&v)? + pb.matmul(&vb_rep)?)?;
        let out = out
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, t, c))?;
        let out = self.proj.forward(&out)?;

        // Boundary self-attention: plain multi-head, no bias or mask.
        let blogits = (qb.matmul(&kb.transpose(2, 3)?.contiguous()?)? * self.scale)?;
        let bprobs = candle_nn::ops::softmax(&blogits, D::Minus1)?;
        let bout = bprobs.matmul(&vbv)?;
        let bout = bout
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, nb, c))?;
        let bout = self.proj.forward(&bout)?;

        Ok((out, bout))
    }
}

/// One transformer block: windowed attention (optionally shifted) plus MLP,
/// shared with the boundary token group.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention3d,
    norm2: LayerNorm,
    mlp: Mlp,
    shifted: bool,
}

impl SwinBlock {
    pub fn new(
        vb: VarBuilder,
        dim: usize,
        n_heads: usize,
        window: [usize; 3],
        shifted: bool,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let cfg = LayerNormConfig::default();
        Ok(Self {
            norm1: layer_norm(dim, cfg, vb.pp("norm1"))?,
            attn: WindowAttention3d::new(vb.pp("attn"), dim, n_heads, window)?,
            norm2: layer_norm(dim, cfg, vb.pp("norm2"))?,
            mlp: Mlp::new(vb.pp("mlp"), dim, dim * mlp_ratio, dim)?,
            shifted,
        })
    }

    /// `x` is `[B, D, H, W, C]` (valid dims), `xb` `[B, Nb, C]`.
    pub fn forward(
        &self,
        x: &Tensor,
        xb: &Tensor,
        geom: &WindowGeometry,
    ) -> Result<(Tensor, Tensor)> {
        let (b, d, h, w, c) = x.dims5()?;
        let shift = if self.shifted { geom.shift } else { [0, 0, 0] };

        let normed = self.norm1.forward(x)?;
        let nb = self.norm1.forward(xb)?;

        // Pad to window multiples with edge replication, then cyclic shift.
        let mut g = normed;
        for (axis, (valid, padded)) in [
            (1usize, (geom.valid.0, geom.padded.0)),
            (2, (geom.valid.1, geom.padded.1)),
            (3, (geom.valid.2, geom.padded.2)),
        ] {
            if padded > valid {
                g = crate::tensor::pad_replicate(&g, axis, 0, padded - valid)?;
            }
        }
        for (axis, s) in [(1usize, shift[0]), (2, shift[1]), (3, shift[2])] {
            if s > 0 {
                g = roll(&g, axis, -(s as i64))?;
            }
        }
        let windows = window_partition(&g, geom.window)?;
        let (attn_windows, attn_b) =
            self.attn
                .forward(&windows, &nb, geom.mask(self.shifted), b)?;
        let mut g = window_reverse(&attn_windows, geom.window, b, geom.padded)?;
        for (axis, s) in [(1usize, shift[0]), (2, shift[1]), (3, shift[2])] {
            if s > 0 {
                g = roll(&g, axis, s as i64)?;
            }
        }
        let g = g.narrow(1, 0, d)?.narrow(2, 0, h)?.narrow(3, 0, w)?;

        let x = (x + g.contiguous()?)?;
        let xb = (xb + attn_b)?;

        // Token-wise MLP over both groups.
        let flat = x.reshape((b, d * h * w, c))?;
        let flat = (&flat + self.mlp.forward(&self.norm2.forward(&flat)?)?)?;
        let x = flat.reshape((b, d, h, w, c))?;
        let xb = (&xb + self.mlp.forward(&self.norm2.forward(&xb)?)?)?;
        Ok((x, xb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{deterministic_init, NoiseRng};
    use candle_nn::VarMap;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn partition_reverse_round_trip() {
        let mut rng = NoiseRng::new(5);
        let x = rng.normal(&[2, 4, 6, 6, 3], DType::F32, &dev()).unwrap();
        let w = window_partition(&x, [2, 3, 3]).unwrap();
        assert_eq!(w.dims(), &[2 * 2 * 2 * 2, 18, 3]);
        let back = window_reverse(&w, [2, 3, 3], 2, (4, 6, 6)).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn masks_keep_pad_keys_out() {
        // 5 valid tokens along W padded to 6: pad column must be masked off
        // for every valid query in its window.
        let geom =
            WindowGeometry::new((2, 3, 5), [2, 3, 3], DType::F32, &dev()).unwrap();
        assert_eq!(geom.padded, (2, 3, 6));
        let mask = geom.mask(false).to_vec3::<f32>().unwrap();
        // Window 1 covers W in 3..6; its last column (w=5) is padding.
        // Token order inside a window: d-major, then h, then w.
        let win = &mask[1];
        for (i, row) in win.iter().enumerate() {
            let w_in_window = i % 3;
            let is_pad_query = w_in_window == 2;
            for (j, &v) in row.iter().enumerate() {
                let is_pad_key = j % 3 == 2;
                if !is_pad_query {
                    if is_pad_key {
                        assert!(v < -1e8, "pad key visible at ({i},{j})");
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pad_content_never_reaches_valid_tokens() {
        // Same geometry; run a block twice with different values in the pad
        // source region... the pad is replicated from the edge, so instead
        // vary the mask path directly: build attention on windows where the
        // padded column's *content* is randomized and check valid outputs.
        let varmap = VarMap::new();
        let vb = candle_nn::VarBuilder::from_varmap(&varmap, DType::F64, &dev());
        let attn = WindowAttention3d::new(vb.pp("attn"), 8, 2, [1, 1, 4]).unwrap();
        deterministic_init(&varmap, 3).unwrap();
        let geom = WindowGeometry::new((1, 1, 3), [1, 1, 4], DType::F64, &dev()).unwrap();
        assert_eq!(geom.padded, (1, 1, 4));

        let mut rng = NoiseRng::new(9);
        let base = rng.normal(&[1, 4, 8], DType::F64, &dev()).unwrap();
        let boundary = rng.normal(&[1, 1, 8], DType::F64, &dev()).unwrap();
        let (out_a, _) = attn
            .forward(&base, &boundary, geom.mask(false), 1)
            .unwrap();

        // Replace the pad token (index 3) with noise.
        let noise = rng.normal(&[1, 1, 8], DType::F64, &dev()).unwrap();
        let tampered = Tensor::cat(&[&base.narrow(1, 0, 3).unwrap(), &noise], 1).unwrap();
        let (out_b, _) = attn
            .forward(&tampered, &boundary, geom.mask(false), 1)
            .unwrap();

        let a = out_a.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = out_b.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "pad content influenced valid token");
        }
    }

    #[test]
    fn shifted_mask_separates_wrapped_regions() {
        let geom = WindowGeometry::new((2, 6, 6), [2, 3, 3], DType::F32, &dev()).unwrap();
        assert_eq!(geom.shift, [0, 1, 1]);
        let m = geom.mask(true).to_vec3::<f32>().unwrap();
        // At least one window must contain cross-region pairs.
        let blocked: usize = m
            .iter()
            .flat_map(|w| w.iter())
            .flat_map(|r| r.iter())
            .filter(|&&v| v < -1e8)
            .count();
        assert!(blocked > 0);
    }
}
