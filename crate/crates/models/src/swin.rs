//! Boundary-conditioned forecast operator: sliding patch embedding of the
//! surface and pressure stacks, a separately embedded lateral boundary, a
//! three-layer windowed-attention encoder-decoder with 2x2 horizontal
//! merging in the middle, and transposed-convolution patch recovery back to
//! the full channel stack.

use candle_core::{DType, Device, Tensor};
use candle_nn::{layer_norm, LayerNorm, LayerNormConfig, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::attention::{SwinBlock, WindowGeometry};
use crate::checkpoint::fingerprint;
use crate::embed::{BoundaryEmbed, PatchEmbed2d, PatchEmbed3d, PatchRecover2d, PatchRecover3d, TokenLinear};
use crate::error::{ModelError, Result};
use crate::tensor::{deterministic_init, ensure_finite, parse_dtype, token_count};
use regioncast_core::Domain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub surface_kernel: [usize; 2],
    pub surface_stride: usize,
    pub pressure_kernel: [usize; 3],
    pub pressure_stride_depth: usize,
    pub pressure_stride_hw: usize,
    pub boundary_kernel: [usize; 2],
    pub boundary_stride: usize,
    pub sliding: bool,
}

impl EmbedConfig {
    /// Paper-scale kernels: [7,7] over [4,4] strides for the surface and
    /// boundary, [5,7,7] over [2,4,4] for the pressure stack.
    pub fn full_scale() -> Self {
        Self {
            surface_kernel: [7, 7],
            surface_stride: 4,
            pressure_kernel: [5, 7, 7],
            pressure_stride_depth: 2,
            pressure_stride_hw: 4,
            boundary_kernel: [7, 7],
            boundary_stride: 4,
            sliding: true,
        }
    }

    /// Classical non-overlapping embedding: kernels equal strides.
    pub fn without_sliding(&self) -> Self {
        Self {
            surface_kernel: [self.surface_stride; 2],
            pressure_kernel: [
                self.pressure_stride_depth,
                self.pressure_stride_hw,
                self.pressure_stride_hw,
            ],
            boundary_kernel: [self.boundary_stride; 2],
            sliding: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let covers = self.surface_kernel[0] >= self.surface_stride
            && self.surface_kernel[1] >= self.surface_stride
            && self.pressure_kernel[0] >= self.pressure_stride_depth
            && self.pressure_kernel[1] >= self.pressure_stride_hw
            && self.pressure_kernel[2] >= self.pressure_stride_hw
            && self.boundary_kernel[0] >= self.boundary_stride
            && self.boundary_kernel[1] >= self.boundary_stride;
        if !covers {
            return Err(ModelError::Config("kernel smaller than stride".into()));
        }
        if !self.sliding {
            let equal = self.surface_kernel == [self.surface_stride; 2]
                && self.pressure_kernel
                    == [
                        self.pressure_stride_depth,
                        self.pressure_stride_hw,
                        self.pressure_stride_hw,
                    ]
                && self.boundary_kernel == [self.boundary_stride; 2];
            if !equal {
                return Err(ModelError::Config(
                    "non-sliding embedding requires kernel == stride".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub n_surface_vars: usize,
    pub n_pressure_vars: usize,
    pub n_levels: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    pub embed: EmbedConfig,
    pub dim: usize,
    /// Blocks per layer; the architecture always has exactly three layers.
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    pub window: [usize; 3],
    pub mlp_ratio: usize,
    /// Concatenate layer-1 output onto the layer-3 input.
    pub skip_connect: bool,
    pub boundary_width: usize,
    /// Forecast step in hours this parameter set is trained for.
    pub lead_hours: u32,
    pub dtype: String,
}

impl ForecasterConfig {
    pub fn full_scale(lead_hours: u32) -> Self {
        Self {
            n_surface_vars: 4,
            n_pressure_vars: 5,
            n_levels: 13,
            n_lat: 241,
            n_lon: 281,
            embed: EmbedConfig::full_scale(),
            dim: 96,
            depths: [2, 6, 2],
            heads: [6, 12, 12],
            window: [2, 6, 6],
            mlp_ratio: 4,
            skip_connect: true,
            boundary_width: 4,
            lead_hours,
            dtype: "f32".into(),
        }
    }

    /// Small config for a toy domain; dims and heads shrink, strides drop
    /// to [2,4,4]-style proportions suited to the grid.
    pub fn toy(domain: &Domain, lead_hours: u32) -> Self {
        Self {
            n_surface_vars: domain.inventory.surface().len(),
            n_pressure_vars: domain.inventory.pressure().len(),
            n_levels: domain.grid.n_levels(),
            n_lat: domain.grid.n_lat,
            n_lon: domain.grid.n_lon,
            embed: EmbedConfig {
                surface_kernel: [5, 5],
                surface_stride: 4,
                pressure_kernel: [3, 5, 5],
                pressure_stride_depth: 2,
                pressure_stride_hw: 4,
                boundary_kernel: [5, 5],
                boundary_stride: 4,
                sliding: true,
            },
            dim: 16,
            depths: [1, 1, 1],
            heads: [2, 2, 2],
            window: [2, 2, 2],
            mlp_ratio: 2,
            skip_connect: true,
            boundary_width: 4,
            lead_hours,
            dtype: "f32".into(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_surface_vars + self.n_pressure_vars * self.n_levels
    }

    /// Token grid `(depth, lat, lon)`: one surface plane plus the embedded
    /// pressure planes.
    pub fn token_dims(&self) -> (usize, usize, usize) {
        let dp = 1 + token_count(self.n_levels, self.embed.pressure_stride_depth);
        let hp = token_count(self.n_lat, self.embed.surface_stride);
        let wp = token_count(self.n_lon, self.embed.surface_stride);
        (dp, hp, wp)
    }

    fn layer_dim(&self, layer: usize) -> usize {
        match layer {
            0 => self.dim,
            1 => self.dim * 2,
            _ => {
                if self.skip_connect {
                    self.dim * 2
                } else {
                    self.dim
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.n_surface_vars == 0 || self.n_pressure_vars == 0 || self.n_levels == 0 {
            return Err(ModelError::Config(
                "forecaster needs surface and pressure variables".into(),
            ));
        }
        if self.n_surface_vars > 4 || self.n_pressure_vars > 5 {
            return Err(ModelError::Config(
                "at most 4 surface and 5 pressure variables".into(),
            ));
        }
        if self.embed.pressure_stride_hw != self.embed.surface_stride {
            return Err(ModelError::Config(
                "surface and pressure horizontal strides must agree".into(),
            ));
        }
        for layer in 0..3 {
            if self.layer_dim(layer) % self.heads[layer] != 0 {
                return Err(ModelError::Config(format!(
                    "layer {layer} dim {} not divisible by {} heads",
                    self.layer_dim(layer),
                    self.heads[layer]
                )));
            }
        }
        if self.n_lat <= 2 * self.boundary_width || self.n_lon <= 2 * self.boundary_width {
            return Err(ModelError::Config("grid too small for boundary width".into()));
        }
        parse_dtype(&self.dtype)?;
        Ok(())
    }

    /// Architecture fingerprint; the lead-time tag is metadata, not
    /// architecture, so fine-tuned variants stay loadable from a base.
    pub fn fingerprint(&self) -> Result<String> {
        let mut arch = self.clone();
        arch.lead_hours = 0;
        fingerprint(&arch)
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }
}

struct Layer {
    blocks: Vec<SwinBlock>,
    geom: WindowGeometry,
}

impl Layer {
    fn new(
        vb: VarBuilder,
        dim: usize,
        depth: usize,
        heads: usize,
        window: [usize; 3],
        valid: (usize, usize, usize),
        mlp_ratio: usize,
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        let geom = WindowGeometry::new(valid, window, dtype, dev)?;
        let blocks = (0..depth)
            .map(|i| {
                SwinBlock::new(
                    vb.pp(format!("block{i}")),
                    dim,
                    heads,
                    window,
                    i % 2 == 1,
                    mlp_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, geom })
    }

    fn forward(&self, x: &Tensor, xb: &Tensor, detach: bool) -> Result<(Tensor, Tensor)> {
        let mut x = x.clone();
        let mut xb = xb.clone();
        for block in &self.blocks {
            let (nx, nxb) = block.forward(&x, &xb, &self.geom)?;
            x = if detach { nx.detach() } else { nx };
            xb = if detach { nxb.detach() } else { nxb };
        }
        Ok((x, xb))
    }
}

pub struct Forecaster {
    cfg: ForecasterConfig,
    surface_embed: PatchEmbed2d,
    pressure_embed: PatchEmbed3d,
    boundary_embed: BoundaryEmbed,
    layer1: Layer,
    merge_norm: LayerNorm,
    merge_proj: TokenLinear,
    boundary_down: TokenLinear,
    layer2: Layer,
    split_proj: TokenLinear,
    boundary_l3: TokenLinear,
    layer3: Layer,
    out_norm: LayerNorm,
    surface_recover: PatchRecover2d,
    pressure_recover: PatchRecover3d,
    device: Device,
    dtype: DType,
}

impl Forecaster {
    pub fn new(cfg: &ForecasterConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.dtype()?;
        let dev = vb.device().clone();
        let (dp, hp, wp) = cfg.token_dims();
        let dim = cfg.dim;
        let l3_dim = cfg.layer_dim(2);

        let e = &cfg.embed;
        let surface_embed = PatchEmbed2d::new(
            vb.pp("surface_embed"),
            cfg.n_surface_vars + 1, // + topography
            dim,
            (e.surface_kernel[0], e.surface_kernel[1]),
            e.surface_stride,
        )?;
        let pressure_embed = PatchEmbed3d::new(
            vb.pp("pressure_embed"),
            cfg.n_pressure_vars,
            dim,
            (
                e.pressure_kernel[0],
                e.pressure_kernel[1],
                e.pressure_kernel[2],
            ),
            e.pressure_stride_depth,
            e.pressure_stride_hw,
        )?;
        let boundary_embed = BoundaryEmbed::new(
            vb.pp("boundary_embed"),
            cfg.n_channels(),
            dim,
            (e.boundary_kernel[0], e.boundary_kernel[1]),
            e.boundary_stride,
            cfg.n_lat,
            cfg.n_lon,
        )?;

        let layer1 = Layer::new(
            vb.pp("layer1"),
            dim,
            cfg.depths[0],
            cfg.heads[0],
            cfg.window,
            (dp, hp, wp),
            cfg.mlp_ratio,
            dtype,
            &dev,
        )?;
        let (h2, w2) = (hp.div_ceil(2), wp.div_ceil(2));
        let layer2 = Layer::new(
            vb.pp("layer2"),
            dim * 2,
            cfg.depths[1],
            cfg.heads[1],
            cfg.window,
            (dp, h2, w2),
            cfg.mlp_ratio,
            dtype,
            &dev,
        )?;
        let layer3 = Layer::new(
            vb.pp("layer3"),
            l3_dim,
            cfg.depths[2],
            cfg.heads[2],
            cfg.window,
            (dp, hp, wp),
            cfg.mlp_ratio,
            dtype,
            &dev,
        )?;

        let lncfg = LayerNormConfig::default();
        Ok(Self {
            cfg: cfg.clone(),
            surface_embed,
            pressure_embed,
            boundary_embed,
            layer1,
            merge_norm: layer_norm(dim * 4, lncfg, vb.pp("merge_norm"))?,
            merge_proj: TokenLinear::new(vb.pp("merge_proj"), dim * 4, dim * 2)?,
            boundary_down: TokenLinear::new(vb.pp("boundary_down"), dim, dim * 2)?,
            layer2,
            split_proj: TokenLinear::new(vb.pp("split_proj"), dim * 2, dim * 4)?,
            boundary_l3: TokenLinear::new(vb.pp("boundary_l3"), dim * 2, l3_dim)?,
            layer3,
            out_norm: layer_norm(l3_dim, lncfg, vb.pp("out_norm"))?,
            surface_recover: PatchRecover2d::new(
                vb.pp("surface_recover"),
                l3_dim,
                cfg.n_surface_vars,
                (e.surface_kernel[0], e.surface_kernel[1]),
                e.surface_stride,
            )?,
            pressure_recover: PatchRecover3d::new(
                vb.pp("pressure_recover"),
                l3_dim,
                cfg.n_pressure_vars,
                (
                    e.pressure_kernel[0],
                    e.pressure_kernel[1],
                    e.pressure_kernel[2],
                ),
                e.pressure_stride_depth,
                e.pressure_stride_hw,
            )?,
            device: dev,
            dtype,
        })
    }

    /// Fresh model with name-keyed deterministic initialization.
    pub fn seeded(cfg: &ForecasterConfig, seed: u64) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, cfg.dtype()?, &Device::Cpu);
        let model = Self::new(cfg, vb)?;
        deterministic_init(&varmap, seed)?;
        Ok((model, varmap))
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Boundary token count for the configured strip.
    pub fn boundary_token_count(&self) -> usize {
        self.boundary_embed.token_count(
            self.cfg.boundary_width,
            2 * (self.cfg.n_lat + self.cfg.n_lon),
        )
    }

    /// One forecast step in normalized space.
    ///
    /// * `state`: `[B, channels, n_lat, n_lon]`
    /// * `boundary`: `[B, channels, width, perimeter]` at the *target* time,
    ///   or `None` to fall back to the learned null token
    /// * `topography`: `[B, 1, n_lat, n_lon]`, z-scored
    ///
    /// With `detach` set the autograd graph is dropped between blocks,
    /// bounding memory during inference.
    pub fn forward(
        &self,
        state: &Tensor,
        boundary: Option<&Tensor>,
        topography: &Tensor,
        detach: bool,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, c, h, w) = state.dims4()?;
        if c != cfg.n_channels() || h != cfg.n_lat || w != cfg.n_lon {
            return Err(ModelError::Shape {
                context: "forecaster input".into(),
                expected: format!("[_, {}, {}, {}]", cfg.n_channels(), cfg.n_lat, cfg.n_lon),
                got: format!("{:?}", state.dims()),
            });
        }
        let (dp, hp, wp) = cfg.token_dims();

        // Surface stack with topography appended as an extra channel.
        let ns = cfg.n_surface_vars;
        let surface = Tensor::cat(&[&state.narrow(1, 0, ns)?, topography], 1)?;
        let s_tokens = self.surface_embed.forward(&surface)?; // [B, C, hp, wp]

        // Pressure stack: channels are level-major, the cube wants
        // [B, vars, levels, H, W].
        let (np, nl) = (cfg.n_pressure_vars, cfg.n_levels);
        let pressure = state
            .narrow(1, ns, np * nl)?
            .reshape((b, nl, np, h, w))?
            .transpose(1, 2)?
            .contiguous()?;
        let p_tokens = self.pressure_embed.forward(&pressure)?; // [B, C, dp-1, hp, wp]

        let tokens = Tensor::cat(&[&s_tokens.unsqueeze(2)?, &p_tokens], 2)?; // [B, C, dp, hp, wp]
        let mut x = tokens.permute((0, 2, 3, 4, 1))?.contiguous()?; // [B, dp, hp, wp, C]
        ensure_finite(&x, "patch embedding")?;

        let (mut xb, _count) = self.boundary_embed.forward(boundary, b)?;

        (x, xb) = self.layer1.forward(&x, &xb, detach)?;
        ensure_finite(&x, "layer1")?;
        let skip = x.clone();

        // 2x2 horizontal patch merging.
        let (h2, w2) = (hp.div_ceil(2), wp.div_ceil(2));
        let mut m = x;
        if hp % 2 == 1 {
            m = crate::tensor::pad_replicate(&m, 2, 0, 1)?;
        }
        if wp % 2 == 1 {
            m = crate::tensor::pad_replicate(&m, 3, 0, 1)?;
        }
        let m = m
            .reshape(vec![b, dp, h2, 2, w2, 2, cfg.dim])?
            .permute(vec![0usize, 1, 2, 4, 3, 5, 6])?
            .contiguous()?
            .reshape(vec![b, dp, h2, w2, 4 * cfg.dim])?;
        let mut x = self.merge_proj.forward(&self.merge_norm.forward(&m)?)?;
        let mut xb2 = self.boundary_down.forward(&xb)?;

        (x, xb2) = self.layer2.forward(&x, &xb2, detach)?;
        ensure_finite(&x, "layer2")?;

        // Transposed merge: each coarse token emits a 2x2 patch of tokens.
        let up = self.split_proj.forward(&x)?; // [B, dp, h2, w2, 4C]
        let up = up
            .reshape(vec![b, dp, h2, w2, 2, 2, cfg.dim])?
            .permute(vec![0usize, 1, 2, 4, 3, 5, 6])?
            .contiguous()?
            .reshape(vec![b, dp, h2 * 2, w2 * 2, cfg.dim])?
            .narrow(2, 0, hp)?
            .narrow(3, 0, wp)?;
        let mut x = if cfg.skip_connect {
            Tensor::cat(&[&up.contiguous()?, &skip], 4)?
        } else {
            up.contiguous()?
        };
        let mut xb3 = self.boundary_l3.forward(&xb2)?;

        (x, xb3) = self.layer3.forward(&x, &xb3, detach)?;
        ensure_finite(&x, "layer3")?;
        let _ = xb3;

        let x = self.out_norm.forward(&x)?;
        let x = x.permute((0, 4, 1, 2, 3))?.contiguous()?; // [B, C3, dp, hp, wp]

        let s_plane = x.narrow(2, 0, 1)?.squeeze(2)?;
        let surface_out = self.surface_recover.forward(&s_plane, h, w)?;
        let p_planes = x.narrow(2, 1, dp - 1)?.contiguous()?;
        let pressure_out = self.pressure_recover.forward(&p_planes, nl, h, w)?;
        let pressure_out = pressure_out
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, np * nl, h, w))?;
        let out = Tensor::cat(&[&surface_out, &pressure_out], 1)?;
        ensure_finite(&out, "patch recovery")?;
        Ok(out)
    }
}
