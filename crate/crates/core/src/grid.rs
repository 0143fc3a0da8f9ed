//! Grid geometry and the variable inventory.
//!
//! Fields are stored as `[channel, lat, lon]` rasters with row 0 at the
//! northern edge (`lat_end`) and latitude decreasing southward, the usual
//! reanalysis raster orientation. Channel ordering is fixed: the surface
//! block first, then pressure-level channels level-major (for each level,
//! every pressure variable in canonical order).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// The 13 canonical pressure levels in hPa, top of atmosphere first.
pub const PRESSURE_LEVELS_HPA: [f64; 13] = [
    100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 450.0, 500.0, 600.0, 700.0, 850.0, 950.0, 1000.0,
];

/// Equiangular latitude/longitude grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_start: f64,
    pub lat_end: f64,
    pub lon_start: f64,
    pub lon_end: f64,
    /// Degrees per cell along both axes.
    pub resolution: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Pressure levels in hPa, strictly increasing (top first).
    pub pressure_levels: Vec<f64>,
}

impl GridSpec {
    pub fn new(
        lat_start: f64,
        lat_end: f64,
        lon_start: f64,
        lon_end: f64,
        resolution: f64,
        pressure_levels: Vec<f64>,
    ) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(CoreError::InvalidGrid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if lat_end <= lat_start || lon_end <= lon_start {
            return Err(CoreError::InvalidGrid(
                "lat/lon ranges must be increasing".into(),
            ));
        }
        if lat_start <= -90.0 || lat_end >= 90.0 {
            return Err(CoreError::InvalidGrid(
                "latitudes must lie strictly inside (-90, 90)".into(),
            ));
        }
        if pressure_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::InvalidGrid(
                "pressure levels must be strictly increasing".into(),
            ));
        }
        let n_lat = ((lat_end - lat_start) / resolution).round() as usize + 1;
        let n_lon = ((lon_end - lon_start) / resolution).round() as usize + 1;
        Ok(Self {
            lat_start,
            lat_end,
            lon_start,
            lon_end,
            resolution,
            n_lat,
            n_lon,
            pressure_levels,
        })
    }

    /// Full-scale domain: 0-60 deg N, 70-140 deg E at 0.25 deg, 241x281,
    /// 13 pressure levels.
    pub fn china_quarter_degree() -> Self {
        Self::new(0.0, 60.0, 70.0, 140.0, 0.25, PRESSURE_LEVELS_HPA.to_vec())
            .expect("full-scale spec is valid")
    }

    /// High-resolution precipitation domain: 15-60 deg N, 70-140 deg E.
    /// At 0.01 deg this is the native 4501x7001-point analysis grid; the
    /// working resolution after factor-5 pooling is 0.05 deg.
    pub fn precip_hires(resolution: f64) -> Result<Self> {
        Self::new(15.0, 60.0, 70.0, 140.0, resolution, vec![])
    }

    /// Small grid for tests and the toy profile. `n_lat`, `n_lon` >= 12.
    /// Spans latitudes upward from 0 deg N so that latitude-dependent code
    /// (weights, crops) stays meaningful.
    pub fn toy(n_lat: usize, n_lon: usize, n_levels: usize) -> Result<Self> {
        if n_lat < 12 || n_lon < 12 {
            return Err(CoreError::InvalidGrid(format!(
                "toy grid must be at least 12x12, got {n_lat}x{n_lon}"
            )));
        }
        if n_levels > PRESSURE_LEVELS_HPA.len() {
            return Err(CoreError::InvalidGrid(format!(
                "at most {} pressure levels",
                PRESSURE_LEVELS_HPA.len()
            )));
        }
        // Evenly spaced picks from the canonical levels, keeping order.
        let levels: Vec<f64> = (0..n_levels)
            .map(|i| {
                let idx = if n_levels == 1 {
                    PRESSURE_LEVELS_HPA.len() - 1
                } else {
                    i * (PRESSURE_LEVELS_HPA.len() - 1) / (n_levels - 1)
                };
                PRESSURE_LEVELS_HPA[idx]
            })
            .collect();
        let resolution = 2.5;
        let lat_end = (n_lat - 1) as f64 * resolution;
        let lon_end = 70.0 + (n_lon - 1) as f64 * resolution;
        Self::new(0.0, lat_end.min(85.0), 70.0, lon_end, resolution, levels)
    }

    pub fn n_levels(&self) -> usize {
        self.pressure_levels.len()
    }

    /// Latitude of each row, row 0 northernmost.
    pub fn latitudes(&self) -> Vec<f64> {
        (0..self.n_lat)
            .map(|i| self.lat_end - i as f64 * self.resolution)
            .collect()
    }

    /// Rows whose latitude is >= `lat_min_deg` (a prefix, since rows run
    /// north to south). Returns `(offset, len)` into the latitude axis.
    pub fn rows_at_or_above(&self, lat_min_deg: f64) -> (usize, usize) {
        let lats = self.latitudes();
        let len = lats.iter().take_while(|&&l| l >= lat_min_deg - 1e-9).count();
        (0, len)
    }
}

/// Surface variables in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceVar {
    T2m,
    U10,
    V10,
    Mslp,
}

impl SurfaceVar {
    pub const ALL: [SurfaceVar; 4] = [Self::T2m, Self::U10, Self::V10, Self::Mslp];

    pub fn name(self) -> &'static str {
        match self {
            Self::T2m => "2mt",
            Self::U10 => "u10",
            Self::V10 => "v10",
            Self::Mslp => "mslp",
        }
    }
}

/// Pressure-level variables in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PressureVar {
    Z,
    T,
    U,
    V,
    Q,
}

impl PressureVar {
    pub const ALL: [PressureVar; 5] = [Self::Z, Self::T, Self::U, Self::V, Self::Q];

    pub fn name(self) -> &'static str {
        match self {
            Self::Z => "z",
            Self::T => "t",
            Self::U => "u",
            Self::V => "v",
            Self::Q => "q",
        }
    }
}

/// Which variables a dataset carries. The full inventory is 4 surface and
/// 5 pressure variables; toy inventories may use ordered subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableInventory {
    surface: Vec<SurfaceVar>,
    pressure: Vec<PressureVar>,
}

impl VariableInventory {
    pub fn full() -> Self {
        Self {
            surface: SurfaceVar::ALL.to_vec(),
            pressure: PressureVar::ALL.to_vec(),
        }
    }

    /// Ordered subsets of the canonical variables, duplicates rejected.
    pub fn new(surface: Vec<SurfaceVar>, pressure: Vec<PressureVar>) -> Result<Self> {
        let in_canonical_order = |got: &[usize]| got.windows(2).all(|w| w[0] < w[1]);
        let s_idx: Vec<usize> = surface
            .iter()
            .map(|v| SurfaceVar::ALL.iter().position(|a| a == v).unwrap())
            .collect();
        let p_idx: Vec<usize> = pressure
            .iter()
            .map(|v| PressureVar::ALL.iter().position(|a| a == v).unwrap())
            .collect();
        if !in_canonical_order(&s_idx) || !in_canonical_order(&p_idx) {
            return Err(CoreError::InvalidInventory(
                "variables must be unique and in canonical order".into(),
            ));
        }
        if surface.is_empty() && pressure.is_empty() {
            return Err(CoreError::InvalidInventory("empty inventory".into()));
        }
        Ok(Self { surface, pressure })
    }

    pub fn surface(&self) -> &[SurfaceVar] {
        &self.surface
    }

    pub fn pressure(&self) -> &[PressureVar] {
        &self.pressure
    }

    pub fn n_channels(&self, n_levels: usize) -> usize {
        self.surface.len() + self.pressure.len() * n_levels
    }

    /// Channel index of a surface variable.
    pub fn surface_channel(&self, var: SurfaceVar) -> Option<usize> {
        self.surface.iter().position(|&v| v == var)
    }

    /// Channel index of pressure variable `var_idx` at `level_idx`
    /// (level-major layout).
    pub fn pressure_channel(&self, level_idx: usize, var_idx: usize) -> usize {
        self.surface.len() + level_idx * self.pressure.len() + var_idx
    }

    /// Channel names in storage order: surface block, then `z100`, `t100`,
    /// ... for each level.
    pub fn channel_names(&self, levels: &[f64]) -> Vec<String> {
        let mut names: Vec<String> = self.surface.iter().map(|v| v.name().to_string()).collect();
        for level in levels {
            for var in &self.pressure {
                names.push(format!("{}{}", var.name(), *level as i64));
            }
        }
        names
    }
}

/// Grid plus inventory: everything needed to interpret a state array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub grid: GridSpec,
    pub inventory: VariableInventory,
}

impl Domain {
    pub fn new(grid: GridSpec, inventory: VariableInventory) -> Self {
        Self { grid, inventory }
    }

    pub fn full_scale() -> Self {
        Self::new(GridSpec::china_quarter_degree(), VariableInventory::full())
    }

    pub fn n_channels(&self) -> usize {
        self.inventory.n_channels(self.grid.n_levels())
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.inventory.channel_names(&self.grid.pressure_levels)
    }
}
