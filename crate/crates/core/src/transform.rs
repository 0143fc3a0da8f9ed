//! Deterministic value transforms: z-score normalization, the rain-rate /
//! dBZ mapping, and block-mean downsampling.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::state::{BoundaryStrip, WeatherState};

pub const NORM_STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel normalization statistics, plus dBZ-domain statistics for the
/// precipitation fields and per-field statistics for topography.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub version: u32,
    pub channel_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub topography: MeanStd,
    pub precip_coarse_dbz: Option<MeanStd>,
    pub precip_hires_dbz: Option<MeanStd>,
    /// Years the statistics were computed from.
    pub years: Vec<i32>,
}

impl NormStats {
    pub fn new(
        channel_names: Vec<String>,
        mean: Vec<f64>,
        std: Vec<f64>,
        topography: MeanStd,
        years: Vec<i32>,
    ) -> Result<Self> {
        if channel_names.len() != mean.len() || mean.len() != std.len() {
            return Err(CoreError::InvalidArgument(
                "stats vectors must share one length".into(),
            ));
        }
        let stats = Self {
            version: NORM_STATS_VERSION,
            channel_names,
            mean,
            std,
            topography,
            precip_coarse_dbz: None,
            precip_hires_dbz: None,
            years,
        };
        stats.validate()?;
        Ok(stats)
    }

    /// Unit statistics (mean 0, std 1) for every channel; identity transform.
    pub fn unit(channel_names: Vec<String>) -> Self {
        let n = channel_names.len();
        Self {
            version: NORM_STATS_VERSION,
            channel_names,
            mean: vec![0.0; n],
            std: vec![1.0; n],
            topography: MeanStd { mean: 0.0, std: 1.0 },
            precip_coarse_dbz: None,
            precip_hires_dbz: None,
            years: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for (name, &s) in self.channel_names.iter().zip(&self.std) {
            if !(s > 0.0) {
                bad.push(name.clone());
            }
        }
        if !(self.topography.std > 0.0) {
            bad.push("topography".into());
        }
        for (label, entry) in [
            ("precip_coarse_dbz", &self.precip_coarse_dbz),
            ("precip_hires_dbz", &self.precip_hires_dbz),
        ] {
            if let Some(ms) = entry {
                if !(ms.std > 0.0) {
                    bad.push(label.into());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CoreError::ZeroVariance(bad))
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads and checks the version, std positivity and, when an expected
    /// name list is given, channel-name agreement.
    pub fn load(path: &Path, expected_names: Option<&[String]>) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let stats: Self = serde_json::from_str(&json)?;
        if stats.version != NORM_STATS_VERSION {
            return Err(CoreError::UnsupportedVersion {
                got: stats.version,
                supported: NORM_STATS_VERSION,
            });
        }
        stats.validate()?;
        if let Some(expected) = expected_names {
            if stats.channel_names != expected {
                return Err(CoreError::ChannelMismatch(format!(
                    "stats file {} does not match the dataset inventory",
                    path.display()
                )));
            }
        }
        Ok(stats)
    }

    fn check_channels(&self, n: usize) -> Result<()> {
        if self.n_channels() != n {
            return Err(CoreError::ChannelMismatch(format!(
                "stats carry {} channels, data has {n}",
                self.n_channels()
            )));
        }
        Ok(())
    }
}

/// Per-channel `(x - mean) / std`. Fails on already-normalized input.
pub fn normalize(state: &WeatherState, stats: &NormStats) -> Result<WeatherState> {
    if state.normalized() {
        return Err(CoreError::AlreadyNormalized);
    }
    stats.check_channels(state.n_channels())?;
    let out = apply_channelwise(state.values().to_owned(), stats, |x, m, s| (x - m) / s);
    Ok(WeatherState::from_validated(out, state.timestamp(), true))
}

/// Exact inverse of [`normalize`].
pub fn denormalize(state: &WeatherState, stats: &NormStats) -> Result<WeatherState> {
    if !state.normalized() {
        return Err(CoreError::NotNormalized);
    }
    stats.check_channels(state.n_channels())?;
    let out = apply_channelwise(state.values().to_owned(), stats, |x, m, s| x * s + m);
    Ok(WeatherState::from_validated(out, state.timestamp(), false))
}

pub fn normalize_boundary(strip: &BoundaryStrip, stats: &NormStats) -> Result<BoundaryStrip> {
    if strip.normalized() {
        return Err(CoreError::AlreadyNormalized);
    }
    stats.check_channels(strip.values().dim().0)?;
    let out = apply_channelwise(strip.values().to_owned(), stats, |x, m, s| (x - m) / s);
    Ok(BoundaryStrip::from_parts(
        out,
        strip.width(),
        strip.timestamp(),
        true,
    ))
}

pub fn normalize_topography(topo: &ArrayView2<f32>, stats: &NormStats) -> Array2<f32> {
    let MeanStd { mean, std } = stats.topography;
    topo.mapv(|x| ((x as f64 - mean) / std) as f32)
}

fn apply_channelwise(
    mut values: Array3<f32>,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Array3<f32> {
    for (ch, mut plane) in values.outer_iter_mut().enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        plane.mapv_inplace(|x| f(x as f64, m, s) as f32);
    }
    values
}

// --- rain rate <-> dBZ ------------------------------------------------------

/// Rates below this are treated as no rain and clamp to the floor dBZ.
pub const RAIN_RATE_FLOOR_MM_H: f64 = 0.01;

const ZR_A: f64 = 200.0;
const ZR_B: f64 = 1.6;

/// dBZ value of the rate floor; the minimum of the mapping's range.
pub fn dbz_floor() -> f64 {
    10.0 * (ZR_A * RAIN_RATE_FLOOR_MM_H.powf(ZR_B)).log10()
}

/// Marshall-Palmer `Z = 200 R^1.6`, in decibels. Rates below
/// [`RAIN_RATE_FLOOR_MM_H`] clamp to the floor value, so the mapping is
/// total and monotone non-decreasing on `rate >= 0`.
pub fn precip_to_dbz(rate_mm_h: f64) -> Result<f64> {
    if rate_mm_h < 0.0 {
        return Err(CoreError::NegativeRainRate(rate_mm_h));
    }
    let r = rate_mm_h.max(RAIN_RATE_FLOOR_MM_H);
    Ok(10.0 * (ZR_A * r.powf(ZR_B)).log10())
}

/// Inverse of [`precip_to_dbz`]: exact above the floor, zero below it.
pub fn dbz_to_precip(dbz: f64) -> f64 {
    if dbz < dbz_floor() {
        return 0.0;
    }
    (10f64.powf(dbz / 10.0) / ZR_A).powf(1.0 / ZR_B)
}

/// z-scored dBZ space used by the precipitation codecs.
#[derive(Debug, Clone, Copy)]
pub struct PrecipTransform {
    pub dbz: MeanStd,
}

impl PrecipTransform {
    pub fn new(dbz: MeanStd) -> Self {
        Self { dbz }
    }

    pub fn rate_to_normalized(&self, rate_mm_h: f64) -> Result<f64> {
        Ok((precip_to_dbz(rate_mm_h)? - self.dbz.mean) / self.dbz.std)
    }

    pub fn normalized_to_rate(&self, z: f64) -> f64 {
        dbz_to_precip(z * self.dbz.std + self.dbz.mean)
    }

    pub fn field_to_normalized(&self, rates: &ArrayView2<f32>) -> Result<Array2<f32>> {
        let mut out = Array2::<f32>::zeros(rates.dim());
        for (o, &r) in out.iter_mut().zip(rates.iter()) {
            *o = self.rate_to_normalized(r as f64)? as f32;
        }
        Ok(out)
    }

    pub fn field_to_rates(&self, z: &ArrayView2<f32>) -> Array2<f32> {
        z.mapv(|v| self.normalized_to_rate(v as f64) as f32)
    }
}

// --- block-mean downsampling -------------------------------------------------

/// Non-overlapping `factor x factor` block means; both dimensions must be
/// divisible by the factor. Accumulation is in f64 whatever the input type.
pub fn avgpool_downsample(field: &ArrayView2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = field.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(CoreError::NotDivisible { h, w, factor });
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    acc += field[[i * factor + di, j * factor + dj]];
                }
            }
            out[[i, j]] = acc * inv;
        }
    }
    Ok(out)
}

/// f32 convenience wrapper around [`avgpool_downsample`].
pub fn avgpool_downsample_f32(field: &ArrayView2<f32>, factor: usize) -> Result<Array2<f32>> {
    let f64_field = field.mapv(|v| v as f64);
    Ok(avgpool_downsample(&f64_field.view(), factor)?.mapv(|v| v as f32))
}

/// Keeps the rows at or north of `lat_min_deg`, the conversion between the
/// forecast domain and the codec domain. Note: the source material never
/// spells this step out; a plain northern-prefix crop is this crate's
/// convention.
pub fn crop_lat_rows(
    field: &ArrayView2<f32>,
    grid: &crate::grid::GridSpec,
    lat_min_deg: f64,
) -> Array2<f32> {
    let (_, len) = grid.rows_at_or_above(lat_min_deg);
    field.slice(ndarray::s![..len, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Domain, GridSpec, PressureVar, SurfaceVar, VariableInventory};
    use crate::time::HourStamp;
    use ndarray::Array3;

    fn toy_domain() -> Domain {
        let grid = GridSpec::toy(12, 16, 2).unwrap();
        let inv = VariableInventory::new(vec![SurfaceVar::T2m], vec![PressureVar::Z]).unwrap();
        Domain::new(grid, inv)
    }

    fn toy_stats(domain: &Domain) -> NormStats {
        let names = domain.channel_names();
        let n = names.len();
        NormStats::new(
            names,
            (0..n).map(|i| i as f64 + 1.0).collect(),
            (0..n).map(|i| (i + 2) as f64).collect(),
            MeanStd { mean: 100.0, std: 50.0 },
            vec![2019],
        )
        .unwrap()
    }

    #[test]
    fn normalize_direct_arithmetic() {
        // mu=2, sigma=4, x=10 -> 2.0
        let domain = toy_domain();
        let names = domain.channel_names();
        let stats = NormStats::new(
            names,
            vec![2.0; 3],
            vec![4.0; 3],
            MeanStd { mean: 0.0, std: 1.0 },
            vec![],
        )
        .unwrap();
        let values = Array3::<f32>::from_elem((3, 12, 16), 10.0);
        let state =
            WeatherState::new(values, HourStamp::new(2019, 1, 1, 0).unwrap(), false, &domain)
                .unwrap();
        let normed = normalize(&state, &stats).unwrap();
        assert!(normed.values().iter().all(|&v| v == 2.0));
        assert!(normed.normalized());
    }

    #[test]
    fn normalize_zero_anomaly() {
        let domain = toy_domain();
        let stats = toy_stats(&domain);
        let mut values = Array3::<f32>::zeros((3, 12, 16));
        for (ch, mut plane) in values.outer_iter_mut().enumerate() {
            plane.fill(stats.mean[ch] as f32);
        }
        let state =
            WeatherState::new(values, HourStamp::new(2019, 1, 1, 0).unwrap(), false, &domain)
                .unwrap();
        let normed = normalize(&state, &stats).unwrap();
        assert!(normed.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn double_normalization_rejected() {
        let domain = toy_domain();
        let stats = toy_stats(&domain);
        let values = Array3::<f32>::ones((3, 12, 16));
        let state =
            WeatherState::new(values, HourStamp::new(2019, 1, 1, 0).unwrap(), false, &domain)
                .unwrap();
        let normed = normalize(&state, &stats).unwrap();
        assert!(matches!(
            normalize(&normed, &stats),
            Err(CoreError::AlreadyNormalized)
        ));
        assert!(matches!(
            denormalize(&state, &stats),
            Err(CoreError::NotNormalized)
        ));
    }

    #[test]
    fn stats_reject_zero_std() {
        let err = NormStats::new(
            vec!["a".into()],
            vec![0.0],
            vec![0.0],
            MeanStd { mean: 0.0, std: 1.0 },
            vec![],
        );
        assert!(matches!(err, Err(CoreError::ZeroVariance(_))));
    }

    #[test]
    fn dbz_clamp_rule() {
        // R = 0 maps to the floor value, the image of R_min.
        assert_eq!(
            precip_to_dbz(0.0).unwrap(),
            precip_to_dbz(RAIN_RATE_FLOOR_MM_H).unwrap()
        );
        assert_eq!(precip_to_dbz(0.0).unwrap(), dbz_floor());
        assert!(precip_to_dbz(-0.1).is_err());
    }

    #[test]
    fn dbz_round_trip_at_5mm() {
        let r = 5.0;
        let back = dbz_to_precip(precip_to_dbz(r).unwrap());
        assert!((back - r).abs() < 1e-6, "got {back}");
    }

    #[test]
    fn dbz_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=100 {
            let r = RAIN_RATE_FLOOR_MM_H * 1.2f64.powi(i);
            let d = precip_to_dbz(r).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn avgpool_constant_field() {
        let field = Array2::<f64>::from_elem((8, 12), 7.25);
        let out = avgpool_downsample(&field.view(), 4).unwrap();
        assert_eq!(out.dim(), (2, 3));
        assert!(out.iter().all(|&v| v == 7.25));
    }

    #[test]
    fn avgpool_rejects_non_divisible() {
        let field = Array2::<f64>::zeros((9, 12));
        assert!(matches!(
            avgpool_downsample(&field.view(), 4),
            Err(CoreError::NotDivisible { .. })
        ));
    }

    #[test]
    fn crop_keeps_northern_rows() {
        let grid = GridSpec::new(0.0, 55.0, 70.0, 107.5, 2.5, vec![]).unwrap();
        let field = Array2::<f32>::from_shape_fn((grid.n_lat, grid.n_lon), |(i, _)| i as f32);
        let cropped = crop_lat_rows(&field.view(), &grid, 15.0);
        // rows 55,52.5,...,15 -> 17 rows
        assert_eq!(cropped.dim().0, 17);
        assert_eq!(cropped[[0, 0]], 0.0);
    }
}
