//! Reference climatology: per-(month, hour-of-day) mean fields.

use ndarray::{Array2, Array5, ArrayView3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::blob::{read_blob, write_blob};
use crate::error::{CoreError, Result};
use crate::state::WeatherState;

pub const CLIMATOLOGY_VERSION: u32 = 1;

/// Mean fields keyed by (month 1..=12, hour-of-day 0..=23), stored as a
/// `[12, 24, channels, n_lat, n_lon]` array. Every key must be populated
/// before the climatology can be constructed.
#[derive(Debug, Clone)]
pub struct Climatology {
    data: Array5<f32>,
    channel_names: Vec<String>,
    years: Vec<i32>,
}

impl Climatology {
    pub fn at(&self, month: u32, hour: u32) -> ArrayView3<'_, f32> {
        self.data
            .index_axis(ndarray::Axis(0), (month - 1) as usize)
            .index_axis_move(ndarray::Axis(0), hour as usize)
    }

    /// One channel's mean field at a key.
    pub fn channel_field(&self, month: u32, hour: u32, channel: usize) -> Array2<f32> {
        self.at(month, hour)
            .index_axis(ndarray::Axis(0), channel)
            .to_owned()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = self.data.shape().to_vec();
        let header = ClimHeader {
            version: CLIMATOLOGY_VERSION,
            dims,
            channel_names: self.channel_names.clone(),
            years: self.years.clone(),
        };
        let payload: Vec<f32> = self.data.iter().copied().collect();
        write_blob(path, &header, &payload)
    }

    pub fn load(path: &Path, expected_names: Option<&[String]>) -> Result<Self> {
        let (header, payload): (ClimHeader, Vec<f32>) = read_blob(path)?;
        if header.version != CLIMATOLOGY_VERSION {
            return Err(CoreError::UnsupportedVersion {
                got: header.version,
                supported: CLIMATOLOGY_VERSION,
            });
        }
        if let Some(expected) = expected_names {
            if header.channel_names != expected {
                return Err(CoreError::ChannelMismatch(
                    "climatology channel names do not match the dataset".into(),
                ));
            }
        }
        let dims: [usize; 5] = header
            .dims
            .clone()
            .try_into()
            .map_err(|_| CoreError::CorruptFile {
                path: path.display().to_string(),
                reason: "climatology must be 5-dimensional".into(),
            })?;
        let data =
            Array5::from_shape_vec(dims, payload).map_err(|e| CoreError::CorruptFile {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "climatology".into(),
            });
        }
        Ok(Self {
            data,
            channel_names: header.channel_names,
            years: header.years,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClimHeader {
    version: u32,
    dims: Vec<usize>,
    channel_names: Vec<String>,
    years: Vec<i32>,
}

/// Streaming accumulator; feed every sample of the chosen years, then call
/// [`ClimatologyBuilder::finish`].
pub struct ClimatologyBuilder {
    sums: Array5<f64>,
    counts: Array2<u64>,
    channel_names: Vec<String>,
    shape: (usize, usize, usize),
}

impl ClimatologyBuilder {
    pub fn new(channel_names: Vec<String>, n_lat: usize, n_lon: usize) -> Self {
        let c = channel_names.len();
        Self {
            sums: Array5::zeros((12, 24, c, n_lat, n_lon)),
            counts: Array2::zeros((12, 24)),
            channel_names,
            shape: (c, n_lat, n_lon),
        }
    }

    pub fn add(&mut self, state: &WeatherState) -> Result<()> {
        if state.normalized() {
            return Err(CoreError::InvalidArgument(
                "climatology is built from physical-unit states".into(),
            ));
        }
        if state.shape() != self.shape {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", state.shape()),
            });
        }
        let m = (state.timestamp().month() - 1) as usize;
        let h = state.timestamp().hour() as usize;
        let mut slot = self
            .sums
            .index_axis_mut(ndarray::Axis(0), m)
            .index_axis_move(ndarray::Axis(0), h);
        slot.zip_mut_with(&state.values(), |acc, &v| *acc += v as f64);
        self.counts[[m, h]] += 1;
        Ok(())
    }

    /// Fails listing the missing (month, hour) keys if any slot saw no data.
    pub fn finish(self, years: Vec<i32>) -> Result<Climatology> {
        let mut missing = Vec::new();
        for m in 0..12 {
            for h in 0..24 {
                if self.counts[[m, h]] == 0 {
                    missing.push((m as u32 + 1, h as u32));
                }
            }
        }
        if !missing.is_empty() {
            return Err(CoreError::MissingClimatologyKeys(missing));
        }
        let (c, n_lat, n_lon) = self.shape;
        let mut data = Array5::<f32>::zeros((12, 24, c, n_lat, n_lon));
        for m in 0..12 {
            for h in 0..24 {
                let inv = 1.0 / self.counts[[m, h]] as f64;
                let sums = self
                    .sums
                    .index_axis(ndarray::Axis(0), m)
                    .index_axis_move(ndarray::Axis(0), h);
                let mut out = data
                    .index_axis_mut(ndarray::Axis(0), m)
                    .index_axis_move(ndarray::Axis(0), h);
                out.zip_mut_with(&sums, |o, &s| *o = (s * inv) as f32);
            }
        }
        Ok(Climatology {
            data,
            channel_names: self.channel_names,
            years,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Domain, GridSpec, PressureVar, SurfaceVar, VariableInventory};
    use crate::time::HourStamp;
    use ndarray::Array3;

    fn toy_domain() -> Domain {
        let grid = GridSpec::toy(12, 12, 1).unwrap();
        let inv = VariableInventory::new(vec![SurfaceVar::T2m], vec![PressureVar::Z]).unwrap();
        Domain::new(grid, inv)
    }

    fn state_at(domain: &Domain, t: HourStamp, fill: f32) -> WeatherState {
        WeatherState::new(
            Array3::from_elem((domain.n_channels(), 12, 12), fill),
            t,
            false,
            domain,
        )
        .unwrap()
    }

    fn full_year(domain: &Domain, value_of: impl Fn(HourStamp) -> f32) -> ClimatologyBuilder {
        let mut b = ClimatologyBuilder::new(domain.channel_names(), 12, 12);
        let mut t = HourStamp::new(2019, 1, 1, 0).unwrap();
        for _ in 0..8760 {
            b.add(&state_at(domain, t, value_of(t))).unwrap();
            t = t.plus_hours(1);
        }
        b
    }

    #[test]
    fn stationary_dataset_gives_stationary_climatology() {
        let domain = toy_domain();
        let clim = full_year(&domain, |_| 5.0).finish(vec![2019]).unwrap();
        for (m, h) in [(1u32, 0u32), (6, 12), (12, 23)] {
            assert!(clim.at(m, h).iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn two_value_mean() {
        // Two synthetic years with values v and v+2 at each key -> v+1.
        let domain = toy_domain();
        let mut b = ClimatologyBuilder::new(domain.channel_names(), 12, 12);
        for year in [2018, 2019] {
            let v = if year == 2018 { 3.0 } else { 5.0 };
            let mut t = HourStamp::new(year, 1, 1, 0).unwrap();
            for _ in 0..8760 {
                b.add(&state_at(&domain, t, v)).unwrap();
                t = t.plus_hours(1);
            }
        }
        let clim = b.finish(vec![2018, 2019]).unwrap();
        assert!(clim.at(3, 7).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn missing_keys_reported() {
        let domain = toy_domain();
        let mut b = ClimatologyBuilder::new(domain.channel_names(), 12, 12);
        let t = HourStamp::new(2019, 1, 1, 0).unwrap();
        b.add(&state_at(&domain, t, 1.0)).unwrap();
        match b.finish(vec![2019]) {
            Err(CoreError::MissingClimatologyKeys(keys)) => {
                assert_eq!(keys.len(), 12 * 24 - 1);
                assert!(!keys.contains(&(1, 0)));
            }
            other => panic!("expected missing keys, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let domain = toy_domain();
        let clim = full_year(&domain, |t| (t.hour() as f32) + 0.5)
            .finish(vec![2019])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clim.rwb");
        clim.save(&path).unwrap();
        let names = domain.channel_names();
        let loaded = Climatology::load(&path, Some(&names)).unwrap();
        assert_eq!(loaded.at(2, 13), clim.at(2, 13));
        let err = Climatology::load(&path, Some(&["wrong".to_string()]));
        assert!(matches!(err, Err(CoreError::ChannelMismatch(_))));
    }
}
