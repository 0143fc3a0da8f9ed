//! Chunked gridded-data storage with year-based train/val/test splits.
//!
//! A dataset is a directory:
//!
//! ```text
//! <root>/manifest.json        layout version, grid, inventory, time runs,
//!                             split assignment, chunking
//! <root>/topography.rwb       static topography field
//! <root>/chunks/<group>_<index>.rwb
//! ```
//!
//! Chunk files use the container in [`crate::blob`]; samples are stored
//! hour-major (`[t, channel, lat, lon]`) so a single hour is contiguous.
//! Groups are `state` (all inventory channels), `precip_coarse` (one channel
//! on the state grid) and `precip_hires` (one channel on the high-resolution
//! grid).

mod stats;
mod store;
mod synthetic;

pub use stats::compute_stats;
pub use store::{DatasetReader, DatasetWriter, SampleRecord};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{Domain, GridSpec};
use crate::time::HourStamp;

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Year-based split assignment; the default mirrors the usual reanalysis
/// protocol (train through 2019, validate on 2020, test on 2021).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_max_year: i32,
    pub val_years: Vec<i32>,
    pub test_years: Vec<i32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_max_year: 2019,
            val_years: vec![2020],
            test_years: vec![2021],
        }
    }
}

impl SplitConfig {
    pub fn split_of(&self, year: i32) -> Option<Split> {
        if self.val_years.contains(&year) {
            Some(Split::Val)
        } else if self.test_years.contains(&year) {
            Some(Split::Test)
        } else if year <= self.train_max_year {
            Some(Split::Train)
        } else {
            None
        }
    }
}

/// A contiguous hourly run of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRun {
    pub start: HourStamp,
    pub n_hours: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout_version: u32,
    pub domain: Domain,
    /// Grid of the high-resolution precipitation group, when present.
    pub hires_grid: Option<GridSpec>,
    pub runs: Vec<TimeRun>,
    pub split: SplitConfig,
    pub hours_per_chunk: usize,
    pub has_precip: bool,
}

impl DatasetManifest {
    pub fn new(
        domain: Domain,
        hires_grid: Option<GridSpec>,
        runs: Vec<TimeRun>,
        split: SplitConfig,
        hours_per_chunk: usize,
    ) -> Result<Self> {
        if runs.is_empty() || runs.iter().any(|r| r.n_hours == 0) {
            return Err(CoreError::InvalidArgument(
                "manifest needs at least one non-empty run".into(),
            ));
        }
        if hours_per_chunk == 0 {
            return Err(CoreError::InvalidArgument("hours_per_chunk == 0".into()));
        }
        for pair in runs.windows(2) {
            let end = pair[0].start.plus_hours(pair[0].n_hours as i64);
            if pair[1].start < end {
                return Err(CoreError::InvalidArgument(
                    "time runs must be sorted and non-overlapping".into(),
                ));
            }
        }
        Ok(Self {
            layout_version: LAYOUT_VERSION,
            domain,
            hires_grid: hires_grid.clone(),
            runs,
            split,
            hours_per_chunk,
            has_precip: hires_grid.is_some(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.runs.iter().map(|r| r.n_hours).sum()
    }

    /// Timestamp of the sample at a global index.
    pub fn time_at(&self, index: usize) -> Option<HourStamp> {
        let mut base = 0;
        for run in &self.runs {
            if index < base + run.n_hours {
                return Some(run.start.plus_hours((index - base) as i64));
            }
            base += run.n_hours;
        }
        None
    }

    /// Global index of a timestamp, if present.
    pub fn index_of(&self, t: HourStamp) -> Option<usize> {
        let mut base = 0;
        for run in &self.runs {
            let offset = t.hours_since(run.start);
            if offset >= 0 && (offset as usize) < run.n_hours {
                return Some(base + offset as usize);
            }
            base += run.n_hours;
        }
        None
    }

    pub fn times(&self) -> impl Iterator<Item = HourStamp> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (0..r.n_hours).map(move |i| r.start.plus_hours(i as i64)))
    }

    /// Global indices belonging to a split, in time order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.times()
            .enumerate()
            .filter(|(_, t)| self.split.split_of(t.year()) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate_version(&self) -> Result<()> {
        if self.layout_version != LAYOUT_VERSION {
            return Err(CoreError::UnsupportedVersion {
                got: self.layout_version,
                supported: LAYOUT_VERSION,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VariableInventory;

    fn manifest_with_runs(runs: Vec<TimeRun>) -> Result<DatasetManifest> {
        let domain = Domain::new(GridSpec::toy(12, 12, 1).unwrap(), VariableInventory::full());
        DatasetManifest::new(domain, None, runs, SplitConfig::default(), 8)
    }

    #[test]
    fn index_time_round_trip_across_runs() {
        let m = manifest_with_runs(vec![
            TimeRun {
                start: HourStamp::new(2019, 1, 1, 0).unwrap(),
                n_hours: 10,
            },
            TimeRun {
                start: HourStamp::new(2020, 6, 1, 0).unwrap(),
                n_hours: 5,
            },
        ])
        .unwrap();
        assert_eq!(m.n_samples(), 15);
        for i in 0..15 {
            let t = m.time_at(i).unwrap();
            assert_eq!(m.index_of(t), Some(i));
        }
        assert_eq!(m.index_of(HourStamp::new(2021, 1, 1, 0).unwrap()), None);
    }

    #[test]
    fn overlapping_runs_rejected() {
        let r = manifest_with_runs(vec![
            TimeRun {
                start: HourStamp::new(2019, 1, 1, 0).unwrap(),
                n_hours: 10,
            },
            TimeRun {
                start: HourStamp::new(2019, 1, 1, 5).unwrap(),
                n_hours: 5,
            },
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn split_assignment_by_year() {
        let cfg = SplitConfig::default();
        assert_eq!(cfg.split_of(1979), Some(Split::Train));
        assert_eq!(cfg.split_of(2019), Some(Split::Train));
        assert_eq!(cfg.split_of(2020), Some(Split::Val));
        assert_eq!(cfg.split_of(2021), Some(Split::Test));
        assert_eq!(cfg.split_of(2022), None);
    }
}
