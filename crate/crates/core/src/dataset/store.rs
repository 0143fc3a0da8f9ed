//! Chunk-file reader and writer for the dataset layout.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::DatasetManifest;
use crate::error::{CoreError, Result};
use crate::state::WeatherState;
use crate::time::HourStamp;

const MANIFEST_FILE: &str = "manifest.json";
const TOPOGRAPHY_FILE: &str = "topography.rwb";

/// Default cache budget for decoded chunks.
const CACHE_BYTES_CAP: usize = 512 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    State,
    PrecipCoarse,
    PrecipHires,
}

impl Group {
    fn file_name(self, chunk: usize) -> String {
        let tag = match self {
            Group::State => "state",
            Group::PrecipCoarse => "precip_coarse",
            Group::PrecipHires => "precip_hires",
        };
        format!("{tag}_{chunk:06}.rwb")
    }
}

#[derive(Serialize, Deserialize)]
struct ChunkHeader {
    group: Group,
    chunk_index: usize,
    n_t: usize,
    /// Per-sample dims `[channels, n_lat, n_lon]`.
    dims: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct TopoHeader {
    dims: [usize; 2],
}

/// Everything loadable at one timestamp.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub state: WeatherState,
    pub topography: Arc<Array2<f32>>,
    pub precip_coarse: Option<Array2<f32>>,
    pub precip_hires: Option<Array2<f32>>,
    /// High-resolution precipitation one hour earlier, when stored.
    pub precip_hires_prev: Option<Array2<f32>>,
}

/// Single-writer, append-in-time-order dataset builder.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
    next_index: usize,
    state_buf: Vec<f32>,
    coarse_buf: Vec<f32>,
    hires_buf: Vec<f32>,
    buffered: usize,
    topography: Option<Array2<f32>>,
}

impl DatasetWriter {
    /// `root` must not already contain a dataset.
    pub fn create(root: &Path, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate_version()?;
        if root.join(MANIFEST_FILE).exists() {
            return Err(CoreError::InvalidArgument(format!(
                "{} already holds a dataset",
                root.display()
            )));
        }
        std::fs::create_dir_all(root.join("chunks"))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            next_index: 0,
            state_buf: Vec::new(),
            coarse_buf: Vec::new(),
            hires_buf: Vec::new(),
            buffered: 0,
            topography: None,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn set_topography(&mut self, topo: Array2<f32>) -> Result<()> {
        let grid = &self.manifest.domain.grid;
        if topo.dim() != (grid.n_lat, grid.n_lon) {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{:?}", (grid.n_lat, grid.n_lon)),
                got: format!("{:?}", topo.dim()),
            });
        }
        self.topography = Some(topo);
        Ok(())
    }

    /// Appends the next sample; timestamps must follow the manifest's runs
    /// exactly.
    pub fn append_hour(
        &mut self,
        state: &WeatherState,
        precip_coarse: Option<&Array2<f32>>,
        precip_hires: Option<&Array2<f32>>,
    ) -> Result<()> {
        let expected_t = self.manifest.time_at(self.next_index).ok_or_else(|| {
            CoreError::InvalidArgument("append past the end of the manifest's runs".into())
        })?;
        if state.timestamp() != expected_t {
            return Err(CoreError::InvalidArgument(format!(
                "expected sample at {expected_t}, got {}",
                state.timestamp()
            )));
        }
        if state.normalized() {
            return Err(CoreError::InvalidArgument(
                "datasets store physical-unit states".into(),
            ));
        }
        let domain = &self.manifest.domain;
        let expected_shape = (domain.n_channels(), domain.grid.n_lat, domain.grid.n_lon);
        if state.shape() != expected_shape {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{expected_shape:?}"),
                got: format!("{:?}", state.shape()),
            });
        }
        self.state_buf.extend(state.values().iter().copied());

        if self.manifest.has_precip {
            let coarse = precip_coarse.ok_or_else(|| {
                CoreError::InvalidArgument("manifest declares precipitation groups".into())
            })?;
            let hires = precip_hires.ok_or_else(|| {
                CoreError::InvalidArgument("manifest declares precipitation groups".into())
            })?;
            let hgrid = self.manifest.hires_grid.as_ref().unwrap();
            if coarse.dim() != (domain.grid.n_lat, domain.grid.n_lon)
                || hires.dim() != (hgrid.n_lat, hgrid.n_lon)
            {
                return Err(CoreError::ShapeMismatch {
                    expected: "precipitation on the declared grids".into(),
                    got: format!("{:?} / {:?}", coarse.dim(), hires.dim()),
                });
            }
            self.coarse_buf.extend(coarse.iter().copied());
            self.hires_buf.extend(hires.iter().copied());
        }

        self.buffered += 1;
        self.next_index += 1;
        if self.buffered == self.manifest.hours_per_chunk {
            self.flush_chunk()?;
        }
        Ok(())
    }

    fn flush_chunk(&mut self) -> Result<()> {
        if self.buffered == 0 {
            return Ok(());
        }
        let chunk_index = (self.next_index - 1) / self.manifest.hours_per_chunk;
        let domain = &self.manifest.domain;
        let write = |group: Group, dims: [usize; 3], data: &[f32]| -> Result<()> {
            let header = ChunkHeader {
                group,
                chunk_index,
                n_t: self.buffered,
                dims,
            };
            let path = self.root.join("chunks").join(group.file_name(chunk_index));
            crate::blob::write_blob(&path, &header, data)
        };
        write(
            Group::State,
            [domain.n_channels(), domain.grid.n_lat, domain.grid.n_lon],
            &self.state_buf,
        )?;
        if self.manifest.has_precip {
            let hgrid = self.manifest.hires_grid.as_ref().unwrap();
            write(
                Group::PrecipCoarse,
                [1, domain.grid.n_lat, domain.grid.n_lon],
                &self.coarse_buf,
            )?;
            write(
                Group::PrecipHires,
                [1, hgrid.n_lat, hgrid.n_lon],
                &self.hires_buf,
            )?;
        }
        self.state_buf.clear();
        self.coarse_buf.clear();
        self.hires_buf.clear();
        self.buffered = 0;
        Ok(())
    }

    /// Flushes the tail chunk and writes topography plus the manifest.
    pub fn finish(mut self) -> Result<()> {
        if self.next_index != self.manifest.n_samples() {
            return Err(CoreError::InvalidArgument(format!(
                "manifest declares {} samples, {} were appended",
                self.manifest.n_samples(),
                self.next_index
            )));
        }
        self.flush_chunk()?;
        let topo = self.topography.take().ok_or_else(|| {
            CoreError::InvalidArgument("topography must be set before finish".into())
        })?;
        let header = TopoHeader {
            dims: [topo.dim().0, topo.dim().1],
        };
        let data: Vec<f32> = topo.iter().copied().collect();
        crate::blob::write_blob(&self.root.join(TOPOGRAPHY_FILE), &header, &data)?;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.root.join(MANIFEST_FILE), json)?;
        Ok(())
    }
}

/// Thread-safe reader with a decoded-chunk cache.
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
    topography: Arc<Array2<f32>>,
    cache: Mutex<ChunkCache>,
}

struct ChunkCache {
    map: HashMap<(Group, usize), Arc<Vec<f32>>>,
    bytes: usize,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&json)?;
        manifest.validate_version()?;
        let (header, data): (TopoHeader, Vec<f32>) =
            crate::blob::read_blob(&root.join(TOPOGRAPHY_FILE))?;
        let topography = Array2::from_shape_vec((header.dims[0], header.dims[1]), data)
            .map_err(|e| CoreError::CorruptFile {
                path: TOPOGRAPHY_FILE.into(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            topography: Arc::new(topography),
            cache: Mutex::new(ChunkCache {
                map: HashMap::new(),
                bytes: 0,
            }),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn topography(&self) -> Arc<Array2<f32>> {
        Arc::clone(&self.topography)
    }

    fn chunk(&self, group: Group, chunk_index: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(hit) = self.cache.lock().unwrap().map.get(&(group, chunk_index)) {
            return Ok(Arc::clone(hit));
        }
        let path = self.root.join("chunks").join(group.file_name(chunk_index));
        let (header, data): (ChunkHeader, Vec<f32>) = crate::blob::read_blob(&path)?;
        let per_sample: usize = header.dims.iter().product();
        if header.group != group
            || header.chunk_index != chunk_index
            || data.len() != header.n_t * per_sample
        {
            return Err(CoreError::CorruptFile {
                path: path.display().to_string(),
                reason: "header does not match payload".into(),
            });
        }
        let data = Arc::new(data);
        let mut cache = self.cache.lock().unwrap();
        cache.bytes += data.len() * 4;
        if cache.bytes > CACHE_BYTES_CAP {
            cache.map.clear();
            cache.bytes = data.len() * 4;
        }
        cache.map.insert((group, chunk_index), Arc::clone(&data));
        Ok(data)
    }

    fn index_of(&self, t: HourStamp) -> Result<usize> {
        self.manifest
            .index_of(t)
            .ok_or_else(|| CoreError::MissingTimestamp(t.to_string()))
    }

    fn sample_slice(&self, group: Group, index: usize, per_sample: usize) -> Result<Vec<f32>> {
        let chunk_index = index / self.manifest.hours_per_chunk;
        let local = index % self.manifest.hours_per_chunk;
        let data = self.chunk(group, chunk_index)?;
        let start = local * per_sample;
        if start + per_sample > data.len() {
            return Err(CoreError::CorruptFile {
                path: group.file_name(chunk_index),
                reason: format!("sample {local} out of range"),
            });
        }
        Ok(data[start..start + per_sample].to_vec())
    }

    /// State in physical units; repeated loads return identical values.
    pub fn load_state(&self, t: HourStamp) -> Result<WeatherState> {
        let index = self.index_of(t)?;
        let domain = &self.manifest.domain;
        let (c, h, w) = (domain.n_channels(), domain.grid.n_lat, domain.grid.n_lon);
        let data = self.sample_slice(Group::State, index, c * h * w)?;
        let values = Array3::from_shape_vec((c, h, w), data).expect("sized above");
        WeatherState::new(values, t, false, domain)
    }

    /// Consecutive hourly states starting at `t0`; equivalent to `n` calls
    /// of [`DatasetReader::load_state`].
    pub fn load_states(&self, t0: HourStamp, n: usize) -> Result<Vec<WeatherState>> {
        (0..n)
            .map(|i| self.load_state(t0.plus_hours(i as i64)))
            .collect()
    }

    pub fn load_precip_coarse(&self, t: HourStamp) -> Result<Array2<f32>> {
        self.load_precip(Group::PrecipCoarse, t)
    }

    pub fn load_precip_hires(&self, t: HourStamp) -> Result<Array2<f32>> {
        self.load_precip(Group::PrecipHires, t)
    }

    fn load_precip(&self, group: Group, t: HourStamp) -> Result<Array2<f32>> {
        if !self.manifest.has_precip {
            return Err(CoreError::InvalidArgument(
                "dataset has no precipitation groups".into(),
            ));
        }
        let index = self.index_of(t)?;
        let (h, w) = match group {
            Group::PrecipHires => {
                let g = self.manifest.hires_grid.as_ref().unwrap();
                (g.n_lat, g.n_lon)
            }
            _ => (
                self.manifest.domain.grid.n_lat,
                self.manifest.domain.grid.n_lon,
            ),
        };
        let data = self.sample_slice(group, index, h * w)?;
        Ok(Array2::from_shape_vec((h, w), data).expect("sized above"))
    }

    /// Full record at `t`; the previous-hour high-resolution field is
    /// included when `t - 1h` exists in the dataset.
    pub fn load_sample(&self, t: HourStamp) -> Result<SampleRecord> {
        let state = self.load_state(t)?;
        let (precip_coarse, precip_hires, precip_hires_prev) = if self.manifest.has_precip {
            let prev_t = t.plus_hours(-1);
            let prev = if self.manifest.index_of(prev_t).is_some() {
                Some(self.load_precip_hires(prev_t)?)
            } else {
                None
            };
            (
                Some(self.load_precip_coarse(t)?),
                Some(self.load_precip_hires(t)?),
                prev,
            )
        } else {
            (None, None, None)
        };
        Ok(SampleRecord {
            state,
            topography: self.topography(),
            precip_coarse,
            precip_hires,
            precip_hires_prev,
        })
    }
}
