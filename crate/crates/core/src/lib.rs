//! Grid geometry, value transforms, chunked dataset storage, synthetic data
//! and forecast verification for a regional weather-emulation pipeline.

pub mod blob;
pub mod climatology;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod grid;
pub mod interp;
pub mod metrics;
pub mod state;
pub mod time;
pub mod transform;

pub use error::{CoreError, Result};
pub use grid::{Domain, GridSpec, PressureVar, SurfaceVar, VariableInventory};
pub use state::{extract_boundary, BoundaryStrip, WeatherState};
pub use time::HourStamp;
pub use transform::NormStats;
