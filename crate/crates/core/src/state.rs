//! Weather states and lateral boundary strips.

use ndarray::{Array3, ArrayView3};

use crate::error::{CoreError, Result};
use crate::grid::Domain;
use crate::time::HourStamp;

/// One time slice of every channel on the grid. Immutable after
/// construction; `normalized` records whether values are z-scored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherState {
    values: Array3<f32>,
    timestamp: HourStamp,
    normalized: bool,
}

impl WeatherState {
    /// Validates shape against the domain and rejects non-finite values.
    pub fn new(
        values: Array3<f32>,
        timestamp: HourStamp,
        normalized: bool,
        domain: &Domain,
    ) -> Result<Self> {
        let (c, h, w) = values.dim();
        let expected = (domain.n_channels(), domain.grid.n_lat, domain.grid.n_lon);
        if (c, h, w) != expected {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{expected:?}"),
                got: format!("{:?}", (c, h, w)),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("weather state at {timestamp}"),
            });
        }
        Ok(Self {
            values,
            timestamp,
            normalized,
        })
    }

    pub fn values(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn timestamp(&self) -> HourStamp {
        self.timestamp
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Same values under a new timestamp (used when a model output becomes
    /// the state at a later hour).
    pub fn with_timestamp(mut self, timestamp: HourStamp) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub(crate) fn from_validated(
        values: Array3<f32>,
        timestamp: HourStamp,
        normalized: bool,
    ) -> Self {
        Self {
            values,
            timestamp,
            normalized,
        }
    }
}

/// The outermost pixels of a target-time state, flattened to
/// `[channel, width, perimeter]`.
///
/// Perimeter layout, fixed by this crate: top strip (all `n_lon` columns),
/// then bottom, then left (all `n_lat` rows), then right. Within a strip the
/// width index counts inward from the domain edge, so corner pixels appear
/// exactly twice: once in a horizontal strip and once in a vertical one.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryStrip {
    values: Array3<f32>,
    width: usize,
    timestamp: HourStamp,
    normalized: bool,
}

impl BoundaryStrip {
    pub fn values(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn perimeter_len(&self) -> usize {
        self.values.dim().2
    }

    pub fn timestamp(&self) -> HourStamp {
        self.timestamp
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn from_parts(
        values: Array3<f32>,
        width: usize,
        timestamp: HourStamp,
        normalized: bool,
    ) -> Self {
        Self {
            values,
            width,
            timestamp,
            normalized,
        }
    }
}

/// Extracts the `width` outermost pixels of each edge.
///
/// The output perimeter axis is `2*n_lon + 2*n_lat` long regardless of
/// width; see [`BoundaryStrip`] for the layout.
pub fn extract_boundary(state: &WeatherState, width: usize) -> Result<BoundaryStrip> {
    let (c, n_lat, n_lon) = state.shape();
    if width < 1 {
        return Err(CoreError::InvalidArgument("width must be >= 1".into()));
    }
    if n_lat <= 2 * width || n_lon <= 2 * width {
        return Err(CoreError::GridTooSmall(format!(
            "{n_lat}x{n_lon} cannot supply a width-{width} boundary"
        )));
    }
    let perimeter = 2 * n_lon + 2 * n_lat;
    let mut out = Array3::<f32>::zeros((c, width, perimeter));
    let v = state.values();
    for ch in 0..c {
        for w in 0..width {
            for j in 0..n_lon {
                // top: row w counting inward from the northern edge
                out[[ch, w, j]] = v[[ch, w, j]];
                // bottom: row w counting inward from the southern edge
                out[[ch, w, n_lon + j]] = v[[ch, n_lat - 1 - w, j]];
            }
            for i in 0..n_lat {
                // left: column w counting inward from the western edge
                out[[ch, w, 2 * n_lon + i]] = v[[ch, i, w]];
                // right: column w counting inward from the eastern edge
                out[[ch, w, 2 * n_lon + n_lat + i]] = v[[ch, i, n_lon - 1 - w]];
            }
        }
    }
    Ok(BoundaryStrip::from_parts(
        out,
        width,
        state.timestamp(),
        state.normalized(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, PressureVar, SurfaceVar, VariableInventory};
    use ndarray::Array3;

    fn toy_domain(n_lat: usize, n_lon: usize) -> Domain {
        let grid = GridSpec::toy(n_lat, n_lon, 2).unwrap();
        let inv = VariableInventory::new(
            vec![SurfaceVar::T2m, SurfaceVar::U10],
            vec![PressureVar::Z, PressureVar::T],
        )
        .unwrap();
        Domain::new(grid, inv)
    }

    fn t0() -> HourStamp {
        HourStamp::new(2019, 1, 1, 0).unwrap()
    }

    #[test]
    fn state_rejects_nan() {
        let d = toy_domain(12, 16);
        let mut values = Array3::<f32>::zeros((d.n_channels(), 12, 16));
        values[[0, 0, 0]] = f32::NAN;
        assert!(WeatherState::new(values, t0(), false, &d).is_err());
    }

    #[test]
    fn state_rejects_wrong_shape() {
        let d = toy_domain(12, 16);
        let values = Array3::<f32>::zeros((d.n_channels(), 12, 15));
        assert!(matches!(
            WeatherState::new(values, t0(), false, &d),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn boundary_constant_field() {
        // constant 2-channel 12x16 state -> constant strip, perimeter 56
        let grid = GridSpec::toy(12, 16, 1).unwrap();
        let inv = VariableInventory::new(vec![SurfaceVar::T2m], vec![PressureVar::Z]).unwrap();
        let d = Domain::new(grid, inv);
        assert_eq!(d.n_channels(), 2);
        let values = Array3::<f32>::from_elem((2, 12, 16), 3.5);
        let state = WeatherState::new(values, t0(), false, &d).unwrap();
        let strip = extract_boundary(&state, 2).unwrap();
        assert_eq!(strip.perimeter_len(), 2 * 16 + 2 * 12);
        assert!(strip.values().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn boundary_rejects_small_grid() {
        let d = toy_domain(12, 16);
        let values = Array3::<f32>::zeros((d.n_channels(), 12, 16));
        let state = WeatherState::new(values, t0(), false, &d).unwrap();
        // 12 <= 2*6
        assert!(matches!(
            extract_boundary(&state, 6),
            Err(CoreError::GridTooSmall(_))
        ));
    }

    #[test]
    fn boundary_layout_and_corner_duplication() {
        let d = toy_domain(12, 16);
        let c = d.n_channels();
        let mut values = Array3::<f32>::zeros((c, 12, 16));
        for ch in 0..c {
            for i in 0..12 {
                for j in 0..16 {
                    values[[ch, i, j]] = (ch * 1000 + i * 16 + j) as f32;
                }
            }
        }
        let state = WeatherState::new(values.clone(), t0(), false, &d).unwrap();
        let strip = extract_boundary(&state, 4).unwrap();
        let s = strip.values();
        // top strip row 1, column 5
        assert_eq!(s[[1, 1, 5]], values[[1, 1, 5]]);
        // bottom strip counts inward from the southern edge
        assert_eq!(s[[0, 0, 16 + 3]], values[[0, 11, 3]]);
        // left strip after both horizontal strips
        assert_eq!(s[[2, 2, 32 + 7]], values[[2, 7, 2]]);
        // right strip counts inward from the eastern edge
        assert_eq!(s[[0, 1, 32 + 12 + 9]], values[[0, 9, 14]]);
        // corner (0,0) appears in both top and left at width 0
        assert_eq!(s[[0, 0, 0]], values[[0, 0, 0]]);
        assert_eq!(s[[0, 0, 32]], values[[0, 0, 0]]);
    }
}
