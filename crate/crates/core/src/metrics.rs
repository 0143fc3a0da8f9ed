//! Forecast verification: latitude-weighted RMSE, anomaly correlation, and
//! threshold-based precipitation scores.

use ndarray::ArrayView2;

use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

/// Per-row latitude weights `w_i = cos(lat_i)`, broadcast over longitude.
///
/// The default is the literal unnormalized form (the weighted mean square is
/// `sum(w * e^2) / N`); [`LatWeights::mean_normalized`] rescales so the
/// weights average to one, which some evaluation suites prefer.
#[derive(Debug, Clone)]
pub struct LatWeights {
    weights: Vec<f64>,
    pub normalized: bool,
}

impl LatWeights {
    pub fn from_grid(grid: &GridSpec) -> Result<Self> {
        Self::from_latitudes(&grid.latitudes())
    }

    pub fn from_latitudes(latitudes: &[f64]) -> Result<Self> {
        let weights: Vec<f64> = latitudes
            .iter()
            .map(|lat| (lat * std::f64::consts::PI / 180.0).cos())
            .collect();
        if weights.iter().any(|&w| !(w > 0.0) || w > 1.0) {
            return Err(CoreError::InvalidArgument(
                "latitude weights must lie in (0, 1]".into(),
            ));
        }
        Ok(Self {
            weights,
            normalized: false,
        })
    }

    /// Equal weights (all ones): plain unweighted metrics.
    pub fn uniform(n_lat: usize) -> Self {
        Self {
            weights: vec![1.0; n_lat],
            normalized: false,
        }
    }

    /// Rescales weights so their mean is exactly one.
    pub fn mean_normalized(&self) -> Self {
        let mean = self.weights.iter().sum::<f64>() / self.weights.len() as f64;
        Self {
            weights: self.weights.iter().map(|w| w / mean).collect(),
            normalized: true,
        }
    }

    pub fn row(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_pair(pred: &ArrayView2<f64>, obs: &ArrayView2<f64>, weights: &LatWeights) -> Result<()> {
    if pred.dim() != obs.dim() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{:?}", obs.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    if pred.dim().0 != weights.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} weight rows", pred.dim().0),
            got: format!("{}", weights.len()),
        });
    }
    if pred.iter().chain(obs.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "metric input".into(),
        });
    }
    Ok(())
}

/// `sqrt( (1/N) * sum_i w_i (y_i - yhat_i)^2 )` over all grid points.
pub fn weighted_rmse(
    pred: &ArrayView2<f64>,
    obs: &ArrayView2<f64>,
    weights: &LatWeights,
) -> Result<f64> {
    check_pair(pred, obs, weights)?;
    let (h, w) = pred.dim();
    let mut acc = 0.0;
    for i in 0..h {
        let wi = weights.row(i);
        for j in 0..w {
            let e = pred[[i, j]] - obs[[i, j]];
            acc += wi * e * e;
        }
    }
    Ok((acc / (h * w) as f64).sqrt())
}

/// How anomalies are formed before the weighted correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyMode {
    /// Departures from a reference climatology, then centered by their
    /// weighted means. The default.
    Climatology,
    /// Literal field-mean centering, no climatology involved.
    FieldMean,
}

/// Latitude-weighted anomaly correlation in `[-1, 1]`.
///
/// `climatology` is required in [`AnomalyMode::Climatology`] and ignored in
/// [`AnomalyMode::FieldMean`]. A zero-variance anomaly field is an error
/// rather than a silent NaN.
pub fn weighted_acc(
    pred: &ArrayView2<f64>,
    obs: &ArrayView2<f64>,
    climatology: Option<&ArrayView2<f64>>,
    weights: &LatWeights,
    mode: AnomalyMode,
) -> Result<f64> {
    check_pair(pred, obs, weights)?;
    let (h, w) = pred.dim();

    let anomaly_at = |field: &ArrayView2<f64>, i: usize, j: usize| -> Result<f64> {
        match mode {
            AnomalyMode::Climatology => {
                let clim = climatology.ok_or_else(|| {
                    CoreError::InvalidArgument("climatology required in Climatology mode".into())
                })?;
                if clim.dim() != pred.dim() {
                    return Err(CoreError::ShapeMismatch {
                        expected: format!("{:?}", pred.dim()),
                        got: format!("{:?}", clim.dim()),
                    });
                }
                Ok(field[[i, j]] - clim[[i, j]])
            }
            AnomalyMode::FieldMean => Ok(field[[i, j]]),
        }
    };

    // Centering: weighted anomaly means in Climatology mode, plain field
    // means in the literal mode.
    let mut sum_w = 0.0;
    let mut mean_a = 0.0;
    let mut mean_b = 0.0;
    for i in 0..h {
        let wi = if mode == AnomalyMode::Climatology {
            weights.row(i)
        } else {
            1.0
        };
        for j in 0..w {
            mean_a += wi * anomaly_at(pred, i, j)?;
            mean_b += wi * anomaly_at(obs, i, j)?;
            sum_w += wi;
        }
    }
    mean_a /= sum_w;
    mean_b /= sum_w;

    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for i in 0..h {
        let wi = weights.row(i);
        for j in 0..w {
            let a = anomaly_at(pred, i, j)? - mean_a;
            let b = anomaly_at(obs, i, j)? - mean_b;
            num += wi * a * b;
            da += wi * a * a;
            db += wi * b * b;
        }
    }
    if da <= 0.0 || db <= 0.0 {
        return Err(CoreError::DegenerateAnomaly);
    }
    Ok(num / (da.sqrt() * db.sqrt()))
}

/// Hit/miss/false-alarm/true-negative counts at one threshold; an event is
/// `value >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
    pub true_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.false_alarms + self.misses + self.true_negatives
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            hits: self.hits + other.hits,
            false_alarms: self.false_alarms + other.false_alarms,
            misses: self.misses + other.misses,
            true_negatives: self.true_negatives + other.true_negatives,
        }
    }

    /// Threat score `hits / (hits + false alarms + misses)`; `None` when the
    /// denominator is zero (undefined, not 0).
    pub fn ts(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.false_alarms + self.misses)
    }

    /// Probability of detection `hits / (hits + misses)`.
    pub fn pod(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.misses)
    }

    /// False alarm ratio `false alarms / (hits + false alarms)`.
    pub fn far(&self) -> Option<f64> {
        ratio(self.false_alarms, self.hits + self.false_alarms)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn contingency(
    pred: &ArrayView2<f64>,
    obs: &ArrayView2<f64>,
    threshold: f64,
) -> Result<ContingencyCounts> {
    if threshold < 0.0 {
        return Err(CoreError::NegativeThreshold(threshold));
    }
    if pred.dim() != obs.dim() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{:?}", obs.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let mut counts = ContingencyCounts {
        hits: 0,
        false_alarms: 0,
        misses: 0,
        true_negatives: 0,
    };
    for (&p, &o) in pred.iter().zip(obs.iter()) {
        match (p >= threshold, o >= threshold) {
            (true, true) => counts.hits += 1,
            (true, false) => counts.false_alarms += 1,
            (false, true) => counts.misses += 1,
            (false, false) => counts.true_negatives += 1,
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn rmse_zero_on_equal_fields() {
        let f = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        let w = LatWeights::from_latitudes(&[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(weighted_rmse(&f.view(), &f.view(), &w).unwrap(), 0.0);
    }

    #[test]
    fn rmse_equator_reduces_to_plain() {
        // all phi = 0 -> w = 1 everywhere; |pred-obs| = 2 -> rmse 2
        let pred = Array2::from_elem((3, 4), 5.0);
        let obs = Array2::from_elem((3, 4), 3.0);
        let w = LatWeights::from_latitudes(&[0.0, 0.0, 0.0]).unwrap();
        assert!((weighted_rmse(&pred.view(), &obs.view(), &w).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn full_grid_weight_at_60n_is_half() {
        let w = LatWeights::from_grid(&GridSpec::china_quarter_degree()).unwrap();
        assert!((w.row(0) - 0.5).abs() < 1e-12);
        assert!((w.row(240) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acc_perfect_and_anti_correlation() {
        let clim = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f64);
        let anom = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64).sin());
        let pred = &clim + &anom;
        let w = LatWeights::from_latitudes(&[5.0, 10.0, 15.0, 20.0]).unwrap();
        let acc = weighted_acc(
            &pred.view(),
            &pred.view(),
            Some(&clim.view()),
            &w,
            AnomalyMode::Climatology,
        )
        .unwrap();
        assert!((acc - 1.0).abs() < 1e-12);

        let anti = &clim - &anom;
        let acc = weighted_acc(
            &pred.view(),
            &anti.view(),
            Some(&clim.view()),
            &w,
            AnomalyMode::Climatology,
        )
        .unwrap();
        assert!((acc + 1.0).abs() < 1e-12);
    }

    #[test]
    fn acc_zero_variance_is_reported() {
        let clim = Array2::zeros((4, 4));
        let flat = Array2::from_elem((4, 4), 2.0);
        let w = LatWeights::uniform(4);
        assert!(matches!(
            weighted_acc(
                &flat.view(),
                &flat.view(),
                Some(&clim.view()),
                &w,
                AnomalyMode::Climatology
            ),
            Err(CoreError::DegenerateAnomaly)
        ));
    }

    #[test]
    fn acc_constant_shift_invariance() {
        let clim = Array2::from_shape_fn((5, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        let pred = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).cos());
        let obs = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).sin());
        let w = LatWeights::from_latitudes(&[0.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let base = weighted_acc(
            &pred.view(),
            &obs.view(),
            Some(&clim.view()),
            &w,
            AnomalyMode::Climatology,
        )
        .unwrap();
        let shifted_pred = &pred + 7.5;
        let shifted_obs = &obs + 7.5;
        let shifted = weighted_acc(
            &shifted_pred.view(),
            &shifted_obs.view(),
            Some(&clim.view()),
            &w,
            AnomalyMode::Climatology,
        )
        .unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn contingency_trivial_cases() {
        let a = Array2::from_elem((3, 3), 2.0);
        let b = Array2::from_elem((3, 3), 0.0);
        // pred == obs: no false alarms or misses
        let c = contingency(&a.view(), &a.view(), 1.0).unwrap();
        assert_eq!((c.false_alarms, c.misses), (0, 0));
        assert_eq!(c.total(), 9);
        // pred all >= tau, obs all < tau: all false alarms
        let c = contingency(&a.view(), &b.view(), 1.0).unwrap();
        assert_eq!(c.false_alarms, 9);
        assert!(contingency(&a.view(), &b.view(), -1.0).is_err());
    }

    #[test]
    fn scores_direct_arithmetic() {
        let c = ContingencyCounts {
            hits: 2,
            false_alarms: 1,
            misses: 1,
            true_negatives: 10,
        };
        assert_eq!(c.ts(), Some(0.5));
        assert_eq!(c.pod(), Some(2.0 / 3.0));
        assert_eq!(c.far(), Some(1.0 / 3.0));
    }

    #[test]
    fn scores_all_hits_and_undefined() {
        let all_hits = ContingencyCounts {
            hits: 5,
            false_alarms: 0,
            misses: 0,
            true_negatives: 0,
        };
        assert_eq!(all_hits.ts(), Some(1.0));
        assert_eq!(all_hits.pod(), Some(1.0));
        assert_eq!(all_hits.far(), Some(0.0));

        let none = ContingencyCounts {
            hits: 0,
            false_alarms: 0,
            misses: 0,
            true_negatives: 4,
        };
        assert_eq!(none.ts(), None);
        assert_eq!(none.pod(), None);
        assert_eq!(none.far(), None);
    }

    #[test]
    fn ts_never_exceeds_pod() {
        let c = ContingencyCounts {
            hits: 3,
            false_alarms: 2,
            misses: 4,
            true_negatives: 1,
        };
        assert!(c.ts().unwrap() <= c.pod().unwrap());
    }
}
