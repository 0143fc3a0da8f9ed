//! Greedy composition of fixed-lead models into an iterative forecast.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::Tensor;
use ndarray::Array2;

use crate::error::{ModelError, Result};
use crate::swin::Forecaster;
use crate::tensor::{array3_from_tensor, tensor_from_array2, tensor_from_array3};
use regioncast_core::dataset::DatasetReader;
use regioncast_core::transform::{normalize, normalize_boundary, normalize_topography};
use regioncast_core::{
    extract_boundary, BoundaryStrip, HourStamp, NormStats, WeatherState,
};

/// Step sizes available for composition, largest first.
pub const STEP_SIZES_HOURS: [u32; 4] = [24, 6, 3, 1];

pub const MAX_LEAD_HOURS: u32 = 120;

/// An ordered, non-increasing step decomposition of a lead time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutPlan {
    steps: Vec<u32>,
}

impl RolloutPlan {
    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn total_hours(&self) -> u32 {
        self.steps.iter().sum()
    }

    /// Cumulative lead after each step.
    pub fn cumulative_leads(&self) -> Vec<u32> {
        self.steps
            .iter()
            .scan(0u32, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    }
}

/// Largest-step-first decomposition of `lead_hours` over {24, 6, 3, 1};
/// minimal in step count because each denomination divides the next.
pub fn greedy_plan(lead_hours: u32) -> Result<RolloutPlan> {
    if lead_hours < 1 || lead_hours > MAX_LEAD_HOURS {
        return Err(ModelError::InvalidArgument(format!(
            "lead {lead_hours} outside 1..={MAX_LEAD_HOURS}"
        )));
    }
    let mut remaining = lead_hours;
    let mut steps = Vec::new();
    while remaining > 0 {
        let step = STEP_SIZES_HOURS
            .iter()
            .copied()
            .find(|&s| s <= remaining)
            .expect("1 always fits");
        steps.push(step);
        remaining -= step;
    }
    Ok(RolloutPlan { steps })
}

/// One fixed-lead forecast step in normalized space.
pub trait StepModel: Send + Sync {
    fn lead_hours(&self) -> u32;

    /// `state` and `boundary` are normalized; the result must be the
    /// normalized state at `state.timestamp() + lead_hours`.
    fn step(&self, state: &WeatherState, boundary: Option<&BoundaryStrip>)
        -> Result<WeatherState>;
}

/// Supplies lateral boundary strips, in physical units, for any requested
/// valid time. `Ok(None)` means this provider deliberately supplies no
/// forcing (models fall back to the learned null token); failures to
/// produce a promised strip are errors.
pub trait BoundaryProvider: Send + Sync {
    fn strip_at(&self, time: HourStamp) -> Result<Option<BoundaryStrip>>;
}

/// Ground-truth boundaries read from a dataset (the evaluation setting:
/// reanalysis supplies the forcing).
pub struct DatasetBoundaries {
    reader: Arc<DatasetReader>,
    width: usize,
}

impl DatasetBoundaries {
    pub fn new(reader: Arc<DatasetReader>, width: usize) -> Self {
        Self { reader, width }
    }
}

impl BoundaryProvider for DatasetBoundaries {
    fn strip_at(&self, time: HourStamp) -> Result<Option<BoundaryStrip>> {
        let state = self
            .reader
            .load_state(time)
            .map_err(|e| ModelError::Boundary(e.to_string()))?;
        Ok(Some(extract_boundary(&state, self.width)?))
    }
}

/// No boundary forcing: models fall back to their learned null token.
pub struct NoBoundaries;

impl BoundaryProvider for NoBoundaries {
    fn strip_at(&self, _time: HourStamp) -> Result<Option<BoundaryStrip>> {
        Ok(None)
    }
}

/// The forecaster wrapped as a step model with its static inputs attached.
pub struct ForecastStepModel {
    model: Forecaster,
    topography: Tensor,
    lead_hours: u32,
}

impl ForecastStepModel {
    /// `topography` in physical units; normalized here once.
    pub fn new(model: Forecaster, topography: &Array2<f32>, stats: &NormStats) -> Result<Self> {
        let topo_norm = normalize_topography(&topography.view(), stats);
        let topo = tensor_from_array2(&topo_norm.view(), model.dtype(), model.device())?
            .unsqueeze(0)?
            .unsqueeze(0)?;
        let lead_hours = model.config().lead_hours;
        Ok(Self {
            model,
            topography: topo,
            lead_hours,
        })
    }

    pub fn forecaster(&self) -> &Forecaster {
        &self.model
    }
}

impl StepModel for ForecastStepModel {
    fn lead_hours(&self) -> u32 {
        self.lead_hours
    }

    fn step(
        &self,
        state: &WeatherState,
        boundary: Option<&BoundaryStrip>,
    ) -> Result<WeatherState> {
        if !state.normalized() {
            return Err(ModelError::InvalidArgument(
                "step models run in normalized space".into(),
            ));
        }
        let x = tensor_from_array3(&state.values(), self.model.dtype(), self.model.device())?
            .unsqueeze(0)?;
        let b = match boundary {
            Some(strip) => {
                if strip.timestamp() != state.timestamp().plus_hours(self.lead_hours as i64) {
                    return Err(ModelError::Boundary(format!(
                        "boundary at {} for a step targeting {}",
                        strip.timestamp(),
                        state.timestamp().plus_hours(self.lead_hours as i64)
                    )));
                }
                if !strip.normalized() {
                    return Err(ModelError::InvalidArgument(
                        "boundary must be normalized".into(),
                    ));
                }
                Some(
                    tensor_from_array3(&strip.values(), self.model.dtype(), self.model.device())?
                        .unsqueeze(0)?,
                )
            }
            None => None,
        };
        let out = self
            .model
            .forward(&x, b.as_ref(), &self.topography, true)?
            .squeeze(0)?;
        let values = array3_from_tensor(&out)?;
        let target = state.timestamp().plus_hours(self.lead_hours as i64);
        Ok(WeatherState::new(
            values,
            target,
            true,
            &domain_of(self.model.config()),
        )?)
    }
}

fn domain_of(cfg: &crate::swin::ForecasterConfig) -> regioncast_core::Domain {
    // Shape validation only; variable identities do not matter here, so a
    // synthetic inventory of the right size is enough.
    use regioncast_core::{GridSpec, PressureVar, SurfaceVar, VariableInventory};
    let grid = GridSpec {
        lat_start: 0.0,
        lat_end: (cfg.n_lat - 1) as f64 * 0.25,
        lon_start: 70.0,
        lon_end: 70.0 + (cfg.n_lon - 1) as f64 * 0.25,
        resolution: 0.25,
        n_lat: cfg.n_lat,
        n_lon: cfg.n_lon,
        pressure_levels: (0..cfg.n_levels).map(|i| 100.0 + i as f64).collect(),
    };
    let inventory = VariableInventory::new(
        SurfaceVar::ALL[..cfg.n_surface_vars].to_vec(),
        PressureVar::ALL[..cfg.n_pressure_vars].to_vec(),
    )
    .expect("canonical prefixes are valid");
    regioncast_core::Domain::new(grid, inventory)
}

/// Output of one rollout: the emitted state at every cumulative lead.
pub struct RolloutOutput {
    pub plan: RolloutPlan,
    /// `(lead_hours, physical-unit state)`, ascending.
    pub states: Vec<(u32, WeatherState)>,
}

/// Applies the greedy plan for `lead_hours`, feeding each step the boundary
/// strip at that step's target time. Chaining happens in normalized space;
/// denormalization occurs only at emission.
pub fn rollout(
    models: &BTreeMap<u32, Arc<dyn StepModel>>,
    x0: &WeatherState,
    provider: &dyn BoundaryProvider,
    lead_hours: u32,
    stats: &NormStats,
) -> Result<RolloutOutput> {
    let plan = greedy_plan(lead_hours)?;
    for step in plan.steps() {
        let model = models
            .get(step)
            .ok_or(ModelError::MissingModel(*step))?;
        if model.lead_hours() != *step {
            return Err(ModelError::InvalidArgument(format!(
                "model registered for {step}h reports lead {}",
                model.lead_hours()
            )));
        }
    }
    let mut current = normalize(x0, stats)?;
    let mut states = Vec::with_capacity(plan.steps().len());
    let mut cumulative = 0u32;
    for step in plan.steps() {
        cumulative += step;
        let target = x0.timestamp().plus_hours(cumulative as i64);
        let boundary = match provider.strip_at(target)? {
            Some(strip) => Some(normalize_boundary(&strip, stats)?),
            None => None,
        };
        let model = &models[step];
        current = model.step(&current, boundary.as_ref())?;
        states.push((
            cumulative,
            regioncast_core::transform::denormalize(&current, stats)?,
        ));
    }
    Ok(RolloutOutput { plan, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_plan_examples() {
        assert_eq!(greedy_plan(1).unwrap().steps(), &[1]);
        assert_eq!(greedy_plan(29).unwrap().steps(), &[24, 3, 1, 1]);
        assert_eq!(greedy_plan(120).unwrap().steps(), &[24; 5]);
        assert_eq!(greedy_plan(5).unwrap().steps(), &[3, 1, 1]);
        assert!(greedy_plan(0).is_err());
        assert!(greedy_plan(121).is_err());
    }

    #[test]
    fn plans_are_non_increasing_and_sum() {
        for lead in 1..=MAX_LEAD_HOURS {
            let plan = greedy_plan(lead).unwrap();
            assert_eq!(plan.total_hours(), lead);
            assert!(plan.steps().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    /// Breadth-first minimum step count over the denominations.
    fn bfs_min_steps(lead: u32) -> usize {
        let lead = lead as usize;
        let mut dist = vec![usize::MAX; lead + 1];
        dist[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for s in STEP_SIZES_HOURS {
                let next = v + s as usize;
                if next <= lead && dist[next] == usize::MAX {
                    dist[next] = dist[v] + 1;
                    queue.push_back(next);
                }
            }
        }
        dist[lead]
    }

    #[test]
    fn greedy_is_minimal_for_every_lead() {
        for lead in 1..=MAX_LEAD_HOURS {
            let greedy = greedy_plan(lead).unwrap().steps().len();
            assert_eq!(greedy, bfs_min_steps(lead), "lead {lead}");
        }
    }

    #[test]
    fn cumulative_leads_of_29() {
        let plan = greedy_plan(29).unwrap();
        assert_eq!(plan.cumulative_leads(), vec![24, 27, 28, 29]);
    }
}
