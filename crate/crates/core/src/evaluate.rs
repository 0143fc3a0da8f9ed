//! Rollout evaluation: per-variable, per-lead metric tables.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::climatology::Climatology;
use crate::dataset::DatasetReader;
use crate::error::{CoreError, Result};
use crate::metrics::{
    contingency, weighted_acc, weighted_rmse, AnomalyMode, ContingencyCounts, LatWeights,
};
use crate::time::HourStamp;

pub const FORECAST_META_FILE: &str = "forecast_meta.json";

/// Sidecar describing a forecast archive: which initialization produced it
/// and with what step plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub init: HourStamp,
    pub plan: Vec<u32>,
    pub leads: Vec<u32>,
}

impl ForecastMeta {
    pub fn save(&self, archive_root: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(archive_root.join(FORECAST_META_FILE), json)?;
        Ok(())
    }

    pub fn load(archive_root: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(archive_root.join(FORECAST_META_FILE))?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub variable: String,
    pub lead_hours: u32,
    pub metric: String,
    /// `None` renders as `NA`: an undefined score, excluded from averages.
    pub value: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, variable: &str, lead_hours: u32, metric: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && r.lead_hours == lead_hours && r.metric == metric)
    }

    /// Tab-separated emission: `variable lead_hours metric value n_samples`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "variable\tlead_hours\tmetric\tvalue\tn_samples")?;
        for r in &self.rows {
            let value = match r.value {
                Some(v) => format!("{v:.12e}"),
                None => "NA".to_string(),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.variable, r.lead_hours, r.metric, value, r.n_samples
            )?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                return Err(CoreError::CorruptFile {
                    path: path.display().to_string(),
                    reason: format!("line {} has {} fields", i + 1, parts.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| CoreError::InvalidArgument(format!("bad number {s:?}: {e}")))
            };
            rows.push(MetricRow {
                variable: parts[0].to_string(),
                lead_hours: parts[1].parse().map_err(|_| CoreError::CorruptFile {
                    path: path.display().to_string(),
                    reason: format!("bad lead on line {}", i + 1),
                })?,
                metric: parts[2].to_string(),
                value: if parts[3] == "NA" {
                    None
                } else {
                    Some(parse(parts[3])?)
                },
                n_samples: parts[4].parse().unwrap_or(0),
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    /// Channel names to score; defaults to every surface variable plus the
    /// pressure variables at 500 hPa (or the middle level when 500 is not
    /// in the grid).
    pub variables: Option<Vec<String>>,
    /// Rain-rate thresholds in mm/h for the precipitation scores.
    pub thresholds: Vec<f64>,
    pub anomaly_mode: AnomalyMode,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            variables: None,
            thresholds: vec![0.1, 1.0, 5.0, 10.0],
            anomaly_mode: AnomalyMode::Climatology,
        }
    }
}

/// Surface variables plus the pressure variables at 500 hPa (middle level
/// fallback for toy grids).
pub fn default_eval_channels(domain: &crate::grid::Domain) -> Vec<String> {
    let mut names: Vec<String> = domain
        .inventory
        .surface()
        .iter()
        .map(|v| v.name().to_string())
        .collect();
    let levels = &domain.grid.pressure_levels;
    if !levels.is_empty() {
        let level_idx = levels
            .iter()
            .position(|&l| l == 500.0)
            .unwrap_or(levels.len() / 2);
        for (j, _) in domain.inventory.pressure().iter().enumerate() {
            let ch = domain.inventory.pressure_channel(level_idx, j);
            names.push(domain.channel_names()[ch].clone());
        }
    }
    names
}

/// Fraction of forecast timestamps that had matching truth.
#[derive(Debug, Clone, Copy)]
pub struct Coverage {
    pub matched: usize,
    pub total: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Scores a forecast archive against truth: latitude-weighted RMSE and ACC
/// per (variable, lead), plus TS/POD/FAR per threshold when both archives
/// carry high-resolution precipitation.
pub fn evaluate_rollout(
    forecast: &DatasetReader,
    truth: &DatasetReader,
    climatology: &Climatology,
    options: &EvaluateOptions,
) -> Result<(MetricTable, Coverage)> {
    let fm = forecast.manifest();
    let tm = truth.manifest();
    if fm.domain != tm.domain {
        return Err(CoreError::ChannelMismatch(
            "forecast and truth domains differ".into(),
        ));
    }
    let domain = &fm.domain;
    let names = domain.channel_names();
    let variables = options
        .variables
        .clone()
        .unwrap_or_else(|| default_eval_channels(domain));
    let channel_idx: Vec<usize> = variables
        .iter()
        .map(|v| {
            names
                .iter()
                .position(|n| n == v)
                .ok_or_else(|| CoreError::ChannelMismatch(format!("unknown variable {v}")))
        })
        .collect::<Result<_>>()?;
    let weights = LatWeights::from_grid(&domain.grid)?;

    let meta = ForecastMeta::load(forecast.root()).ok();
    let init = meta.as_ref().map(|m| m.init).or_else(|| fm.times().next());
    let init = init.ok_or_else(|| CoreError::InvalidArgument("empty forecast archive".into()))?;

    // (variable, lead, metric) -> running sums; contingency merged by
    // (lead, threshold).
    let mut sums: BTreeMap<(String, u32, &'static str), (f64, usize)> = BTreeMap::new();
    let mut undefined: BTreeMap<(String, u32, &'static str), usize> = BTreeMap::new();
    let mut precip_counts: BTreeMap<(u32, String), ContingencyCounts> = BTreeMap::new();
    let mut matched = 0usize;
    let mut total = 0usize;

    for t in fm.times() {
        let lead = t.hours_since(init);
        if lead < 0 {
            continue;
        }
        let lead = lead as u32;
        if lead == 0 && fm.n_samples() > 1 {
            // Initialization slice; nothing to score.
            continue;
        }
        total += 1;
        if tm.index_of(t).is_none() {
            continue;
        }
        matched += 1;
        let pred = forecast.load_state(t)?;
        let obs = truth.load_state(t)?;
        let clim = climatology.at(t.month(), t.hour());

        for (var, &ch) in variables.iter().zip(&channel_idx) {
            let p = to_f64(&pred.values().index_axis(ndarray::Axis(0), ch));
            let o = to_f64(&obs.values().index_axis(ndarray::Axis(0), ch));
            let c = to_f64(&clim.index_axis(ndarray::Axis(0), ch));
            let rmse = weighted_rmse(&p.view(), &o.view(), &weights)?;
            let entry = sums.entry((var.clone(), lead, "rmse")).or_default();
            entry.0 += rmse;
            entry.1 += 1;
            match weighted_acc(
                &p.view(),
                &o.view(),
                Some(&c.view()),
                &weights,
                options.anomaly_mode,
            ) {
                Ok(acc) => {
                    let entry = sums.entry((var.clone(), lead, "acc")).or_default();
                    entry.0 += acc;
                    entry.1 += 1;
                }
                Err(CoreError::DegenerateAnomaly) => {
                    *undefined.entry((var.clone(), lead, "acc")).or_default() += 1;
                }
                Err(e) => return Err(e),
            }
        }

        if fm.has_precip && tm.has_precip {
            let p = forecast.load_precip_hires(t)?.mapv(|v| v as f64);
            let o = truth.load_precip_hires(t)?.mapv(|v| v as f64);
            for &tau in &options.thresholds {
                let counts = contingency(&p.view(), &o.view(), tau)?;
                let key = (lead, format!("{tau}"));
                precip_counts
                    .entry(key)
                    .and_modify(|c| *c = c.merge(&counts))
                    .or_insert(counts);
            }
        }
    }

    let coverage = Coverage { matched, total };
    if matched == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "no overlapping timestamps between archives (coverage {}/{})",
            coverage.matched, coverage.total
        )));
    }

    let mut table = MetricTable::default();
    for ((var, lead, metric), (sum, n)) in sums {
        table.rows.push(MetricRow {
            variable: var,
            lead_hours: lead,
            metric: metric.to_string(),
            value: Some(sum / n as f64),
            n_samples: n,
        });
    }
    for ((var, lead, metric), n) in undefined {
        table.rows.push(MetricRow {
            variable: var,
            lead_hours: lead,
            metric: metric.to_string(),
            value: None,
            n_samples: n,
        });
    }
    for ((lead, tau), counts) in precip_counts {
        for (metric, value) in [
            ("ts", counts.ts()),
            ("pod", counts.pod()),
            ("far", counts.far()),
        ] {
            table.rows.push(MetricRow {
                variable: "precip_hires".to_string(),
                lead_hours: lead,
                metric: format!("{metric}@{tau}"),
                value,
                n_samples: counts.total() as usize,
            });
        }
    }
    table.rows.sort_by(|a, b| {
        (&a.variable, a.lead_hours, &a.metric).cmp(&(&b.variable, b.lead_hours, &b.metric))
    });
    Ok((table, coverage))
}

fn to_f64(view: &ndarray::ArrayView2<f32>) -> Array2<f64> {
    view.mapv(|v| v as f64)
}
