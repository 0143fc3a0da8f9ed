//! Streaming normalization statistics over a dataset split.

use std::collections::BTreeSet;

use super::{DatasetReader, Split};
use crate::error::{CoreError, Result};
use crate::transform::{precip_to_dbz, MeanStd, NormStats};

/// Shifted one-pass accumulator (Chan et al. batch merge). Means and
/// variances come out identical to a two-pass computation up to f64
/// round-off, and the result does not depend on visiting order beyond that.
#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    n: f64,
    mean: f64,
    m2: f64,
    shift: Option<f64>,
}

impl Accumulator {
    fn push_batch(&mut self, values: impl Iterator<Item = f64>) {
        let mut k = 0.0;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut shift = self.shift;
        for v in values {
            let s = *shift.get_or_insert(v);
            let d = v - s;
            k += 1.0;
            sum += d;
            sumsq += d * d;
        }
        self.shift = shift;
        if k == 0.0 {
            return;
        }
        let batch_mean = sum / k;
        let batch_m2 = sumsq - sum * sum / k;
        if self.n == 0.0 {
            self.n = k;
            self.mean = batch_mean;
            self.m2 = batch_m2;
        } else {
            let delta = batch_mean - self.mean;
            let total = self.n + k;
            self.mean += delta * k / total;
            self.m2 += batch_m2 + delta * delta * self.n * k / total;
            self.n = total;
        }
    }

    fn mean(&self) -> f64 {
        self.mean + self.shift.unwrap_or(0.0)
    }

    /// Population standard deviation.
    fn std(&self) -> f64 {
        if self.n > 0.0 {
            (self.m2.max(0.0) / self.n).sqrt()
        } else {
            0.0
        }
    }
}

/// Single-pass per-channel mean/std over every sample of `split`, with the
/// precipitation groups accumulated in dBZ space and topography per-field.
/// Zero-variance channels are an error, reported by name.
pub fn compute_stats(reader: &DatasetReader, split: Split) -> Result<NormStats> {
    let manifest = reader.manifest();
    let indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(CoreError::EmptySplit(format!("{split:?}")));
    }

    let n_channels = manifest.domain.n_channels();
    let mut acc = vec![Accumulator::default(); n_channels];
    let mut coarse_acc = Accumulator::default();
    let mut hires_acc = Accumulator::default();
    let mut years = BTreeSet::new();

    for &index in &indices {
        let t = manifest.time_at(index).expect("index from manifest");
        years.insert(t.year());
        let state = reader.load_state(t)?;
        for (ch, plane) in state.values().outer_iter().enumerate() {
            acc[ch].push_batch(plane.iter().map(|&v| v as f64));
        }
        if manifest.has_precip {
            let coarse = reader.load_precip_coarse(t)?;
            let mut dbz = Vec::with_capacity(coarse.len());
            for &r in coarse.iter() {
                dbz.push(precip_to_dbz(r as f64)?);
            }
            coarse_acc.push_batch(dbz.into_iter());
            let hires = reader.load_precip_hires(t)?;
            let mut dbz = Vec::with_capacity(hires.len());
            for &r in hires.iter() {
                dbz.push(precip_to_dbz(r as f64)?);
            }
            hires_acc.push_batch(dbz.into_iter());
        }
    }

    let topo = reader.topography();
    let mut topo_acc = Accumulator::default();
    topo_acc.push_batch(topo.iter().map(|&v| v as f64));

    let names = manifest.domain.channel_names();
    let mut stats = NormStats::new(
        names,
        acc.iter().map(|a| a.mean()).collect(),
        acc.iter().map(|a| a.std()).collect(),
        MeanStd {
            mean: topo_acc.mean(),
            std: topo_acc.std(),
        },
        years.into_iter().collect(),
    )?;
    if manifest.has_precip {
        stats.precip_coarse_dbz = Some(MeanStd {
            mean: coarse_acc.mean(),
            std: coarse_acc.std(),
        });
        stats.precip_hires_dbz = Some(MeanStd {
            mean: hires_acc.mean(),
            std: hires_acc.std(),
        });
        stats.validate()?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_matches_two_pass() {
        let data: Vec<f64> = (0..1000).map(|i| 100.0 + ((i * 37) % 97) as f64 * 0.5).collect();
        let mut acc = Accumulator::default();
        // Feed in two unequal batches to exercise the merge.
        acc.push_batch(data[..300].iter().copied());
        acc.push_batch(data[300..].iter().copied());

        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        assert!((acc.mean() - mean).abs() < 1e-10);
        assert!((acc.std() - var.sqrt()).abs() < 1e-10);
    }
}
