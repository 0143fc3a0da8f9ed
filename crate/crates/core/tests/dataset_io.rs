//! Dataset storage round-trips, streaming statistics vs a two-pass oracle,
//! and synthetic-generator contracts.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use regioncast_core::climatology::ClimatologyBuilder;
use regioncast_core::dataset::{
    compute_stats, generate_synthetic, DatasetManifest, DatasetReader, DatasetWriter, Split,
    SplitConfig, SyntheticConfig, TimeRun,
};
use regioncast_core::error::CoreError;
use regioncast_core::grid::{Domain, GridSpec, PressureVar, SurfaceVar, VariableInventory};
use regioncast_core::state::WeatherState;
use regioncast_core::time::HourStamp;

fn toy_domain() -> Domain {
    let grid = GridSpec::toy(12, 16, 2).unwrap();
    let inv = VariableInventory::new(
        vec![SurfaceVar::T2m, SurfaceVar::U10],
        vec![PressureVar::Z],
    )
    .unwrap();
    Domain::new(grid, inv)
}

fn write_toy_dataset(
    root: &std::path::Path,
    domain: &Domain,
    start: HourStamp,
    n_hours: usize,
    value_of: impl Fn(usize, usize) -> f32, // (hour, channel)
) -> DatasetManifest {
    let manifest = DatasetManifest::new(
        domain.clone(),
        None,
        vec![TimeRun { start, n_hours }],
        SplitConfig::default(),
        5, // deliberately small so tests cross chunk boundaries
    )
    .unwrap();
    let mut w = DatasetWriter::create(root, manifest.clone()).unwrap();
    let topo =
        ndarray::Array2::from_shape_fn((domain.grid.n_lat, domain.grid.n_lon), |(i, j)| {
            (i * 31 + j) as f32
        });
    w.set_topography(topo).unwrap();
    for hour in 0..n_hours {
        let t = start.plus_hours(hour as i64);
        let values = Array3::from_shape_fn(
            (domain.n_channels(), domain.grid.n_lat, domain.grid.n_lon),
            |(c, i, j)| value_of(hour, c) + (i * 17 + j) as f32 * 0.01,
        );
        let state = WeatherState::new(values, t, false, domain).unwrap();
        w.append_hour(&state, None, None).unwrap();
    }
    w.finish().unwrap();
    manifest
}

#[test]
fn write_then_load_is_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    let start = HourStamp::new(2019, 3, 1, 0).unwrap();
    write_toy_dataset(dir.path(), &domain, start, 7, |h, c| {
        (h as f32) * 1.5 + c as f32 * 0.3 + 0.123456
    });
    let reader = DatasetReader::open(dir.path()).unwrap();
    for hour in 0..7 {
        let t = start.plus_hours(hour);
        let state = reader.load_state(t).unwrap();
        let again = reader.load_state(t).unwrap();
        assert_eq!(state.values(), again.values(), "referential transparency");
        let expected = (hour as f32) * 1.5 + 0.123456;
        assert_eq!(state.values()[[0, 0, 0]].to_bits(), expected.to_bits());
    }
}

#[test]
fn missing_timestamp_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    let start = HourStamp::new(2019, 3, 1, 0).unwrap();
    write_toy_dataset(dir.path(), &domain, start, 4, |_, _| 1.0);
    let reader = DatasetReader::open(dir.path()).unwrap();
    let err = reader.load_state(start.plus_hours(100));
    assert!(matches!(err, Err(CoreError::MissingTimestamp(_))));
}

#[test]
fn range_load_across_chunks_matches_per_hour_loads() {
    // hours_per_chunk is 5; load a 9-hour range crossing the boundary.
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    let start = HourStamp::new(2019, 3, 1, 0).unwrap();
    write_toy_dataset(dir.path(), &domain, start, 12, |h, c| {
        (h * 100 + c) as f32
    });
    let reader = DatasetReader::open(dir.path()).unwrap();
    let range = reader.load_states(start.plus_hours(2), 9).unwrap();
    for (i, state) in range.iter().enumerate() {
        let single = reader.load_state(start.plus_hours(2 + i as i64)).unwrap();
        assert_eq!(state.values(), single.values());
    }
}

#[test]
fn stats_match_two_pass_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    let start = HourStamp::new(2019, 3, 1, 0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let per_hour_offsets: Vec<f32> = (0..3).map(|_| rng.random::<f32>() * 10.0).collect();
    write_toy_dataset(dir.path(), &domain, start, 3, move |h, c| {
        per_hour_offsets[h] + (c as f32) * 2.0
    });
    let reader = DatasetReader::open(dir.path()).unwrap();
    let stats = compute_stats(&reader, Split::Train).unwrap();

    // Two-pass oracle over the same values.
    let n_channels = domain.n_channels();
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); n_channels];
    for hour in 0..3 {
        let state = reader.load_state(start.plus_hours(hour)).unwrap();
        for (c, plane) in state.values().outer_iter().enumerate() {
            all[c].extend(plane.iter().map(|&v| v as f64));
        }
    }
    for c in 0..n_channels {
        let n = all[c].len() as f64;
        let mean = all[c].iter().sum::<f64>() / n;
        let var = all[c].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(
            (stats.mean[c] - mean).abs() < 1e-10,
            "channel {c} mean {} vs {}",
            stats.mean[c],
            mean
        );
        assert!((stats.std[c] - var.sqrt()).abs() < 1e-10);
    }
}

#[test]
fn stats_zero_variance_reported_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    let start = HourStamp::new(2019, 3, 1, 0).unwrap();
    // Constant in time AND space -> all channels zero-variance.
    let manifest = DatasetManifest::new(
        domain.clone(),
        None,
        vec![TimeRun { start, n_hours: 3 }],
        SplitConfig::default(),
        5,
    )
    .unwrap();
    let mut w = DatasetWriter::create(dir.path(), manifest).unwrap();
    w.set_topography(ndarray::Array2::from_shape_fn((12, 16), |(i, _)| i as f32))
        .unwrap();
    for hour in 0..3 {
        let values = Array3::from_elem((domain.n_channels(), 12, 16), 4.0);
        let state =
            WeatherState::new(values, start.plus_hours(hour), false, &domain).unwrap();
        w.append_hour(&state, None, None).unwrap();
    }
    w.finish().unwrap();
    let reader = DatasetReader::open(dir.path()).unwrap();
    match compute_stats(&reader, Split::Train) {
        Err(CoreError::ZeroVariance(channels)) => {
            assert_eq!(channels.len(), domain.n_channels());
        }
        other => panic!("expected zero-variance error, got {other:?}"),
    }
}

#[test]
fn stats_exclude_val_and_test_years() {
    let dir = tempfile::tempdir().unwrap();
    let domain = toy_domain();
    // One run spanning the 2019/2020 year boundary: train hours value 1.0,
    // val hours value 1000.0.
    let start = HourStamp::new(2019, 12, 31, 22).unwrap();
    let manifest = DatasetManifest::new(
        domain.clone(),
        None,
        vec![TimeRun { start, n_hours: 6 }],
        SplitConfig::default(),
        5,
    )
    .unwrap();
    let mut w = DatasetWriter::create(dir.path(), manifest).unwrap();
    w.set_topography(ndarray::Array2::from_shape_fn((12, 16), |(i, _)| i as f32))
        .unwrap();
    for hour in 0..6 {
        let t = start.plus_hours(hour);
        let fill = if t.year() == 2019 { 1.0 } else { 1000.0 };
        let values = Array3::from_shape_fn((domain.n_channels(), 12, 16), |(_, i, j)| {
            fill + (i * 16 + j) as f32 * 0.001
        });
        w.append_hour(&WeatherState::new(values, t, false, &domain).unwrap(), None, None)
            .unwrap();
    }
    w.finish().unwrap();
    let reader = DatasetReader::open(dir.path()).unwrap();
    let stats = compute_stats(&reader, Split::Train).unwrap();
    // Means stay near 1.0: 2020 samples were excluded.
    assert!(stats.mean.iter().all(|&m| m < 2.0), "{:?}", stats.mean);
    assert_eq!(stats.years, vec![2019]);
}

#[test]
fn synthetic_same_seed_is_identical() {
    let domain = toy_domain();
    let start = HourStamp::new(2019, 5, 1, 0).unwrap();
    let hires = GridSpec::new(0.0, 27.5, 70.0, 107.5, 1.25, vec![]).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let cfg = SyntheticConfig::new(domain.clone(), start, 5, 123)
            .with_hires_grid(hires.clone());
        generate_synthetic(dir.path(), &cfg).unwrap();
    }
    let readers: Vec<DatasetReader> = dirs
        .iter()
        .map(|d| DatasetReader::open(d.path()).unwrap())
        .collect();
    for hour in 0..5 {
        let t = start.plus_hours(hour);
        let a = readers[0].load_state(t).unwrap();
        let b = readers[1].load_state(t).unwrap();
        assert_eq!(a.values(), b.values());
        let pa = readers[0].load_precip_hires(t).unwrap();
        let pb = readers[1].load_precip_hires(t).unwrap();
        assert_eq!(pa, pb);
    }
    // Different seed differs.
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::new(domain, start, 5, 124).with_hires_grid(hires);
    generate_synthetic(dir.path(), &cfg).unwrap();
    let other = DatasetReader::open(dir.path()).unwrap();
    assert_ne!(
        other.load_state(start).unwrap().values(),
        readers[0].load_state(start).unwrap().values()
    );
}

#[test]
fn synthetic_adjacent_hours_strongly_correlated() {
    let domain = toy_domain();
    let start = HourStamp::new(2019, 5, 1, 0).unwrap();
    let hires = GridSpec::new(0.0, 27.5, 70.0, 107.5, 1.25, vec![]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        SyntheticConfig::new(domain.clone(), start, 8, 9).with_hires_grid(hires);
    generate_synthetic(dir.path(), &cfg).unwrap();
    let reader = DatasetReader::open(dir.path()).unwrap();

    let pearson = |a: &[f64], b: &[f64]| -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt())
    };

    for hour in 0..7 {
        let s0 = reader.load_state(start.plus_hours(hour)).unwrap();
        let s1 = reader.load_state(start.plus_hours(hour + 1)).unwrap();
        for c in 0..domain.n_channels() {
            let a: Vec<f64> = s0
                .values()
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .map(|&v| v as f64)
                .collect();
            let b: Vec<f64> = s1
                .values()
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .map(|&v| v as f64)
                .collect();
            let r = pearson(&a, &b);
            assert!(r > 0.9, "channel {c} hour {hour}: correlation {r}");
        }
    }
}

#[test]
fn synthetic_precip_non_negative_with_rain_somewhere() {
    let domain = toy_domain();
    let start = HourStamp::new(2019, 5, 1, 0).unwrap();
    let hires = GridSpec::new(0.0, 27.5, 70.0, 107.5, 1.25, vec![]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::new(domain, start, 24, 77).with_hires_grid(hires);
    generate_synthetic(dir.path(), &cfg).unwrap();
    let reader = DatasetReader::open(dir.path()).unwrap();
    let mut any_rain = false;
    for hour in 0..24 {
        let t = start.plus_hours(hour);
        for field in [
            reader.load_precip_coarse(t).unwrap(),
            reader.load_precip_hires(t).unwrap(),
        ] {
            assert!(field.iter().all(|&v| v >= 0.0));
            any_rain |= field.iter().any(|&v| v > 0.1);
        }
    }
    assert!(any_rain, "generator produced a completely dry day");
}

#[test]
fn synthetic_sample_record_includes_previous_hires() {
    let domain = toy_domain();
    let start = HourStamp::new(2019, 5, 1, 0).unwrap();
    let hires = GridSpec::new(0.0, 27.5, 70.0, 107.5, 1.25, vec![]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::new(domain, start, 3, 5).with_hires_grid(hires);
    generate_synthetic(dir.path(), &cfg).unwrap();
    let reader = DatasetReader::open(dir.path()).unwrap();
    let first = reader.load_sample(start).unwrap();
    assert!(first.precip_hires_prev.is_none());
    let second = reader.load_sample(start.plus_hours(1)).unwrap();
    assert_eq!(
        second.precip_hires_prev.unwrap(),
        reader.load_precip_hires(start).unwrap()
    );
}

#[test]
fn climatology_builder_matches_brute_force_oracle() {
    // Randomized two-year toy dataset, compared against a direct-sum oracle.
    let grid = GridSpec::toy(12, 12, 1).unwrap();
    let inv = VariableInventory::new(vec![SurfaceVar::T2m], vec![]).unwrap();
    let domain = Domain::new(grid, inv);
    let mut rng = ChaCha20Rng::seed_from_u64(99);

    let mut builder = ClimatologyBuilder::new(domain.channel_names(), 12, 12);
    let mut oracle_sums = vec![[0.0f64; 144]; 12 * 24];
    let mut oracle_counts = vec![0u64; 12 * 24];

    for year in [2018, 2019] {
        let mut t = HourStamp::new(year, 1, 1, 0).unwrap();
        for _ in 0..8760 {
            let values = Array3::from_shape_fn((1, 12, 12), |_| rng.random::<f32>() * 40.0 - 20.0);
            let state = WeatherState::new(values.clone(), t, false, &domain).unwrap();
            builder.add(&state).unwrap();
            let key = ((t.month() - 1) * 24 + t.hour()) as usize;
            oracle_counts[key] += 1;
            for (slot, &v) in oracle_sums[key].iter_mut().zip(values.iter()) {
                *slot += v as f64;
            }
            t = t.plus_hours(1);
        }
    }
    let clim = builder.finish(vec![2018, 2019]).unwrap();
    for month in 1..=12u32 {
        for hour in 0..24u32 {
            let key = ((month - 1) * 24 + hour) as usize;
            let inv_n = 1.0 / oracle_counts[key] as f64;
            let got = clim.at(month, hour);
            for (g, s) in got.iter().zip(oracle_sums[key].iter()) {
                let want = s * inv_n;
                // f64 accumulation agrees to 1e-10; the stored f32 adds one
                // rounding step on top.
                assert!(
                    (*g as f64 - want).abs() < 1e-10 + 4e-6 * want.abs().max(1.0),
                    "month {month} hour {hour}: {g} vs {want}"
                );
            }
        }
    }
}
