//! Synthetic datasets, windowing and standardization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Dataset;
use crate::seed;

pub const HOUR_SECS: i64 = 3600;
const DAY_STEPS: usize = 24;
const WEEK_STEPS: usize = 168;

/// Evenly spaced power readings; timestamp `i` is `start + i * step_secs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    pub start: i64,
    pub step_secs: i64,
    pub values: Vec<f64>,
}

impl PowerSeries {
    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + self.step_secs * i as i64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerProfile {
    pub offset: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub noise_std: f64,
    pub length: usize,
}

impl Default for PowerProfile {
    fn default() -> Self {
        PowerProfile {
            offset: 10.0,
            daily_amplitude: 3.0,
            weekly_amplitude: 1.0,
            noise_std: 0.3,
            length: 24 * 14,
        }
    }
}

/// Daily and weekly sinusoids plus Gaussian noise around a positive offset.
/// Phases are taken modulo the period so a noiseless, weekly-free series is
/// exactly 24-periodic.
pub fn gen_power_series(profile: &PowerProfile, seed: u64) -> Result<PowerSeries> {
    if profile.length == 0 {
        return Err(Error::Config("series length must be positive".into()));
    }
    let mut rng = seed::rng(seed, &[seed::tags::NOISE]);
    let values = (0..profile.length)
        .map(|t| {
            let day = 2.0 * PI * (t % DAY_STEPS) as f64 / DAY_STEPS as f64;
            let week = 2.0 * PI * (t % WEEK_STEPS) as f64 / WEEK_STEPS as f64;
            let noise: f64 = StandardNormal.sample(&mut rng);
            profile.offset
                + profile.daily_amplitude * libm::sin(day)
                + profile.weekly_amplitude * libm::sin(week)
                + profile.noise_std * noise
        })
        .collect();
    Ok(PowerSeries {
        // 2020-01-01T00:00:00Z
        start: 1_577_836_800,
        step_secs: HOUR_SECS,
        values,
    })
}

/// Neighbouring stations: shared seasonal shape, per-station offset and noise.
pub fn gen_stations(base: &PowerProfile, count: usize, seed: u64) -> Result<Vec<PowerSeries>> {
    (0..count)
        .map(|k| {
            let profile = PowerProfile {
                offset: base.offset + 0.5 * k as f64,
                daily_amplitude: base.daily_amplitude * (1.0 + 0.1 * k as f64),
                noise_std: base.noise_std * (1.0 + 0.25 * k as f64),
                ..*base
            };
            gen_power_series(&profile, seed::derive(seed, &[seed::tags::DATA, k as u64]))
        })
        .collect()
}

/// Sliding windows with stride 1 over a series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    /// Series index of each row's first input.
    pub origins: Vec<usize>,
    pub input_window: usize,
    pub horizon: usize,
}

impl WindowedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&mut self, n: usize) {
        self.inputs.truncate(n);
        self.labels.truncate(n);
        self.origins.truncate(n);
    }
}

pub fn window(values: &[f64], input_window: usize, horizon: usize) -> Result<WindowedSet> {
    if input_window == 0 || horizon == 0 {
        return Err(Error::Config("window sizes must be positive".into()));
    }
    let needed = input_window + horizon;
    if values.len() < needed {
        return Err(Error::SeriesTooShort {
            needed,
            have: values.len(),
        });
    }
    let rows = values.len() - needed + 1;
    let mut set = WindowedSet {
        inputs: Vec::with_capacity(rows),
        labels: Vec::with_capacity(rows),
        origins: Vec::with_capacity(rows),
        input_window,
        horizon,
    };
    for start in 0..rows {
        set.inputs.push(values[start..start + input_window].to_vec());
        set.labels
            .push(values[start + input_window..start + needed].to_vec());
        set.origins.push(start);
    }
    Ok(set)
}

/// Per-column affine standardization with stored statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero spread; passed through with std treated as 1.
    pub constant: Vec<bool>,
}

impl Standardizer {
    /// Fits population mean and standard deviation per column.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; cols];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut constant = vec![false; cols];
        let std = var
            .iter()
            .zip(constant.iter_mut())
            .map(|(s, c)| {
                let sd = libm::sqrt(s / n);
                if sd > 0.0 {
                    sd
                } else {
                    *c = true;
                    1.0
                }
            })
            .collect();
        Standardizer {
            mean,
            std,
            constant,
        }
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    pub fn invert(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| v * s + m)
                    .collect()
            })
            .collect()
    }
}

pub fn standardize(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Standardizer) {
    let st = Standardizer::fit(rows);
    (st.apply(rows), st)
}

/// Single-column convenience for series values.
pub fn standardize_series(values: &[f64]) -> (Vec<f64>, Standardizer) {
    let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    let (out, st) = standardize(&rows);
    (out.into_iter().map(|r| r[0]).collect(), st)
}

/// A party's private table: sample ids, named columns, optional labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    pub columns: Vec<String>,
    /// Row-major values, one row per id.
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(
        ids: Vec<u64>,
        columns: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(Error::Shape {
                what: "table rows vs ids",
                expected: ids.len(),
                got: rows.len(),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::Shape {
                what: "table row width",
                expected: columns.len(),
                got: bad.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::Shape {
                    what: "labels vs ids",
                    expected: ids.len(),
                    got: l.len(),
                });
            }
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate sample ids".into()));
        }
        Ok(FeatureTable {
            ids,
            columns,
            rows,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Standardizes feature columns in place (labels untouched).
    pub fn standardize(&mut self) -> Standardizer {
        let st = Standardizer::fit(&self.rows);
        self.rows = st.apply(&self.rows);
        st
    }

    /// Copy with every feature column replaced by zeros.
    pub fn zeroed(&self) -> Self {
        FeatureTable {
            rows: self.rows.iter().map(|r| vec![0.0; r.len()]).collect(),
            ..self.clone()
        }
    }
}

/// Both tables must list the same ids in the same order.
pub fn check_aligned(a: &FeatureTable, b: &FeatureTable) -> Result<()> {
    if a.ids != b.ids {
        return Err(Error::Alignment("sample ids differ between parties"));
    }
    Ok(())
}

/// Signal weights of the vertical generator. The label is
/// `a * s_A + b * s_B + interaction * x_A0 * x_B0 + noise * e`, where `s_A`
/// and `s_B` are unit-variance linear mixes of each block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSignal {
    pub a: f64,
    pub b: f64,
    pub interaction: f64,
    pub noise: f64,
}

impl Default for CrossSignal {
    fn default() -> Self {
        CrossSignal {
            a: 0.8,
            b: 0.8,
            interaction: 0.4,
            noise: 0.3,
        }
    }
}

impl CrossSignal {
    /// Variance of the label implied by the construction (features are
    /// independent standard normals).
    pub fn label_variance(&self) -> f64 {
        self.a * self.a + self.b * self.b + self.interaction * self.interaction + self.noise * self.noise
    }
}

fn unit_mix<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>());
    raw.into_iter().map(|v| v / norm).collect()
}

/// Feature-holder table (party A) and label-holder table (party B) over the
/// same ids.
pub fn gen_vertical_case(
    n_samples: usize,
    n_a: usize,
    n_b: usize,
    signal: &CrossSignal,
    seed: u64,
) -> Result<(FeatureTable, FeatureTable)> {
    if n_samples == 0 || n_a == 0 || n_b == 0 {
        return Err(Error::Config("vertical case dimensions must be positive".into()));
    }
    let mut rng = seed::rng(seed, &[seed::tags::DATA]);
    let beta_a = unit_mix(&mut rng, n_a);
    let beta_b = unit_mix(&mut rng, n_b);
    let mut xa = Vec::with_capacity(n_samples);
    let mut xb = Vec::with_capacity(n_samples);
    let mut y = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let ra: Vec<f64> = (0..n_a).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rb: Vec<f64> = (0..n_b).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        let sa: f64 = ra.iter().zip(&beta_a).map(|(x, b)| x * b).sum();
        let sb: f64 = rb.iter().zip(&beta_b).map(|(x, b)| x * b).sum();
        y.push(signal.a * sa + signal.b * sb + signal.interaction * ra[0] * rb[0] + signal.noise * e);
        xa.push(ra);
        xb.push(rb);
    }
    let ids: Vec<u64> = (0..n_samples as u64).collect();
    let a = FeatureTable::new(
        ids.clone(),
        (0..n_a).map(|j| alloc::format!("a{j}")).collect(),
        xa,
        None,
    )?;
    let b = FeatureTable::new(
        ids,
        (0..n_b).map(|j| alloc::format!("b{j}")).collect(),
        xb,
        Some(y),
    )?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(noise: f64, weekly: f64, length: usize) -> PowerProfile {
        PowerProfile {
            offset: 5.0,
            daily_amplitude: 2.0,
            weekly_amplitude: weekly,
            noise_std: noise,
            length,
        }
    }

    #[test]
    fn noiseless_series_is_daily_periodic() {
        let s = gen_power_series(&profile(0.0, 0.0, 24 * 5), 1).unwrap();
        for t in 0..s.len() - 24 {
            assert_eq!(s.values[t].to_bits(), s.values[t + 24].to_bits());
        }
        assert!(s.timestamp(1) > s.timestamp(0));
    }

    #[test]
    fn weekly_mean_near_offset() {
        let sigma = 0.5;
        let s = gen_power_series(&profile(sigma, 1.0, 168), 3).unwrap();
        let mean = s.values.iter().sum::<f64>() / 168.0;
        assert!((mean - 5.0).abs() <= 3.0 * sigma / (168f64).sqrt());
    }

    #[test]
    fn generator_is_seeded() {
        let p = profile(0.3, 1.0, 50);
        assert_eq!(gen_power_series(&p, 1).unwrap(), gen_power_series(&p, 1).unwrap());
        assert_ne!(gen_power_series(&p, 1).unwrap(), gen_power_series(&p, 2).unwrap());
        assert!(gen_power_series(&profile(0.3, 1.0, 0), 1).is_err());
    }

    #[test]
    fn stations_share_shape_but_differ() {
        let st = gen_stations(&PowerProfile::default(), 3, 9).unwrap();
        assert_eq!(st.len(), 3);
        assert_ne!(st[0].values, st[1].values);
    }

    #[test]
    fn window_boundary_and_structure() {
        let series: Vec<f64> = (0..23).map(|v| v as f64).collect();
        let w = window(&series, 16, 7).unwrap();
        assert_eq!(w.len(), 1);
        assert!(window(&series[..22], 16, 7).is_err());

        let series: Vec<f64> = (0..40).map(|v| (v as f64).sin()).collect();
        let w = window(&series, 5, 3).unwrap();
        assert_eq!(w.len(), 40 - 5 - 3 + 1);
        for k in 0..w.len() {
            let o = w.origins[k];
            assert_eq!(w.inputs[k], series[o..o + 5].to_vec());
            assert_eq!(w.labels[k][0], series[o + 5]);
        }
        // overlaying windows reconstructs the series
        let mut rebuilt = vec![f64::NAN; series.len()];
        for k in 0..w.len() {
            let o = w.origins[k];
            for (i, v) in w.inputs[k].iter().chain(&w.labels[k]).enumerate() {
                rebuilt[o + i] = *v;
            }
        }
        assert_eq!(rebuilt, series);
    }

    #[test]
    fn standardize_round_trip_and_idempotence() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64 * 1.5 + 3.0, ((i * 7) % 11) as f64, 4.0])
            .collect();
        let (z, st) = standardize(&rows);
        assert!(st.constant[2] && !st.constant[0]);
        let back = st.invert(&z);
        for (r, b) in rows.iter().zip(&back) {
            for (x, y) in r.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (z2, _) = standardize(&z);
        for (r, b) in z.iter().zip(&z2) {
            for (x, y) in r.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // two-pass oracle for column 1
        let col: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
        assert!((st.mean[1] - m).abs() < 1e-12);
        assert!((st.std[1] - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vertical_tables_are_aligned() {
        let (a, b) = gen_vertical_case(50, 3, 2, &CrossSignal::default(), 4).unwrap();
        check_aligned(&a, &b).unwrap();
        assert!(a.labels.is_none());
        assert_eq!(b.labels.as_ref().unwrap().len(), 50);
    }

    #[test]
    fn label_variance_follows_construction() {
        let sig = CrossSignal {
            a: 1.0,
            b: 0.5,
            interaction: 0.5,
            noise: 0.2,
        };
        let (_, b) = gen_vertical_case(20_000, 4, 4, &sig, 11).unwrap();
        let y = b.labels.unwrap();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64;
        assert!((var - sig.label_variance()).abs() / sig.label_variance() < 0.05, "{var}");
    }

    #[test]
    fn table_validation() {
        assert!(FeatureTable::new(vec![1, 1], vec!["x".into()], vec![vec![0.0], vec![1.0]], None).is_err());
        assert!(FeatureTable::new(vec![1, 2], vec!["x".into()], vec![vec![0.0], vec![1.0, 2.0]], None).is_err());
    }
}
