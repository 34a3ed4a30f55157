//! Data model for gridded multi-channel weather fields.
//!
//! A dataset lives in a directory ("store"): `meta.json` describes the grid,
//! `data.f32` holds raw little-endian samples laid out
//! `[sample][channel][lat][lon]`, and `stats.json` / `clim.f32` are written
//! by the normalization and climatology ops. The synthetic generator in
//! [`synthetic`] stands in for real reanalysis data at desk scale.

pub mod store;
pub mod synthetic;

pub use store::{DiskStore, StoreWriter};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Result, WmaeError};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Time spacing between consecutive samples: 6 hours.
pub const DELTA_T_SECONDS: u64 = 21_600;

/// Grid and channel description of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridMeta {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub channel_names: Vec<String>,
    /// Latitudes in degrees, strictly monotonic, starting from the +90 side.
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub delta_t_seconds: u64,
    pub sample_count: usize,
    /// Name of the single diagnostic channel, if any.
    pub diagnostic_channel: Option<String>,
}

impl GridMeta {
    pub fn validate(&self) -> Result<()> {
        if self.h * self.w * self.c == 0 {
            return Err(WmaeError::Config(format!(
                "grid dimensions must be positive, got H={} W={} C={}",
                self.h, self.w, self.c
            )));
        }
        if self.lat.len() != self.h || self.lon.len() != self.w {
            return Err(WmaeError::Config(format!(
                "lat/lon lengths {}/{} do not match H={} W={}",
                self.lat.len(),
                self.lon.len(),
                self.h,
                self.w
            )));
        }
        let descending = self.lat.windows(2).all(|p| p[0] > p[1]);
        let ascending = self.lat.windows(2).all(|p| p[0] < p[1]);
        if !(descending || ascending) {
            return Err(WmaeError::Config("lat must be strictly monotonic".into()));
        }
        if self.channel_names.len() != self.c {
            return Err(WmaeError::Config(format!(
                "{} channel names for C={}",
                self.channel_names.len(),
                self.c
            )));
        }
        if let Some(diag) = &self.diagnostic_channel {
            if !self.channel_names.contains(diag) {
                return Err(WmaeError::Config(format!(
                    "diagnostic channel {diag} not among channel names"
                )));
            }
        }
        Ok(())
    }

    pub fn values_per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn diagnostic_index(&self) -> Option<usize> {
        let name = self.diagnostic_channel.as_ref()?;
        self.channel_names.iter().position(|n| n == name)
    }

    /// Channel indices the model predicts and feeds back during rollout.
    pub fn prognostic_indices(&self) -> Vec<usize> {
        let diag = self.diagnostic_index();
        (0..self.c).filter(|i| Some(*i) != diag).collect()
    }
}

/// One time-step of every channel, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major `[channel][lat][lon]`.
    pub values: Vec<f32>,
    pub time_index: usize,
}

impl GridSample {
    pub fn new(c: usize, h: usize, w: usize, values: Vec<f32>, time_index: usize) -> Self {
        assert_eq!(values.len(), c * h * w);
        GridSample { c, h, w, values, time_index }
    }

    pub fn channel(&self, idx: usize) -> &[f32] {
        let hw = self.h * self.w;
        &self.values[idx * hw..(idx + 1) * hw]
    }

    /// New sample keeping only the given channels, in the given order.
    pub fn select_channels(&self, idx: &[usize]) -> GridSample {
        let hw = self.h * self.w;
        let mut values = Vec::with_capacity(idx.len() * hw);
        for &i in idx {
            values.extend_from_slice(self.channel(i));
        }
        GridSample::new(idx.len(), self.h, self.w, values, self.time_index)
    }

    /// Drop trailing latitude rows (e.g. 721 -> 720 before patching).
    pub fn crop_rows(&self, new_h: usize) -> GridSample {
        assert!(new_h <= self.h);
        let mut values = Vec::with_capacity(self.c * new_h * self.w);
        for c in 0..self.c {
            let ch = self.channel(c);
            values.extend_from_slice(&ch[..new_h * self.w]);
        }
        GridSample::new(self.c, new_h, self.w, values, self.time_index)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-channel mean/std over a training split (population std).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub channels: Vec<ChannelStat>,
}

impl ChannelStats {
    pub fn subset(&self, idx: &[usize]) -> ChannelStats {
        ChannelStats { channels: idx.iter().map(|&i| self.channels[i].clone()).collect() }
    }
}

/// Per-channel, per-gridpoint time mean over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major `[channel][lat][lon]`.
    pub values: Vec<f64>,
}

impl Climatology {
    pub fn channel(&self, idx: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.values[idx * hw..(idx + 1) * hw]
    }
}

/// Chronological, contiguous, non-overlapping index ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Split `sample_count` indices chronologically by the given fractions.
/// Shuffled splits would leak future states into training, so ranges are
/// always contiguous in time.
pub fn split_dataset(sample_count: usize, fractions: (f64, f64, f64)) -> Result<SplitRanges> {
    let (f0, f1, f2) = fractions;
    let sum = f0 + f1 + f2;
    if (sum - 1.0).abs() > 1e-9 || f0 < 0.0 || f1 < 0.0 || f2 < 0.0 {
        return Err(WmaeError::Config(format!(
            "split fractions must be nonnegative and sum to 1, got ({f0}, {f1}, {f2})"
        )));
    }
    let n = sample_count;
    let c1 = ((n as f64) * f0).floor() as usize;
    let c2 = ((n as f64) * (f0 + f1)).floor() as usize;
    let ranges = SplitRanges { train: 0..c1, val: c1..c2, test: c2..n };
    if ranges.train.is_empty() || ranges.val.is_empty() || ranges.test.is_empty() {
        return Err(WmaeError::Config(format!(
            "split ({f0}, {f1}, {f2}) of {n} samples leaves an empty split: \
             train {}..{}, val {}..{}, test {}..{}",
            ranges.train.start,
            ranges.train.end,
            ranges.val.start,
            ranges.val.end,
            ranges.test.start,
            ranges.test.end
        )));
    }
    Ok(ranges)
}

/// Exact two-pass per-channel mean and population std over a sample range.
pub fn compute_stats(store: &DiskStore, range: Range<usize>) -> Result<ChannelStats> {
    if range.is_empty() {
        return Err(WmaeError::Config("stats over an empty split".into()));
    }
    let meta = store.meta();
    let hw = meta.h * meta.w;
    let count = (range.len() * hw) as f64;

    let mut sums = vec![0.0f64; meta.c];
    for k in range.clone() {
        let s = store.sample(k)?;
        for c in 0..meta.c {
            let mut acc = 0.0f64;
            for &v in s.channel(c) {
                acc += v as f64;
            }
            sums[c] += acc;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count).collect();

    let mut sq = vec![0.0f64; meta.c];
    for k in range {
        let s = store.sample(k)?;
        for c in 0..meta.c {
            let mut acc = 0.0f64;
            for &v in s.channel(c) {
                let d = v as f64 - means[c];
                acc += d * d;
            }
            sq[c] += acc;
        }
    }

    let mut channels = Vec::with_capacity(meta.c);
    for c in 0..meta.c {
        let std = (sq[c] / count).sqrt();
        if std == 0.0 {
            return Err(WmaeError::Config(format!(
                "channel {} has zero variance over the training split",
                meta.channel_names[c]
            )));
        }
        channels.push(ChannelStat { name: meta.channel_names[c].clone(), mean: means[c], std });
    }
    Ok(ChannelStats { channels })
}

/// Per-gridpoint temporal mean over a sample range.
pub fn compute_climatology(store: &DiskStore, range: Range<usize>) -> Result<Climatology> {
    if range.is_empty() {
        return Err(WmaeError::Config("climatology over an empty split".into()));
    }
    let meta = store.meta();
    let n = meta.values_per_sample();
    let mut acc = vec![0.0f64; n];
    let count = range.len() as f64;
    for k in range {
        let s = store.sample(k)?;
        for (a, &v) in acc.iter_mut().zip(&s.values) {
            *a += v as f64;
        }
    }
    for a in acc.iter_mut() {
        *a /= count;
    }
    Ok(Climatology { c: meta.c, h: meta.h, w: meta.w, values: acc })
}

/// Z-score all channels: `(x - mean) / std`.
pub fn normalize(sample: &GridSample, stats: &ChannelStats) -> Result<GridSample> {
    apply_stats(sample, stats, |v, m, s| ((v as f64 - m) / s) as f32)
}

/// Inverse of [`normalize`].
pub fn denormalize(sample: &GridSample, stats: &ChannelStats) -> Result<GridSample> {
    apply_stats(sample, stats, |v, m, s| (v as f64 * s + m) as f32)
}

fn apply_stats(
    sample: &GridSample,
    stats: &ChannelStats,
    f: impl Fn(f32, f64, f64) -> f32,
) -> Result<GridSample> {
    if stats.channels.len() != sample.c {
        return Err(WmaeError::Config(format!(
            "stats cover {} channels, sample has {}",
            stats.channels.len(),
            sample.c
        )));
    }
    let hw = sample.h * sample.w;
    let mut values = Vec::with_capacity(sample.values.len());
    for (c, stat) in stats.channels.iter().enumerate() {
        for &v in &sample.values[c * hw..(c + 1) * hw] {
            values.push(f(v, stat.mean, stat.std));
        }
    }
    Ok(GridSample::new(sample.c, sample.h, sample.w, values, sample.time_index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_matches_hand_example() {
        let s = split_dataset(100, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!(s.train, 0..80);
        assert_eq!(s.val, 80..90);
        assert_eq!(s.test, 90..100);
    }

    #[test]
    fn split_rejects_empty() {
        assert!(split_dataset(100, (1.0, 0.0, 0.0)).is_err());
        assert!(split_dataset(2, (0.5, 0.25, 0.25)).is_err());
    }

    #[test]
    fn split_covers_all_indices_once() {
        for n in [3usize, 10, 100, 1464] {
            let s = split_dataset(n, (0.7, 0.2, 0.1)).unwrap();
            assert_eq!(s.train.end, s.val.start);
            assert_eq!(s.val.end, s.test.start);
            assert_eq!(s.test.end, n);
            assert_eq!(s.train.start, 0);
            assert!(s.train.end > 0 && s.val.len() > 0 && s.test.len() > 0);
        }
    }

    #[test]
    fn split_is_chronological() {
        let s = split_dataset(50, (0.6, 0.2, 0.2)).unwrap();
        assert!(s.train.end - 1 < s.val.start || s.train.end == s.val.start);
        assert!(s.val.end <= s.test.start);
    }

    #[test]
    fn normalize_of_mean_is_zero() {
        let stats = ChannelStats {
            channels: vec![ChannelStat { name: "a".into(), mean: 5.0, std: 2.0 }],
        };
        let s = GridSample::new(1, 1, 2, vec![5.0, 7.0], 0);
        let n = normalize(&s, &stats).unwrap();
        assert_eq!(n.values, vec![0.0, 1.0]); // mean -> 0, mean + std -> 1
    }

    #[test]
    fn normalize_roundtrip_within_tolerance() {
        let stats = ChannelStats {
            channels: vec![
                ChannelStat { name: "a".into(), mean: 288.4, std: 13.7 },
                ChannelStat { name: "b".into(), mean: -2.0, std: 0.03 },
            ],
        };
        let vals: Vec<f32> = (0..8).map(|i| 280.0 + i as f32 * 3.3).collect();
        let s = GridSample::new(2, 2, 2, vals.clone(), 3);
        let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.values.iter().zip(&vals) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_rejects_channel_mismatch() {
        let stats = ChannelStats {
            channels: vec![ChannelStat { name: "a".into(), mean: 0.0, std: 1.0 }],
        };
        let s = GridSample::new(2, 1, 1, vec![0.0, 1.0], 0);
        assert!(normalize(&s, &stats).is_err());
    }

    #[test]
    fn select_and_crop() {
        let s = GridSample::new(2, 3, 2, (0..12).map(|i| i as f32).collect(), 1);
        let sel = s.select_channels(&[1]);
        assert_eq!(sel.values, (6..12).map(|i| i as f32).collect::<Vec<_>>());
        let crop = s.crop_rows(2);
        assert_eq!(crop.channel(1), &[6.0, 7.0, 8.0, 9.0]);
    }
}
