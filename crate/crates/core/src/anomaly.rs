//! Reconstruction-error maps, their per-patch summary features, and
//! binary anomaly masks.

use crate::error::{Error, Result};

/// Per-pixel absolute reconstruction error of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub values: Vec<f32>,
}

/// How an error map is summarized for the isolation forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// `[mean, std, max, p99]`
    #[default]
    Summary,
    /// `[mean]` only.
    Mean,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Summary => 4,
            FeatureMode::Mean => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(FeatureMode::Summary),
            "mean" => Ok(FeatureMode::Mean),
            other => Err(Error::Config(format!(
                "feature_mode must be `summary` or `mean`, got `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Summary => "summary",
            FeatureMode::Mean => "mean",
        }
    }
}

/// Summary statistics of one error map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchFeatures {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub p99: f64,
}

impl PatchFeatures {
    pub fn to_vec(self, mode: FeatureMode) -> Vec<f64> {
        match mode {
            FeatureMode::Summary => vec![self.mean, self.std, self.max, self.p99],
            FeatureMode::Mean => vec![self.mean],
        }
    }
}

/// Pixel-error statistics of clean training patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainErrorStats {
    pub mu_train: f64,
    pub sigma_train: f64,
}

impl TrainErrorStats {
    /// Pixels with error above this value are anomalous.
    pub fn threshold(&self) -> f64 {
        self.mu_train + 3.0 * self.sigma_train
    }
}

pub fn error_map(x: &[f32], xhat: &[f32]) -> Result<ErrorMap> {
    if x.len() != xhat.len() {
        return Err(Error::contract(format!(
            "patch has {} values, reconstruction {}",
            x.len(),
            xhat.len()
        )));
    }
    Ok(ErrorMap {
        values: x.iter().zip(xhat).map(|(a, b)| (a - b).abs()).collect(),
    })
}

/// Mean, population standard deviation, maximum and nearest-rank 99th
/// percentile of the map.
pub fn patch_features(map: &ErrorMap) -> PatchFeatures {
    let n = map.values.len();
    if n == 0 {
        return PatchFeatures {
            mean: 0.0,
            std: 0.0,
            max: 0.0,
            p99: 0.0,
        };
    }
    let mean = map.values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = map
        .values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let mut sorted = map.values.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    // ⌈0.99·n⌉ in integers.
    let rank = (99 * n).div_ceil(100).max(1);
    PatchFeatures {
        mean,
        std: var.sqrt(),
        max: sorted[n - 1] as f64,
        p99: sorted[rank - 1] as f64,
    }
}

/// Marks pixels whose error exceeds `mu_train + 3·sigma_train`.
pub fn binary_mask(map: &ErrorMap, stats: &TrainErrorStats) -> Vec<bool> {
    let t = stats.threshold();
    map.values.iter().map(|&v| v as f64 > t).collect()
}

/// Running pixel-error mean and variance, mergeable across chunks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainStatsAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl TrainStatsAccumulator {
    pub fn push(&mut self, map: &ErrorMap) {
        let n = map.values.len();
        if n == 0 {
            return;
        }
        let mean = map.values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let m2 = map.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        self.merge(&TrainStatsAccumulator {
            count: n as u64,
            mean,
            m2,
        });
    }

    pub fn merge(&mut self, other: &TrainStatsAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<TrainErrorStats> {
        if self.count == 0 {
            return Err(Error::contract("train statistics need at least one pixel"));
        }
        Ok(TrainErrorStats {
            mu_train: self.mean,
            sigma_train: (self.m2 / self.count as f64).sqrt(),
        })
    }
}

/// Mean and population standard deviation over every pixel of every map.
pub fn fit_train_stats(maps: &[ErrorMap]) -> Result<TrainErrorStats> {
    let mut acc = TrainStatsAccumulator::default();
    for m in maps {
        acc.push(m);
    }
    acc.finish()
}

/// Features as CSV rows `frame_id,grid_index,mean,std,max,p99`, values in
/// shortest round-trip form.
pub fn features_csv(rows: &[(u64, usize, PatchFeatures)]) -> String {
    let mut s = String::from("frame_id,grid_index,mean,std,max,p99\n");
    for (frame, cell, f) in rows {
        s.push_str(&format!(
            "{frame},{cell},{},{},{},{}\n",
            f.mean, f.std, f.max, f.p99
        ));
    }
    s
}
