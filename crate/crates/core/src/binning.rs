//! Equal-frequency calibration of raw uncertainties into integer scores `1..=K`.
//!
//! A [`BinMap`] is fitted once on the calibration set and reused unchanged at
//! inference time, so scores from both stages live on the same scale.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::uncertainty::EstimatorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    /// Cut points at the empirical `i/K` quantiles.
    #[default]
    Quantile,
    /// Cut points evenly spaced between the fitted minimum and maximum.
    EqualWidth,
}

impl BinStrategy {
    fn is_default(&self) -> bool {
        *self == BinStrategy::Quantile
    }
}

/// Discrete uncertainty score in `1..=k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub score: u32,
    pub k: u32,
}

impl std::fmt::Display for UncertaintyScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMap {
    pub estimator: EstimatorKind,
    pub k: u32,
    /// `k - 1` interior cut points, non-decreasing.
    pub boundaries: Vec<f64>,
    pub fit_count: usize,
    /// Hex SHA-256 over the little-endian bytes of the sorted training values.
    pub fit_digest: String,
    #[serde(default, skip_serializing_if = "BinStrategy::is_default")]
    pub strategy: BinStrategy,
}

/// Linear-interpolation quantile of sorted data at `q = i/k` (`h = (n-1)q`).
/// The integer part of `h` is computed exactly.
fn quantile_sorted(sorted: &[f64], i: u32, k: u32) -> f64 {
    let num = (sorted.len() as u64 - 1) * i as u64;
    let lo = (num / k as u64) as usize;
    let rem = num % k as u64;
    if rem == 0 {
        return sorted[lo];
    }
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rem as f64 / k as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn digest(sorted: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in sorted {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl BinMap {
    /// Fits equal-frequency bins; see [`BinMap::fit_with`].
    pub fn fit(estimator: EstimatorKind, values: &[f64], k: u32) -> Result<BinMap> {
        Self::fit_with(estimator, values, k, BinStrategy::Quantile)
    }

    pub fn fit_with(
        estimator: EstimatorKind,
        values: &[f64],
        k: u32,
        strategy: BinStrategy,
    ) -> Result<BinMap> {
        if values.is_empty() {
            return Err(Error::invalid("fit", "no training values"));
        }
        if k < 2 {
            return Err(Error::invalid("fit", format!("K must be >= 2, got {k}")));
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let kf = k as f64;
        let boundaries = match strategy {
            BinStrategy::Quantile => (1..k).map(|i| quantile_sorted(&sorted, i, k)).collect(),
            BinStrategy::EqualWidth => {
                let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
                (1..k).map(|i| lo + (hi - lo) * (i as f64 / kf)).collect()
            }
        };
        Ok(BinMap {
            estimator,
            k,
            boundaries,
            fit_count: sorted.len(),
            fit_digest: digest(&sorted),
            strategy,
        })
    }

    /// Score = 1 + number of boundaries strictly below `value`, clamped to `1..=k`.
    pub fn map(&self, value: f64) -> Result<UncertaintyScore> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        let below = self.boundaries.partition_point(|b| *b < value) as u32;
        Ok(UncertaintyScore {
            score: (1 + below).clamp(1, self.k),
            k: self.k,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("binmap", m));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.boundaries.len() != self.k as usize - 1 {
            return bad(format!(
                "expected {} boundaries for k={}, found {}",
                self.k - 1,
                self.k,
                self.boundaries.len()
            ));
        }
        if let Some(b) = self.boundaries.iter().find(|b| !b.is_finite()) {
            return bad(format!("non-finite boundary {b}"));
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return bad("boundaries are not sorted".into());
        }
        if self.fit_count == 0 {
            return bad("fit_count is zero".into());
        }
        if self.fit_digest.len() != 64 || hex::decode(&self.fit_digest).is_err() {
            return bad("fit_digest is not a SHA-256 hex digest".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<BinMap> {
        let map: BinMap = io::read_json(path)?;
        map.validate()?;
        Ok(map)
    }

    /// True when `values` are exactly the training values this map was fitted on.
    pub fn matches_fit(&self, values: &[f64]) -> bool {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.len() == self.fit_count && digest(&sorted) == self.fit_digest
    }
}
