//! Multidimensional histogram binning.
//!
//! The calibrated confidence of a sample is the training precision of its
//! joint bin. When that bin saw no training data the lookup descends a chain
//! of coarser tables that drop the trailing box dimensions one at a time,
//! ending at the confidence-only table; if even that bin is empty the raw
//! confidence is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::bin_index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub counts: Vec<usize>,
    /// Row-major precision per bin; `None` for bins without training data.
    pub precision: Vec<Option<f64>>,
}

impl BinTable {
    fn linear_index(&self, values: &[f64]) -> Result<usize> {
        let mut lin = 0;
        for (&v, &n) in values.iter().zip(&self.counts) {
            lin = lin * n + bin_index(v, n)?;
        }
        Ok(lin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBinningParams {
    /// `levels[0]` bins all `K` dimensions, `levels[K-1]` only the confidence.
    pub levels: Vec<BinTable>,
    pub global_precision: f64,
}

impl HistBinningParams {
    /// Fits from probability-space feature vectors.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], counts: &[usize]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("histogram binning needs at least one sample".into()));
        }
        let k = counts.len();
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("bin counts must be at least 1".into()));
        }
        let mut levels = Vec::with_capacity(k);
        for dims in (1..=k).rev() {
            let cnt = counts[..dims].to_vec();
            let total: usize = cnt.iter().product();
            let mut n = vec![0usize; total];
            let mut hits = vec![0usize; total];
            let mut table = BinTable {
                counts: cnt,
                precision: Vec::new(),
            };
            for (s, &m) in features.iter().zip(labels) {
                let lin = table.linear_index(&s[..dims])?;
                n[lin] += 1;
                hits[lin] += usize::from(m);
            }
            table.precision = n
                .iter()
                .zip(&hits)
                .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
                .collect();
            levels.push(table);
        }
        let positives = labels.iter().filter(|&&m| m).count();
        Ok(HistBinningParams {
            levels,
            global_precision: positives as f64 / labels.len() as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, |t| t.counts.len())
    }

    pub fn bin_counts(&self) -> &[usize] {
        &self.levels[0].counts
    }

    /// One stored precision per joint bin.
    pub fn param_count(&self) -> usize {
        self.levels[0].precision.len()
    }

    /// `values` are the clipped probability-space features; `raw_confidence`
    /// is the final fallback.
    pub fn lookup(&self, values: &[f64], raw_confidence: f64) -> Result<f64> {
        for table in &self.levels {
            let dims = table.counts.len();
            if let Some(p) = table.precision[table.linear_index(&values[..dims])?] {
                return Ok(p);
            }
        }
        Ok(raw_confidence)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.levels.len() != k {
            return Err(Error::Schema(format!(
                "histogram has {} levels, expected {k}",
                self.levels.len()
            )));
        }
        for (i, t) in self.levels.iter().enumerate() {
            if t.counts.len() != k - i || t.counts.iter().any(|&n| n == 0) {
                return Err(Error::Schema(format!("histogram level {i} has bad bin counts")));
            }
            if Some(&t.counts[..]) != self.levels[0].counts.get(..k - i) {
                return Err(Error::Schema(format!("histogram level {i} is not a prefix of the full binning")));
            }
            if t.precision.len() != t.counts.iter().product::<usize>() {
                return Err(Error::Schema(format!("histogram level {i} table has the wrong size")));
            }
            if t.precision.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Schema("stored precision outside [0,1]".into()));
            }
        }
        Ok(())
    }
}
