//! Expected calibration error over joint equal-width bins of the confidence
//! and box properties (D-ECE), reliability curves and calibration heatmaps.
//!
//! Every dimension `k` is split into `N_k` equal-width bins on `[0, 1]`;
//! a value of exactly 1 falls into the top bin. Per occupied bin `n` the
//! precision `prec(n)` is the fraction of matched samples and `conf(n)` the
//! mean probability score. Bins holding fewer than `min_samples` samples are
//! dropped, and by default the weights are renormalized over the samples
//! that remain:
//!
//! ```text
//! D-ECE = sum_n |I(n)| / |D| * |prec(n) - conf(n)|
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureSet};
use crate::matching::MatchedSample;

pub const DEFAULT_MIN_SAMPLES: usize = 8;

/// Evaluation bins per dimension for a `k`-dimensional D-ECE.
pub fn default_eval_bins(k: usize) -> usize {
    match k {
        1 => 20,
        2 | 3 => 8,
        _ => 5,
    }
}

/// Histogram-binning calibration bins per dimension for a `k`-dimensional map.
pub fn default_calibration_bins(k: usize) -> usize {
    match k {
        1 => 15,
        2 | 3 => 5,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    dims: Vec<Feature>,
    counts: Vec<usize>,
    pub min_samples: usize,
    /// Weight by retained samples instead of all samples.
    pub renormalize: bool,
}

impl BinningSpec {
    pub fn new(dims: Vec<Feature>, counts: Vec<usize>, min_samples: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("binning needs at least one dimension".into()));
        }
        if dims.len() != counts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} binning dimensions but {} bin counts",
                dims.len(),
                counts.len()
            )));
        }
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("bin counts must be at least 1".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].contains(d) {
                return Err(Error::InvalidArgument(format!("dimension `{d}` binned twice")));
            }
        }
        if counts.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n)).is_none() {
            return Err(Error::InvalidArgument("total bin count overflows".into()));
        }
        Ok(BinningSpec {
            dims,
            counts,
            min_samples,
            renormalize: true,
        })
    }

    /// Bins over all members of `fs`. A single count is broadcast.
    pub fn for_feature_set(fs: &FeatureSet, counts: &[usize], min_samples: usize) -> Result<Self> {
        let counts = broadcast(counts, fs.dim())?;
        BinningSpec::new(fs.members().to_vec(), counts, min_samples)
    }

    /// The default evaluation binning for the dimensionality of `fs`.
    pub fn evaluation_default(fs: &FeatureSet) -> Self {
        let n = default_eval_bins(fs.dim());
        BinningSpec::for_feature_set(fs, &[n], DEFAULT_MIN_SAMPLES).expect("valid default")
    }

    pub fn dims(&self) -> &[Feature] {
        &self.dims
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total_bins(&self) -> usize {
        self.counts.iter().product()
    }

    /// Row-major linear index with the first dimension most significant.
    pub fn linear_index(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn multi_index(&self, sample: &MatchedSample) -> Result<Vec<usize>> {
        self.dims
            .iter()
            .zip(&self.counts)
            .map(|(d, &n)| bin_index(d.value(sample), n))
            .collect()
    }

    /// Multi-index of pre-built probability-space values, one per dimension.
    pub fn multi_index_of(&self, values: &[f64]) -> Result<Vec<usize>> {
        values
            .iter()
            .zip(&self.counts)
            .map(|(&v, &n)| bin_index(v, n))
            .collect()
    }
}

/// Expands a single bin count to `dim` dimensions, or checks the length.
pub fn broadcast(counts: &[usize], dim: usize) -> Result<Vec<usize>> {
    match counts {
        [n] => Ok(vec![*n; dim]),
        c if c.len() == dim => Ok(c.to_vec()),
        c => Err(Error::InvalidArgument(format!(
            "{} bin counts given for {dim} dimensions",
            c.len()
        ))),
    }
}

/// `floor(value * n)`, with 1.0 assigned to the top bin.
pub fn bin_index(value: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::InvalidArgument(format!("value {value} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".into()));
    }
    Ok(((value * n as f64).floor() as usize).min(n - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub index: Vec<usize>,
    pub count: usize,
    pub confidence: f64,
    pub precision: f64,
    pub retained: bool,
}

impl BinStat {
    pub fn gap(&self) -> f64 {
        (self.precision - self.confidence).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedStats {
    /// Occupied bins in ascending linear-index order.
    pub bins: Vec<BinStat>,
    pub total: usize,
    pub retained_total: usize,
    /// Denominator of the bin weights.
    pub weight_total: usize,
}

impl BinnedStats {
    pub fn weight(&self, bin: &BinStat) -> f64 {
        bin.count as f64 / self.weight_total as f64
    }

    fn histogram(&self) -> String {
        let mut s = String::new();
        for b in &self.bins {
            let _ = write!(s, "{:?}:{} ", b.index, b.count);
        }
        s.trim_end().to_owned()
    }
}

#[derive(Default, Clone, Copy)]
struct Accumulator {
    count: usize,
    sum_confidence: f64,
    sum_matched: f64,
}

/// Per-bin statistics without the occupancy filter applied to weights.
pub fn bin_statistics(samples: &[MatchedSample], spec: &BinningSpec) -> Result<BinnedStats> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut acc: BTreeMap<usize, (Vec<usize>, Accumulator)> = BTreeMap::new();
    for s in samples {
        let idx = spec.multi_index(s)?;
        let lin = spec.linear_index(&idx);
        let entry = acc.entry(lin).or_insert_with(|| (idx, Accumulator::default()));
        entry.1.count += 1;
        entry.1.sum_confidence += s.score();
        entry.1.sum_matched += if s.matched { 1.0 } else { 0.0 };
    }
    let mut retained_total = 0;
    let bins: Vec<BinStat> = acc
        .into_values()
        .map(|(index, a)| {
            let retained = a.count >= spec.min_samples;
            if retained {
                retained_total += a.count;
            }
            BinStat {
                index,
                count: a.count,
                confidence: a.sum_confidence / a.count as f64,
                precision: a.sum_matched / a.count as f64,
                retained,
            }
        })
        .collect();
    let weight_total = if spec.renormalize {
        retained_total
    } else {
        samples.len()
    };
    Ok(BinnedStats {
        bins,
        total: samples.len(),
        retained_total,
        weight_total,
    })
}

/// D-ECE of the samples' probability scores under `spec`.
pub fn compute_d_ece(samples: &[MatchedSample], spec: &BinningSpec) -> Result<(f64, BinnedStats)> {
    let stats = bin_statistics(samples, spec)?;
    if stats.retained_total == 0 {
        return Err(Error::EmptyMetric {
            min_samples: spec.min_samples,
            histogram: stats.histogram(),
        });
    }
    let mut d_ece = 0.0;
    for b in stats.bins.iter().filter(|b| b.retained) {
        d_ece += stats.weight(b) * b.gap();
    }
    Ok((d_ece, stats))
}

/// Classification-style ECE over the confidence alone.
pub fn compute_ece(samples: &[MatchedSample], bins: usize, min_samples: usize) -> Result<f64> {
    let spec = BinningSpec::new(vec![Feature::Confidence], vec![bins], min_samples)?;
    compute_d_ece(samples, &spec).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub confidence: f64,
    pub precision: f64,
    pub count: usize,
}

/// Occupied confidence bins with their mean confidence and precision.
pub fn reliability_curve(samples: &[MatchedSample], bins: usize) -> Result<Vec<ReliabilityBin>> {
    let spec = BinningSpec::new(vec![Feature::Confidence], vec![bins], 0)?;
    let stats = bin_statistics(samples, &spec)?;
    Ok(stats
        .bins
        .into_iter()
        .map(|b| ReliabilityBin {
            bin: b.index[0],
            confidence: b.confidence,
            precision: b.precision,
            count: b.count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub axis1_bin: usize,
    pub axis2_bin: usize,
    /// Share of the total D-ECE contributed by this cell.
    pub contribution: f64,
    /// Count-weighted mean gap of the full-dimensional bins in this cell.
    pub local_error: f64,
    pub count: usize,
    pub precision: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub axes: [Feature; 2],
    pub shape: [usize; 2],
    /// Row-major over `(axis1_bin, axis2_bin)`, all cells including empty ones.
    pub cells: Vec<HeatmapCell>,
    pub d_ece: f64,
}

impl HeatmapGrid {
    pub fn cell(&self, i: usize, j: usize) -> &HeatmapCell {
        &self.cells[i * self.shape[1] + j]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "axis1_bin",
            "axis2_bin",
            "d_ece_contrib",
            "count",
            "precision",
            "confidence",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.axis1_bin.to_string(),
                c.axis2_bin.to_string(),
                c.contribution.to_string(),
                c.count.to_string(),
                opt(c.precision),
                opt(c.confidence),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Marginalizes the full-dimensional bin gaps onto two of the binned
/// dimensions.
pub fn heatmap(samples: &[MatchedSample], spec: &BinningSpec, axes: &[Feature]) -> Result<HeatmapGrid> {
    let &[a1, a2] = axes else {
        return Err(Error::InvalidArgument(format!(
            "a heatmap needs exactly two axes, got {}",
            axes.len()
        )));
    };
    if a1 == a2 {
        return Err(Error::InvalidArgument("heatmap axes must differ".into()));
    }
    let pos = |f: Feature| {
        spec.dims().iter().position(|&d| d == f).ok_or_else(|| {
            Error::InvalidArgument(format!("heatmap axis `{f}` is not a binned dimension"))
        })
    };
    let (p1, p2) = (pos(a1)?, pos(a2)?);
    let (n1, n2) = (spec.counts()[p1], spec.counts()[p2]);

    let (d_ece, stats) = compute_d_ece(samples, spec)?;
    let mut acc = vec![(0.0f64, 0usize, 0.0f64, 0.0f64); n1 * n2];
    for b in stats.bins.iter().filter(|b| b.retained) {
        let cell = &mut acc[b.index[p1] * n2 + b.index[p2]];
        cell.0 += stats.weight(b) * b.gap();
        cell.1 += b.count;
        cell.2 += b.precision * b.count as f64;
        cell.3 += b.confidence * b.count as f64;
    }
    let cells = acc
        .into_iter()
        .enumerate()
        .map(|(k, (contribution, count, sum_prec, sum_conf))| {
            let occupied = count > 0;
            let share = count as f64 / stats.weight_total as f64;
            HeatmapCell {
                axis1_bin: k / n2,
                axis2_bin: k % n2,
                contribution,
                local_error: if occupied { contribution / share } else { 0.0 },
                count,
                precision: occupied.then(|| sum_prec / count as f64),
                confidence: occupied.then(|| sum_conf / count as f64),
            }
        })
        .collect();
    Ok(HeatmapGrid {
        axes: [a1, a2],
        shape: [n1, n2],
        cells,
        d_ece,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{BoxGeometry, Detection};

    fn sample(score: f64, matched: bool, cx: f64) -> MatchedSample {
        MatchedSample::new(
            Detection {
                image_id: "i".into(),
                category_id: 1,
                score,
                bbox: BoxGeometry::new(cx, 0.5, 0.1, 0.1).unwrap(),
            },
            matched,
            if matched { 1.0 } else { 0.0 },
            matched.then_some(0),
        )
    }

    fn four() -> Vec<MatchedSample> {
        vec![
            sample(0.9, true, 0.5),
            sample(0.9, false, 0.5),
            sample(0.1, false, 0.5),
            sample(0.1, false, 0.5),
        ]
    }

    #[test]
    fn bin_index_cases() {
        assert_eq!(bin_index(0.0, 10).unwrap(), 0);
        assert_eq!(bin_index(1.0, 10).unwrap(), 9);
        assert_eq!(bin_index(0.55, 10).unwrap(), 5);
        assert!(bin_index(1.0001, 10).is_err());
        assert!(bin_index(-0.1, 10).is_err());
        assert!(bin_index(f64::NAN, 10).is_err());
    }

    #[test]
    fn four_sample_example() {
        let spec = BinningSpec::new(vec![Feature::Confidence], vec![2], 0).unwrap();
        let (v, stats) = compute_d_ece(&four(), &spec).unwrap();
        assert!((v - 0.25).abs() < 1e-12, "{v}");
        assert_eq!(stats.bins.len(), 2);
        assert_eq!(stats.bins.iter().map(|b| b.count).sum::<usize>(), 4);
    }

    #[test]
    fn perfectly_calibrated_is_zero() {
        let s = vec![
            sample(0.5, true, 0.5),
            sample(0.5, false, 0.5),
            sample(1.0, true, 0.5),
            sample(0.0, false, 0.5),
        ];
        let spec = BinningSpec::new(vec![Feature::Confidence], vec![10], 0).unwrap();
        assert_eq!(compute_d_ece(&s, &spec).unwrap().0, 0.0);
    }

    #[test]
    fn reliability_cases() {
        let ones: Vec<_> = (0..5).map(|_| sample(1.0, true, 0.5)).collect();
        let c = reliability_curve(&ones, 10).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].confidence, c[0].precision), (1.0, 1.0));

        let misses: Vec<_> = (0..5).map(|_| sample(1.0, false, 0.5)).collect();
        let c = reliability_curve(&misses, 10).unwrap();
        assert_eq!((c[0].confidence, c[0].precision), (1.0, 0.0));

        let c = reliability_curve(&four(), 2).unwrap();
        assert_eq!(c.len(), 2);
        assert!((c[0].confidence - 0.1).abs() < 1e-12 && c[0].precision == 0.0);
        assert!((c[1].confidence - 0.9).abs() < 1e-12 && c[1].precision == 0.5);
    }

    #[test]
    fn sparse_bins_dropped_and_renormalized() {
        let mut s = four();
        s.push(sample(0.95, true, 0.5));
        // high bin: 3 samples, low bin: 2
        let mut spec = BinningSpec::new(vec![Feature::Confidence], vec![2], 3).unwrap();
        let (v, stats) = compute_d_ece(&s, &spec).unwrap();
        assert_eq!(stats.retained_total, 3);
        let prec: f64 = 2.0 / 3.0;
        let conf = (0.9 + 0.9 + 0.95) / 3.0;
        assert!((v - (prec - conf).abs()).abs() < 1e-12);

        spec.renormalize = false;
        let (v2, _) = compute_d_ece(&s, &spec).unwrap();
        assert!((v2 - 0.6 * (prec - conf).abs()).abs() < 1e-12);
    }

    #[test]
    fn all_bins_dropped_is_an_error() {
        let spec = BinningSpec::new(vec![Feature::Confidence], vec![2], 8).unwrap();
        match compute_d_ece(&four(), &spec) {
            Err(Error::EmptyMetric { histogram, .. }) => assert!(histogram.contains("[0]:2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heatmap_axes_validation() {
        let spec = BinningSpec::new(vec![Feature::Confidence, Feature::Cx], vec![2, 2], 0).unwrap();
        assert!(heatmap(&four(), &spec, &[Feature::Cx]).is_err());
        assert!(heatmap(&four(), &spec, &[Feature::Cx, Feature::Cy]).is_err());
        assert!(heatmap(&four(), &spec, &[Feature::Cx, Feature::Cx]).is_err());
    }

    #[test]
    fn heatmap_localizes_miscalibration() {
        // calibrated on the left half, overconfident on the right
        let mut s = Vec::new();
        for i in 0..40 {
            let cx = if i < 20 { 0.25 } else { 0.75 };
            let matched = if i < 20 { i % 2 == 0 } else { i % 10 == 0 };
            s.push(sample(0.5, matched, cx));
        }
        let spec = BinningSpec::new(vec![Feature::Confidence, Feature::Cx, Feature::Cy], vec![2, 2, 1], 0).unwrap();
        let grid = heatmap(&s, &spec, &[Feature::Cx, Feature::Cy]).unwrap();
        assert_eq!(grid.cell(0, 0).local_error, 0.0);
        assert!((grid.cell(1, 0).local_error - 0.4).abs() < 1e-12);
        let mass: f64 = grid.cells.iter().map(|c| c.contribution).sum();
        assert!((mass - grid.d_ece).abs() < 1e-15);
        let csv = grid.to_csv();
        assert!(csv.starts_with("axis1_bin,axis2_bin,d_ece_contrib,count,precision,confidence"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn spec_validation() {
        assert!(BinningSpec::new(vec![], vec![], 0).is_err());
        assert!(BinningSpec::new(vec![Feature::Confidence], vec![0], 0).is_err());
        assert!(BinningSpec::new(vec![Feature::Confidence, Feature::Confidence], vec![2, 2], 0).is_err());
        assert!(broadcast(&[3, 4], 3).is_err());
        assert_eq!(broadcast(&[3], 3).unwrap(), vec![3, 3, 3]);
    }
}
