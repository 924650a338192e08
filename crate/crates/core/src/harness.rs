//! Repeated random-split evaluation of calibration methods.
//!
//! Each repetition splits the samples (stratified by match label), fits every
//! (method, feature set) pair on the training portion and scores the test
//! portion with the D-ECE over the feature set's own dimensions. The
//! uncalibrated scores are evaluated the same way as the baseline row.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrators::{FitOptions, Method, ModelSet, NonConvergencePolicy};
use crate::detections::{Detection, GroundTruthObject};
use crate::error::{Error, Result};
use crate::features::{ConfidenceEncoding, FeatureSet, DEFAULT_EPSILON};
use crate::matching::{match_detections, MatchOptions, MatchedSample};
use crate::metrics::{compute_d_ece, default_calibration_bins, default_eval_bins, BinningSpec, DEFAULT_MIN_SAMPLES};
use crate::optimizer::OptimizerConfig;

/// A calibration method, or the passthrough that leaves scores unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Calibrator {
    Identity,
    Method(Method),
}

impl Calibrator {
    pub fn name(self) -> &'static str {
        match self {
            Calibrator::Identity => "identity",
            Calibrator::Method(m) => m.short_name(),
        }
    }
}

impl fmt::Display for Calibrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Calibrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            Ok(Calibrator::Identity)
        } else {
            s.parse().map(Calibrator::Method)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub train_frac: f64,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Calibrator>,
    pub feature_sets: Vec<FeatureSet>,
    /// Histogram-binning bins per dimension, keyed by feature-set name.
    pub calibration_bins: BTreeMap<String, usize>,
    /// D-ECE bins per dimension, keyed by feature-set name.
    pub eval_bins: BTreeMap<String, usize>,
    pub min_samples: usize,
    /// Scores every column over this set instead of the column's own; it must
    /// contain every fitted feature set.
    pub eval_feature_set: Option<FeatureSet>,
    /// Used by [`run_protocol_multi_iou`].
    pub iou_thresholds: Vec<f64>,
    pub optimizer: OptimizerConfig,
    pub per_class: bool,
    pub epsilon: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let fs = |n: &str| FeatureSet::parse(n, ConfidenceEncoding::Probability).expect("valid");
        ProtocolConfig {
            train_frac: 0.7,
            reps: 20,
            seed: 0,
            methods: Method::ALL.iter().map(|&m| Calibrator::Method(m)).collect(),
            feature_sets: vec![fs("conf"), fs("conf+xy"), fs("conf+wh"), fs("full")],
            calibration_bins: BTreeMap::new(),
            eval_bins: BTreeMap::new(),
            min_samples: DEFAULT_MIN_SAMPLES,
            eval_feature_set: None,
            iou_thresholds: vec![0.6],
            optimizer: OptimizerConfig::default(),
            per_class: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {} outside (0, 1)",
                self.train_frac
            )));
        }
        if self.reps == 0 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() || self.feature_sets.is_empty() {
            return Err(Error::InvalidArgument("no methods or feature sets to evaluate".into()));
        }
        if let Some(eval) = &self.eval_feature_set {
            for fs in &self.feature_sets {
                if !eval.contains_all(fs) {
                    return Err(Error::Dimensionality(format!(
                        "evaluation set {eval} lacks dimensions of the calibration set {fs}"
                    )));
                }
            }
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidArgument("IoU thresholds must lie in (0, 1]".into()));
        }
        crate::features::check_epsilon(self.epsilon)?;
        self.optimizer.validate()
    }

    fn eval_set<'a>(&'a self, fs: &'a FeatureSet) -> &'a FeatureSet {
        self.eval_feature_set.as_ref().unwrap_or(fs)
    }

    /// D-ECE binning used for a column.
    pub fn eval_spec(&self, fs: &FeatureSet) -> Result<BinningSpec> {
        let eval = self.eval_set(fs);
        let n = self
            .eval_bins
            .get(&eval.name())
            .copied()
            .unwrap_or_else(|| default_eval_bins(eval.dim()));
        BinningSpec::for_feature_set(eval, &[n], self.min_samples)
    }

    fn fit_options(&self, fs: &FeatureSet) -> FitOptions {
        let n = self
            .calibration_bins
            .get(&fs.name())
            .copied()
            .unwrap_or_else(|| default_calibration_bins(fs.dim()));
        FitOptions {
            optimizer: self.optimizer,
            epsilon: self.epsilon,
            hist_bins: Some(vec![n; fs.dim()]),
            per_class: self.per_class,
            on_nonconvergence: NonConvergencePolicy::Warn,
        }
    }
}

/// Aggregate of one table cell over the repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// D-ECE per repetition as a fraction; `None` where the cell failed.
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single successful repetition.
    pub std: Option<f64>,
    pub failures: usize,
}

impl CellResult {
    fn from_values(values: Vec<Option<f64>>) -> Self {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        let failures = values.len() - ok.len();
        let (mean, std) = if ok.is_empty() {
            (None, None)
        } else {
            let n = ok.len() as f64;
            let mean = ok.iter().sum::<f64>() / n;
            let var = if ok.len() > 1 {
                ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        };
        CellResult {
            values,
            mean,
            std,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub repetitions: usize,
    pub iou_threshold: Option<f64>,
    /// Feature-set names, one per column.
    pub columns: Vec<String>,
    pub headings: Vec<String>,
    /// Evaluation set per column.
    pub eval_sets: Vec<String>,
    pub baseline: MethodRow,
    pub rows: Vec<MethodRow>,
}

impl ResultsTable {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// The cell for `method` (or `baseline`) and the named feature set.
    pub fn cell(&self, method: &str, column: &str) -> Option<&CellResult> {
        let j = self.column(column)?;
        let row = if method == "baseline" { Some(&self.baseline) } else { self.row(method) };
        row.map(|r| &r.cells[j])
    }
}

struct RepResult {
    baseline: Vec<Option<f64>>,
    cells: Vec<Vec<Option<f64>>>,
}

/// Train/test index split, stratified by label. Both portions keep input
/// order.
pub fn stratified_split(samples: &[MatchedSample], train_frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [true, false] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].matched == label).collect();
        idx.shuffle(rng);
        let mut n_train = (train_frac * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            n_train = n_train.clamp(1, idx.len() - 1);
        } else {
            n_train = idx.len();
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn score(samples: &[MatchedSample], spec: &BinningSpec) -> Option<f64> {
    match compute_d_ece(samples, spec) {
        Ok((v, _)) => Some(v),
        Err(e) => {
            log::warn!("D-ECE unavailable: {e}");
            None
        }
    }
}

fn run_rep(samples: &[MatchedSample], cfg: &ProtocolConfig, specs: &[BinningSpec], rep: usize) -> RepResult {
    let mut rng = rep_rng(cfg.seed, rep);
    let (train_idx, test_idx) = stratified_split(samples, cfg.train_frac, &mut rng);
    let train: Vec<MatchedSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test: Vec<MatchedSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();

    let baseline = specs.iter().map(|spec| score(&test, spec)).collect();
    let cells = cfg
        .methods
        .iter()
        .map(|&cal| {
            cfg.feature_sets
                .iter()
                .zip(specs)
                .map(|(fs, spec)| {
                    let calibrated = match cal {
                        Calibrator::Identity => Ok(test.clone()),
                        Calibrator::Method(m) => ModelSet::fit(m, &train, fs, &cfg.fit_options(fs))
                            .and_then(|set| set.calibrate(&test)),
                    };
                    match calibrated {
                        Ok(c) => score(&c, spec),
                        Err(e) => {
                            log::warn!("repetition {rep}: {cal} on {fs} failed: {e}");
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();
    RepResult { baseline, cells }
}

/// Runs the protocol on matched samples.
pub fn run_protocol(samples: &[MatchedSample], cfg: &ProtocolConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let positives = samples.iter().filter(|s| s.matched).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::DegenerateLabels {
            positives,
            negatives: samples.len() - positives,
        });
    }
    let specs: Vec<BinningSpec> = cfg.feature_sets.iter().map(|fs| cfg.eval_spec(fs)).collect::<Result<_>>()?;

    let reps: Vec<RepResult> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(samples, cfg, &specs, rep))
        .collect();

    let ncol = cfg.feature_sets.len();
    let baseline = MethodRow {
        method: "baseline".into(),
        cells: (0..ncol)
            .map(|j| CellResult::from_values(reps.iter().map(|r| r.baseline[j]).collect()))
            .collect(),
    };
    let rows = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, cal)| MethodRow {
            method: cal.name().into(),
            cells: (0..ncol)
                .map(|j| CellResult::from_values(reps.iter().map(|r| r.cells[i][j]).collect()))
                .collect(),
        })
        .collect();
    Ok(ResultsTable {
        repetitions: cfg.reps,
        iou_threshold: None,
        columns: cfg.feature_sets.iter().map(|f| f.name()).collect(),
        headings: cfg.feature_sets.iter().map(|f| f.heading()).collect(),
        eval_sets: cfg.feature_sets.iter().map(|f| cfg.eval_set(f).name()).collect(),
        baseline,
        rows,
    })
}

/// Matches at each configured IoU threshold and runs the protocol on each.
pub fn run_protocol_multi_iou(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    cfg: &ProtocolConfig,
) -> Result<Vec<ResultsTable>> {
    cfg.validate()?;
    cfg.iou_thresholds
        .iter()
        .map(|&t| {
            let samples = match_detections(detections, ground_truth, t, &MatchOptions::default())?;
            let mut table = run_protocol(&samples, cfg)?;
            table.iou_threshold = Some(t);
            Ok(table)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown table format `{other}`"))),
        }
    }
}

fn percent(v: f64) -> String {
    format!("{:.3}", 100.0 * v)
}

fn rounded_percent(v: Option<f64>) -> Option<f64> {
    v.map(|x| (100_000.0 * x).round() / 1000.0)
}

#[derive(Serialize)]
struct JsonCell {
    mean: Option<f64>,
    std: Option<f64>,
    failures: usize,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    method: &'a str,
    cells: Vec<JsonCell>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    unit: &'static str,
    repetitions: usize,
    iou_threshold: Option<f64>,
    columns: &'a [String],
    headings: &'a [String],
    eval_sets: &'a [String],
    rows: Vec<JsonRow<'a>>,
}

/// Serializes a table with D-ECE in percent to three decimals.
pub fn render_table(table: &ResultsTable, format: TableFormat) -> String {
    let all_rows: Vec<&MethodRow> = std::iter::once(&table.baseline).chain(&table.rows).collect();
    match format {
        TableFormat::Text => {
            let fmt_cell = |c: &CellResult| match (c.mean, c.std) {
                (Some(m), Some(s)) if c.failures == 0 => format!("{} ± {}", percent(m), percent(s)),
                (Some(m), Some(s)) => format!("{} ± {} ({} failed)", percent(m), percent(s), c.failures),
                _ => "failed".to_string(),
            };
            let mut grid = vec![std::iter::once("method".to_string()).chain(table.headings.iter().cloned()).collect::<Vec<_>>()];
            for r in &all_rows {
                grid.push(std::iter::once(r.method.clone()).chain(r.cells.iter().map(fmt_cell)).collect());
            }
            let widths: Vec<usize> = (0..grid[0].len())
                .map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
                .collect();
            let mut out = format!("D-ECE (%) mean ± std over {} repetitions", table.repetitions);
            if let Some(t) = table.iou_threshold {
                out += &format!(", IoU {t}");
            }
            out.push('\n');
            for row in grid {
                let line: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                    .collect();
                out += line.join("  ").trim_end();
                out.push('\n');
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string()];
            header.extend(table.headings.iter().cloned());
            header.extend(table.headings.iter().map(|h| format!("std {h}")));
            w.write_record(&header).expect("in-memory write");
            for r in &all_rows {
                let mut rec = vec![r.method.clone()];
                rec.extend(r.cells.iter().map(|c| c.mean.map(percent).unwrap_or_default()));
                rec.extend(r.cells.iter().map(|c| c.std.map(percent).unwrap_or_default()));
                w.write_record(&rec).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
        }
        TableFormat::Json => {
            let report = JsonReport {
                unit: "percent",
                repetitions: table.repetitions,
                iou_threshold: table.iou_threshold,
                columns: &table.columns,
                headings: &table.headings,
                eval_sets: &table.eval_sets,
                rows: all_rows
                    .iter()
                    .map(|r| JsonRow {
                        method: &r.method,
                        cells: r
                            .cells
                            .iter()
                            .map(|c| JsonCell {
                                mean: rounded_percent(c.mean),
                                std: rounded_percent(c.std),
                                failures: c.failures,
                            })
                            .collect(),
                    })
                    .collect(),
            };
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, scenario};

    fn fs(name: &str) -> FeatureSet {
        FeatureSet::parse(name, ConfidenceEncoding::Probability).unwrap()
    }

    fn small_cfg(methods: Vec<Calibrator>, sets: &[&str]) -> ProtocolConfig {
        ProtocolConfig {
            reps: 3,
            methods,
            feature_sets: sets.iter().map(|s| fs(s)).collect(),
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn identity_equals_baseline() {
        let s = generate(&scenario("uniform_overconfident").unwrap().with_count(3000)).unwrap();
        let mut cfg = small_cfg(vec![Calibrator::Identity], &["conf", "conf+xy"]);
        cfg.reps = 1;
        let t = run_protocol(&s, &cfg).unwrap();
        assert_eq!(t.rows[0].cells, t.baseline.cells);
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let s = generate(&scenario("fig3_boundary_decay").unwrap().with_count(1001)).unwrap();
        for rep in 0..5 {
            let (train, test) = stratified_split(&s, 0.7, &mut rep_rng(3, rep));
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
            assert!(train.iter().any(|&i| s[i].matched) && train.iter().any(|&i| !s[i].matched));
        }
        let a = stratified_split(&s, 0.7, &mut rep_rng(3, 0));
        let b = stratified_split(&s, 0.7, &mut rep_rng(3, 1));
        assert_ne!(a, b);
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let s = generate(&scenario("scale_dependent").unwrap().with_count(2000)).unwrap();
        let cfg = small_cfg(
            vec![Calibrator::Method(Method::HistBinning), Calibrator::Method(Method::LogisticIndep)],
            &["conf", "conf+wh"],
        );
        let a = run_protocol(&s, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_protocol(&s, &cfg)).unwrap();
        assert_eq!(a, b);
        assert_eq!(render_table(&a, TableFormat::Json), render_table(&b, TableFormat::Json));
    }

    #[test]
    fn lower_dimensional_evaluation_is_refused() {
        let mut cfg = small_cfg(vec![Calibrator::Identity], &["conf+xy"]);
        cfg.eval_feature_set = Some(fs("conf"));
        assert!(matches!(cfg.validate(), Err(Error::Dimensionality(_))));
        cfg.eval_feature_set = Some(fs("conf+wh"));
        assert!(matches!(cfg.validate(), Err(Error::Dimensionality(_))));
        cfg.eval_feature_set = Some(fs("full"));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn empty_metric_is_a_cell_marker() {
        let s = generate(&scenario("uniform_overconfident").unwrap().with_count(200)).unwrap();
        let mut cfg = small_cfg(vec![Calibrator::Identity], &["conf", "full"]);
        cfg.min_samples = 50;
        cfg.eval_bins.insert("conf".into(), 1);
        let t = run_protocol(&s, &cfg).unwrap();
        let full = t.cell("identity", "full").unwrap();
        assert_eq!(full.failures, 3);
        assert!(full.mean.is_none());
        assert!(t.cell("baseline", "conf").unwrap().mean.is_some());
    }

    #[test]
    fn csv_headings_and_round_trip() {
        let s = generate(&scenario("fig3_boundary_decay").unwrap().with_count(3000)).unwrap();
        let mut cfg = small_cfg(vec![Calibrator::Identity], &["conf", "conf+xy", "conf+wh", "full"]);
        cfg.reps = 1;
        let t = run_protocol(&s, &cfg).unwrap();
        let text = render_table(&t, TableFormat::Csv);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(&headers[1..5], ["(p̂)", "(p̂,cx,cy)", "(p̂,w,h)", "full"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "baseline");
        let v: f64 = rows[0][1].parse().unwrap();
        assert!((v - 100.0 * t.baseline.cells[0].mean.unwrap()).abs() < 1e-3);
    }

    #[test]
    fn text_table_has_baseline_row() {
        let s = generate(&scenario("uniform_overconfident").unwrap().with_count(1000)).unwrap();
        let mut cfg = small_cfg(vec![Calibrator::Method(Method::LogisticIndep)], &["conf"]);
        cfg.reps = 1;
        let text = render_table(&run_protocol(&s, &cfg).unwrap(), TableFormat::Text);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("baseline") && lines[3].starts_with("lc"));
    }
}
