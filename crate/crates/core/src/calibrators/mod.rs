//! Calibration maps: fitting, application and model files.
//!
//! Five families are available. Histogram binning looks up the training
//! precision of the sample's joint bin; the other four evaluate a
//! log-likelihood ratio and squash it with a sigmoid:
//!
//! | method           | parameters      | confidence input |
//! |------------------|-----------------|------------------|
//! | `hist_binning`   | `prod N_k`      | probability      |
//! | `logistic_indep` | `K + 1`         | logit            |
//! | `logistic_dep`   | `2(K^2 + K) + 1`| logit            |
//! | `beta_indep`     | `2K + 1`        | probability      |
//! | `beta_dep`       | `4(K + 1) + 1`  | probability      |

pub mod histogram;
pub mod parametric;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use histogram::{BinTable, HistBinningParams};
pub use parametric::{
    ln_multivariate_beta, BetaDepParams, BetaIndepParams, LogisticDepParams, LogisticIndepParams,
    POSITIVE_FLOOR,
};

use crate::error::{Error, Result};
use crate::features::{build_features, sigmoid, ConfidenceEncoding, FeatureSet, FeatureVector, DEFAULT_EPSILON};
use crate::matching::MatchedSample;
use crate::metrics::default_calibration_bins;
use crate::optimizer::{minimize, Objective, OptimizerConfig};
use parametric::{NllObjective, ParametricMap};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HistBinning,
    LogisticIndep,
    LogisticDep,
    BetaIndep,
    BetaDep,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::HistBinning,
        Method::LogisticIndep,
        Method::LogisticDep,
        Method::BetaIndep,
        Method::BetaDep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::HistBinning => "hist_binning",
            Method::LogisticIndep => "logistic_indep",
            Method::LogisticDep => "logistic_dep",
            Method::BetaIndep => "beta_indep",
            Method::BetaDep => "beta_dep",
        }
    }

    /// Short command-line name.
    pub fn short_name(self) -> &'static str {
        match self {
            Method::HistBinning => "hb",
            Method::LogisticIndep => "lc",
            Method::LogisticDep => "lc-dep",
            Method::BetaIndep => "bc",
            Method::BetaDep => "bc-dep",
        }
    }

    /// How this family consumes the confidence.
    pub fn encoding(self) -> ConfidenceEncoding {
        match self {
            Method::LogisticIndep | Method::LogisticDep => ConfidenceEncoding::Logit,
            _ => ConfidenceEncoding::Probability,
        }
    }

    pub fn is_parametric(self) -> bool {
        self != Method::HistBinning
    }

    /// Parameter count of a parametric map over `k` inputs.
    pub fn parametric_param_count(self, k: usize) -> Option<usize> {
        match self {
            Method::HistBinning => None,
            Method::LogisticIndep => Some(k + 1),
            Method::BetaIndep => Some(2 * k + 1),
            Method::LogisticDep => Some(2 * (k * k + k) + 1),
            Method::BetaDep => Some(4 * (k + 1) + 1),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.short_name() == s || m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown calibration method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    HistBinning(HistBinningParams),
    LogisticIndep(LogisticIndepParams),
    LogisticDep(LogisticDepParams),
    BetaIndep(BetaIndepParams),
    BetaDep(BetaDepParams),
}

impl Params {
    pub fn method(&self) -> Method {
        match self {
            Params::HistBinning(_) => Method::HistBinning,
            Params::LogisticIndep(_) => Method::LogisticIndep,
            Params::LogisticDep(_) => Method::LogisticDep,
            Params::BetaIndep(_) => Method::BetaIndep,
            Params::BetaDep(_) => Method::BetaDep,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Params::HistBinning(p) => p.param_count(),
            Params::LogisticIndep(p) => p.param_count(),
            Params::LogisticDep(p) => p.param_count(),
            Params::BetaIndep(p) => p.param_count(),
            Params::BetaDep(p) => p.param_count(),
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        match self {
            Params::HistBinning(p) => p.validate(k),
            Params::LogisticIndep(p) => p.validate(k),
            Params::LogisticDep(p) => p.validate(k),
            Params::BetaIndep(p) => p.validate(k),
            Params::BetaDep(p) => p.validate(k),
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Params::HistBinning(p) => serde_json::to_value(p),
            Params::LogisticIndep(p) => serde_json::to_value(p),
            Params::LogisticDep(p) => serde_json::to_value(p),
            Params::BetaIndep(p) => serde_json::to_value(p),
            Params::BetaDep(p) => serde_json::to_value(p),
        };
        v.expect("parameters serialize")
    }

    fn from_value(method: Method, v: Value) -> Result<Self> {
        let err = |e: serde_json::Error| Error::Schema(format!("{} parameters: {e}", method.name()));
        Ok(match method {
            Method::HistBinning => Params::HistBinning(serde_json::from_value(v).map_err(err)?),
            Method::LogisticIndep => Params::LogisticIndep(serde_json::from_value(v).map_err(err)?),
            Method::LogisticDep => Params::LogisticDep(serde_json::from_value(v).map_err(err)?),
            Method::BetaIndep => Params::BetaIndep(serde_json::from_value(v).map_err(err)?),
            Method::BetaDep => Params::BetaDep(serde_json::from_value(v).map_err(err)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub sample_count: usize,
    /// Mean training NLL without the ridge term; absent for histogram binning.
    pub final_nll: Option<f64>,
    pub iterations: usize,
    pub gradient_norm: Option<f64>,
    pub converged: bool,
}

/// Reaction to an optimizer run that exhausts its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonConvergencePolicy {
    #[default]
    Fail,
    Warn,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub optimizer: OptimizerConfig,
    pub epsilon: f64,
    /// Histogram bins per dimension; defaults by dimensionality when unset.
    pub hist_bins: Option<Vec<usize>>,
    /// One model per category instead of a single pooled model.
    pub per_class: bool,
    pub on_nonconvergence: NonConvergencePolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optimizer: OptimizerConfig::default(),
            epsilon: DEFAULT_EPSILON,
            hist_bins: None,
            per_class: true,
            on_nonconvergence: NonConvergencePolicy::Fail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub method: Method,
    /// Carries the confidence encoding the method consumes.
    pub feature_set: FeatureSet,
    /// `None` for a model pooled over all categories.
    pub category_id: Option<i64>,
    pub epsilon: f64,
    params: Option<Params>,
    pub fit_metadata: Option<FitMetadata>,
}

impl CalibrationModel {
    pub fn unfitted(method: Method, feature_set: &FeatureSet) -> Self {
        CalibrationModel {
            method,
            feature_set: feature_set.with_encoding(method.encoding()),
            category_id: None,
            epsilon: DEFAULT_EPSILON,
            params: None,
            fit_metadata: None,
        }
    }

    /// Builds a fitted model from explicit parameters.
    pub fn from_params(feature_set: &FeatureSet, params: Params, epsilon: f64) -> Result<Self> {
        let method = params.method();
        params.validate(feature_set.dim())?;
        crate::features::check_epsilon(epsilon)?;
        Ok(CalibrationModel {
            method,
            feature_set: feature_set.with_encoding(method.encoding()),
            category_id: None,
            epsilon,
            params: Some(params),
            fit_metadata: None,
        })
    }

    /// Fits on all `samples` regardless of category.
    pub fn fit(method: Method, samples: &[MatchedSample], fs: &FeatureSet, opts: &FitOptions) -> Result<Self> {
        match method {
            Method::HistBinning => {
                let bins = match &opts.hist_bins {
                    Some(b) => crate::metrics::broadcast(b, fs.dim())?,
                    None => vec![default_calibration_bins(fs.dim()); fs.dim()],
                };
                fit_hist_binning(samples, fs, &bins, opts.epsilon)
            }
            m => fit_parametric(m, samples, fs, opts),
        }
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn is_fitted(&self) -> bool {
        self.params.is_some()
    }

    pub fn param_count(&self) -> Option<usize> {
        self.params.as_ref().map(Params::param_count)
    }

    pub fn features(&self, sample: &MatchedSample) -> FeatureVector {
        build_features(sample, &self.feature_set, self.epsilon)
    }

    /// The log-likelihood ratio at `s`; histogram binning has none.
    pub fn loglik_ratio(&self, s: &FeatureVector) -> Result<f64> {
        let params = self.params.as_ref().ok_or(Error::NotFitted)?;
        let k = self.feature_set.dim();
        if s.0.len() != k {
            return Err(Error::InvalidArgument(format!(
                "feature vector has {} entries, model expects {k}",
                s.0.len()
            )));
        }
        let v = s.values();
        Ok(match params {
            Params::HistBinning(_) => {
                return Err(Error::Unsupported(
                    "histogram binning has no log-likelihood ratio".into(),
                ))
            }
            Params::LogisticIndep(p) => p.loglik_ratio(v),
            Params::LogisticDep(p) => p.loglik_ratio(v),
            Params::BetaIndep(p) => p.loglik_ratio(v),
            Params::BetaDep(p) => p.loglik_ratio(v),
        })
    }

    /// Calibrated confidence of one sample.
    pub fn calibrate_one(&self, sample: &MatchedSample) -> Result<f64> {
        let params = self.params.as_ref().ok_or(Error::NotFitted)?;
        let s = self.features(sample);
        match params {
            Params::HistBinning(p) => p.lookup(s.values(), sample.score()),
            _ => self.loglik_ratio(&s).map(sigmoid),
        }
    }

    /// Calibrated confidences in input order.
    pub fn apply(&self, samples: &[MatchedSample]) -> Result<Vec<f64>> {
        if !self.is_fitted() {
            return Err(Error::NotFitted);
        }
        samples.par_iter().map(|s| self.calibrate_one(s)).collect()
    }

    fn to_record(&self) -> Result<ModelRecord> {
        let params = self.params.as_ref().ok_or(Error::NotFitted)?;
        Ok(ModelRecord {
            schema_version: MODEL_SCHEMA_VERSION,
            method: self.method.name().to_owned(),
            feature_set: self.feature_set.clone(),
            category_id: self.category_id,
            epsilon: self.epsilon,
            params: params.to_value(),
            fit_metadata: self.fit_metadata.clone(),
        })
    }

    fn from_record(r: ModelRecord) -> Result<Self> {
        if r.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        let method: Method = r
            .method
            .parse()
            .map_err(|_| Error::Schema(format!("unknown method `{}`", r.method)))?;
        if r.feature_set.encoding() != method.encoding() {
            return Err(Error::Schema(format!(
                "{} expects {:?} confidence encoding",
                method.name(),
                method.encoding()
            )));
        }
        crate::features::check_epsilon(r.epsilon).map_err(|e| Error::Schema(e.to_string()))?;
        let params = Params::from_value(method, r.params)?;
        params.validate(r.feature_set.dim())?;
        Ok(CalibrationModel {
            method,
            feature_set: r.feature_set,
            category_id: r.category_id,
            epsilon: r.epsilon,
            params: Some(params),
            fit_metadata: r.fit_metadata,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record()?).expect("model serializes"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ModelRecord = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        CalibrationModel::from_record(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        CalibrationModel::from_json(&crate::detections::read_text(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    schema_version: u32,
    method: String,
    feature_set: FeatureSet,
    category_id: Option<i64>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    params: Value,
    fit_metadata: Option<FitMetadata>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Histogram binning over the clipped probability-space features.
pub fn fit_hist_binning(
    samples: &[MatchedSample],
    fs: &FeatureSet,
    bin_counts: &[usize],
    epsilon: f64,
) -> Result<CalibrationModel> {
    crate::features::check_epsilon(epsilon)?;
    let mut model = CalibrationModel::unfitted(Method::HistBinning, fs);
    model.epsilon = epsilon;
    if bin_counts.len() != fs.dim() {
        return Err(Error::InvalidArgument(format!(
            "{} bin counts for {} features",
            bin_counts.len(),
            fs.dim()
        )));
    }
    let features: Vec<Vec<f64>> = samples.iter().map(|s| model.features(s).0).collect();
    let labels = crate::features::labels(samples);
    let params = HistBinningParams::fit(&features, &labels, bin_counts)?;
    model.params = Some(Params::HistBinning(params));
    model.fit_metadata = Some(FitMetadata {
        sample_count: samples.len(),
        final_nll: None,
        iterations: 0,
        gradient_norm: None,
        converged: true,
    });
    Ok(model)
}

/// Maximum-likelihood fit of one of the four parametric families.
pub fn fit_parametric(
    method: Method,
    samples: &[MatchedSample],
    fs: &FeatureSet,
    opts: &FitOptions,
) -> Result<CalibrationModel> {
    crate::features::check_epsilon(opts.epsilon)?;
    opts.optimizer.validate()?;
    let mut model = CalibrationModel::unfitted(method, fs);
    model.epsilon = opts.epsilon;

    let labels = crate::features::labels(samples);
    let positives = labels.iter().filter(|&&m| m).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels { positives, negatives });
    }
    let features: Vec<Vec<f64>> = samples.iter().map(|s| model.features(s).0).collect();
    let k = fs.dim();

    let (params, meta) = match method {
        Method::HistBinning => {
            return Err(Error::InvalidArgument(
                "histogram binning is not a parametric method".into(),
            ))
        }
        Method::LogisticIndep => {
            let (p, m) = fit_map(&features, &labels, k, vec![LogisticIndepParams::identity(k)], opts)?;
            (Params::LogisticIndep(p), m)
        }
        Method::BetaIndep => {
            let (p, m) = fit_map(&features, &labels, k, vec![BetaIndepParams::identity(k)], opts)?;
            (Params::BetaIndep(p), m)
        }
        Method::BetaDep => {
            let (p, m) = fit_map(&features, &labels, k, vec![BetaDepParams::identity(k)], opts)?;
            (Params::BetaDep(p), m)
        }
        Method::LogisticDep => {
            // fit on standardized features, which keeps the quadratic forms
            // well conditioned when box sizes span a small range
            let (mean, scale) = standardization(&features);
            let z: Vec<Vec<f64>> = features
                .iter()
                .map(|s| s.iter().zip(&mean).zip(&scale).map(|((x, m), sd)| (x - m) / sd).collect())
                .collect();
            // warm start from the independent fit, which the dependent family contains
            let warm = FitOptions {
                on_nonconvergence: NonConvergencePolicy::Warn,
                ..opts.clone()
            };
            let (linear, _) = fit_map(&z, &labels, k, vec![LogisticIndepParams::identity(k)], &warm)?;
            let starts = vec![
                LogisticDepParams::from_linear(&linear.w, linear.c),
                LogisticDepParams::from_moments(&z, &labels),
            ];
            let (p, m) = fit_map(&z, &labels, k, starts, opts)?;
            (Params::LogisticDep(p.unstandardize(&mean, &scale)), m)
        }
    };
    model.params = Some(params);
    model.fit_metadata = Some(meta);
    Ok(model)
}

/// Per-dimension mean and standard deviation; constant dimensions get scale 1.
fn standardization(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; k];
    for s in features {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut scale = vec![0.0; k];
    for s in features {
        for ((v, x), m) in scale.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    for v in &mut scale {
        *v = if *v > 1e-24 { v.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

/// Minimizes the NLL from the best of `starts`, with the ridge anchored at
/// that start.
fn fit_map<P: ParametricMap>(
    features: &[Vec<f64>],
    labels: &[bool],
    k: usize,
    starts: Vec<P>,
    opts: &FitOptions,
) -> Result<(P, FitMetadata)> {
    let probe = NllObjective::<P>::new(features, labels, k, 0.0, vec![0.0; P::theta_len(k)]);
    let start = starts
        .iter()
        .map(|p| p.to_theta())
        .map(|t| (probe.nll(&t), t))
        .filter(|(v, _)| v.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Numerical {
            message: "no finite starting point".into(),
            iterate: Vec::new(),
        })?;

    let objective = NllObjective::<P>::new(features, labels, k, opts.optimizer.ridge, start.clone());
    let (theta, report) = minimize(&objective as &dyn Objective, &start, &opts.optimizer)?;
    if !report.converged {
        match opts.on_nonconvergence {
            NonConvergencePolicy::Fail => {
                return Err(Error::NonConvergence {
                    iterations: report.iterations,
                    gradient_norm: report.gradient_norm,
                    iterate: theta,
                })
            }
            NonConvergencePolicy::Warn => log::warn!(
                "calibration fit stopped after {} iterations with gradient norm {:.3e}",
                report.iterations,
                report.gradient_norm
            ),
        }
    }
    let meta = FitMetadata {
        sample_count: features.len(),
        final_nll: Some(objective.nll(&theta)),
        iterations: report.iterations,
        gradient_norm: Some(report.gradient_norm),
        converged: report.converged,
    };
    Ok((P::from_theta(k, &theta), meta))
}

/// The mean-NLL objective of a parametric method over its unconstrained
/// parameter vector, with the ridge anchored at zero.
pub fn nll_objective<'a>(
    method: Method,
    features: &'a [Vec<f64>],
    labels: &'a [bool],
    k: usize,
    ridge: f64,
) -> Result<Box<dyn Objective + 'a>> {
    fn boxed<'a, P: ParametricMap + 'a>(
        f: &'a [Vec<f64>],
        l: &'a [bool],
        k: usize,
        ridge: f64,
    ) -> Box<dyn Objective + 'a> {
        Box::new(NllObjective::<P>::new(f, l, k, ridge, vec![0.0; P::theta_len(k)]))
    }
    if features.len() != labels.len() || features.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidArgument("features and labels disagree in shape".into()));
    }
    Ok(match method {
        Method::HistBinning => {
            return Err(Error::Unsupported("histogram binning has no likelihood objective".into()))
        }
        Method::LogisticIndep => boxed::<LogisticIndepParams>(features, labels, k, ridge),
        Method::LogisticDep => boxed::<LogisticDepParams>(features, labels, k, ridge),
        Method::BetaIndep => boxed::<BetaIndepParams>(features, labels, k, ridge),
        Method::BetaDep => boxed::<BetaDepParams>(features, labels, k, ridge),
    })
}

/// Mean training NLL of the identity map on `samples`, the reference every
/// parametric fit must not exceed.
pub fn identity_nll(samples: &[MatchedSample], epsilon: f64) -> f64 {
    let fs = FeatureSet::confidence_only(ConfidenceEncoding::Logit);
    let features: Vec<Vec<f64>> = samples.iter().map(|s| build_features(s, &fs, epsilon).0).collect();
    let labels = crate::features::labels(samples);
    parametric::mean_nll(&LogisticIndepParams::identity(1), &features, &labels)
}

/// Mean binary NLL of a set of calibrated confidences.
pub fn nll_of_scores(scores: &[f64], samples: &[MatchedSample]) -> f64 {
    let eps = 1e-15;
    let total: f64 = scores
        .iter()
        .zip(samples)
        .map(|(&q, s)| {
            let q = q.clamp(eps, 1.0 - eps);
            if s.matched {
                -q.ln()
            } else {
                -(-q).ln_1p()
            }
        })
        .sum();
    total / scores.len() as f64
}

/// Per-category models with an optional pooled fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub models: Vec<CalibrationModel>,
}

impl ModelSet {
    /// Fits one model per category (or a single pooled model when
    /// `opts.per_class` is off). Categories whose data cannot support a fit
    /// are served by a pooled model over all samples.
    pub fn fit(method: Method, samples: &[MatchedSample], fs: &FeatureSet, opts: &FitOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to fit".into()));
        }
        if !opts.per_class {
            return Ok(ModelSet {
                models: vec![CalibrationModel::fit(method, samples, fs, opts)?],
            });
        }
        let mut groups: BTreeMap<i64, Vec<MatchedSample>> = BTreeMap::new();
        for s in samples {
            groups.entry(s.detection.category_id).or_default().push(s.clone());
        }
        let mut models = Vec::new();
        let mut needs_pooled = false;
        for (category, group) in &groups {
            match CalibrationModel::fit(method, group, fs, opts) {
                Ok(mut m) => {
                    m.category_id = Some(*category);
                    models.push(m);
                }
                Err(Error::DegenerateLabels { positives, negatives }) => {
                    log::warn!(
                        "category {category}: {positives} matched / {negatives} unmatched samples; using the pooled model"
                    );
                    needs_pooled = true;
                }
                Err(e) => return Err(e),
            }
        }
        if needs_pooled {
            models.insert(0, CalibrationModel::fit(method, samples, fs, opts)?);
        }
        Ok(ModelSet { models })
    }

    pub fn single(model: CalibrationModel) -> Self {
        ModelSet { models: vec![model] }
    }

    /// The category's own model, else the pooled one.
    pub fn model_for(&self, category_id: i64) -> Option<&CalibrationModel> {
        self.models
            .iter()
            .find(|m| m.category_id == Some(category_id))
            .or_else(|| self.models.iter().find(|m| m.category_id.is_none()))
    }

    pub fn feature_set(&self) -> Option<&FeatureSet> {
        self.models.first().map(|m| &m.feature_set)
    }

    /// Calibrated confidences in input order. Samples of a category with no
    /// model and no pooled fallback keep their score.
    pub fn apply(&self, samples: &[MatchedSample]) -> Result<Vec<f64>> {
        let out: Result<Vec<(f64, bool)>> = samples
            .par_iter()
            .map(|s| match self.model_for(s.detection.category_id) {
                Some(m) => m.calibrate_one(s).map(|q| (q, true)),
                None => Ok((s.score(), false)),
            })
            .collect();
        let out = out?;
        let passthrough = out.iter().filter(|(_, hit)| !hit).count();
        if passthrough > 0 {
            log::warn!("{passthrough} samples belong to categories without a model; scores left unchanged");
        }
        Ok(out.into_iter().map(|(q, _)| q).collect())
    }

    /// Copies of `samples` with calibrated scores and the original kept in
    /// `raw_score`.
    pub fn calibrate(&self, samples: &[MatchedSample]) -> Result<Vec<MatchedSample>> {
        let scores = self.apply(samples)?;
        Ok(samples
            .iter()
            .zip(scores)
            .map(|(s, q)| {
                let mut out = s.clone();
                out.raw_score = Some(s.raw_score.unwrap_or(s.score()));
                out.detection.score = q;
                out
            })
            .collect())
    }

    /// A single model is written as one JSON object, several as an array.
    pub fn to_json(&self) -> Result<String> {
        let records: Vec<ModelRecord> = self.models.iter().map(|m| m.to_record()).collect::<Result<_>>()?;
        let text = match records.as_slice() {
            [one] => serde_json::to_string_pretty(one),
            many => serde_json::to_string_pretty(many),
        };
        Ok(text.expect("models serialize"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let items = match v {
            Value::Array(items) => items,
            other => vec![other],
        };
        if items.is_empty() {
            return Err(Error::Schema("model file holds no models".into()));
        }
        let models = items
            .into_iter()
            .map(|item| {
                let r: ModelRecord = serde_json::from_value(item).map_err(|e| Error::Schema(e.to_string()))?;
                CalibrationModel::from_record(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSet { models })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        ModelSet::from_json(&crate::detections::read_text(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{BoxGeometry, Detection};
    use crate::features::logit;

    fn sample(score: f64, matched: bool) -> MatchedSample {
        MatchedSample::new(
            Detection {
                image_id: "i".into(),
                category_id: 1,
                score,
                bbox: BoxGeometry::new(0.4, 0.6, 0.2, 0.3).unwrap(),
            },
            matched,
            if matched { 0.8 } else { 0.0 },
            matched.then_some(0),
        )
    }

    fn conf(enc: ConfidenceEncoding) -> FeatureSet {
        FeatureSet::confidence_only(enc)
    }

    #[test]
    fn zero_logistic_gives_half() {
        let m = CalibrationModel::from_params(
            &conf(ConfidenceEncoding::Logit),
            Params::LogisticIndep(LogisticIndepParams { w: vec![0.0], c: 0.0 }),
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(m.loglik_ratio(&FeatureVector(vec![3.0])).unwrap(), 0.0);
        assert_eq!(m.apply(&[sample(0.9, true)]).unwrap(), vec![0.5]);
    }

    #[test]
    fn identity_logistic_returns_input() {
        let m = CalibrationModel::from_params(
            &conf(ConfidenceEncoding::Logit),
            Params::LogisticIndep(LogisticIndepParams { w: vec![1.0], c: 0.0 }),
            DEFAULT_EPSILON,
        )
        .unwrap();
        for p in [0.1, 0.37, 0.5, 0.93] {
            assert!((m.apply(&[sample(p, false)]).unwrap()[0] - p).abs() < 1e-12);
            assert!((m.loglik_ratio(&m.features(&sample(p, false))).unwrap() - logit(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn hist_binning_has_no_loglik_ratio() {
        let samples = vec![sample(0.9, true), sample(0.1, false)];
        let m = fit_hist_binning(&samples, &conf(ConfidenceEncoding::Probability), &[2], DEFAULT_EPSILON).unwrap();
        assert!(matches!(
            m.loglik_ratio(&FeatureVector(vec![0.5])),
            Err(Error::Unsupported(_))
        ));
        assert_eq!(m.apply(&[sample(0.95, true)]).unwrap(), vec![1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = CalibrationModel::from_params(
            &conf(ConfidenceEncoding::Logit),
            Params::LogisticIndep(LogisticIndepParams { w: vec![1.0], c: 0.0 }),
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(matches!(
            m.loglik_ratio(&FeatureVector(vec![0.0, 1.0])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unfitted_model_refuses_to_apply() {
        let m = CalibrationModel::unfitted(Method::BetaIndep, &conf(ConfidenceEncoding::Probability));
        assert!(matches!(m.apply(&[sample(0.5, true)]), Err(Error::NotFitted)));
    }

    #[test]
    fn single_label_data_is_degenerate() {
        let samples = vec![sample(0.9, true), sample(0.2, true)];
        let r = fit_parametric(
            Method::LogisticIndep,
            &samples,
            &conf(ConfidenceEncoding::Logit),
            &FitOptions::default(),
        );
        assert!(matches!(r, Err(Error::DegenerateLabels { positives: 2, negatives: 0 })));
    }

    #[test]
    fn schema_errors() {
        let m = CalibrationModel::from_params(
            &conf(ConfidenceEncoding::Logit),
            Params::LogisticIndep(LogisticIndepParams { w: vec![1.0], c: 0.0 }),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let json = m.to_json().unwrap();
        assert_eq!(CalibrationModel::from_json(&json).unwrap(), m);

        let unknown = json.replace("\"logistic_indep\"", "\"isotonic\"");
        assert!(matches!(CalibrationModel::from_json(&unknown), Err(Error::Schema(_))));

        let version = json.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(CalibrationModel::from_json(&version), Err(Error::Schema(_))));

        let mismatch = json.replace("\"w\": [\n      1.0\n    ]", "\"w\": [1.0, 2.0]");
        assert_ne!(mismatch, json);
        assert!(matches!(CalibrationModel::from_json(&mismatch), Err(Error::Schema(_))));
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.short_name().parse::<Method>().unwrap(), m);
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("isotonic".parse::<Method>().is_err());
    }
}
