//! Command-line entry point.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or validation
//! errors, 3 on numerical failures. Diagnostics go to standard error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibrators::{FitOptions, Method, ModelSet, NonConvergencePolicy};
use crate::detections::{load_dataset, InvalidRecordPolicy, LoadOptions};
use crate::error::{Error, Result};
use crate::features::{ConfidenceEncoding, Feature, FeatureSet, DEFAULT_EPSILON};
use crate::harness::{render_table, run_protocol, run_protocol_multi_iou, Calibrator, ProtocolConfig, TableFormat};
use crate::matching::{match_detections, read_matched, write_matched, MatchOptions};
use crate::metrics::{compute_d_ece, heatmap, BinningSpec, DEFAULT_MIN_SAMPLES};
use crate::optimizer::OptimizerConfig;
use crate::synth::{generate, scenario, ScenarioSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "detcal", version, about = "Box-sensitive confidence calibration for object detectors")]
struct Cli {
    #[command(flatten)]
    global: GlobalConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalConfig {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Clip epsilon for confidences, in (0, 0.5).
    #[arg(long, global = true, default_value_t = DEFAULT_EPSILON)]
    eps: f64,
    /// Worker threads; falls back to DETCAL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match detections to ground truth by IoU.
    Match(MatchArgs),
    /// Generate synthetic matched samples.
    Synth(SynthArgs),
    /// Fit a calibration model.
    Fit(FitArgs),
    /// Apply a calibration model to matched samples.
    Apply(ApplyArgs),
    /// Print the D-ECE of matched samples.
    Eval(EvalArgs),
    /// Write a two-axis D-ECE heatmap as CSV.
    Heatmap(HeatmapArgs),
    /// Run the repeated-split evaluation protocol.
    Protocol(ProtocolArgs),
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Detection results (native JSON lines or COCO results JSON).
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth annotations (native JSON lines or COCO JSON).
    #[arg(long)]
    annotations: PathBuf,
    /// IoU threshold for a true positive.
    #[arg(long, default_value_t = 0.6)]
    iou: f64,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Let crowd regions absorb detections.
    #[arg(long)]
    include_crowd: bool,
    /// Skip invalid records with a warning instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Built-in scenario name, or a path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Matched samples (JSON lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Calibration method: hb, lc, lc-dep, bc or bc-dep.
    #[arg(long)]
    method: String,
    /// Feature set: conf, conf+xy, conf+wh or full.
    #[arg(long, default_value = "conf")]
    features: String,
    /// Histogram-binning bins: one count, or one per feature.
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<usize>>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer iteration limit.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Gradient infinity-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Ridge penalty toward the starting parameters.
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
    /// Fit one model over all categories.
    #[arg(long)]
    pooled: bool,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Matched samples (JSON lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Matched samples (JSON lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Feature set: conf, conf+xy, conf+wh or full.
    #[arg(long, default_value = "conf")]
    features: String,
    /// One count, or one per feature; defaults by dimensionality.
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<usize>>,
    /// Bins with fewer samples are ignored.
    #[arg(long, default_value_t = DEFAULT_MIN_SAMPLES)]
    min_samples: usize,
    /// Keep the weights of dropped bins in the denominator.
    #[arg(long)]
    no_renormalize: bool,
    /// Also write a JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Matched samples (JSON lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Feature set: conf, conf+xy, conf+wh or full.
    #[arg(long, default_value = "conf+xy")]
    features: String,
    /// Histogram bins per dimension, comma separated.
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<usize>>,
    /// Bins with fewer samples are ignored.
    #[arg(long, default_value_t = DEFAULT_MIN_SAMPLES)]
    min_samples: usize,
    /// The two binned features to keep.
    #[arg(long, value_delimiter = ',', default_value = "cx,cy")]
    axes: Vec<String>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// Matched samples (JSON lines).
    #[arg(long = "in", required_unless_present = "detections", conflicts_with_all = ["detections", "annotations"])]
    input: Option<PathBuf>,
    /// Detection results (native JSON lines or COCO results JSON).
    #[arg(long, requires = "annotations")]
    detections: Option<PathBuf>,
    /// Ground-truth annotations (native JSON lines or COCO JSON).
    #[arg(long, requires = "detections")]
    annotations: Option<PathBuf>,
    /// IoU thresholds used with --detections/--annotations.
    #[arg(long, value_delimiter = ',', default_value = "0.6")]
    iou: Vec<f64>,
    /// Methods to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "hb,lc,lc-dep,bc,bc-dep")]
    methods: Vec<String>,
    /// Feature sets to fit, one table column each.
    #[arg(long, value_delimiter = ',', default_value = "conf,conf+xy,conf+wh,full")]
    features: Vec<String>,
    /// Score every column over this feature set instead of its own.
    #[arg(long)]
    eval_features: Option<String>,
    /// Number of random train/test splits.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Fraction of samples used for fitting.
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    /// Bins with fewer samples are ignored.
    #[arg(long, default_value_t = DEFAULT_MIN_SAMPLES)]
    min_samples: usize,
    /// Table format: text, csv or json.
    #[arg(long, default_value = "text")]
    format: String,
    /// Fit one model over all categories.
    #[arg(long)]
    pooled: bool,
    /// Report destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("DETCAL_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("DETCAL_THREADS=`{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    crate::features::check_epsilon(g.eps).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ctx = Context {
        seed: g.seed,
        eps: g.eps,
        out_dir: g.out_dir.clone(),
    };
    match thread_count(g.threads)? {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(|| ctx.run(cli.command)),
        None => ctx.run(cli.command),
    }
}

struct Context {
    seed: u64,
    eps: f64,
    out_dir: Option<PathBuf>,
}

fn feature_set(name: &str) -> Result<FeatureSet> {
    FeatureSet::parse(name, ConfidenceEncoding::Probability)
}

fn binning(fs: &FeatureSet, bins: &Option<Vec<usize>>, min_samples: usize) -> Result<BinningSpec> {
    let mut spec = BinningSpec::evaluation_default(fs);
    if let Some(b) = bins {
        spec = BinningSpec::for_feature_set(fs, b, min_samples)?;
    }
    spec.min_samples = min_samples;
    Ok(spec)
}

/// Refuses to write over a file the command is reading.
fn check_distinct(input: &Path, output: &Path) -> Result<()> {
    if let (Ok(a), Ok(b)) = (input.canonicalize(), output.canonicalize()) {
        if a == b {
            return Err(Error::InvalidArgument(format!(
                "output {} would overwrite the input",
                output.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EvalReport {
    features: String,
    bins: Vec<usize>,
    min_samples: usize,
    d_ece: f64,
    d_ece_percent: String,
    samples: usize,
    retained_samples: usize,
    retained_bins: usize,
}

impl Context {
    fn output(&self, path: &Path) -> Result<PathBuf> {
        match &self.out_dir {
            Some(dir) if path.is_relative() => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Ok(dir.join(path))
            }
            _ => Ok(path.to_path_buf()),
        }
    }

    fn run(&self, command: Command) -> Result<()> {
        match command {
            Command::Match(a) => self.match_cmd(a),
            Command::Synth(a) => self.synth(a),
            Command::Fit(a) => self.fit(a),
            Command::Apply(a) => self.apply(a),
            Command::Eval(a) => self.eval(a),
            Command::Heatmap(a) => self.heatmap(a),
            Command::Protocol(a) => self.protocol(a),
        }
    }

    fn load_options(skip_invalid: bool) -> LoadOptions {
        LoadOptions {
            invalid_records: if skip_invalid {
                InvalidRecordPolicy::SkipWithWarning
            } else {
                InvalidRecordPolicy::Fail
            },
            ..LoadOptions::default()
        }
    }

    fn match_cmd(&self, a: MatchArgs) -> Result<()> {
        let data = load_dataset(&a.detections, &a.annotations, &Self::load_options(a.skip_invalid))?;
        let opts = MatchOptions {
            include_crowd: a.include_crowd,
        };
        let samples = match_detections(&data.detections, &data.ground_truth, a.iou, &opts)?;
        let out = self.output(&a.out)?;
        check_distinct(&a.detections, &out)?;
        write_matched(&samples, &out)?;
        let matched = samples.iter().filter(|s| s.matched).count();
        log::info!("{} detections, {matched} matched at IoU {}", samples.len(), a.iou);
        Ok(())
    }

    fn synth(&self, a: SynthArgs) -> Result<()> {
        let spec = if a.scenario.ends_with(".json") {
            let path = Path::new(&a.scenario);
            let text = crate::detections::read_text(path)?;
            serde_json::from_str::<ScenarioSpec>(&text).map_err(|e| Error::Scenario(e.to_string()))?
        } else {
            scenario(&a.scenario)?
        };
        let samples = generate(&spec.with_count(a.n).with_seed(self.seed))?;
        write_matched(&samples, &self.output(&a.out)?)
    }

    fn fit(&self, a: FitArgs) -> Result<()> {
        let method: Method = a.method.parse()?;
        let fs = feature_set(&a.features)?;
        if a.bins.is_some() && method.is_parametric() {
            log::warn!("--bins only affects histogram binning; ignored for {method}");
        }
        let samples = read_matched(&a.input)?;
        let opts = FitOptions {
            optimizer: OptimizerConfig {
                max_iterations: a.max_iter,
                gradient_tolerance: a.tol,
                ridge: a.ridge,
                seed: self.seed,
                ..OptimizerConfig::default()
            },
            epsilon: self.eps,
            hist_bins: a.bins,
            per_class: !a.pooled,
            on_nonconvergence: NonConvergencePolicy::Fail,
        };
        opts.optimizer.validate()?;
        let set = ModelSet::fit(method, &samples, &fs, &opts)?;
        for m in &set.models {
            let scope = m.category_id.map_or("pooled".to_string(), |c| format!("category {c}"));
            log::info!(
                "{method} on {fs} ({scope}): {} parameters, training NLL {:?}",
                m.param_count().unwrap_or(0),
                m.fit_metadata.as_ref().and_then(|f| f.final_nll)
            );
        }
        let out = self.output(&a.out)?;
        check_distinct(&a.input, &out)?;
        set.save(out)
    }

    fn apply(&self, a: ApplyArgs) -> Result<()> {
        let set = ModelSet::load(&a.model)?;
        let samples = read_matched(&a.input)?;
        let calibrated = set.calibrate(&samples)?;
        let out = self.output(&a.out)?;
        check_distinct(&a.input, &out)?;
        check_distinct(&a.model, &out)?;
        write_matched(&calibrated, &out)
    }

    fn eval(&self, a: EvalArgs) -> Result<()> {
        let fs = feature_set(&a.features)?;
        let mut spec = binning(&fs, &a.bins, a.min_samples)?;
        spec.renormalize = !a.no_renormalize;
        let samples = read_matched(&a.input)?;
        let (d_ece, stats) = compute_d_ece(&samples, &spec)?;
        println!("D-ECE {}: {:.3}%", fs.heading(), 100.0 * d_ece);
        log::info!(
            "{} of {} samples in {} retained bins",
            stats.retained_total,
            stats.total,
            stats.bins.len()
        );
        if let Some(out) = &a.out {
            let report = EvalReport {
                features: fs.name(),
                bins: spec.counts().to_vec(),
                min_samples: spec.min_samples,
                d_ece,
                d_ece_percent: format!("{:.3}", 100.0 * d_ece),
                samples: stats.total,
                retained_samples: stats.retained_total,
                retained_bins: stats.bins.len(),
            };
            let out = self.output(out)?;
            check_distinct(&a.input, &out)?;
            write_text(&out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
        }
        Ok(())
    }

    fn heatmap(&self, a: HeatmapArgs) -> Result<()> {
        let fs = feature_set(&a.features)?;
        let spec = binning(&fs, &a.bins, a.min_samples)?;
        let axes: Vec<Feature> = a.axes.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        let samples = read_matched(&a.input)?;
        let grid = heatmap(&samples, &spec, &axes)?;
        let csv = grid.to_csv();
        match &a.out {
            Some(out) => {
                let out = self.output(out)?;
                check_distinct(&a.input, &out)?;
                write_text(&out, &csv)
            }
            None => {
                print!("{csv}");
                Ok(())
            }
        }
    }

    fn protocol(&self, a: ProtocolArgs) -> Result<()> {
        let format: TableFormat = a.format.parse()?;
        let cfg = ProtocolConfig {
            train_frac: a.train_frac,
            reps: a.reps,
            seed: self.seed,
            methods: a.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Calibrator>>>()?,
            feature_sets: a.features.iter().map(|f| feature_set(f)).collect::<Result<_>>()?,
            min_samples: a.min_samples,
            eval_feature_set: a.eval_features.as_deref().map(feature_set).transpose()?,
            iou_thresholds: a.iou.clone(),
            per_class: !a.pooled,
            epsilon: self.eps,
            optimizer: OptimizerConfig {
                seed: self.seed,
                ..OptimizerConfig::default()
            },
            ..ProtocolConfig::default()
        };
        cfg.validate().map_err(|e| match e {
            Error::Dimensionality(m) => Error::InvalidArgument(m),
            e => e,
        })?;
        let tables = match (&a.input, &a.detections, &a.annotations) {
            (Some(input), _, _) => vec![run_protocol(&read_matched(input)?, &cfg)?],
            (None, Some(det), Some(ann)) => {
                let data = load_dataset(det, ann, &LoadOptions::default())?;
                run_protocol_multi_iou(&data.detections, &data.ground_truth, &cfg)?
            }
            _ => return Err(Error::InvalidArgument("give --in, or --detections with --annotations".into())),
        };
        let report: String = tables.iter().map(|t| render_table(t, format)).collect::<Vec<_>>().join("\n");
        match &a.out {
            Some(out) => write_text(&self.output(out)?, &report),
            None => {
                print!("{report}");
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        dispatch(std::iter::once("detcal").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(run(&["eval", "--features", "conf"]), EXIT_USAGE);
        assert_eq!(run(&["--eps", "0.7", "eval", "--in", "x.jsonl"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        assert_eq!(run(&["eval", "--in", "/nonexistent/matched.jsonl"]), EXIT_DATA);
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::DegenerateLabels { positives: 0, negatives: 3 }), EXIT_DATA);
        let nc = Error::NonConvergence {
            iterations: 1,
            gradient_norm: 1.0,
            iterate: vec![],
        };
        assert_eq!(exit_code(&nc), EXIT_NUMERICAL);
    }

    #[test]
    fn synth_fit_apply_eval() {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
        assert_eq!(run(&["--seed", "4", "synth", "--scenario", "uniform_overconfident", "--n", "3000", "--out", &p("m.jsonl")]), 0);
        assert_eq!(run(&["fit", "--in", &p("m.jsonl"), "--method", "lc", "--out", &p("model.json")]), 0);
        assert_eq!(run(&["apply", "--model", &p("model.json"), "--in", &p("m.jsonl"), "--out", &p("c.jsonl")]), 0);
        assert_eq!(run(&["eval", "--in", &p("c.jsonl"), "--features", "conf", "--bins", "20", "--out", &p("e.json")]), 0);
        let calibrated = read_matched(p("c.jsonl")).unwrap();
        assert!(calibrated.iter().all(|s| s.raw_score.is_some()));
        assert_eq!(run(&["apply", "--model", &p("model.json"), "--in", &p("m.jsonl"), "--out", &p("m.jsonl")]), EXIT_USAGE);
    }
}
