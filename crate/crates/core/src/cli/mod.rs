//! Command-line front end.
//!
//! Every run writes a manifest with the resolved arguments and the hashes of
//! its inputs and outputs; `replay` reruns a manifest and checks the outputs
//! bit for bit.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{
    bootstrap_stability, ood_transfer_corpus, score_records, stress_eval, DEFAULT_BOOTSTRAP_RESAMPLES,
    REPORT_FORMAT_VERSION,
};
use crate::fieldsim::{fp_field_agreement_with, AgreementReport};
use crate::monitor::{calibrate, CalibrationConfig, CalibrationScore, MonitorModel, ProjectorKind, ResidualPopulation};
use crate::pooling::{PoolingConfig, PoolingStrategy};
use crate::projector::RidgeOptions;
use crate::quantizer::{QuantConfig, ThresholdMode, SUPPORTED_FRAC_BITS};
use crate::records::{
    corpus_hash, read_corpus, stratified_split, write_corpus, ActivationRecord, CorpusSplit, RecordReader,
    DEFAULT_CALIBRATION_FRACTION,
};
use crate::synthgen::{generate, logspace, ShiftPolicy, SynthConfig};
use manifest::{hash_files, sha256_file, with_suffix, Manifest, MANIFEST_FORMAT_VERSION};

pub const CALIBRATION_REPORT_FORMAT_VERSION: u32 = 1;

/// Text printed by `--version`.
pub const VERSION_TEXT: &str = concat!(
    env!("CARGO_PKG_NAME"),
    " ",
    env!("CARGO_PKG_VERSION"),
    "\nrecords format 1\nmodel format 1\ncalibration report format 1\nwitness format 1\n",
    "public inputs format 1\neval report format 1\nmanifest format 1"
);

#[derive(Debug, Parser)]
#[command(name = "residual-audit", about = "Mahalanobis faithfulness monitor over answer-state activations")]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print the tool version and the format versions of all file schemas.
    #[arg(short = 'V', long)]
    version: bool,
    /// Flat `key = value` file with defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic four-condition corpus.
    Synth(SynthArgs),
    /// Fit the monitor on the calibration split of a corpus.
    Calibrate(CalibrateArgs),
    /// Score records as line-delimited JSON `{id, distance, decision}`.
    Audit(AuditArgs),
    /// Stress-test metrics with bootstrap stability and quantized agreement.
    Eval(EvalArgs),
    /// FP vs. quantized decision agreement per fraction-bit setting.
    Quantcheck(QuantcheckArgs),
    /// Cross-domain transfer of a calibrated covariance and threshold.
    Ood(OodArgs),
    /// Rerun a manifest and verify its outputs bit for bit.
    Replay(ReplayArgs),
}

/// A command whose run is fully described by its arguments.
trait Runnable: Serialize {
    const NAME: &'static str;
    fn inputs(&self) -> Vec<PathBuf>;
    /// Output files, primary first.
    fn outputs(&self) -> Vec<PathBuf>;
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf);
    fn manifest_path(&self) -> Option<&Path>;
    /// Argument checks that need no input files.
    fn validate(&self) -> Result<()> {
        Ok(())
    }
    fn execute(&self) -> Result<()>;
}

fn run_with_manifest<C: Runnable>(args: &C) -> Result<()> {
    args.validate()?;
    let inputs = hash_files(&args.inputs())?;
    args.execute()?;
    let outputs = args.outputs();
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: C::NAME.to_string(),
        args: serde_json::to_value(args)?,
        inputs,
        outputs: hash_files(&outputs)?,
    };
    let path = match args.manifest_path() {
        Some(p) => p.to_path_buf(),
        None => with_suffix(&outputs[0], ".manifest.json"),
    };
    manifest.save(&path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PoolingArg {
    MeanTopK,
    MaxTopK,
    LastToken,
    MeanAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ProjectorArg {
    Ridge,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ResidualsArg {
    FaithfulOnly,
    AllConditions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    LowestVariance,
    HighestVariance,
    Random,
}

impl From<PolicyArg> for ShiftPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::LowestVariance => ShiftPolicy::LowestVariance,
            PolicyArg::HighestVariance => ShiftPolicy::HighestVariance,
            PolicyArg::Random => ShiftPolicy::Random,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct CalibOpts {
    /// Fraction of each condition drawn for calibration.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_FRACTION)]
    split_fraction: f64,
    /// Seed of the calibration split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PoolingArg::MeanTopK)]
    pooling: PoolingArg,
    /// Number of salient answer tokens pooled.
    #[arg(long, default_value_t = 8)]
    pool_k: usize,
    #[arg(long, value_enum, default_value_t = ProjectorArg::Ridge)]
    projector: ProjectorArg,
    /// Ridge penalty.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Fit the ridge projector on raw instead of standardized evidence.
    #[arg(long)]
    no_standardize: bool,
    /// Rank of the PCA projector.
    #[arg(long, default_value_t = 32)]
    pca_rank: usize,
    #[arg(long, value_enum, default_value_t = ResidualsArg::FaithfulOnly)]
    residuals: ResidualsArg,
    /// Cross-fitting folds for the calibration residuals (1 disables).
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

impl CalibOpts {
    fn calibration_config(&self) -> CalibrationConfig {
        let strategy = match self.pooling {
            PoolingArg::MeanTopK => PoolingStrategy::MeanTopK,
            PoolingArg::MaxTopK => PoolingStrategy::MaxTopK,
            PoolingArg::LastToken => PoolingStrategy::LastToken,
            PoolingArg::MeanAll => PoolingStrategy::MeanAll,
        };
        let projector = match self.projector {
            ProjectorArg::Ridge => ProjectorKind::Ridge(RidgeOptions {
                lambda: self.lambda,
                standardize: !self.no_standardize,
            }),
            ProjectorArg::Pca => ProjectorKind::PcaAlign { rank: self.pca_rank },
        };
        let residuals = match self.residuals {
            ResidualsArg::FaithfulOnly => ResidualPopulation::FaithfulOnly,
            ResidualsArg::AllConditions => ResidualPopulation::AllConditions,
        };
        CalibrationConfig {
            pooling: PoolingConfig {
                strategy,
                k: self.pool_k,
            },
            projector,
            residuals,
            cross_fit_folds: self.folds,
        }
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SynthArgs {
    /// Output record file.
    #[arg(long)]
    out: PathBuf,
    /// Full generator configuration as JSON; flags below override it.
    #[arg(long, value_name = "FILE")]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest eigenvalue of the residual spectrum.
    #[arg(long)]
    spectrum_hi: Option<f64>,
    /// Smallest eigenvalue of the residual spectrum.
    #[arg(long)]
    spectrum_lo: Option<f64>,
    #[arg(long)]
    shift_contradicted: Option<f64>,
    #[arg(long)]
    shift_miss: Option<f64>,
    #[arg(long)]
    shift_partial: Option<f64>,
    #[arg(long, value_enum)]
    contradicted_policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    miss_policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    partial_policy: Option<PolicyArg>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl SynthArgs {
    fn resolve(&self) -> Result<SynthConfig> {
        let mut cfg = match &self.synth_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => SynthConfig::default(),
        };
        let (d, m) = (self.d.unwrap_or(cfg.d), self.m.unwrap_or(cfg.m));
        if d != cfg.d || m != cfg.m {
            let base = SynthConfig::with_dims(d, m);
            cfg.d = d;
            cfg.m = m;
            cfg.eigen_spectrum = base.eigen_spectrum;
            cfg.n_clusters = base.n_clusters;
        }
        if self.spectrum_hi.is_some() || self.spectrum_lo.is_some() {
            let hi = self.spectrum_hi.unwrap_or(cfg.eigen_spectrum[0]);
            let lo = self.spectrum_lo.unwrap_or(cfg.eigen_spectrum[cfg.d - 1]);
            cfg.eigen_spectrum = logspace(hi, lo, cfg.d);
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { cfg.$field = v.into(); })* };
        }
        set!(n_seeds, seed, shift_contradicted, shift_miss, shift_partial, contradicted_policy, miss_policy, partial_policy, dataset);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Runnable for SynthArgs {
    const NAME: &'static str = "synth";
    fn inputs(&self) -> Vec<PathBuf> {
        self.synth_config.iter().cloned().collect()
    }
    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone()]
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn execute(&self) -> Result<()> {
        let records = generate(&self.resolve()?)?;
        write_corpus(&self.out, &records)
    }
}

// ---------------------------------------------------------------- calibrate

/// Companion file of a calibrated model: the split and the scores the
/// threshold was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format_version: u32,
    pub corpus_hash: String,
    pub split: CorpusSplit,
    pub tau_star: f64,
    pub youden_j: f64,
    pub scores: Vec<CalibrationScore>,
}

impl CalibrationReport {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: CalibrationReport = serde_json::from_str(&text)?;
        if r.format_version != CALIBRATION_REPORT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "calibration report format version {} is not supported",
                r.format_version
            )));
        }
        Ok(r)
    }

    /// Evaluation records of `records`, checking they are the corpus the
    /// split was drawn from.
    fn evaluation_records<'a>(&self, records: &'a [ActivationRecord]) -> Result<Vec<&'a ActivationRecord>> {
        if corpus_hash(records) != self.corpus_hash {
            return Err(Error::Integrity(
                "corpus does not match the one the calibration split was drawn from".into(),
            ));
        }
        Ok(self.split.partition(records)?.1)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct CalibrateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model file; the calibration report goes to `<out>.calib.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    opts: CalibOpts,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl Runnable for CalibrateArgs {
    const NAME: &'static str = "calibrate";
    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.corpus.clone()]
    }
    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone(), with_suffix(&self.out, ".calib.json")]
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn execute(&self) -> Result<()> {
        let records = read_corpus(&self.corpus)?;
        let split = stratified_split(&records, self.opts.split_fraction, self.opts.seed)?;
        let (calib, _) = split.partition(&records)?;
        let fit = calibrate(&calib, &self.opts.calibration_config())?;
        fit.model.save(&self.out)?;
        let report = CalibrationReport {
            format_version: CALIBRATION_REPORT_FORMAT_VERSION,
            corpus_hash: corpus_hash(&records),
            split,
            tau_star: fit.model.tau_star,
            youden_j: fit.model.stats.youden_j,
            scores: fit.scores,
        };
        write_json(&with_suffix(&self.out, ".calib.json"), &report)
    }
}

// ---------------------------------------------------------------- audit

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct AuditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Line-delimited JSON scores.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    distance: f64,
    decision: crate::monitor::Decision,
}

impl Runnable for AuditArgs {
    const NAME: &'static str = "audit";
    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.model.clone(), self.corpus.clone()]
    }
    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone()]
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn execute(&self) -> Result<()> {
        let model = MonitorModel::load(&self.model)?;
        let reader = RecordReader::open(&self.corpus)?.without_id_tracking();
        let file = File::create(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let mut out = BufWriter::new(file);
        for rec in reader {
            let rec = rec?;
            let score = model.audit(&rec)?;
            let line = ScoreLine {
                id: &rec.id,
                distance: score.distance,
                decision: score.decision,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io(&self.out, e))?;
        }
        out.flush().map_err(|e| Error::io(&self.out, e))
    }
}

// ---------------------------------------------------------------- eval

fn agreement_rows(
    model: &MonitorModel,
    records: &[&ActivationRecord],
    ks: &[u32],
    safe: bool,
) -> Result<Vec<AgreementRow>> {
    let mode = if safe {
        ThresholdMode::Safe {
            calib_bound: model.stats.max_residual_inf,
        }
    } else {
        ThresholdMode::Exact
    };
    ks.iter()
        .map(|&k| {
            let outcome = QuantConfig::for_model(model, k).and_then(|cfg| fp_field_agreement_with(model, records, &cfg, mode));
            match outcome {
                Ok(report) => Ok(AgreementRow {
                    frac_bits: k,
                    report: Some(report),
                    error: None,
                }),
                // a margin that swallows the threshold is a result, not a failure
                Err(Error::Configuration(msg)) => Ok(AgreementRow {
                    frac_bits: k,
                    report: None,
                    error: Some(msg),
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub frac_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<AgreementReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn check_frac_bits(ks: &[u32]) -> Result<()> {
    match ks.iter().find(|k| !SUPPORTED_FRAC_BITS.contains(k)) {
        Some(k) => Err(Error::Argument(format!("unsupported fraction bits {k} (use 8, 16 or 32)"))),
        None => Ok(()),
    }
}

/// Records to evaluate: the evaluation side of the split when a calibration
/// report is given, otherwise the whole corpus.
fn eval_records<'a>(calib: Option<&CalibrationReport>, records: &'a [ActivationRecord]) -> Result<Vec<&'a ActivationRecord>> {
    match calib {
        Some(c) => c.evaluation_records(records),
        None => Ok(records.iter().collect()),
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Calibration report; restricts evaluation to held-out records and
    /// enables the bootstrap.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional flat CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    n_resamples: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction bits for the quantized agreement section (repeatable).
    #[arg(long = "quant-k")]
    quant_k: Vec<u32>,
    /// Use the safety-margin threshold for the quantized check.
    #[arg(long)]
    safe: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl Runnable for EvalArgs {
    const NAME: &'static str = "eval";
    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.model.clone(), self.corpus.clone()];
        v.extend(self.calib.iter().cloned());
        v
    }
    fn outputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.out.clone()];
        v.extend(self.csv.iter().cloned());
        v
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
        self.csv = self.csv.as_deref().map(f);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn validate(&self) -> Result<()> {
        check_frac_bits(&self.quant_k)
    }
    fn execute(&self) -> Result<()> {
        self.validate()?;
        let model = MonitorModel::load(&self.model)?;
        let records = read_corpus(&self.corpus)?;
        let calib = self.calib.as_deref().map(CalibrationReport::load).transpose()?;
        let eval = eval_records(calib.as_ref(), &records)?;
        let mut report = stress_eval(&model, &eval)?;
        if let Some(c) = &calib {
            let calib_scores: Vec<(f64, bool)> = c.scores.iter().map(|s| (s.distance, !s.faithful)).collect();
            let eval_scores = score_records(&model, &eval)?;
            report.bootstrap = Some(bootstrap_stability(&calib_scores, &eval_scores, self.n_resamples, self.seed)?);
        }
        for row in agreement_rows(&model, &eval, &self.quant_k, self.safe)? {
            match (row.report, row.error) {
                (Some(r), _) => report.agreement.push(r),
                (None, Some(msg)) => return Err(Error::Configuration(msg)),
                (None, None) => unreachable!("agreement row without report or error"),
            }
        }
        // output locations do not change results; leaving them out keeps
        // the report byte-identical when replayed elsewhere
        let mut config = serde_json::to_value(self)?;
        if let Some(obj) = config.as_object_mut() {
            for key in ["out", "csv", "manifest"] {
                obj.remove(key);
            }
        }
        report.config = config;
        debug_assert_eq!(report.format_version, REPORT_FORMAT_VERSION);
        write_json(&self.out, &report)?;
        if let Some(csv) = &self.csv {
            let file = File::create(csv).map_err(|e| Error::io(csv, e))?;
            let mut w = BufWriter::new(file);
            report.write_csv(&mut w).map_err(|e| Error::io(csv, e))?;
            w.flush().map_err(|e| Error::io(csv, e))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- quantcheck

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct QuantcheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Calibration report; restricts the check to held-out records.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Fraction bits to check (repeatable).
    #[arg(long = "k", default_values_t = SUPPORTED_FRAC_BITS)]
    k: Vec<u32>,
    #[arg(long)]
    safe: bool,
    /// JSON agreement table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Human-readable agreement table.
pub fn agreement_table(rows: &[AgreementRow]) -> String {
    let mut s = format!(
        "{:>3}  {:>5}  {:>9}  {:>13}  {:>7}  {:>5}  {:>8}  {:>11}\n",
        "k", "mode", "agreement", "agree/n", "clipped", "range", "fp_auroc", "quant_auroc"
    );
    for row in rows {
        match &row.report {
            Some(r) => {
                let mode = match r.threshold_mode {
                    ThresholdMode::Exact => "exact",
                    ThresholdMode::Safe { .. } => "safe",
                };
                s.push_str(&format!(
                    "{:>3}  {:>5}  {:>8.2}%  {:>13}  {:>7}  {:>5}  {:>8}  {:>11}\n",
                    row.frac_bits,
                    mode,
                    100.0 * r.agreement_rate,
                    format!("{}/{}", r.n_agree, r.n_records),
                    r.n_clipped,
                    r.n_range_violations,
                    fmt_opt(r.fp_auroc),
                    fmt_opt(r.quant_auroc),
                ));
            }
            None => s.push_str(&format!(
                "{:>3}  unavailable: {}\n",
                row.frac_bits,
                row.error.as_deref().unwrap_or("")
            )),
        }
    }
    s
}

impl Runnable for QuantcheckArgs {
    const NAME: &'static str = "quantcheck";
    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.model.clone(), self.corpus.clone()];
        v.extend(self.calib.iter().cloned());
        v
    }
    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone()]
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn validate(&self) -> Result<()> {
        check_frac_bits(&self.k)
    }
    fn execute(&self) -> Result<()> {
        self.validate()?;
        let model = MonitorModel::load(&self.model)?;
        let records = read_corpus(&self.corpus)?;
        let calib = self.calib.as_deref().map(CalibrationReport::load).transpose()?;
        let eval = eval_records(calib.as_ref(), &records)?;
        let rows = agreement_rows(&model, &eval, &self.k, self.safe)?;
        print!("{}", agreement_table(&rows));
        write_json(&self.out, &rows)
    }
}

// ---------------------------------------------------------------- ood

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct OodArgs {
    /// Model calibrated on domain A.
    #[arg(long)]
    model_a: PathBuf,
    /// Domain-B corpus; split and calibrated with the options below.
    #[arg(long)]
    corpus_b: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    opts: CalibOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl Runnable for OodArgs {
    const NAME: &'static str = "ood";
    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.model_a.clone(), self.corpus_b.clone()]
    }
    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone()]
    }
    fn map_outputs(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        self.out = f(&self.out);
    }
    fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_deref()
    }
    fn execute(&self) -> Result<()> {
        let model_a = MonitorModel::load(&self.model_a)?;
        let corpus_b = read_corpus(&self.corpus_b)?;
        let report = ood_transfer_corpus(
            &model_a,
            &corpus_b,
            self.opts.split_fraction,
            self.opts.seed,
            &self.opts.calibration_config(),
        )?;
        write_json(&self.out, &report)
    }
}

// ---------------------------------------------------------------- replay

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write outputs here (same file names) instead of over the originals.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn replay_as<C>(manifest: &Manifest, output_dir: Option<&Path>) -> Result<()>
where
    C: Runnable + for<'de> Deserialize<'de>,
{
    let mut args: C = serde_json::from_value(manifest.args.clone())?;
    let original = args.outputs();
    if let Some(dir) = output_dir {
        let remap = |p: &Path| dir.join(p.file_name().unwrap_or(p.as_os_str()));
        args.map_outputs(&remap);
    }
    args.execute()?;
    let rerun = args.outputs();
    if rerun.len() != original.len() || original.len() != manifest.outputs.len() {
        return Err(Error::Integrity("manifest output list does not match the command".into()));
    }
    for (orig, new) in original.iter().zip(&rerun) {
        let key = orig.display().to_string();
        let expected = manifest
            .outputs
            .get(&key)
            .ok_or_else(|| Error::Integrity(format!("manifest has no hash for output {key}")))?;
        let got = sha256_file(new)?;
        if &got != expected {
            return Err(Error::Integrity(format!(
                "output {} differs from the manifest ({got} vs {expected})",
                new.display()
            )));
        }
    }
    println!("replay ok: {} output file(s) reproduced", rerun.len());
    Ok(())
}

impl ReplayArgs {
    fn execute(&self) -> Result<()> {
        let manifest = Manifest::load(&self.manifest)?;
        for (path, expected) in &manifest.inputs {
            let got = sha256_file(Path::new(path))?;
            if &got != expected {
                return Err(Error::Integrity(format!("input {path} changed since the manifest was written")));
            }
        }
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let dir = self.output_dir.as_deref();
        match manifest.command.as_str() {
            SynthArgs::NAME => replay_as::<SynthArgs>(&manifest, dir),
            CalibrateArgs::NAME => replay_as::<CalibrateArgs>(&manifest, dir),
            AuditArgs::NAME => replay_as::<AuditArgs>(&manifest, dir),
            EvalArgs::NAME => replay_as::<EvalArgs>(&manifest, dir),
            QuantcheckArgs::NAME => replay_as::<QuantcheckArgs>(&manifest, dir),
            OodArgs::NAME => replay_as::<OodArgs>(&manifest, dir),
            other => Err(Error::Schema(format!("manifest names unknown command {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------- entry

/// Splices `--config FILE` entries into the argument list after the
/// subcommand name, skipping flags already given on the command line.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().ok_or_else(|| Error::Argument("--config needs a file".into()))?));
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let entries = config::load(&path)?;
    let Some(sub_pos) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(rest);
    };
    let sub_name = rest[sub_pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(rest);
    };
    let given: Vec<String> = rest[sub_pos + 1..]
        .iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--").map(|f| f.split('=').next().unwrap_or(f).to_string()))
        .collect();
    let entries: Vec<(String, String)> = entries.into_iter().filter(|(k, _)| !given.contains(k)).collect();
    let flags = config::to_flags(&entries, |key| {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(key))
            .map(|a| a.get_action().takes_values())
    })?;
    let mut out: Vec<OsString> = rest[..=sub_pos].to_vec();
    out.extend(flags);
    out.extend(rest[sub_pos + 1..].iter().cloned());
    Ok(out)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_with_manifest(&a),
        Command::Calibrate(a) => run_with_manifest(&a),
        Command::Audit(a) => run_with_manifest(&a),
        Command::Eval(a) => run_with_manifest(&a),
        Command::Quantcheck(a) => run_with_manifest(&a),
        Command::Ood(a) => run_with_manifest(&a),
        Command::Replay(a) => a.execute(),
    }
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage,
/// 2 data, 3 numeric.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        println!("{VERSION_TEXT}");
        return 0;
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return 1;
    };
    match dispatch(command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
