//! Command-line front end: `synth`, `mask`, `fit` and `eval`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::evaluation::{compare_models, holdout_rmse, report_csv, EvalReport};
use crate::geometry::{Vec3, N_ELECTRODES};
use crate::inference::{fit, FitConfig};
use crate::masking::{apply_mask_scheme, EdLayout, HoldoutWindows, MaskScheme};
use crate::plot::{bootstrap_svg, reconstruction_svg};
use crate::ppca::{ppca_fit, ppca_impute, PpcaConfig};
use crate::priors::ElectrodePriorConfig;
use crate::record::{read_record, read_samples, record_id_from_path, write_record, write_samples, EkgRecord, Frame};
use crate::synth::{generate, SynthSpec};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Everything tunable from a `--config` file. Every section and field is
/// optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig<f64>,
    pub ppca: PpcaConfig,
    pub priors: ElectrodePriorConfig<f64>,
    /// Parameters of `--scheme ptb`.
    pub ptb: HoldoutWindows,
    /// Parameters of `--scheme ed`.
    pub ed: EdLayout,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

const CONFIG_HELP: &str = "\
The --config file is JSON with the optional sections below; omitted fields
keep their defaults and unknown keys are rejected.

  fit:    sigma_noise 0.02 (mV), sigma_s 0.1 (m), sigma_p 1e-4 (A m),
          kappa 0.2 (S/m), max_outer_iterations 20, lbfgs_memory 10,
          lbfgs_max_iters 500, newton_max_iters 100, block_iterations 20,
          gradient_tolerance 1e-6, n_restarts 3, rng_seed 0,
          degeneracy_penalty_weight 1e4, min_distance 0.001 (m)
  ppca:   max_iters 500, tol 1e-8, seed 0, centering true
  priors: ellipse {half_width 0.125, axis_ratio 2.75, angle_start_deg 260,
          angle_end_deg 360}, precordial_sigma 0.02, limb_sigma 0.1,
          la_mean [0.3,0,0], ra_mean [-0.3,0,0], ll_mean [0.15,0,-0.45]
  ptb:    holdout_fraction 0.1, window_seconds 1.0, seed 0
  ed:     segment_seconds 2.5, long_leads [\"II\",\"V1\",\"V5\"],
          columns [0,0,0,1,1,1,2,2,2,3,3,3], holdout_fraction 0.1,
          window_seconds 1.0, seed 0

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 internal error.";

#[derive(Debug, Parser)]
#[command(name = "ekg-dipole", version, about = "Moving-dipole EKG model: synthesis, masking, fitting and evaluation", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    Ptb,
    Ed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Dipole,
    Ppca3,
    Ppca6,
}

impl Model {
    pub fn label(self) -> &'static str {
        match self {
            Model::Dipole => "dipole",
            Model::Ppca3 => "ppca3",
            Model::Ppca6 => "ppca6",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic records from a JSON spec (one object or an array).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a masking scheme to a record.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        scheme: Scheme,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a record or to every record in a directory and impute
    /// the unobserved entries.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Records fitted concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score imputations against held-out truth and compare models.
    Eval {
        /// Directory of masked records with truth sidecars.
        #[arg(long)]
        truth: PathBuf,
        /// Directories of `<record_id>.<model>.imputed.csv` files.
        #[arg(long, num_args = 1.., required = true)]
        imputed: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    /// Classifies a library error by whether bad input or a bug is to blame.
    fn from_error(e: Error, context: &str) -> Self {
        let code = match e {
            Error::InvalidParameter(_) | Error::Json(_) => EXIT_USAGE,
            Error::DegenerateGeometry { .. } | Error::InvalidLayout(_) => EXIT_INTERNAL,
            _ => EXIT_DATA,
        };
        Self { code, message: format!("{context}: {e}") }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out).map(drop),
        Command::Mask { input, scheme, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cmd_mask(&input, scheme, &cfg, &out)
        }
        Command::Fit { input, model, config, out, jobs } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cmd_fit(&input, model, &cfg, &out, jobs).map(drop)
        }
        Command::Eval { truth, imputed, bootstrap, seed, out } => {
            let text = cmd_eval(&truth, &imputed, bootstrap, seed, &out)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    One(SynthSpec),
    Many(Vec<SynthSpec>),
}

/// Writes `<record_id>.csv` (with mask sidecar) and
/// `<record_id>.groundtruth.json` per spec. Returns the record paths.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    let specs = match serde_json::from_str::<SpecFile>(&text) {
        Ok(SpecFile::One(s)) => vec![s],
        Ok(SpecFile::Many(v)) => v,
        Err(_) => {
            // Re-parse as a single spec for a precise message.
            let e = serde_json::from_str::<SynthSpec>(&text).err().map_or_else(|| "invalid spec".into(), |e| e.to_string());
            return Err(CliError::usage(format!("{}: {e}", spec_path.display())));
        }
    };
    for s in &specs {
        s.validate().map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    }
    create_dir(out)?;
    let mut paths = Vec::with_capacity(specs.len());
    for s in &specs {
        let (record, truth) = generate(s).map_err(|e| CliError::from_error(e, &s.record_id))?;
        let path = out.join(format!("{}.csv", s.record_id));
        write_record(&record, &path).map_err(|e| CliError::from_error(e, &path.display().to_string()))?;
        let json = serde_json::to_string_pretty(&truth).map_err(|e| CliError { code: EXIT_INTERNAL, message: e.to_string() })?;
        write_file(&out.join(format!("{}.groundtruth.json", s.record_id)), &json)?;
        info!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}

pub fn scheme_from_config(scheme: Scheme, cfg: &RunConfig) -> MaskScheme {
    match scheme {
        Scheme::Ptb => MaskScheme::PtbHoldout(cfg.ptb),
        Scheme::Ed => MaskScheme::EdLayout(cfg.ed.clone()),
    }
}

pub fn cmd_mask(input: &Path, scheme: Scheme, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let record = read_record(input).map_err(|e| CliError::from_error(e, &input.display().to_string()))?;
    let masked = apply_mask_scheme(&record, &scheme_from_config(scheme, cfg))
        .map_err(|e| CliError::from_error(e, &input.display().to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_record(&masked, out).map_err(|e| CliError::from_error(e, &out.display().to_string()))
}

fn is_record_file(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.ends_with(".csv") && ![".mask.csv", ".truth.csv", ".imputed.csv"].iter().any(|s| name.ends_with(s))
}

/// Record files of a directory in lexicographic order, or the file itself.
pub fn record_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_record_file(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("{}: no record files", input.display())));
    }
    Ok(files)
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Diagnostics {
    Dipole {
        model: &'static str,
        record_id: String,
        log_joint: f64,
        converged: bool,
        iterations: usize,
        outer_iterations: usize,
        restart: usize,
        restart_log_joints: Vec<f64>,
        gradient_norm: f64,
        electrodes: [[f64; 3]; N_ELECTRODES],
    },
    Ppca {
        model: &'static str,
        record_id: String,
        k: usize,
        noise_variance: f64,
        log_likelihood_trace: Vec<f64>,
        converged: bool,
        iterations: usize,
    },
}

fn fit_record(record: &EkgRecord, model: Model, cfg: &RunConfig) -> crate::Result<(Vec<Frame>, Diagnostics)> {
    match model {
        Model::Dipole => {
            let priors = cfg.priors.build()?;
            let res = fit(record, &priors, &cfg.fit)?;
            let imputed = crate::inference::impute(&res, record)?;
            let diag = Diagnostics::Dipole {
                model: model.label(),
                record_id: record.record_id.clone(),
                log_joint: res.log_joint,
                converged: res.converged,
                iterations: res.iterations,
                outer_iterations: res.outer_iterations,
                restart: res.restart,
                restart_log_joints: res.restart_log_joints.clone(),
                gradient_norm: res.gradient_norm,
                electrodes: res.layout.positions().map(Vec3::to_array),
            };
            Ok((imputed, diag))
        }
        Model::Ppca3 | Model::Ppca6 => {
            let k = if model == Model::Ppca3 { 3 } else { 6 };
            let f = ppca_fit(record, k, &cfg.ppca)?;
            let imputed = ppca_impute(&f, record)?;
            let diag = Diagnostics::Ppca {
                model: model.label(),
                record_id: record.record_id.clone(),
                k,
                noise_variance: f.model.noise_variance,
                log_likelihood_trace: f.log_likelihood_trace.clone(),
                converged: f.converged,
                iterations: f.iterations,
            };
            Ok((imputed, diag))
        }
    }
}

pub fn imputed_file_name(record_id: &str, model: &str) -> String {
    format!("{record_id}.{model}.imputed.csv")
}

/// Outcome of a batch fit: ids written and per-record failures.
#[derive(Debug, Default)]
pub struct FitSummary {
    pub fitted: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Fits every record with at most `jobs` records in flight. Writes
/// `<record_id>.<model>.imputed.csv` and `<record_id>.<model>.diagnostics.json`.
pub fn cmd_fit(input: &Path, model: Model, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<FitSummary, CliError> {
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    cfg.fit.validate().map_err(|e| CliError::from_error(e, "config"))?;
    cfg.ppca.validate().map_err(|e| CliError::from_error(e, "config"))?;
    cfg.priors.build().map_err(|e| CliError::from_error(e, "config"))?;
    let files = record_files(input)?;
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError { code: EXIT_INTERNAL, message: e.to_string() })?;
    let label = model.label();
    let outcomes: Vec<(String, Result<(), String>)> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let id = record_id_from_path(path);
                let result = (|| -> crate::Result<()> {
                    let record = read_record(path)?;
                    let (imputed, diag) = fit_record(&record, model, cfg)?;
                    write_samples(&out.join(imputed_file_name(&id, label)), record.sample_rate_hz(), &imputed)?;
                    let json = serde_json::to_string_pretty(&diag)?;
                    std::fs::write(out.join(format!("{id}.{label}.diagnostics.json")), json + "\n")?;
                    Ok(())
                })();
                (id, result.map_err(|e| e.to_string()))
            })
            .collect()
    });
    let mut summary = FitSummary::default();
    for (id, r) in outcomes {
        match r {
            Ok(()) => {
                info!("{id}: {label} fit written");
                summary.fitted.push(id);
            }
            Err(msg) => {
                warn!("{id}: {label} fit failed: {msg}");
                summary.failed.push((id, msg));
            }
        }
    }
    if !summary.failed.is_empty() {
        eprintln!("{} of {} records failed", summary.failed.len(), files.len());
    }
    if summary.fitted.is_empty() {
        return Err(CliError::data("every record failed to fit"));
    }
    Ok(summary)
}

/// Imputations found in `dirs`, grouped by model label then record id.
fn collect_imputations(dirs: &[PathBuf]) -> Result<BTreeMap<String, BTreeMap<String, PathBuf>>, CliError> {
    let mut by_model: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
    for dir in dirs {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let Some(stem) = name.strip_suffix(".imputed.csv") else { continue };
            let Some((id, model)) = stem.rsplit_once('.') else { continue };
            if by_model.entry(model.to_string()).or_default().insert(id.to_string(), p.clone()).is_some() {
                return Err(CliError::usage(format!("duplicate imputation for {id} under model {model}")));
            }
        }
    }
    if by_model.is_empty() {
        return Err(CliError::data("no imputed CSV files found"));
    }
    Ok(by_model)
}

/// Scores every model, writes `report.csv`, `summary.csv`, `pairwise.csv`,
/// `bootstrap.svg` and one `<record_id>.<model>.svg` per fit. Returns the
/// comparison table.
pub fn cmd_eval(truth_dir: &Path, imputed: &[PathBuf], n_bootstrap: usize, seed: u64, out: &Path) -> Result<String, CliError> {
    if n_bootstrap == 0 {
        return Err(CliError::usage("--bootstrap must be at least 1"));
    }
    let mut truths = BTreeMap::new();
    for path in record_files(truth_dir)? {
        let record = read_record(&path).map_err(|e| CliError::from_error(e, &path.display().to_string()))?;
        truths.insert(record_id_from_path(&path), record);
    }
    let by_model = collect_imputations(imputed)?;
    create_dir(out)?;
    let mut reports = Vec::new();
    for (model, files) in &by_model {
        let mut report = EvalReport::new(model.clone());
        for (id, path) in files {
            let truth = truths
                .get(id)
                .ok_or_else(|| CliError::data(format!("no truth record for {id} (model {model})")))?;
            let (_, samples) = read_samples(path).map_err(|e| CliError::from_error(e, &path.display().to_string()))?;
            let rmse = holdout_rmse(truth, &samples).map_err(|e| CliError::from_error(e, id))?;
            report.insert(id.clone(), rmse);
            write_file(&out.join(format!("{id}.{model}.svg")), &reconstruction_svg(truth, &samples, &format!("{id} / {model}")))?;
        }
        reports.push(report);
    }
    let comparison = compare_models(&reports, n_bootstrap, seed).map_err(|e| CliError::from_error(e, "eval"))?;
    write_file(&out.join("report.csv"), &report_csv(&reports))?;
    write_file(&out.join("summary.csv"), &comparison.summary_csv())?;
    write_file(&out.join("pairwise.csv"), &comparison.pairwise_csv())?;
    write_file(&out.join("bootstrap.svg"), &bootstrap_svg(&comparison.models))?;
    Ok(comparison.table())
}
