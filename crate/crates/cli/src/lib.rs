//! `stimplan` command-line interface.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use stimplan_core::anatomy::ActivationMode;
use stimplan_core::fieldmodel::{export_unit_fields, Backend};
use stimplan_core::optimizer::Scheme;
use stimplan_core::pipeline::{
    compute_unit_fields, generate_phantom, reference_cohort_settings, replay_clinical, run_case, run_cohort,
    write_case_bundle, write_json_atomic, CaseFile, ClinicalSetting, CohortFile, ErrorClass, FieldCache,
    PhantomSpec, PipelineError, RunOptions, RunReport, Stage, SweepTable, SCHEMA_VERSION,
};
use stimplan_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "stimplan", version, about = "Contact and amplitude planning for directional DBS leads")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Precompute unit fields at the case's prepared sample points.
    Fields {
        case: PathBuf,
        #[command(flatten)]
        flags: CaseFlags,
        /// Output unit-field file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize and rank every configuration of one case.
    Optimize {
        case: PathBuf,
        #[command(flatten)]
        flags: CaseFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize over the relaxation grid and emit sweep tables.
    Sweep {
        case: PathBuf,
        #[command(flatten)]
        flags: CaseFlags,
        /// Comma-separated relaxation levels, percent.
        #[arg(long, value_delimiter = ',')]
        gamma_grid: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of every ranked row per relaxation level.
        #[arg(long)]
        table: Option<PathBuf>,
        /// CSV of per-contact top-configuration counts.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Evaluate clinical settings on the case anatomy.
    Replay {
        case: PathBuf,
        #[command(flatten)]
        flags: CaseFlags,
        /// Active contacts, e.g. `2A,2B,2C`; overrides the case's setting.
        #[arg(long)]
        contacts: Option<String>,
        /// mA
        #[arg(long)]
        amplitude: Option<f64>,
        /// Stimulation pulse width of the replayed setting, µs.
        #[arg(long)]
        setting_pulse_width: Option<f64>,
        /// Replay every setting of the bundled reference cohort.
        #[arg(long, conflicts_with_all = ["contacts", "amplitude"])]
        reference: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a batch of cases and summarize coverage distributions.
    Cohort {
        cohort: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic case.
    Phantom {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON file with a full phantom spec; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        case_id: Option<String>,
        #[arg(long)]
        target_points: Option<usize>,
        #[arg(long)]
        constraint_points: Option<usize>,
        #[arg(long)]
        no_streamlines: bool,
        /// Attach a reference-cohort setting, e.g. `Patient 01 sin`.
        #[arg(long)]
        clinical: Option<String>,
        /// Write a case directory (case.json plus region files) here.
        #[arg(long, conflicts_with = "out")]
        dir: Option<PathBuf>,
        /// Write a single case document with inline regions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8750")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = 32)]
        queue_limit: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Allow binding a non-loopback address (no authentication).
        #[arg(long)]
        allow_remote: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PointWise,
    TrajectoryWise,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Analytic,
    FiniteDifference,
    Imported,
}

/// Overrides for case-file fields.
#[derive(Debug, Clone, Default, Args)]
pub struct CaseFlags {
    #[arg(long)]
    pub scheme: Option<SchemeArg>,
    /// Relaxation level, percent of constraint points allowed above threshold.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// mA
    #[arg(long)]
    pub lambda_cap: Option<f64>,
    /// Target activation threshold, V/m.
    #[arg(long)]
    pub e_th_t: Option<f64>,
    /// Constraint activation threshold, V/m.
    #[arg(long)]
    pub e_th_c: Option<f64>,
    /// Pulse width the thresholds are adjusted to, µs.
    #[arg(long)]
    pub pulse_width: Option<f64>,
    /// Score weights `target,constraint,spill`.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub no_spill: bool,
    #[arg(long)]
    pub activation_mode: Option<ModeArg>,
    #[arg(long)]
    pub backend: Option<BackendArg>,
    /// mm
    #[arg(long)]
    pub grid_spacing: Option<f64>,
    /// Unit-field file for the imported backend.
    #[arg(long)]
    pub field_path: Option<String>,
    /// mm
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// mm
    #[arg(long)]
    pub roi_radius: Option<f64>,
    /// Persist solved fields here and reuse them across runs.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl CaseFlags {
    pub fn apply(&self, case: &mut CaseFile) -> Result<(), PipelineError> {
        let o = &mut case.optimization;
        if let Some(s) = self.scheme {
            o.scheme = match s {
                SchemeArg::Linear => Scheme::Linear,
                SchemeArg::Nonlinear => Scheme::Nonlinear,
            };
        }
        if let Some(g) = self.gamma {
            o.gamma = g;
        }
        if let Some(c) = self.lambda_cap {
            o.lambda_cap = c;
        }
        if let Some(t) = self.e_th_t {
            o.thresholds.e_th_t = t;
        }
        if let Some(t) = self.e_th_c {
            o.thresholds.e_th_c = t;
        }
        if let Some(pw) = self.pulse_width {
            o.thresholds.pulse_width = pw;
        }
        if let Some(w) = &self.weights {
            if w.len() != 3 {
                return Err(PipelineError::validation(
                    Stage::Validate,
                    format!("--weights takes three values, got {}", w.len()),
                ));
            }
            o.weights.target = w[0];
            o.weights.constraint = w[1];
            o.weights.spill = w[2];
        }
        if self.no_spill {
            o.compute_spill = false;
        }
        if let Some(m) = self.activation_mode {
            case.activation_mode = match m {
                ModeArg::PointWise => ActivationMode::PointWise,
                ModeArg::TrajectoryWise => ActivationMode::TrajectoryWise,
            };
        }
        if let Some(b) = self.backend {
            case.field.backend = match b {
                BackendArg::Analytic => Backend::AnalyticPointSource,
                BackendArg::FiniteDifference => Backend::FiniteDifference,
                BackendArg::Imported => Backend::Imported,
            };
        }
        if let Some(h) = self.grid_spacing {
            case.field.grid_spacing = h;
        }
        if let Some(p) = &self.field_path {
            case.field.path = Some(p.clone());
        }
        if let Some(v) = self.voxel_size {
            case.voxel_size = v;
        }
        if let Some(r) = self.roi_radius {
            case.roi_radius = r;
        }
        Ok(())
    }
}

fn io_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Report, ErrorClass::Io, e.to_string())
}

/// Write pretty JSON to `out`, or stdout when absent.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), PipelineError> {
    match out {
        Some(p) => write_json_atomic(value, p),
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value).map_err(io_err)?;
            writeln!(stdout).map_err(io_err)
        }
    }
}

fn write_csv<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Load a case, apply overrides, resolve region files against the case's
/// directory.
pub fn load_case(path: &Path, flags: &CaseFlags) -> Result<CaseFile, PipelineError> {
    let mut case = CaseFile::load(path)?;
    if let Some(p) = &case.field.path {
        log::debug!("field path {p}");
    }
    flags.apply(&mut case)?;
    Ok(case)
}

fn cache(dir: &Option<PathBuf>) -> FieldCache {
    match dir {
        Some(d) => FieldCache::with_dir(d.clone()),
        None => FieldCache::new(),
    }
}

fn optimize(case: &CaseFile, flags: &CaseFlags, out: Option<&Path>) -> Result<RunReport, PipelineError> {
    let cache = cache(&flags.cache_dir);
    let body = run_case(
        case,
        &RunOptions {
            cache: Some(&cache),
            ..RunOptions::default()
        },
    )?;
    let report = RunReport::new(body);
    emit(&report, out)?;
    Ok(report)
}

fn find_reference(label: &str) -> Result<ClinicalSetting, PipelineError> {
    reference_cohort_settings()
        .into_iter()
        .find(|r| r.label().eq_ignore_ascii_case(label.trim()))
        .map(|r| r.to_clinical(None))
        .ok_or_else(|| PipelineError::validation(Stage::Validate, format!("no reference setting `{label}`")))
}

pub fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Fields { case, flags, out } => {
            let case = load_case(&case, &flags)?;
            let cache = cache(&flags.cache_dir);
            let matrix = compute_unit_fields(
                &case,
                &RunOptions {
                    cache: Some(&cache),
                    ..RunOptions::default()
                },
            )?;
            export_unit_fields(&matrix, &out).map_err(io_err)?;
            eprintln!(
                "wrote {} contacts x {} points to {}",
                matrix.contact_ids().len(),
                matrix.n_points(),
                out.display()
            );
        }
        Command::Optimize { case, flags, out } => {
            let mut case = load_case(&case, &flags)?;
            case.sweep = false;
            let report = optimize(&case, &flags, out.as_deref())?;
            if let (Some(top), Some(_)) = (report.body.top(), out) {
                eprintln!(
                    "top: {} at {:.3} mA, score {:.2}",
                    top.config.canonical_label(),
                    top.lambda_opt,
                    top.score
                );
            }
        }
        Command::Sweep {
            case,
            flags,
            gamma_grid,
            out,
            table,
            counts,
        } => {
            let mut case = load_case(&case, &flags)?;
            case.sweep = true;
            if let Some(g) = gamma_grid {
                case.optimization.gamma_grid = g;
            }
            let report = optimize(&case, &flags, out.as_deref())?;
            let sweep = report.body.sweep.as_ref().map_or_else(SweepTable::empty, SweepTable::new);
            if let Some(p) = table {
                write_csv(&sweep.rows, &p)?;
            }
            if let Some(p) = counts {
                #[derive(Serialize)]
                struct Count<'a> {
                    contact: &'a str,
                    count: usize,
                }
                write_csv(
                    sweep.contact_counts.iter().map(|(c, n)| Count { contact: c, count: *n }),
                    &p,
                )?;
            }
        }
        Command::Replay {
            case,
            flags,
            contacts,
            amplitude,
            setting_pulse_width: pulse_width,
            reference,
            out,
        } => {
            let mut case = load_case(&case, &flags)?;
            let mut settings = Vec::new();
            if reference {
                settings.extend(
                    reference_cohort_settings()
                        .into_iter()
                        .map(|r| r.to_clinical(pulse_width)),
                );
            } else if contacts.is_some() || amplitude.is_some() {
                let (labels, amp) = stimplan_core::pipeline::parse_setting(
                    contacts.as_deref().unwrap_or(""),
                    &amplitude.map(|a| a.to_string()).unwrap_or_default(),
                )
                .map_err(|m| PipelineError::validation(Stage::Validate, m))?;
                settings.push(ClinicalSetting {
                    label: None,
                    contacts: labels,
                    amplitude: amp,
                    pulse_width,
                });
            } else if let Some(mut c) = case.clinical.clone() {
                if pulse_width.is_some() {
                    c.pulse_width = pulse_width;
                }
                settings.push(c);
            } else {
                return Err(PipelineError::validation(
                    Stage::Validate,
                    "case has no clinical setting; pass --contacts/--amplitude or --reference",
                ));
            }
            let cache = cache(&flags.cache_dir);
            let opts = RunOptions {
                cache: Some(&cache),
                ..RunOptions::default()
            };
            let mut replays = Vec::new();
            for s in settings {
                case.clinical = Some(s);
                replays.push(replay_clinical(&case, &opts)?);
            }
            emit(
                &json!({ "schema_version": SCHEMA_VERSION, "case_id": case.case_id, "replays": replays }),
                out.as_deref(),
            )?;
        }
        Command::Cohort {
            cohort,
            workers,
            cache_dir,
            out,
        } => {
            let file = CohortFile::load(&cohort)?;
            let base = cohort.parent().unwrap_or(Path::new(".")).to_path_buf();
            let entries = file.entries(&base);
            let workers = workers
                .or(file.workers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let cache = cache(&cache_dir);
            let report = run_cohort(
                &file.cohort_id,
                &entries,
                workers,
                &RunOptions {
                    cache: Some(&cache),
                    ..RunOptions::default()
                },
            );
            if !report.summary.failed.is_empty() {
                eprintln!("{} of {} cases failed", report.summary.failed.len(), report.summary.cases);
            }
            emit(
                &json!({ "schema_version": SCHEMA_VERSION, "cohort": report }),
                out.as_deref(),
            )?;
        }
        Command::Phantom {
            seed,
            spec,
            case_id,
            target_points,
            constraint_points,
            no_streamlines,
            clinical,
            dir,
            out,
        } => {
            let mut p: PhantomSpec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        PipelineError::validation(Stage::Load, format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str(&text)
                        .map_err(|e| PipelineError::validation(Stage::Load, format!("phantom spec: {e}")))?
                }
                None => PhantomSpec {
                    seed,
                    ..PhantomSpec::default()
                },
            };
            p.case_id = case_id.or(p.case_id);
            if let Some(n) = target_points {
                p.target_points = n;
            }
            if let Some(n) = constraint_points {
                p.constraint_points = n;
            }
            if no_streamlines {
                p.streamlines = false;
            }
            if let Some(label) = clinical {
                p.clinical = Some(find_reference(&label)?);
            }
            p.validate()?;
            let case = generate_phantom(&p);
            match dir {
                Some(d) => {
                    let path = write_case_bundle(&case, &d)?;
                    eprintln!("wrote {}", path.display());
                }
                None => emit(&case, out.as_deref())?,
            }
        }
        Command::Serve {
            bind,
            workers,
            queue_limit,
            cache_dir,
            allow_remote,
        } => {
            let config = ServiceConfig {
                bind,
                workers,
                queue_limit,
                cache_dir,
                allow_remote,
            };
            config
                .validate()
                .map_err(|m| PipelineError::validation(Stage::Validate, m))?;
            let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
            eprintln!("serving on http://{bind}");
            rt.block_on(stimplan_service::serve(config)).map_err(io_err)?;
        }
    }
    Ok(())
}
