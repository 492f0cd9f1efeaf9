use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::clinical::{replay, ClinicalReplay};
use super::prepare::{io_error, FieldCache, PreparedCase, RegionSummary};
use super::{CaseFile, PipelineError, Stage};
use crate::fieldmodel::{UnitFieldMatrix, UNITS};
use crate::lead::enumerate_configurations;
use crate::optimizer::{optimize_all, relaxation_sweep, ConfigurationResult, SweepResult};
use crate::{json_hash, sha256_hex};

/// Version tag carried by every serialized report and service response.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub cache: Option<&'a FieldCache>,
    /// Incremented once per configuration evaluated.
    pub progress: Option<Arc<AtomicUsize>>,
    /// Directory that relative region paths resolve against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub backend: String,
    pub units: String,
    pub field_key: String,
    pub pose_hash: String,
    pub registry_hash: String,
    pub points: usize,
    pub contacts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_iterations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub tool: String,
    pub version: String,
    /// Hash of the effective case, inline regions included.
    pub case_hash: String,
    /// `(region name, hash of its resolved data)` in case order.
    pub region_hashes: Vec<(String, String)>,
}

/// Deterministic part of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub case_id: String,
    /// Effective case with every default filled in and regions inline.
    pub case: CaseFile,
    pub lead: String,
    pub configurations: usize,
    pub regions: Vec<RegionSummary>,
    pub fields: FieldSummary,
    pub ranked: Vec<ConfigurationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<ClinicalReplay>,
    pub notices: Vec<String>,
    pub provenance: ReportProvenance,
}

impl ReportBody {
    /// Canonical serialization used for byte-level comparisons.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn top(&self) -> Option<&ConfigurationResult> {
        self.ranked.first()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    /// RFC 3339 UTC timestamp; not part of the reproducible body.
    pub generated_at: String,
    pub body: ReportBody,
}

impl RunReport {
    pub fn new(body: ReportBody) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            generated_at: humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string(),
            body,
        }
    }
}

/// One configuration at one relaxation level, flattened for charting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub rank: usize,
    pub configuration: String,
    pub lambda_opt: f64,
    pub p_act_t: f64,
    pub p_act_c: f64,
    pub p_act_s: f64,
    pub score: f64,
    pub feasible: bool,
}

/// Sweep results as plain tables: every ranked row, and per-contact
/// top-configuration counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub contact_counts: Vec<(String, usize)>,
}

impl SweepTable {
    pub fn new(sweep: &SweepResult) -> Self {
        let rows = sweep
            .entries
            .iter()
            .flat_map(|e| {
                e.ranked.iter().enumerate().map(move |(i, r)| SweepRow {
                    gamma: e.gamma,
                    rank: i + 1,
                    configuration: r.config.canonical_label(),
                    lambda_opt: r.lambda_opt,
                    p_act_t: r.coverage.p_act_t,
                    p_act_c: r.coverage.p_act_c,
                    p_act_s: r.coverage.p_act_s,
                    score: r.score,
                    feasible: r.feasible,
                })
            })
            .collect();
        Self {
            rows,
            contact_counts: sweep.contact_counts.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            rows: Vec::new(),
            contact_counts: Vec::new(),
        }
    }

    /// Rows with rank 1.
    pub fn top(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.rank == 1)
    }
}

/// Write `value` as pretty JSON through a temporary file and rename.
pub fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| io_error(Stage::Report, e))?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| io_error(Stage::Report, format!("{}: {e}", path.display())))
}

fn ready(case: &CaseFile, opts: &RunOptions) -> Result<PreparedCase, PipelineError> {
    let base = opts.base_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let resolved = case.resolve(&base)?;
    resolved.validate()?;
    let mut prepared = PreparedCase::prepare(&resolved, opts.cache)?;
    if let Some(p) = &opts.progress {
        prepared.set_progress(p.clone());
    }
    Ok(prepared)
}

/// Number of configuration evaluations a run of `case` performs.
pub fn expected_evaluations(case: &CaseFile) -> usize {
    let n = case
        .lead
        .resolve()
        .ok()
        .and_then(|l| enumerate_configurations(&l).ok())
        .map_or(0, |c| c.len());
    let sweeps = if case.sweep { case.optimization.gamma_grid.len() } else { 0 };
    n * (1 + sweeps)
}

/// Prepare fields, optimize every configuration, rank, sweep and replay.
pub fn run_case(case: &CaseFile, opts: &RunOptions) -> Result<ReportBody, PipelineError> {
    let prepared = ready(case, opts)?;
    let spec = &prepared.case.optimization;
    let ranked = optimize_all(&prepared, spec).map_err(|e| PipelineError::optimize(Stage::Optimize, e))?;
    let sweep = if prepared.case.sweep {
        Some(relaxation_sweep(&prepared, spec).map_err(|e| PipelineError::optimize(Stage::Sweep, e))?)
    } else {
        None
    };
    let clinical = match &prepared.case.clinical {
        Some(setting) => Some(replay(&prepared, setting)?),
        None => None,
    };
    Ok(body(&prepared, ranked, sweep, clinical))
}

/// Coverage of the case's clinical setting alone; `None` without one.
pub fn replay_clinical(case: &CaseFile, opts: &RunOptions) -> Result<Option<ClinicalReplay>, PipelineError> {
    let Some(setting) = &case.clinical else {
        return Ok(None);
    };
    let prepared = ready(case, opts)?;
    replay(&prepared, setting).map(Some)
}

/// Sample the case's unit fields at its prepared registry points.
pub fn compute_unit_fields(case: &CaseFile, opts: &RunOptions) -> Result<UnitFieldMatrix, PipelineError> {
    Ok(ready(case, opts)?.matrix)
}

fn body(
    prepared: &PreparedCase,
    ranked: Vec<ConfigurationResult>,
    sweep: Option<SweepResult>,
    clinical: Option<ClinicalReplay>,
) -> ReportBody {
    let case = &prepared.case;
    let region_hashes = case
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let name = r.name.clone().unwrap_or_else(|| format!("region{i}"));
            (name, json_hash(&r.data))
        })
        .collect();
    let mut notices = prepared.notices.clone();
    if let Some(c) = &clinical {
        if c.coverage.is_none() {
            notices.push(c.note.clone());
        }
    }
    ReportBody {
        case_id: case.case_id.clone(),
        case: case.clone(),
        lead: prepared.lead.name.clone(),
        configurations: ranked.len(),
        regions: prepared.summaries.clone(),
        fields: FieldSummary {
            backend: case.field.backend.as_str().to_string(),
            units: UNITS.to_string(),
            field_key: prepared.field_key.clone(),
            pose_hash: prepared.matrix.header.pose_hash.clone(),
            registry_hash: prepared.matrix.header.registry_hash.clone(),
            points: prepared.matrix.n_points(),
            contacts: prepared.matrix.contact_ids().to_vec(),
            fd_iterations: prepared.fd_iterations.clone(),
        },
        ranked,
        sweep,
        clinical,
        notices,
        provenance: ReportProvenance {
            tool: "stimplan".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            case_hash: sha256_hex(&serde_json::to_vec(case).expect("case serializes")),
            region_hashes,
        },
    }
}
