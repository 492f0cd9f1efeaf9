//! End-to-end runs: case loading, region and field preparation,
//! optimization, sweeps, clinical replay, cohorts and reports.

mod clinical;
mod cohort;
mod phantom;
mod prepare;
mod report;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use clinical::{parse_setting, reference_cohort_settings, ClinicalReplay, ReferenceSetting, ReplayStatus, Side};
pub use cohort::{run_cohort, summarize, CaseOutcome, CohortEntry, CohortFile, CategoryStats, CohortReport, CohortSummary, Quartiles};
pub use phantom::{generate_phantom, write_case_bundle, PhantomSpec, MAX_PHANTOM_POINTS};
pub use prepare::{FieldCache, PreparedCase, RegionSummary};
pub use report::{
    compute_unit_fields, expected_evaluations, replay_clinical, run_case, write_json_atomic, FieldSummary,
    ReportBody, ReportProvenance, RunOptions, RunReport, SweepRow, SweepTable, SCHEMA_VERSION,
};

use crate::activation::ActivationError;
use crate::anatomy::{
    parse_point_cloud, parse_streamlines, ActivationMode, AnatomyError, Role, Streamline,
    DEFAULT_ROI_RADIUS, DEFAULT_VOXEL_SIZE,
};
use crate::fieldmodel::{ConductivityModel, FieldError, FieldSolverSpec};
use crate::lead::{builtin_lead, LeadError, LeadModel, LeadPose};
use crate::optimizer::{OptimizationSpec, OptimizeError};
use crate::{Issue, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Validate,
    Regions,
    Fields,
    Optimize,
    Sweep,
    Replay,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Validate => "validate",
            Stage::Regions => "regions",
            Stage::Fields => "fields",
            Stage::Optimize => "optimize",
            Stage::Sweep => "sweep",
            Stage::Replay => "replay",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Validation,
    Solver,
    Io,
}

/// Stage-tagged pipeline failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineError {
    pub stage: Stage,
    pub class: ErrorClass,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<Issue>,
}

impl PipelineError {
    pub fn new(stage: Stage, class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            stage,
            class,
            message: message.into(),
            issues: Vec::new(),
        }
    }

    pub fn validation(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorClass::Validation, message)
    }

    pub fn from_issues(stage: Stage, issues: Vec<Issue>) -> Self {
        let message = issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ");
        Self {
            stage,
            class: ErrorClass::Validation,
            message,
            issues,
        }
    }

    /// Process exit code: 2 for invalid input, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Validation => 2,
            ErrorClass::Solver => 3,
            ErrorClass::Io => 1,
        }
    }

    pub(crate) fn field(stage: Stage, e: FieldError) -> Self {
        let class = match e {
            FieldError::NotConverged { .. } | FieldError::Singular { .. } => ErrorClass::Solver,
            FieldError::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Validation,
        };
        Self::new(stage, class, e.to_string())
    }

    pub(crate) fn optimize(stage: Stage, e: OptimizeError) -> Self {
        match e {
            OptimizeError::Spec(issues) => {
                Self::from_issues(stage, issues.into_iter().map(|i| i.under("optimization")).collect())
            }
            OptimizeError::Activation(ActivationError::Field(f)) => Self::field(stage, f),
            OptimizeError::Evaluation(m) => Self::new(stage, ErrorClass::Solver, m),
            other => Self::validation(stage, other.to_string()),
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.as_str(), self.message)
    }
}

impl std::error::Error for PipelineError {}

/// Built-in lead name or an inline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LeadRef {
    Builtin(String),
    Model(Box<LeadModel>),
}

impl LeadRef {
    pub fn resolve(&self) -> Result<LeadModel, LeadError> {
        match self {
            LeadRef::Builtin(name) => builtin_lead(name),
            LeadRef::Model(m) => {
                m.validate()?;
                Ok((**m).clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionData {
    PointCloud {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        points: Option<Vec<Vec3>>,
    },
    Streamlines {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        streamlines: Option<Vec<Streamline>>,
    },
}

/// A target or constraint region, given by file path or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub role: Role,
    #[serde(flatten)]
    pub data: RegionData,
}

/// Clinically programmed setting used as a reference point for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSetting {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Active contact labels; empty when the lead is not stimulating.
    #[serde(default)]
    pub contacts: Vec<String>,
    /// mA
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    /// µs; defaults to the reference pulse width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse_width: Option<f64>,
}

fn default_voxel() -> f64 {
    DEFAULT_VOXEL_SIZE
}
fn default_roi() -> f64 {
    DEFAULT_ROI_RADIUS
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub case_id: String,
    pub lead: LeadRef,
    #[serde(default = "LeadPose::identity")]
    pub pose: LeadPose,
    #[serde(default)]
    pub activation_mode: ActivationMode,
    pub regions: Vec<RegionRef>,
    /// Point-cloud voxel filter edge, mm.
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    /// Streamline crop radius around the lead tip, mm.
    #[serde(default = "default_roi")]
    pub roi_radius: f64,
    #[serde(default)]
    pub conductivity: ConductivityModel,
    #[serde(default)]
    pub field: FieldSolverSpec,
    #[serde(default)]
    pub optimization: OptimizationSpec,
    /// Run the relaxation sweep over `optimization.gamma_grid`.
    #[serde(default = "default_true")]
    pub sweep: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<ClinicalSetting>,
}

impl CaseFile {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text)
            .map_err(|e| PipelineError::validation(Stage::Load, format!("case document: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::validation(Stage::Load, format!("cannot read {}: {e}", path.display()))
        })?;
        let case = Self::from_json(&text)?;
        case.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    /// Replace file references with inline data read relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<Self, PipelineError> {
        let mut out = self.clone();
        if let Some(p) = &out.field.path {
            if Path::new(p).is_relative() {
                out.field.path = Some(base.join(p).to_string_lossy().into_owned());
            }
        }
        for (i, r) in out.regions.iter_mut().enumerate() {
            let read = |p: &str| {
                std::fs::read_to_string(base.join(p)).map_err(|e| {
                    let mut err = PipelineError::validation(Stage::Load, format!("region file {p}: {e}"));
                    err.issues.push(Issue::new(format!("regions[{i}].path"), e.to_string()));
                    err
                })
            };
            let parse_err = |p: &str, e: AnatomyError| {
                let mut err = PipelineError::validation(Stage::Load, format!("region file {p}: {e}"));
                err.issues.push(Issue::new(format!("regions[{i}].path"), e.to_string()));
                err
            };
            match &mut r.data {
                RegionData::PointCloud { path, points } => {
                    if let Some(p) = path.take() {
                        let cloud = parse_point_cloud(&read(&p)?).map_err(|e| parse_err(&p, e))?;
                        r.name.get_or_insert(cloud.name);
                        *points = Some(cloud.points);
                    }
                }
                RegionData::Streamlines { path, streamlines } => {
                    if let Some(p) = path.take() {
                        let set = parse_streamlines(&read(&p)?).map_err(|e| parse_err(&p, e))?;
                        r.name.get_or_insert(set.name);
                        *streamlines = Some(set.streamlines);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Every problem with the case, located by field path.
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.case_id.trim().is_empty() {
            out.push(Issue::new("case_id", "must not be empty"));
        }
        let lead = match self.lead.resolve() {
            Ok(l) => Some(l),
            Err(e) => {
                out.push(Issue::new("lead", e.to_string()));
                None
            }
        };
        if let Err(e) = self.pose.validate() {
            out.push(Issue::new("pose", e.to_string()));
        }
        if self.regions.is_empty() {
            out.push(Issue::new("regions", "at least one target region is required"));
        } else if !self.regions.iter().any(|r| r.role == Role::Target) {
            out.push(Issue::new("regions", "no region has role `target`"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            let (has_path, has_inline) = match &r.data {
                RegionData::PointCloud { path, points } => (path.is_some(), points.is_some()),
                RegionData::Streamlines { path, streamlines } => (path.is_some(), streamlines.is_some()),
            };
            if has_path == has_inline {
                out.push(Issue::new(
                    format!("regions[{i}]"),
                    "give exactly one of `path` or inline data",
                ));
            }
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            out.push(Issue::new("voxel_size", format!("must be > 0, got {}", self.voxel_size)));
        }
        if !(self.roi_radius > 0.0) {
            out.push(Issue::new("roi_radius", format!("must be > 0, got {}", self.roi_radius)));
        }
        if let Err(e) = self.conductivity.validate() {
            out.push(Issue::new("conductivity", e.to_string()));
        }
        if let Err(e) = self.field.validate() {
            out.push(Issue::new("field", e.to_string()));
        }
        out.extend(self.optimization.issues().into_iter().map(|i| i.under("optimization")));
        if let Some(c) = &self.clinical {
            if let Some(lead) = &lead {
                for (j, label) in c.contacts.iter().enumerate() {
                    if let Err(e) = lead.contact_by_label(label) {
                        out.push(Issue::new(format!("clinical.contacts[{j}]"), e.to_string()));
                    }
                }
            }
            match c.amplitude {
                Some(a) if !(a >= 0.0 && a.is_finite()) => {
                    out.push(Issue::new("clinical.amplitude", format!("must be >= 0, got {a}")))
                }
                None if !c.contacts.is_empty() => {
                    out.push(Issue::new("clinical.amplitude", "required when contacts are active"))
                }
                _ => {}
            }
            if let Some(pw) = c.pulse_width {
                if !(pw > 0.0 && pw.is_finite()) {
                    out.push(Issue::new("clinical.pulse_width", format!("must be > 0, got {pw}")));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::from_issues(Stage::Validate, issues))
        }
    }
}
