//! Unit-current electric fields per contact.
//!
//! Every backend produces the field of a 1 mA monopolar stimulus through a
//! single contact. Because the volume conductor problem is linear, the field
//! of any uniform-split configuration at any amplitude is a scaled vector sum
//! of these unit fields.

mod analytic;
mod cache;
mod fd;

pub use analytic::{unit_field_analytic, AnalyticSampler, SINGULARITY_RADIUS_MM};
pub use cache::{export_unit_fields, import_unit_fields, read_unit_fields, write_unit_fields};
pub use fd::{solve_unit_field_fd, FdFieldSet, FdSolution};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Aabb, Grid3};
use crate::lead::ContactConfiguration;
use crate::Vec3;

pub const UNITS: &str = "V/m per mA";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("query point lies within {radius} mm of contact {contact} (distance {distance:.4} mm)")]
    Singular {
        contact: usize,
        distance: f64,
        radius: f64,
    },
    #[error("invalid field parameter: {0}")]
    Parameter(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("contact {0} is not present in the unit-field matrix")]
    UnknownContact(usize),
    #[error("point registry mismatch: expected {expected}, found {found}")]
    Registry { expected: String, found: String },
    #[error("unit-field file parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    AnalyticPointSource,
    FiniteDifference,
    Imported,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::AnalyticPointSource => "analytic_point_source",
            Backend::FiniteDifference => "finite_difference",
            Backend::Imported => "imported",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analytic_point_source" => Some(Backend::AnalyticPointSource),
            "finite_difference" => Some(Backend::FiniteDifference),
            "imported" => Some(Backend::Imported),
            _ => None,
        }
    }
}

/// Per-tissue conductivities, S/m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueConductivities {
    pub gray_matter: f64,
    pub white_matter: f64,
    pub csf: f64,
    pub encapsulation: f64,
}

impl Default for TissueConductivities {
    fn default() -> Self {
        Self {
            gray_matter: 0.09,
            white_matter: 0.06,
            csf: 2.0,
            encapsulation: 0.18,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueLabel {
    Homogeneous,
    GrayMatter,
    WhiteMatter,
    Csf,
    Encapsulation,
}

/// Labelled voxel volume; labels run x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMap {
    pub grid: Grid3,
    pub labels: Vec<TissueLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConductivityMode {
    Homogeneous,
    VoxelMap { map: TissueMap },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductivityModel {
    #[serde(flatten)]
    pub mode: ConductivityMode,
    #[serde(default = "default_sigma_hom")]
    pub sigma_hom: f64,
    #[serde(default)]
    pub tissues: TissueConductivities,
    /// Thickness of the encapsulation shell around the lead body, mm.
    /// Only applied in voxel-map mode.
    #[serde(default = "default_encapsulation")]
    pub encapsulation_thickness: f64,
}

fn default_sigma_hom() -> f64 {
    0.1
}

fn default_encapsulation() -> f64 {
    0.5
}

impl Default for ConductivityModel {
    fn default() -> Self {
        Self::homogeneous(default_sigma_hom())
    }
}

impl ConductivityModel {
    pub fn homogeneous(sigma: f64) -> Self {
        Self {
            mode: ConductivityMode::Homogeneous,
            sigma_hom: sigma,
            tissues: TissueConductivities::default(),
            encapsulation_thickness: default_encapsulation(),
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let t = &self.tissues;
        for (name, v) in [
            ("sigma_hom", self.sigma_hom),
            ("gray_matter", t.gray_matter),
            ("white_matter", t.white_matter),
            ("csf", t.csf),
            ("encapsulation", t.encapsulation),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(FieldError::Parameter(format!(
                    "conductivity {name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.encapsulation_thickness >= 0.0) {
            return Err(FieldError::Parameter(
                "encapsulation_thickness must be >= 0".into(),
            ));
        }
        if let ConductivityMode::VoxelMap { map } = &self.mode {
            if map.labels.len() != map.grid.len() {
                return Err(FieldError::Parameter(format!(
                    "tissue map has {} labels for {} voxels",
                    map.labels.len(),
                    map.grid.len()
                )));
            }
        }
        Ok(())
    }

    pub fn sigma_of(&self, label: TissueLabel) -> f64 {
        match label {
            TissueLabel::Homogeneous => self.sigma_hom,
            TissueLabel::GrayMatter => self.tissues.gray_matter,
            TissueLabel::WhiteMatter => self.tissues.white_matter,
            TissueLabel::Csf => self.tissues.csf,
            TissueLabel::Encapsulation => self.tissues.encapsulation,
        }
    }

    /// Tissue conductivity at `p`; outside the voxel map the medium is homogeneous.
    pub fn sigma_at(&self, p: &Vec3) -> f64 {
        match &self.mode {
            ConductivityMode::Homogeneous => self.sigma_hom,
            ConductivityMode::VoxelMap { map } => match map.grid.index_of(p) {
                Ok(i) => self.sigma_of(map.labels[i]),
                Err(_) => self.sigma_hom,
            },
        }
    }

    /// Return a copy with every conductivity multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.sigma_hom *= k;
        out.tissues.gray_matter *= k;
        out.tissues.white_matter *= k;
        out.tissues.csf *= k;
        out.tissues.encapsulation *= k;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSolverSpec {
    pub backend: Backend,
    /// Edge length of the cubic solver domain, mm.
    pub domain_box: f64,
    pub grid_spacing: f64,
    /// Domain centre; defaults to the mean of the world contact centroids.
    pub center: Option<[f64; 3]>,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Model inactive contacts as high-conductivity bodies (finite difference only).
    pub passive_contacts: bool,
    pub passive_sigma: f64,
    /// Cosine angular emission weighting for segmented contacts (analytic only).
    pub angular_weighting: bool,
    /// Unit-field cache file, required for the imported backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Default for FieldSolverSpec {
    fn default() -> Self {
        Self {
            backend: Backend::AnalyticPointSource,
            domain_box: 50.0,
            grid_spacing: 0.5,
            center: None,
            max_iterations: 100_000,
            tolerance: 1e-8,
            passive_contacts: true,
            passive_sigma: 1000.0,
            angular_weighting: false,
            path: None,
        }
    }
}

impl FieldSolverSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.domain_box > 0.0 && self.grid_spacing > 0.0) {
            return Err(FieldError::Parameter(
                "domain_box and grid_spacing must be > 0".into(),
            ));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(FieldError::Parameter(
                "tolerance must be > 0 and max_iterations >= 1".into(),
            ));
        }
        if !(self.passive_sigma > 0.0) {
            return Err(FieldError::Parameter("passive_sigma must be > 0".into()));
        }
        if self.backend == Backend::Imported && self.path.is_none() {
            return Err(FieldError::Parameter(
                "the imported backend needs a unit-field file path".into(),
            ));
        }
        Ok(())
    }
}

/// Source of per-contact unit fields at arbitrary world points.
pub trait FieldSampler: Send + Sync {
    fn contact_ids(&self) -> Vec<usize>;

    /// Field of 1 mA through `contact`, V/m per mA.
    fn unit_field(&self, contact: usize, point: &Vec3) -> Result<Vec3, FieldError>;

    /// A box containing every point where the configuration field at
    /// `lambda` reaches `threshold`.
    fn activation_bounds(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        threshold: f64,
    ) -> Result<Aabb, FieldError>;

    /// Norm of the uniform-split configuration field at `lambda`. Points
    /// inside a source singularity report `f64::INFINITY`.
    fn config_norm(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        point: &Vec3,
    ) -> Result<f64, FieldError> {
        let share = lambda / config.len() as f64;
        let mut sum = Vec3::zeros();
        for &id in &config.active_ids {
            match self.unit_field(id, point) {
                Ok(e) => sum += e * share,
                Err(FieldError::Singular { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(sum.norm())
    }
}

/// Identification block stored with a unit-field matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub lead: String,
    pub pose_hash: String,
    pub backend: String,
    pub registry_hash: String,
    pub units: String,
}

/// Per-contact unit-current field vectors at each registry point.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFieldMatrix {
    pub header: FieldHeader,
    contact_ids: Vec<usize>,
    n_points: usize,
    /// `fields[c][p]` for contact slot `c`, registry index `p`.
    fields: Vec<Vec<[f64; 3]>>,
}

impl UnitFieldMatrix {
    pub fn new(
        header: FieldHeader,
        contact_ids: Vec<usize>,
        n_points: usize,
        fields: Vec<Vec<[f64; 3]>>,
    ) -> Result<Self, FieldError> {
        if contact_ids.len() != fields.len() || fields.iter().any(|f| f.len() != n_points) {
            return Err(FieldError::Parameter(
                "unit-field matrix shape does not match its contact list".into(),
            ));
        }
        for (slot, f) in fields.iter().enumerate() {
            if let Some(p) = f.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(FieldError::Parse(format!(
                    "non-finite field value at contact {} point {p}",
                    contact_ids[slot]
                )));
            }
        }
        Ok(Self {
            header,
            contact_ids,
            n_points,
            fields,
        })
    }

    /// Sample every contact of `sampler` at `points`.
    pub fn from_sampler(
        sampler: &dyn FieldSampler,
        points: &[Vec3],
        header: FieldHeader,
    ) -> Result<Self, FieldError> {
        let ids = sampler.contact_ids();
        let fields = crate::par::map_collect(&ids, |&id| {
            points
                .iter()
                .map(|p| sampler.unit_field(id, p).map(|e| [e.x, e.y, e.z]))
                .collect::<Result<Vec<_>, _>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Self::new(header, ids, points.len(), fields)
    }

    pub fn contact_ids(&self) -> &[usize] {
        &self.contact_ids
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn contact_fields(&self, contact: usize) -> Result<&[[f64; 3]], FieldError> {
        self.contact_ids
            .iter()
            .position(|&c| c == contact)
            .map(|slot| self.fields[slot].as_slice())
            .ok_or(FieldError::UnknownContact(contact))
    }

    pub fn unit_vector(&self, contact: usize, point: usize) -> Result<Vec3, FieldError> {
        Ok(Vec3::from(self.contact_fields(contact)?[point]))
    }

    /// Configuration field norms at unit total current (λ = 1 mA).
    pub fn config_unit_norms(&self, config: &ContactConfiguration) -> Result<Vec<f64>, FieldError> {
        superpose(config, self, 1.0)
    }

    pub(crate) fn raw(&self) -> &[Vec<[f64; 3]>] {
        &self.fields
    }
}

/// Field norm of a uniform-split configuration at total amplitude `lambda`
/// (mA), at every registry point: `‖Σ_k (λ/n) E_k‖`.
pub fn superpose(
    config: &ContactConfiguration,
    unit_fields: &UnitFieldMatrix,
    lambda: f64,
) -> Result<Vec<f64>, FieldError> {
    let share = lambda / config.len() as f64;
    let columns = config
        .active_ids
        .iter()
        .map(|&id| unit_fields.contact_fields(id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..unit_fields.n_points)
        .map(|p| {
            let mut v = [0.0f64; 3];
            for col in &columns {
                for a in 0..3 {
                    v[a] += share * col[p][a];
                }
            }
            (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
        })
        .collect())
}
