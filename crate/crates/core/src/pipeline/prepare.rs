use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{CaseFile, ErrorClass, PipelineError, RegionData, Stage};
use crate::activation::{
    spill, Category, CategoryCoverage, CoveragePair, CoverageReport, TargetOccupancy, ThresholdSpec,
};
use crate::anatomy::{
    crop_roi, exclude_near, reduce_group, voxel_filter, ActivationMode, PointCloud, RegionKind,
    RegionSet, Role, StreamlineSet,
};
use crate::fieldmodel::{
    export_unit_fields, import_unit_fields, AnalyticSampler, Backend, ConductivityMode, FdFieldSet,
    FieldHeader, FieldSampler, UnitFieldMatrix, SINGULARITY_RADIUS_MM, UNITS,
};
use crate::lead::{enumerate_configurations, place_lead, ContactConfiguration, LeadModel};
use crate::optimizer::{
    CaseModel, ConstraintCoverageThreshold, OptimizationSpec, OptimizeError,
};
use crate::{json_hash, Issue, Vec3};

/// Shared store of solved fields, keyed by lead, pose, backend and
/// conductivity; optionally mirrored to unit-field files in a directory.
#[derive(Debug, Default)]
pub struct FieldCache {
    fd: Mutex<HashMap<String, Arc<FdFieldSet>>>,
    dir: Option<PathBuf>,
    solves: AtomicUsize,
}

impl FieldCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    /// Number of field solves performed through this cache.
    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    fn fd_set(
        &self,
        key: &str,
        solve: impl FnOnce() -> Result<FdFieldSet, crate::fieldmodel::FieldError>,
    ) -> Result<Arc<FdFieldSet>, crate::fieldmodel::FieldError> {
        if let Some(hit) = self.fd.lock().expect("cache lock").get(key) {
            return Ok(hit.clone());
        }
        self.solves.fetch_add(1, Ordering::Relaxed);
        let set = Arc::new(solve()?);
        self.fd
            .lock()
            .expect("cache lock")
            .entry(key.to_string())
            .or_insert(set.clone());
        Ok(set)
    }

    fn matrix_path(&self, key: &str, registry: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}-{}.unitfield", &key[..16], &registry[..16])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub name: String,
    pub role: Role,
    pub kind: RegionKind,
    pub input_points: usize,
    pub retained_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_streamlines: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_streamlines: Option<usize>,
    /// Points dropped for lying inside a contact's singular core.
    pub excluded_near_contacts: usize,
}

type Units = Vec<Vec<usize>>;

/// A case with regions filtered, fields sampled and per-configuration unit
/// norms computed; the model the optimizer runs against.
pub struct PreparedCase {
    pub case: CaseFile,
    pub lead: LeadModel,
    pub regions: RegionSet,
    pub summaries: Vec<RegionSummary>,
    pub matrix: UnitFieldMatrix,
    pub notices: Vec<String>,
    pub fd_iterations: Option<Vec<usize>>,
    pub field_key: String,
    sampler: Option<Arc<dyn FieldSampler>>,
    configs: Vec<ContactConfiguration>,
    norms: Vec<Vec<f64>>,
    units: HashMap<(Role, ActivationMode), Units>,
    categories: Vec<(Category, Units, Units)>,
    occupancy: TargetOccupancy,
    spill_cache: Mutex<HashMap<(String, u64, u64), f64>>,
    progress: Option<Arc<AtomicUsize>>,
}

fn regions_error(i: usize, field: &str, message: impl Into<String>) -> PipelineError {
    let message = message.into();
    let mut e = PipelineError::validation(Stage::Regions, format!("regions[{i}]: {message}"));
    e.issues.push(Issue::new(format!("regions[{i}].{field}"), message));
    e
}

/// Hash identifying a field solution: lead model, pose, backend, solver
/// settings and conductivity.
pub(crate) fn field_key(case: &CaseFile, lead: &LeadModel) -> String {
    let mut solver = case.field.clone();
    solver.path = None;
    json_hash(&(lead, json_hash(&case.pose), solver, json_hash(&case.conductivity)))
}

impl PreparedCase {
    /// Prepare a resolved, validated case.
    pub fn prepare(case: &CaseFile, cache: Option<&FieldCache>) -> Result<Self, PipelineError> {
        let lead = case
            .lead
            .resolve()
            .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
        let contacts = place_lead(&lead, &case.pose)
            .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
        let tip = case.pose.tip();

        let mut clouds = Vec::new();
        let mut sets = Vec::new();
        let mut summaries = Vec::new();
        for (i, r) in case.regions.iter().enumerate() {
            let name = r.name.clone().unwrap_or_else(|| format!("region{i}"));
            match &r.data {
                RegionData::PointCloud { points, .. } => {
                    let points = points
                        .as_ref()
                        .ok_or_else(|| regions_error(i, "path", "region file was not resolved"))?;
                    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                        return Err(regions_error(i, "points", "non-finite coordinate"));
                    }
                    let filtered = voxel_filter(points, case.voxel_size);
                    let (kept, dropped) = exclude_near(&filtered, &contacts, SINGULARITY_RADIUS_MM);
                    summaries.push(RegionSummary {
                        name: name.clone(),
                        role: r.role,
                        kind: RegionKind::PointCloud,
                        input_points: points.len(),
                        retained_points: kept.len(),
                        input_streamlines: None,
                        retained_streamlines: None,
                        excluded_near_contacts: dropped,
                    });
                    clouds.push(PointCloud {
                        name,
                        role: r.role,
                        points: kept,
                        voxel_size: Some(case.voxel_size),
                    });
                }
                RegionData::Streamlines { streamlines, .. } => {
                    let streamlines = streamlines
                        .as_ref()
                        .ok_or_else(|| regions_error(i, "path", "region file was not resolved"))?;
                    let set = StreamlineSet {
                        name: name.clone(),
                        role: r.role,
                        streamlines: streamlines.clone(),
                    };
                    set.validate()
                        .map_err(|e| regions_error(i, "streamlines", e.to_string()))?;
                    let mut cropped = crop_roi(&set, &tip, case.roi_radius);
                    let mut dropped = 0;
                    for s in &mut cropped.streamlines {
                        let (kept, d) = exclude_near(&s.points, &contacts, SINGULARITY_RADIUS_MM);
                        s.points = kept;
                        dropped += d;
                    }
                    cropped.streamlines.retain(|s| !s.points.is_empty());
                    summaries.push(RegionSummary {
                        name,
                        role: r.role,
                        kind: RegionKind::Streamlines,
                        input_points: set.point_count(),
                        retained_points: cropped.point_count(),
                        input_streamlines: Some(set.streamlines.len()),
                        retained_streamlines: Some(cropped.streamlines.len()),
                        excluded_near_contacts: dropped,
                    });
                    sets.push(cropped);
                }
            }
        }
        let mut notices = Vec::new();
        for s in &summaries {
            if s.excluded_near_contacts > 0 {
                notices.push(format!(
                    "{} point(s) of `{}` lie within {SINGULARITY_RADIUS_MM} mm of a contact and were excluded",
                    s.excluded_near_contacts, s.name
                ));
            }
        }
        let regions = RegionSet::build(&clouds, &sets, case.activation_mode);
        if regions.units(Role::Target, case.activation_mode).is_empty() {
            return Err(PipelineError::validation(
                Stage::Regions,
                "target regions hold no points after filtering and cropping",
            ));
        }

        let key = field_key(case, &lead);
        let registry_hash = regions.registry.hash();
        let header = FieldHeader {
            lead: lead.name.clone(),
            pose_hash: json_hash(&case.pose),
            backend: case.field.backend.as_str().to_string(),
            registry_hash: registry_hash.clone(),
            units: UNITS.to_string(),
        };
        let fields_err = |e| PipelineError::field(Stage::Fields, e);
        let mut fd_iterations = None;
        let sampler: Option<Arc<dyn FieldSampler>> = match case.field.backend {
            Backend::AnalyticPointSource => {
                if matches!(case.conductivity.mode, ConductivityMode::VoxelMap { .. }) {
                    notices.push("analytic backend ignores the tissue map and uses sigma_hom".into());
                }
                Some(Arc::new(
                    AnalyticSampler::new(
                        &lead,
                        &case.pose,
                        case.conductivity.sigma_hom,
                        case.field.angular_weighting,
                    )
                    .map_err(fields_err)?,
                ))
            }
            Backend::FiniteDifference => {
                let solve = || FdFieldSet::solve(&case.field, &case.conductivity, &lead, &case.pose);
                let set = match cache {
                    Some(c) => c.fd_set(&key, solve),
                    None => solve().map(Arc::new),
                }
                .map_err(fields_err)?;
                fd_iterations = Some(set.iterations.clone());
                Some(set)
            }
            Backend::Imported => None,
        };

        let matrix = match &sampler {
            None => {
                let path = case.field.path.as_deref().unwrap_or_default();
                let m = import_unit_fields(Path::new(path), Some(&registry_hash)).map_err(fields_err)?;
                let mut want: Vec<usize> = lead.contacts.iter().map(|c| c.id).collect();
                let mut have = m.contact_ids().to_vec();
                want.sort_unstable();
                have.sort_unstable();
                if want != have {
                    return Err(PipelineError::validation(
                        Stage::Fields,
                        format!("imported fields cover contacts {have:?}, lead has {want:?}"),
                    ));
                }
                if case.optimization.compute_spill {
                    notices.push("imported unit fields cannot be sampled off-registry; spill reported as 0".into());
                }
                m
            }
            Some(s) => {
                let cached = cache.and_then(|c| c.matrix_path(&key, &registry_hash));
                match cached.as_ref().filter(|p| p.exists()) {
                    Some(p) => import_unit_fields(p, Some(&registry_hash)).map_err(fields_err)?,
                    None => {
                        let m = UnitFieldMatrix::from_sampler(s.as_ref(), regions.registry.points(), header)
                            .map_err(fields_err)?;
                        if let Some(p) = cached {
                            export_unit_fields(&m, &p).map_err(fields_err)?;
                        }
                        m
                    }
                }
            }
        };

        let configs = enumerate_configurations(&lead)
            .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
        let norms = crate::par::map_collect(&configs, |c| matrix.config_unit_norms(c))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(fields_err)?;

        let mut units = HashMap::new();
        for role in [Role::Target, Role::Constraint] {
            for mode in [ActivationMode::PointWise, ActivationMode::TrajectoryWise] {
                units.insert((role, mode), regions.units(role, mode));
            }
        }
        let pooled = |kind: RegionKind, role: Role, mode: ActivationMode| -> Units {
            regions
                .regions
                .iter()
                .filter(|r| r.kind == kind && r.role == role)
                .flat_map(|r| r.units(mode))
                .collect()
        };
        let categories = Category::ALL
            .iter()
            .map(|&cat| {
                let (kind, mode) = match cat {
                    Category::PointCloud => (RegionKind::PointCloud, ActivationMode::PointWise),
                    Category::StreamlinesPointWise => (RegionKind::Streamlines, ActivationMode::PointWise),
                    Category::StreamlinesTrajectoryWise => {
                        (RegionKind::Streamlines, ActivationMode::TrajectoryWise)
                    }
                };
                (cat, pooled(kind, Role::Target, mode), pooled(kind, Role::Constraint, mode))
            })
            .filter(|(_, t, c)| !t.is_empty() || !c.is_empty())
            .collect();
        let occupancy = TargetOccupancy::new(&regions.target_points(), case.voxel_size);

        Ok(Self {
            case: case.clone(),
            lead,
            regions,
            summaries,
            matrix,
            notices,
            fd_iterations,
            field_key: key,
            sampler,
            configs,
            norms,
            units,
            categories,
            occupancy,
            spill_cache: Mutex::new(HashMap::new()),
            progress: None,
        })
    }

    /// Count coverage evaluations (one per optimized configuration).
    pub fn set_progress(&mut self, counter: Arc<AtomicUsize>) {
        self.progress = Some(counter);
    }

    pub fn unit_norms_for(&self, config: &ContactConfiguration) -> Result<Vec<f64>, OptimizeError> {
        match self.configs.iter().position(|c| c == config) {
            Some(i) => Ok(self.norms[i].clone()),
            None => self
                .matrix
                .config_unit_norms(config)
                .map_err(|e| OptimizeError::Activation(e.into())),
        }
    }

    fn spill_for(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        threshold: f64,
        spec: &OptimizationSpec,
    ) -> Result<f64, OptimizeError> {
        let sampler = match (&self.sampler, spec.compute_spill) {
            (Some(s), true) => s,
            _ => return Ok(0.0),
        };
        let key = (config.canonical_label(), lambda.to_bits(), threshold.to_bits());
        if let Some(v) = self.spill_cache.lock().expect("spill cache").get(&key) {
            return Ok(*v);
        }
        let v = spill(sampler.as_ref(), config, lambda, threshold, &self.occupancy, spec.spill_spacing)?;
        self.spill_cache.lock().expect("spill cache").insert(key, v);
        Ok(v)
    }

    /// Coverage of an arbitrary configuration at `lambda` with the given
    /// thresholds.
    pub fn evaluate(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        spec: &OptimizationSpec,
        thresholds: &ThresholdSpec,
    ) -> Result<CoverageReport, OptimizeError> {
        let (e_t, e_c_opt) = thresholds.adjusted()?;
        let e_c = match spec.constraint_coverage_threshold {
            ConstraintCoverageThreshold::Constraint => e_c_opt,
            ConstraintCoverageThreshold::Target => e_t,
        };
        let unit = self.unit_norms_for(config)?;
        let scaled: Vec<f64> = unit.iter().map(|e| e * lambda).collect();
        let pct = |groups: &Units, t: f64| -> Result<Option<f64>, OptimizeError> {
            if groups.is_empty() {
                Ok(None)
            } else {
                Ok(Some(crate::activation::coverage_groups(groups, &scaled, t)?))
            }
        };
        let pair = |mode: ActivationMode| -> Result<CoveragePair, OptimizeError> {
            Ok(CoveragePair {
                target: pct(&self.units[&(Role::Target, mode)], e_t)?.unwrap_or(0.0),
                constraint: pct(&self.units[&(Role::Constraint, mode)], e_c)?,
            })
        };
        let point_wise = pair(ActivationMode::PointWise)?;
        let trajectory_wise = if self.regions.has_streamlines() {
            Some(pair(ActivationMode::TrajectoryWise)?)
        } else {
            None
        };
        let active = match self.case.activation_mode {
            ActivationMode::TrajectoryWise => trajectory_wise.unwrap_or(point_wise),
            ActivationMode::PointWise => point_wise,
        };
        let categories = self
            .categories
            .iter()
            .map(|(cat, t, c)| {
                Ok(CategoryCoverage {
                    category: *cat,
                    target: pct(t, e_t)?,
                    constraint: pct(c, e_c)?,
                })
            })
            .collect::<Result<Vec<_>, OptimizeError>>()?;
        Ok(CoverageReport {
            config: config.clone(),
            lambda,
            mode: self.case.activation_mode,
            p_act_t: active.target,
            p_act_c: active.constraint.unwrap_or(0.0),
            p_act_s: self.spill_for(config, lambda, e_t, spec)?,
            point_wise,
            trajectory_wise,
            threshold_t: e_t,
            threshold_c: e_c,
            categories,
        })
    }

    pub fn sampler(&self) -> Option<&dyn FieldSampler> {
        self.sampler.as_deref()
    }

    pub fn registry_points(&self) -> &[Vec3] {
        self.regions.registry.points()
    }
}

impl CaseModel for PreparedCase {
    fn configurations(&self) -> &[ContactConfiguration] {
        &self.configs
    }

    fn unit_norms(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>), OptimizeError> {
        let norms = &self.norms[idx];
        let mode = self.case.activation_mode;
        let reduce = |role: Role| -> Vec<f64> {
            self.units[&(role, mode)]
                .iter()
                .filter_map(|g| reduce_group(g, norms).map(|i| norms[i]))
                .collect()
        };
        Ok((reduce(Role::Target), reduce(Role::Constraint)))
    }

    fn coverage(&self, idx: usize, lambda: f64, spec: &OptimizationSpec) -> Result<CoverageReport, OptimizeError> {
        let report = self.evaluate(&self.configs[idx], lambda, spec, &spec.thresholds);
        if let Some(p) = &self.progress {
            p.fetch_add(1, Ordering::Relaxed);
        }
        report
    }
}

impl std::fmt::Debug for PreparedCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedCase")
            .field("case_id", &self.case.case_id)
            .field("lead", &self.lead.name)
            .field("points", &self.regions.registry.len())
            .field("configurations", &self.configs.len())
            .finish()
    }
}

pub(crate) fn io_error(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorClass::Io, e.to_string())
}
