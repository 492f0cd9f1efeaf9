use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prepare::io_error;
use super::{write_json_atomic, CaseFile, ClinicalSetting, LeadRef, PipelineError, RegionData, RegionRef, Stage};
use crate::anatomy::{write_point_cloud, write_streamlines, ActivationMode, PointCloud, Role, Streamline, StreamlineSet};
use crate::fieldmodel::{ConductivityModel, FieldSolverSpec};
use crate::lead::{builtin_lead, LeadPose};
use crate::optimizer::OptimizationSpec;
use crate::{Issue, Vec3};

/// Synthetic case geometry in the lead frame (tip at the origin, +z
/// proximal). The default target is an ellipsoid beside the dorsal
/// segmented row, facing segment A; the constraint sits on the opposite
/// side at a similar height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub case_id: Option<String>,
    pub lead: String,
    pub target_center: [f64; 3],
    pub target_radii: [f64; 3],
    pub target_points: usize,
    pub constraint_center: [f64; 3],
    pub constraint_radii: [f64; 3],
    pub constraint_points: usize,
    /// Add a target and a constraint streamline bundle.
    pub streamlines: bool,
    pub streamline_count: usize,
    pub streamline_points: usize,
    pub activation_mode: ActivationMode,
    pub optimization: OptimizationSpec,
    pub sweep: bool,
    pub clinical: Option<ClinicalSetting>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            case_id: None,
            lead: "abbott_infinity_directional".into(),
            target_center: [2.4, 0.0, 6.2],
            target_radii: [1.5, 2.0, 2.0],
            target_points: 1500,
            constraint_center: [-5.5, 0.0, 6.0],
            constraint_radii: [1.2, 2.0, 2.0],
            constraint_points: 1500,
            streamlines: true,
            streamline_count: 16,
            streamline_points: 41,
            activation_mode: ActivationMode::PointWise,
            optimization: OptimizationSpec::default(),
            sweep: true,
            clinical: None,
        }
    }
}

/// Upper bound on generated points per cloud and per streamline set.
pub const MAX_PHANTOM_POINTS: usize = 200_000;

impl PhantomSpec {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if let Err(e) = builtin_lead(&self.lead) {
            out.push(Issue::new("lead", e.to_string()));
        }
        for (path, v) in [
            ("target_center", self.target_center),
            ("constraint_center", self.constraint_center),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                out.push(Issue::new(path, "must be finite"));
            }
        }
        for (path, v) in [("target_radii", self.target_radii), ("constraint_radii", self.constraint_radii)] {
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                out.push(Issue::new(path, "every radius must be > 0"));
            }
        }
        if self.target_points == 0 {
            out.push(Issue::new("target_points", "must be >= 1"));
        }
        for (path, n) in [
            ("target_points", self.target_points),
            ("constraint_points", self.constraint_points),
            ("streamline_points", self.streamline_count.saturating_mul(self.streamline_points)),
        ] {
            if n > MAX_PHANTOM_POINTS {
                out.push(Issue::new(path, format!("at most {MAX_PHANTOM_POINTS} points")));
            }
        }
        if self.streamlines && self.streamline_points < 2 {
            out.push(Issue::new("streamline_points", "must be >= 2"));
        }
        out.extend(self.optimization.issues().into_iter().map(|i| i.under("optimization")));
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

fn ellipsoid(rng: &mut ChaCha8Rng, center: [f64; 3], radii: [f64; 3], n: usize) -> Vec<Vec3> {
    let c = Vec3::from(center);
    let r = Vec3::from(radii);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if u.norm_squared() <= 1.0 {
            out.push(c + u.component_mul(&r));
        }
    }
    out
}

/// Roughly parallel fibres running along y through a disc of `spread`
/// around `center`, with a gentle seeded bend.
fn bundle(rng: &mut ChaCha8Rng, center: [f64; 3], spread: f64, count: usize, points: usize, first_id: u64) -> Vec<Streamline> {
    let half = 8.0;
    (0..count)
        .map(|k| {
            let dx = rng.random_range(-spread..=spread);
            let dz = rng.random_range(-spread..=spread);
            let amp = rng.random_range(0.0..0.4);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = (0..points)
                .map(|i| {
                    let t = i as f64 / (points - 1).max(1) as f64;
                    let y = -half + 2.0 * half * t;
                    let bend = amp * (std::f64::consts::PI * t + phase).sin();
                    Vec3::new(center[0] + dx + bend, center[1] + y, center[2] + dz)
                })
                .collect();
            Streamline {
                id: first_id + k as u64,
                points: pts,
            }
        })
        .collect()
}

/// Build a seeded synthetic case with inline regions.
pub fn generate_phantom(spec: &PhantomSpec) -> CaseFile {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target = ellipsoid(&mut rng, spec.target_center, spec.target_radii, spec.target_points);
    let constraint = ellipsoid(&mut rng, spec.constraint_center, spec.constraint_radii, spec.constraint_points);
    let mut regions = vec![
        RegionRef {
            name: Some("target_core".into()),
            role: Role::Target,
            data: RegionData::PointCloud {
                path: None,
                points: Some(target),
            },
        },
        RegionRef {
            name: Some("avoid_core".into()),
            role: Role::Constraint,
            data: RegionData::PointCloud {
                path: None,
                points: Some(constraint),
            },
        },
    ];
    if spec.streamlines {
        let n = spec.streamline_count;
        let p = spec.streamline_points.max(2);
        regions.push(RegionRef {
            name: Some("target_fibres".into()),
            role: Role::Target,
            data: RegionData::Streamlines {
                path: None,
                streamlines: Some(bundle(&mut rng, spec.target_center, 1.2, n, p, 1)),
            },
        });
        regions.push(RegionRef {
            name: Some("avoid_fibres".into()),
            role: Role::Constraint,
            data: RegionData::Streamlines {
                path: None,
                streamlines: Some(bundle(&mut rng, spec.constraint_center, 1.2, n, p, 1001)),
            },
        });
    }
    CaseFile {
        case_id: spec.case_id.clone().unwrap_or_else(|| format!("phantom-{:04}", spec.seed)),
        lead: LeadRef::Builtin(spec.lead.clone()),
        pose: LeadPose::identity(),
        activation_mode: spec.activation_mode,
        regions,
        voxel_size: crate::anatomy::DEFAULT_VOXEL_SIZE,
        roi_radius: crate::anatomy::DEFAULT_ROI_RADIUS,
        conductivity: ConductivityModel::default(),
        field: FieldSolverSpec::default(),
        optimization: spec.optimization.clone(),
        sweep: spec.sweep,
        clinical: spec.clinical.clone(),
    }
}

fn file_name(name: &str, ext: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}.{ext}")
}

/// Write the case's inline regions as text files plus a `case.json` that
/// references them. Returns the case file path.
pub fn write_case_bundle(case: &CaseFile, dir: &Path) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(Stage::Report, e))?;
    let mut out = case.clone();
    for (i, r) in out.regions.iter_mut().enumerate() {
        let name = r.name.clone().unwrap_or_else(|| format!("region{i}"));
        let (fname, text, path) = match &mut r.data {
            RegionData::PointCloud { path, points } => {
                let Some(points) = points.take() else { continue };
                let cloud = PointCloud {
                    name: name.clone(),
                    role: r.role,
                    points,
                    voxel_size: None,
                };
                (file_name(&name, "pts"), write_point_cloud(&cloud), path)
            }
            RegionData::Streamlines { path, streamlines } => {
                let Some(streamlines) = streamlines.take() else { continue };
                let set = StreamlineSet {
                    name: name.clone(),
                    role: r.role,
                    streamlines,
                };
                (file_name(&name, "sl"), write_streamlines(&set), path)
            }
        };
        std::fs::write(dir.join(&fname), text).map_err(|e| io_error(Stage::Report, e))?;
        *path = Some(fname);
    }
    let case_path = dir.join("case.json");
    write_json_atomic(&out, &case_path)?;
    Ok(case_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_inside_the_ellipsoid() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec);
        assert_eq!(a, generate_phantom(&spec));
        assert_ne!(a, generate_phantom(&PhantomSpec { seed: 2, ..spec.clone() }));
        let RegionData::PointCloud { points: Some(pts), .. } = &a.regions[0].data else {
            panic!("target cloud")
        };
        assert_eq!(pts.len(), spec.target_points);
        let c = Vec3::from(spec.target_center);
        let r = Vec3::from(spec.target_radii);
        assert!(pts.iter().all(|p| (p - c).component_div(&r).norm() <= 1.0 + 1e-12));
        assert_eq!(a.regions.len(), 4);
        assert!(spec.issues().is_empty());
        generate_phantom(&spec).validate().unwrap();
    }

    #[test]
    fn spec_limits() {
        let bad = PhantomSpec {
            lead: "nope".into(),
            target_radii: [1.0, 0.0, 1.0],
            target_points: 0,
            constraint_points: MAX_PHANTOM_POINTS + 1,
            streamline_points: 1,
            ..PhantomSpec::default()
        };
        let paths: Vec<String> = bad.issues().into_iter().map(|i| i.path).collect();
        assert_eq!(
            paths,
            vec!["lead", "target_radii", "target_points", "constraint_points", "streamline_points"]
        );
    }

    #[test]
    fn bundle_round_trips_through_files() {
        let case = generate_phantom(&PhantomSpec {
            target_points: 50,
            constraint_points: 50,
            streamline_count: 3,
            ..PhantomSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let path = write_case_bundle(&case, dir.path()).unwrap();
        let loaded = CaseFile::load(&path).unwrap();
        assert_eq!(loaded, case);
    }
}
