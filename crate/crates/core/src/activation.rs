//! Activation by field-norm thresholding, coverage percentages, spill and
//! pulse-width threshold adjustment.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{ActivationMode, DEFAULT_VOXEL_SIZE};
use crate::fieldmodel::{FieldError, FieldSampler};
use crate::grid::Aabb;
use crate::lead::ContactConfiguration;
use crate::Vec3;

/// Node spacing of the spill evaluation grid, mm.
pub const SPILL_GRID_SPACING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("coverage is undefined for the empty region `{0}`")]
    EmptyRegion(String),
    #[error("invalid threshold parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn default_target() -> f64 {
    200.0
}
fn default_constraint() -> f64 {
    100.0
}
fn default_pw() -> f64 {
    60.0
}
fn default_chronaxie() -> f64 {
    100.0
}

/// Activation thresholds, V/m, quoted at `reference_pulse_width`.
///
/// `chronaxie` scales thresholds for other pulse widths. Its default is a
/// placeholder and should be calibrated for the tissue model in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    #[serde(default = "default_target")]
    pub e_th_t: f64,
    #[serde(default = "default_constraint")]
    pub e_th_c: f64,
    /// µs
    #[serde(default = "default_pw")]
    pub pulse_width: f64,
    /// µs
    #[serde(default = "default_pw")]
    pub reference_pulse_width: f64,
    /// µs
    #[serde(default = "default_chronaxie")]
    pub chronaxie: f64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self {
            e_th_t: default_target(),
            e_th_c: default_constraint(),
            pulse_width: default_pw(),
            reference_pulse_width: default_pw(),
            chronaxie: default_chronaxie(),
        }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<(), ActivationError> {
        let check = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ActivationError::Parameter(format!("{name} must be > 0, got {v}")))
            }
        };
        check("e_th_t", self.e_th_t)?;
        check("e_th_c", self.e_th_c)?;
        check("pulse_width", self.pulse_width)?;
        check("reference_pulse_width", self.reference_pulse_width)?;
        if !(self.chronaxie >= 0.0 && self.chronaxie.is_finite()) {
            return Err(ActivationError::Parameter(format!(
                "chronaxie must be >= 0, got {}",
                self.chronaxie
            )));
        }
        Ok(())
    }

    pub fn with_pulse_width(self, pulse_width: f64) -> Self {
        Self { pulse_width, ..self }
    }

    /// Target and constraint thresholds at the configured pulse width.
    pub fn adjusted(&self) -> Result<(f64, f64), ActivationError> {
        self.validate()?;
        Ok((
            scale_threshold(self.e_th_t, self)?,
            scale_threshold(self.e_th_c, self)?,
        ))
    }
}

fn scale_threshold(reference: f64, spec: &ThresholdSpec) -> Result<f64, ActivationError> {
    if !(spec.pulse_width > 0.0) {
        return Err(ActivationError::Parameter(format!(
            "pulse width must be > 0, got {}",
            spec.pulse_width
        )));
    }
    let tau = spec.chronaxie;
    Ok(reference * (1.0 + tau / spec.pulse_width) / (1.0 + tau / spec.reference_pulse_width))
}

/// Strength–duration scaled target threshold for `spec.pulse_width`.
pub fn adjust_threshold(spec: &ThresholdSpec) -> Result<f64, ActivationError> {
    scale_threshold(spec.e_th_t, spec)
}

pub fn activated_mask(norms: &[f64], threshold: f64) -> Vec<bool> {
    norms.iter().map(|&e| e >= threshold).collect()
}

fn percent(hit: usize, total: usize) -> f64 {
    100.0 * hit as f64 / total as f64
}

pub fn coverage_pointwise(mask: &[bool]) -> Result<f64, ActivationError> {
    if mask.is_empty() {
        return Err(ActivationError::EmptyRegion("point set".into()));
    }
    Ok(percent(mask.iter().filter(|&&m| m).count(), mask.len()))
}

/// Percentage of groups with at least one member at or above threshold.
/// `norms` is indexed by the registry indices stored in `groups`.
pub fn coverage_groups(groups: &[Vec<usize>], norms: &[f64], threshold: f64) -> Result<f64, ActivationError> {
    if groups.is_empty() {
        return Err(ActivationError::EmptyRegion("group set".into()));
    }
    let hit = groups
        .iter()
        .filter(|g| g.iter().any(|&i| norms[i] >= threshold))
        .count();
    Ok(percent(hit, groups.len()))
}

/// Percentage of streamlines (given as per-point norms) with at least one
/// activated point.
pub fn coverage_trajectorywise(streamlines: &[Vec<f64>], threshold: f64) -> Result<f64, ActivationError> {
    if streamlines.is_empty() {
        return Err(ActivationError::EmptyRegion("streamline set".into()));
    }
    let hit = streamlines
        .iter()
        .filter(|s| s.iter().any(|&e| e >= threshold))
        .count();
    Ok(percent(hit, streamlines.len()))
}

/// Voxelized target points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetOccupancy {
    voxel_bits: u64,
    cells: HashSet<[i64; 3]>,
}

impl TargetOccupancy {
    pub fn new(points: &[Vec3], voxel: f64) -> Self {
        assert!(voxel > 0.0, "voxel size must be positive");
        Self {
            voxel_bits: voxel.to_bits(),
            cells: points.iter().map(|p| Self::key(p, voxel)).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::new(&[], DEFAULT_VOXEL_SIZE)
    }

    fn key(p: &Vec3, voxel: f64) -> [i64; 3] {
        [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ]
    }

    pub fn voxel(&self) -> f64 {
        f64::from_bits(self.voxel_bits)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.cells.contains(&Self::key(p, self.voxel()))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn lattice(bounds: &Aabb, spacing: f64) -> Vec<Vec3> {
    let lo = (bounds.min / spacing).map(f64::floor);
    let hi = (bounds.max / spacing).map(f64::ceil);
    let n = (hi - lo).map(|v| v as usize + 1);
    let mut out = Vec::with_capacity(n.x * n.y * n.z);
    for k in 0..n.z {
        for j in 0..n.y {
            for i in 0..n.x {
                out.push(Vec3::new(
                    (lo.x + i as f64) * spacing,
                    (lo.y + j as f64) * spacing,
                    (lo.z + k as f64) * spacing,
                ));
            }
        }
    }
    out
}

fn is_activated(
    sampler: &dyn FieldSampler,
    config: &ContactConfiguration,
    lambda: f64,
    threshold: f64,
    p: &Vec3,
) -> Result<bool, FieldError> {
    match sampler.config_norm(config, lambda, p) {
        Ok(e) => Ok(e >= threshold),
        // grounded outside a bounded solver domain
        Err(FieldError::Geometry(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Percentage of activated evaluation-grid nodes outside the target
/// occupancy. The grid has `spacing` and spans twice the VTA bounding box
/// about its centre; nodes sit on world multiples of `spacing`.
pub fn spill(
    sampler: &dyn FieldSampler,
    config: &ContactConfiguration,
    lambda: f64,
    threshold: f64,
    occupancy: &TargetOccupancy,
    spacing: f64,
) -> Result<f64, ActivationError> {
    if !(spacing > 0.0) {
        return Err(ActivationError::Parameter(format!("spill spacing must be > 0, got {spacing}")));
    }
    if !(lambda > 0.0) {
        return Ok(0.0);
    }
    let search = sampler.activation_bounds(config, lambda, threshold)?;
    let probe = lattice(&search, spacing);
    let flags = crate::par::map_collect(&probe, |p| is_activated(sampler, config, lambda, threshold, p));
    let mut active = Vec::new();
    for (p, f) in probe.iter().zip(flags) {
        if f? {
            active.push(*p);
        }
    }
    let Some(vta) = Aabb::around(active) else {
        return Ok(0.0);
    };
    let half = vta.half_extent() * 2.0 + Vec3::repeat(spacing);
    let center = (vta.center() / spacing).map(f64::round) * spacing;
    let eval = lattice(
        &Aabb {
            min: center - half,
            max: center + half,
        },
        spacing,
    );
    let flags = crate::par::map_collect(&eval, |p| {
        is_activated(sampler, config, lambda, threshold, p).map(|a| (a, a && !occupancy.contains(p)))
    });
    let (mut activated, mut outside) = (0usize, 0usize);
    for f in flags {
        let (a, o) = f?;
        activated += a as usize;
        outside += o as usize;
    }
    Ok(if activated == 0 { 0.0 } else { percent(outside, activated) })
}

/// Coverage of one configuration at one amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: ContactConfiguration,
    /// mA
    pub lambda: f64,
    /// Mode whose percentages fill `p_act_t` / `p_act_c`.
    pub mode: ActivationMode,
    pub p_act_t: f64,
    pub p_act_c: f64,
    pub p_act_s: f64,
    /// Point-wise percentages, always present.
    pub point_wise: CoveragePair,
    /// Trajectory-wise percentages when streamline regions are present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_wise: Option<CoveragePair>,
    /// Thresholds actually applied, V/m.
    pub threshold_t: f64,
    pub threshold_c: f64,
    /// Coverage pooled per region category.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<CategoryCoverage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PointCloud,
    StreamlinesPointWise,
    StreamlinesTrajectoryWise,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::PointCloud,
        Category::StreamlinesPointWise,
        Category::StreamlinesTrajectoryWise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::PointCloud => "point_cloud",
            Category::StreamlinesPointWise => "streamlines_point_wise",
            Category::StreamlinesTrajectoryWise => "streamlines_trajectory_wise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryCoverage {
    pub category: Category,
    pub target: Option<f64>,
    pub constraint: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePair {
    pub target: f64,
    /// `None` when there are no constraint regions.
    pub constraint: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldmodel::AnalyticSampler;
    use crate::lead::{synthesize_lead, LeadFamily};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mask_examples() {
        assert_eq!(activated_mask(&[300.0, 180.0, 80.0], 200.0), vec![true, false, false]);
        assert_eq!(activated_mask(&[200.0], 200.0), vec![true]);
        assert!(activated_mask(&[1e-9, 3.0], f64::MIN_POSITIVE).iter().all(|&m| m));
        assert!(activated_mask(&[0.0, 0.0], 1.0).iter().all(|&m| !m));
    }

    #[test]
    fn pointwise_examples() {
        let norms: Vec<f64> = [150.0, 90.0, 40.0].iter().map(|e| e * 2.0).collect();
        let c = coverage_pointwise(&activated_mask(&norms, 200.0)).unwrap();
        assert_relative_eq!(c, 100.0 / 3.0, max_relative = 1e-12);
        assert_eq!(coverage_pointwise(&[true, true]).unwrap(), 100.0);
        assert_eq!(coverage_pointwise(&[false]).unwrap(), 0.0);
        assert!(matches!(coverage_pointwise(&[]), Err(ActivationError::EmptyRegion(_))));
    }

    #[test]
    fn modes_diverge() {
        let mut s = vec![vec![250.0; 10], vec![10.0]];
        let pw: Vec<f64> = s.concat();
        assert_relative_eq!(coverage_pointwise(&activated_mask(&pw, 200.0)).unwrap(), 1000.0 / 11.0, max_relative = 1e-12);
        assert_eq!(coverage_trajectorywise(&s, 200.0).unwrap(), 50.0);
        s[1] = vec![10.0, 201.0, 3.0];
        assert_eq!(coverage_trajectorywise(&s, 200.0).unwrap(), 100.0);
        assert!(coverage_trajectorywise(&[], 200.0).is_err());
        assert!(coverage_groups(&[], &[], 200.0).is_err());
        assert_eq!(coverage_groups(&[vec![0, 1], vec![2]], &[0.0, 300.0, 0.0], 200.0).unwrap(), 50.0);
    }

    #[test]
    fn threshold_adjustment() {
        let spec = ThresholdSpec::default();
        assert_eq!(adjust_threshold(&spec).unwrap(), 200.0);
        let long = spec.with_pulse_width(1e12);
        assert_relative_eq!(adjust_threshold(&long).unwrap(), 200.0 / (1.0 + 100.0 / 60.0), max_relative = 1e-9);
        let flat = ThresholdSpec { chronaxie: 0.0, ..spec.with_pulse_width(90.0) };
        assert_eq!(adjust_threshold(&flat).unwrap(), 200.0);
        let short = spec.with_pulse_width(30.0);
        assert!(adjust_threshold(&short).unwrap() > 200.0);
        assert!(adjust_threshold(&spec.with_pulse_width(0.0)).is_err());
        assert!(adjust_threshold(&spec.with_pulse_width(-5.0)).is_err());
        let (t, c) = short.adjusted().unwrap();
        assert_relative_eq!(t / c, 2.0, max_relative = 1e-12);
    }

    fn monopole() -> (AnalyticSampler, ContactConfiguration) {
        let lead = synthesize_lead("one", LeadFamily::Ring, 1, 0.5, 1.5, 0.65, 1.0);
        let config = lead.configuration(&["1"]).unwrap();
        let id = config.active_ids[0];
        (AnalyticSampler::from_points(&[(id, Vec3::zeros())], 0.1), config)
    }

    fn ball_lattice(radius: f64, h: f64) -> Vec<Vec3> {
        let n = (radius / h).ceil() as i64;
        let mut v = Vec::new();
        for k in -n..=n {
            for j in -n..=n {
                for i in -n..=n {
                    let p = Vec3::new(i as f64, j as f64, k as f64) * h;
                    if p.norm() <= radius {
                        v.push(p);
                    }
                }
            }
        }
        v
    }

    #[test]
    fn spill_of_monopole_over_small_sphere() {
        let (s, config) = monopole();
        let occ = TargetOccupancy::new(&ball_lattice(1.0, 0.25), 0.25);
        let got = spill(&s, &config, 1.0, 200.0, &occ, 0.25).unwrap();
        let r_vta: f64 = 1.995;
        let expected = 100.0 * (1.0 - (1.0 / r_vta).powi(3));
        assert!((got - expected).abs() < 2.5, "{got} vs {expected}");
    }

    #[test]
    fn spill_edge_cases() {
        let (s, config) = monopole();
        assert_eq!(spill(&s, &config, 1.0, 200.0, &TargetOccupancy::empty(), 0.5).unwrap(), 100.0);
        let all = TargetOccupancy::new(&ball_lattice(6.0, 0.5), 0.5);
        assert_eq!(spill(&s, &config, 1.0, 200.0, &all, 0.5).unwrap(), 0.0);
        assert_eq!(spill(&s, &config, 0.0, 200.0, &all, 0.5).unwrap(), 0.0);
        // a node on the source is singular and counts as activated
        assert_eq!(spill(&s, &config, 1e-9, 200.0, &TargetOccupancy::empty(), 0.5).unwrap(), 100.0);
        let off = AnalyticSampler::from_points(&[(config.active_ids[0], Vec3::repeat(0.25))], 0.1);
        assert_eq!(spill(&off, &config, 1e-9, 200.0, &TargetOccupancy::empty(), 0.5).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn coverage_monotone_in_lambda_and_threshold(
            norms in prop::collection::vec(0.0f64..500.0, 1..60),
            cuts in prop::collection::vec(1usize..5, 1..20),
            l1 in 0.0f64..8.0, dl in 0.0f64..4.0,
            t in 1.0f64..400.0, dt in 0.0f64..100.0,
        ) {
            let at = |l: f64| norms.iter().map(|e| e * l).collect::<Vec<_>>();
            let (a, b) = (at(l1), at(l1 + dl));
            prop_assert!(coverage_pointwise(&activated_mask(&b, t)).unwrap() >= coverage_pointwise(&activated_mask(&a, t)).unwrap());
            prop_assert!(coverage_pointwise(&activated_mask(&a, t)).unwrap() >= coverage_pointwise(&activated_mask(&a, t + dt)).unwrap());
            // split the points into consecutive streamlines
            let mut groups = Vec::new();
            let mut start = 0;
            for c in cuts.iter().cycle() {
                if start >= norms.len() { break; }
                let end = (start + c).min(norms.len());
                groups.push((start..end).collect::<Vec<_>>());
                start = end;
            }
            let brute: usize = groups.iter().filter(|g| g.iter().map(|&i| a[i] >= t).fold(false, |x, y| x || y)).count();
            let tw = coverage_groups(&groups, &a, t).unwrap();
            prop_assert_eq!(tw, 100.0 * brute as f64 / groups.len() as f64);
            prop_assert!(coverage_groups(&groups, &b, t).unwrap() >= tw);
            let pw = coverage_pointwise(&activated_mask(&a, t)).unwrap();
            if pw == 100.0 { prop_assert_eq!(tw, 100.0); }
        }
    }
}
