//! Target and constraint geometry: point clouds, streamline sets, voxel
//! filtering, ROI cropping, the shared sample-point registry, and
//! per-configuration trajectory reduction.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::grid::{Grid3, OutOfBounds};
use crate::fieldmodel::{FieldError, UnitFieldMatrix};
use crate::lead::ContactConfiguration;
use crate::{sha256_hex, Vec3};

/// Default voxel-filter edge length, mm.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.9;
/// Default streamline ROI radius around the lead tip, mm.
pub const DEFAULT_ROI_RADIUS: f64 = 15.0;

#[derive(Debug, Error)]
pub enum AnatomyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid region `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Constraint,
}

impl Role {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(Role::Target),
            "constraint" => Some(Role::Constraint),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Constraint => "constraint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    #[default]
    PointWise,
    TrajectoryWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub name: String,
    pub role: Role,
    pub points: Vec<Vec3>,
    /// Voxel size the cloud was filtered at, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub id: u64,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamlineSet {
    pub name: String,
    pub role: Role,
    pub streamlines: Vec<Streamline>,
}

impl StreamlineSet {
    pub fn validate(&self) -> Result<(), AnatomyError> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.streamlines {
            if !seen.insert(s.id) {
                return Err(AnatomyError::Invalid {
                    name: self.name.clone(),
                    message: format!("duplicate streamline id {}", s.id),
                });
            }
            if s.points.len() < 2 {
                return Err(AnatomyError::Invalid {
                    name: self.name.clone(),
                    message: format!("streamline {} has fewer than 2 points", s.id),
                });
            }
            if s.points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(AnatomyError::Invalid {
                    name: self.name.clone(),
                    message: format!("streamline {} has non-finite coordinates", s.id),
                });
            }
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.streamlines.iter().map(|s| s.points.len()).sum()
    }
}

fn voxel_key(p: &Vec3, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Keep one representative point per occupied voxel of edge `voxel_size`.
/// The representative is the point that comes first in x-fastest scan
/// order (smallest z, then y, then x; ties resolved by input order) and the
/// output lists voxels in the same scan order.
pub fn voxel_filter(points: &[Vec3], voxel_size: f64) -> Vec<Vec3> {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let scan = |p: &Vec3| [p.z, p.y, p.x];
    let mut best: BTreeMap<[i64; 3], Vec3> = BTreeMap::new();
    for p in points {
        let k = voxel_key(p, voxel_size);
        let key = [k[2], k[1], k[0]];
        best.entry(key)
            .and_modify(|cur| {
                if scan(p).partial_cmp(&scan(cur)) == Some(std::cmp::Ordering::Less) {
                    *cur = *p;
                }
            })
            .or_insert(*p);
    }
    best.into_values().collect()
}

/// Linear index `ix + nx·(iy + ny·iz)` of the grid cell holding `point`.
pub fn coord_to_index(point: &Vec3, grid: &Grid3) -> Result<usize, OutOfBounds> {
    grid.index_of(point)
}

/// Keep only the points of each streamline inside the ball; streamlines
/// left empty are dropped. Ids and point order are preserved.
pub fn crop_roi(streamlines: &StreamlineSet, center: &Vec3, radius: f64) -> StreamlineSet {
    let r2 = radius * radius;
    StreamlineSet {
        name: streamlines.name.clone(),
        role: streamlines.role,
        streamlines: streamlines
            .streamlines
            .iter()
            .filter_map(|s| {
                let points: Vec<Vec3> = s
                    .points
                    .iter()
                    .filter(|p| (*p - center).norm_squared() <= r2)
                    .copied()
                    .collect();
                (!points.is_empty()).then_some(Streamline { id: s.id, points })
            })
            .collect(),
    }
}

/// Drop points closer than `radius` to any of `sources`.
pub fn exclude_near(points: &[Vec3], sources: &[Vec3], radius: f64) -> (Vec<Vec3>, usize) {
    let kept: Vec<Vec3> = points
        .iter()
        .filter(|p| sources.iter().all(|s| (*p - s).norm() >= radius))
        .copied()
        .collect();
    let dropped = points.len() - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub region: usize,
    pub role: Role,
}

/// Union of every retained sample point; each distinct coordinate appears once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleRegistry {
    points: Vec<Vec3>,
    tags: Vec<Vec<Provenance>>,
    lookup: HashMap<[u64; 3], usize>,
}

impl SampleRegistry {
    pub fn insert(&mut self, p: Vec3, tag: Provenance) -> usize {
        let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        let idx = *self.lookup.entry(key).or_insert_with(|| {
            self.points.push(p);
            self.tags.push(Vec::new());
            self.points.len() - 1
        });
        if !self.tags[idx].contains(&tag) {
            self.tags[idx].push(tag);
        }
        idx
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn tags(&self, idx: usize) -> &[Provenance] {
        &self.tags[idx]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, p: &Vec3) -> Option<usize> {
        self.lookup
            .get(&[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .copied()
    }

    /// SHA-256 over the little-endian coordinates in registry order.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.points.len() * 24);
        for p in &self.points {
            for v in p.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    PointCloud,
    Streamlines,
}

/// A prepared region: its members as registry indices, grouped per
/// streamline (one group per point for point clouds).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub role: Role,
    pub kind: RegionKind,
    /// `(streamline id or point ordinal, registry indices in path order)`.
    pub groups: Vec<(u64, Vec<usize>)>,
}

impl Region {
    pub fn point_count(&self) -> usize {
        self.groups.iter().map(|(_, g)| g.len()).sum()
    }

    /// Activation units: single points, or whole streamlines in
    /// trajectory-wise mode.
    pub fn units(&self, mode: ActivationMode) -> Vec<Vec<usize>> {
        match (self.kind, mode) {
            (RegionKind::Streamlines, ActivationMode::TrajectoryWise) => {
                self.groups.iter().map(|(_, g)| g.clone()).collect()
            }
            _ => self
                .groups
                .iter()
                .flat_map(|(_, g)| g.iter().map(|&i| vec![i]))
                .collect(),
        }
    }
}

/// Targets and constraints over one shared sample registry.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub regions: Vec<Region>,
    pub registry: SampleRegistry,
    pub mode: ActivationMode,
}

impl RegionSet {
    pub fn build(
        clouds: &[PointCloud],
        streamlines: &[StreamlineSet],
        mode: ActivationMode,
    ) -> Self {
        let mut registry = SampleRegistry::default();
        let mut regions = Vec::new();
        for cloud in clouds {
            let region = regions.len();
            let tag = Provenance {
                region,
                role: cloud.role,
            };
            let groups = cloud
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| (i as u64, vec![registry.insert(*p, tag)]))
                .collect();
            regions.push(Region {
                name: cloud.name.clone(),
                role: cloud.role,
                kind: RegionKind::PointCloud,
                groups,
            });
        }
        for set in streamlines {
            let region = regions.len();
            let tag = Provenance {
                region,
                role: set.role,
            };
            let groups = set
                .streamlines
                .iter()
                .filter(|s| !s.points.is_empty())
                .map(|s| {
                    (
                        s.id,
                        s.points.iter().map(|p| registry.insert(*p, tag)).collect(),
                    )
                })
                .collect();
            regions.push(Region {
                name: set.name.clone(),
                role: set.role,
                kind: RegionKind::Streamlines,
                groups,
            });
        }
        Self {
            regions,
            registry,
            mode,
        }
    }

    pub fn regions_with(&self, role: Role) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.role == role)
    }

    pub fn units(&self, role: Role, mode: ActivationMode) -> Vec<Vec<usize>> {
        self.regions_with(role).flat_map(|r| r.units(mode)).collect()
    }

    pub fn has_streamlines(&self) -> bool {
        self.regions.iter().any(|r| r.kind == RegionKind::Streamlines)
    }

    /// Every registry point that belongs to a target region.
    pub fn target_points(&self) -> Vec<Vec3> {
        let mut idx: Vec<usize> = self
            .regions_with(Role::Target)
            .flat_map(|r| r.groups.iter().flat_map(|(_, g)| g.iter().copied()))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx.into_iter().map(|i| self.registry.points()[i]).collect()
    }
}

/// Registry index of the group member with the largest norm (ties go to
/// the lowest registry index); `None` for empty groups.
pub fn reduce_group(members: &[usize], norms: &[f64]) -> Option<usize> {
    members.iter().copied().fold(None, |best, i| match best {
        None => Some(i),
        Some(b) => {
            if norms[i] > norms[b] || (norms[i] == norms[b] && i < b) {
                Some(i)
            } else {
                Some(b)
            }
        }
    })
}

/// Representative point of one streamline for a given configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedPoint {
    pub streamline_id: u64,
    pub registry_index: usize,
    /// Configuration field norm at unit current, V/m per mA.
    pub unit_norm: f64,
}

/// Reduce each streamline of a region to the point with the largest unit
/// field norm under `config`. Streamlines without registry points are
/// dropped with a warning.
pub fn trajectory_reduce(
    region: &Region,
    config: &ContactConfiguration,
    unit_fields: &UnitFieldMatrix,
) -> Result<Vec<ReducedPoint>, AnatomyError> {
    let norms = unit_fields.config_unit_norms(config)?;
    Ok(region
        .groups
        .iter()
        .filter_map(|(id, members)| match reduce_group(members, &norms) {
            Some(i) => Some(ReducedPoint {
                streamline_id: *id,
                registry_index: i,
                unit_norm: norms[i],
            }),
            None => {
                log::warn!("streamline {id} of `{}` has no registry points; dropped", region.name);
                None
            }
        })
        .collect())
}

fn parse_header(line: &str) -> (Option<String>, Option<Role>) {
    let mut name = None;
    let mut role = None;
    for tok in line.trim_start_matches('#').split_whitespace() {
        if let Some(v) = tok.strip_prefix("name=") {
            name = Some(v.to_string());
        } else if let Some(v) = tok.strip_prefix("role=") {
            role = Role::parse(v);
        }
    }
    (name, role)
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec3, AnatomyError> {
    let v = fields
        .iter()
        .map(|f| f.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AnatomyError::Parse {
            line,
            message: e.to_string(),
        })?;
    let p = Vec3::new(v[0], v[1], v[2]);
    if p.iter().any(|x| !x.is_finite()) {
        return Err(AnatomyError::Parse {
            line,
            message: "non-finite coordinate".into(),
        });
    }
    Ok(p)
}

/// Parse a point-cloud document: `# point_cloud name=<n> role=<target|constraint>`
/// followed by one whitespace-delimited `x y z` triple (mm) per line.
pub fn parse_point_cloud(text: &str) -> Result<PointCloud, AnatomyError> {
    let mut name = None;
    let mut role = None;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if points.is_empty() && name.is_none() {
                (name, role) = parse_header(line);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(AnatomyError::Parse {
                line: i + 1,
                message: format!("expected `x y z`, found {} fields", fields.len()),
            });
        }
        points.push(parse_floats(&fields, i + 1)?);
    }
    Ok(PointCloud {
        name: name.ok_or(AnatomyError::Parse {
            line: 1,
            message: "header must carry name=<region name>".into(),
        })?,
        role: role.ok_or(AnatomyError::Parse {
            line: 1,
            message: "header must carry role=target or role=constraint".into(),
        })?,
        points,
        voxel_size: None,
    })
}

pub fn write_point_cloud(cloud: &PointCloud) -> String {
    let mut out = format!("# point_cloud name={} role={}\n", cloud.name, cloud.role.as_str());
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

/// Parse a streamline document: header `# streamlines name=<n> role=<r>`
/// then `streamline_id x y z` records, each streamline's records
/// contiguous and in path order.
pub fn parse_streamlines(text: &str) -> Result<StreamlineSet, AnatomyError> {
    let mut name = None;
    let mut role = None;
    let mut streamlines: Vec<Streamline> = Vec::new();
    let mut finished = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if streamlines.is_empty() && name.is_none() {
                (name, role) = parse_header(line);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(AnatomyError::Parse {
                line: i + 1,
                message: format!("expected `id x y z`, found {} fields", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| AnatomyError::Parse {
            line: i + 1,
            message: format!("invalid streamline id `{}`", fields[0]),
        })?;
        let p = parse_floats(&fields[1..], i + 1)?;
        match streamlines.last_mut() {
            Some(s) if s.id == id => s.points.push(p),
            _ => {
                if let Some(prev) = streamlines.last() {
                    finished.insert(prev.id);
                }
                if finished.contains(&id) {
                    return Err(AnatomyError::Parse {
                        line: i + 1,
                        message: format!("records of streamline {id} are not contiguous"),
                    });
                }
                streamlines.push(Streamline {
                    id,
                    points: vec![p],
                });
            }
        }
    }
    let set = StreamlineSet {
        name: name.ok_or(AnatomyError::Parse {
            line: 1,
            message: "header must carry name=<region name>".into(),
        })?,
        role: role.ok_or(AnatomyError::Parse {
            line: 1,
            message: "header must carry role=target or role=constraint".into(),
        })?,
        streamlines,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_streamlines(set: &StreamlineSet) -> String {
    let mut out = format!("# streamlines name={} role={}\n", set.name, set.role.as_str());
    for s in &set.streamlines {
        for p in &s.points {
            let _ = writeln!(out, "{} {} {} {}", s.id, p.x, p.y, p.z);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldmodel::{AnalyticSampler, FieldHeader, UNITS};
    use crate::lead::{synthesize_lead, LeadFamily};
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn voxel_filter_floor_indexing() {
        let out = voxel_filter(&[v(0.0, 0.0, 0.0), v(0.5, 0.0, 0.0), v(1.0, 0.0, 0.0)], 0.9);
        assert_eq!(out, vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn voxel_filter_distinct_voxels_is_noop() {
        let pts = vec![v(5.0, 0.0, 0.0), v(0.0, 3.0, 0.0), v(-2.0, 0.1, 7.0)];
        let mut out = voxel_filter(&pts, 0.9);
        let mut input = pts.clone();
        let key = |p: &Vec3| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        out.sort_by_key(key);
        input.sort_by_key(key);
        assert_eq!(out, input);
    }

    #[test]
    fn voxel_filter_total_collapse_and_empty() {
        let pts = vec![v(1.2, -3.4, 5.6); 1000];
        assert_eq!(voxel_filter(&pts, 0.9), vec![v(1.2, -3.4, 5.6)]);
        assert!(voxel_filter(&[], 0.9).is_empty());
    }

    #[test]
    fn voxel_filter_picks_scan_order_representative() {
        // same voxel; the point with the smaller z wins regardless of input order
        let a = v(0.8, 0.1, 0.1);
        let b = v(0.1, 0.1, 0.2);
        assert_eq!(voxel_filter(&[b, a], 0.9), vec![a]);
        assert_eq!(voxel_filter(&[a, b], 0.9), vec![a]);
    }

    #[test]
    fn coord_to_index_examples() {
        let g = Grid3::new([0.0; 3], 1.0, [10, 10, 10]);
        assert_eq!(coord_to_index(&v(0.0, 0.0, 0.0), &g).unwrap(), 0);
        assert_eq!(coord_to_index(&v(1.0, 0.0, 0.0), &g).unwrap(), 1);
        assert_eq!(coord_to_index(&v(0.0, 2.0, 1.0), &g).unwrap(), 120);
        assert!(coord_to_index(&v(0.0, 0.0, 11.0), &g).is_err());
    }

    fn set(streamlines: Vec<(u64, Vec<Vec3>)>) -> StreamlineSet {
        StreamlineSet {
            name: "fibres".into(),
            role: Role::Target,
            streamlines: streamlines
                .into_iter()
                .map(|(id, points)| Streamline { id, points })
                .collect(),
        }
    }

    #[test]
    fn crop_roi_cases() {
        let inside = set(vec![(1, vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)])]);
        assert_eq!(crop_roi(&inside, &Vec3::zeros(), 5.0), inside);

        let two = set(vec![
            (1, vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]),
            (2, vec![v(20.0, 0.0, 0.0), v(21.0, 0.0, 0.0)]),
        ]);
        assert_eq!(crop_roi(&two, &Vec3::zeros(), 5.0).streamlines.len(), 1);

        let crossing = set(vec![(
            7,
            vec![v(-6.0, 0.0, 0.0), v(-4.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(4.9, 0.0, 0.0), v(5.1, 0.0, 0.0)],
        )]);
        let out = crop_roi(&crossing, &Vec3::zeros(), 5.0);
        assert_eq!(out.streamlines[0].id, 7);
        assert_eq!(
            out.streamlines[0].points,
            vec![v(-4.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(4.9, 0.0, 0.0)]
        );
    }

    #[test]
    fn registry_deduplicates_and_tags() {
        let cloud = PointCloud {
            name: "motor".into(),
            role: Role::Target,
            points: vec![v(1.0, 2.0, 3.0), v(4.0, 5.0, 6.0)],
            voxel_size: None,
        };
        let fib = set(vec![(9, vec![v(4.0, 5.0, 6.0), v(7.0, 8.0, 9.0)])]);
        let rs = RegionSet::build(&[cloud], &[fib], ActivationMode::TrajectoryWise);
        assert_eq!(rs.registry.len(), 3);
        assert_eq!(rs.registry.tags(1).len(), 2);
        assert_eq!(rs.registry.index_of(&v(7.0, 8.0, 9.0)), Some(2));
        assert_eq!(rs.units(Role::Target, ActivationMode::TrajectoryWise), vec![vec![0], vec![1], vec![1, 2]]);
        assert_eq!(rs.units(Role::Target, ActivationMode::PointWise).len(), 4);
        assert_eq!(rs.registry.hash(), rs.clone().registry.hash());
    }

    fn matrix_with_norms(norms: &[f64]) -> UnitFieldMatrix {
        let header = FieldHeader {
            lead: "t".into(),
            pose_hash: "p".into(),
            backend: "test".into(),
            registry_hash: "r".into(),
            units: UNITS.into(),
        };
        let col = norms.iter().map(|&n| [n, 0.0, 0.0]).collect();
        UnitFieldMatrix::new(header, vec![0], norms.len(), vec![col]).unwrap()
    }

    fn one_contact_config() -> ContactConfiguration {
        let lead = synthesize_lead("one", LeadFamily::Ring, 1, 0.5, 1.5, 0.65, 1.0);
        lead.configuration(&["1"]).unwrap()
    }

    fn region(groups: Vec<(u64, Vec<usize>)>) -> Region {
        Region {
            name: "fibres".into(),
            role: Role::Target,
            kind: RegionKind::Streamlines,
            groups,
        }
    }

    #[test]
    fn trajectory_reduce_argmax_and_ties() {
        let m = matrix_with_norms(&[10.0, 50.0, 30.0, 5.0, 5.0]);
        let r = region(vec![(1, vec![0, 1, 2]), (2, vec![4, 3]), (3, vec![])]);
        let out = trajectory_reduce(&r, &one_contact_config(), &m).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].streamline_id, out[0].registry_index, out[0].unit_norm), (1, 1, 50.0));
        assert_eq!(out[1].registry_index, 3);
    }

    #[test]
    fn reduction_depends_on_configuration() {
        // two sources at either end of a straight streamline
        let lead = synthesize_lead("pair", LeadFamily::Ring, 2, 0.5, 1.5, 0.65, 1.0);
        let sampler = AnalyticSampler::from_points(&[(0, v(-5.0, 0.0, 0.0)), (1, v(5.0, 0.0, 0.0))], 0.1);
        let fib = set(vec![(1, (0..9).map(|i| v(-4.0 + i as f64, 1.0, 0.0)).collect())]);
        let rs = RegionSet::build(&[], &[fib], ActivationMode::TrajectoryWise);
        let header = FieldHeader {
            lead: "pair".into(),
            pose_hash: "p".into(),
            backend: "analytic_point_source".into(),
            registry_hash: rs.registry.hash(),
            units: UNITS.into(),
        };
        let m = UnitFieldMatrix::from_sampler(&sampler, rs.registry.points(), header).unwrap();
        let near_first = trajectory_reduce(&rs.regions[0], &lead.configuration(&["1"]).unwrap(), &m).unwrap();
        let near_second = trajectory_reduce(&rs.regions[0], &lead.configuration(&["2"]).unwrap(), &m).unwrap();
        assert_eq!(near_first[0].registry_index, 0);
        assert_eq!(near_second[0].registry_index, 8);
    }

    #[test]
    fn text_formats_parse() {
        let cloud = parse_point_cloud("# point_cloud name=STN_motor role=target\n1 2 3\n\n-0.5 1e-3 7\n").unwrap();
        assert_eq!(cloud.name, "STN_motor");
        assert_eq!(cloud.points, vec![v(1.0, 2.0, 3.0), v(-0.5, 1e-3, 7.0)]);
        assert_eq!(parse_point_cloud(&write_point_cloud(&cloud)).unwrap(), cloud);
        assert!(matches!(
            parse_point_cloud("# point_cloud name=a role=target\n1 2\n"),
            Err(AnatomyError::Parse { line: 2, .. })
        ));
        assert!(parse_point_cloud("1 2 3\n").is_err());
        assert!(parse_point_cloud("# point_cloud name=a role=target\n1 nan 2\n").is_err());

        let s = parse_streamlines("# streamlines name=hdp role=constraint\n4 0 0 0\n4 0 0 1\n2 1 1 1\n2 1 1 2\n").unwrap();
        assert_eq!(s.role, Role::Constraint);
        assert_eq!(s.streamlines.iter().map(|x| x.id).collect::<Vec<_>>(), vec![4, 2]);
        assert_eq!(parse_streamlines(&write_streamlines(&s)).unwrap(), s);
        assert!(parse_streamlines("# streamlines name=a role=target\n1 0 0 0\n2 0 0 0\n2 0 0 1\n1 0 0 1\n").is_err());
        assert!(parse_streamlines("# streamlines name=a role=target\n1 0 0 0\n").is_err());
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec(prop::array::uniform3(-10.0f64..10.0).prop_map(Vec3::from), 0..200)
    }

    proptest! {
        #[test]
        fn voxel_filter_is_idempotent_and_shrinking(pts in cloud_strategy(), voxel in 0.1f64..3.0) {
            let once = voxel_filter(&pts, voxel);
            prop_assert!(once.len() <= pts.len());
            prop_assert_eq!(voxel_filter(&once, voxel), once.clone());
            let keys: std::collections::BTreeSet<_> = pts.iter().map(|p| voxel_key(p, voxel)).collect();
            prop_assert_eq!(keys.len(), once.len());
            prop_assert_eq!(once.len() == pts.len(), keys.len() == pts.len());
        }

        #[test]
        fn crop_never_adds_points(pts in cloud_strategy(), radius in 0.1f64..15.0) {
            prop_assume!(pts.len() >= 2);
            let s = set(vec![(1, pts.clone())]);
            let out = crop_roi(&s, &Vec3::zeros(), radius);
            prop_assert!(out.point_count() <= s.point_count());
        }
    }
}
