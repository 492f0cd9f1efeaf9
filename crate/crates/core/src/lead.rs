//! Lead geometry, placement in world space and contact-configuration enumeration.
//!
//! Lead-local frame: origin at the distal tip, `+z` along the lead axis
//! towards the proximal (dorsal) end. Row 1 is the most ventral row.
//! Segmented sectors A, B, C sit at 0°, 120° and 240°, numbered clockwise
//! when the lead is viewed from its proximal end looking towards the tip,
//! i.e. at polar angles 0°, -120° and -240° in the right-handed local frame.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum LeadError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("unsupported lead: {0}")]
    UnsupportedLead(String),
    #[error("invalid lead model `{lead}`: {reason}")]
    InvalidModel { lead: String, reason: String },
    #[error("unknown contact label `{label}` on lead `{lead}`")]
    UnknownLabel { lead: String, label: String },
    #[error("unknown contact id {0}")]
    UnknownContact(usize),
    #[error("a contact configuration needs at least one active contact")]
    EmptyConfiguration,
    #[error("lead definition parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    #[serde(rename = "ring")]
    Ring,
    A,
    B,
    C,
}

impl Sector {
    /// Clockwise angle of the sector about the lead axis, in degrees.
    pub fn clockwise_angle_deg(self) -> Option<f64> {
        match self {
            Sector::Ring => None,
            Sector::A => Some(0.0),
            Sector::B => Some(120.0),
            Sector::C => Some(240.0),
        }
    }

    fn next_clockwise(self) -> Option<Sector> {
        match self {
            Sector::Ring => None,
            Sector::A => Some(Sector::B),
            Sector::B => Some(Sector::C),
            Sector::C => Some(Sector::A),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub id: usize,
    pub label: String,
    /// Lead-local centroid, mm.
    pub centroid: Vec3,
    /// Axial level, 1 = most ventral.
    pub row: u32,
    pub sector: Sector,
    /// mm²
    pub surface_area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadFamily {
    /// Rows `[ring, 3 segments, 3 segments, ring]`.
    Directional8,
    /// Ring contacts only, one per row.
    Ring,
    #[serde(other)]
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadModel {
    pub name: String,
    pub family: LeadFamily,
    pub contacts: Vec<Contact>,
    /// Edge-to-edge gap between rows, mm.
    pub row_spacing: f64,
    pub contact_height: f64,
    pub lead_radius: f64,
    /// Angular extent of one segmented contact, degrees.
    #[serde(default = "default_segment_span")]
    pub segment_span_deg: f64,
    /// Optional explicit configuration table (lists of contact labels).
    /// Replaces the family's default enumeration when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configurations: Option<Vec<Vec<String>>>,
}

fn default_segment_span() -> f64 {
    90.0
}

const BUILTIN_LEADS: [(&str, &str); 4] = [
    (
        "abbott_infinity_directional",
        include_str!("../leads/abbott_infinity_directional.json"),
    ),
    (
        "boston_vercise_cartesia_directional",
        include_str!("../leads/boston_vercise_cartesia_directional.json"),
    ),
    (
        "boston_vercise_standard",
        include_str!("../leads/boston_vercise_standard.json"),
    ),
    (
        "medtronic_generic_4ring",
        include_str!("../leads/medtronic_generic_4ring.json"),
    ),
];

/// Names of the lead models shipped with the library.
pub fn builtin_lead_names() -> Vec<&'static str> {
    BUILTIN_LEADS.iter().map(|(n, _)| *n).collect()
}

/// Load one of the shipped lead definitions by name.
pub fn builtin_lead(name: &str) -> Result<LeadModel, LeadError> {
    let (_, doc) = BUILTIN_LEADS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| LeadError::UnsupportedLead(name.to_string()))?;
    LeadModel::from_json(doc)
}

/// Strip a leading "C" prefix used by some clinical records ("C2A" -> "2A").
pub fn normalize_label(label: &str) -> String {
    let trimmed = label.trim();
    match trimmed.strip_prefix(['C', 'c']) {
        Some(rest) if rest.chars().next().is_some_and(|c| c.is_ascii_digit()) => rest.to_string(),
        _ => trimmed.to_string(),
    }
}

impl LeadModel {
    pub fn from_json(doc: &str) -> Result<Self, LeadError> {
        let model: LeadModel =
            serde_json::from_str(doc).map_err(|e| LeadError::Parse(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), LeadError> {
        let invalid = |reason: String| LeadError::InvalidModel {
            lead: self.name.clone(),
            reason,
        };
        if self.contacts.is_empty() {
            return Err(invalid("no contacts".into()));
        }
        let mut labels = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &self.contacts {
            if !labels.insert(c.label.as_str()) {
                return Err(invalid(format!("duplicate label `{}`", c.label)));
            }
            if !ids.insert(c.id) {
                return Err(invalid(format!("duplicate contact id {}", c.id)));
            }
            if c.centroid.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite centroid on `{}`", c.label)));
            }
        }
        for a in &self.contacts {
            for b in &self.contacts {
                if a.row == b.row && (a.centroid.z - b.centroid.z).abs() > 1e-9 {
                    return Err(invalid(format!(
                        "contacts `{}` and `{}` share row {} but differ axially",
                        a.label, b.label, a.row
                    )));
                }
            }
        }
        if self.family == LeadFamily::Directional8 {
            let layout: Vec<Vec<Sector>> = (1..=4)
                .map(|row| {
                    let mut s: Vec<Sector> = self
                        .contacts
                        .iter()
                        .filter(|c| c.row == row)
                        .map(|c| c.sector)
                        .collect();
                    s.sort();
                    s
                })
                .collect();
            let seg = vec![Sector::A, Sector::B, Sector::C];
            let expected = vec![vec![Sector::Ring], seg.clone(), seg, vec![Sector::Ring]];
            if self.contacts.len() != 8 || layout != expected {
                return Err(invalid(
                    "directional_8 leads need rows [ring, A/B/C, A/B/C, ring]".into(),
                ));
            }
        }
        if self.family == LeadFamily::Ring && self.contacts.iter().any(|c| c.sector != Sector::Ring)
        {
            return Err(invalid("ring leads may only carry ring contacts".into()));
        }
        Ok(())
    }

    pub fn contact(&self, id: usize) -> Result<&Contact, LeadError> {
        self.contacts
            .iter()
            .find(|c| c.id == id)
            .ok_or(LeadError::UnknownContact(id))
    }

    pub fn contact_by_label(&self, label: &str) -> Result<&Contact, LeadError> {
        let norm = normalize_label(label);
        self.contacts
            .iter()
            .find(|c| c.label == norm)
            .ok_or_else(|| LeadError::UnknownLabel {
                lead: self.name.clone(),
                label: label.to_string(),
            })
    }

    fn find(&self, row: u32, sector: Sector) -> &Contact {
        self.contacts
            .iter()
            .find(|c| c.row == row && c.sector == sector)
            .expect("validated layout")
    }

    /// Build a configuration from contact labels (normalized on the way in).
    pub fn configuration<S: AsRef<str>>(
        &self,
        labels: &[S],
    ) -> Result<ContactConfiguration, LeadError> {
        let contacts = labels
            .iter()
            .map(|l| self.contact_by_label(l.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        ContactConfiguration::new(contacts)
    }
}

/// Enumerate the admissible monopolar contact configurations of a lead in
/// canonical order (cardinality, then lexicographic label list).
pub fn enumerate_configurations(model: &LeadModel) -> Result<Vec<ContactConfiguration>, LeadError> {
    if model.contacts.is_empty() {
        return Err(LeadError::InvalidModel {
            lead: model.name.clone(),
            reason: "no contacts".into(),
        });
    }
    let mut configs: Vec<ContactConfiguration> = if let Some(table) = &model.configurations {
        table
            .iter()
            .map(|labels| model.configuration(labels))
            .collect::<Result<_, _>>()?
    } else {
        match model.family {
            LeadFamily::Directional8 => directional_table(model)?,
            LeadFamily::Ring => ring_table(model),
            LeadFamily::Unsupported => {
                return Err(LeadError::UnsupportedLead(model.name.clone()));
            }
        }
    };
    configs.sort_by(|a, b| a.canonical_cmp(b));
    configs.dedup_by(|a, b| a.active_ids == b.active_ids);
    Ok(configs)
}

fn ring_table(model: &LeadModel) -> Vec<ContactConfiguration> {
    let mut rows: Vec<&Contact> = model.contacts.iter().collect();
    rows.sort_by_key(|c| c.row);
    let mut out: Vec<ContactConfiguration> = rows
        .iter()
        .map(|c| ContactConfiguration::single(c))
        .collect();
    for pair in rows.windows(2) {
        out.push(ContactConfiguration::from_contacts(&[pair[0], pair[1]]));
    }
    out
}

fn directional_table(model: &LeadModel) -> Result<Vec<ContactConfiguration>, LeadError> {
    model.validate()?;
    let segs = [Sector::A, Sector::B, Sector::C];
    let mut out = Vec::with_capacity(31);
    // individual contacts
    for c in &model.contacts {
        out.push(ContactConfiguration::single(c));
    }
    // adjacent segments in the same row
    for row in [2, 3] {
        for s in segs {
            let next = s.next_clockwise().expect("segment");
            out.push(ContactConfiguration::from_contacts(&[
                model.find(row, s),
                model.find(row, next),
            ]));
        }
    }
    // ring paired with each segment of the adjacent row
    for (ring_row, seg_row) in [(1, 2), (4, 3)] {
        for s in segs {
            out.push(ContactConfiguration::from_contacts(&[
                model.find(ring_row, Sector::Ring),
                model.find(seg_row, s),
            ]));
        }
    }
    // three-segment rings
    for row in [2, 3] {
        let c: Vec<&Contact> = segs.iter().map(|&s| model.find(row, s)).collect();
        out.push(ContactConfiguration::from_contacts(&c));
    }
    // vertically aligned and misaligned segment pairs
    for s2 in segs {
        for s3 in segs {
            out.push(ContactConfiguration::from_contacts(&[
                model.find(2, s2),
                model.find(3, s3),
            ]));
        }
    }
    Ok(out)
}

/// Set of simultaneously active contacts sharing the current uniformly.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactConfiguration {
    /// Sorted, unique.
    pub active_ids: Vec<usize>,
    /// Labels matching `active_ids`, sorted lexicographically.
    pub labels: Vec<String>,
}

impl ContactConfiguration {
    pub fn new(contacts: Vec<&Contact>) -> Result<Self, LeadError> {
        if contacts.is_empty() {
            return Err(LeadError::EmptyConfiguration);
        }
        Ok(Self::from_contacts(&contacts))
    }

    fn single(c: &Contact) -> Self {
        Self::from_contacts(&[c])
    }

    fn from_contacts(contacts: &[&Contact]) -> Self {
        let mut ids: Vec<usize> = contacts.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut labels: Vec<String> = contacts.iter().map(|c| c.label.clone()).collect();
        labels.sort();
        labels.dedup();
        Self {
            active_ids: ids,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.active_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active_ids.is_empty()
    }

    /// Share of the total current carried by each active contact.
    pub fn current_fraction(&self) -> f64 {
        1.0 / self.active_ids.len() as f64
    }

    pub fn canonical_label(&self) -> String {
        self.labels.join("+")
    }

    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| self.labels.cmp(&other.labels))
    }
}

impl fmt::Display for ContactConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_label())
    }
}

/// Rigid placement of a lead in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadPose {
    /// Row-major 3x3 rotation taking lead-local axes to world axes.
    pub rotation: [[f64; 3]; 3],
    /// World position of the lead tip, mm.
    pub translation: [f64; 3],
    /// Extra rotation about the lead axis, degrees, applied before `rotation`.
    #[serde(default)]
    pub orientation_angle: f64,
}

impl Default for LeadPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl LeadPose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            orientation_angle: 0.0,
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3, orientation_angle: f64) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        Self {
            rotation: r,
            translation: [translation.x, translation.y, translation.z],
            orientation_angle,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<(), LeadError> {
        let r = self.rotation_matrix();
        if r.iter().any(|v| !v.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
            || !self.orientation_angle.is_finite()
        {
            return Err(LeadError::InvalidPose("non-finite entries".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(LeadError::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(LeadError::InvalidPose("rotation has determinant -1".into()));
        }
        Ok(())
    }

    /// Full local-to-world rotation including the axial orientation angle.
    pub fn effective_rotation(&self) -> Matrix3<f64> {
        let spin = Rotation3::from_axis_angle(&Vector3::z_axis(), self.orientation_angle.to_radians());
        self.rotation_matrix() * spin.matrix()
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.effective_rotation() * local + self.translation_vec()
    }

    /// World direction of the lead axis (tip towards proximal end).
    pub fn axis(&self) -> Vec3 {
        self.effective_rotation() * Vector3::z()
    }

    pub fn tip(&self) -> Vec3 {
        self.translation_vec()
    }
}

/// World-space centroids of every contact, in model order.
pub fn place_lead(model: &LeadModel, pose: &LeadPose) -> Result<Vec<Vec3>, LeadError> {
    pose.validate()?;
    let rot = pose.effective_rotation();
    let t = pose.translation_vec();
    Ok(model.contacts.iter().map(|c| rot * c.centroid + t).collect())
}

/// Outward unit normal of a segmented contact in world space; `None` for rings.
pub fn segment_normal(contact: &Contact, pose: &LeadPose) -> Option<Vec3> {
    let angle = contact.sector.clockwise_angle_deg()?;
    let phi = -angle.to_radians();
    Some(pose.effective_rotation() * Vector3::new(phi.cos(), phi.sin(), 0.0))
}

/// Build an evenly spaced lead definition. Used to generate the shipped
/// lead files and for tests.
pub fn synthesize_lead(
    name: &str,
    family: LeadFamily,
    n_rows: u32,
    row_spacing: f64,
    contact_height: f64,
    lead_radius: f64,
    tip_offset: f64,
) -> LeadModel {
    let span = default_segment_span();
    let ring_area = 2.0 * std::f64::consts::PI * lead_radius * contact_height;
    let seg_area = ring_area * span / 360.0;
    let mut contacts = Vec::new();
    for row in 1..=n_rows {
        let z = tip_offset + contact_height / 2.0 + (row - 1) as f64 * (contact_height + row_spacing);
        let segmented = family == LeadFamily::Directional8 && (row == 2 || row == 3);
        if segmented {
            for sector in [Sector::A, Sector::B, Sector::C] {
                let phi = -sector.clockwise_angle_deg().unwrap().to_radians();
                contacts.push(Contact {
                    id: contacts.len(),
                    label: format!("{row}{sector:?}"),
                    centroid: Vector3::new(lead_radius * phi.cos(), lead_radius * phi.sin(), z),
                    row,
                    sector,
                    surface_area: seg_area,
                });
            }
        } else {
            contacts.push(Contact {
                id: contacts.len(),
                label: row.to_string(),
                centroid: Vector3::new(0.0, 0.0, z),
                row,
                sector: Sector::Ring,
                surface_area: ring_area,
            });
        }
    }
    LeadModel {
        name: name.to_string(),
        family,
        contacts,
        row_spacing,
        contact_height,
        lead_radius,
        segment_span_deg: span,
        configurations: None,
    }
}
