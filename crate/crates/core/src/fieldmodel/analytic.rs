//! Monopole solution of the quasi-static volume conductor equation in an
//! infinite homogeneous medium.

use std::f64::consts::PI;

use super::{FieldError, FieldSampler};
use crate::grid::Aabb;
use crate::lead::{place_lead, segment_normal, ContactConfiguration, LeadModel, LeadPose};
use crate::Vec3;

/// Queries closer than this to a source are rejected.
pub const SINGULARITY_RADIUS_MM: f64 = 0.1;

const UNIT_CURRENT_A: f64 = 1e-3;

/// Field of a 1 mA point source at `centroid` (mm) in a medium of
/// conductivity `sigma` (S/m), evaluated at `query` (mm). V/m per mA.
pub fn unit_field_analytic(centroid: &Vec3, query: &Vec3, sigma: f64) -> Result<Vec3, FieldError> {
    if !(sigma > 0.0) {
        return Err(FieldError::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let d = query - centroid;
    let r_mm = d.norm();
    if !(r_mm >= SINGULARITY_RADIUS_MM) {
        return Err(FieldError::Singular {
            contact: usize::MAX,
            distance: r_mm,
            radius: SINGULARITY_RADIUS_MM,
        });
    }
    let r = r_mm * 1e-3;
    let magnitude = UNIT_CURRENT_A / (4.0 * PI * sigma * r * r);
    Ok(d * (magnitude / r_mm))
}

#[derive(Debug, Clone)]
struct Source {
    id: usize,
    position: Vec3,
    normal: Option<Vec3>,
}

/// Point-source sampler for a placed lead. Segmented contacts sit at their
/// radially offset centroid; with `angular_weighting` their emission is
/// additionally scaled by `(1 + cos θ) / 2` about the outward normal.
#[derive(Debug, Clone)]
pub struct AnalyticSampler {
    sources: Vec<Source>,
    sigma: f64,
    angular_weighting: bool,
}

impl AnalyticSampler {
    pub fn new(
        lead: &LeadModel,
        pose: &LeadPose,
        sigma: f64,
        angular_weighting: bool,
    ) -> Result<Self, FieldError> {
        if !(sigma > 0.0) {
            return Err(FieldError::Parameter(format!("sigma must be > 0, got {sigma}")));
        }
        let world = place_lead(lead, pose).map_err(|e| FieldError::Geometry(e.to_string()))?;
        let sources = lead
            .contacts
            .iter()
            .zip(world)
            .map(|(c, position)| Source {
                id: c.id,
                position,
                normal: segment_normal(c, pose),
            })
            .collect();
        Ok(Self {
            sources,
            sigma,
            angular_weighting,
        })
    }

    /// Sampler over explicit point sources, `(id, world position)`.
    pub fn from_points(points: &[(usize, Vec3)], sigma: f64) -> Self {
        Self {
            sources: points
                .iter()
                .map(|&(id, position)| Source {
                    id,
                    position,
                    normal: None,
                })
                .collect(),
            sigma,
            angular_weighting: false,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn source_position(&self, contact: usize) -> Option<Vec3> {
        self.sources.iter().find(|s| s.id == contact).map(|s| s.position)
    }

    fn source(&self, contact: usize) -> Result<&Source, FieldError> {
        self.sources
            .iter()
            .find(|s| s.id == contact)
            .ok_or(FieldError::UnknownContact(contact))
    }
}

impl FieldSampler for AnalyticSampler {
    fn contact_ids(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.id).collect()
    }

    fn unit_field(&self, contact: usize, point: &Vec3) -> Result<Vec3, FieldError> {
        let src = self.source(contact)?;
        let e = unit_field_analytic(&src.position, point, self.sigma).map_err(|e| match e {
            FieldError::Singular {
                distance, radius, ..
            } => FieldError::Singular {
                contact,
                distance,
                radius,
            },
            other => other,
        })?;
        match (self.angular_weighting, src.normal) {
            (true, Some(n)) => {
                let dir = (point - src.position).normalize();
                Ok(e * ((1.0 + dir.dot(&n)) / 2.0))
            }
            _ => Ok(e),
        }
    }

    fn activation_bounds(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        threshold: f64,
    ) -> Result<Aabb, FieldError> {
        // |Σ (λ/n) E_k| ≤ λ max_k |E_k|, so an activated point lies within the
        // single-source activation radius at full λ of some active contact.
        let positions = config
            .active_ids
            .iter()
            .map(|&id| self.source(id).map(|s| s.position))
            .collect::<Result<Vec<_>, _>>()?;
        let radius_m = (lambda.max(0.0) * UNIT_CURRENT_A / (4.0 * PI * self.sigma * threshold)).sqrt();
        let bounds = Aabb::around(positions).expect("non-empty configuration");
        Ok(bounds.padded(radius_m * 1e3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lead::builtin_lead;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn three_millimetres_in_point_one_siemens() {
        let e = unit_field_analytic(&Vec3::zeros(), &Vec3::new(3.0, 0.0, 0.0), 0.1).unwrap();
        let closed_form = 1e-3 / (4.0 * PI * 0.1 * (3e-3f64).powi(2));
        assert_relative_eq!(e.norm(), closed_form, max_relative = 1e-12);
        assert_relative_eq!(e.norm(), 88.42, max_relative = 1e-3);
        assert!(e.x > 0.0, "field points away from the source");
    }

    #[test]
    fn inverse_square() {
        let near = unit_field_analytic(&Vec3::zeros(), &Vec3::new(0.0, 2.0, 0.0), 0.1).unwrap();
        let far = unit_field_analytic(&Vec3::zeros(), &Vec3::new(0.0, 4.0, 0.0), 0.1).unwrap();
        assert_relative_eq!(near.norm() / far.norm(), 4.0, max_relative = 1e-12);
    }

    #[test]
    fn two_hundred_volt_isocontour_radius() {
        let r = (1e-3 / (4.0 * PI * 0.1 * 200.0)).sqrt() * 1e3;
        assert_relative_eq!(r, 1.995, max_relative = 1e-3);
        let e = unit_field_analytic(&Vec3::zeros(), &Vec3::new(0.0, 0.0, r), 0.1).unwrap();
        assert_relative_eq!(e.norm(), 200.0, max_relative = 1e-12);
    }

    #[test]
    fn singular_and_invalid_parameters() {
        let c = Vec3::new(1.0, 1.0, 1.0);
        assert!(matches!(
            unit_field_analytic(&c, &(c + Vec3::new(0.05, 0.0, 0.0)), 0.1),
            Err(FieldError::Singular { .. })
        ));
        assert!(unit_field_analytic(&c, &Vec3::zeros(), 0.0).is_err());
    }

    #[test]
    fn sampler_reports_contact_on_singularity() {
        let lead = builtin_lead("abbott_infinity_directional").unwrap();
        let s = AnalyticSampler::new(&lead, &LeadPose::identity(), 0.1, false).unwrap();
        let at = lead.contacts[3].centroid;
        match s.unit_field(3, &at) {
            Err(FieldError::Singular { contact, .. }) => assert_eq!(contact, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(s.unit_field(42, &at), Err(FieldError::UnknownContact(42))));
    }

    #[test]
    fn angular_weighting_favours_the_facing_side() {
        let lead = builtin_lead("abbott_infinity_directional").unwrap();
        let s = AnalyticSampler::new(&lead, &LeadPose::identity(), 0.1, true).unwrap();
        let a = lead.contact_by_label("2A").unwrap();
        let front = a.centroid + Vec3::new(2.0, 0.0, 0.0);
        let back = a.centroid - Vec3::new(2.0, 0.0, 0.0);
        assert!(s.unit_field(a.id, &front).unwrap().norm() > s.unit_field(a.id, &back).unwrap().norm());
    }

    proptest! {
        #[test]
        fn norm_decreases_along_rays(
            dir in prop::array::uniform3(-1.0f64..1.0),
            r1 in 0.2f64..20.0,
            dr in 0.01f64..10.0,
        ) {
            let d = Vec3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let d = d.normalize();
            let c = Vec3::new(1.0, -2.0, 3.0);
            let e1 = unit_field_analytic(&c, &(c + d * r1), 0.1).unwrap().norm();
            let e2 = unit_field_analytic(&c, &(c + d * (r1 + dr)), 0.1).unwrap().norm();
            prop_assert!(e2 < e1);
            prop_assert!(e1.is_finite() && e2 >= 0.0);
        }
    }
}
