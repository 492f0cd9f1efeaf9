//! Browser demo: a phantom case prepared once, then three interactive
//! queries against it. The wasm exports exchange JSON strings.

use serde::{Deserialize, Serialize};

use stimplan_core::anatomy::{ActivationMode, RegionKind, Role};
use stimplan_core::lead::{place_lead, ContactConfiguration};
use stimplan_core::optimizer::relaxation_sweep;
use stimplan_core::pipeline::{generate_phantom, PhantomSpec, PreparedCase, SweepTable};
use stimplan_core::Vec3;

pub const MAX_SLICE_CELLS: usize = 160_000;
pub const MAX_CURVE_STEPS: usize = 2_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceRequest {
    /// Active contact labels.
    pub contacts: Vec<String>,
    /// mA
    pub amplitude: f64,
    /// Half edge of the square slice, mm.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    /// Cells per edge.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Offset of the slice plane along y, mm.
    #[serde(default)]
    pub y: f64,
}

fn default_half_width() -> f64 {
    8.0
}

fn default_resolution() -> usize {
    120
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceMarker {
    pub x: f64,
    pub z: f64,
    pub role: Role,
    pub kind: RegionKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactMarker {
    pub label: String,
    pub x: f64,
    pub z: f64,
    pub active: bool,
}

/// Field norm on an x-z plane, row-major with z increasing by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSlice {
    pub resolution: usize,
    pub x_min: f64,
    pub z_min: f64,
    /// mm
    pub step: f64,
    /// V/m; cells inside a source singularity hold the largest finite value.
    pub values: Vec<f64>,
    pub max: f64,
    /// V/m
    pub threshold_t: f64,
    pub threshold_c: f64,
    pub contacts: Vec<ContactMarker>,
    /// Region samples within one step of the plane.
    pub markers: Vec<SliceMarker>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTop {
    pub gamma: f64,
    pub configuration: String,
    pub lambda_opt: f64,
    pub score: f64,
    pub p_act_t: f64,
    pub p_act_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepView {
    pub top: Vec<SweepTop>,
    pub table: SweepTable,
}

/// Coverage of one configuration over an amplitude range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub configuration: String,
    /// mA
    pub lambda: Vec<f64>,
    pub point_wise_t: Vec<f64>,
    pub point_wise_c: Vec<Option<f64>>,
    pub trajectory_wise_t: Vec<Option<f64>>,
    pub trajectory_wise_c: Vec<Option<f64>>,
}

pub struct Planner {
    prepared: PreparedCase,
}

impl Planner {
    /// Generate and prepare a phantom.
    pub fn new(spec: &PhantomSpec) -> Result<Self, String> {
        spec.validate().map_err(|e| e.to_string())?;
        let case = generate_phantom(spec);
        let case = case.resolve(std::path::Path::new(".")).map_err(|e| e.to_string())?;
        case.validate().map_err(|e| e.to_string())?;
        let prepared = PreparedCase::prepare(&case, None).map_err(|e| e.to_string())?;
        Ok(Self { prepared })
    }

    /// Spill stays off unless `optimization.compute_spill` is given; it
    /// dominates run time in the browser.
    pub fn from_json(spec: &str) -> Result<Self, String> {
        let value: serde_json::Value = if spec.trim().is_empty() {
            serde_json::json!({})
        } else {
            serde_json::from_str(spec).map_err(|e| e.to_string())?
        };
        let spill_given = value.pointer("/optimization/compute_spill").is_some();
        let mut spec: PhantomSpec = serde_json::from_value(value).map_err(|e| e.to_string())?;
        if !spill_given {
            spec.optimization.compute_spill = false;
        }
        Self::new(&spec)
    }

    pub fn prepared(&self) -> &PreparedCase {
        &self.prepared
    }

    pub fn contact_labels(&self) -> Vec<String> {
        self.prepared.lead.contacts.iter().map(|c| c.label.clone()).collect()
    }

    fn configuration(&self, contacts: &[String]) -> Result<ContactConfiguration, String> {
        self.prepared.lead.configuration(contacts).map_err(|e| e.to_string())
    }

    pub fn field_slice(&self, req: &SliceRequest) -> Result<FieldSlice, String> {
        if !(req.amplitude.is_finite() && req.amplitude >= 0.0) {
            return Err(format!("amplitude must be a non-negative number, got {}", req.amplitude));
        }
        if !(req.half_width.is_finite() && req.half_width > 0.0) {
            return Err(format!("half_width must be positive, got {}", req.half_width));
        }
        let n = req.resolution;
        if n < 2 || n * n > MAX_SLICE_CELLS {
            return Err(format!("resolution must lie in [2, {}], got {n}", (MAX_SLICE_CELLS as f64).sqrt() as usize));
        }
        let config = self.configuration(&req.contacts)?;
        let sampler = self.prepared.sampler().ok_or("slice needs a sampled field backend")?;
        let centroids = place_lead(&self.prepared.lead, &self.prepared.case.pose).map_err(|e| e.to_string())?;
        let zc = centroids.iter().map(|c| c.z).sum::<f64>() / centroids.len() as f64;
        let step = 2.0 * req.half_width / (n - 1) as f64;
        let (x_min, z_min) = (-req.half_width, zc - req.half_width);

        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let p = Vec3::new(x_min + i as f64 * step, req.y, z_min + j as f64 * step);
                values.push(sampler.config_norm(&config, req.amplitude, &p).map_err(|e| e.to_string())?);
            }
        }
        let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        for v in &mut values {
            if !v.is_finite() {
                *v = max;
            }
        }

        let mut spec = self.prepared.case.optimization.clone();
        spec.compute_spill = false;
        let thresholds = self
            .prepared
            .evaluate(&config, req.amplitude, &spec, &spec.thresholds)
            .map_err(|e| e.to_string())?;

        let contacts = self
            .prepared
            .lead
            .contacts
            .iter()
            .zip(&centroids)
            .map(|(c, p)| ContactMarker {
                label: c.label.clone(),
                x: p.x,
                z: p.z,
                active: config.active_ids.contains(&c.id),
            })
            .collect();

        let points = self.prepared.registry_points();
        let mut markers = Vec::new();
        for region in &self.prepared.regions.regions {
            for (_, group) in &region.groups {
                for &idx in group {
                    let p = points[idx];
                    if (p.y - req.y).abs() <= step {
                        markers.push(SliceMarker {
                            x: p.x,
                            z: p.z,
                            role: region.role,
                            kind: region.kind,
                        });
                    }
                }
            }
        }

        Ok(FieldSlice {
            resolution: n,
            x_min,
            z_min,
            step,
            values,
            max,
            threshold_t: thresholds.threshold_t,
            threshold_c: thresholds.threshold_c,
            contacts,
            markers,
        })
    }

    /// Optimize every configuration at each relaxation level.
    pub fn sweep(&self, gamma_grid: &[f64]) -> Result<SweepView, String> {
        let mut spec = self.prepared.case.optimization.clone();
        spec.gamma_grid = gamma_grid.to_vec();
        let result = relaxation_sweep(&self.prepared, &spec).map_err(|e| e.to_string())?;
        let top = result
            .entries
            .iter()
            .map(|e| {
                let t = e.top();
                SweepTop {
                    gamma: e.gamma,
                    configuration: t.config.canonical_label(),
                    lambda_opt: t.lambda_opt,
                    score: t.score,
                    p_act_t: t.coverage.p_act_t,
                    p_act_c: t.coverage.p_act_c,
                }
            })
            .collect();
        Ok(SweepView {
            top,
            table: SweepTable::new(&result),
        })
    }

    /// Point-wise and trajectory-wise coverage of `contacts` at `steps + 1`
    /// amplitudes evenly spaced over `[0, lambda_max]`.
    pub fn coverage_curve(&self, contacts: &[String], lambda_max: f64, steps: usize) -> Result<CoverageCurve, String> {
        if !(lambda_max.is_finite() && lambda_max > 0.0) {
            return Err(format!("lambda_max must be positive, got {lambda_max}"));
        }
        if steps == 0 || steps > MAX_CURVE_STEPS {
            return Err(format!("steps must lie in [1, {MAX_CURVE_STEPS}], got {steps}"));
        }
        let config = self.configuration(contacts)?;
        let mut spec = self.prepared.case.optimization.clone();
        spec.compute_spill = false;
        let mut curve = CoverageCurve {
            configuration: config.canonical_label(),
            lambda: Vec::new(),
            point_wise_t: Vec::new(),
            point_wise_c: Vec::new(),
            trajectory_wise_t: Vec::new(),
            trajectory_wise_c: Vec::new(),
        };
        for k in 0..=steps {
            let lambda = lambda_max * k as f64 / steps as f64;
            let r = self
                .prepared
                .evaluate(&config, lambda, &spec, &spec.thresholds)
                .map_err(|e| e.to_string())?;
            curve.lambda.push(lambda);
            curve.point_wise_t.push(r.point_wise.target);
            curve.point_wise_c.push(r.point_wise.constraint);
            curve.trajectory_wise_t.push(r.trajectory_wise.map(|t| t.target));
            curve.trajectory_wise_c.push(r.trajectory_wise.and_then(|t| t.constraint));
        }
        Ok(curve)
    }

    pub fn mode(&self) -> ActivationMode {
        self.prepared.case.activation_mode
    }
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    use super::{Planner, SliceRequest};

    fn to_js<T: serde::Serialize>(r: Result<T, String>) -> Result<String, JsError> {
        let v = r.map_err(|e| JsError::new(&e))?;
        serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen]
    pub struct WebPlanner(Planner);

    #[wasm_bindgen]
    impl WebPlanner {
        /// `spec` is a phantom spec as JSON; empty for defaults.
        #[wasm_bindgen(constructor)]
        pub fn new(spec: &str) -> Result<WebPlanner, JsError> {
            Planner::from_json(spec).map(WebPlanner).map_err(|e| JsError::new(&e))
        }

        #[wasm_bindgen(js_name = contactLabels)]
        pub fn contact_labels(&self) -> Result<String, JsError> {
            to_js(Ok(self.0.contact_labels()))
        }

        #[wasm_bindgen(js_name = fieldSlice)]
        pub fn field_slice(&self, request: &str) -> Result<String, JsError> {
            let req: SliceRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
            to_js(self.0.field_slice(&req))
        }

        pub fn sweep(&self, gamma_grid: &[f64]) -> Result<String, JsError> {
            to_js(self.0.sweep(gamma_grid))
        }

        /// `contacts` is comma-separated.
        #[wasm_bindgen(js_name = coverageCurve)]
        pub fn coverage_curve(&self, contacts: &str, lambda_max: f64, steps: usize) -> Result<String, JsError> {
            let labels: Vec<String> = contacts
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            to_js(self.0.coverage_curve(&labels, lambda_max, steps))
        }
    }
}
