//! Cell-centred finite-volume solver for `∇·(σ∇u) = 0` with a current
//! source on one contact and zero potential on the outer box faces.
//!
//! Unknowns are cell potentials. Neighbouring cells couple through the
//! harmonic mean of their conductivities; boundary cells couple to the
//! grounded wall across half a cell. The symmetric positive-definite system
//! is solved with Jacobi-preconditioned conjugate gradients.

use std::collections::BTreeSet;

use super::{ConductivityMode, ConductivityModel, FieldError, FieldSampler, FieldSolverSpec};
use crate::grid::{Aabb, Grid3};
use crate::lead::{place_lead, ContactConfiguration, LeadModel, LeadPose, Sector};
use crate::{par, Vec3};

const UNIT_CURRENT_A: f64 = 1e-3;
const MIN_MARGIN_MM: f64 = 10.0;

/// Potential and field of a unit-current solve.
#[derive(Debug, Clone)]
pub struct FdSolution {
    pub grid: Grid3,
    /// Cell potentials, volts per mA.
    pub potential: Vec<f64>,
    /// Cell-centre field, V/m per mA.
    pub field: Vec<[f64; 3]>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub source_cells: Vec<usize>,
    /// Cell conductivities actually used, S/m.
    pub sigma: Vec<f64>,
    system: System,
}

#[derive(Debug, Clone)]
struct System {
    dims: [usize; 3],
    /// Conductance to the +x / +y / +z neighbour (S); zero on the last layer.
    gx: Vec<f64>,
    gy: Vec<f64>,
    gz: Vec<f64>,
    /// Wall conductance per cell, summed over its boundary faces.
    wall: Vec<f64>,
    diag: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

fn odd_cells(domain: f64, spacing: f64) -> usize {
    let n = (domain / spacing - 1e-9).ceil().max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

impl System {
    fn assemble(grid: &Grid3, sigma: &[f64]) -> Self {
        let [nx, ny, nz] = grid.dims;
        let h = grid.spacing * 1e-3;
        let len = grid.len();
        let mut gx = vec![0.0; len];
        let mut gy = vec![0.0; len];
        let mut gz = vec![0.0; len];
        let mut wall = vec![0.0; len];
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let i = grid.linear(ix, iy, iz);
                    let s = sigma[i];
                    if ix + 1 < nx {
                        gx[i] = h * harmonic(s, sigma[i + 1]);
                    }
                    if iy + 1 < ny {
                        gy[i] = h * harmonic(s, sigma[i + nx]);
                    }
                    if iz + 1 < nz {
                        gz[i] = h * harmonic(s, sigma[i + nx * ny]);
                    }
                    let faces = [ix == 0, ix + 1 == nx, iy == 0, iy + 1 == ny, iz == 0, iz + 1 == nz]
                        .iter()
                        .filter(|&&b| b)
                        .count();
                    wall[i] = faces as f64 * 2.0 * s * h;
                }
            }
        }
        let mut diag = wall.clone();
        for i in 0..len {
            diag[i] += gx[i] + gy[i] + gz[i];
            if i >= 1 && i % nx != 0 {
                diag[i] += gx[i - 1];
            }
            if (i / nx) % ny != 0 {
                diag[i] += gy[i - nx];
            }
            if i >= nx * ny {
                diag[i] += gz[i - nx * ny];
            }
        }
        Self {
            dims: grid.dims,
            gx,
            gy,
            gz,
            wall,
            diag,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        par::for_each_chunk(y, slab, |iz, out| {
            let base = iz * slab;
            for iy in 0..ny {
                for ix in 0..nx {
                    let l = iy * nx + ix;
                    let i = base + l;
                    let mut acc = self.diag[i] * x[i];
                    if ix + 1 < nx {
                        acc -= self.gx[i] * x[i + 1];
                    }
                    if ix > 0 {
                        acc -= self.gx[i - 1] * x[i - 1];
                    }
                    if iy + 1 < ny {
                        acc -= self.gy[i] * x[i + nx];
                    }
                    if iy > 0 {
                        acc -= self.gy[i - nx] * x[i - nx];
                    }
                    if i + slab < x.len() {
                        acc -= self.gz[i] * x[i + slab];
                    }
                    if iz > 0 {
                        acc -= self.gz[i - slab] * x[i - slab];
                    }
                    out[l] = acc;
                }
            }
        });
    }

    fn solve(
        &self,
        rhs: &[f64],
        tolerance: f64,
        max_iterations: usize,
    ) -> Result<(Vec<f64>, usize, f64), FieldError> {
        let n = rhs.len();
        let b_norm = par::dot(rhs, rhs).sqrt();
        let mut x = vec![0.0; n];
        if b_norm == 0.0 {
            return Ok((x, 0, 0.0));
        }
        let mut r = rhs.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = par::dot(&r, &z);
        let mut residual = 1.0;
        for it in 1..=max_iterations {
            self.apply(&p, &mut ap);
            let alpha = rz / par::dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            residual = par::dot(&r, &r).sqrt() / b_norm;
            if residual <= tolerance {
                return Ok((x, it, residual));
            }
            for i in 0..n {
                z[i] = r[i] / self.diag[i];
            }
            let rz_next = par::dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(FieldError::NotConverged {
            iterations: max_iterations,
            residual,
        })
    }
}

/// World-space sample points on the surface of one contact.
fn contact_surface_samples(lead: &LeadModel, pose: &LeadPose, contact: usize) -> Vec<Vec3> {
    let c = lead.contact(contact).expect("contact id checked by caller");
    let radius = lead.lead_radius;
    let (start, span) = match c.sector {
        Sector::Ring => (0.0, 360.0),
        s => {
            let mid = -s.clockwise_angle_deg().unwrap();
            (mid - lead.segment_span_deg / 2.0, lead.segment_span_deg)
        }
    };
    let rot = pose.effective_rotation();
    let t = pose.translation_vec();
    let mut out = vec![rot * c.centroid + t];
    let (n_ang, n_ax) = (96usize, 13usize);
    for a in 0..n_ang {
        let phi = (start + span * (a as f64 + 0.5) / n_ang as f64).to_radians();
        for k in 0..n_ax {
            let dz = lead.contact_height * ((k as f64 + 0.5) / n_ax as f64 - 0.5);
            let local = Vec3::new(radius * phi.cos(), radius * phi.sin(), c.centroid.z + dz);
            out.push(rot * local + t);
        }
    }
    out
}

fn contact_cells(
    grid: &Grid3,
    lead: &LeadModel,
    pose: &LeadPose,
    contact: usize,
) -> Result<Vec<usize>, FieldError> {
    let mut cells = BTreeSet::new();
    for p in contact_surface_samples(lead, pose, contact) {
        let idx = grid.index_of(&p).map_err(|_| {
            FieldError::Geometry(format!("contact {contact} extends outside the solver domain"))
        })?;
        cells.insert(idx);
    }
    Ok(cells.into_iter().collect())
}

/// Solver grid for a placed lead: odd cell count per axis, centred on
/// `spec.center` or the mean world contact centroid.
pub(crate) fn solver_grid(
    spec: &FieldSolverSpec,
    lead: &LeadModel,
    pose: &LeadPose,
) -> Result<Grid3, FieldError> {
    spec.validate()?;
    let world = place_lead(lead, pose).map_err(|e| FieldError::Geometry(e.to_string()))?;
    let center = match spec.center {
        Some(c) => Vec3::from(c),
        None => world.iter().sum::<Vec3>() / world.len() as f64,
    };
    let n = odd_cells(spec.domain_box, spec.grid_spacing);
    let grid = Grid3::centered(&center, spec.grid_spacing, n);
    let (lo, hi) = (grid.lower(), grid.upper());
    for (c, p) in lead.contacts.iter().zip(&world) {
        for a in 0..3 {
            if p[a] - lo[a] < MIN_MARGIN_MM || hi[a] - p[a] < MIN_MARGIN_MM {
                return Err(FieldError::Geometry(format!(
                    "contact {} is closer than {MIN_MARGIN_MM} mm to the solver boundary",
                    c.label
                )));
            }
        }
    }
    Ok(grid)
}

fn cell_conductivities(
    grid: &Grid3,
    spec: &FieldSolverSpec,
    conductivity: &ConductivityModel,
    lead: &LeadModel,
    pose: &LeadPose,
    active: usize,
) -> Result<Vec<f64>, FieldError> {
    let [nx, ny, nz] = grid.dims;
    let mut sigma = Vec::with_capacity(grid.len());
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                sigma.push(conductivity.sigma_at(&grid.cell_center(ix, iy, iz)));
            }
        }
    }
    if matches!(conductivity.mode, ConductivityMode::VoxelMap { .. })
        && conductivity.encapsulation_thickness > 0.0
    {
        let axis = pose.axis();
        let tip = pose.tip();
        let inner = lead.lead_radius;
        let outer = inner + conductivity.encapsulation_thickness;
        for (i, s) in sigma.iter_mut().enumerate() {
            let [ix, iy, iz] = grid.unlinear(i);
            let d = grid.cell_center(ix, iy, iz) - tip;
            let along = d.dot(&axis);
            let radial = (d - axis * along).norm();
            if along >= 0.0 && radial >= inner && radial <= outer {
                *s = conductivity.tissues.encapsulation;
            }
        }
    }
    if spec.passive_contacts {
        for c in lead.contacts.iter().filter(|c| c.id != active) {
            for idx in contact_cells(grid, lead, pose, c.id)? {
                sigma[idx] = spec.passive_sigma;
            }
        }
    }
    Ok(sigma)
}

fn gradient_field(grid: &Grid3, u: &[f64]) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = grid.dims;
    let h2 = 2.0 * grid.spacing * 1e-3;
    let strides = [1, nx, nx * ny];
    let dims = [nx, ny, nz];
    (0..grid.len())
        .map(|i| {
            let idx = grid.unlinear(i);
            let mut e = [0.0; 3];
            for a in 0..3 {
                // ghost value -u mirrors the grounded wall half a cell away
                let plus = if idx[a] + 1 < dims[a] { u[i + strides[a]] } else { -u[i] };
                let minus = if idx[a] > 0 { u[i - strides[a]] } else { -u[i] };
                e[a] = -(plus - minus) / h2;
            }
            e
        })
        .collect()
}

/// Unit-current (1 mA) solve for one contact of a placed lead.
pub fn solve_unit_field_fd(
    spec: &FieldSolverSpec,
    conductivity: &ConductivityModel,
    lead: &LeadModel,
    contact: usize,
    pose: &LeadPose,
) -> Result<FdSolution, FieldError> {
    conductivity.validate()?;
    lead.contact(contact)
        .map_err(|_| FieldError::UnknownContact(contact))?;
    let grid = solver_grid(spec, lead, pose)?;
    let sources = contact_cells(&grid, lead, pose, contact)?;
    let sigma = cell_conductivities(&grid, spec, conductivity, lead, pose, contact)?;
    let system = System::assemble(&grid, &sigma);
    let mut rhs = vec![0.0; grid.len()];
    let share = UNIT_CURRENT_A / sources.len() as f64;
    for &s in &sources {
        rhs[s] = share;
    }
    let (potential, iterations, relative_residual) =
        system.solve(&rhs, spec.tolerance, spec.max_iterations)?;
    let field = gradient_field(&grid, &potential);
    log::debug!(
        "fd solve contact {contact}: {} cells, {iterations} iterations, residual {relative_residual:.2e}",
        grid.len()
    );
    Ok(FdSolution {
        grid,
        potential,
        field,
        iterations,
        relative_residual,
        source_cells: sources,
        sigma,
        system,
    })
}

impl FdSolution {
    /// Net current (A) leaving the block of cells `lo..=hi` (inclusive
    /// cell indices), summed over every face of the block.
    pub fn outward_current(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let s = &self.system;
        let [nx, ny, nz] = s.dims;
        let u = &self.potential;
        let inside = |ix: usize, iy: usize, iz: usize| {
            (lo[0]..=hi[0]).contains(&ix) && (lo[1]..=hi[1]).contains(&iy) && (lo[2]..=hi[2]).contains(&iz)
        };
        let mut total = 0.0;
        for iz in lo[2]..=hi[2] {
            for iy in lo[1]..=hi[1] {
                for ix in lo[0]..=hi[0] {
                    let i = self.grid.linear(ix, iy, iz);
                    total += s.wall[i] * u[i];
                    let neighbours = [
                        (ix + 1 < nx, ix + 1, iy, iz, s.gx[i]),
                        (ix > 0, ix.wrapping_sub(1), iy, iz, if ix > 0 { s.gx[i - 1] } else { 0.0 }),
                        (iy + 1 < ny, ix, iy + 1, iz, s.gy[i]),
                        (iy > 0, ix, iy.wrapping_sub(1), iz, if iy > 0 { s.gy[i - nx] } else { 0.0 }),
                        (iz + 1 < nz, ix, iy, iz + 1, s.gz[i]),
                        (iz > 0, ix, iy, iz.wrapping_sub(1), if iz > 0 { s.gz[i - nx * ny] } else { 0.0 }),
                    ];
                    for (exists, jx, jy, jz, g) in neighbours {
                        if exists && !inside(jx, jy, jz) {
                            total += g * (u[i] - u[self.grid.linear(jx, jy, jz)]);
                        }
                    }
                }
            }
        }
        total
    }

    /// Trilinear interpolation of the cell-centre field at `p`.
    pub fn field_at(&self, p: &Vec3) -> Result<Vec3, FieldError> {
        interpolate(&self.grid, p, |i| self.field[i].map(|v| v as f32))
    }
}

fn interpolate<F>(grid: &Grid3, p: &Vec3, at: F) -> Result<Vec3, FieldError>
where
    F: Fn(usize) -> [f32; 3],
{
    let (lo, hi) = (grid.lower(), grid.upper());
    if (0..3).any(|a| !(p[a] >= lo[a] && p[a] <= hi[a])) {
        return Err(FieldError::Geometry(format!(
            "point ({:.2}, {:.2}, {:.2}) lies outside the solver domain",
            p.x, p.y, p.z
        )));
    }
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = grid.dims[a];
        let t = (p[a] - lo[a]) / grid.spacing - 0.5;
        if n == 1 {
            continue;
        }
        let i0 = t.floor().clamp(0.0, (n - 2) as f64);
        base[a] = i0 as usize;
        frac[a] = (t - i0).clamp(0.0, 1.0);
    }
    let mut out = Vec3::zeros();
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let step = if grid.dims[a] > 1 { bit } else { 0 };
            idx[a] = base[a] + step;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let v = at(grid.linear(idx[0], idx[1], idx[2]));
        out += Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64) * w;
    }
    Ok(out)
}

/// Finite-difference unit fields for every contact of a lead, stored on a
/// shared grid and sampled by trilinear interpolation.
#[derive(Debug, Clone)]
pub struct FdFieldSet {
    grid: Grid3,
    contact_ids: Vec<usize>,
    fields: Vec<Vec<[f32; 3]>>,
    pub iterations: Vec<usize>,
}

impl FdFieldSet {
    pub fn solve(
        spec: &FieldSolverSpec,
        conductivity: &ConductivityModel,
        lead: &LeadModel,
        pose: &LeadPose,
    ) -> Result<Self, FieldError> {
        let grid = solver_grid(spec, lead, pose)?;
        let mut contact_ids = Vec::new();
        let mut fields = Vec::new();
        let mut iterations = Vec::new();
        for c in &lead.contacts {
            let sol = solve_unit_field_fd(spec, conductivity, lead, c.id, pose)?;
            contact_ids.push(c.id);
            iterations.push(sol.iterations);
            fields.push(sol.field.iter().map(|e| e.map(|v| v as f32)).collect());
        }
        Ok(Self {
            grid,
            contact_ids,
            fields,
            iterations,
        })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
}

impl FieldSampler for FdFieldSet {
    fn contact_ids(&self) -> Vec<usize> {
        self.contact_ids.clone()
    }

    fn unit_field(&self, contact: usize, point: &Vec3) -> Result<Vec3, FieldError> {
        let slot = self
            .contact_ids
            .iter()
            .position(|&c| c == contact)
            .ok_or(FieldError::UnknownContact(contact))?;
        let f = &self.fields[slot];
        interpolate(&self.grid, point, |i| f[i])
    }

    fn activation_bounds(
        &self,
        config: &ContactConfiguration,
        lambda: f64,
        threshold: f64,
    ) -> Result<Aabb, FieldError> {
        // Trilinear values never exceed their corner values, and
        // |Σ (λ/n) E_k| ≤ (λ/n) Σ |E_k| per node.
        let slots = config
            .active_ids
            .iter()
            .map(|&id| {
                self.contact_ids
                    .iter()
                    .position(|&c| c == id)
                    .ok_or(FieldError::UnknownContact(id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let share = lambda.max(0.0) / config.len() as f64;
        let g = &self.grid;
        let hits = (0..g.len()).filter(|&i| {
            let bound: f64 = slots
                .iter()
                .map(|&s| {
                    let v = self.fields[s][i];
                    ((v[0] as f64).powi(2) + (v[1] as f64).powi(2) + (v[2] as f64).powi(2)).sqrt()
                })
                .sum();
            share * bound >= threshold
        });
        let centers = hits.map(|i| {
            let [x, y, z] = g.unlinear(i);
            g.cell_center(x, y, z)
        });
        Ok(match Aabb::around(centers) {
            Some(b) => b.padded(g.spacing),
            None => {
                let c = g.cell_center(g.dims[0] / 2, g.dims[1] / 2, g.dims[2] / 2);
                Aabb { min: c, max: c }
            }
        })
    }
}
