//! Regular voxel grid with x-fastest linear indexing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
#[error("point ({x:.3}, {y:.3}, {z:.3}) lies outside the grid")]
pub struct OutOfBounds {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Axis-aligned grid of `dims` cubic cells of edge `spacing` (mm) whose
/// first cell has its lower corner at `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl Grid3 {
    pub fn new(origin: [f64; 3], spacing: f64, dims: [usize; 3]) -> Self {
        Self {
            origin,
            spacing,
            dims,
        }
    }

    /// `n` cells per axis centred on `center`.
    pub fn centered(center: &Vec3, spacing: f64, n: usize) -> Self {
        let half = spacing * n as f64 / 2.0;
        Self {
            origin: [center.x - half, center.y - half, center.z - half],
            spacing,
            dims: [n, n, n],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ix + nx * (iy + ny * iz)`.
    pub fn linear(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let ix = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [ix, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Cell containing `p` (floor convention).
    pub fn cell_of(&self, p: &Vec3) -> Result<[usize; 3], OutOfBounds> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.spacing).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return Err(OutOfBounds {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                });
            }
            out[a] = f as usize;
        }
        Ok(out)
    }

    pub fn index_of(&self, p: &Vec3) -> Result<usize, OutOfBounds> {
        let [ix, iy, iz] = self.cell_of(p)?;
        Ok(self.linear(ix, iy, iz))
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + (ix as f64 + 0.5) * self.spacing,
            self.origin[1] + (iy as f64 + 0.5) * self.spacing,
            self.origin[2] + (iz as f64 + 0.5) * self.spacing,
        )
    }

    pub fn lower(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn upper(&self) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.dims[0] as f64 * self.spacing,
            self.origin[1] + self.dims[1] as f64 * self.spacing,
            self.origin[2] + self.dims[2] as f64 * self.spacing,
        )
    }
}

/// Axis-aligned box in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn around(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            b.min = b.min.inf(&p);
            b.max = b.max.sup(&p);
        }
        Some(b)
    }

    pub fn padded(&self, pad: f64) -> Self {
        let d = Vec3::repeat(pad);
        Aabb {
            min: self.min - d,
            max: self.max + d,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max - self.min) / 2.0
    }
}
