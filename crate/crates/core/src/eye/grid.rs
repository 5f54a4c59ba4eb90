//! Dense labeled voxel grid with removal tracking, segment/ray traversal and
//! nearest-tissue distance queries.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::TissueLabel;
use crate::error::{Error, Result};

const BRICK: usize = 4;
const SUPER: usize = 4 * BRICK;

/// Labeled voxel grid. Voxel `(x, y, z)` covers
/// `origin + [x, x+1) * voxel_size` (and likewise per axis).
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Point3<f64>,
    labels: Vec<TissueLabel>,
    removed: Vec<bool>,
    removed_count: usize,
    occupancy: Occupancy,
}

impl PartialEq for VoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.voxel_size == other.voxel_size
            && self.origin == other.origin
            && self.labels == other.labels
            && self.removed == other.removed
    }
}

impl VoxelGrid {
    pub fn from_labels(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Point3<f64>,
        labels: Vec<TissueLabel>,
    ) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::InvalidSpec(format!("voxel size must be positive, got {voxel_size}")));
        }
        let len = dims[0] * dims[1] * dims[2];
        if len == 0 || labels.len() != len {
            return Err(Error::Shape(format!(
                "label array has {} entries, dims {:?} need {len}",
                labels.len(),
                dims
            )));
        }
        let occupancy = Occupancy::build(dims, &labels);
        Ok(Self {
            dims,
            voxel_size,
            origin,
            removed: vec![false; len],
            labels,
            removed_count: 0,
            occupancy,
        })
    }

    /// Builds a grid by labeling every voxel center with `f`.
    pub fn from_fn(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Point3<f64>,
        mut f: impl FnMut(Point3<f64>) -> TissueLabel,
    ) -> Result<Self> {
        let len = dims[0] * dims[1] * dims[2];
        let mut labels = Vec::with_capacity(len);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let c = origin
                        + Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * voxel_size;
                    labels.push(f(c));
                }
            }
        }
        Self::from_labels(dims, voxel_size, origin, labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// World-space extent of the grid along each axis, in mm.
    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.voxel_size
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::OutOfBounds { index, len: self.len() })
        }
    }

    #[inline]
    pub fn center(&self, index: usize) -> Point3<f64> {
        let [x, y, z] = self.coords(index);
        self.origin + Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel_size
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn locate(&self, p: &Point3<f64>) -> Option<usize> {
        let g = (p - self.origin) / self.voxel_size;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = g[a].floor();
            if !(f >= 0.0) || f >= self.dims[a] as f64 {
                return None;
            }
            c[a] = f as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Label as seen by the simulation: removed voxels report `Empty`.
    #[inline]
    pub fn label(&self, index: usize) -> TissueLabel {
        if self.removed[index] {
            TissueLabel::Empty
        } else {
            self.labels[index]
        }
    }

    /// Label assigned at build time, ignoring removal.
    #[inline]
    pub fn pristine_label(&self, index: usize) -> TissueLabel {
        self.labels[index]
    }

    #[inline]
    pub fn is_solid(&self, index: usize) -> bool {
        !self.removed[index] && self.labels[index] != TissueLabel::Empty
    }

    pub fn is_removed(&self, index: usize) -> bool {
        self.removed[index]
    }

    pub fn removed_count(&self) -> usize {
        self.removed_count
    }

    /// Number of non-removed voxels carrying `label`.
    pub fn count(&self, label: TissueLabel) -> usize {
        if label == TissueLabel::Empty {
            return self.len() - self.solid_count();
        }
        self.labels
            .iter()
            .zip(&self.removed)
            .filter(|(l, r)| **l == label && !**r)
            .count()
    }

    pub fn solid_count(&self) -> usize {
        self.occupancy.total
    }

    /// Removes tissue voxels. Already-removed and empty voxels are no-ops, as are
    /// indices outside the grid. Returns the number of newly removed voxels.
    pub fn remove_voxels(&mut self, indices: &[usize]) -> usize {
        let mut n = 0;
        for &i in indices {
            if i >= self.labels.len() || self.removed[i] || self.labels[i] == TissueLabel::Empty {
                continue;
            }
            self.removed[i] = true;
            self.removed_count += 1;
            let [x, y, z] = self.coords(i);
            self.occupancy.decrement(x, y, z);
            n += 1;
        }
        n
    }

    /// Arithmetic mean of non-removed cornea voxel centers.
    pub fn cornea_center(&self) -> Result<Point3<f64>> {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for i in 0..self.len() {
            if self.label(i) == TissueLabel::Cornea {
                sum += self.center(i).coords;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::NoCornea);
        }
        Ok(Point3::from(sum / n as f64))
    }

    /// Walks the voxels pierced by `start + t * dir` for `t` in `[t0, t1]`,
    /// in order of increasing `t`. Returns `None` when the segment misses the grid.
    pub fn walk(&self, start: &Point3<f64>, dir: &Vector3<f64>, t0: f64, t1: f64) -> Option<VoxelWalker> {
        let g0 = (start - self.origin) / self.voxel_size;
        let d = dir / self.voxel_size;
        let (mut lo, mut hi) = (t0, t1);
        for a in 0..3 {
            let n = self.dims[a] as f64;
            if d[a] == 0.0 {
                if g0[a] < 0.0 || g0[a] >= n {
                    return None;
                }
            } else {
                let ta = (0.0 - g0[a]) / d[a];
                let tb = (n - g0[a]) / d[a];
                lo = lo.max(ta.min(tb));
                hi = hi.min(ta.max(tb));
            }
        }
        if lo > hi {
            return None;
        }
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let p = g0[a] + d[a] * lo;
            let c = (p.floor() as i64).clamp(0, self.dims[a] as i64 - 1);
            cell[a] = c;
            if d[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((c + 1) as f64 - g0[a]) / d[a];
                t_delta[a] = 1.0 / d[a];
            } else if d[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (c as f64 - g0[a]) / d[a];
                t_delta[a] = -1.0 / d[a];
            }
        }
        Some(VoxelWalker {
            cell,
            step,
            t_max,
            t_delta,
            t_enter: lo,
            t_end: hi,
            dims: [self.dims[0] as i64, self.dims[1] as i64, self.dims[2] as i64],
            done: false,
        })
    }

    /// Distance (mm) from the closest of `points` to the nearest non-removed tissue
    /// voxel cell. Zero iff some point lies inside a tissue voxel.
    pub fn distance_to_tissue(&self, points: &[Point3<f64>]) -> Result<f64> {
        if self.solid_count() == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(self.occupancy.min_distance(self, points))
    }
}

/// Amanatides–Woo voxel traversal state. Cloneable so a walk can be resumed.
#[derive(Clone, Debug)]
pub struct VoxelWalker {
    cell: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t_enter: f64,
    t_end: f64,
    dims: [i64; 3],
    done: bool,
}

impl Iterator for VoxelWalker {
    /// (linear voxel index, parameter at which the walk enters the voxel)
    type Item = (usize, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let [x, y, z] = self.cell;
        if x < 0 || y < 0 || z < 0 || x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            self.done = true;
            return None;
        }
        let index = (x + self.dims[0] * (y + self.dims[1] * z)) as usize;
        let out = (index, self.t_enter);
        let mut axis = 0;
        if self.t_max[1] < self.t_max[axis] {
            axis = 1;
        }
        if self.t_max[2] < self.t_max[axis] {
            axis = 2;
        }
        if self.t_max[axis] > self.t_end {
            self.done = true;
        } else {
            self.t_enter = self.t_max[axis];
            self.cell[axis] += self.step[axis];
            self.t_max[axis] += self.t_delta[axis];
        }
        Some(out)
    }
}

/// Two-level occupancy counts (4³ bricks, 16³ super-bricks) for branch-and-bound
/// nearest-tissue queries.
#[derive(Clone, Debug)]
struct Occupancy {
    brick_dims: [usize; 3],
    bricks: Vec<u32>,
    super_dims: [usize; 3],
    supers: Vec<u32>,
    total: usize,
}

impl Occupancy {
    fn build(dims: [usize; 3], labels: &[TissueLabel]) -> Self {
        let brick_dims = dims.map(|d| d.div_ceil(BRICK));
        let super_dims = dims.map(|d| d.div_ceil(SUPER));
        let mut occ = Self {
            bricks: vec![0; brick_dims.iter().product()],
            supers: vec![0; super_dims.iter().product()],
            brick_dims,
            super_dims,
            total: 0,
        };
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if labels[i] != TissueLabel::Empty {
                        let b = occ.brick_index(x, y, z);
                        let s = occ.super_index(x, y, z);
                        occ.bricks[b] += 1;
                        occ.supers[s] += 1;
                        occ.total += 1;
                    }
                    i += 1;
                }
            }
        }
        occ
    }

    fn brick_index(&self, x: usize, y: usize, z: usize) -> usize {
        let d = self.brick_dims;
        x / BRICK + d[0] * (y / BRICK + d[1] * (z / BRICK))
    }

    fn super_index(&self, x: usize, y: usize, z: usize) -> usize {
        let d = self.super_dims;
        x / SUPER + d[0] * (y / SUPER + d[1] * (z / SUPER))
    }

    fn decrement(&mut self, x: usize, y: usize, z: usize) {
        let b = self.brick_index(x, y, z);
        let s = self.super_index(x, y, z);
        self.bricks[b] -= 1;
        self.supers[s] -= 1;
        self.total -= 1;
    }

    fn min_distance(&self, grid: &VoxelGrid, points: &[Point3<f64>]) -> f64 {
        let vs = grid.voxel_size;
        let dims = grid.dims;
        let mut best = f64::INFINITY;
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for p in points {
            // grid-local coordinates in voxel units
            let g = (p - grid.origin) / vs;
            candidates.clear();
            for (si, &count) in self.supers.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let sx = si % self.super_dims[0];
                let syz = si / self.super_dims[0];
                let (sy, sz) = (syz % self.super_dims[1], syz / self.super_dims[1]);
                let lo = [sx * SUPER, sy * SUPER, sz * SUPER];
                let hi = [
                    ((sx + 1) * SUPER).min(dims[0]),
                    ((sy + 1) * SUPER).min(dims[1]),
                    ((sz + 1) * SUPER).min(dims[2]),
                ];
                let lb = box_distance(&g, lo, hi) * vs;
                if lb < best {
                    candidates.push((lb, si));
                }
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(lb, si) in &candidates {
                if lb >= best {
                    break;
                }
                let sx = si % self.super_dims[0];
                let syz = si / self.super_dims[0];
                let (sy, sz) = (syz % self.super_dims[1], syz / self.super_dims[1]);
                for bz in sz * 4..((sz + 1) * 4).min(self.brick_dims[2]) {
                    for by in sy * 4..((sy + 1) * 4).min(self.brick_dims[1]) {
                        for bx in sx * 4..((sx + 1) * 4).min(self.brick_dims[0]) {
                            let bi = bx + self.brick_dims[0] * (by + self.brick_dims[1] * bz);
                            if self.bricks[bi] == 0 {
                                continue;
                            }
                            let lo = [bx * BRICK, by * BRICK, bz * BRICK];
                            let hi = [
                                ((bx + 1) * BRICK).min(dims[0]),
                                ((by + 1) * BRICK).min(dims[1]),
                                ((bz + 1) * BRICK).min(dims[2]),
                            ];
                            if box_distance(&g, lo, hi) * vs >= best {
                                continue;
                            }
                            for z in lo[2]..hi[2] {
                                for y in lo[1]..hi[1] {
                                    for x in lo[0]..hi[0] {
                                        let i = grid.index(x, y, z);
                                        if !grid.is_solid(i) {
                                            continue;
                                        }
                                        let d = box_distance(&g, [x, y, z], [x + 1, y + 1, z + 1]) * vs;
                                        if d < best {
                                            best = d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if best == 0.0 {
                break;
            }
        }
        best
    }
}

fn box_distance(g: &Vector3<f64>, lo: [usize; 3], hi: [usize; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = if g[a] < lo[a] as f64 {
            lo[a] as f64 - g[a]
        } else if g[a] > hi[a] as f64 {
            g[a] - hi[a] as f64
        } else {
            0.0
        };
        s += d * d;
    }
    s.sqrt()
}

/// Serializable snapshot of grid geometry (no voxel payload).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl From<&VoxelGrid> for GridFrame {
    fn from(g: &VoxelGrid) -> Self {
        Self {
            dims: g.dims,
            voxel_size: g.voxel_size,
            origin: [g.origin.x, g.origin.y, g.origin.z],
        }
    }
}
