//! Voxelized eye model at two curriculum fidelities.
//!
//! World frame: origin at the globe center, +Z along the optical axis toward
//! the cornea. The cornea is a spherical-cap shell whose sphere meets the globe
//! at the limbus; the sclera is the globe shell posterior to the limbus plane.
//! High-poly builds add an iris annulus, a lens, scleral vessels and the optic
//! nerve head.

mod grid;
pub mod io;
mod sector;

pub use grid::{GridFrame, VoxelGrid, VoxelWalker};
pub use sector::{sector_for_offset, Half, SectorId, SectorMap, SectorTarget};

use std::f64::consts::TAU;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueLabel {
    Empty = 0,
    Cornea = 1,
    Sclera = 2,
    Iris = 3,
    Lens = 4,
    Vessel = 5,
    OpticNerve = 6,
}

impl TissueLabel {
    pub const ALL: [TissueLabel; 7] = [
        TissueLabel::Empty,
        TissueLabel::Cornea,
        TissueLabel::Sclera,
        TissueLabel::Iris,
        TissueLabel::Lens,
        TissueLabel::Vessel,
        TissueLabel::OpticNerve,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    LowPoly,
    HighPoly,
}

impl std::str::FromStr for Fidelity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "low_poly" | "lowpoly" => Ok(Fidelity::LowPoly),
            "high" | "high_poly" | "highpoly" => Ok(Fidelity::HighPoly),
            _ => Err(Error::InvalidConfig(format!("unknown fidelity {s:?}"))),
        }
    }
}

/// Build parameters. Lengths in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeSpec {
    pub fidelity: Fidelity,
    /// Voxels per axis (the grid is cubic).
    pub resolution: usize,
    pub voxel_size: f64,
    pub globe_radius: f64,
    pub cornea_curvature_radius: f64,
    /// Radius of the corneal cap where it meets the sclera.
    pub limbus_radius: f64,
    /// Pupil radius (inner edge of the iris).
    pub iris_aperture: f64,
    /// Cornea and sclera shell thickness, in voxels.
    pub shell_thickness_voxels: usize,
    pub vessel_count: usize,
    pub seed: u64,
}

impl EyeSpec {
    pub fn low_poly() -> Self {
        Self {
            fidelity: Fidelity::LowPoly,
            resolution: 64,
            voxel_size: 0.4,
            globe_radius: 12.0,
            cornea_curvature_radius: 7.8,
            limbus_radius: 5.75,
            iris_aperture: 2.5,
            shell_thickness_voxels: 3,
            vessel_count: 12,
            seed: 0,
        }
    }

    pub fn high_poly() -> Self {
        Self {
            fidelity: Fidelity::HighPoly,
            resolution: 128,
            voxel_size: 0.2,
            ..Self::low_poly()
        }
    }

    /// Full-scale reference voxelization (0.01 mm voxels). Not practical to build
    /// on a desktop; kept for documentation and scaling experiments.
    pub fn reference() -> Self {
        Self {
            resolution: 2560,
            voxel_size: 0.01,
            ..Self::high_poly()
        }
    }

    pub fn for_fidelity(fidelity: Fidelity) -> Self {
        match fidelity {
            Fidelity::LowPoly => Self::low_poly(),
            Fidelity::HighPoly => Self::high_poly(),
        }
    }

    pub fn geometry(&self) -> EyeGeometry {
        let rg = self.globe_radius;
        let rc = self.cornea_curvature_radius;
        let rl = self.limbus_radius;
        let limbus_z = (rg * rg - rl * rl).max(0.0).sqrt();
        let cornea_z = limbus_z - (rc * rc - rl * rl).max(0.0).sqrt();
        EyeGeometry {
            globe_radius: rg,
            cornea_center: Point3::new(0.0, 0.0, cornea_z),
            cornea_radius: rc,
            limbus_radius: rl,
            limbus_z,
            shell_thickness: self.shell_thickness_voxels as f64 * self.voxel_size,
            iris_aperture: self.iris_aperture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.resolution < 16 {
            return bad(format!("resolution {} is below the minimum of 16", self.resolution));
        }
        if !(self.voxel_size > 0.0) {
            return bad(format!("voxel size must be positive, got {}", self.voxel_size));
        }
        for (name, v) in [
            ("globe_radius", self.globe_radius),
            ("cornea_curvature_radius", self.cornea_curvature_radius),
            ("limbus_radius", self.limbus_radius),
            ("iris_aperture", self.iris_aperture),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.limbus_radius >= self.cornea_curvature_radius || self.limbus_radius >= self.globe_radius {
            return bad("limbus radius must be smaller than the cornea and globe radii".into());
        }
        if self.iris_aperture >= self.limbus_radius {
            return bad("iris aperture must lie inside the limbus".into());
        }
        if self.shell_thickness_voxels < 2 {
            return bad(format!(
                "shell of {} voxel(s) cannot resolve the cornea (need at least 2)",
                self.shell_thickness_voxels
            ));
        }
        let g = self.geometry();
        if g.apex_z() <= g.globe_radius {
            return bad("cornea must protrude beyond the globe".into());
        }
        if g.shell_thickness >= g.limbus_radius {
            return bad("shell thickness exceeds the corneal cap".into());
        }
        let extent = self.resolution as f64 * self.voxel_size;
        if extent < 2.0 * g.globe_radius || extent < g.apex_z() + g.globe_radius {
            return bad(format!(
                "grid extent {extent:.2} mm cannot hold the eye ({:.2} mm)",
                g.apex_z() + g.globe_radius
            ));
        }
        Ok(())
    }

    /// World position of voxel (0, 0, 0)'s minimum corner. The grid is centered on
    /// the optical axis (so 90° rotations about it map voxels onto voxels) and
    /// centered on the eye's axial extent.
    pub fn grid_origin(&self) -> Point3<f64> {
        let g = self.geometry();
        let half = self.resolution as f64 * self.voxel_size / 2.0;
        let zmid = (g.apex_z() - g.globe_radius) / 2.0;
        Point3::new(-half, -half, zmid - half)
    }
}

/// Analytic eye geometry shared by the builder, reward rules, camera rig and
/// scripted expert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeGeometry {
    pub globe_radius: f64,
    pub cornea_center: Point3<f64>,
    pub cornea_radius: f64,
    pub limbus_radius: f64,
    pub limbus_z: f64,
    pub shell_thickness: f64,
    pub iris_aperture: f64,
}

impl EyeGeometry {
    pub fn apex_z(&self) -> f64 {
        self.cornea_center.z + self.cornea_radius
    }

    /// Half-angle of the corneal cap seen from the cornea sphere center.
    pub fn angular_radius(&self) -> f64 {
        (self.limbus_radius / self.cornea_radius).asin()
    }

    /// Angle between `p - cornea_center` and the optical axis.
    pub fn polar_angle(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.cornea_center;
        let r = d.norm();
        if r == 0.0 {
            return 0.0;
        }
        (d.z / r).clamp(-1.0, 1.0).acos()
    }

    /// Outward unit normal of the corneal sphere through `p`.
    pub fn cornea_normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        let d = p - self.cornea_center;
        let n = d.norm();
        if n == 0.0 {
            Vector3::z()
        } else {
            d / n
        }
    }

    /// Point on the outer corneal surface at polar angle `theta` and azimuth `phi`.
    pub fn cornea_surface_point(&self, theta: f64, phi: f64) -> Point3<f64> {
        self.cornea_center + self.cornea_radius * spherical(theta, phi)
    }

    /// Conservative clearance from `p` to the outer eye surface (globe ∪ cornea
    /// sphere); negative inside.
    pub fn clearance(&self, p: &Point3<f64>) -> f64 {
        let globe = p.coords.norm() - self.globe_radius;
        let cornea = (p - self.cornea_center).norm() - self.cornea_radius;
        globe.min(cornea)
    }
}

/// Unit vector at polar angle `theta` from +Z and azimuth `phi` from +X.
pub fn spherical(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

struct VesselArc {
    normal: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    start: f64,
    span: f64,
    radius: f64,
}

impl VesselArc {
    fn random(rng: &mut ChaCha8Rng, radius: f64) -> Self {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..TAU);
        let r = (1.0 - z * z).sqrt();
        let normal = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = normal.cross(&helper).normalize();
        let v = normal.cross(&u);
        let start = rng.gen_range(0.0..TAU);
        let span = rng.gen_range(40.0f64..120.0).to_radians();
        Self { normal, u, v, start, span, radius }
    }

    fn distance(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.normal * p.dot(&self.normal);
        let qn = q.norm();
        let point_at = |a: f64| (self.u * a.cos() + self.v * a.sin()) * self.radius;
        let closest = if qn < 1e-12 {
            point_at(self.start)
        } else {
            let angle = q.dot(&self.v).atan2(q.dot(&self.u));
            let rel = (angle - self.start).rem_euclid(TAU);
            if rel <= self.span {
                q / qn * self.radius
            } else {
                let a = point_at(self.start);
                let b = point_at(self.start + self.span);
                if (p - a).norm() < (p - b).norm() {
                    a
                } else {
                    b
                }
            }
        };
        (p - closest).norm()
    }
}

/// Builds the labeled grid and its corneal sector map. Deterministic in `spec`.
pub fn build_eye(spec: &EyeSpec) -> Result<(VoxelGrid, SectorMap)> {
    spec.validate()?;
    let g = spec.geometry();
    let n = spec.resolution;
    let vs = spec.voxel_size;
    let th = g.shell_thickness;
    let high = spec.fidelity == Fidelity::HighPoly;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vessel_radius = (0.75 * vs).max(0.3);
    let arcs: Vec<VesselArc> = if high {
        (0..spec.vessel_count)
            .map(|_| VesselArc::random(&mut rng, g.globe_radius - th / 2.0))
            .collect()
    } else {
        Vec::new()
    };

    let iris_top = g.limbus_z - 0.3;
    let iris_bottom = g.limbus_z - 0.9;
    let lens_center = Point3::new(0.0, 0.0, iris_bottom - 2.2);
    let lens_axes = Vector3::new(4.0, 4.0, 2.0);
    let nerve_radius = 1.5;
    let nerve_depth = 2.0;

    let grid = VoxelGrid::from_fn([n, n, n], vs, spec.grid_origin(), |c| {
        let r_globe = c.coords.norm();
        let r_cornea = (c - g.cornea_center).norm();
        let rho = (c.x * c.x + c.y * c.y).sqrt();
        if c.z >= g.limbus_z {
            if r_cornea <= g.cornea_radius && r_cornea >= g.cornea_radius - th {
                return TissueLabel::Cornea;
            }
            return TissueLabel::Empty;
        }
        let in_globe = r_globe <= g.globe_radius;
        if high && in_globe && c.z <= -g.globe_radius + nerve_depth && rho <= nerve_radius {
            return TissueLabel::OpticNerve;
        }
        if in_globe && r_globe >= g.globe_radius - th {
            if high && c.z < g.limbus_z - 1.0 && arcs.iter().any(|a| a.distance(&c.coords) <= vessel_radius) {
                return TissueLabel::Vessel;
            }
            return TissueLabel::Sclera;
        }
        if high && in_globe {
            if c.z >= iris_bottom && c.z <= iris_top && rho >= g.iris_aperture {
                return TissueLabel::Iris;
            }
            let e = (c - lens_center).component_div(&lens_axes);
            if e.norm_squared() <= 1.0 {
                return TissueLabel::Lens;
            }
        }
        TissueLabel::Empty
    })?;

    let sectors = SectorMap::from_grid(&grid, g.cornea_center, (0.0, 0.0));
    if sectors.surface_count() == 0 {
        return Err(Error::InvalidSpec("voxelization produced no corneal surface".into()));
    }
    Ok((grid, sectors))
}
