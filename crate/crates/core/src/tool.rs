//! Keratome blade: pose, bounded rigid actions, swept-edge contact detection
//! and tool-to-tissue distance.
//!
//! Tool frame: the blade tip at the origin, the blade pointing along +X (the
//! handle lies toward -X), the cutting width along ±Y and the blade plane
//! spanned by X and Y.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eye::{sector_for_offset, EyeGeometry, SectorId, SectorMap, TissueLabel, VoxelGrid};

/// Per-step motion: translations in mm, rotations in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
}

impl ActionDelta {
    pub const DIM: usize = 6;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { dx: a[0], dy: a[1], dz: a[2], droll: a[3], dpitch: a[4], dyaw: a[5] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.dx, self.dy, self.dz, self.droll, self.dpitch, self.dyaw]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.dx, self.dy, self.dz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Zeroes every component whose mask entry is false.
    pub fn masked(self, mask: &[bool; 6]) -> Self {
        let mut a = self.to_array();
        for (v, &m) in a.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        Self::from_array(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    /// Max |translation component| per step, mm.
    pub translation: f64,
    /// Max |rotation component| per step, radians.
    pub rotation: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { translation: 0.1, rotation: 2f64.to_radians() }
    }
}

impl ActionBounds {
    pub fn limits(&self) -> [f64; 6] {
        let (t, r) = (self.translation, self.rotation);
        [t, t, t, r, r, r]
    }

    /// Clamps each component into bounds. The flag is set if anything changed;
    /// non-finite components become zero and also set the flag.
    pub fn clamp(&self, d: ActionDelta) -> (ActionDelta, bool) {
        let mut a = d.to_array();
        let mut clamped = false;
        for (v, lim) in a.iter_mut().zip(self.limits()) {
            let c = if v.is_finite() { v.clamp(-lim, lim) } else { 0.0 };
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        (ActionDelta::from_array(a), clamped)
    }
}

/// Homogeneous rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform(Matrix4<f64>);

impl AffineTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_parts(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Self(m)
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        Self::from_parts(&Matrix3::identity(), &t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self * other`: applies `other` first.
    pub fn then_after(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform(self.0 * other.0)
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    /// Rotation-block orthonormality error `max |RᵀR - I|` and determinant.
    pub fn rigidity(&self) -> (f64, f64) {
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        (err, r.determinant())
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let (err, det) = self.rigidity();
        let bottom = self.0[(3, 0)] == 0.0 && self.0[(3, 1)] == 0.0 && self.0[(3, 2)] == 0.0 && self.0[(3, 3)] == 1.0;
        bottom && err <= tol && (det - 1.0).abs() <= tol
    }
}

/// Builds `M` from a delta: intrinsic roll (X), then pitch (new Y), then yaw
/// (new Z), followed by the translation. Out-of-bounds deltas are clamped; the
/// returned flag reports it.
pub fn delta_to_transform(d: &ActionDelta, bounds: &ActionBounds) -> (AffineTransform, bool) {
    let (d, clamped) = bounds.clamp(*d);
    let r = Rotation3::from_axis_angle(&Vector3::x_axis(), d.droll)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), d.dpitch)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), d.dyaw);
    (AffineTransform::from_parts(r.matrix(), &d.translation()), clamped)
}

/// Blade tip position and orientation (tool frame to world).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolPose {
    pub position: Point3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl ToolPose {
    pub fn new(position: Point3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    pub fn to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        self.position + self.orientation * p.coords
    }

    /// Unit blade direction (tool +X) in world coordinates.
    pub fn blade_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::x()
    }

    /// Unit width direction (tool +Y) in world coordinates.
    pub fn width_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::y()
    }

    /// Position followed by the quaternion as (w, x, y, z).
    pub fn state_vector(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [self.position.x, self.position.y, self.position.z, q.w, q.i, q.j, q.k]
    }
}

/// New position `R p + t`; orientation pre-multiplied by `R` and renormalized.
pub fn apply_transform(pose: &ToolPose, m: &AffineTransform) -> ToolPose {
    let position = m.transform_point(&pose.position);
    let r = Rotation3::from_matrix_unchecked(m.rotation());
    let q = UnitQuaternion::from_rotation_matrix(&r) * pose.orientation;
    ToolPose { position, orientation: UnitQuaternion::new_normalize(q.into_inner()) }
}

/// Conjugates `m` by a translation to `pivot`, so its rotation acts about
/// `pivot` rather than the world origin.
pub fn about_pivot(m: &AffineTransform, pivot: &Point3<f64>) -> AffineTransform {
    let r = m.rotation();
    let t = m.translation() + pivot.coords - r * pivot.coords;
    AffineTransform::from_parts(&r, &t)
}

/// Text description of a blade, as stored in tool files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    /// Cutting width, mm.
    pub width: f64,
    /// Blade length from tip to heel along the blade axis, mm.
    pub length: f64,
    /// Cutting-edge polyline vertices in the tool frame, mm.
    pub edge: Vec<[f64; 3]>,
}

impl ToolSpec {
    /// 2.75 mm angled keratome: a chevron edge from heel to tip to heel.
    pub fn keratome() -> Self {
        Self {
            name: "keratome-2.75".into(),
            width: 2.75,
            length: 1.5,
            edge: vec![[-1.5, -1.375, 0.0], [0.0, 0.0, 0.0], [-1.5, 1.375, 0.0]],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ToolSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge.len() < 2 {
            return Err(Error::InvalidConfig("tool edge needs at least two vertices".into()));
        }
        if !(self.width > 0.0) || !(self.length > 0.0) {
            return Err(Error::InvalidConfig("tool width and length must be positive".into()));
        }
        if self.edge.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("tool edge has non-finite coordinates".into()));
        }
        Ok(())
    }

    /// Resamples the edge polyline with spacing at most `max_spacing`.
    pub fn geometry(&self, max_spacing: f64) -> Result<ToolGeometry> {
        self.validate()?;
        if !(max_spacing > 0.0) {
            return Err(Error::InvalidConfig("sample spacing must be positive".into()));
        }
        let verts: Vec<Point3<f64>> = self.edge.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect();
        let mut samples = vec![verts[0]];
        for w in verts.windows(2) {
            let len = (w[1] - w[0]).norm();
            let n = ((len / max_spacing).ceil() as usize).max(1);
            for k in 1..=n {
                samples.push(w[0] + (w[1] - w[0]) * (k as f64 / n as f64));
            }
        }
        Ok(ToolGeometry { width: self.width, length: self.length, samples, spacing: max_spacing })
    }
}

/// Blade with its cutting edge resampled for a particular voxel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ToolGeometry {
    pub width: f64,
    pub length: f64,
    /// Edge sample points in the tool frame, in polyline order.
    pub samples: Vec<Point3<f64>>,
    spacing: f64,
}

impl ToolGeometry {
    /// Default keratome sampled at half the voxel size.
    pub fn keratome(voxel_size: f64) -> Self {
        ToolSpec::keratome().geometry(voxel_size / 2.0).expect("built-in tool is valid")
    }

    pub fn max_spacing(&self) -> f64 {
        self.samples.windows(2).map(|w| (w[1] - w[0]).norm()).fold(0.0, f64::max)
    }

    /// Edge samples in world coordinates.
    pub fn world_samples(&self, pose: &ToolPose) -> Vec<Point3<f64>> {
        self.samples.iter().map(|s| pose.to_world(s)).collect()
    }

    /// Spacing bound the geometry was built for.
    pub fn nominal_spacing(&self) -> f64 {
        self.spacing
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Contact {
    pub index: usize,
    /// Label before this step's removal.
    pub label: TissueLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactReport {
    /// Unique contacted voxels, ordered by sweep parameter then edge sample.
    pub contacts: Vec<Contact>,
    /// Position in `contacts` of the first cornea voxel, if any.
    pub first_cornea: Option<usize>,
    /// Edge sample whose sweep produced the first cornea contact.
    pub first_cornea_sample: Option<usize>,
}

impl ContactReport {
    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.contacts.iter().map(|c| c.index).collect()
    }

    pub fn first_cornea_voxel(&self) -> Option<usize> {
        self.first_cornea.map(|k| self.contacts[k].index)
    }

    /// Sector of the first cornea contact: the sector map's label when the voxel
    /// is on the anterior surface, otherwise the analytic azimuthal sector.
    pub fn entry_sector(&self, grid: &VoxelGrid, sectors: &SectorMap, geometry: &EyeGeometry) -> Option<SectorId> {
        let i = self.first_cornea_voxel()?;
        if let Ok(Some(s)) = sectors.classify(i) {
            return Some(s);
        }
        let c = grid.center(i);
        Some(sector_for_offset(c.x - geometry.cornea_center.x, c.y - geometry.cornea_center.y))
    }
}

/// Sweeps every edge sample from its `prev` to its `next` world position and
/// collects each tissue voxel crossed. The grid is not modified.
pub fn detect_contacts(grid: &VoxelGrid, geom: &ToolGeometry, prev: &ToolPose, next: &ToolPose) -> ContactReport {
    let mut hits: Vec<(f64, usize, usize)> = Vec::new();
    for (k, s) in geom.samples.iter().enumerate() {
        let a = prev.to_world(s);
        let b = next.to_world(s);
        if !(a.coords.iter().chain(b.coords.iter()).all(|v| v.is_finite())) {
            continue;
        }
        let dir = b - a;
        let Some(walker) = grid.walk(&a, &dir, 0.0, 1.0) else {
            continue;
        };
        for (i, t) in walker {
            if grid.is_solid(i) {
                hits.push((t, k, i));
            }
        }
    }
    hits.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut seen = std::collections::HashSet::with_capacity(hits.len());
    let mut report = ContactReport::default();
    for (_, k, i) in hits {
        if !seen.insert(i) {
            continue;
        }
        let label = grid.label(i);
        if label == TissueLabel::Cornea && report.first_cornea.is_none() {
            report.first_cornea = Some(report.contacts.len());
            report.first_cornea_sample = Some(k);
        }
        report.contacts.push(Contact { index: i, label });
    }
    report
}

/// Distance (mm) from the cutting edge to the nearest remaining tissue voxel.
pub fn tool_eye_distance(grid: &VoxelGrid, geom: &ToolGeometry, pose: &ToolPose) -> Result<f64> {
    grid.distance_to_tissue(&geom.world_samples(pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_delta_is_identity() {
        let (m, clamped) = delta_to_transform(&ActionDelta::zero(), &ActionBounds::default());
        assert_eq!(*m.matrix(), Matrix4::identity());
        assert!(!clamped);
    }

    #[test]
    fn translation_column() {
        let wide = ActionBounds { translation: 2.0, rotation: 0.035 };
        let d = ActionDelta { dx: 1.0, ..Default::default() };
        let (m, _) = delta_to_transform(&d, &wide);
        assert_eq!(m.translation(), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn roll_quarter_turn_matches_closed_form() {
        let wide = ActionBounds { translation: 0.1, rotation: 4.0 };
        let d = ActionDelta { droll: FRAC_PI_2, ..Default::default() };
        let (m, _) = delta_to_transform(&d, &wide);
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((m.rotation() - expected).abs().max() < 1e-9);
    }

    #[test]
    fn intrinsic_order() {
        let wide = ActionBounds { translation: 0.1, rotation: 4.0 };
        let (a, b, c) = (0.3, -0.2, 0.7);
        let d = ActionDelta { droll: a, dpitch: b, dyaw: c, ..Default::default() };
        let (m, _) = delta_to_transform(&d, &wide);
        let (sa, ca) = (a as f64).sin_cos();
        let (sb, cb) = (b as f64).sin_cos();
        let (sc, cc) = (c as f64).sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
        let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
        let rz = Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
        assert!((m.rotation() - rx * ry * rz).abs().max() < 1e-12);
    }

    #[test]
    fn clamps_out_of_bounds() {
        let d = ActionDelta { dx: 0.5, dyaw: -1.0, dz: f64::NAN, ..Default::default() };
        let (m, clamped) = delta_to_transform(&d, &ActionBounds::default());
        assert!(clamped);
        assert_eq!(m.translation(), Vector3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn pivot_keeps_point_fixed() {
        let wide = ActionBounds { translation: 0.1, rotation: 1.0 };
        let d = ActionDelta { droll: 0.4, dyaw: 0.2, ..Default::default() };
        let (m, _) = delta_to_transform(&d, &wide);
        let p = Point3::new(3.0, -2.0, 11.0);
        let mp = about_pivot(&m, &p);
        assert!((mp.transform_point(&p) - p).norm() < 1e-12);
    }

    #[test]
    fn keratome_sampling() {
        let g = ToolGeometry::keratome(0.2);
        assert!(g.max_spacing() <= 0.1 + 1e-12);
        assert_eq!(g.samples.first().unwrap(), &Point3::new(-1.5, -1.375, 0.0));
        assert!(g.samples.iter().any(|p| p.coords.norm() == 0.0));
    }

    #[test]
    fn tool_spec_text_round_trip() {
        let s = ToolSpec::keratome();
        let text = s.to_toml_string().unwrap();
        assert_eq!(ToolSpec::from_toml_str(&text).unwrap(), s);
        assert!(ToolSpec::from_toml_str("name = \"x\"\nwidth = 1.0\nlength = 1.0\nedge = [[0.0, 0.0, 0.0]]").is_err());
    }
}
