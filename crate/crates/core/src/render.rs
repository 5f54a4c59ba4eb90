//! Pinhole ray-march renderer for the three-camera rig and the flattened
//! observation vector.
//!
//! Each pixel casts one ray through its center and walks the voxel grid front
//! to back; the first remaining tissue voxel sets the pixel to its palette color
//! scaled by a linear depth falloff. The blade edge is drawn on top in a color
//! no tissue uses, subject to a depth test. Pixel values are quantized to
//! `k / 255`.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eye::{EyeGeometry, TissueLabel, VoxelGrid, VoxelWalker};
use crate::tool::{tool_eye_distance, ToolGeometry, ToolPose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Gray,
    Rgb,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Gray => 1,
            ColorMode::Rgb => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub width: usize,
    pub height: usize,
    pub color: ColorMode,
    /// Vertical field of view, degrees.
    pub fov_deg: f64,
    /// Camera distance from the cornea center, in limbal radii.
    pub camera_distance: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self { width: 32, height: 32, color: ColorMode::Gray, fov_deg: 60.0, camera_distance: 3.0 }
    }
}

impl ObsConfig {
    /// 128×128 RGB frames.
    pub fn reference() -> Self {
        Self { width: 128, height: 128, color: ColorMode::Rgb, ..Self::default() }
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.height * self.channels()
    }

    /// Three frames, then position (3), quaternion w,x,y,z (4), distance (1).
    pub fn obs_len(&self) -> usize {
        3 * self.frame_len() + 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidConfig(format!(
                "frame size {}x{} is below 8x8",
                self.width, self.height
            )));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 120.0) {
            return Err(Error::InvalidConfig(format!("field of view {} outside (10, 120)", self.fov_deg)));
        }
        if !(self.camera_distance > 0.0) {
            return Err(Error::InvalidConfig("camera distance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CameraId {
    Top,
    UpperSide,
    UpperCorner,
}

impl CameraId {
    pub const ALL: [CameraId; 3] = [CameraId::Top, CameraId::UpperSide, CameraId::UpperCorner];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: CameraId,
    pub position: Point3<f64>,
    pub look_at: Point3<f64>,
    pub up: Vector3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera basis with precomputed projection scale.
#[derive(Clone, Copy, Debug)]
struct Basis {
    forward: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    tan_y: f64,
    tan_x: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidConfig("camera resolution below 8x8".into()));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 120.0) {
            return Err(Error::InvalidConfig(format!("field of view {} outside (10, 120)", self.fov_deg)));
        }
        let f = self.look_at - self.position;
        if f.norm() == 0.0 || f.cross(&self.up).norm() < 1e-9 {
            return Err(Error::InvalidConfig("degenerate camera orientation".into()));
        }
        Ok(())
    }

    fn basis(&self) -> Basis {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        let tan_y = (self.fov_deg.to_radians() / 2.0).tan();
        let tan_x = tan_y * self.width as f64 / self.height as f64;
        Basis { forward, right, up, tan_y, tan_x }
    }

    /// Unit ray direction through the center of pixel `(px, py)`, row 0 at the top.
    pub fn ray(&self, px: usize, py: usize) -> Vector3<f64> {
        self.ray_with(&self.basis(), px, py)
    }

    fn ray_with(&self, b: &Basis, px: usize, py: usize) -> Vector3<f64> {
        let x = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * b.tan_x;
        let y = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * b.tan_y;
        (b.forward + b.right * x + b.up * y).normalize()
    }

    /// Continuous pixel coordinates and ray distance of a world point, if in front.
    fn project(&self, b: &Basis, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let v = p - self.position;
        let z = v.dot(&b.forward);
        if z <= 1e-9 {
            return None;
        }
        let x = v.dot(&b.right) / z / b.tan_x;
        let y = v.dot(&b.up) / z / b.tan_y;
        let u = (x + 1.0) / 2.0 * self.width as f64;
        let w = (1.0 - y) / 2.0 * self.height as f64;
        Some((u, w, v.norm()))
    }
}

/// The three fixed cameras, all aimed at the cornea center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: [Camera; 3],
}

impl CameraRig {
    /// Top above the apex, UpperSide at 45° elevation on +X, UpperCorner at 45°
    /// elevation on the +X+Y diagonal, all looking at `target` (the cornea
    /// center) from `cfg.camera_distance` limbal radii.
    pub fn standard(target: Point3<f64>, geometry: &EyeGeometry, cfg: &ObsConfig) -> Self {
        let d = cfg.camera_distance * geometry.limbus_radius;
        let e = std::f64::consts::FRAC_PI_4;
        let cam = |id, dir: Vector3<f64>, up: Vector3<f64>| Camera {
            id,
            position: target + dir.normalize() * d,
            look_at: target,
            up,
            fov_deg: cfg.fov_deg,
            width: cfg.width,
            height: cfg.height,
        };
        Self {
            cameras: [
                cam(CameraId::Top, Vector3::z(), Vector3::y()),
                cam(CameraId::UpperSide, Vector3::new(e.cos(), 0.0, e.sin()), Vector3::z()),
                cam(
                    CameraId::UpperCorner,
                    Vector3::new(e.cos() * e.cos(), e.cos() * e.sin(), e.sin()),
                    Vector3::z(),
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }
}

/// Flat per-tissue colors. Tissue values stay below the tool color so the edge
/// is always distinguishable.
pub mod palette {
    use crate::eye::TissueLabel;

    pub const BACKGROUND_GRAY: f64 = 0.0;
    pub const TOOL_GRAY: f64 = 1.0;
    pub const BACKGROUND_RGB: [f64; 3] = [0.0, 0.0, 0.0];
    pub const TOOL_RGB: [f64; 3] = [1.0, 1.0, 0.0];
    /// Brightness multiplier at the far end of the depth range.
    pub const FAR_SHADE: f64 = 0.5;

    pub fn gray(label: TissueLabel) -> f64 {
        match label {
            TissueLabel::Empty => BACKGROUND_GRAY,
            TissueLabel::Cornea => 0.85,
            TissueLabel::Sclera => 0.6,
            TissueLabel::Iris => 0.35,
            TissueLabel::Lens => 0.45,
            TissueLabel::Vessel => 0.25,
            TissueLabel::OpticNerve => 0.15,
        }
    }

    pub fn rgb(label: TissueLabel) -> [f64; 3] {
        match label {
            TissueLabel::Empty => BACKGROUND_RGB,
            TissueLabel::Cornea => [0.7, 0.85, 0.95],
            TissueLabel::Sclera => [0.95, 0.92, 0.85],
            TissueLabel::Iris => [0.35, 0.45, 0.25],
            TissueLabel::Lens => [0.6, 0.55, 0.85],
            TissueLabel::Vessel => [0.8, 0.1, 0.1],
            TissueLabel::OpticNerve => [0.9, 0.7, 0.4],
        }
    }
}

/// Rendered image, row-major `H × W × C`, each byte `k` standing for `k / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c] as f64 / 255.0
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn to_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&b| b as f64 / 255.0)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.clone()).map(|i| i.save(path.as_ref())),
            3 => image::RgbImage::from_raw(w, h, self.data.clone()).map(|i| i.save(path.as_ref())),
            c => return Err(Error::Shape(format!("cannot encode {c}-channel frame"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Io(std::io::Error::other(e))),
            None => Err(Error::Shape("frame buffer size mismatch".into())),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth window used for shading: the look-at distance ± half the grid extent.
fn depth_window(cam: &Camera, geometry_radius: f64) -> (f64, f64) {
    let d = (cam.look_at - cam.position).norm();
    ((d - geometry_radius).max(0.0), d + geometry_radius)
}

fn shade(label: TissueLabel, t: f64, window: (f64, f64), color: ColorMode, out: &mut [u8]) {
    let (near, far) = window;
    let s = 1.0 - (1.0 - palette::FAR_SHADE) * ((t - near) / (far - near)).clamp(0.0, 1.0);
    match color {
        ColorMode::Gray => out[0] = quantize(palette::gray(label) * s),
        ColorMode::Rgb => {
            let c = palette::rgb(label);
            for k in 0..3 {
                out[k] = quantize(c[k] * s);
            }
        }
    }
}

fn background(color: ColorMode, out: &mut [u8]) {
    match color {
        ColorMode::Gray => out[0] = quantize(palette::BACKGROUND_GRAY),
        ColorMode::Rgb => {
            for (o, v) in out.iter_mut().zip(palette::BACKGROUND_RGB) {
                *o = quantize(v);
            }
        }
    }
}

fn tool_color(color: ColorMode, out: &mut [u8]) {
    match color {
        ColorMode::Gray => out[0] = quantize(palette::TOOL_GRAY),
        ColorMode::Rgb => {
            for (o, v) in out.iter_mut().zip(palette::TOOL_RGB) {
                *o = quantize(v);
            }
        }
    }
}

/// First remaining tissue voxel along a ray, plus the walker positioned just
/// past it so the march can resume if that voxel is later removed.
#[derive(Clone, Debug)]
struct PixelHit {
    voxel: usize,
    t: f64,
    resume: VoxelWalker,
}

fn march(grid: &VoxelGrid, mut walker: VoxelWalker) -> Option<PixelHit> {
    while let Some((i, t)) = walker.next() {
        if grid.is_solid(i) {
            return Some(PixelHit { voxel: i, t, resume: walker });
        }
    }
    None
}

fn start_walk(grid: &VoxelGrid, cam: &Camera, dir: &Vector3<f64>) -> Option<VoxelWalker> {
    grid.walk(&cam.position, dir, 0.0, f64::INFINITY)
}

/// Per-camera cache of ray hits. After voxels are removed only rays whose hit
/// voxel disappeared are marched further; the result equals a fresh render.
#[derive(Clone, Debug)]
struct CameraCache {
    hits: Vec<Option<PixelHit>>,
    depth: Vec<f64>,
    base: Frame,
}

impl CameraCache {
    fn build(grid: &VoxelGrid, cam: &Camera, color: ColorMode, radius: f64) -> Self {
        let b = cam.basis();
        let n = cam.width * cam.height;
        let mut hits = Vec::with_capacity(n);
        for py in 0..cam.height {
            for px in 0..cam.width {
                let dir = cam.ray_with(&b, px, py);
                hits.push(start_walk(grid, cam, &dir).and_then(|w| march(grid, w)));
            }
        }
        let mut cache = Self {
            hits,
            depth: vec![f64::INFINITY; n],
            base: Frame::filled(cam.width, cam.height, color.channels(), 0),
        };
        cache.shade_all(grid, cam, color, radius);
        cache
    }

    fn shade_all(&mut self, grid: &VoxelGrid, cam: &Camera, color: ColorMode, radius: f64) {
        let window = depth_window(cam, radius);
        let c = color.channels();
        for (k, hit) in self.hits.iter().enumerate() {
            let out = &mut self.base.data[k * c..(k + 1) * c];
            match hit {
                Some(h) => {
                    shade(grid.label(h.voxel), h.t, window, color, out);
                    self.depth[k] = h.t;
                }
                None => {
                    background(color, out);
                    self.depth[k] = f64::INFINITY;
                }
            }
        }
    }

    /// Re-marches rays whose hit voxel has been removed. Returns whether any
    /// pixel changed.
    fn refresh(&mut self, grid: &VoxelGrid, cam: &Camera, color: ColorMode, radius: f64) -> bool {
        let window = depth_window(cam, radius);
        let c = color.channels();
        let mut changed = false;
        for k in 0..self.hits.len() {
            let stale = matches!(&self.hits[k], Some(h) if !grid.is_solid(h.voxel));
            if !stale {
                continue;
            }
            let h = self.hits[k].take().unwrap();
            self.hits[k] = march(grid, h.resume);
            let out = &mut self.base.data[k * c..(k + 1) * c];
            match &self.hits[k] {
                Some(h) => {
                    shade(grid.label(h.voxel), h.t, window, color, out);
                    self.depth[k] = h.t;
                }
                None => {
                    background(color, out);
                    self.depth[k] = f64::INFINITY;
                }
            }
            changed = true;
        }
        changed
    }
}

/// Draws the blade edge polyline over `frame`, pixel by pixel with a depth test
/// against `depth` (ray distance of the tissue hit per pixel).
fn overlay_tool(frame: &mut Frame, depth: &[f64], cam: &Camera, geom: &ToolGeometry, pose: &ToolPose, color: ColorMode) {
    let b = cam.basis();
    let pts: Vec<Option<(f64, f64, f64)>> = geom
        .samples
        .iter()
        .map(|s| cam.project(&b, &pose.to_world(s)))
        .collect();
    let c = color.channels();
    let plot = |u: f64, v: f64, dist: f64, frame: &mut Frame| {
        if !(u >= 0.0 && v >= 0.0) {
            return;
        }
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        if x >= cam.width || y >= cam.height {
            return;
        }
        let k = y * cam.width + x;
        if dist <= depth[k] {
            tool_color(color, &mut frame.data[k * c..(k + 1) * c]);
        }
    };
    for (i, p) in pts.iter().enumerate() {
        let Some((u0, v0, d0)) = *p else { continue };
        plot(u0, v0, d0, frame);
        if let Some(Some((u1, v1, d1))) = pts.get(i + 1) {
            let steps = ((u1 - u0).abs().max((v1 - v0).abs()).ceil() as usize).clamp(1, 4 * (cam.width + cam.height));
            for s in 1..steps {
                let f = s as f64 / steps as f64;
                plot(u0 + (u1 - u0) * f, v0 + (v1 - v0) * f, d0 + (d1 - d0) * f, frame);
            }
        }
    }
}

/// Renders one camera from scratch.
pub fn render(grid: &VoxelGrid, geom: &ToolGeometry, pose: Option<&ToolPose>, cam: &Camera, color: ColorMode) -> Frame {
    let radius = grid.extent().max() / 2.0;
    let cache = CameraCache::build(grid, cam, color, radius);
    let mut frame = cache.base.clone();
    if let Some(pose) = pose {
        overlay_tool(&mut frame, &cache.depth, cam, geom, pose, color);
    }
    frame
}

/// Full agent observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frames: [Frame; 3],
    pub tool_state: [f64; 7],
    pub distance: f64,
}

impl Observation {
    /// Frames (row-major, channel-last) in rig order, then tool state, then distance.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.frames.iter().map(|f| f.data.len()).sum::<usize>() + 8);
        for f in &self.frames {
            v.extend(f.to_f64());
        }
        v.extend_from_slice(&self.tool_state);
        v.push(self.distance);
        v
    }
}

/// Incremental renderer bound to one rig. Tissue renders are cached across
/// steps; call [`Renderer::reset`] whenever the grid is replaced or restored.
#[derive(Clone, Debug)]
pub struct Renderer {
    rig: CameraRig,
    cfg: ObsConfig,
    radius: f64,
    caches: Option<Vec<CameraCache>>,
}

impl Renderer {
    pub fn new(rig: CameraRig, cfg: ObsConfig) -> Result<Self> {
        cfg.validate()?;
        rig.validate()?;
        Ok(Self { rig, cfg, radius: 0.0, caches: None })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn config(&self) -> &ObsConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.caches = None;
    }

    /// Renders all three frames, reusing cached tissue hits.
    pub fn frames(&mut self, grid: &VoxelGrid, geom: &ToolGeometry, pose: &ToolPose) -> [Frame; 3] {
        let color = self.cfg.color;
        match &mut self.caches {
            Some(caches) => {
                for (cache, cam) in caches.iter_mut().zip(&self.rig.cameras) {
                    cache.refresh(grid, cam, color, self.radius);
                }
            }
            None => {
                self.radius = grid.extent().max() / 2.0;
                self.caches = Some(
                    self.rig
                        .cameras
                        .iter()
                        .map(|cam| CameraCache::build(grid, cam, color, self.radius))
                        .collect(),
                );
            }
        }
        let caches = self.caches.as_ref().unwrap();
        std::array::from_fn(|k| {
            let mut f = caches[k].base.clone();
            overlay_tool(&mut f, &caches[k].depth, &self.rig.cameras[k], geom, pose, color);
            f
        })
    }

    pub fn observe(&mut self, grid: &VoxelGrid, geom: &ToolGeometry, pose: &ToolPose) -> Result<Observation> {
        let frames = self.frames(grid, geom, pose);
        let distance = tool_eye_distance(grid, geom, pose)?;
        Ok(Observation { frames, tool_state: pose.state_vector(), distance })
    }
}

/// Stateless observation assembly (renders everything from scratch).
pub fn assemble_observation(
    grid: &VoxelGrid,
    geom: &ToolGeometry,
    pose: &ToolPose,
    rig: &CameraRig,
    cfg: &ObsConfig,
) -> Result<Observation> {
    let mut r = Renderer::new(rig.clone(), *cfg)?;
    r.observe(grid, geom, pose)
}
