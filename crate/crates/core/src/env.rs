//! Incision environment: episode lifecycle, contact classification, reward and
//! termination.
//!
//! Per step exactly one reward case applies:
//!
//! | case | condition                                   | reward                  |
//! |------|---------------------------------------------|-------------------------|
//! | a    | correct hit, counter still below β after it | `r_correct`             |
//! | b    | correct hit bringing the counter to β       | `r_success`, terminal   |
//! | c    | wrong hit                                   | `r_fail`, terminal      |
//! | d    | anything else                               | `-k_time + Δd`          |
//!
//! `Δd = |p_prev - p_C| - |p_next - p_C|` for the blade tip and the pristine
//! cornea center `p_C`. Reaching `max_steps` ends the episode with case (d).

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eye::{build_eye, spherical, EyeGeometry, EyeSpec, Fidelity, SectorId, SectorMap, TissueLabel, VoxelGrid};
use crate::hash::config_hash;
use crate::render::{CameraRig, ObsConfig, Observation, Renderer};
use crate::tool::{
    about_pivot, apply_transform, delta_to_transform, detect_contacts, tool_eye_distance, ActionBounds, ActionDelta,
    ContactReport, ToolGeometry, ToolPose, ToolSpec,
};

/// Entry-technique rule applied to the first cornea contact in high-poly
/// episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueRule {
    /// Allowed entry band as a fraction of the cornea's angular radius, measured
    /// inward from the limbus.
    pub rim_band_fraction: f64,
    /// Max angle between the blade axis and the local tangent plane, degrees.
    pub max_entry_angle_deg: f64,
}

impl Default for TechniqueRule {
    fn default() -> Self {
        Self { rim_band_fraction: 0.2, max_entry_angle_deg: 35.0 }
    }
}

/// Random start pose distribution, relative to the cornea center `p_C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartConfig {
    /// Tip distance from `p_C`, in limbal radii.
    pub distance_min: f64,
    pub distance_max: f64,
    /// Polar angle of the tip about `p_C`, degrees from +Z.
    pub polar_min_deg: f64,
    pub polar_max_deg: f64,
    /// Upward tilt of the blade from the line toward `p_C`, degrees.
    pub pitch_up_deg: f64,
    /// Uniform yaw and pitch jitter half-width, degrees.
    pub jitter_deg: f64,
}

impl Default for StartConfig {
    fn default() -> Self {
        Self {
            distance_min: 2.0,
            distance_max: 3.0,
            polar_min_deg: 85.0,
            polar_max_deg: 100.0,
            pitch_up_deg: 15.0,
            jitter_deg: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub eye: EyeSpec,
    pub r_correct: f64,
    pub r_success: f64,
    pub r_fail: f64,
    pub k_time: f64,
    pub beta: u32,
    pub gamma: f64,
    pub max_steps: u32,
    /// Enabled action components (dx, dy, dz, roll, pitch, yaw).
    pub axis_mask: [bool; 6],
    pub bounds: ActionBounds,
    pub obs: ObsConfig,
    pub technique: TechniqueRule,
    pub start: StartConfig,
    pub tool: ToolSpec,
}

impl EnvConfig {
    pub fn low_poly() -> Self {
        Self {
            eye: EyeSpec::low_poly(),
            r_correct: 0.1,
            r_success: 10.0,
            r_fail: -10.0,
            k_time: 0.001,
            beta: 20,
            gamma: 0.99,
            max_steps: 500,
            axis_mask: [true, true, true, false, false, true],
            bounds: ActionBounds::default(),
            obs: ObsConfig::default(),
            technique: TechniqueRule::default(),
            start: StartConfig::default(),
            tool: ToolSpec::keratome(),
        }
    }

    pub fn high_poly() -> Self {
        Self { eye: EyeSpec::high_poly(), axis_mask: [true; 6], ..Self::low_poly() }
    }

    pub fn for_fidelity(f: Fidelity) -> Self {
        match f {
            Fidelity::LowPoly => Self::low_poly(),
            Fidelity::HighPoly => Self::high_poly(),
        }
    }

    pub fn fidelity(&self) -> Fidelity {
        self.eye.fidelity
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.r_success > self.r_correct && self.r_correct > 0.0 && 0.0 > self.r_fail) {
            return bad("rewards must satisfy r_success > r_correct > 0 > r_fail");
        }
        if !(self.k_time >= 0.0) {
            return bad("k_time must be non-negative");
        }
        if self.beta < 1 {
            return bad("beta must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1");
        }
        if !(self.bounds.translation > 0.0 && self.bounds.rotation > 0.0) {
            return bad("action bounds must be positive");
        }
        let t = &self.technique;
        if !(t.rim_band_fraction > 0.0 && t.rim_band_fraction <= 1.0) {
            return bad("rim band fraction must lie in (0, 1]");
        }
        if !(t.max_entry_angle_deg > 0.0 && t.max_entry_angle_deg <= 90.0) {
            return bad("max entry angle must lie in (0, 90]");
        }
        let s = &self.start;
        if !(s.distance_min > 0.0 && s.distance_min <= s.distance_max) || !(s.polar_min_deg <= s.polar_max_deg) {
            return bad("start distance/polar ranges are inverted or non-positive");
        }
        self.obs.validate()?;
        self.tool.validate()?;
        self.eye.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: EnvConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Hash of the observation layout only; demonstrations and checkpoints are
    /// exchangeable between configs that agree on it.
    pub fn obs_hash(&self) -> Result<String> {
        config_hash(&self.obs)
    }

    /// Tool geometry resampled at half this config's voxel size.
    pub fn tool_geometry(&self) -> Result<ToolGeometry> {
        self.tool.geometry(self.eye.voxel_size / 2.0)
    }
}

/// Immutable eye shared by every environment built from the same spec.
#[derive(Debug)]
pub struct EyeModel {
    pub grid: VoxelGrid,
    pub sectors: SectorMap,
    pub geometry: EyeGeometry,
    /// Mean of the pristine cornea voxel centers.
    pub cornea_center: Point3<f64>,
}

impl EyeModel {
    pub fn build(spec: &EyeSpec) -> Result<Self> {
        let (grid, sectors) = build_eye(spec)?;
        Self::from_parts(grid, sectors, spec.geometry())
    }

    pub fn from_parts(grid: VoxelGrid, sectors: SectorMap, geometry: EyeGeometry) -> Result<Self> {
        if grid.removed_count() != 0 {
            return Err(Error::Contract("eye model grid must be pristine".into()));
        }
        let cornea_center = grid.cornea_center()?;
        Ok(Self { grid, sectors, geometry, cornea_center })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitClass {
    None,
    Correct,
    Wrong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepEvent {
    CorrectHit,
    Success,
    Fail,
    Shaping,
    Timeout,
}

impl StepEvent {
    pub fn is_terminal(self) -> bool {
        matches!(self, StepEvent::Success | StepEvent::Fail | StepEvent::Timeout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Fail,
    Timeout,
}

/// Why a hit was classified wrong.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Tissue(TissueLabel),
    OutsideRimBand,
    EntryAngle,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub r_env: f64,
    pub terminal: bool,
    pub event: StepEvent,
    /// Set on the step of the first cornea contact in the episode.
    pub entry_sector: Option<SectorId>,
    pub hit: HitClass,
    pub violation: Option<Violation>,
    /// The action was clamped into bounds.
    pub clamped: bool,
    pub contacts: usize,
    pub hit_count: u32,
}

/// Classifies the contacts of one step.
///
/// Any non-cornea tissue is wrong. In high-poly builds the first cornea contact
/// of the episode must also lie in the limbal rim band with the blade within
/// the allowed angle of the local tangent plane.
pub fn classify_hit(
    config: &EnvConfig,
    contacts: &ContactReport,
    grid: &VoxelGrid,
    geometry: &EyeGeometry,
    blade_axis: &Vector3<f64>,
    first_entry: bool,
) -> (HitClass, Option<Violation>) {
    if contacts.is_empty() {
        return (HitClass::None, None);
    }
    if let Some(c) = contacts.contacts.iter().find(|c| c.label != TissueLabel::Cornea) {
        return (HitClass::Wrong, Some(Violation::Tissue(c.label)));
    }
    if config.fidelity() == Fidelity::HighPoly && first_entry {
        if let Some(i) = contacts.first_cornea_voxel() {
            let p = grid.center(i);
            let theta = geometry.polar_angle(&p);
            let band_start = (1.0 - config.technique.rim_band_fraction) * geometry.angular_radius();
            if theta < band_start {
                return (HitClass::Wrong, Some(Violation::OutsideRimBand));
            }
            let n = geometry.cornea_normal(&p);
            let b = blade_axis.normalize();
            let angle = b.dot(&n).abs().clamp(0.0, 1.0).asin().to_degrees();
            if angle > config.technique.max_entry_angle_deg {
                return (HitClass::Wrong, Some(Violation::EntryAngle));
            }
        }
    }
    (HitClass::Correct, None)
}

/// Reward case selection shared by the environment and exposed for tests.
/// Returns the reward, event and the counter after the step.
pub fn reward_case(config: &EnvConfig, hit: HitClass, hit_count: u32, delta_d: f64) -> (f64, StepEvent, u32) {
    match hit {
        HitClass::Correct if hit_count + 1 >= config.beta => (config.r_success, StepEvent::Success, config.beta),
        HitClass::Correct => (config.r_correct, StepEvent::CorrectHit, hit_count + 1),
        HitClass::Wrong => (config.r_fail, StepEvent::Fail, hit_count),
        HitClass::None => (-config.k_time + delta_d, StepEvent::Shaping, hit_count),
    }
}

/// Hidden episode state.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub grid: VoxelGrid,
    pub tool: ToolPose,
    pub hit_count: u32,
    pub t: u32,
    pub outcome: Option<Outcome>,
    pub entry_sector: Option<SectorId>,
    pub cornea_contacted: bool,
}

pub struct Env {
    config: EnvConfig,
    model: Arc<EyeModel>,
    geom: ToolGeometry,
    renderer: Renderer,
    state: EnvState,
    seed: u64,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let model = Arc::new(EyeModel::build(&config.eye)?);
        Self::with_model(config, model)
    }

    /// Builds an environment around an existing (possibly synthetic) eye.
    pub fn with_model(config: EnvConfig, model: Arc<EyeModel>) -> Result<Self> {
        config.obs.validate()?;
        let geom = config.tool_geometry()?;
        let rig = CameraRig::standard(model.cornea_center, &model.geometry, &config.obs);
        let renderer = Renderer::new(rig, config.obs)?;
        let state = EnvState {
            grid: model.grid.clone(),
            tool: ToolPose::new(Point3::origin(), UnitQuaternion::identity()),
            hit_count: 0,
            t: 0,
            outcome: None,
            entry_sector: None,
            cornea_contacted: false,
        };
        Ok(Self { config, model, geom, renderer, state, seed: 0 })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<EyeModel> {
        &self.model
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn tool_geometry(&self) -> &ToolGeometry {
        &self.geom
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn obs_len(&self) -> usize {
        self.config.obs.obs_len()
    }

    pub fn is_terminal(&self) -> bool {
        self.state.outcome.is_some()
    }

    /// Seeded start pose: tip on a shell around `p_C`, blade aimed at `p_C`
    /// and tilted up, width axis horizontal.
    pub fn start_pose(&self, seed: u64) -> ToolPose {
        let s = &self.config.start;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(s.distance_min..=s.distance_max) * self.model.geometry.limbus_radius;
        let theta = rng.gen_range(s.polar_min_deg..=s.polar_max_deg).to_radians();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let jy = rng.gen_range(-s.jitter_deg..=s.jitter_deg).to_radians();
        let jp = rng.gen_range(-s.jitter_deg..=s.jitter_deg).to_radians();
        let p_c = self.model.cornea_center;
        let position = p_c + spherical(theta, phi) * r;
        let toward = (p_c - position).normalize();
        let orientation = aim(&toward, s.pitch_up_deg.to_radians() + jp, jy);
        ToolPose::new(position, orientation)
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let pose = self.start_pose(seed);
        self.reset_with_pose(seed, pose)
    }

    /// Resets to a caller-chosen start pose.
    pub fn reset_with_pose(&mut self, seed: u64, pose: ToolPose) -> Result<Observation> {
        self.seed = seed;
        self.state = EnvState {
            grid: self.model.grid.clone(),
            tool: pose,
            hit_count: 0,
            t: 0,
            outcome: None,
            entry_sector: None,
            cornea_contacted: false,
        };
        self.renderer.reset();
        self.observe()
    }

    /// Overrides the hit counter and step index (for scripted checks).
    pub fn set_counters(&mut self, hit_count: u32, t: u32) -> Result<()> {
        if hit_count > self.config.beta || t > self.config.max_steps {
            return Err(Error::Contract("counters out of range".into()));
        }
        self.state.hit_count = hit_count;
        self.state.t = t;
        Ok(())
    }

    pub fn observe(&mut self) -> Result<Observation> {
        self.renderer.observe(&self.state.grid, &self.geom, &self.state.tool)
    }

    pub fn distance(&self) -> Result<f64> {
        tool_eye_distance(&self.state.grid, &self.geom, &self.state.tool)
    }

    /// Applies an action. The translation is in world axes; the rotation is
    /// about world axes through the blade tip.
    pub fn step(&mut self, action: &ActionDelta) -> Result<StepResult> {
        if self.is_terminal() {
            return Err(Error::Contract("step called on a terminal episode".into()));
        }
        let masked = action.masked(&self.config.axis_mask);
        let (m, clamped) = delta_to_transform(&masked, &self.config.bounds);
        let prev = self.state.tool;
        let m = about_pivot(&m, &prev.position);
        let next = apply_transform(&prev, &m);

        let report = detect_contacts(&self.state.grid, &self.geom, &prev, &next);
        let first_entry = !self.state.cornea_contacted && report.first_cornea.is_some();
        let (hit, violation) = classify_hit(
            &self.config,
            &report,
            &self.state.grid,
            &self.model.geometry,
            &next.blade_axis(),
            first_entry,
        );
        let mut entry_sector = None;
        if first_entry {
            self.state.cornea_contacted = true;
            let s = report.entry_sector(&self.state.grid, &self.model.sectors, &self.model.geometry);
            self.state.entry_sector = s;
            entry_sector = s;
        }

        let p_c = self.model.cornea_center;
        let delta_d = (prev.position - p_c).norm() - (next.position - p_c).norm();
        let (r_env, mut event, hit_count) = reward_case(&self.config, hit, self.state.hit_count, delta_d);

        self.state.grid.remove_voxels(&report.indices());
        self.state.tool = next;
        self.state.hit_count = hit_count;
        self.state.t += 1;
        self.state.outcome = match event {
            StepEvent::Success => Some(Outcome::Success),
            StepEvent::Fail => Some(Outcome::Fail),
            _ if self.state.t >= self.config.max_steps => {
                event = StepEvent::Timeout;
                Some(Outcome::Timeout)
            }
            _ => None,
        };
        let observation = self.observe()?;
        Ok(StepResult {
            observation,
            r_env,
            terminal: event.is_terminal(),
            event,
            entry_sector,
            hit,
            violation,
            clamped,
            contacts: report.contacts.len(),
            hit_count,
        })
    }
}

/// Orientation whose blade axis points along `toward` raised by `pitch_up`
/// radians, rotated by `yaw` about world Z, with the width axis horizontal.
pub fn aim(toward: &Vector3<f64>, pitch_up: f64, yaw: f64) -> UnitQuaternion<f64> {
    let horiz = Vector3::new(toward.x, toward.y, 0.0);
    let heading = if horiz.norm() > 1e-9 { horiz.normalize() } else { Vector3::x() };
    let elev = toward.z.clamp(-1.0, 1.0).asin() + pitch_up;
    let heading = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * heading;
    let blade = heading * elev.cos() + Vector3::z() * elev.sin();
    orientation_from_axes(&blade, &Vector3::z().cross(&heading))
}

/// Orientation mapping tool +X to `blade` and tool +Y to `width`
/// (orthogonalized against `blade`).
pub fn orientation_from_axes(blade: &Vector3<f64>, width: &Vector3<f64>) -> UnitQuaternion<f64> {
    let x = blade.normalize();
    let mut y = width - x * width.dot(&x);
    if y.norm() < 1e-9 {
        let helper = if x.z.abs() < 0.9 { Vector3::z() } else { Vector3::y() };
        y = helper.cross(&x);
    }
    let y = y.normalize();
    let z = x.cross(&y);
    let r = Rotation3::from_basis_unchecked(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&r)
}

/// Axis-angle rotation taking orientation `from` to `to` (world frame), as a
/// unit axis and an angle in [0, π].
pub fn rotation_between(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>) -> Option<(Unit<Vector3<f64>>, f64)> {
    (to * from.inverse()).axis_angle()
}
