//! Waypoint expert that performs a rim-band incision in a chosen sector.
//!
//! Plan: pick an entry point `E` on the outer corneal sphere at the target
//! sector's azimuth and the middle of the rim band; choose a blade direction
//! that dips below the local tangent plane toward the apex; stand off 3 mm
//! behind `E` along the blade (`P0`). The tool rises clear of the eye, crosses
//! over to a point above `P0` while rotating into the entry orientation,
//! descends to `P0` and then advances along the blade until the episode ends.

use nalgebra::{Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{record_episode, DemoMeta, DemoSource, Demonstration};
use crate::env::{orientation_from_axes, Env, Outcome};
use crate::error::{Error, Result};
use crate::eye::{spherical, SectorId};
use crate::tool::{ActionDelta, ToolPose};

/// Blade dip below the tangent plane at entry.
const DIP_DEG: f64 = 20.0;
/// Stand-off from the entry point along the blade, mm.
const STANDOFF: f64 = 3.0;
/// Height of the crossing plane above the corneal apex, mm.
const SAFE_LIFT: f64 = 3.0;
/// Minimum tip clearance while crossing, mm (exceeds the blade's reach).
const CROSS_CLEARANCE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPlan {
    pub target: SectorId,
    /// Entry azimuth about the optical axis, radians.
    pub azimuth: f64,
    pub entry: Point3<f64>,
    pub pre_entry: Point3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Waypoints from the start pose to `pre_entry` (inclusive).
    pub waypoints: Vec<Point3<f64>>,
    /// Index of the waypoint above `pre_entry`; the orientation must be reached
    /// before moving past it.
    pub align_at: usize,
}

impl ExpertPlan {
    pub fn new(env: &Env, target: SectorId, start: &ToolPose, seed: u64) -> Result<Self> {
        let model = env.model();
        let g = &model.geometry;
        let cfg = env.config();
        if model.sectors.count(target) == 0 {
            return Err(Error::Planner(format!("sector {target} has no surface voxels")));
        }
        let (lo, hi) = target.azimuth_range_deg();
        let half_width = (hi - lo) / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EC7_0B0E_u64);
        let jitter = rng.gen_range(-0.5..=0.5) * half_width;
        let azimuth = (target.center_azimuth_deg() + jitter).to_radians();
        let radial = Vector3::new(azimuth.cos(), azimuth.sin(), 0.0);
        let tangent = Vector3::new(-azimuth.sin(), azimuth.cos(), 0.0);
        let theta_max = g.angular_radius();

        let full_rotation = cfg.axis_mask[3] && cfg.axis_mask[4];
        let (theta, blade) = if full_rotation {
            let band = cfg.technique.rim_band_fraction;
            let theta = (1.0 - band / 2.0) * theta_max;
            let n = spherical(theta, azimuth);
            let u = -radial * theta.cos() + Vector3::z() * theta.sin();
            let d = DIP_DEG.to_radians();
            (theta, u * d.cos() - n * d.sin())
        } else {
            // only yaw is available: keep the start elevation, turn to face the apex
            let elev = start.blade_axis().z.clamp(-1.0, 1.0).asin();
            let theta = (elev + DIP_DEG.to_radians()).clamp(0.3 * theta_max, 0.9 * theta_max);
            (theta, -radial * elev.cos() + Vector3::z() * elev.sin())
        };
        let orientation = if full_rotation {
            orientation_from_axes(&blade, &tangent)
        } else {
            let from = start.blade_axis();
            let h0 = Vector3::new(from.x, from.y, 0.0);
            let h1 = Vector3::new(blade.x, blade.y, 0.0);
            let yaw = h0.y.atan2(h0.x);
            let want = h1.y.atan2(h1.x);
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), want - yaw) * start.orientation
        };
        let blade = orientation * Vector3::x();
        let entry = g.cornea_surface_point(theta, azimuth);
        let pre_entry = entry - blade * STANDOFF;

        let safe_z = g.apex_z() + SAFE_LIFT;
        let above = Point3::new(pre_entry.x, pre_entry.y, safe_z);
        let s = start.position;
        let clear = |a: &Point3<f64>, b: &Point3<f64>| segment_clearance(g, a, b) >= CROSS_CLEARANCE;
        let mut waypoints = Vec::new();
        if !clear(&s, &above) {
            // rise, drifting toward the crossing point as far as the rise allows
            let rise = (safe_z - s.z).max(0.0);
            let dx = (above.x - s.x).clamp(-rise, rise);
            let dy = (above.y - s.y).clamp(-rise, rise);
            let drift = Point3::new(s.x + dx, s.y + dy, safe_z.max(s.z));
            let w = if clear(&s, &drift) && clear(&drift, &above) {
                drift
            } else {
                Point3::new(s.x, s.y, safe_z.max(s.z))
            };
            if !(clear(&s, &w) && clear(&w, &above)) {
                return Err(Error::Planner(format!(
                    "no clear crossing from {:?} toward sector {target}",
                    s.coords.as_slice()
                )));
            }
            waypoints.push(w);
        }
        waypoints.push(above);
        let align_at = waypoints.len() - 1;
        waypoints.push(pre_entry);
        Ok(Self { target, azimuth, entry, pre_entry, orientation, waypoints, align_at })
    }
}

/// Minimum analytic clearance of points along a segment, sampled every 0.05 mm.
fn segment_clearance(g: &crate::eye::EyeGeometry, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let n = (((b - a).norm() / 0.05).ceil() as usize).max(1);
    (0..=n)
        .map(|k| g.clearance(&(a + (b - a) * (k as f64 / n as f64))))
        .fold(f64::INFINITY, f64::min)
}

/// Closed-loop controller following an [`ExpertPlan`].
#[derive(Clone, Debug)]
pub struct ExpertController {
    target: SectorId,
    seed: u64,
    plan: Option<ExpertPlan>,
    next_waypoint: usize,
}

impl ExpertController {
    /// The plan is made from the environment state on the first call to [`act`](Self::act).
    pub fn new(target: SectorId, seed: u64) -> Self {
        Self { target, seed, plan: None, next_waypoint: 0 }
    }

    pub fn plan(&self) -> Option<&ExpertPlan> {
        self.plan.as_ref()
    }

    pub fn act(&mut self, env: &Env) -> Result<ActionDelta> {
        let pose = env.state().tool;
        if self.plan.is_none() {
            self.plan = Some(ExpertPlan::new(env, self.target, &pose, self.seed)?);
        }
        let plan = self.plan.as_ref().unwrap();
        let bounds = env.config().bounds;
        let rot = rotation_step(&pose.orientation, &plan.orientation, bounds.rotation);

        while self.next_waypoint < plan.waypoints.len()
            && (plan.waypoints[self.next_waypoint] - pose.position).norm() < 1e-6
        {
            if self.next_waypoint == plan.align_at && rot != [0.0; 3] {
                break;
            }
            self.next_waypoint += 1;
        }
        let translation = if self.next_waypoint < plan.waypoints.len() {
            let w = plan.waypoints[self.next_waypoint];
            chebyshev_step(&(w - pose.position), bounds.translation)
        } else {
            let b = pose.blade_axis();
            b * (bounds.translation / b.amax())
        };
        Ok(ActionDelta {
            dx: translation.x,
            dy: translation.y,
            dz: translation.z,
            droll: rot[0],
            dpitch: rot[1],
            dyaw: rot[2],
        })
    }
}

/// Scales `d` so that no component exceeds `limit`.
fn chebyshev_step(d: &Vector3<f64>, limit: f64) -> Vector3<f64> {
    let m = d.amax();
    if m <= limit {
        *d
    } else {
        d * (limit / m)
    }
}

/// Roll/pitch/yaw (intrinsic X→Y→Z) that rotate `from` toward `to` about the
/// shortest axis, each within `limit`. Zero once aligned.
fn rotation_step(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, limit: f64) -> [f64; 3] {
    let Some((axis, angle)) = (to * from.inverse()).axis_angle() else {
        return [0.0; 3];
    };
    if angle < 1e-12 {
        return [0.0; 3];
    }
    let mut s = 1.0;
    for _ in 0..8 {
        let r = Rotation3::from_axis_angle(&axis, angle * s);
        let (roll, pitch, yaw) = r.transpose().euler_angles();
        let e = [-roll, -pitch, -yaw];
        let m = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m <= limit {
            return e;
        }
        s *= limit / m * 0.999;
    }
    let r = Rotation3::from_axis_angle(&axis, angle * s);
    let (roll, pitch, yaw) = r.transpose().euler_angles();
    [-roll, -pitch, -yaw].map(|v| v.clamp(-limit, limit))
}

/// Runs the expert from `seed` and records the demonstration. Fails unless the
/// episode succeeds through the target sector.
pub fn scripted_expert(env: &mut Env, target: SectorId, seed: u64, surgeon: &str) -> Result<Demonstration> {
    let mut ctl = ExpertController::new(target, seed);
    let (steps, outcome, entry_sector) = record_episode(env, seed, |e| ctl.act(e))?;
    if outcome != Outcome::Success || entry_sector != Some(target) {
        let last = steps.last().map(|s| s.tool_state);
        return Err(Error::Planner(format!(
            "expert for {target} (seed {seed}) ended {outcome:?} after {} steps, entry {entry_sector:?}, final tool state {last:?}, violation at t={}",
            steps.len(),
            env.state().t
        )));
    }
    let cfg = env.config();
    let meta = DemoMeta {
        surgeon: surgeon.to_string(),
        target,
        fidelity: cfg.fidelity(),
        obs: cfg.obs,
        obs_hash: cfg.obs_hash()?,
        env_hash: cfg.hash()?,
        seed,
        source: DemoSource::Scripted,
        outcome,
        entry_sector,
    };
    Ok(Demonstration { meta, steps })
}
