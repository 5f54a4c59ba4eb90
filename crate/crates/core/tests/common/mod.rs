//! Independent oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use keratome_core::env::{Env, EnvConfig, EyeModel, HitClass, StepEvent};
use keratome_core::eye::{EyeSpec, Half, SectorMap, TissueLabel, VoxelGrid};
use keratome_core::tool::{
    about_pivot, apply_transform, delta_to_transform, detect_contacts, ActionBounds, ActionDelta, AffineTransform,
    ContactReport, ToolGeometry, ToolPose,
};
use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use keratome_core::learn::adam::{Adam, AdamConfig};
use keratome_core::learn::gail::{discriminator_update, DiscInput, DiscUpdateConfig, Discriminator};
use keratome_core::learn::mlp::{Activation, Mlp};
use keratome_core::learn::policy::{ActorCritic, PolicyArch, PpoBatch, PpoConfig};
use ndarray::{Array1, Array2};
use rand_distr::StandardNormal;

/// Piecewise reward written directly from the case table.
pub fn eq2(cfg: &EnvConfig, class: HitClass, hit_count: u32, delta_d: f64) -> (f64, bool) {
    match class {
        HitClass::Correct => {
            if hit_count + 1 < cfg.beta {
                (cfg.r_correct, false)
            } else {
                (cfg.r_success, true)
            }
        }
        HitClass::Wrong => (cfg.r_fail, true),
        HitClass::None => (delta_d - cfg.k_time, false),
    }
}

/// A 24³ grid at 0.5 mm: a cornea slab at x < 0 and a sclera slab at x ≥ 2,
/// both occupying 1 ≤ z < 2.
pub fn slab_env(beta: u32) -> Env {
    let grid = VoxelGrid::from_fn([24, 24, 24], 0.5, Point3::new(-6.0, -6.0, -6.0), |c| {
        if (1.0..2.0).contains(&c.z) && c.x < 0.0 {
            TissueLabel::Cornea
        } else if (1.0..2.0).contains(&c.z) && c.x >= 2.0 {
            TissueLabel::Sclera
        } else {
            TissueLabel::Empty
        }
    })
    .unwrap();
    let sectors = SectorMap::from_grid(&grid, Point3::new(-3.0, 0.0, 2.0), (0.0, 0.0));
    let model = EyeModel::from_parts(grid, sectors, EyeSpec::low_poly().geometry()).unwrap();
    let mut cfg = EnvConfig::low_poly();
    cfg.beta = beta;
    cfg.max_steps = 10_000;
    Env::with_model(cfg, Arc::new(model)).unwrap()
}

/// Steps the slab environment through every combination of contact class,
/// counter, β and Δd and compares with [`eq2`]. Returns (cases, mismatches).
pub fn reward_grid() -> (usize, Vec<String>) {
    let mut cases = 0;
    let mut bad = Vec::new();
    for beta in [1u32, 5, 20] {
        let mut env = slab_env(beta);
        let p_c = env.model().cornea_center;
        for class in [HitClass::None, HitClass::Correct, HitClass::Wrong] {
            for hit in 0..beta {
                for dd in [-0.1, 0.0, 0.1] {
                    let (start, action) = match class {
                        // radial motion along +Z through p_C changes |p - p_C| by the step length
                        HitClass::None => (p_c + Vector3::new(0.0, 0.0, 3.0), ActionDelta { dz: -dd, ..ActionDelta::zero() }),
                        HitClass::Correct => (
                            Point3::new(-1.0, 0.0, 2.05),
                            ActionDelta { dx: dd, dz: -0.1, ..ActionDelta::zero() },
                        ),
                        HitClass::Wrong => (
                            Point3::new(4.5, 0.0, 2.05),
                            ActionDelta { dx: dd, dz: -0.1, ..ActionDelta::zero() },
                        ),
                    };
                    let pose = ToolPose::new(start, UnitQuaternion::identity());
                    env.reset_with_pose(0, pose).unwrap();
                    env.set_counters(hit, 0).unwrap();
                    let r = env.step(&action).unwrap();
                    let next = env.state().tool.position;
                    let delta_d = (start - p_c).norm() - (next - p_c).norm();
                    let (want, terminal) = eq2(env.config(), class, hit, delta_d);
                    cases += 1;
                    let ok = r.hit == class
                        && (r.r_env - want).abs() <= 1e-12
                        && r.terminal == terminal
                        && (class != HitClass::Wrong || r.event == StepEvent::Fail);
                    if !ok {
                        bad.push(format!(
                            "beta {beta} {class:?} hit {hit} dd {dd}: got {:?} {} terminal {}, want {want} terminal {terminal}",
                            r.hit, r.r_env, r.terminal
                        ));
                    }
                }
            }
        }
    }
    (cases, bad)
}

fn random_delta(rng: &mut ChaCha8Rng, bounds: &ActionBounds) -> ActionDelta {
    let l = bounds.limits();
    let mut a = [0.0; 6];
    for k in 0..6 {
        a[k] = rng.gen_range(-l[k]..=l[k]);
    }
    ActionDelta::from_array(a)
}

fn random_pose(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ToolPose {
    let p = Point3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let q = UnitQuaternion::from_scaled_axis(axis * std::f64::consts::PI);
    ToolPose::new(p, q)
}

/// Largest errors over `n` random action sequences: composed transform vs
/// sequential application (position and rotation), and orthonormality of
/// every per-step and composed rotation block.
pub fn kinematics_errors(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = ActionBounds::default();
    let (mut homo, mut ortho) = (0.0f64, 0.0f64);
    for s in 0..n {
        let start = random_pose(&mut rng, -15.0, 15.0);
        let len = rng.gen_range(1..=16);
        let pivoted = s % 2 == 0;
        let mut pose = start;
        let mut composed = AffineTransform::identity();
        for _ in 0..len {
            let (m, clamped) = delta_to_transform(&random_delta(&mut rng, &bounds), &bounds);
            assert!(!clamped);
            let m = if pivoted { about_pivot(&m, &pose.position) } else { m };
            ortho = ortho.max(m.rigidity().0).max((m.rigidity().1 - 1.0).abs());
            pose = apply_transform(&pose, &m);
            composed = m.then_after(&composed);
        }
        let (err, det) = composed.rigidity();
        ortho = ortho.max(err).max((det - 1.0).abs());
        let p = composed.transform_point(&start.position);
        homo = homo.max((p - pose.position).amax());
        let r_seq: Matrix3<f64> = pose.orientation.to_rotation_matrix().into_inner();
        let r_comp = composed.rotation() * start.orientation.to_rotation_matrix().into_inner();
        homo = homo.max((r_seq - r_comp).amax());
    }
    (homo, ortho)
}

/// Segment vs axis-aligned box (slab test), closed on both.
fn segment_hits_box(a: &Point3<f64>, b: &Point3<f64>, lo: &Point3<f64>, hi: &Point3<f64>) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..3 {
        let d = b[k] - a[k];
        if d == 0.0 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return false;
            }
        } else {
            let (u, v) = ((lo[k] - a[k]) / d, (hi[k] - a[k]) / d);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
    }
    t0 <= t1
}

pub struct SweepCheck {
    pub trials: usize,
    /// Solid voxels found by the dense brute-force sweep.
    pub dense_hits: usize,
    /// Dense-sweep voxels absent from the contact report.
    pub missed: usize,
    /// Reported voxels not touched by any sample segment.
    pub spurious: usize,
}

/// Random 32³ grids at the high-poly voxel size; random in-bounds actions
/// applied about the tip. Every voxel that a densely sampled sample-point path
/// passes through must be reported, and every report must be an actual
/// segment–voxel intersection.
pub fn sweep_check(trials: usize, seed: u64) -> SweepCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vs = 0.2;
    let origin = Point3::new(-3.2, -3.2, -3.2);
    let bounds = ActionBounds::default();
    let geom = ToolGeometry::keratome(vs);
    let mut out = SweepCheck { trials, dense_hits: 0, missed: 0, spurious: 0 };
    let mut grid = None;
    for trial in 0..trials {
        if trial % 50 == 0 {
            let fill = rng.gen_range(0.05..0.5);
            let mut r2 = ChaCha8Rng::seed_from_u64(rng.gen());
            grid = Some(
                VoxelGrid::from_fn([32, 32, 32], vs, origin, |_| {
                    if r2.gen_bool(fill) {
                        TissueLabel::Cornea
                    } else {
                        TissueLabel::Empty
                    }
                })
                .unwrap(),
            );
        }
        let grid = grid.as_ref().unwrap();
        let prev = random_pose(&mut rng, -1.2, 1.2);
        let (m, _) = delta_to_transform(&random_delta(&mut rng, &bounds), &bounds);
        let next = apply_transform(&prev, &about_pivot(&m, &prev.position));
        let report: ContactReport = detect_contacts(grid, &geom, &prev, &next);
        let reported: HashSet<usize> = report.indices().into_iter().collect();
        assert_eq!(reported.len(), report.contacts.len(), "duplicate contacts");
        let mut dense = HashSet::new();
        let segments: Vec<(Point3<f64>, Point3<f64>)> =
            geom.samples.iter().map(|s| (prev.to_world(s), next.to_world(s))).collect();
        for (a, b) in &segments {
            const N: usize = 2000;
            for k in 0..=N {
                let p = a + (b - a) * (k as f64 / N as f64);
                if let Some(i) = grid.locate(&p) {
                    if grid.is_solid(i) {
                        dense.insert(i);
                    }
                }
            }
        }
        out.dense_hits += dense.len();
        out.missed += dense.difference(&reported).count();
        for &i in &reported {
            let c = grid.center(i);
            let h = Vector3::repeat(vs / 2.0);
            let (lo, hi) = (c - h, c + h);
            if !grid.is_solid(i) || !segments.iter().any(|(a, b)| segment_hits_box(a, b, &lo, &hi)) {
                out.spurious += 1;
            }
        }
    }
    out
}

/// Fraction of uniformly random entries (uniform azimuth and rim-band polar
/// angle on the corneal sphere, tip driven inward along the normal) whose entry
/// sector falls in the left half.
pub fn left_entry_fraction(env: &Env, n: usize, seed: u64) -> (f64, usize) {
    let model = env.model();
    let g = &model.geometry;
    let geom = ToolGeometry::keratome(model.grid.voxel_size());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut left, mut entered) = (0usize, 0usize);
    let theta_max = g.angular_radius();
    for _ in 0..n {
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        // uniform on the spherical cap
        let c = rng.gen_range(theta_max.cos()..1.0);
        let theta = c.acos();
        let surf = g.cornea_surface_point(theta, phi);
        let nrm = g.cornea_normal(&surf);
        // blade along the inward normal, tip just outside the surface
        let blade = -nrm;
        let q = UnitQuaternion::rotation_between(&Vector3::x(), &blade).unwrap_or_else(UnitQuaternion::identity);
        let prev = ToolPose::new(surf + nrm * 0.3, q);
        let next = ToolPose::new(surf - nrm * 0.3, q);
        let report = detect_contacts(&model.grid, &geom, &prev, &next);
        if let Some(s) = report.entry_sector(&model.grid, &model.sectors, g) {
            entered += 1;
            if s.half() == Half::Left {
                left += 1;
            }
        }
    }
    (left as f64 / entered.max(1) as f64, entered)
}

const H: f64 = 1e-5;

/// Central differences of `loss` with respect to every parameter, compared to
/// `analytic` (same slice layout). Returns the worst relative error, with the
/// denominator floored at 1e-6.
fn worst_rel_error<M: Clone>(
    model: &M,
    slices_mut: impl Fn(&mut M) -> Vec<&mut [f64]>,
    loss: impl Fn(&M) -> f64,
    analytic: &[Vec<f64>],
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let sizes: Vec<usize> = slices_mut(&mut probe).iter().map(|s| s.len()).collect();
    assert_eq!(sizes, analytic.iter().map(Vec::len).collect::<Vec<_>>());
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = slices_mut(&mut probe)[k][i];
            slices_mut(&mut probe)[k][i] = orig + H;
            let lp = loss(&probe);
            slices_mut(&mut probe)[k][i] = orig - H;
            let lm = loss(&probe);
            slices_mut(&mut probe)[k][i] = orig;
            let num = (lp - lm) / (2.0 * H);
            let a = analytic[k][i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn randn(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn toy_batch(rng: &mut impl Rng, policy: &ActorCritic, n: usize, mask: [bool; 6]) -> PpoBatch {
    let obs = randn(rng, (n, policy.obs_dim()), 1.0);
    let out = policy.forward(obs.view()).unwrap();
    let (actions, logp) = policy.sample(&out, &mask, false, rng);
    // old log-probs shifted so that some ratios fall outside the clip range
    let logp_old = Array1::from_shape_fn(n, |i| logp[i] + [-0.5, -0.05, 0.0, 0.05, 0.5][i % 5] + 0.013);
    PpoBatch {
        obs,
        actions,
        logp_old,
        advantages: Array1::from_shape_fn(n, |i| if i % 3 == 0 { -1.0 } else { 0.7 } * (1.0 + i as f64 * 0.1)),
        returns: Array1::from_shape_fn(n, |i| (i as f64 * 0.37).sin()),
        mask,
    }
}

/// Worst relative error of MLP parameter and input gradients against central
/// differences, for both output activations.
pub fn mlp_grad_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for output in [Activation::Identity, Activation::Tanh] {
        let mut net = Mlp::new(&[7, 32, 16, 3], output, &mut rng).unwrap();
        for s in net.slices_mut() {
            s.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let x = randn(&mut rng, (5, 7), 1.0);
        let up = randn(&mut rng, (5, 3), 1.0);
        let loss = |m: &Mlp| (m.predict(x.view()).unwrap() * &up).sum();
        let cache = net.forward(x.view()).unwrap();
        let (g, gx) = net.backward(&cache, up.view()).unwrap();
        let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let w = worst_rel_error(&net, |m| m.slices_mut(), loss, &analytic);
        worst = worst.max(w);
        // input gradient
        for r in 0..5 {
            for c in 0..7 {
                let mut xp = x.clone();
                xp[[r, c]] += H;
                let mut xm = x.clone();
                xm[[r, c]] -= H;
                let num = ((net.predict(xp.view()).unwrap() - net.predict(xm.view()).unwrap()) * &up).sum() / (2.0 * H);
                worst = worst.max((num - gx[[r, c]]).abs() / num.abs().max(gx[[r, c]].abs()).max(1e-6));
            }
        }
    }
    worst
}

/// Worst relative error of the PPO loss gradient (policy, value and entropy
/// terms; full and masked action sets) against central differences.
pub fn actor_critic_grad_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let arch = PolicyArch { obs_dim: 6, hidden: vec![24, 16], init_log_std: -0.5 };
    let mut policy = ActorCritic::new(arch, &mut rng).unwrap();
    // move away from the small-output initialization
    for s in policy.slices_mut() {
        s.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    for mask in [[true; 6], [true, true, true, false, false, true]] {
        let batch = toy_batch(&mut rng, &policy, 20, mask);
        let cfg = PpoConfig { entropy_coef: 0.01, value_coef: 0.5, ..Default::default() };
        let (terms, grads) = policy.ppo_loss(&batch, &cfg).unwrap();
        assert!(terms.clip_frac > 0.0 && terms.clip_frac < 1.0);
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let w = worst_rel_error(
            &policy,
            |m| m.slices_mut(),
            |m| m.ppo_loss(&batch, &cfg).unwrap().0.total,
            &analytic,
        );
        worst = worst.max(w);
    }
    worst
}

/// Worst relative error of the discriminator loss gradient for both input modes.
pub fn disc_grad_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for input in [DiscInput::Full, DiscInput::LowDim] {
        let disc = Discriminator::new(12, input, &[32, 16], &mut rng).unwrap();
        let e = disc.features(randn(&mut rng, (9, 12), 1.0).view(), randn(&mut rng, (9, 6), 0.5).view()).unwrap();
        let p = disc.features(randn(&mut rng, (7, 12), 1.0).view(), randn(&mut rng, (7, 6), 0.5).view()).unwrap();
        let (_, g) = disc.loss(e.view(), p.view()).unwrap();
        let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let w = worst_rel_error(
            &disc,
            |d| d.net.slices_mut(),
            |d| d.loss(e.view(), p.view()).unwrap().0.loss,
            &analytic,
        );
        worst = worst.max(w);
    }
    worst
}

pub fn disc_opt(disc: &Discriminator, lr: f64) -> Adam {
    Adam::new(AdamConfig { lr, ..Default::default() }, &disc.net.slices().iter().map(|s| s.len()).collect::<Vec<_>>())
}

/// Trains a discriminator on samples from `expert` and `policy` and returns
/// the balanced accuracy on fresh samples from the same generators.
pub fn train_and_test_disc(
    seed: u64,
    mut expert: impl FnMut(&mut ChaCha8Rng) -> Array2<f64>,
    mut policy: impl FnMut(&mut ChaCha8Rng) -> Array2<f64>,
) -> (f64, Discriminator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = Discriminator::new(4, DiscInput::Full, &[32, 16], &mut rng).unwrap();
    let mut opt = disc_opt(&disc, 1e-3);
    let cfg = DiscUpdateConfig { epochs: 1, minibatch: 128, max_grad_norm: 1.0 };
    for _ in 0..200 {
        let e = expert(&mut rng);
        let p = policy(&mut rng);
        discriminator_update(&mut disc, &mut opt, e.view(), p.view(), &cfg, &mut rng).unwrap();
    }
    let e = expert(&mut rng);
    let p = policy(&mut rng);
    (disc.loss(e.view(), p.view()).unwrap().0.balanced_acc, disc)
}

pub fn gaussian_samples(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Array2<f64> {
    let mut x = randn(rng, (n, 10), 1.0);
    x.column_mut(0).mapv_inplace(|v| v + shift);
    x
}
