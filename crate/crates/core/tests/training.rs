use keratome_core::demo::scripted_expert;
use keratome_core::env::{Env, EnvConfig};
use keratome_core::eye::SectorId;
use keratome_core::learn::checkpoint::DiscBundle;
use keratome_core::learn::{
    expert_data, fine_tune_adapted, mix_rewards, train_curriculum, train_single, Checkpoint, Discriminator, MixConfig,
    PolicyBundle, Preset, TrainConfig, Trainer,
};
use keratome_core::learn::adam::{Adam, AdamConfig};
use keratome_core::render::ObsConfig;
use keratome_core::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mut cfg: EnvConfig) -> EnvConfig {
    cfg.obs = ObsConfig { width: 12, height: 12, ..cfg.obs };
    cfg
}

fn tiny_train() -> TrainConfig {
    let mut t = TrainConfig { hidden: vec![24, 16], scr_window: 10, ..TrainConfig::default() };
    t.ppo.n_envs = 2;
    t.ppo.horizon = 24;
    t.ppo.minibatch = 16;
    t.ppo.epochs = 2;
    t.gail.hidden = vec![16];
    t
}

fn probe_obs(bundle: &PolicyBundle, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((5, bundle.obs_dim()), |_| rng.gen_range(0.0..1.0))
}

fn forward_bits(bundle: &PolicyBundle, x: &Array2<f64>) -> Vec<u64> {
    let xn = bundle.norm.normalize(x.view()).unwrap();
    let out = bundle.policy.forward(xn.view()).unwrap();
    out.means.iter().chain(out.log_stds.iter()).chain(out.values.iter()).map(|v| v.to_bits()).collect()
}

fn trained(seed: u64) -> Checkpoint {
    train_single(&small(EnvConfig::low_poly()), &tiny_train(), 96, seed, |_, _| Ok(())).unwrap().0
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let c = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    let x = probe_obs(&c.bundle, 2);
    assert_eq!(forward_bits(&back.bundle, &x), forward_bits(&c.bundle, &x));
    assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());

    let mut bytes = c.to_bytes().unwrap();
    bytes[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let bytes = c.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
}

#[test]
fn same_seed_reproduces_checkpoint_and_curve() {
    let env = small(EnvConfig::low_poly());
    let run = |seed| train_single(&env, &tiny_train(), 96, seed, |_, _| Ok(())).unwrap();
    let (a, ca) = run(4);
    let (b, cb) = run(4);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    // empty windows report NaN, so compare the printed form
    assert_eq!(format!("{ca:?}"), format!("{cb:?}"));
    let (c, _) = run(5);
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn resuming_from_a_checkpoint_matches_uninterrupted_training() {
    let env = small(EnvConfig::low_poly());
    let mut whole = Trainer::fresh(tiny_train(), env.clone(), 6, "low").unwrap();
    whole.update().unwrap();
    whole.update().unwrap();
    let mut first = Trainer::fresh(tiny_train(), env.clone(), 6, "low").unwrap();
    first.update().unwrap();
    let mid = Checkpoint::from_bytes(&first.checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    // environments restart from fresh resets, so only the parameters carried in the checkpoint are compared
    let mut resumed = Trainer::from_checkpoint(&mid, env, Preset::NonAdapt.mix(), None, None, "low").unwrap();
    assert_eq!(resumed.checkpoint().unwrap().bundle, first.checkpoint().unwrap().bundle);
    assert_eq!(resumed.counters, first.counters);
    resumed.update().unwrap();
    assert_eq!(resumed.counters.updates, whole.counters.updates);
}

#[test]
fn second_stage_starts_from_the_first_stage_policy() {
    let low = small(EnvConfig::low_poly());
    let high = small(EnvConfig::high_poly());
    let (stages, curve) = train_curriculum(&low, &high, &tiny_train(), (48, 48), 3, |_, _| Ok(())).unwrap();
    assert_eq!(stages.len(), 2);
    assert!(curve.len() >= 2);
    let s1 = &stages[0];
    let tr = Trainer::from_checkpoint(s1, high.clone(), Preset::NonAdapt.mix(), None, None, "curriculum-high").unwrap();
    let x = probe_obs(&s1.bundle, 8);
    assert_eq!(forward_bits(&tr.checkpoint().unwrap().bundle, &x), forward_bits(&s1.bundle, &x));
    assert_eq!(stages[1].meta.obs_hash, s1.meta.obs_hash);
    assert!(stages[1].meta.counters.steps > s1.meta.counters.steps);

    let mut other = high.clone();
    other.obs.width = 16;
    assert!(train_curriculum(&low, &other, &tiny_train(), (48, 48), 3, |_, _| Ok(())).is_err());
}

#[test]
fn observation_mismatch_is_rejected() {
    let c = trained(2);
    let big = EnvConfig::low_poly();
    assert!(matches!(
        Trainer::from_checkpoint(&c, big.clone(), Preset::NonAdapt.mix(), None, None, "x"),
        Err(Error::Shape(_))
    ));
    let mut env = Env::new(big.clone()).unwrap();
    let demo = scripted_expert(&mut env, SectorId::Left1, 1, "s").unwrap();
    assert!(fine_tune_adapted(&c, &[demo.clone()], &small(EnvConfig::low_poly()), Preset::PurelyAdapt.mix(), 24, 0, |_, _| Ok(())).is_err());
    assert!(expert_data(&[demo], &small(EnvConfig::low_poly())).is_err());
    assert!(expert_data(&[], &big).is_err());
}

fn left_demos(env_cfg: &EnvConfig, n: u64) -> Vec<keratome_core::demo::Demonstration> {
    let mut env = Env::new(env_cfg.clone()).unwrap();
    (0..n).map(|s| scripted_expert(&mut env, [SectorId::Left1, SectorId::Left2][s as usize % 2], s, "s").unwrap()).collect()
}

#[test]
fn without_imitation_weight_the_discriminator_never_reaches_the_policy() {
    let env = small(EnvConfig::low_poly());
    let base = trained(3);
    let expert = expert_data(&left_demos(&env, 2), &env).unwrap();
    let mix = Preset::NonAdapt.mix();

    let run = |disc_seed: Option<u64>, with_expert: bool| {
        let mut ck = base.clone();
        if let Some(s) = disc_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let cfg = &ck.meta.train.gail;
            let disc = Discriminator::new(ck.bundle.obs_dim(), cfg.input, &cfg.hidden, &mut rng).unwrap();
            let opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &disc.net.slices().iter().map(|s| s.len()).collect::<Vec<_>>());
            ck.bundle.disc = Some(DiscBundle { disc, opt });
        }
        let e = with_expert.then(|| expert.clone());
        let mut tr = Trainer::from_checkpoint(&ck, env.clone(), mix, e, Some(11), "adapt").unwrap();
        tr.update().unwrap();
        tr.update().unwrap();
        let c = tr.checkpoint().unwrap();
        (c.bundle.policy, c.bundle.norm, c.bundle.opt, c.bundle.disc.map(|d| d.disc))
    };
    let a = run(Some(100), true);
    let b = run(Some(200), true);
    let plain = run(None, false);
    assert_ne!(a.3, b.3);
    assert_eq!((&a.0, &a.1, &a.2), (&b.0, &b.1, &b.2));
    assert_eq!((&a.0, &a.1, &a.2), (&plain.0, &plain.1, &plain.2));
}

#[test]
fn reward_mixing_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let m = MixConfig::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)).unwrap();
        let (r1, r2, alpha) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-4.0..4.0));
        let lhs = mix_rewards(alpha * r1, alpha * r2, &m);
        let rhs = alpha * mix_rewards(r1, r2, &m);
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        assert_eq!(mix_rewards(r1, r2, &Preset::NonAdapt.mix()), r2);
        assert_eq!(mix_rewards(r1, r2, &Preset::PurelyAdapt.mix()), r1);
    }
    assert!(MixConfig::new(-0.1, 1.0).is_err());
    assert!(MixConfig::new(f64::NAN, 1.0).is_err());
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
}

#[test]
fn adapted_fine_tuning_is_deterministic_and_updates_the_discriminator() {
    let env = small(EnvConfig::low_poly());
    let base = trained(5);
    let demos = left_demos(&env, 2);
    let run = || fine_tune_adapted(&base, &demos, &env, Preset::BalancedAdapt.mix(), 48, 9, |_, _| Ok(())).unwrap();
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    // empty windows report NaN, so compare the printed form
    assert_eq!(format!("{ca:?}"), format!("{cb:?}"));
    assert!(a.bundle.disc.is_some());
    assert_eq!(a.meta.mix, Preset::BalancedAdapt.mix());
    assert!(ca.iter().all(|r| r.disc_loss.is_finite() && r.mean_r_gail.is_finite()));
    // the checkpoint carries the discriminator through a round trip
    let back = Checkpoint::from_bytes(&a.to_bytes().unwrap()).unwrap();
    assert_eq!(back, a);
}
