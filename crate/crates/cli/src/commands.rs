//! Subcommand implementations. Each resolves the run configuration, does its
//! work and writes `provenance.json` next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use keratome_core::demo::{scripted_expert, validate_demo_in, DemoStore, Demonstration};
use keratome_core::env::Env;
use keratome_core::eval::{eval_checkpoint, trade_off_csv, trade_off_rows, EvalReport, ReportTable};
use keratome_core::eye::io::save_eye;
use keratome_core::eye::{build_eye, Fidelity, SectorId, SectorTarget};
use keratome_core::learn::{fine_tune_adapted, train_curriculum, train_single, Checkpoint, CurveRow, MixConfig, Preset};

use crate::config::RunConfig;
use crate::provenance::Provenance;
use crate::session::{ServeOptions, Service};

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set budgets.adapt=5000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.set)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FidelityArg {
    Low,
    High,
}

impl From<FidelityArg> for Fidelity {
    fn from(f: FidelityArg) -> Self {
        match f {
            FidelityArg::Low => Fidelity::LowPoly,
            FidelityArg::High => Fidelity::HighPoly,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Low,
    High,
    Curriculum,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the fully resolved configuration as TOML.
    ShowConfig,
    /// Build an eye volume and write it as an eye container.
    BuildEye {
        #[arg(long, value_enum)]
        fidelity: FidelityArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent on the environment reward.
    Train {
        #[arg(long, value_enum)]
        fidelity: TrainMode,
        /// Step budget; curriculum runs split it by the configured pretrain/fine-tune ratio.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record scripted-expert demonstrations into a demo store.
    DemoGen {
        /// A sector (`Left2`) or a half (`Left`); halves cycle through their sectors.
        #[arg(long)]
        target: SectorTarget,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, value_enum, default_value = "high")]
        fidelity: FidelityArg,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value = "scripted")]
        surgeon: String,
        #[arg(long)]
        store: PathBuf,
    },
    /// Fine-tune a checkpoint with mixed imitation and environment rewards.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        target: SectorTarget,
        #[arg(long)]
        surgeon: Option<String>,
        #[arg(long, conflicts_with_all = ["lambda_gail", "lambda_env"])]
        preset: Option<Preset>,
        #[arg(long, requires = "lambda_env")]
        lambda_gail: Option<f64>,
        #[arg(long, requires = "lambda_gail")]
        lambda_env: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint without learning and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "high")]
        fidelity: FidelityArg,
        /// Column name in tables; defaults to the preset name or the checkpoint stage.
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the metric table and trade-off series from eval reports.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a stored demonstration and check it reproduces its outcome.
    Replay {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value = "high")]
        fidelity: FidelityArg,
    },
    /// Run the interactive demonstration service.
    DemoServe {
        #[arg(long, value_enum, default_value = "high")]
        fidelity: FidelityArg,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
    },
}

pub fn run(cmd: Command, common: &Common, argv: &[String]) -> Result<()> {
    let cfg = common.resolve()?;
    match cmd {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::BuildEye { fidelity, out } => build_eye_cmd(&cfg, fidelity.into(), &out, argv),
        Command::Train { fidelity, steps, seed, out } => train(&cfg, fidelity, steps, seed, &out, argv),
        Command::DemoGen { target, count, fidelity, first_seed, surgeon, store } => {
            demo_gen(&cfg, target, count, fidelity.into(), first_seed, &surgeon, &store, argv)
        }
        Command::Adapt { base, store, target, surgeon, preset, lambda_gail, lambda_env, steps, seed, out } => {
            let (mix, preset) = match (preset, lambda_gail, lambda_env) {
                (Some(p), _, _) => (p.mix(), Some(p)),
                (None, Some(g), Some(e)) => {
                    let m = MixConfig::new(g, e)?;
                    (m, Preset::ALL.into_iter().find(|p| p.mix() == m))
                }
                _ => bail!("give --preset or both --lambda-gail and --lambda-env"),
            };
            let a = AdaptArgs { base, store, target, surgeon, mix, preset, steps, seed, out };
            adapt(&cfg, &a, argv)
        }
        Command::Eval { checkpoint, fidelity, agent, out } => eval(&cfg, &checkpoint, fidelity.into(), agent, &out, argv),
        Command::Report { inputs, out } => report(&cfg, &inputs, &out, argv),
        Command::Replay { store, id, fidelity } => replay(&cfg, &store, &id, fidelity.into()),
        Command::DemoServe { fidelity, store, addr } => demo_serve(&cfg, fidelity.into(), store, &addr),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn build_eye_cmd(cfg: &RunConfig, fidelity: Fidelity, out: &Path, argv: &[String]) -> Result<()> {
    ensure_dir(out)?;
    let spec = &cfg.env(fidelity).eye;
    let (grid, sectors) = build_eye(spec)?;
    let path = out.join("eye.krtm");
    save_eye(&path, &grid, &sectors, fidelity, spec.seed)?;
    let mut p = Provenance::new("build-eye", argv, cfg, vec![spec.seed])?;
    p.output(&path)?;
    p.write(out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn progress(r: &CurveRow) {
    if r.update % 16 == 0 {
        eprintln!("step {:>8}  episodes {:>6}  return {:>8.3}  scr {:.2}", r.step, r.episodes, r.mean_return, r.scr_window);
    }
}

fn train(cfg: &RunConfig, mode: TrainMode, steps: Option<u64>, seed: u64, out: &Path, argv: &[String]) -> Result<()> {
    ensure_dir(out)?;
    let on_update = |_: &_, r: &CurveRow| {
        progress(r);
        Ok(())
    };
    let mut p = Provenance::new("train", argv, cfg, vec![seed])?;
    let (ckpt, curve) = match mode {
        TrainMode::Low | TrainMode::High => {
            let f = if mode == TrainMode::Low { Fidelity::LowPoly } else { Fidelity::HighPoly };
            train_single(cfg.env(f), &cfg.train, steps.unwrap_or(cfg.budgets.direct), seed, on_update)?
        }
        TrainMode::Curriculum => {
            let b = &cfg.budgets;
            let (b1, b2) = match steps {
                None => (b.pretrain, b.fine_tune),
                Some(s) => {
                    let b1 = (s as u128 * b.pretrain as u128 / (b.pretrain + b.fine_tune).max(1) as u128) as u64;
                    (b1, s - b1)
                }
            };
            let (mut cks, curve) = train_curriculum(&cfg.low, &cfg.high, &cfg.train, (b1, b2), seed, on_update)?;
            let stage1 = out.join("stage1.ckpt");
            cks[0].save(&stage1)?;
            p.output(&stage1)?;
            (cks.pop().expect("two stages"), curve)
        }
    };
    let path = out.join("checkpoint.ckpt");
    ckpt.save(&path)?;
    let curve_path = out.join("curve.csv");
    write_curve(&curve_path, &curve)?;
    p.output(&path)?;
    p.output(&curve_path)?;
    p.write(out)?;
    println!("{}  {}", ckpt.digest()?, path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn demo_gen(
    cfg: &RunConfig,
    target: SectorTarget,
    count: usize,
    fidelity: Fidelity,
    first_seed: u64,
    surgeon: &str,
    store_dir: &Path,
    argv: &[String],
) -> Result<()> {
    let store = DemoStore::open(store_dir)?;
    let mut env = Env::new(cfg.env(fidelity).clone())?;
    let sectors: Vec<SectorId> = match target {
        SectorTarget::Sector(s) => vec![s],
        SectorTarget::Half(h) => h.sectors().to_vec(),
    };
    let seeds: Vec<u64> = (0..count as u64).map(|i| first_seed + i).collect();
    let mut p = Provenance::new("demo-gen", argv, cfg, seeds.clone())?;
    for (i, &seed) in seeds.iter().enumerate() {
        let sector = sectors[i % sectors.len()];
        let demo = scripted_expert(&mut env, sector, seed, surgeon)?;
        let id = store.save(&demo)?;
        p.output(&store_dir.join(format!("{id}.demo")))?;
        println!("{id}");
    }
    p.write(store_dir)?;
    Ok(())
}

struct AdaptArgs {
    base: PathBuf,
    store: PathBuf,
    target: SectorTarget,
    surgeon: Option<String>,
    mix: MixConfig,
    preset: Option<Preset>,
    steps: Option<u64>,
    seed: u64,
    out: PathBuf,
}

fn load_demos(store: &DemoStore, target: SectorTarget, surgeon: Option<&str>, obs_hash: &str) -> Result<Vec<Demonstration>> {
    let targets: Vec<SectorId> = SectorId::ALL.into_iter().filter(|&s| target.contains(s)).collect();
    let demos = store.load_group(surgeon, &targets, Some(obs_hash))?;
    if demos.is_empty() {
        bail!("no demonstrations for {target} in {}", store.dir().display());
    }
    Ok(demos)
}

fn adapt(cfg: &RunConfig, a: &AdaptArgs, argv: &[String]) -> Result<()> {
    ensure_dir(&a.out)?;
    let base = Checkpoint::load(&a.base)?;
    let env_cfg = &cfg.high;
    let store = DemoStore::open(&a.store)?;
    let demos = load_demos(&store, a.target, a.surgeon.as_deref(), &env_cfg.obs_hash()?)?;
    let mut p = Provenance::new("adapt", argv, cfg, vec![a.seed])?;
    p.input(&a.base)?;
    let budget = a.steps.unwrap_or(cfg.budgets.adapt);
    let (ckpt, curve) = fine_tune_adapted(&base, &demos, env_cfg, a.mix, budget, a.seed, |_, r| {
        progress(r);
        Ok(())
    })?;
    let path = a.out.join("checkpoint.ckpt");
    ckpt.save(&path)?;
    let curve_path = a.out.join("curve.csv");
    write_curve(&curve_path, &curve)?;
    p.output(&path)?;
    p.output(&curve_path)?;
    p.write(&a.out)?;
    let name = a.preset.map(|p| p.name().to_string()).unwrap_or_else(|| format!("{:?}", a.mix));
    println!("{}  {}  {name} on {} demos", ckpt.digest()?, path.display(), demos.len());
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt_path: &Path, fidelity: Fidelity, agent: Option<String>, out: &Path, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let env_cfg = cfg.env(fidelity);
    let e = &cfg.eval;
    let outcomes = eval_checkpoint(&ckpt, env_cfg, e.episodes, &e.seeds, e.stochastic)?;
    let mix = ckpt.meta.mix;
    let preset = if ckpt.meta.stage == "adapt" { Preset::ALL.into_iter().find(|p| p.mix() == mix) } else { None };
    let agent = agent.unwrap_or_else(|| preset.map(|p| p.name().to_string()).unwrap_or_else(|| ckpt.meta.stage.clone()));
    let report = EvalReport::from_outcomes(
        &agent,
        preset,
        (ckpt.meta.stage == "adapt").then_some(mix),
        outcomes,
        e.denominator,
        env_cfg,
        Some(ckpt.digest()?),
    )?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    report.save(out)?;
    let mut p = Provenance::new("eval", argv, cfg, e.seeds.clone())?;
    p.input(ckpt_path)?;
    p.output(out)?;
    p.write(dir)?;
    println!("{agent}: SCR {:.3} ± {:.3}", report.scr.mean, report.scr.std_err);
    Ok(())
}

fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, argv: &[String]) -> Result<()> {
    ensure_dir(out)?;
    let mut p = Provenance::new("report", argv, cfg, Vec::new())?;
    let mut reports = Vec::new();
    for i in inputs {
        reports.push(EvalReport::load(i).with_context(|| format!("loading {}", i.display()))?);
        p.input(i)?;
    }
    let table = ReportTable::new(reports);
    let table_path = out.join("table.csv");
    std::fs::write(&table_path, table.to_csv()?)?;
    let trade_path = out.join("trade_off.csv");
    std::fs::write(&trade_path, trade_off_csv(&trade_off_rows(&table))?)?;
    p.output(&table_path)?;
    p.output(&trade_path)?;
    p.write(out)?;
    print!("{}", table.to_csv()?);
    Ok(())
}

fn replay(cfg: &RunConfig, store_dir: &Path, id: &str, fidelity: Fidelity) -> Result<()> {
    let env_cfg = cfg.env(fidelity);
    let store = DemoStore::open(store_dir)?;
    let demo = store.load(id, None)?;
    let env_hash = env_cfg.hash()?;
    if demo.meta.env_hash != env_hash {
        bail!(
            "demo {id} was recorded in environment {} but the configured environment is {env_hash}; refusing to replay",
            demo.meta.env_hash
        );
    }
    let mut env = Env::new(env_cfg.clone())?;
    let r = validate_demo_in(&mut env, &demo)?;
    println!(
        "{id}: {} steps, outcome {:?}, entry {}",
        r.steps,
        r.outcome,
        r.entry_sector.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
    );
    if !r.valid {
        bail!("replay does not reproduce the recorded episode: {}", r.issues.join("; "));
    }
    Ok(())
}

fn demo_serve(cfg: &RunConfig, fidelity: Fidelity, store: PathBuf, addr: &str) -> Result<()> {
    let opts = ServeOptions {
        env: cfg.env(fidelity).clone(),
        tick_hz: cfg.serve.tick_hz,
        first_seed: cfg.serve.first_seed,
        store,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let service = Service::new(opts)?;
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("demonstration service on ws://{}/session", listener.local_addr()?);
        crate::session::serve(listener, service).await?;
        Ok(())
    })
}
