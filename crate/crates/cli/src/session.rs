//! Interactive demonstration service.
//!
//! One websocket session at a time at `/session`. Each connection gets a
//! reader task (decodes client messages), a writer task (drains an outbound
//! queue into the socket) and a simulation loop that owns the environment and
//! advances it once per tick with the latest action received.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use keratome_core::demo::{validate_demo_in, DemoMeta, DemoSource, DemoStore, Demonstration, TrajectoryStep};
use keratome_core::env::{Env, EnvConfig, EyeModel, Outcome, StepEvent};
use keratome_core::eye::SectorId;
use keratome_core::render::{CameraId, Observation};
use keratome_core::tool::ActionDelta;
use tokio::sync::mpsc;
use tokio::time::MissedTickBehavior;

use crate::protocol::{
    ClientMessage, Control, ErrorCode, FrameBundle, Phase, ServerMessage, SessionInfo, PROTOCOL, VERSION,
};

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub env: EnvConfig,
    pub tick_hz: f64,
    pub first_seed: u64,
    pub store: PathBuf,
}

pub struct Service {
    opts: ServeOptions,
    model: Arc<EyeModel>,
    store: DemoStore,
    busy: AtomicBool,
    next_session: AtomicU64,
    next_seed: AtomicU64,
}

impl Service {
    pub fn new(opts: ServeOptions) -> Result<Arc<Self>> {
        opts.env.validate()?;
        let model = Arc::new(EyeModel::build(&opts.env.eye)?);
        let store = DemoStore::open(&opts.store)?;
        Ok(Arc::new(Self {
            next_seed: AtomicU64::new(opts.first_seed),
            opts,
            model,
            store,
            busy: AtomicBool::new(false),
            next_session: AtomicU64::new(1),
        }))
    }

    pub fn store(&self) -> &DemoStore {
        &self.store
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new().route("/session", get(upgrade)).with_state(service)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(service): State<Arc<Service>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle(socket, service))
}

/// Releases the single-session slot when dropped.
struct SlotGuard(Arc<Service>);

impl Drop for SlotGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

enum Inbound {
    Msg(ClientMessage),
    Malformed(String),
    Closed,
}

async fn handle(mut socket: WebSocket, service: Arc<Service>) {
    if service.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        let m = ServerMessage::Busy {
            protocol: PROTOCOL.into(),
            version: VERSION,
            reason: "another demonstration session is active".into(),
        };
        let _ = socket.send(Message::Text(serde_json::to_string(&m).unwrap())).await;
        let _ = socket.send(Message::Close(None)).await;
        return;
    }
    let _slot = SlotGuard(Arc::clone(&service));
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<Message>(256);
    let (in_tx, in_rx) = mpsc::channel::<Inbound>(256);

    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            let close = matches!(m, Message::Close(_));
            if sink.send(m).await.is_err() || close {
                break;
            }
        }
    });
    let reader = tokio::spawn(async move {
        while let Some(msg) = stream.next().await {
            let ev = match msg {
                Ok(Message::Text(t)) => match serde_json::from_str::<ClientMessage>(&t) {
                    Ok(m) => Inbound::Msg(m),
                    Err(e) => Inbound::Malformed(e.to_string()),
                },
                Ok(Message::Binary(_)) => Inbound::Malformed("clients send text messages only".into()),
                Ok(Message::Ping(_) | Message::Pong(_)) => continue,
                Ok(Message::Close(_)) | Err(_) => break,
            };
            if in_tx.send(ev).await.is_err() {
                return;
            }
        }
        let _ = in_tx.send(Inbound::Closed).await;
    });

    let id = service.next_session.fetch_add(1, Ordering::SeqCst);
    if let Ok(session) = Session::new(Arc::clone(&service), id, out_tx) {
        session.run(in_rx).await;
    }
    reader.abort();
    let _ = writer.await;
}

struct Session {
    service: Arc<Service>,
    id: u64,
    out: mpsc::Sender<Message>,
    env: Env,
    tick: u64,
    phase: Phase,
    episode_seed: Option<u64>,
    obs: Option<Observation>,
    pending: Option<ActionDelta>,
    last_action_tick: Option<u64>,
    steps: Vec<TrajectoryStep>,
    episode_return: f64,
}

impl Session {
    fn new(service: Arc<Service>, id: u64, out: mpsc::Sender<Message>) -> Result<Self> {
        let env = Env::with_model(service.opts.env.clone(), Arc::clone(&service.model))?;
        Ok(Self {
            service,
            id,
            out,
            env,
            tick: 0,
            phase: Phase::Idle,
            episode_seed: None,
            obs: None,
            pending: None,
            last_action_tick: None,
            steps: Vec::new(),
            episode_return: 0.0,
        })
    }

    fn info(&self) -> SessionInfo {
        let cfg = self.env.config();
        let o = &cfg.obs;
        SessionInfo {
            phase: self.phase,
            tick_hz: self.service.opts.tick_hz,
            fidelity: cfg.fidelity(),
            width: o.width,
            height: o.height,
            channels: o.channels(),
            cameras: CameraId::ALL.map(|c| format!("{c:?}")),
            bounds: cfg.bounds.limits(),
            axis_mask: cfg.axis_mask,
            beta: cfg.beta,
            k_time: cfg.k_time,
            max_steps: cfg.max_steps,
            episode_seed: self.episode_seed,
            env_hash: cfg.hash().unwrap_or_default(),
            obs_hash: cfg.obs_hash().unwrap_or_default(),
        }
    }

    async fn send_text(&self, m: &ServerMessage) -> bool {
        self.out.send(Message::Text(serde_json::to_string(m).expect("serializable"))).await.is_ok()
    }

    async fn error(&self, code: ErrorCode, message: impl Into<String>) -> bool {
        self.send_text(&ServerMessage::Error { session: self.id, tick: self.tick, code, message: message.into() }).await
    }

    async fn send_frame(&self, event: Option<StepEvent>, reward: f64) -> bool {
        let Some(obs) = &self.obs else { return true };
        let st = self.env.state();
        let b = FrameBundle {
            session: self.id,
            tick: self.tick,
            t: st.t,
            hit_count: st.hit_count,
            beta: self.env.config().beta,
            event,
            terminal: st.outcome.is_some(),
            entry_sector: st.entry_sector,
            tool_state: obs.tool_state,
            distance: obs.distance,
            reward,
            episode_return: self.episode_return,
            frames: obs.frames.clone(),
        };
        self.out.send(Message::Binary(b.encode())).await.is_ok()
    }

    async fn run(mut self, mut inbound: mpsc::Receiver<Inbound>) {
        let hello = ServerMessage::Hello {
            protocol: PROTOCOL.into(),
            version: VERSION,
            session: self.id,
            tick: self.tick,
            info: self.info(),
        };
        if !self.send_text(&hello).await {
            return;
        }
        // preview of the next episode's start pose
        let seed = self.service.next_seed.load(Ordering::SeqCst);
        match self.env.reset(seed) {
            Ok(obs) => self.obs = Some(obs),
            Err(e) => {
                self.error(ErrorCode::Internal, e.to_string()).await;
                return;
            }
        }
        if !self.send_frame(None, 0.0).await {
            return;
        }

        let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / self.service.opts.tick_hz));
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            let alive = tokio::select! {
                _ = ticker.tick() => {
                    if self.phase == Phase::Running { self.advance().await } else { true }
                }
                ev = inbound.recv() => match ev {
                    None | Some(Inbound::Closed) => false,
                    Some(Inbound::Malformed(m)) => self.error(ErrorCode::Malformed, m).await,
                    Some(Inbound::Msg(m)) => self.on_message(m).await,
                },
            };
            if !alive {
                // disconnect: the episode is dropped unsaved
                break;
            }
        }
    }

    async fn advance(&mut self) -> bool {
        let action = self.pending.take().unwrap_or_else(ActionDelta::zero);
        let before = self.obs.take().expect("running episode has an observation");
        let r = match self.env.step(&action) {
            Ok(r) => r,
            Err(e) => {
                self.phase = Phase::Idle;
                return self.error(ErrorCode::Internal, e.to_string()).await;
            }
        };
        self.steps.push(TrajectoryStep::from_observation(self.env.state().t - 1, &before, action, Some(r.r_env)));
        self.episode_return += r.r_env;
        self.obs = Some(r.observation);
        self.tick += 1;
        if !self.send_frame(Some(r.event), r.r_env).await {
            return false;
        }
        if r.terminal {
            self.phase = Phase::Ended;
            let st = self.env.state();
            let outcome = st.outcome.expect("terminal step sets the outcome");
            let end = ServerMessage::EpisodeEnd {
                session: self.id,
                tick: self.tick,
                outcome,
                entry_sector: st.entry_sector,
                steps: st.t,
                episode_return: self.episode_return,
                saveable: outcome == Outcome::Success,
            };
            return self.send_text(&end).await;
        }
        true
    }

    async fn on_message(&mut self, m: ClientMessage) -> bool {
        match m {
            ClientMessage::Hello { protocol, version } => {
                if protocol != PROTOCOL || version != VERSION {
                    self.error(
                        ErrorCode::VersionMismatch,
                        format!("server speaks {PROTOCOL} v{VERSION}, client {protocol} v{version}"),
                    )
                    .await;
                    let _ = self.out.send(Message::Close(None)).await;
                    return false;
                }
                true
            }
            ClientMessage::Action { session, tick, delta } => {
                if session != self.id {
                    return self.error(ErrorCode::WrongSession, format!("session is {}", self.id)).await;
                }
                if self.phase != Phase::Running {
                    return self.error(ErrorCode::BadState, "no episode is running").await;
                }
                if tick > self.tick {
                    return self.error(ErrorCode::BadAction, format!("action for future tick {tick}")).await;
                }
                if delta.iter().any(|v| !v.is_finite()) {
                    return self.error(ErrorCode::BadAction, "non-finite action component").await;
                }
                if self.last_action_tick.is_some_and(|last| tick < last) {
                    // stale: an action for a later frame already arrived
                    return true;
                }
                self.last_action_tick = Some(tick);
                self.pending = Some(ActionDelta::from_array(delta));
                true
            }
            ClientMessage::Control { session, command, .. } => {
                if session != self.id {
                    return self.error(ErrorCode::WrongSession, format!("session is {}", self.id)).await;
                }
                self.on_control(command).await
            }
        }
    }

    async fn start(&mut self, seed: u64) -> bool {
        match self.env.reset(seed) {
            Ok(obs) => self.obs = Some(obs),
            Err(e) => return self.error(ErrorCode::Internal, e.to_string()).await,
        }
        self.episode_seed = Some(seed);
        self.phase = Phase::Running;
        self.pending = None;
        self.steps.clear();
        self.episode_return = 0.0;
        self.tick += 1;
        self.send_frame(None, 0.0).await
    }

    async fn on_control(&mut self, c: Control) -> bool {
        match c {
            Control::Start { seed } => {
                let seed = match seed {
                    Some(s) => s,
                    None => self.service.next_seed.fetch_add(1, Ordering::SeqCst),
                };
                self.start(seed).await
            }
            Control::Reset => match self.episode_seed {
                Some(s) => self.start(s).await,
                None => self.error(ErrorCode::BadState, "no episode to reset").await,
            },
            Control::Abort => {
                self.phase = Phase::Idle;
                self.steps.clear();
                self.pending = None;
                let info = ServerMessage::SessionInfo { session: self.id, tick: self.tick, info: self.info() };
                self.send_text(&info).await
            }
            Control::Save { surgeon, target } => match self.save(&surgeon, target) {
                Ok(msg) => self.send_text(&msg).await,
                Err(reason) => self.error(ErrorCode::SaveRejected, reason).await,
            },
        }
    }

    fn save(&self, surgeon: &str, target: SectorId) -> std::result::Result<ServerMessage, String> {
        if surgeon.trim().is_empty() {
            return Err("surgeon id is required".into());
        }
        let st = self.env.state();
        match (self.phase, st.outcome) {
            (Phase::Ended, Some(Outcome::Success)) => {}
            (Phase::Ended, Some(o)) => return Err(format!("episode ended {o:?}; only successful episodes are saved")),
            _ => return Err("no finished episode to save".into()),
        }
        let cfg = self.env.config();
        let meta = DemoMeta {
            surgeon: surgeon.to_string(),
            target,
            fidelity: cfg.fidelity(),
            obs: cfg.obs,
            obs_hash: cfg.obs_hash().map_err(|e| e.to_string())?,
            env_hash: cfg.hash().map_err(|e| e.to_string())?,
            seed: self.episode_seed.expect("ended episode has a seed"),
            source: DemoSource::Human,
            outcome: Outcome::Success,
            entry_sector: st.entry_sector,
        };
        let demo = Demonstration { meta, steps: self.steps.clone() };
        let mut check = Env::with_model(cfg.clone(), Arc::clone(&self.service.model)).map_err(|e| e.to_string())?;
        let report = validate_demo_in(&mut check, &demo).map_err(|e| e.to_string())?;
        if !report.valid {
            return Err(format!("demonstration failed validation: {}", report.issues.join("; ")));
        }
        let id = self.service.store.save(&demo).map_err(|e| e.to_string())?;
        Ok(ServerMessage::Saved {
            session: self.id,
            tick: self.tick,
            id,
            surgeon: surgeon.to_string(),
            target,
            steps: demo.steps.len(),
            entry_sector: report.entry_sector,
        })
    }
}
