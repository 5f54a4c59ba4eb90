use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use keratome_cli::protocol::{ErrorCode, FrameBundle, Phase, ServerMessage, PROTOCOL, VERSION};
use keratome_cli::session::{serve, ServeOptions, Service};
use keratome_core::demo::{scripted_expert, validate_demo, DemoSource, DemoStore};
use keratome_core::env::{Env, EnvConfig, Outcome, StepEvent};
use keratome_core::eye::SectorId;
use keratome_core::render::ObsConfig;
use serde_json::json;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn env_config() -> EnvConfig {
    let mut c = EnvConfig::low_poly();
    c.obs = ObsConfig { width: 12, height: 12, ..c.obs };
    c
}

async fn start_server(env: EnvConfig, store: &Path) -> (String, Arc<Service>) {
    let service =
        Service::new(ServeOptions { env, tick_hz: 25.0, first_seed: 100, store: store.to_path_buf() }).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("ws://{}/session", listener.local_addr().unwrap());
    tokio::spawn(serve(listener, Arc::clone(&service)));
    (url, service)
}

enum In {
    Text(ServerMessage),
    Frame(FrameBundle),
    Closed,
}

async fn next(ws: &mut Ws) -> In {
    loop {
        let m = tokio::time::timeout(Duration::from_secs(20), ws.next()).await.expect("server went quiet");
        match m {
            Some(Ok(Message::Text(t))) => return In::Text(serde_json::from_str(&t).unwrap()),
            Some(Ok(Message::Binary(b))) => return In::Frame(FrameBundle::decode(&b).unwrap()),
            Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return In::Closed,
            Some(Ok(other)) => panic!("unexpected {other:?}"),
        }
    }
}

async fn frame(ws: &mut Ws) -> FrameBundle {
    match next(ws).await {
        In::Frame(f) => f,
        In::Text(t) => panic!("expected a frame, got {t:?}"),
        In::Closed => panic!("closed"),
    }
}

async fn text(ws: &mut Ws) -> ServerMessage {
    match next(ws).await {
        In::Text(t) => t,
        In::Frame(f) => panic!("expected text, got frame tick {}", f.tick),
        In::Closed => panic!("closed"),
    }
}

async fn send(ws: &mut Ws, v: serde_json::Value) {
    ws.send(Message::Text(v.to_string())).await.unwrap();
}

/// Connects, checks the greeting and the idle preview frame; returns the session id.
async fn open(url: &str) -> (Ws, u64) {
    let (mut ws, _) = connect_async(url).await.unwrap();
    let session = match text(&mut ws).await {
        ServerMessage::Hello { protocol, version, session, tick, info } => {
            assert_eq!((protocol.as_str(), version, tick), (PROTOCOL, VERSION, 0));
            assert_eq!(info.phase, Phase::Idle);
            session
        }
        other => panic!("expected hello, got {other:?}"),
    };
    send(&mut ws, json!({"type": "hello", "protocol": PROTOCOL, "version": VERSION})).await;
    let preview = frame(&mut ws).await;
    assert_eq!((preview.tick, preview.t), (0, 0));
    (ws, session)
}

async fn start(ws: &mut Ws, session: u64, seed: u64) -> FrameBundle {
    send(ws, json!({"type": "control", "session": session, "tick": 0, "command": {"command": "start", "seed": seed}})).await;
    frame(ws).await
}

#[tokio::test]
async fn idle_ticks_cost_time_penalty_and_are_gapless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = env_config();
    let (url, _) = start_server(cfg.clone(), dir.path()).await;
    let (mut ws, session) = open(&url).await;
    let first = start(&mut ws, session, 7).await;
    assert_eq!((first.tick, first.t, first.event), (1, 0, None));
    assert_eq!(first.frames[0].data.len(), 12 * 12 * cfg.obs.channels());

    let mut ret = 0.0;
    for k in 0..12u64 {
        let f = frame(&mut ws).await;
        assert_eq!(f.tick, first.tick + 1 + k);
        assert_eq!(f.t as u64, k + 1);
        assert_eq!(f.session, session);
        assert_eq!(f.event, Some(StepEvent::Shaping));
        assert!((f.reward + cfg.k_time).abs() < 1e-12, "{}", f.reward);
        assert_eq!(f.tool_state, first.tool_state);
        ret += f.reward;
        assert!((f.episode_return - ret).abs() < 1e-12);
    }
}

#[tokio::test]
async fn second_client_is_turned_away_until_the_first_leaves() {
    let dir = tempfile::tempdir().unwrap();
    let (url, service) = start_server(env_config(), dir.path()).await;
    let (mut first, session) = open(&url).await;
    start(&mut first, session, 1).await;

    let (mut second, _) = connect_async(&url).await.unwrap();
    assert!(matches!(text(&mut second).await, ServerMessage::Busy { .. }));
    assert!(matches!(next(&mut second).await, In::Closed));

    // the first session keeps ticking
    let a = frame(&mut first).await;
    let b = frame(&mut first).await;
    assert_eq!(b.tick, a.tick + 1);

    drop(first);
    let mut reopened = None;
    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(50)).await;
        let (mut ws, _) = connect_async(&url).await.unwrap();
        if let ServerMessage::Hello { session: s, .. } = text(&mut ws).await {
            assert_ne!(s, session);
            reopened = Some(ws);
            break;
        }
    }
    assert!(reopened.is_some());
    // the abandoned episode was not saved
    assert!(service.store().manifest().unwrap().entries.is_empty());
}

#[tokio::test]
async fn streamed_expert_actions_save_a_valid_human_demo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = env_config();
    let seed = 5;
    let target = SectorId::Right2;
    let reference = scripted_expert(&mut Env::new(cfg.clone()).unwrap(), target, seed, "script").unwrap();
    let (url, service) = start_server(cfg.clone(), dir.path()).await;
    let (mut ws, session) = open(&url).await;

    let mut f = start(&mut ws, session, seed).await;
    for step in &reference.steps {
        assert_eq!(f.tool_state, step.tool_state, "out of sync at t={}", step.t);
        let a = step.action.to_array();
        send(&mut ws, json!({"type": "action", "session": session, "tick": f.tick, "delta": a})).await;
        f = frame(&mut ws).await;
    }
    assert!(f.terminal);
    let end = text(&mut ws).await;
    match end {
        ServerMessage::EpisodeEnd { outcome, entry_sector, steps, saveable, .. } => {
            assert_eq!((outcome, entry_sector, saveable), (Outcome::Success, Some(target), true));
            assert_eq!(steps as usize, reference.steps.len());
        }
        other => panic!("{other:?}"),
    }
    send(&mut ws, json!({"type": "control", "session": session, "tick": f.tick, "command": {"command": "save", "surgeon": "dr-a", "target": "Right2"}})).await;
    let id = match text(&mut ws).await {
        ServerMessage::Saved { id, steps, entry_sector, surgeon, .. } => {
            assert_eq!((steps, entry_sector, surgeon.as_str()), (reference.steps.len(), Some(target), "dr-a"));
            id
        }
        other => panic!("{other:?}"),
    };

    let store = DemoStore::open(dir.path()).unwrap();
    let demo = store.load(&id, Some(&cfg.obs_hash().unwrap())).unwrap();
    assert_eq!(demo.meta.source, DemoSource::Human);
    assert_eq!(demo.meta.seed, seed);
    assert_eq!(demo.meta.env_hash, cfg.hash().unwrap());
    assert_eq!(demo.steps.len(), reference.steps.len());
    for (a, b) in demo.steps.iter().zip(&reference.steps) {
        assert_eq!(a.action, b.action);
        assert_eq!(a.frames, b.frames);
    }
    let v = validate_demo(&cfg, &demo).unwrap();
    assert!(v.valid, "{:?}", v.issues);
    assert_eq!(v.entry_sector, Some(target));
    assert_eq!(service.store().manifest().unwrap().entries.len(), 1);
}

#[tokio::test]
async fn unsuccessful_episodes_cannot_be_saved() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = env_config();
    cfg.max_steps = 3;
    let (url, service) = start_server(cfg, dir.path()).await;
    let (mut ws, session) = open(&url).await;
    let save = json!({"type": "control", "session": session, "tick": 0, "command": {"command": "save", "surgeon": "x", "target": "Left1"}});

    send(&mut ws, save.clone()).await;
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::SaveRejected, .. }));

    start(&mut ws, session, 2).await;
    for _ in 0..3 {
        frame(&mut ws).await;
    }
    match text(&mut ws).await {
        ServerMessage::EpisodeEnd { outcome, saveable, .. } => assert_eq!((outcome, saveable), (Outcome::Timeout, false)),
        other => panic!("{other:?}"),
    }
    send(&mut ws, save).await;
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::SaveRejected, .. }));
    assert!(service.store().manifest().unwrap().entries.is_empty());
}

#[tokio::test]
async fn bad_messages_get_errors_and_the_session_survives() {
    let dir = tempfile::tempdir().unwrap();
    let (url, _) = start_server(env_config(), dir.path()).await;
    let (mut ws, session) = open(&url).await;

    ws.send(Message::Text("{not json".into())).await.unwrap();
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::Malformed, .. }));
    send(&mut ws, json!({"type": "action", "session": session, "tick": 0, "delta": [0, 0, 0, 0, 0, 0], "extra": 1})).await;
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::Malformed, .. }));
    send(&mut ws, json!({"type": "action", "session": session + 1, "tick": 0, "delta": [0, 0, 0, 0, 0, 0]})).await;
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::WrongSession, .. }));
    send(&mut ws, json!({"type": "action", "session": session, "tick": 0, "delta": [0, 0, 0, 0, 0, 0]})).await;
    assert!(matches!(text(&mut ws).await, ServerMessage::Error { code: ErrorCode::BadState, .. }));

    let f = start(&mut ws, session, 3).await;
    assert_eq!(f.tick, 1);
    send(&mut ws, json!({"type": "action", "session": session, "tick": 1_000_000, "delta": [0, 0, 0, 0, 0, 0]})).await;
    loop {
        match next(&mut ws).await {
            In::Frame(_) => continue,
            In::Text(ServerMessage::Error { code, .. }) => {
                assert_eq!(code, ErrorCode::BadAction);
                break;
            }
            _ => panic!("unexpected message"),
        }
    }
    let a = frame(&mut ws).await;
    let b = frame(&mut ws).await;
    assert_eq!(b.tick, a.tick + 1);

    send(&mut ws, json!({"type": "control", "session": session, "tick": b.tick, "command": {"command": "abort"}})).await;
    loop {
        match next(&mut ws).await {
            In::Frame(_) => continue,
            In::Text(ServerMessage::SessionInfo { info, .. }) => {
                assert_eq!(info.phase, Phase::Idle);
                break;
            }
            _ => panic!("unexpected message"),
        }
    }
}

#[tokio::test]
async fn protocol_version_mismatch_closes_the_connection() {
    let dir = tempfile::tempdir().unwrap();
    let (url, _) = start_server(env_config(), dir.path()).await;
    let (mut ws, _) = connect_async(&url).await.unwrap();
    assert!(matches!(text(&mut ws).await, ServerMessage::Hello { .. }));
    send(&mut ws, json!({"type": "hello", "protocol": PROTOCOL, "version": VERSION + 1})).await;
    loop {
        match next(&mut ws).await {
            In::Frame(_) => continue,
            In::Text(ServerMessage::Error { code, .. }) => {
                assert_eq!(code, ErrorCode::VersionMismatch);
                break;
            }
            _ => panic!("unexpected message"),
        }
    }
    assert!(matches!(next(&mut ws).await, In::Closed));
}
