//! Demonstration session wire protocol.
//!
//! Control messages are JSON text messages tagged by `type`. Frame bundles
//! are binary messages: a fixed little-endian header followed by the three
//! camera images in rig order (Top, UpperSide, UpperCorner), each row-major
//! `height × width × channels` bytes.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0   | 4  | magic `KRTF` |
//! | 4   | 2  | protocol version (u16) |
//! | 6   | 2  | flags (u16): bit 0 terminal |
//! | 8   | 8  | session id (u64) |
//! | 16  | 8  | tick (u64) |
//! | 24  | 4  | episode step `t` (u32) |
//! | 28  | 4  | hit count (u32) |
//! | 32  | 4  | β (u32) |
//! | 36  | 1  | event code |
//! | 37  | 1  | entry sector code |
//! | 38  | 1  | channels |
//! | 39  | 1  | reserved, 0 |
//! | 40  | 2  | width (u16) |
//! | 42  | 2  | height (u16) |
//! | 44  | 56 | tool state: x, y, z, qw, qx, qy, qz (7 × f64) |
//! | 100 | 8  | tool–eye distance (f64) |
//! | 108 | 8  | reward of the last step (f64) |
//! | 116 | 8  | episode return so far (f64) |
//! | 124 | …  | frames |

use keratome_core::env::{Outcome, StepEvent};
use keratome_core::eye::{Fidelity, SectorId};
use keratome_core::render::Frame;
use serde::{Deserialize, Serialize};

pub const PROTOCOL: &str = "keratome-session";
pub const VERSION: u16 = 1;
pub const FRAME_MAGIC: &[u8; 4] = b"KRTF";
pub const FRAME_HEADER_LEN: usize = 124;

/// Event codes in frame headers. 0 marks the frame sent right after a reset.
pub fn event_code(e: Option<StepEvent>) -> u8 {
    match e {
        None => 0,
        Some(StepEvent::CorrectHit) => 1,
        Some(StepEvent::Success) => 2,
        Some(StepEvent::Fail) => 3,
        Some(StepEvent::Shaping) => 4,
        Some(StepEvent::Timeout) => 5,
    }
}

pub fn event_from_code(c: u8) -> Option<Option<StepEvent>> {
    Some(match c {
        0 => None,
        1 => Some(StepEvent::CorrectHit),
        2 => Some(StepEvent::Success),
        3 => Some(StepEvent::Fail),
        4 => Some(StepEvent::Shaping),
        5 => Some(StepEvent::Timeout),
        _ => return None,
    })
}

/// Sector codes: 0 none, then 1..=6 in [`SectorId::ALL`] order.
pub fn sector_code(s: Option<SectorId>) -> u8 {
    s.map_or(0, |s| SectorId::ALL.iter().position(|&x| x == s).unwrap() as u8 + 1)
}

pub fn sector_from_code(c: u8) -> Option<Option<SectorId>> {
    match c {
        0 => Some(None),
        1..=6 => Some(Some(SectorId::ALL[c as usize - 1])),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub session: u64,
    pub tick: u64,
    pub t: u32,
    pub hit_count: u32,
    pub beta: u32,
    pub event: Option<StepEvent>,
    pub terminal: bool,
    pub entry_sector: Option<SectorId>,
    pub tool_state: [f64; 7],
    pub distance: f64,
    pub reward: f64,
    pub episode_return: f64,
    pub frames: [Frame; 3],
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("frame bundle too short: {0} bytes")]
    Short(usize),
    #[error("bad magic")]
    Magic,
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("bad field: {0}")]
    Field(&'static str),
    #[error("payload is {got} bytes, header implies {want}")]
    Length { got: usize, want: usize },
}

impl FrameBundle {
    pub fn encode(&self) -> Vec<u8> {
        let f0 = &self.frames[0];
        let mut b = Vec::with_capacity(FRAME_HEADER_LEN + 3 * f0.data.len());
        b.extend_from_slice(FRAME_MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.terminal as u16).to_le_bytes());
        b.extend_from_slice(&self.session.to_le_bytes());
        b.extend_from_slice(&self.tick.to_le_bytes());
        b.extend_from_slice(&self.t.to_le_bytes());
        b.extend_from_slice(&self.hit_count.to_le_bytes());
        b.extend_from_slice(&self.beta.to_le_bytes());
        b.push(event_code(self.event));
        b.push(sector_code(self.entry_sector));
        b.push(f0.channels as u8);
        b.push(0);
        b.extend_from_slice(&(f0.width as u16).to_le_bytes());
        b.extend_from_slice(&(f0.height as u16).to_le_bytes());
        for v in self.tool_state.iter().chain([&self.distance, &self.reward, &self.episode_return]) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.frames {
            b.extend_from_slice(&f.data);
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        if b.len() < FRAME_HEADER_LEN {
            return Err(DecodeError::Short(b.len()));
        }
        if &b[0..4] != FRAME_MAGIC {
            return Err(DecodeError::Magic);
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(DecodeError::Version(version));
        }
        let flags = u16_at(6);
        if flags > 1 {
            return Err(DecodeError::Field("flags"));
        }
        let event = event_from_code(b[36]).ok_or(DecodeError::Field("event"))?;
        let entry_sector = sector_from_code(b[37]).ok_or(DecodeError::Field("entry sector"))?;
        let channels = b[38] as usize;
        if !(channels == 1 || channels == 3) {
            return Err(DecodeError::Field("channels"));
        }
        let (width, height) = (u16_at(40) as usize, u16_at(42) as usize);
        let frame_len = width * height * channels;
        let want = FRAME_HEADER_LEN + 3 * frame_len;
        if b.len() != want {
            return Err(DecodeError::Length { got: b.len(), want });
        }
        let mut tool_state = [0.0; 7];
        for (k, v) in tool_state.iter_mut().enumerate() {
            *v = f64_at(44 + 8 * k);
        }
        let frame = |k: usize| {
            let o = FRAME_HEADER_LEN + k * frame_len;
            Frame { width, height, channels, data: b[o..o + frame_len].to_vec() }
        };
        Ok(Self {
            session: u64_at(8),
            tick: u64_at(16),
            t: u32_at(24),
            hit_count: u32_at(28),
            beta: u32_at(32),
            event,
            terminal: flags == 1,
            entry_sector,
            tool_state,
            distance: f64_at(100),
            reward: f64_at(108),
            episode_return: f64_at(116),
            frames: [frame(0), frame(1), frame(2)],
        })
    }
}

/// Server-to-client text messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: String,
        version: u16,
        session: u64,
        tick: u64,
        info: SessionInfo,
    },
    /// Sent to a connection arriving while another session is active; the
    /// connection is then closed.
    Busy { protocol: String, version: u16, reason: String },
    SessionInfo { session: u64, tick: u64, info: SessionInfo },
    EpisodeEnd {
        session: u64,
        tick: u64,
        outcome: Outcome,
        entry_sector: Option<SectorId>,
        steps: u32,
        episode_return: f64,
        /// A save control will be accepted.
        saveable: bool,
    },
    Saved {
        session: u64,
        tick: u64,
        id: String,
        surgeon: String,
        target: SectorId,
        steps: usize,
        entry_sector: Option<SectorId>,
    },
    Error { session: u64, tick: u64, code: ErrorCode, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    VersionMismatch,
    WrongSession,
    BadAction,
    BadState,
    SaveRejected,
    Internal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// No episode yet, or after an abort.
    Idle,
    Running,
    Ended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub phase: Phase,
    pub tick_hz: f64,
    pub fidelity: Fidelity,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub cameras: [String; 3],
    /// Per-component action limits (dx, dy, dz in mm; roll, pitch, yaw in rad).
    pub bounds: [f64; 6],
    pub axis_mask: [bool; 6],
    pub beta: u32,
    pub k_time: f64,
    pub max_steps: u32,
    pub episode_seed: Option<u64>,
    pub env_hash: String,
    pub obs_hash: String,
}

/// Client-to-server text messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello { protocol: String, version: u16 },
    /// `tick` is the tick of the latest frame the client has seen.
    Action { session: u64, tick: u64, delta: [f64; 6] },
    Control { session: u64, tick: u64, command: Control },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    /// Starts an episode; without a seed the server picks the next one.
    Start { seed: Option<u64> },
    /// Restarts the current episode from its seed.
    Reset,
    Save { surgeon: String, target: SectorId },
    Abort,
}
