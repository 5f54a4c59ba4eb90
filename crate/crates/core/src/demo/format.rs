//! Demonstration file format (UTF-8 text, `\n` line endings).
//!
//! ```text
//! line 1   KRTMDEMO<TAB>1
//! line 2   metadata as one line of JSON (see DemoMeta), plus "compression"
//! line 3+  one record per step, tab separated:
//!          t  dx dy dz droll dpitch dyaw  r_env  px py pz qw qx qy qz  distance  frames
//! ```
//!
//! Reals are written in shortest round-trip form; a missing reward is `-`.
//! `frames` is the concatenated frame bytes of the step's observation,
//! base64 (standard alphabet, padded), deflate-compressed first when the
//! header says `"compression":"deflate"`.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use serde::{Deserialize, Serialize};

use super::{DemoMeta, Demonstration, TrajectoryStep};
use crate::error::{Error, Result};
use crate::tool::ActionDelta;

pub const MAGIC: &str = "KRTMDEMO";
pub const VERSION: u32 = 1;
const FIELDS: usize = 1 + 6 + 1 + 7 + 1 + 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    None,
    #[default]
    Deflate,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: DemoMeta,
    compression: Compression,
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

pub fn encode(demo: &Demonstration, compression: Compression) -> Result<Vec<u8>> {
    demo.validate_shape()?;
    if demo.meta.surgeon.contains(['\n', '\r']) {
        return Err(Error::Format("surgeon id must be a single line".into()));
    }
    let mut out = String::new();
    out.push_str(&format!("{MAGIC}\t{VERSION}\n"));
    let header = Header { meta: demo.meta.clone(), compression };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for s in &demo.steps {
        let mut fields: Vec<String> = Vec::with_capacity(FIELDS);
        fields.push(s.t.to_string());
        fields.extend(s.action.to_array().iter().map(|v| real(*v)));
        fields.push(s.r_env.map_or_else(|| "-".to_string(), real));
        fields.extend(s.tool_state.iter().map(|v| real(*v)));
        fields.push(real(s.distance));
        let bytes = match compression {
            Compression::None => s.frames.clone(),
            Compression::Deflate => {
                let mut enc = DeflateEncoder::new(Vec::new(), flate2::Compression::default());
                enc.write_all(&s.frames)?;
                enc.finish()?
            }
        };
        fields.push(STANDARD.encode(bytes));
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    Ok(out.into_bytes())
}

/// Parses a demonstration file, returning it with the compression it used.
pub fn decode(bytes: &[u8]) -> Result<(Demonstration, Compression)> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("demo file is not UTF-8".into()))?;
    let mut lines = text.split_terminator('\n');
    let first = lines.next().ok_or_else(|| Error::Format("empty demo file".into()))?;
    let (magic, version) = first.split_once('\t').ok_or_else(|| Error::Format("bad demo file signature".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("not a demo file".into()));
    }
    if version != VERSION.to_string() {
        return Err(Error::Format(format!("unsupported demo version {version}")));
    }
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("missing demo header".into()))?)?;
    let frame_bytes = 3 * header.meta.obs.frame_len();
    let mut steps = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != FIELDS {
            return Err(Error::Format(format!("record {n} has {} fields, expected {FIELDS}", f.len())));
        }
        let t = f[0].parse::<u32>().map_err(|_| Error::Format(format!("bad step index {:?}", f[0])))?;
        let mut a = [0.0; 6];
        for k in 0..6 {
            a[k] = parse_real(f[1 + k], "action")?;
        }
        let r_env = if f[7] == "-" { None } else { Some(parse_real(f[7], "reward")?) };
        let mut tool_state = [0.0; 7];
        for k in 0..7 {
            tool_state[k] = parse_real(f[8 + k], "tool state")?;
        }
        let distance = parse_real(f[15], "distance")?;
        let raw = STANDARD.decode(f[16]).map_err(|e| Error::Format(format!("record {n}: {e}")))?;
        let frames = match header.compression {
            Compression::None => raw,
            Compression::Deflate => {
                let mut v = Vec::with_capacity(frame_bytes);
                DeflateDecoder::new(raw.as_slice()).read_to_end(&mut v)?;
                v
            }
        };
        steps.push(TrajectoryStep { t, frames, tool_state, distance, action: ActionDelta::from_array(a), r_env });
    }
    let demo = Demonstration { meta: header.meta, steps };
    demo.validate_shape()?;
    Ok((demo, header.compression))
}
