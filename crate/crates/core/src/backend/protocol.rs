//! Framed JSON messages for masked inference over a byte stream.
//!
//! Each frame is a little-endian `u32` byte length followed by a UTF-8 JSON
//! object tagged by `"type"`:
//!
//! ```text
//! -> {"type":"hello","version":1,"model_id":"toy"}
//! <- {"type":"hello_ack","version":1,"model_id":"toy","sites":[..],"grid":[2,4,4],"channels":32}
//! -> {"type":"forward","request_id":7,"video_id":"v0","masks":[{"site":..,"rle":[3,2,27]}],"target":{..}}
//! <- {"type":"result","request_id":7,"metric":0.81}
//! <- {"type":"error","request_id":7,"code":404,"message":"unknown video v9"}
//! ```
//!
//! `rle` uses the mask run convention over the advertised grid.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::TaskTarget;
use crate::error::{Error, Result};
use crate::store::SiteId;

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: u32 = 64 << 20;

pub mod codes {
    pub const MALFORMED: i64 = 400;
    pub const NOT_FOUND: i64 = 404;
    pub const VERSION: i64 = 426;
    pub const INTERNAL: i64 = 500;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub site: SiteId,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
        model_id: String,
    },
    HelloAck {
        version: u32,
        model_id: String,
        sites: Vec<SiteId>,
        grid: [usize; 3],
        channels: usize,
    },
    Forward {
        request_id: u64,
        video_id: String,
        masks: Vec<WireMask>,
        target: TaskTarget,
    },
    Result {
        request_id: u64,
        metric: f64,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<u64>,
        code: i64,
        message: String,
    },
}

pub fn encode(message: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(message)?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME)
        .ok_or_else(|| Error::Protocol(format!("frame of {} bytes exceeds limit", body.len())))?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&len.to_le_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

pub fn write_message(w: &mut impl Write, message: &Message) -> Result<()> {
    let frame = encode(message)?;
    w.write_all(&frame).and_then(|_| w.flush()).map_err(transport)
}

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(transport(e)),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(transport)?;
    Ok(Some(body))
}

pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    match read_frame(r)? {
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| Error::Protocol(format!("malformed frame: {e}"))),
        None => Ok(None),
    }
}

pub(crate) fn transport(e: io::Error) -> Error {
    Error::Transport(e.to_string())
}
