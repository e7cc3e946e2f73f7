//! Message framing.
//!
//! ```text
//! frame  = len:u32le tag:u8 body
//! len    = 1 + body length, at most MAX_FRAME
//! ```
//!
//! Control messages carry a UTF-8 JSON body. `PoseUpdate`, `StateUpdate`,
//! `FrameMsg`, `Ping` and `Pong` are packed little-endian:
//!
//! ```text
//! PoseUpdate  3 × { x y z qw qx qy qz trigger : f32, timestamp_us : u64 }   120 bytes
//!             devices in order head, left_hand, right_hand
//! StateUpdate time_step:u64 qpos:21×f32 n:u8 flags:n×u8(0|1)              93 + n bytes
//! FrameMsg    camera:u8 time_step:u64 width:u32 height:u32 pixels:w×h×u8   17 + w·h bytes
//! Ping/Pong   seq:u64 sent_us:u64                                          16 bytes
//! ```

use std::io::{self, Read};

use serde::{Deserialize, Serialize};
use tririg::camera::{CameraId, CameraSet};
use tririg::rig::QPOS_LEN;
use tririg::sim::TaskId;

pub const PROTOCOL_VERSION: u16 = 1;
/// Largest accepted `len` field.
pub const MAX_FRAME: usize = 1 << 20;
pub const HEADER_LEN: usize = 5;
pub const DEVICE_SAMPLE_LEN: usize = 8 * 4 + 8;
pub const POSE_UPDATE_LEN: usize = 3 * DEVICE_SAMPLE_LEN;
pub const STATE_FIXED_LEN: usize = 8 + QPOS_LEN * 4 + 1;
pub const FRAME_FIXED_LEN: usize = 1 + 8 + 4 + 4;
pub const PING_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Hello = 1,
    AnchorRequest = 2,
    PoseUpdate = 3,
    ReAnchor = 4,
    StateUpdate = 5,
    FrameMsg = 6,
    RecordControl = 7,
    Error = 8,
    Ping = 9,
    Pong = 10,
    RecordStatus = 11,
}

impl Tag {
    fn from_u8(b: u8) -> Option<Tag> {
        use Tag::*;
        Some(match b {
            1 => Hello,
            2 => AnchorRequest,
            3 => PoseUpdate,
            4 => ReAnchor,
            5 => StateUpdate,
            6 => FrameMsg,
            7 => RecordControl,
            8 => Error,
            9 => Ping,
            10 => Pong,
            11 => RecordStatus,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Operator,
    Viewer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub protocol_version: u16,
    pub camera_set: CameraSet,
    pub role: ClientRole,
}

/// One tracked device: position, wxyz quaternion, trigger in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceSample {
    pub pose: [f32; 7],
    pub trigger: f32,
    pub timestamp_us: u64,
}

impl DeviceSample {
    pub fn from_pose(pose: &tririg::pose::Pose, trigger: f64, timestamp_us: u64) -> Self {
        let t = pose.translation();
        let q = pose.quaternion_wxyz();
        Self {
            pose: [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].map(|v| v as f32),
            trigger: trigger as f32,
            timestamp_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateUpdate {
    pub time_step: u64,
    pub qpos: [f32; QPOS_LEN],
    pub stage_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMsg {
    pub camera: CameraId,
    pub time_step: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordAction {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordControl {
    pub action: RecordAction,
    pub task: Option<TaskId>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordStatus {
    pub recording: bool,
    pub steps: u64,
    /// File name of the episode just written, on stop.
    pub file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Version,
    Protocol,
    Refused,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub seq: u64,
    pub sent_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello(Hello),
    AnchorRequest,
    PoseUpdate([DeviceSample; 3]),
    ReAnchor,
    StateUpdate(StateUpdate),
    FrameMsg(FrameMsg),
    RecordControl(RecordControl),
    Error(ErrorMsg),
    Ping(Probe),
    Pong(Probe),
    RecordStatus(RecordStatus),
}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame length {0} out of range")]
    BadLength(usize),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("bad {tag:?} body: {reason}")]
    Body { tag: Tag, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn body_err(tag: Tag, reason: impl Into<String>) -> CodecError {
    CodecError::Body {
        tag,
        reason: reason.into(),
    }
}

impl WireMessage {
    pub fn tag(&self) -> Tag {
        match self {
            WireMessage::Hello(_) => Tag::Hello,
            WireMessage::AnchorRequest => Tag::AnchorRequest,
            WireMessage::PoseUpdate(_) => Tag::PoseUpdate,
            WireMessage::ReAnchor => Tag::ReAnchor,
            WireMessage::StateUpdate(_) => Tag::StateUpdate,
            WireMessage::FrameMsg(_) => Tag::FrameMsg,
            WireMessage::RecordControl(_) => Tag::RecordControl,
            WireMessage::Error(_) => Tag::Error,
            WireMessage::Ping(_) => Tag::Ping,
            WireMessage::Pong(_) => Tag::Pong,
            WireMessage::RecordStatus(_) => Tag::RecordStatus,
        }
    }

    pub fn error(code: ErrorCode, text: impl Into<String>) -> Self {
        WireMessage::Error(ErrorMsg {
            code,
            text: text.into(),
        })
    }
}

fn json<T: Serialize>(v: &T, out: &mut Vec<u8>) {
    serde_json::to_writer(out, v).expect("message types serialize");
}

/// Encodes one message as a complete frame.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = vec![0u8; 4];
    out.push(msg.tag() as u8);
    match msg {
        WireMessage::Hello(h) => json(h, &mut out),
        WireMessage::AnchorRequest | WireMessage::ReAnchor => out.extend_from_slice(b"{}"),
        WireMessage::RecordControl(r) => json(r, &mut out),
        WireMessage::RecordStatus(r) => json(r, &mut out),
        WireMessage::Error(e) => json(e, &mut out),
        WireMessage::PoseUpdate(devices) => {
            for d in devices {
                for v in d.pose {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&d.trigger.to_le_bytes());
                out.extend_from_slice(&d.timestamp_us.to_le_bytes());
            }
        }
        WireMessage::StateUpdate(s) => {
            out.extend_from_slice(&s.time_step.to_le_bytes());
            for v in s.qpos {
                out.extend_from_slice(&v.to_le_bytes());
            }
            assert!(s.stage_flags.len() <= u8::MAX as usize, "at most 255 stages");
            out.push(s.stage_flags.len() as u8);
            out.extend(s.stage_flags.iter().map(|&f| f as u8));
        }
        WireMessage::FrameMsg(f) => {
            out.push(f.camera.index() as u8);
            out.extend_from_slice(&f.time_step.to_le_bytes());
            out.extend_from_slice(&f.width.to_le_bytes());
            out.extend_from_slice(&f.height.to_le_bytes());
            out.extend_from_slice(&f.pixels);
        }
        WireMessage::Ping(p) | WireMessage::Pong(p) => {
            out.extend_from_slice(&p.seq.to_le_bytes());
            out.extend_from_slice(&p.sent_us.to_le_bytes());
        }
    }
    let len = out.len() - 4;
    assert!(len <= MAX_FRAME, "frame of {len} bytes exceeds MAX_FRAME");
    out[..4].copy_from_slice(&(len as u32).to_le_bytes());
    out
}

struct Cursor<'a> {
    tag: Tag,
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(body_err(self.tag, format!("need {n} more bytes, have {}", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(body_err(self.tag, "non-finite float"));
        }
        Ok(v)
    }

    fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(body_err(self.tag, format!("{} unexpected trailing bytes", self.buf.len())))
        }
    }
}

fn from_json<'a, T: Deserialize<'a>>(tag: Tag, body: &'a [u8]) -> Result<T, CodecError> {
    serde_json::from_slice(body).map_err(|e| body_err(tag, e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

/// Decodes a tag and body (the frame without its length prefix).
pub fn decode_body(tag: u8, body: &[u8]) -> Result<WireMessage, CodecError> {
    let tag = Tag::from_u8(tag).ok_or(CodecError::UnknownTag(tag))?;
    let mut c = Cursor { tag, buf: body };
    let msg = match tag {
        Tag::Hello => return Ok(WireMessage::Hello(from_json(tag, body)?)),
        Tag::AnchorRequest => {
            from_json::<Empty>(tag, body)?;
            return Ok(WireMessage::AnchorRequest);
        }
        Tag::ReAnchor => {
            from_json::<Empty>(tag, body)?;
            return Ok(WireMessage::ReAnchor);
        }
        Tag::RecordControl => return Ok(WireMessage::RecordControl(from_json(tag, body)?)),
        Tag::RecordStatus => return Ok(WireMessage::RecordStatus(from_json(tag, body)?)),
        Tag::Error => return Ok(WireMessage::Error(from_json(tag, body)?)),
        Tag::PoseUpdate => {
            let mut devices = [DeviceSample {
                pose: [0.0; 7],
                trigger: 0.0,
                timestamp_us: 0,
            }; 3];
            for d in &mut devices {
                for v in &mut d.pose {
                    *v = c.f32()?;
                }
                d.trigger = c.f32()?;
                d.timestamp_us = c.u64()?;
            }
            WireMessage::PoseUpdate(devices)
        }
        Tag::StateUpdate => {
            let time_step = c.u64()?;
            let mut qpos = [0f32; QPOS_LEN];
            for v in &mut qpos {
                *v = c.f32()?;
            }
            let n = c.u8()? as usize;
            let stage_flags = c
                .take(n)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(body_err(tag, format!("stage flag byte {b}"))),
                })
                .collect::<Result<_, _>>()?;
            WireMessage::StateUpdate(StateUpdate {
                time_step,
                qpos,
                stage_flags,
            })
        }
        Tag::FrameMsg => {
            let cam = c.u8()?;
            let camera = CameraId::from_index(cam as usize).ok_or_else(|| body_err(tag, format!("camera index {cam}")))?;
            let time_step = c.u64()?;
            let width = c.u32()?;
            let height = c.u32()?;
            let n = (width as u64) * (height as u64);
            if n != c.buf.len() as u64 {
                return Err(body_err(tag, format!("{width}x{height} frame with {} pixel bytes", c.buf.len())));
            }
            let pixels = c.take(n as usize)?.to_vec();
            WireMessage::FrameMsg(FrameMsg {
                camera,
                time_step,
                width,
                height,
                pixels,
            })
        }
        Tag::Ping | Tag::Pong => {
            let p = Probe {
                seq: c.u64()?,
                sent_us: c.u64()?,
            };
            if tag == Tag::Ping {
                WireMessage::Ping(p)
            } else {
                WireMessage::Pong(p)
            }
        }
    };
    c.finish()?;
    Ok(msg)
}

fn check_len(len: usize) -> Result<(), CodecError> {
    if len == 0 || len > MAX_FRAME {
        Err(CodecError::BadLength(len))
    } else {
        Ok(())
    }
}

/// Decodes exactly one complete frame.
pub fn decode(frame: &[u8]) -> Result<WireMessage, CodecError> {
    if frame.len() < 4 {
        return Err(CodecError::Truncated {
            needed: 4,
            have: frame.len(),
        });
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    check_len(len)?;
    let have = frame.len() - 4;
    if have < len {
        return Err(CodecError::Truncated { needed: len + 4, have: frame.len() });
    }
    if have > len {
        return Err(CodecError::Trailing(have - len));
    }
    decode_body(frame[4], &frame[5..])
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream
/// between frames.
pub fn read_frame(r: &mut impl Read, buf: &mut Vec<u8>) -> Result<Option<WireMessage>, CodecError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(CodecError::Truncated { needed: 4, have: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    check_len(len)?;
    buf.resize(len, 0);
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CodecError::Truncated { needed: len + 4, have: 4 },
        _ => e.into(),
    })?;
    decode_body(buf[0], &buf[1..]).map(Some)
}
