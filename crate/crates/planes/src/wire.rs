//! Bit-exact wire format shared by the in-memory pipe and the socket tier.
//!
//! All integers are little-endian.
//!
//! ```text
//! header (15 bytes)
//!   magic          4  "DVLA"
//!   format_version u16 = 1
//!   msg_type       u8   1 TrajectoryBatch, 2 Metadata, 3 WeightSnapshot, 4 Ack
//!   payload_len    u64
//! TrajectoryBatch
//!   policy_version u64, group_count u32
//!   per group: group_id u64, traj_count u32, horizon u32, chunk u32,
//!              obs_dim u32, act_dim u32
//!     per trajectory: reward f32, behavior_version u64,
//!                     obs f32 × n_chunks·obs_dim,
//!                     actions f32 × n_chunks·chunk·act_dim,
//!                     behavior_log_prob f32 × n_chunks
//!   n_chunks = ceil(horizon / chunk)
//! WeightSnapshot: version u64, param_count u64, params f32 × param_count
//! Metadata: entry_count u32, per entry key_len u16, key, val_len u32, val
//! Ack: epoch_id u64
//! ```
//!
//! Floats are written as raw bit patterns, so encode/decode is bitwise
//! lossless. Decoding never panics on hostile input; every failure names the
//! byte offset where it was detected.

use swimlane_core::batch::n_chunks;
use swimlane_core::{GroupBatch, ParamSnapshot, Trajectory};

use crate::msg::{ControlPlaneMsg, DataPlaneMsg, Metadata, TrajectoryBatch};

pub const MAGIC: [u8; 4] = *b"DVLA";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    TrajectoryBatch = 1,
    Metadata = 2,
    WeightSnapshot = 3,
    Ack = 4,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("group {group_id}: trajectory {traj} {field} has length {got}, the wire layout needs {expected}")]
    Layout {
        group_id: u64,
        traj: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("group {group_id}: chunk size 0")]
    ZeroChunk { group_id: u64 },
    #[error("{what} does not fit its length field")]
    TooLong { what: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported format version {got} at offset {offset}")]
    UnsupportedVersion { offset: usize, got: u16 },
    #[error("unknown message type {got} at offset {offset}")]
    UnknownType { offset: usize, got: u8 },
    #[error("truncated at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: u64,
        available: usize,
    },
    #[error("length overflow at offset {offset}: {what}")]
    LengthOverflow { offset: usize, what: &'static str },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid utf-8 at offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("invalid value at offset {offset}: {what}")]
    InvalidValue { offset: usize, what: &'static str },
    #[error("message type {got:?} at offset {offset} does not belong to this plane")]
    WrongPlane { offset: usize, got: MsgType },
}

/// Any decoded message.
#[derive(Debug, Clone)]
pub enum Frame {
    Data(DataPlaneMsg),
    Control(ControlPlaneMsg),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_header(ty: MsgType, payload_len: usize) -> Self {
        let mut buf = Vec::with_capacity(HEADER_LEN + payload_len);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(ty as u8);
        buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
        Self { buf }
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

fn group_layout(g: &GroupBatch) -> Result<(usize, usize, usize), EncodeError> {
    if g.chunk == 0 {
        return Err(EncodeError::ZeroChunk {
            group_id: g.group_id,
        });
    }
    let nc = n_chunks(g.horizon, g.chunk);
    let obs = nc * g.obs_dim as usize;
    let act = nc * g.chunk as usize * g.act_dim as usize;
    Ok((obs, act, nc))
}

fn trajectory_payload_len(batch: &TrajectoryBatch) -> Result<usize, EncodeError> {
    let mut len = 8 + 4;
    for g in &batch.groups {
        let (obs, act, nc) = group_layout(g)?;
        len += 8 + 4 * 5;
        len += g.trajectories.len() * (4 + 8 + 4 * (obs + act + nc));
    }
    Ok(len)
}

/// Encoded size of a trajectory batch message.
pub fn trajectory_message_len(batch: &TrajectoryBatch) -> Result<usize, EncodeError> {
    Ok(HEADER_LEN + trajectory_payload_len(batch)?)
}

/// Encoded size of a weight snapshot with `param_count` parameters.
pub fn snapshot_message_len(param_count: usize) -> usize {
    HEADER_LEN + 16 + 4 * param_count
}

fn check_traj(
    g: &GroupBatch,
    i: usize,
    t: &Trajectory,
    dims: (usize, usize, usize),
) -> Result<(), EncodeError> {
    let (obs, act, nc) = dims;
    for (field, expected, got) in [
        ("obs", obs, t.obs.len()),
        ("actions", act, t.actions.len()),
        ("behavior_log_prob", nc, t.behavior_log_prob.len()),
    ] {
        if expected != got {
            return Err(EncodeError::Layout {
                group_id: g.group_id,
                traj: i,
                field,
                expected,
                got,
            });
        }
    }
    Ok(())
}

fn encode_trajectory(batch: &TrajectoryBatch) -> Result<Vec<u8>, EncodeError> {
    let len = trajectory_payload_len(batch)?;
    let mut w = Writer::with_header(MsgType::TrajectoryBatch, len);
    w.u64(batch.policy_version);
    let count = u32::try_from(batch.groups.len())
        .map_err(|_| EncodeError::TooLong { what: "group list" })?;
    w.u32(count);
    for g in &batch.groups {
        let dims = group_layout(g)?;
        w.u64(g.group_id);
        let tc = u32::try_from(g.trajectories.len()).map_err(|_| EncodeError::TooLong {
            what: "trajectory list",
        })?;
        w.u32(tc);
        w.u32(g.horizon);
        w.u32(g.chunk);
        w.u32(g.obs_dim);
        w.u32(g.act_dim);
        for (i, t) in g.trajectories.iter().enumerate() {
            check_traj(g, i, t, dims)?;
            w.f32(t.reward);
            w.u64(t.behavior_version);
            w.f32s(&t.obs);
            w.f32s(&t.actions);
            w.f32s(&t.behavior_log_prob);
        }
    }
    Ok(w.finish())
}

fn encode_metadata(m: &Metadata) -> Result<Vec<u8>, EncodeError> {
    let mut len = 4;
    for (k, v) in &m.entries {
        if k.len() > u16::MAX as usize {
            return Err(EncodeError::TooLong {
                what: "metadata key",
            });
        }
        if v.len() > u32::MAX as usize {
            return Err(EncodeError::TooLong {
                what: "metadata value",
            });
        }
        len += 2 + k.len() + 4 + v.len();
    }
    let count = u32::try_from(m.entries.len()).map_err(|_| EncodeError::TooLong {
        what: "metadata table",
    })?;
    let mut w = Writer::with_header(MsgType::Metadata, len);
    w.u32(count);
    for (k, v) in &m.entries {
        w.u16(k.len() as u16);
        w.buf.extend_from_slice(k.as_bytes());
        w.u32(v.len() as u32);
        w.buf.extend_from_slice(v.as_bytes());
    }
    Ok(w.finish())
}

pub fn encode_data(msg: &DataPlaneMsg) -> Result<Vec<u8>, EncodeError> {
    match msg {
        DataPlaneMsg::TrajectoryBatch(b) => encode_trajectory(b),
        DataPlaneMsg::Metadata(m) => encode_metadata(m),
        DataPlaneMsg::Ack { epoch_id } => {
            let mut w = Writer::with_header(MsgType::Ack, 8);
            w.u64(*epoch_id);
            Ok(w.finish())
        }
    }
}

/// Parameters go out as one contiguous block after the two length fields.
pub fn encode_control(msg: &ControlPlaneMsg) -> Vec<u8> {
    let snap = &msg.snapshot;
    let mut w = Writer::with_header(MsgType::WeightSnapshot, 16 + 4 * snap.len());
    w.u64(snap.version());
    w.u64(snap.len() as u64);
    w.f32s(snap.params());
    w.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: u64) -> Result<(), DecodeError> {
        let available = self.end - self.pos;
        if n > available as u64 {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        self.need(n as u64)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_bits(self.u32()?))
    }

    /// `count` floats; the byte length is checked before allocating.
    fn f32s(&mut self, count: u64, what: &'static str) -> Result<Vec<f32>, DecodeError> {
        let bytes = count.checked_mul(4).ok_or(DecodeError::LengthOverflow {
            offset: self.pos,
            what,
        })?;
        self.need(bytes)?;
        let raw = self.take(bytes as usize)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

fn decode_trajectory(r: &mut Reader) -> Result<TrajectoryBatch, DecodeError> {
    let policy_version = r.u64()?;
    let group_count = r.u32()?;
    // Every group needs at least its 28-byte header.
    r.need(group_count as u64 * 28)?;
    let mut groups = Vec::with_capacity(group_count as usize);
    for _ in 0..group_count {
        let group_id = r.u64()?;
        let traj_count = r.u32()?;
        let horizon = r.u32()?;
        let chunk_at = r.pos;
        let chunk = r.u32()?;
        let obs_dim = r.u32()?;
        let act_dim = r.u32()?;
        if chunk == 0 {
            return Err(DecodeError::InvalidValue {
                offset: chunk_at,
                what: "chunk size 0",
            });
        }
        let nc = horizon.div_ceil(chunk) as u64;
        let overflow = |what| DecodeError::LengthOverflow {
            offset: chunk_at,
            what,
        };
        let obs_n = nc
            .checked_mul(obs_dim as u64)
            .ok_or(overflow("obs length"))?;
        let act_n = nc
            .checked_mul(chunk as u64)
            .and_then(|x| x.checked_mul(act_dim as u64))
            .ok_or(overflow("action length"))?;
        let per_traj = obs_n
            .checked_add(act_n)
            .and_then(|x| x.checked_add(nc))
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(12))
            .ok_or(overflow("trajectory length"))?;
        let total = per_traj
            .checked_mul(traj_count as u64)
            .ok_or(overflow("group length"))?;
        r.need(total)?;
        let mut trajectories = Vec::with_capacity(traj_count as usize);
        for _ in 0..traj_count {
            let reward = r.f32()?;
            let behavior_version = r.u64()?;
            let obs = r.f32s(obs_n, "obs length")?;
            let actions = r.f32s(act_n, "action length")?;
            let behavior_log_prob = r.f32s(nc, "log-prob length")?;
            trajectories.push(Trajectory {
                reward,
                behavior_version,
                obs,
                actions,
                behavior_log_prob,
            });
        }
        groups.push(GroupBatch {
            group_id,
            horizon,
            chunk,
            obs_dim,
            act_dim,
            trajectories,
        });
    }
    Ok(TrajectoryBatch {
        policy_version,
        groups,
    })
}

fn decode_metadata(r: &mut Reader) -> Result<Metadata, DecodeError> {
    let count = r.u32()?;
    r.need(count as u64 * 6)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let klen = r.u16()?;
        let at = r.pos;
        let key = std::str::from_utf8(r.take(klen as usize)?)
            .map_err(|_| DecodeError::InvalidUtf8 { offset: at })?
            .to_string();
        let vlen = r.u32()?;
        let at = r.pos;
        let val = std::str::from_utf8(r.take(vlen as usize)?)
            .map_err(|_| DecodeError::InvalidUtf8 { offset: at })?
            .to_string();
        entries.push((key, val));
    }
    Ok(Metadata { entries })
}

fn decode_snapshot(r: &mut Reader) -> Result<ParamSnapshot, DecodeError> {
    let version = r.u64()?;
    let count = r.u64()?;
    let at = r.pos;
    let params = r.f32s(count, "param count")?;
    ParamSnapshot::new(&params, version).map_err(|_| DecodeError::InvalidValue {
        offset: at,
        what: "non-finite parameter",
    })
}

/// Parses the fixed header, returning the message type and payload length.
pub fn decode_header(bytes: &[u8]) -> Result<(MsgType, u64), DecodeError> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        end: bytes.len(),
    };
    if r.take(4).map_err(|_| DecodeError::BadMagic { offset: 0 })? != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion {
            offset: 4,
            got: version,
        });
    }
    let ty = match r.u8()? {
        1 => MsgType::TrajectoryBatch,
        2 => MsgType::Metadata,
        3 => MsgType::WeightSnapshot,
        4 => MsgType::Ack,
        got => return Err(DecodeError::UnknownType { offset: 6, got }),
    };
    let payload_len = r.u64()?;
    Ok((ty, payload_len))
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame, DecodeError> {
    let (ty, payload_len) = decode_header(bytes)?;
    let available = bytes.len() - HEADER_LEN;
    if payload_len > available as u64 {
        return Err(DecodeError::Truncated {
            offset: HEADER_LEN,
            needed: payload_len,
            available,
        });
    }
    let end = HEADER_LEN + payload_len as usize;
    if end < bytes.len() {
        return Err(DecodeError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let mut r = Reader {
        buf: bytes,
        pos: HEADER_LEN,
        end,
    };
    let frame = match ty {
        MsgType::TrajectoryBatch => {
            Frame::Data(DataPlaneMsg::TrajectoryBatch(decode_trajectory(&mut r)?))
        }
        MsgType::Metadata => Frame::Data(DataPlaneMsg::Metadata(decode_metadata(&mut r)?)),
        MsgType::Ack => Frame::Data(DataPlaneMsg::Ack { epoch_id: r.u64()? }),
        MsgType::WeightSnapshot => Frame::Control(ControlPlaneMsg {
            snapshot: decode_snapshot(&mut r)?,
        }),
    };
    if r.pos != end {
        return Err(DecodeError::TrailingBytes {
            offset: r.pos,
            extra: end - r.pos,
        });
    }
    Ok(frame)
}

pub fn decode_data(bytes: &[u8]) -> Result<DataPlaneMsg, DecodeError> {
    match decode(bytes)? {
        Frame::Data(m) => Ok(m),
        Frame::Control(_) => Err(DecodeError::WrongPlane {
            offset: 6,
            got: MsgType::WeightSnapshot,
        }),
    }
}

pub fn decode_control(bytes: &[u8]) -> Result<ControlPlaneMsg, DecodeError> {
    match decode(bytes)? {
        Frame::Control(m) => Ok(m),
        Frame::Data(m) => Err(DecodeError::WrongPlane {
            offset: 6,
            got: m.msg_type(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metadata_is_19_bytes() {
        let bytes = encode_data(&DataPlaneMsg::Metadata(Metadata::default())).unwrap();
        assert_eq!(bytes.len(), 19);
        assert_eq!(&bytes[..4], b"DVLA");
        assert_eq!(bytes[6], 2);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_data(&DataPlaneMsg::Ack { epoch_id: 3 }).unwrap();
        bytes[1] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic at offset 0");
    }

    #[test]
    fn header_errors_name_offsets() {
        let good = encode_data(&DataPlaneMsg::Ack { epoch_id: 3 }).unwrap();
        let mut v = good.clone();
        v[4] = 2;
        assert_eq!(
            decode(&v).unwrap_err(),
            DecodeError::UnsupportedVersion { offset: 4, got: 2 }
        );
        let mut t = good.clone();
        t[6] = 9;
        assert_eq!(
            decode(&t).unwrap_err(),
            DecodeError::UnknownType { offset: 6, got: 9 }
        );
        assert!(matches!(
            decode(&good[..20]).unwrap_err(),
            DecodeError::Truncated { offset: 15, .. }
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode(&long).unwrap_err(),
            DecodeError::TrailingBytes { offset: 23, .. }
        ));
    }

    #[test]
    fn snapshot_layout() {
        let snap = ParamSnapshot::new(&[1.0, -2.0, 0.5], 9).unwrap();
        let bytes = encode_control(&ControlPlaneMsg {
            snapshot: snap.clone(),
        });
        assert_eq!(bytes.len(), snapshot_message_len(3));
        assert_eq!(
            u64::from_le_bytes(bytes[7..15].try_into().unwrap()),
            16 + 12
        );
        assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 9);
        assert_eq!(u64::from_le_bytes(bytes[23..31].try_into().unwrap()), 3);
        let back = decode_control(&bytes).unwrap();
        assert!(back.snapshot.bit_eq(&snap));
        assert!(matches!(
            decode_data(&bytes),
            Err(DecodeError::WrongPlane { .. })
        ));
    }
}
