//! The unified client-server message format and binary codec.
//!
//! Every frame is a fixed little-endian header followed by a keyframe
//! array, a landmark array, a pruned-id array, and a command-specific
//! control body. Poses travel as 7xf64 (qw,qx,qy,qz,tx,ty,tz), landmark
//! positions as 3xf32, pixel observations as 2xf32 plus an f32 depth,
//! descriptors as raw 32 bytes, and signatures as a u16 count of 8-byte
//! tags. The byte layout is the external interface and is bit-exact.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::Pose;
use crate::map::{ElementId, ElementKind, Signature, DESCRIPTOR_LEN};

pub const MAGIC: u32 = 0x43534C4D;
pub const VERSION: u8 = 1;
/// magic(4) version(1) msg_type(1) client(4) session(4) seq(8) map(8)
/// kf_count(2) lm_count(2) prune_count(2) payload_len(4)
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("frame truncated: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("count or length mismatch: {0}")]
    CountMismatch(&'static str),
    #[error("count {0} exceeds field width")]
    Overflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    MapUpdate = 1,
    Augment = 2,
    LocalRefresh = 3,
    PlaceRecRequest = 4,
    PlaceRecResponse = 5,
    SessionStart = 6,
    Ack = 7,
    NackResend = 8,
}

impl MsgType {
    fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            1 => MsgType::MapUpdate,
            2 => MsgType::Augment,
            3 => MsgType::LocalRefresh,
            4 => MsgType::PlaceRecRequest,
            5 => MsgType::PlaceRecResponse,
            6 => MsgType::SessionStart,
            7 => MsgType::Ack,
            8 => MsgType::NackResend,
            other => return Err(CodecError::UnknownMsgType(other)),
        })
    }
}

/// Keyframe as it travels on the wire. A pose-only entry omits
/// observations and signature; the receiver keeps what it already has.
#[derive(Debug, Clone, PartialEq)]
pub struct WireKeyframe {
    pub id: ElementId,
    pub timestamp: f64,
    pub world_from_cam: Pose,
    pub intrinsics_ref: u32,
    pub is_virtual: bool,
    pub pose_only: bool,
    pub observations: Vec<WireObservation>,
    pub signature: Signature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireObservation {
    pub landmark: ElementId,
    pub u: f32,
    pub v: f32,
    pub depth: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireLandmark {
    pub id: ElementId,
    pub position_w: [f32; 3],
    pub descriptor: [u8; DESCRIPTOR_LEN],
    pub observing_keyframes: Vec<ElementId>,
    pub last_updated_by: u32,
}

impl WireLandmark {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(
            self.position_w[0] as f64,
            self.position_w[1] as f64,
            self.position_w[2] as f64,
        )
    }
}

/// Raw frame feature carried by a place recognition request.
#[derive(Debug, Clone, PartialEq)]
pub struct WireFeature {
    pub u: f32,
    pub v: f32,
    pub depth: f32,
    pub tag: u64,
    pub descriptor: [u8; DESCRIPTOR_LEN],
}

/// Command-specific control body. Every body starts with the piggybacked
/// acknowledgement (highest contiguous seq received from the peer).
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    MapUpdate,
    Augment,
    /// Rebases the client's local map after a server-side merge or
    /// optimization. `new_from_old` maps old local coordinates into the
    /// updated map frame.
    LocalRefresh { new_from_old: Pose },
    PlaceRecRequest { timestamp: f64, features: Vec<WireFeature> },
    PlaceRecResponse { success: bool, world_from_cam: Pose },
    SessionStart { base_pose: Pose },
    Ack,
    NackResend { seqs: Vec<u64> },
}

impl Control {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Control::MapUpdate => MsgType::MapUpdate,
            Control::Augment => MsgType::Augment,
            Control::LocalRefresh { .. } => MsgType::LocalRefresh,
            Control::PlaceRecRequest { .. } => MsgType::PlaceRecRequest,
            Control::PlaceRecResponse { .. } => MsgType::PlaceRecResponse,
            Control::SessionStart { .. } => MsgType::SessionStart,
            Control::Ack => MsgType::Ack,
            Control::NackResend { .. } => MsgType::NackResend,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub client_id: u32,
    pub session_id: u32,
    pub seq: u64,
    /// 0 = unassigned (server has not mapped this session yet).
    pub map_id: u64,
    /// Highest contiguous seq received from the peer, piggybacked on every
    /// message.
    pub ack: u64,
    pub keyframes: Vec<WireKeyframe>,
    pub landmarks: Vec<WireLandmark>,
    pub pruned: Vec<(ElementKind, ElementId)>,
    pub control: Control,
}

impl WireMessage {
    pub fn new(client_id: u32, session_id: u32, control: Control) -> Self {
        Self {
            client_id,
            session_id,
            seq: 0,
            map_id: 0,
            ack: 0,
            keyframes: Vec::new(),
            landmarks: Vec::new(),
            pruned: Vec::new(),
            control,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        self.control.msg_type()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
    fn id(&mut self, id: &ElementId) {
        self.u32(id.client_id);
        self.u32(id.session_id);
        self.u64(id.local_seq);
    }
    fn pose(&mut self, p: &Pose) {
        for c in p.coeffs() {
            self.f64(c);
        }
    }
    fn count(&mut self, n: usize) -> Result<(), CodecError> {
        let v: u16 = n.try_into().map_err(|_| CodecError::Overflow(n))?;
        self.u16(v);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn id(&mut self) -> Result<ElementId, CodecError> {
        Ok(ElementId {
            client_id: self.u32()?,
            session_id: self.u32()?,
            local_seq: self.u64()?,
        })
    }
    fn pose(&mut self) -> Result<Pose, CodecError> {
        let mut c = [0.0; 7];
        for v in &mut c {
            *v = self.f64()?;
        }
        Ok(Pose::from_parts(c[0], c[1], c[2], c[3], c[4], c[5], c[6]))
    }
}

const FLAG_VIRTUAL: u8 = 0b01;
const FLAG_POSE_ONLY: u8 = 0b10;

fn encode_keyframe(w: &mut Writer, kf: &WireKeyframe) -> Result<(), CodecError> {
    w.id(&kf.id);
    w.f64(kf.timestamp);
    w.pose(&kf.world_from_cam);
    w.u32(kf.intrinsics_ref);
    let mut flags = 0u8;
    if kf.is_virtual {
        flags |= FLAG_VIRTUAL;
    }
    if kf.pose_only {
        flags |= FLAG_POSE_ONLY;
    }
    w.u8(flags);
    if !kf.pose_only {
        w.count(kf.observations.len())?;
        for obs in &kf.observations {
            w.id(&obs.landmark);
            w.f32(obs.u);
            w.f32(obs.v);
            w.f32(obs.depth);
        }
        w.count(kf.signature.len())?;
        for tag in &kf.signature {
            w.bytes(&tag.to_le_bytes());
        }
    }
    Ok(())
}

fn decode_keyframe(r: &mut Reader) -> Result<WireKeyframe, CodecError> {
    let id = r.id()?;
    let timestamp = r.f64()?;
    let world_from_cam = r.pose()?;
    let intrinsics_ref = r.u32()?;
    let flags = r.u8()?;
    let pose_only = flags & FLAG_POSE_ONLY != 0;
    let mut observations = Vec::new();
    let mut signature = Signature::new();
    if !pose_only {
        let n_obs = r.u16()? as usize;
        observations.reserve(n_obs);
        for _ in 0..n_obs {
            observations.push(WireObservation {
                landmark: r.id()?,
                u: r.f32()?,
                v: r.f32()?,
                depth: r.f32()?,
            });
        }
        let n_tags = r.u16()? as usize;
        for _ in 0..n_tags {
            signature.insert(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
    }
    Ok(WireKeyframe {
        id,
        timestamp,
        world_from_cam,
        intrinsics_ref,
        is_virtual: flags & FLAG_VIRTUAL != 0,
        pose_only,
        observations,
        signature,
    })
}

fn encode_landmark(w: &mut Writer, lm: &WireLandmark) -> Result<(), CodecError> {
    w.id(&lm.id);
    for c in lm.position_w {
        w.f32(c);
    }
    w.bytes(&lm.descriptor);
    w.u32(lm.last_updated_by);
    w.count(lm.observing_keyframes.len())?;
    for kf in &lm.observing_keyframes {
        w.id(kf);
    }
    Ok(())
}

fn decode_landmark(r: &mut Reader) -> Result<WireLandmark, CodecError> {
    let id = r.id()?;
    let position_w = [r.f32()?, r.f32()?, r.f32()?];
    let descriptor: [u8; DESCRIPTOR_LEN] = r.take(DESCRIPTOR_LEN)?.try_into().unwrap();
    let last_updated_by = r.u32()?;
    let n = r.u16()? as usize;
    let mut observing_keyframes = Vec::with_capacity(n);
    for _ in 0..n {
        observing_keyframes.push(r.id()?);
    }
    Ok(WireLandmark {
        id,
        position_w,
        descriptor,
        observing_keyframes,
        last_updated_by,
    })
}

fn encode_control(w: &mut Writer, m: &WireMessage) -> Result<(), CodecError> {
    w.u64(m.ack);
    match &m.control {
        Control::MapUpdate | Control::Augment | Control::Ack => {}
        Control::LocalRefresh { new_from_old } => w.pose(new_from_old),
        Control::PlaceRecRequest { timestamp, features } => {
            w.f64(*timestamp);
            w.count(features.len())?;
            for f in features {
                w.f32(f.u);
                w.f32(f.v);
                w.f32(f.depth);
                w.bytes(&f.tag.to_le_bytes());
                w.bytes(&f.descriptor);
            }
        }
        Control::PlaceRecResponse { success, world_from_cam } => {
            w.u8(*success as u8);
            w.pose(world_from_cam);
        }
        Control::SessionStart { base_pose } => w.pose(base_pose),
        Control::NackResend { seqs } => {
            w.count(seqs.len())?;
            for s in seqs {
                w.u64(*s);
            }
        }
    }
    Ok(())
}

fn decode_control(r: &mut Reader, msg_type: MsgType) -> Result<(u64, Control), CodecError> {
    let ack = r.u64()?;
    let control = match msg_type {
        MsgType::MapUpdate => Control::MapUpdate,
        MsgType::Augment => Control::Augment,
        MsgType::Ack => Control::Ack,
        MsgType::LocalRefresh => Control::LocalRefresh { new_from_old: r.pose()? },
        MsgType::PlaceRecRequest => {
            let timestamp = r.f64()?;
            let n = r.u16()? as usize;
            let mut features = Vec::with_capacity(n);
            for _ in 0..n {
                features.push(WireFeature {
                    u: r.f32()?,
                    v: r.f32()?,
                    depth: r.f32()?,
                    tag: u64::from_le_bytes(r.take(8)?.try_into().unwrap()),
                    descriptor: r.take(DESCRIPTOR_LEN)?.try_into().unwrap(),
                });
            }
            Control::PlaceRecRequest { timestamp, features }
        }
        MsgType::PlaceRecResponse => Control::PlaceRecResponse {
            success: r.u8()? != 0,
            world_from_cam: r.pose()?,
        },
        MsgType::SessionStart => Control::SessionStart { base_pose: r.pose()? },
        MsgType::NackResend => {
            let n = r.u16()? as usize;
            let mut seqs = Vec::with_capacity(n);
            for _ in 0..n {
                seqs.push(r.u64()?);
            }
            Control::NackResend { seqs }
        }
    };
    Ok((ack, control))
}

pub fn encode(m: &WireMessage) -> Result<Vec<u8>, CodecError> {
    let mut body = Writer(Vec::new());
    for kf in &m.keyframes {
        encode_keyframe(&mut body, kf)?;
    }
    for lm in &m.landmarks {
        encode_landmark(&mut body, lm)?;
    }
    for (kind, id) in &m.pruned {
        body.u8(match kind {
            ElementKind::Keyframe => 0,
            ElementKind::Landmark => 1,
        });
        body.id(id);
    }
    encode_control(&mut body, m)?;

    let kf_count: u16 = m.keyframes.len().try_into().map_err(|_| CodecError::Overflow(m.keyframes.len()))?;
    let lm_count: u16 = m.landmarks.len().try_into().map_err(|_| CodecError::Overflow(m.landmarks.len()))?;
    let prune_count: u16 = m.pruned.len().try_into().map_err(|_| CodecError::Overflow(m.pruned.len()))?;

    let mut w = Writer(Vec::with_capacity(HEADER_LEN + body.0.len()));
    w.u32(MAGIC);
    w.u8(VERSION);
    w.u8(m.msg_type() as u8);
    w.u32(m.client_id);
    w.u32(m.session_id);
    w.u64(m.seq);
    w.u64(m.map_id);
    w.u16(kf_count);
    w.u16(lm_count);
    w.u16(prune_count);
    w.u32(body.0.len() as u32);
    w.bytes(&body.0);
    Ok(w.0)
}

pub fn decode(b: &[u8]) -> Result<WireMessage, CodecError> {
    let mut r = Reader { buf: b, pos: 0 };
    let magic = r.u32()?;
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let msg_type = MsgType::from_u8(r.u8()?)?;
    let client_id = r.u32()?;
    let session_id = r.u32()?;
    let seq = r.u64()?;
    let map_id = r.u64()?;
    let kf_count = r.u16()? as usize;
    let lm_count = r.u16()? as usize;
    let prune_count = r.u16()? as usize;
    let payload_len = r.u32()? as usize;
    if b.len() != HEADER_LEN + payload_len {
        if b.len() < HEADER_LEN + payload_len {
            return Err(CodecError::Truncated { needed: HEADER_LEN + payload_len, available: b.len() });
        }
        return Err(CodecError::CountMismatch("trailing bytes after payload"));
    }

    let mut keyframes = Vec::with_capacity(kf_count);
    for _ in 0..kf_count {
        keyframes.push(decode_keyframe(&mut r)?);
    }
    let mut landmarks = Vec::with_capacity(lm_count);
    for _ in 0..lm_count {
        landmarks.push(decode_landmark(&mut r)?);
    }
    let mut pruned = Vec::with_capacity(prune_count);
    for _ in 0..prune_count {
        let kind = match r.u8()? {
            0 => ElementKind::Keyframe,
            1 => ElementKind::Landmark,
            _ => return Err(CodecError::CountMismatch("bad prune kind")),
        };
        pruned.push((kind, r.id()?));
    }
    let (ack, control) = decode_control(&mut r, msg_type)?;
    if r.pos != b.len() {
        return Err(CodecError::CountMismatch("payload longer than declared content"));
    }
    Ok(WireMessage {
        client_id,
        session_id,
        seq,
        map_id,
        ack,
        keyframes,
        landmarks,
        pruned,
        control,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_message() -> WireMessage {
        let mut m = WireMessage::new(3, 2, Control::MapUpdate);
        m.seq = 9;
        m.map_id = 4;
        m.ack = 7;
        m.keyframes.push(WireKeyframe {
            id: ElementId::new(3, 2, 1),
            timestamp: 1.25,
            world_from_cam: Pose::from_parts(1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0),
            intrinsics_ref: 0,
            is_virtual: false,
            pose_only: false,
            observations: vec![WireObservation {
                landmark: ElementId::new(3, 2, 10),
                u: 5.5,
                v: 6.5,
                depth: 2.0,
            }],
            signature: [11u64, 22].into_iter().collect(),
        });
        m.landmarks.push(WireLandmark {
            id: ElementId::new(3, 2, 10),
            position_w: [1.0, 2.0, 0.5],
            descriptor: crate::map::Landmark::descriptor_for_tag(11),
            observing_keyframes: vec![ElementId::new(3, 2, 1)],
            last_updated_by: 3,
        });
        m.pruned.push((ElementKind::Landmark, ElementId::new(3, 2, 4)));
        m
    }

    #[test]
    fn round_trip_field_equal() {
        let m = sample_message();
        let bytes = encode(&m).unwrap();
        assert_eq!(decode(&bytes).unwrap(), m);
        // encode(decode(b)) == b
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn empty_update_is_header_plus_ack() {
        let mut m = WireMessage::new(1, 1, Control::MapUpdate);
        m.seq = 1;
        let bytes = encode(&m).unwrap();
        // Header field widths sum to 40; the only body content is the
        // piggybacked 8-byte ack.
        assert_eq!(bytes.len(), HEADER_LEN + 8);
    }

    #[test]
    fn pose_only_keyframe_payload_size() {
        let mut m = WireMessage::new(1, 1, Control::MapUpdate);
        m.keyframes.push(WireKeyframe {
            id: ElementId::new(1, 1, 1),
            timestamp: 0.0,
            world_from_cam: Pose::identity(),
            intrinsics_ref: 0,
            is_virtual: false,
            pose_only: true,
            observations: Vec::new(),
            signature: Signature::new(),
        });
        let bytes = encode(&m).unwrap();
        // id(16) + timestamp(8) + pose 7xf64(56) + intrinsics_ref(4) + flags(1)
        assert_eq!(bytes.len(), HEADER_LEN + 16 + 8 + 56 + 4 + 1 + 8);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample_message()).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode(&bad), Err(CodecError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(decode(&bad), Err(CodecError::BadVersion(99))));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(truncated), Err(CodecError::Truncated { .. })));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(decode(&extended), Err(CodecError::CountMismatch(_))));
    }

    #[test]
    fn unknown_msg_type_rejected() {
        let mut bytes = encode(&sample_message()).unwrap();
        bytes[5] = 200;
        assert_eq!(decode(&bytes), Err(CodecError::UnknownMsgType(200)));
    }

    fn arb_id() -> impl Strategy<Value = ElementId> {
        (0..8u32, 0..4u32, 0..1000u64).prop_map(|(c, s, q)| ElementId::new(c, s, q))
    }

    fn arb_keyframe() -> impl Strategy<Value = WireKeyframe> {
        (
            arb_id(),
            -100.0f64..100.0,
            prop::array::uniform3(-1.0f64..1.0),
            prop::collection::vec((arb_id(), -500.0f32..500.0, -500.0f32..500.0, -1.0f32..20.0), 0..6),
            prop::collection::btree_set(0u64..5000, 0..8),
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(id, ts, axis, obs, signature, is_virtual, pose_only)| {
                let axis = Vector3::from(axis);
                let rot = if axis.norm() < 1e-6 {
                    nalgebra::UnitQuaternion::identity()
                } else {
                    nalgebra::UnitQuaternion::from_scaled_axis(axis)
                };
                WireKeyframe {
                    id,
                    timestamp: ts,
                    world_from_cam: Pose::new(rot, Vector3::new(ts * 0.1, 1.0, 0.0)),
                    intrinsics_ref: 0,
                    is_virtual,
                    pose_only,
                    observations: if pose_only {
                        Vec::new()
                    } else {
                        obs.into_iter()
                            .map(|(l, u, v, d)| WireObservation { landmark: l, u, v, depth: d })
                            .collect()
                    },
                    signature: if pose_only { Signature::new() } else { signature },
                }
            })
    }

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        (
            (0..8u32, 0..4u32, 0..10_000u64, 0..16u64, 0..10_000u64),
            prop::collection::vec(arb_keyframe(), 0..4),
            prop::collection::vec((arb_id(), prop::array::uniform3(-50.0f32..50.0), 0u64..999, prop::collection::vec(arb_id(), 0..3)), 0..5),
            prop::collection::vec((any::<bool>(), arb_id()), 0..4),
            prop_oneof![
                Just(Control::MapUpdate),
                Just(Control::Augment),
                Just(Control::Ack),
                (0u64..50).prop_map(|n| Control::NackResend { seqs: (0..n % 7).collect() }),
                (-1.0f64..1.0).prop_map(|x| Control::LocalRefresh {
                    new_from_old: Pose::from_translation(Vector3::new(x, 0.0, 0.0))
                }),
            ],
        )
            .prop_map(|((client, session, seq, map_id, ack), keyframes, lms, pruned, control)| {
                WireMessage {
                    client_id: client,
                    session_id: session,
                    seq,
                    map_id,
                    ack,
                    keyframes,
                    landmarks: lms
                        .into_iter()
                        .map(|(id, pos, tag, obs)| WireLandmark {
                            id,
                            position_w: pos,
                            descriptor: crate::map::Landmark::descriptor_for_tag(tag),
                            observing_keyframes: obs,
                            last_updated_by: id.client_id,
                        })
                        .collect(),
                    pruned: pruned
                        .into_iter()
                        .map(|(k, id)| {
                            (if k { ElementKind::Keyframe } else { ElementKind::Landmark }, id)
                        })
                        .collect(),
                    control,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn codec_round_trip(m in arb_message()) {
            // One pass through the codec canonicalizes quaternion rounding;
            // after that the representation must be a fixed point.
            let m = decode(&encode(&m).unwrap()).unwrap();
            let bytes = encode(&m).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
