//! Seeded bulk round-trip check of the wire codec: 10_000 random messages
//! must decode back to an equal value and re-encode to identical bytes.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use collab_slam::geom::Pose;
use collab_slam::map::{ElementId, ElementKind, Signature, DESCRIPTOR_LEN};
use collab_slam::protocol::{
    decode, encode, Control, WireFeature, WireKeyframe, WireLandmark, WireMessage, WireObservation,
};

fn rand_id(rng: &mut ChaCha8Rng) -> ElementId {
    ElementId::new(rng.gen_range(0..16), rng.gen_range(0..8), rng.gen())
}

fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = if axis.norm() < 1e-6 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.1))
    };
    Pose::new(
        rot,
        Vector3::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
        ),
    )
}

fn rand_descriptor(rng: &mut ChaCha8Rng) -> [u8; DESCRIPTOR_LEN] {
    let mut d = [0u8; DESCRIPTOR_LEN];
    rng.fill(&mut d[..]);
    d
}

fn rand_signature(rng: &mut ChaCha8Rng) -> Signature {
    (0..rng.gen_range(0..20)).map(|_| rng.gen()).collect()
}

fn rand_keyframe(rng: &mut ChaCha8Rng) -> WireKeyframe {
    let pose_only = rng.gen_bool(0.3);
    WireKeyframe {
        id: rand_id(rng),
        timestamp: rng.gen_range(0.0..1e4),
        world_from_cam: rand_pose(rng),
        intrinsics_ref: rng.gen_range(0..4),
        is_virtual: rng.gen_bool(0.1),
        pose_only,
        observations: if pose_only {
            Vec::new()
        } else {
            (0..rng.gen_range(0..30))
                .map(|_| WireObservation {
                    landmark: rand_id(rng),
                    u: rng.gen_range(0.0f32..640.0),
                    v: rng.gen_range(0.0f32..480.0),
                    depth: if rng.gen_bool(0.5) { rng.gen_range(0.3f32..10.0) } else { -1.0 },
                })
                .collect()
        },
        signature: if pose_only { Signature::new() } else { rand_signature(rng) },
    }
}

fn rand_landmark(rng: &mut ChaCha8Rng) -> WireLandmark {
    WireLandmark {
        id: rand_id(rng),
        position_w: [
            rng.gen_range(-100.0f32..100.0),
            rng.gen_range(-100.0f32..100.0),
            rng.gen_range(-100.0f32..100.0),
        ],
        descriptor: rand_descriptor(rng),
        observing_keyframes: (0..rng.gen_range(0..6)).map(|_| rand_id(rng)).collect(),
        last_updated_by: rng.gen_range(0..16),
    }
}

fn rand_control(rng: &mut ChaCha8Rng) -> Control {
    match rng.gen_range(0..8) {
        0 => Control::MapUpdate,
        1 => Control::Augment,
        2 => Control::LocalRefresh { new_from_old: rand_pose(rng) },
        3 => Control::PlaceRecRequest {
            timestamp: rng.gen_range(0.0..1e4),
            features: (0..rng.gen_range(0..40))
                .map(|_| WireFeature {
                    u: rng.gen_range(0.0f32..640.0),
                    v: rng.gen_range(0.0f32..480.0),
                    depth: if rng.gen_bool(0.5) { rng.gen_range(0.3f32..10.0) } else { -1.0 },
                    tag: rng.gen(),
                    descriptor: rand_descriptor(rng),
                })
                .collect(),
        },
        4 => Control::PlaceRecResponse { success: rng.gen_bool(0.5), world_from_cam: rand_pose(rng) },
        5 => Control::SessionStart { base_pose: rand_pose(rng) },
        6 => Control::Ack,
        _ => Control::NackResend { seqs: (0..rng.gen_range(0..32)).map(|_| rng.gen()).collect() },
    }
}

fn rand_message(rng: &mut ChaCha8Rng) -> WireMessage {
    let control = rand_control(rng);
    let carries_map = matches!(control, Control::MapUpdate | Control::Augment);
    WireMessage {
        client_id: rng.gen_range(0..16),
        session_id: rng.gen_range(0..8),
        seq: rng.gen(),
        map_id: rng.gen_range(0..64),
        ack: rng.gen(),
        keyframes: if carries_map {
            (0..rng.gen_range(0..5)).map(|_| rand_keyframe(rng)).collect()
        } else {
            Vec::new()
        },
        landmarks: if carries_map {
            (0..rng.gen_range(0..40)).map(|_| rand_landmark(rng)).collect()
        } else {
            Vec::new()
        },
        pruned: if carries_map {
            (0..rng.gen_range(0..10))
                .map(|_| {
                    (
                        if rng.gen_bool(0.5) { ElementKind::Keyframe } else { ElementKind::Landmark },
                        rand_id(rng),
                    )
                })
                .collect()
        } else {
            Vec::new()
        },
        control,
    }
}

#[test]
fn codec_bulk_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    for case in 0..10_000u32 {
        let raw = rand_message(&mut rng);
        // One codec pass canonicalizes pose representation (w >= 0); the
        // codec must then be an exact fixed point.
        let canonical = decode(&encode(&raw).unwrap()).unwrap();
        let bytes = encode(&canonical).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, canonical, "case {case}");
        assert_eq!(encode(&back).unwrap(), bytes, "case {case} bytes");
    }
}
