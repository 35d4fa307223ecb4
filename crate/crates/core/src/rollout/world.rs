use nalgebra::Vector3;

use crate::dataset::ObjectPose;
use crate::geometry::{rot_from_6d, rot_to_6d, Pose};
use crate::hand::{clamp_to_limits, HandModel};
use crate::state::RobotState;

pub const DEFAULT_GRASP_RADIUS: f64 = 0.02;

/// A 10 cm cube with a handle on top; the anchor is where fingers must be
/// inserted, in the object frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectGeometry {
    pub size: f64,
    pub handle_anchor: Vector3<f64>,
}

impl Default for ObjectGeometry {
    fn default() -> Self {
        Self {
            size: 0.10,
            handle_anchor: Vector3::new(0.0, 0.0, 0.075),
        }
    }
}

impl ObjectGeometry {
    pub fn tag(&self) -> &'static str {
        "cube-with-handle"
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraspState {
    Free,
    /// Object pose expressed in the wrist frame at the moment of attachment.
    Attached { object_in_wrist: Pose },
}

/// Kinematic pick-and-place world: no dynamics, no gravity. The object stays
/// put until at least `min_contacts` fingertips are inside the grasp radius
/// of the handle anchor, then moves rigidly with the wrist.
#[derive(Clone, Debug, PartialEq)]
pub struct SimWorld {
    pub hand: RobotState,
    pub object: Pose,
    pub goal: Vector3<f64>,
    pub grasp: GraspState,
    pub grasp_radius: f64,
    pub min_contacts: usize,
    pub geometry: ObjectGeometry,
}

impl SimWorld {
    pub fn new(hand: RobotState, object: Pose, goal: Vector3<f64>) -> Self {
        Self {
            hand,
            object,
            goal,
            grasp: GraspState::Free,
            grasp_radius: DEFAULT_GRASP_RADIUS,
            min_contacts: 2,
            geometry: ObjectGeometry::default(),
        }
    }

    pub fn anchor(&self) -> Vector3<f64> {
        self.object.transform_point(&self.geometry.handle_anchor)
    }

    pub fn goal_distance(&self) -> f64 {
        (self.object.position - self.goal).norm()
    }

    pub fn is_attached(&self) -> bool {
        matches!(self.grasp, GraspState::Attached { .. })
    }

    pub fn object_pose7(&self) -> ObjectPose {
        self.object.to_array7()
    }
}

/// Applies one commanded state. Joints are clamped to the model's limits and
/// the wrist rotation re-orthonormalized; a degenerate rotation keeps the
/// previous orientation.
pub fn step_world(world: &SimWorld, commanded: &RobotState, model: &HandModel) -> SimWorld {
    let mut next = world.clone();
    let joints = clamp_to_limits(&commanded.joints, model);
    let rot = rot_from_6d(&commanded.wrist_rot)
        .or_else(|_| world.hand.wrist_rotation())
        .unwrap_or_else(|_| crate::geometry::Rotation::identity());
    let wrist_pos = if commanded.wrist_pos.iter().all(|v| v.is_finite()) {
        commanded.wrist_pos
    } else {
        world.hand.wrist_pos
    };
    next.hand = RobotState {
        joints,
        wrist_pos,
        wrist_rot: rot_to_6d(&rot),
    };
    let wrist = Pose::new(Vector3::from(wrist_pos), rot);
    if let GraspState::Free = world.grasp {
        let anchor = world.anchor();
        let tips = model.fingertips_world(&joints, &wrist);
        let contacts = tips.iter().filter(|t| (*t - anchor).norm() < world.grasp_radius).count();
        if contacts >= world.min_contacts {
            next.grasp = GraspState::Attached {
                object_in_wrist: wrist.inverse().compose(&world.object),
            };
        }
    }
    if let GraspState::Attached { object_in_wrist } = next.grasp {
        next.object = wrist.compose(&object_in_wrist);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::hand::FINGER_OFFSETS;
    use crate::retarget::ik_finger;

    fn world_with_hand_at(model: &HandModel, wrist: Pose) -> SimWorld {
        let hand = RobotState::new(model.mid_range(), &wrist);
        SimWorld::new(hand, Pose::new(Vector3::new(0.5, 0.0, 0.05), Rotation::identity()), Vector3::new(0.5, 0.3, 0.05))
    }

    #[test]
    fn far_fingertips_leave_object_alone() {
        let m = HandModel::default_model();
        let w = world_with_hand_at(&m, Pose::new(Vector3::new(0.0, 0.0, 1.0), Rotation::identity()));
        let before = w.object;
        let next = step_world(&w, &w.hand, &m);
        assert_eq!(next.object, before);
        assert!(!next.is_attached());
    }

    #[test]
    fn two_tips_at_anchor_attach_and_carry() {
        let m = HandModel::default_model();
        let wrist = Pose::new(Vector3::new(0.4, -0.02, 0.05), Rotation::identity());
        let mut w = world_with_hand_at(&m, wrist);
        let anchor_in_palm = wrist.inverse().transform_point(&w.anchor());
        let mut joints = m.mid_range();
        for f in [1, 2] {
            let s = FINGER_OFFSETS[f];
            let chain = m.chain(f);
            let r = ik_finger(chain, &anchor_in_palm, &joints[s..s + chain.dof()]).unwrap();
            assert!(r.residual < 0.02, "finger {f} cannot reach the anchor: {}", r.residual);
            joints[s..s + chain.dof()].copy_from_slice(&r.q);
        }
        let cmd = RobotState::new(joints, &wrist);
        w = step_world(&w, &cmd, &m);
        assert!(w.is_attached());
        let start = w.object.position;
        let moved = Pose::new(wrist.position + Vector3::new(0.1, 0.0, 0.0), wrist.orientation);
        let w2 = step_world(&w, &RobotState::new(joints, &moved), &m);
        assert!(((w2.object.position - start).norm() - 0.1).abs() < 1e-12);
        assert_eq!(step_world(&w, &cmd, &m), step_world(&w, &cmd, &m));
    }
}
