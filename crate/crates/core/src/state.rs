//! The 25-dimensional robot state vector.
//!
//! Layout: 16 joint angles in finger-major order (thumb 0-3, index 4-6,
//! middle 7-9, ring 10-12, pinky 13-15), wrist position (16-18), wrist
//! rotation as 6D (19-24).

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{rot_from_6d, rot_to_6d, Pose, Rot6D, Rotation};

pub const NUM_JOINTS: usize = 16;
pub const STATE_DIM: usize = 25;
pub const OBJECT_DIM: usize = 7;
pub const WRIST_POS: std::ops::Range<usize> = 16..19;
pub const WRIST_ROT: std::ops::Range<usize> = 19..25;

pub type JointVector = [f64; NUM_JOINTS];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub joints: JointVector,
    pub wrist_pos: [f64; 3],
    pub wrist_rot: Rot6D,
}

impl RobotState {
    pub fn new(joints: JointVector, wrist: &Pose) -> Self {
        Self {
            joints,
            wrist_pos: [wrist.position.x, wrist.position.y, wrist.position.z],
            wrist_rot: rot_to_6d(&wrist.orientation),
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut a = [0.0; STATE_DIM];
        a[..NUM_JOINTS].copy_from_slice(&self.joints);
        a[WRIST_POS].copy_from_slice(&self.wrist_pos);
        a[WRIST_ROT].copy_from_slice(&self.wrist_rot.0);
        a
    }

    /// Reads a raw 25-vector. No validation beyond the length; see
    /// [`RobotState::validate`].
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                expected: STATE_DIM,
                got: v.len(),
            });
        }
        let mut joints = [0.0; NUM_JOINTS];
        joints.copy_from_slice(&v[..NUM_JOINTS]);
        let mut rot = [0.0; 6];
        rot.copy_from_slice(&v[WRIST_ROT]);
        Ok(Self {
            joints,
            wrist_pos: [v[16], v[17], v[18]],
            wrist_rot: Rot6D(rot),
        })
    }

    pub fn wrist_rotation(&self) -> Result<Rotation> {
        rot_from_6d(&self.wrist_rot)
    }

    pub fn wrist_pose(&self) -> Result<Pose> {
        Ok(Pose::new(Vector3::from(self.wrist_pos), self.wrist_rotation()?))
    }

    /// Finite entries and a decodable rotation. Joint limits are checked
    /// separately against a hand model.
    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite state entry".into()));
        }
        self.wrist_rotation().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_layout_round_trip() {
        let v: Vec<f64> = (0..25).map(|i| i as f64 * 0.5).collect();
        let s = RobotState::from_slice(&v).unwrap();
        assert_eq!(s.joints[15], 7.5);
        assert_eq!(s.wrist_pos, [8.0, 8.5, 9.0]);
        assert_eq!(s.wrist_rot.0[0], 9.5);
        assert_eq!(s.to_array().to_vec(), v);
        assert!(matches!(RobotState::from_slice(&v[..24]), Err(Error::DimensionMismatch { got: 24, .. })));
    }
}
