use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::ObjectPose;
use crate::geometry::{rot_from_6d, rot_to_6d, Pose, Rotation};
use crate::state::RobotState;

/// Gaussian sensor noise. Defaults: 2 deg on joints, 5 mm on positions,
/// 1 deg on orientations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub sigma_joints_rad: f64,
    pub sigma_pos_m: f64,
    pub sigma_rot_rad: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_joints_rad: 2f64.to_radians(),
            sigma_pos_m: 0.005,
            sigma_rot_rad: 1f64.to_radians(),
        }
    }
}

impl NoiseSpec {
    pub fn on() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn off() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("sigma_joints_rad", self.sigma_joints_rad),
            ("sigma_pos_m", self.sigma_pos_m),
            ("sigma_rot_rad", self.sigma_rot_rad),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
}

/// Random-axis rotation with angle |N(0, sigma^2)|.
pub fn random_small_rotation<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Rotation {
    if sigma == 0.0 {
        return Rotation::identity();
    }
    let axis = loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-12 {
            break v;
        }
    };
    Rotation::from_axis_angle(&axis, gauss(rng, sigma).abs())
}

pub fn inject_noise_pose<R: Rng + ?Sized>(p: &Pose, spec: &NoiseSpec, rng: &mut R) -> Pose {
    if !spec.enabled {
        return *p;
    }
    let dp = Vector3::new(gauss(rng, spec.sigma_pos_m), gauss(rng, spec.sigma_pos_m), gauss(rng, spec.sigma_pos_m));
    Pose::new(p.position + dp, p.orientation.compose(&random_small_rotation(rng, spec.sigma_rot_rad)))
}

pub fn inject_noise_state<R: Rng + ?Sized>(s: &RobotState, spec: &NoiseSpec, rng: &mut R) -> RobotState {
    if !spec.enabled {
        return *s;
    }
    let mut out = *s;
    for q in &mut out.joints {
        *q += gauss(rng, spec.sigma_joints_rad);
    }
    for p in &mut out.wrist_pos {
        *p += gauss(rng, spec.sigma_pos_m);
    }
    if spec.sigma_rot_rad == 0.0 {
        return out;
    }
    let noise = random_small_rotation(rng, spec.sigma_rot_rad);
    if let Ok(r) = rot_from_6d(&s.wrist_rot) {
        out.wrist_rot = rot_to_6d(&r.compose(&noise));
    }
    out
}

pub fn inject_noise_object<R: Rng + ?Sized>(p: &ObjectPose, spec: &NoiseSpec, rng: &mut R) -> ObjectPose {
    if !spec.enabled {
        return *p;
    }
    inject_noise_pose(&crate::dataset::pose_from7(p), spec, rng).to_array7()
}
