//! Revolute-chain model of a 16-DoF five-finger hand.
//!
//! All fingertip positions are expressed in the palm (wrist) frame: x points
//! along the extended fingers, y toward the thumb, z along the palm normal
//! (fingers curl toward +z). Geometry lives in a TOML model file; the
//! built-in default is `hand_default.toml`.

use std::path::Path;

use nalgebra::{Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::state::{JointVector, RobotState, NUM_JOINTS};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
/// First joint index of each finger within a [`JointVector`].
pub const FINGER_OFFSETS: [usize; 5] = [0, 4, 7, 10, 13];
const DEFAULT_MODEL: &str = include_str!("hand_default.toml");

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    /// Unit rotation axis in the frame of the preceding link.
    pub axis: Vector3<f64>,
    /// Offset from the previous joint (the palm origin for the first).
    pub origin: Vector3<f64>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerChain {
    pub name: String,
    pub joints: Vec<Joint>,
    pub tip_offset: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    pub name: String,
    pub fingers: Vec<FingerChain>,
    /// Declared zero-pose fingertip positions, palm frame.
    pub reference_tips: Vec<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    name: String,
    fingers: Vec<FingerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FingerFile {
    name: String,
    tip_offset: [f64; 3],
    reference_tip: [f64; 3],
    joints: Vec<JointFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    axis: [f64; 3],
    origin: [f64; 3],
    limits_deg: [f64; 2],
}

impl FingerChain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn mid_range(&self) -> Vec<f64> {
        self.joints.iter().map(|j| 0.5 * (j.lo + j.hi)).collect()
    }

    /// Upper bound on the lever arm from the first joint to the tip.
    pub fn reach(&self) -> f64 {
        self.joints.iter().skip(1).map(|j| j.origin.norm()).sum::<f64>() + self.tip_offset.norm()
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.lo, j.hi);
        }
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Joint positions, world-frame joint axes and the tip.
    fn frames(&self, q: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vector3<f64>) {
        let mut p = Vector3::zeros();
        let mut r = Rotation::identity();
        let mut origins = Vec::with_capacity(q.len());
        let mut axes = Vec::with_capacity(q.len());
        for (j, &a) in self.joints.iter().zip(q) {
            p += r.apply(&j.origin);
            origins.push(p);
            axes.push(r.apply(&j.axis));
            r = r.compose(&Rotation::from_axis_angle(&j.axis, a));
        }
        let tip = p + r.apply(&self.tip_offset);
        (origins, axes, tip)
    }
}

pub fn finger_fk(chain: &FingerChain, q: &[f64]) -> Result<Vector3<f64>> {
    chain.check_dim(q)?;
    Ok(chain.frames(q).2)
}

/// Geometric Jacobian of the fingertip position, one column per joint.
pub fn finger_jacobian(chain: &FingerChain, q: &[f64]) -> Result<Matrix3xX<f64>> {
    chain.check_dim(q)?;
    let (origins, axes, tip) = chain.frames(q);
    let mut j = Matrix3xX::zeros(q.len());
    for (c, (o, a)) in origins.iter().zip(&axes).enumerate() {
        j.set_column(c, &a.cross(&(tip - o)));
    }
    Ok(j)
}

pub fn clamp_to_limits(q: &JointVector, model: &HandModel) -> JointVector {
    let mut out = *q;
    for (f, chain) in model.fingers.iter().enumerate() {
        let s = FINGER_OFFSETS[f];
        chain.clamp(&mut out[s..s + chain.dof()]);
    }
    out
}

fn deg(v: f64) -> f64 {
    v.to_radians()
}

impl HandModel {
    pub fn default_model() -> Self {
        Self::from_toml_str(DEFAULT_MODEL).expect("built-in hand model is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(s).map_err(|e| Error::Config(format!("hand model: {e}")))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                path: "hand model".into(),
                found: file.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let mut fingers = Vec::new();
        let mut reference_tips = Vec::new();
        for f in file.fingers {
            let joints = f
                .joints
                .iter()
                .map(|j| {
                    let axis = Vector3::from(j.axis);
                    Joint {
                        axis: axis / axis.norm(),
                        origin: Vector3::from(j.origin),
                        lo: deg(j.limits_deg[0]),
                        hi: deg(j.limits_deg[1]),
                    }
                })
                .collect();
            fingers.push(FingerChain {
                name: f.name,
                joints,
                tip_offset: Vector3::from(f.tip_offset),
            });
            reference_tips.push(Vector3::from(f.reference_tip));
        }
        let model = Self {
            name: file.name,
            fingers,
            reference_tips,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("hand model: {m}")));
        if self.fingers.len() != 5 {
            return bad(format!("expected 5 fingers, found {}", self.fingers.len()));
        }
        for (i, f) in self.fingers.iter().enumerate() {
            if f.name != FINGER_NAMES[i] {
                return bad(format!("finger {i} must be `{}`, found `{}`", FINGER_NAMES[i], f.name));
            }
            let want = if i == 0 { 4 } else { 3 };
            if f.dof() != want {
                return bad(format!("{} has {} joints, expected {want}", f.name, f.dof()));
            }
            for j in &f.joints {
                if !(j.lo < j.hi) || !j.axis.iter().all(|v| v.is_finite()) {
                    return bad(format!("{}: bad joint limits or axis", f.name));
                }
            }
        }
        for a in 0..5 {
            for b in a + 1..5 {
                if self.fingers[a].joints[0].origin == self.fingers[b].joints[0].origin {
                    return bad(format!("{} and {} share a base origin", FINGER_NAMES[a], FINGER_NAMES[b]));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            name: self.name.clone(),
            fingers: self
                .fingers
                .iter()
                .zip(&self.reference_tips)
                .map(|(f, r)| FingerFile {
                    name: f.name.clone(),
                    tip_offset: f.tip_offset.into(),
                    reference_tip: (*r).into(),
                    joints: f
                        .joints
                        .iter()
                        .map(|j| JointFile {
                            axis: j.axis.into(),
                            origin: j.origin.into(),
                            limits_deg: [j.lo.to_degrees(), j.hi.to_degrees()],
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("hand model serializes")
    }

    pub fn chain(&self, finger: usize) -> &FingerChain {
        &self.fingers[finger]
    }

    pub fn mid_range(&self) -> JointVector {
        let mut q = [0.0; NUM_JOINTS];
        for (f, chain) in self.fingers.iter().enumerate() {
            let s = FINGER_OFFSETS[f];
            q[s..s + chain.dof()].copy_from_slice(&chain.mid_range());
        }
        q
    }

    pub fn limits(&self) -> (JointVector, JointVector) {
        let mut lo = [0.0; NUM_JOINTS];
        let mut hi = [0.0; NUM_JOINTS];
        for (f, chain) in self.fingers.iter().enumerate() {
            for (k, j) in chain.joints.iter().enumerate() {
                lo[FINGER_OFFSETS[f] + k] = j.lo;
                hi[FINGER_OFFSETS[f] + k] = j.hi;
            }
        }
        (lo, hi)
    }

    pub fn finger_joints<'a>(&self, q: &'a JointVector, finger: usize) -> &'a [f64] {
        let s = FINGER_OFFSETS[finger];
        &q[s..s + self.fingers[finger].dof()]
    }

    /// Fingertips in the palm frame.
    pub fn fingertips(&self, q: &JointVector) -> [Vector3<f64>; 5] {
        std::array::from_fn(|f| self.fingers[f].frames(self.finger_joints(q, f)).2)
    }

    pub fn fingertips_world(&self, q: &JointVector, wrist: &Pose) -> [Vector3<f64>; 5] {
        self.fingertips(q).map(|p| wrist.transform_point(&p))
    }

    pub fn state_fingertips_world(&self, s: &RobotState) -> Result<[Vector3<f64>; 5]> {
        Ok(self.fingertips_world(&s.joints, &s.wrist_pose()?))
    }

    /// Fingertips at the all-zero joint vector.
    pub fn zero_pose_tips(&self) -> Vec<Vector3<f64>> {
        self.fingertips(&[0.0; NUM_JOINTS]).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn straight_chain(lengths: &[f64], tip: f64, axis: Vector3<f64>) -> FingerChain {
        let mut joints = Vec::new();
        let mut prev = 0.0;
        for &l in lengths {
            joints.push(Joint {
                axis,
                origin: Vector3::new(prev, 0.0, 0.0),
                lo: -3.0,
                hi: 3.0,
            });
            prev = l;
        }
        FingerChain {
            name: "test".into(),
            joints,
            tip_offset: Vector3::new(prev + tip, 0.0, 0.0),
        }
    }

    fn random_q(chain: &FingerChain, rng: &mut impl Rng) -> Vec<f64> {
        chain.joints.iter().map(|j| rng.gen_range(j.lo..=j.hi)).collect()
    }

    /// Independent oracle: explicit 4x4 homogeneous transforms.
    fn naive_fk(chain: &FingerChain, q: &[f64]) -> Vector3<f64> {
        let mut t = Matrix4::identity();
        for (j, &a) in chain.joints.iter().zip(q) {
            let mut tr = Matrix4::identity();
            tr.fixed_view_mut::<3, 1>(0, 3).copy_from(&j.origin);
            let (s, c) = a.sin_cos();
            let k = j.axis;
            let kx = nalgebra::Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
            let r = nalgebra::Matrix3::identity() + kx * s + kx * kx * (1.0 - c);
            let mut rot = Matrix4::identity();
            rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            t = t * tr * rot;
        }
        let p = t * nalgebra::Vector4::new(chain.tip_offset.x, chain.tip_offset.y, chain.tip_offset.z, 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    #[test]
    fn straight_chain_zero_pose_sums_segments() {
        let c = straight_chain(&[0.04, 0.03, 0.02], 0.01, Vector3::z());
        let tip = finger_fk(&c, &[0.0; 3]).unwrap();
        assert!((tip - Vector3::new(0.10, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn single_joint_quarter_turn() {
        let c = straight_chain(&[], 0.05, Vector3::z());
        let c = FingerChain {
            joints: vec![Joint {
                axis: Vector3::z(),
                origin: Vector3::zeros(),
                lo: -3.0,
                hi: 3.0,
            }],
            ..c
        };
        let tip = finger_fk(&c, &[FRAC_PI_2]).unwrap();
        assert!((tip - Vector3::new(0.0, 0.05, 0.0)).norm() < 1e-15);
        let j = finger_jacobian(&c, &[0.0]).unwrap();
        assert!((j.column(0) - Vector3::new(0.0, 0.05, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let m = HandModel::default_model();
        assert!(matches!(finger_fk(m.chain(1), &[0.0; 4]), Err(Error::DimensionMismatch { expected: 3, got: 4 })));
        assert!(finger_jacobian(m.chain(0), &[0.0; 3]).is_err());
    }

    #[test]
    fn fk_matches_homogeneous_oracle() {
        let m = HandModel::default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            for chain in &m.fingers {
                let q = random_q(chain, &mut rng);
                let d = (finger_fk(chain, &q).unwrap() - naive_fk(chain, &q)).norm();
                assert!(d < 1e-12, "{} {d}", chain.name);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = HandModel::default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..100 {
            for chain in &m.fingers {
                let q = random_q(chain, &mut rng);
                let j = finger_jacobian(chain, &q).unwrap();
                for c in 0..chain.dof() {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[c] += h;
                    qm[c] -= h;
                    let fd = (finger_fk(chain, &qp).unwrap() - finger_fk(chain, &qm).unwrap()) / (2.0 * h);
                    assert!((fd - j.column(c)).abs().max() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn planar_chain_jacobian_is_planar() {
        let c = straight_chain(&[0.04, 0.03, 0.02], 0.01, Vector3::z());
        let j = finger_jacobian(&c, &[0.3, -0.7, 1.1]).unwrap();
        for col in j.column_iter() {
            assert!(col.z.abs() < 1e-15);
        }
    }

    #[test]
    fn fk_is_lipschitz_on_limit_box() {
        let m = HandModel::default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            for chain in &m.fingers {
                let (a, b) = (random_q(chain, &mut rng), random_q(chain, &mut rng));
                let lhs = (finger_fk(chain, &a).unwrap() - finger_fk(chain, &b).unwrap()).norm();
                let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
                assert!(lhs <= chain.reach() * l1 + 1e-15);
            }
        }
    }

    #[test]
    fn clamp_examples() {
        let m = HandModel::default_model();
        let mid = m.mid_range();
        assert_eq!(clamp_to_limits(&mid, &m), mid);
        let (_, hi) = m.limits();
        let mut q = mid;
        q[5] = hi[5] + 1.0;
        assert_eq!(clamp_to_limits(&q, &m)[5], hi[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wild: JointVector = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let once = clamp_to_limits(&wild, &m);
        assert_eq!(clamp_to_limits(&once, &m), once);
    }

    #[test]
    fn reference_tips_match_zero_pose_exactly() {
        let m = HandModel::default_model();
        assert_eq!(m.zero_pose_tips(), m.reference_tips);
    }

    #[test]
    fn model_file_round_trip() {
        let m = HandModel::default_model();
        let back = HandModel::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(back.fingers.len(), 5);
        assert_eq!(back.reference_tips, m.reference_tips);
        for (a, b) in back.fingers.iter().zip(&m.fingers) {
            for (ja, jb) in a.joints.iter().zip(&b.joints) {
                assert!((ja.lo - jb.lo).abs() < 1e-15 && (ja.hi - jb.hi).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_models() {
        let s = DEFAULT_MODEL.replace("format_version = 1", "format_version = 9");
        assert!(matches!(HandModel::from_toml_str(&s), Err(Error::Version { found: 9, .. })));
        let s = DEFAULT_MODEL.replacen("name = \"thumb\"", "name = \"thumb\"\ncolor = 1", 1);
        assert!(HandModel::from_toml_str(&s).is_err());
        let s = DEFAULT_MODEL.replacen("limits_deg = [0.0, 100.0]", "limits_deg = [100.0, 0.0]", 1);
        assert!(HandModel::from_toml_str(&s).is_err());
    }
}
