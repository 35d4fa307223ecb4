//! Fingertip retargeting by per-finger damped least squares.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::{Demonstration, HumanFrame, Provenance, Source};
use crate::error::{Error, Result};
use crate::geometry::rot_to_6d;
use crate::hand::{finger_fk, finger_jacobian, FingerChain, HandModel, FINGER_OFFSETS};
use crate::par::Exec;
use crate::state::{RobotState, NUM_JOINTS};

pub const DAMPING: f64 = 1e-3;
pub const TOLERANCE_M: f64 = 5e-4;
pub const MAX_ITERATIONS: usize = 50;
/// Largest per-joint change in one iteration, radians.
pub const MAX_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct IkResult {
    pub q: Vec<f64>,
    /// Fingertip distance to the target at `q`, meters.
    pub residual: f64,
    /// Number of updates applied before the returned iterate was reached.
    pub iterations: usize,
}

/// Damped least squares: `dq = J^T (J J^T + lambda^2 I)^-1 e`, clamped to
/// the joint limits after every step. Returns the best iterate seen.
///
/// Joints resting on a limit whose update would push further out are
/// dropped from the Jacobian for that step, and the step is scaled so no
/// joint moves more than [`MAX_STEP`]. Without both, plain clamping stalls
/// at the straight-finger singularity or crawls along a limit.
pub fn ik_finger(chain: &FingerChain, target: &Vector3<f64>, q_init: &[f64]) -> Result<IkResult> {
    if q_init.len() != chain.dof() {
        return Err(Error::DimensionMismatch {
            expected: chain.dof(),
            got: q_init.len(),
        });
    }
    let mut q = q_init.to_vec();
    chain.clamp(&mut q);
    let mut best = IkResult {
        q: q.clone(),
        residual: f64::INFINITY,
        iterations: 0,
    };
    let damp = Matrix3::identity() * (DAMPING * DAMPING);
    for it in 0..=MAX_ITERATIONS {
        let e = target - finger_fk(chain, &q)?;
        let r = e.norm();
        if r < best.residual {
            best = IkResult {
                q: q.clone(),
                residual: r,
                iterations: it,
            };
        }
        if r < TOLERANCE_M || it == MAX_ITERATIONS {
            break;
        }
        let mut j = finger_jacobian(chain, &q)?;
        let mut active = vec![false; q.len()];
        let mut dq = loop {
            let a = &j * j.transpose() + damp;
            let Some(y) = a.cholesky().map(|c| c.solve(&e)) else {
                return Ok(best);
            };
            let dq = j.transpose() * y;
            let mut changed = false;
            for (k, jt) in chain.joints.iter().enumerate() {
                if !active[k] && ((q[k] <= jt.lo && dq[k] < 0.0) || (q[k] >= jt.hi && dq[k] > 0.0)) {
                    active[k] = true;
                    j.column_mut(k).fill(0.0);
                    changed = true;
                }
            }
            if !changed {
                break dq;
            }
        };
        let largest = dq.amax();
        if largest > MAX_STEP {
            dq *= MAX_STEP / largest;
        }
        for (v, d) in q.iter_mut().zip(dq.iter()) {
            *v += d;
        }
        chain.clamp(&mut q);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetargetOutput {
    pub state: RobotState,
    pub residuals: [f64; 5],
}

pub fn retarget_frame(model: &HandModel, frame: &HumanFrame, prev: Option<&RobotState>) -> Result<RetargetOutput> {
    let start = prev.map(|p| p.joints).unwrap_or_else(|| model.mid_range());
    let mut joints = [0.0; NUM_JOINTS];
    let mut residuals = [0.0; 5];
    for (f, chain) in model.fingers.iter().enumerate() {
        let s = FINGER_OFFSETS[f];
        let res = ik_finger(chain, &frame.fingertips[f], &start[s..s + chain.dof()])?;
        joints[s..s + chain.dof()].copy_from_slice(&res.q);
        residuals[f] = res.residual;
    }
    let state = RobotState {
        joints,
        wrist_pos: frame.wrist.position.into(),
        wrist_rot: rot_to_6d(&frame.wrist.orientation),
    };
    state.validate()?;
    Ok(RetargetOutput { state, residuals })
}

/// Sequential retargeting with warm starts. Timestamps are kept; the nominal
/// rate is derived from the mean frame spacing.
pub fn retarget_sequence(model: &HandModel, frames: &[HumanFrame], id: &str) -> Result<Demonstration> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut states: Vec<RobotState> = Vec::with_capacity(frames.len());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for f in frames {
        let out = retarget_frame(model, f, states.last())?;
        for r in out.residuals {
            sum += r;
            max = max.max(r);
        }
        states.push(out.state);
    }
    let n = frames.len();
    let rate_hz = if n > 1 {
        (n - 1) as f64 / (frames[n - 1].timestamp - frames[0].timestamp)
    } else {
        crate::dataset::DEFAULT_RATE_HZ
    };
    let object_poses = if frames.iter().all(|f| f.object.is_some()) {
        Some(frames.iter().map(|f| f.object.unwrap()).collect())
    } else {
        None
    };
    let demo = Demonstration {
        id: id.to_string(),
        rate_hz,
        times: frames.iter().map(|f| f.timestamp).collect(),
        states,
        object_poses,
        provenance: Provenance {
            source: Source::Human,
            residual_mean_m: Some(sum / (5 * n) as f64),
            residual_max_m: Some(max),
            preprocessing: vec!["retarget".into()],
        },
    };
    demo.validate()?;
    Ok(demo)
}

/// Retargets independent recordings concurrently; output order follows input.
pub fn retarget_many(exec: Exec, model: &HandModel, recordings: &[(String, Vec<HumanFrame>)]) -> Result<Vec<Demonstration>> {
    exec.try_map(recordings, |(id, frames)| retarget_sequence(model, frames, id))
}

/// Synthesizes the human frame a robot state would produce.
pub fn frame_from_state(model: &HandModel, state: &RobotState, timestamp: f64) -> Result<HumanFrame> {
    Ok(HumanFrame {
        timestamp,
        wrist: state.wrist_pose()?,
        fingertips: model.fingertips(&state.joints),
        object: None,
    })
}
