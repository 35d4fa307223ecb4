//! The closed-loop chunked inference loop.
//!
//! Index diagram for L = 10, n = 5, N = 15, H = 5. The window holds the last
//! L states, frames `i .. i+L` with `t = i + L - 1` the current one; the
//! predicted chunk covers frames `i+n .. i+n+N`:
//!
//! ```text
//! frame     i ........ t | t+1 ... t+H | ...
//! window    [ 0 .. L-1 ] |
//! chunk          [0 .. L-n-1 | L-n .. L-n+H-1 | ... N-1]
//!                  (past)       actuated
//! ```
//!
//! Chunk entry `L - n + k - 1` (0-based) is frame `t + k`, so with H = n
//! successive chunks tile the timeline without gaps. The last usable entry is
//! `N - 1`, which gives `H < n + N - L`.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{inject_noise_object, inject_noise_state, NoiseSpec};
use super::world::{step_world, SimWorld};
use crate::dataset::ObjectPose;
use crate::error::{Error, Result};
use crate::hand::HandModel;
use crate::policy::{check_vae, PolicyMode, PolicyModel, PolicyOutput};
use crate::state::RobotState;
use crate::vae::{Frame, VaeModel};

/// What the policy sees as the robot state after each actuation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// Read (and perturb) the world state.
    Sensed,
    /// Feed back the commanded action unchanged.
    Commanded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Frames actuated per policy call.
    pub horizon: usize,
    pub l: usize,
    pub n_shift: usize,
    pub chunk: usize,
    pub max_steps: usize,
    pub success_threshold_m: f64,
    pub noise: NoiseSpec,
    pub feedback: Feedback,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            l: 10,
            n_shift: 5,
            chunk: 15,
            max_steps: 400,
            success_threshold_m: 0.03,
            noise: NoiseSpec::off(),
            feedback: Feedback::Sensed,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    /// Largest horizon the window/chunk geometry allows, `n + N - L - 1`.
    pub fn max_horizon(&self) -> i64 {
        self.n_shift as i64 + self.chunk as i64 - self.l as i64 - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.n_shift == 0 || self.chunk == 0 {
            return Err(Error::Config("rollout: l, n_shift and chunk must be positive".into()));
        }
        if self.n_shift > self.l {
            return Err(Error::Config(format!(
                "rollout: n_shift {} exceeds the window length {}; the first actuated frame would not be predicted",
                self.n_shift, self.l
            )));
        }
        let limit = self.n_shift as i64 + self.chunk as i64 - self.l as i64;
        if self.horizon == 0 || self.horizon as i64 >= limit {
            return Err(Error::HorizonViolation {
                horizon: self.horizon,
                limit,
            });
        }
        if !(self.success_threshold_m > 0.0 && self.success_threshold_m.is_finite()) {
            return Err(Error::Config(format!("rollout: success threshold must be positive, got {}", self.success_threshold_m)));
        }
        self.noise.validate().map_err(|e| Error::Config(format!("rollout noise: {e}")))
    }
}

/// Anything that maps a state window to a chunk prediction.
pub trait ChunkPolicy {
    /// `t` is the frame index of the window's last state.
    fn act(&self, window: &[Frame], object: Option<&ObjectPose>, t: usize) -> Result<PolicyOutput>;

    fn needs_decoder(&self) -> bool;

    /// Rejects a decoder this policy was not trained against.
    fn check_decoder(&self, _vae: &VaeModel) -> Result<()> {
        Ok(())
    }
}

impl ChunkPolicy for PolicyModel {
    fn act(&self, window: &[Frame], object: Option<&ObjectPose>, _t: usize) -> Result<PolicyOutput> {
        self.forward(window, object)
    }

    fn needs_decoder(&self) -> bool {
        self.arch.mode == PolicyMode::Latent
    }

    fn check_decoder(&self, vae: &VaeModel) -> Result<()> {
        check_vae(self, vae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub commanded: Frame,
    pub sensed: Frame,
    pub object: ObjectPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub final_error_m: f64,
    pub success: bool,
    pub steps: usize,
    pub trace: Vec<TraceRecord>,
    pub final_world: SimWorld,
}

/// Runs the loop until the object is within the success threshold of the
/// goal or `max_steps` actions have been applied. Success is checked after
/// every actuation.
pub fn run_inference(policy: &dyn ChunkPolicy, decoder: Option<&VaeModel>, world: SimWorld, model: &HandModel, cfg: &RolloutConfig) -> Result<EvalResult> {
    cfg.validate()?;
    if policy.needs_decoder() {
        policy.check_decoder(decoder.ok_or(Error::DecoderMissing)?)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut world = world;
    let first = inject_noise_state(&world.hand, &cfg.noise, &mut rng).to_array();
    let mut buffer: Vec<Frame> = vec![first; cfg.l];
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut success = false;
    'outer: while steps < cfg.max_steps {
        let obj = inject_noise_object(&world.object_pose7(), &cfg.noise, &mut rng);
        let window = &buffer[buffer.len() - cfg.l..];
        let chunk = match policy.act(window, Some(&obj), steps)? {
            PolicyOutput::Chunk(c) => c,
            PolicyOutput::Latent(z) => decoder.ok_or(Error::DecoderMissing)?.decode(&z)?,
        };
        if chunk.len() != cfg.chunk {
            return Err(Error::DimensionMismatch {
                expected: cfg.chunk,
                got: chunk.len(),
            });
        }
        for k in 1..=cfg.horizon {
            let action = chunk[cfg.l - cfg.n_shift + k - 1];
            let commanded = RobotState::from_slice(&action)?;
            world = step_world(&world, &commanded, model);
            steps += 1;
            let sensed = match cfg.feedback {
                Feedback::Sensed => inject_noise_state(&world.hand, &cfg.noise, &mut rng).to_array(),
                Feedback::Commanded => action,
            };
            if sensed.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite state at step {steps}")));
            }
            buffer.push(sensed);
            trace.push(TraceRecord {
                t: steps,
                commanded: action,
                sensed,
                object: world.object_pose7(),
            });
            if world.goal_distance() < cfg.success_threshold_m {
                success = true;
                break 'outer;
            }
            if steps == cfg.max_steps {
                break 'outer;
            }
        }
    }
    Ok(EvalResult {
        final_error_m: world.goal_distance(),
        success,
        steps,
        trace,
        final_world: world,
    })
}

/// Start state for policy rollouts: the mean initial hand state of the
/// demonstrations, the given object pose, and the mean final object position
/// as the goal.
pub fn demo_world(demos: &[crate::dataset::Demonstration], object: crate::geometry::Pose) -> Result<SimWorld> {
    if demos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut start = [0.0; crate::state::STATE_DIM];
    let mut goal = Vector3::zeros();
    for d in demos {
        let s = d.states.first().ok_or(Error::EmptyDataset)?.to_array();
        for (a, v) in start.iter_mut().zip(s) {
            *a += v / demos.len() as f64;
        }
        let last = d
            .object_poses
            .as_ref()
            .and_then(|o| o.last())
            .ok_or_else(|| Error::InvariantViolation(format!("demo `{}` has no object poses", d.id)))?;
        goal += Vector3::new(last[0], last[1], last[2]) / demos.len() as f64;
    }
    let mut hand = RobotState::from_slice(&start)?;
    hand.wrist_rot = crate::geometry::rot_to_6d(&hand.wrist_rotation()?);
    Ok(SimWorld::new(hand, object, goal))
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in trace {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Numeric(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
