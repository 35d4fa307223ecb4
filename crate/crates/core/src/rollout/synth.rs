//! Scripted demonstration generators.
//!
//! Task mode produces pick-and-place demos of the handled cube: reach above
//! the handle, descend, hook index and middle fingers into it, lift, carry
//! and set down at the goal. Prior mode produces task-agnostic motion from
//! chained minimum-jerk segments over a wrist workspace and a small set of
//! finger synergies.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::random_small_rotation;
use super::world::{step_world, SimWorld};
use crate::dataset::{Demonstration, ObjectPose, Provenance, DEFAULT_RATE_HZ};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::hand::{clamp_to_limits, HandModel};
use crate::par::Exec;
use crate::state::{JointVector, RobotState, NUM_JOINTS};

/// Minimum-jerk time scaling on [0, 1].
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

pub fn rot_z(yaw: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::z(), yaw)
}

/// Palm facing down, fingers along world +x at zero yaw.
pub fn palm_down(yaw: f64) -> Rotation {
    rot_z(yaw).compose(&Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI))
}

pub fn slerp(a: &Rotation, b: &Rotation, t: f64) -> Rotation {
    let ra = Rotation3::from_matrix_unchecked(*a.matrix());
    let rb = Rotation3::from_matrix_unchecked(*b.matrix());
    Rotation::from_matrix_unchecked(*ra.slerp(&rb, t).matrix())
}

fn deg(v: f64) -> f64 {
    v.to_radians()
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.gen_range(-half_width..=half_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFrames {
    pub rest: usize,
    pub reach: usize,
    pub descend: usize,
    pub close: usize,
    pub hold: usize,
    pub lift: usize,
    pub transport: usize,
    pub place: usize,
    pub settle: usize,
}

impl Default for PhaseFrames {
    fn default() -> Self {
        Self {
            rest: 10,
            reach: 40,
            descend: 20,
            close: 20,
            hold: 5,
            lift: 25,
            transport: 45,
            place: 25,
            settle: 15,
        }
    }
}

impl PhaseFrames {
    pub fn total(&self) -> usize {
        self.rest + self.reach + self.descend + self.close + self.hold + self.lift + self.transport + self.place + self.settle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub rate_hz: f64,
    pub object_start: [f64; 3],
    /// Uniform half-width per horizontal axis, meters.
    pub object_jitter_m: f64,
    pub object_yaw_jitter_deg: f64,
    pub goal: [f64; 3],
    pub goal_jitter_m: f64,
    pub wrist_start: [f64; 3],
    pub wrist_start_jitter_m: f64,
    pub pregrasp_height_m: f64,
    pub lift_height_m: f64,
    /// Flexion of each index..pinky flexion joint when closed.
    pub close_flexion_deg: f64,
    pub phases: PhaseFrames,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            object_start: [0.5, 0.0, 0.05],
            object_jitter_m: 0.015,
            object_yaw_jitter_deg: 8.0,
            goal: [0.5, 0.25, 0.05],
            goal_jitter_m: 0.002,
            wrist_start: [0.3, -0.15, 0.25],
            wrist_start_jitter_m: 0.01,
            pregrasp_height_m: 0.08,
            lift_height_m: 0.10,
            close_flexion_deg: 60.0,
            phases: PhaseFrames::default(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad(format!("rate_hz must be positive, got {}", self.rate_hz));
        }
        let all = self.object_start.iter().chain(&self.goal).chain(&self.wrist_start);
        if !all.clone().all(|v| v.is_finite()) {
            return bad("positions must be finite".into());
        }
        for (name, v) in [
            ("object_jitter_m", self.object_jitter_m),
            ("object_yaw_jitter_deg", self.object_yaw_jitter_deg),
            ("goal_jitter_m", self.goal_jitter_m),
            ("wrist_start_jitter_m", self.wrist_start_jitter_m),
            ("pregrasp_height_m", self.pregrasp_height_m),
            ("lift_height_m", self.lift_height_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.close_flexion_deg > 0.0 && self.close_flexion_deg <= 100.0) {
            return bad(format!("close_flexion_deg must lie in (0, 100], got {}", self.close_flexion_deg));
        }
        let p = &self.phases;
        if [p.reach, p.descend, p.close, p.lift, p.transport, p.place].contains(&0) {
            return bad("motion phases need at least one frame".into());
        }
        Ok(())
    }

    pub fn nominal_goal(&self) -> Vector3<f64> {
        Vector3::from(self.goal)
    }
}

/// Randomized start conditions for one task episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskInstance {
    pub object: Pose,
    pub goal: Vector3<f64>,
    pub wrist_start: Vector3<f64>,
}

pub fn sample_task_instance<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> TaskInstance {
    let mut obj = Vector3::from(spec.object_start);
    obj.x += jitter(rng, spec.object_jitter_m);
    obj.y += jitter(rng, spec.object_jitter_m);
    let yaw = jitter(rng, deg(spec.object_yaw_jitter_deg));
    let mut goal = Vector3::from(spec.goal);
    goal.x += jitter(rng, spec.goal_jitter_m);
    goal.y += jitter(rng, spec.goal_jitter_m);
    let mut wrist = Vector3::from(spec.wrist_start);
    for k in 0..3 {
        wrist[k] += jitter(rng, spec.wrist_start_jitter_m);
    }
    TaskInstance {
        object: Pose::new(obj, rot_z(yaw)),
        goal,
        wrist_start: wrist,
    }
}

/// Hand open, thumb slightly flexed.
pub fn open_hand() -> JointVector {
    let mut q = [0.0; NUM_JOINTS];
    q[1..4].fill(deg(10.0));
    q
}

/// Hook grasp: the four fingers flex both joints, thumb tucks in.
pub fn closed_hand(flexion_deg: f64) -> JointVector {
    let mut q = open_hand();
    for s in [4, 7, 10, 13] {
        q[s + 1] = deg(flexion_deg);
        q[s + 2] = deg(flexion_deg);
    }
    q[1..4].fill(deg(30.0));
    q
}

/// Midpoint of the index and middle fingertips in the palm frame.
pub fn hook_point(model: &HandModel, q_closed: &JointVector) -> Vector3<f64> {
    let tips = model.fingertips(q_closed);
    (tips[1] + tips[2]) / 2.0
}

struct Keyframe {
    frames: usize,
    wrist: Vector3<f64>,
    yaw: f64,
    joints: JointVector,
}

fn interpolate_keyframes(start: &Keyframe, keys: &[Keyframe], model: &HandModel) -> Vec<RobotState> {
    let state = |w: &Vector3<f64>, yaw: f64, q: &JointVector| RobotState::new(clamp_to_limits(q, model), &Pose::new(*w, palm_down(yaw)));
    let mut out = vec![state(&start.wrist, start.yaw, &start.joints)];
    let mut prev = start;
    for key in keys {
        for k in 1..=key.frames {
            let s = min_jerk(k as f64 / key.frames as f64);
            let w = prev.wrist + (key.wrist - prev.wrist) * s;
            let yaw = prev.yaw + (key.yaw - prev.yaw) * s;
            let mut q = [0.0; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                q[j] = prev.joints[j] + (key.joints[j] - prev.joints[j]) * s;
            }
            out.push(state(&w, yaw, &q));
        }
        prev = key;
    }
    out
}

/// Steps `states` through a fresh world and records the object pose after
/// each step.
pub fn replay_object(model: &HandModel, states: &[RobotState], object: Pose, goal: Vector3<f64>) -> (Vec<ObjectPose>, SimWorld) {
    let mut world = SimWorld::new(states[0], object, goal);
    let mut poses = Vec::with_capacity(states.len());
    for s in states {
        world = step_world(&world, s, model);
        poses.push(world.object_pose7());
    }
    (poses, world)
}

fn task_demo(model: &HandModel, spec: &TaskSpec, inst: &TaskInstance, id: String) -> Demonstration {
    let q_open = open_hand();
    let q_closed = closed_hand(spec.close_flexion_deg);
    let hook = hook_point(model, &q_closed);
    let yaw = {
        let m = inst.object.orientation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    };
    let anchor = inst.object.transform_point(&Vector3::new(0.0, 0.0, 0.075));
    let grasp = anchor - palm_down(yaw).apply(&hook);
    let up = Vector3::z();
    let pre = grasp + up * spec.pregrasp_height_m;
    let lifted = grasp + up * spec.lift_height_m;
    let shift = Vector3::new(inst.goal.x - inst.object.position.x, inst.goal.y - inst.object.position.y, 0.0);
    let p = &spec.phases;
    let kf = |frames, wrist, joints| Keyframe { frames, wrist, yaw, joints };
    let start = Keyframe {
        frames: 0,
        wrist: inst.wrist_start,
        yaw: 0.0,
        joints: q_open,
    };
    let keys = [
        Keyframe {
            frames: p.rest,
            wrist: inst.wrist_start,
            yaw: 0.0,
            joints: q_open,
        },
        kf(p.reach, pre, q_open),
        kf(p.descend, grasp, q_open),
        kf(p.close, grasp, q_closed),
        kf(p.hold, grasp, q_closed),
        kf(p.lift, lifted, q_closed),
        kf(p.transport, lifted + shift, q_closed),
        kf(p.place, grasp + shift, q_closed),
        kf(p.settle, grasp + shift, q_closed),
    ];
    let states = interpolate_keyframes(&start, &keys, model);
    let (poses, _) = replay_object(model, &states, inst.object, inst.goal);
    let mut d = Demonstration::uniform(id, spec.rate_hz, states, Some(poses));
    d.provenance = Provenance::synthetic();
    d
}

/// Demo `i` draws from stream `i` of the seed, so demos are independent of
/// `count` and of evaluation order.
pub fn generate_task_demos(exec: Exec, model: &HandModel, spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    Ok(exec.map_range(count, |i| {
        let inst = sample_task_instance(spec, &mut seeded(seed, i as u64));
        task_demo(model, spec, &inst, format!("task-{seed}-{i:04}"))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub rate_hz: f64,
    pub frames: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    /// Probability that a segment holds still instead of moving.
    pub hold_probability: f64,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub yaw_range_deg: f64,
    pub tilt_max_deg: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            frames: 300,
            segment_min: 15,
            segment_max: 60,
            hold_probability: 0.2,
            workspace_min: [0.2, -0.2, 0.1],
            workspace_max: [0.8, 0.5, 0.45],
            yaw_range_deg: 30.0,
            tilt_max_deg: 25.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad(format!("rate_hz must be positive, got {}", self.rate_hz));
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return bad(format!("segment range {}..{} is empty", self.segment_min, self.segment_max));
        }
        if !(0.0..=1.0).contains(&self.hold_probability) {
            return bad(format!("hold_probability must lie in [0, 1], got {}", self.hold_probability));
        }
        for k in 0..3 {
            let (lo, hi) = (self.workspace_min[k], self.workspace_max[k]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("workspace axis {k}: [{lo}, {hi}] is invalid"));
            }
        }
        for (name, v) in [("yaw_range_deg", self.yaw_range_deg), ("tilt_max_deg", self.tilt_max_deg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

pub const NUM_SYNERGIES: usize = 5;

/// Joint-space synergy directions: power flexion, pinch, spread, thumb
/// flexion, thumb roll.
pub fn synergies() -> [JointVector; NUM_SYNERGIES] {
    let mut s = [[0.0; NUM_JOINTS]; NUM_SYNERGIES];
    for f in [4, 7, 10, 13] {
        s[0][f + 1] = deg(100.0);
        s[0][f + 2] = deg(100.0);
    }
    s[1][1..4].fill(deg(40.0));
    s[1][5] = deg(50.0);
    s[1][6] = deg(50.0);
    s[2][4] = deg(15.0);
    s[2][7] = deg(5.0);
    s[2][10] = deg(-10.0);
    s[2][13] = deg(-20.0);
    s[3][1..4].fill(deg(50.0));
    s[4][0] = deg(20.0);
    s
}

fn synergy_joints(w: &[f64; NUM_SYNERGIES], model: &HandModel) -> JointVector {
    let s = synergies();
    let mut q = [0.0; NUM_JOINTS];
    for (wk, sk) in w.iter().zip(&s) {
        for j in 0..NUM_JOINTS {
            q[j] += wk * sk[j];
        }
    }
    clamp_to_limits(&q, model)
}

fn sample_weights<R: Rng + ?Sized>(rng: &mut R) -> [f64; NUM_SYNERGIES] {
    let open = rng.gen_bool(0.25);
    [
        if open { 0.0 } else { rng.gen_range(0.0..1.0) },
        if open { 0.0 } else { rng.gen_range(0.0..0.8) },
        rng.gen_range(-0.5..0.5),
        rng.gen_range(0.0..1.0),
        rng.gen_range(-1.0..1.0),
    ]
}

/// Piecewise minimum-jerk chain of `frames` samples. `sample` draws a new
/// waypoint; `blend` interpolates two waypoints.
fn segment_chain<T: Clone, R: Rng>(
    rng: &mut R,
    spec: &PriorSpec,
    frames: usize,
    mut sample: impl FnMut(&mut R) -> T,
    blend: impl Fn(&T, &T, f64) -> T,
) -> Vec<T> {
    let mut cur = sample(rng);
    let mut out = vec![cur.clone()];
    while out.len() < frames {
        let len = rng.gen_range(spec.segment_min..=spec.segment_max);
        let next = if rng.gen_bool(spec.hold_probability) { cur.clone() } else { sample(rng) };
        for k in 1..=len {
            if out.len() == frames {
                break;
            }
            out.push(blend(&cur, &next, min_jerk(k as f64 / len as f64)));
        }
        cur = next;
    }
    out
}

fn prior_demo(model: &HandModel, spec: &PriorSpec, rng: &mut ChaCha8Rng, id: String) -> Demonstration {
    let wrists = segment_chain(
        rng,
        spec,
        spec.frames,
        |r| {
            let p = Vector3::from_fn(|k, _| r.gen_range(spec.workspace_min[k]..=spec.workspace_max[k]));
            let yaw = jitter(r, deg(spec.yaw_range_deg));
            let tilt = random_small_rotation(r, deg(spec.tilt_max_deg) / 2.0);
            let tilt = if crate::geometry::geodesic_angle(&tilt, &Rotation::identity()) > deg(spec.tilt_max_deg) {
                Rotation::identity()
            } else {
                tilt
            };
            Pose::new(p, palm_down(yaw).compose(&tilt))
        },
        |a, b, s| Pose::new(a.position + (b.position - a.position) * s, slerp(&a.orientation, &b.orientation, s)),
    );
    let weights = segment_chain(rng, spec, spec.frames, |r| sample_weights(r), |a, b, s| {
        let mut w = [0.0; NUM_SYNERGIES];
        for k in 0..NUM_SYNERGIES {
            w[k] = a[k] + (b[k] - a[k]) * s;
        }
        w
    });
    let states = wrists
        .iter()
        .zip(&weights)
        .map(|(p, w)| RobotState::new(synergy_joints(w, model), p))
        .collect();
    let mut d = Demonstration::uniform(id, spec.rate_hz, states, None);
    d.provenance = Provenance::synthetic();
    d
}

pub fn generate_prior_demos(exec: Exec, model: &HandModel, spec: &PriorSpec, count: usize, seed: u64) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    Ok(exec.map_range(count, |i| {
        let mut rng = seeded(seed, i as u64);
        prior_demo(model, spec, &mut rng, format!("prior-{seed}-{i:04}"))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_from_6d;

    fn model() -> HandModel {
        HandModel::default_model()
    }

    #[test]
    fn min_jerk_endpoints_and_symmetry() {
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
        assert!((min_jerk(0.5) - 0.5).abs() < 1e-15);
        assert!((min_jerk(0.3) + min_jerk(0.7) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_count_is_empty() {
        let m = model();
        assert!(generate_task_demos(Exec::Sequential, &m, &TaskSpec::default(), 0, 1).unwrap().is_empty());
        assert!(generate_prior_demos(Exec::Sequential, &m, &PriorSpec::default(), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let m = model();
        let mut t = TaskSpec::default();
        t.object_jitter_m = -1.0;
        assert!(matches!(generate_task_demos(Exec::Sequential, &m, &t, 1, 0), Err(Error::BadSpec(_))));
        let mut p = PriorSpec::default();
        p.segment_min = 70;
        assert!(matches!(generate_prior_demos(Exec::Sequential, &m, &p, 1, 0), Err(Error::BadSpec(_))));
    }

    #[test]
    fn closed_hand_hooks_the_handle() {
        let m = model();
        let q = closed_hand(60.0);
        let h = hook_point(&m, &q);
        let tips = m.fingertips(&q);
        assert!((tips[1] - h).norm() < 0.015 && (tips[2] - h).norm() < 0.015);
        assert!((tips[3] - h).norm() > 0.02);
    }

    #[test]
    fn every_task_demo_replays_to_the_goal() {
        let m = model();
        let spec = TaskSpec::default();
        let demos = generate_task_demos(Exec::Parallel, &m, &spec, 20, 7).unwrap();
        for (i, d) in demos.iter().enumerate() {
            d.validate().unwrap();
            assert_eq!(d.len(), spec.phases.total() + 1);
            let inst = sample_task_instance(&spec, &mut seeded(7, i as u64));
            let (poses, world) = replay_object(&m, &d.states, inst.object, inst.goal);
            assert!(world.is_attached(), "demo {i} never grasps");
            assert!(world.goal_distance() < 0.02, "demo {i}: {}", world.goal_distance());
            assert_eq!(Some(&poses), d.object_poses.as_ref());
            // The object must not move before the fingers close.
            let closing_starts = 1 + spec.phases.rest + spec.phases.reach + spec.phases.descend;
            assert_eq!(poses[closing_starts - 1], inst.object.to_array7());
        }
    }

    #[test]
    fn same_seed_same_demos() {
        let m = model();
        let a = generate_task_demos(Exec::Parallel, &m, &TaskSpec::default(), 4, 3).unwrap();
        let b = generate_task_demos(Exec::Sequential, &m, &TaskSpec::default(), 4, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_task_demos(Exec::Sequential, &m, &TaskSpec::default(), 4, 4).unwrap();
        assert_ne!(a, c);
        let pa = generate_prior_demos(Exec::Parallel, &m, &PriorSpec::default(), 3, 3).unwrap();
        let pb = generate_prior_demos(Exec::Sequential, &m, &PriorSpec::default(), 3, 3).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn prior_demos_stay_in_workspace_and_limits() {
        let m = model();
        let spec = PriorSpec::default();
        let (lo, hi) = m.limits();
        for d in generate_prior_demos(Exec::Sequential, &m, &spec, 5, 11).unwrap() {
            assert_eq!(d.len(), spec.frames);
            d.validate().unwrap();
            for s in &d.states {
                for j in 0..NUM_JOINTS {
                    assert!(s.joints[j] >= lo[j] && s.joints[j] <= hi[j]);
                }
                for k in 0..3 {
                    assert!(s.wrist_pos[k] >= spec.workspace_min[k] - 1e-12 && s.wrist_pos[k] <= spec.workspace_max[k] + 1e-12);
                }
                assert!(rot_from_6d(&s.wrist_rot).is_ok());
            }
        }
    }
}
