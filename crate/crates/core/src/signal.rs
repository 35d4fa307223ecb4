//! Kalman smoothing of positions, moving-average filtering and dynamic time
//! warping.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use crate::dataset::{Demonstration, ObjectPose};
use crate::error::{Error, Result};
use crate::state::{RobotState, STATE_DIM, WRIST_POS};

/// Constant-velocity filter noise levels.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    /// Position process noise density, m^2 per second.
    pub q_pos: f64,
    /// Velocity process noise density, (m/s)^2 per second.
    pub q_vel: f64,
    /// Measurement standard deviation per axis, m.
    pub r_std: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            q_pos: 1e-4,
            q_vel: 1e-2,
            r_std: 2e-3,
        }
    }
}

impl KalmanParams {
    pub fn measurement_cov(&self) -> Matrix3<f64> {
        Matrix3::identity() * (self.r_std * self.r_std)
    }
}

/// Position (0-2) and velocity (3-5) with covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanState {
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
    pub t: f64,
}

impl KalmanState {
    pub fn new(position: Vector3<f64>, pos_var: f64, vel_var: f64, t: f64) -> Self {
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&position);
        let mut p = Matrix6::zeros();
        for i in 0..3 {
            p[(i, i)] = pos_var;
            p[(i + 3, i + 3)] = vel_var;
        }
        Self { x, p, t }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into()
    }
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

pub fn kalman_predict(s: &KalmanState, t: f64, params: &KalmanParams) -> Result<KalmanState> {
    let dt = t - s.t;
    if !(dt >= 0.0) {
        return Err(Error::NonMonotonicTime { prev: s.t, next: t });
    }
    if dt == 0.0 {
        return Ok(*s);
    }
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    let mut q = Matrix6::zeros();
    for i in 0..3 {
        q[(i, i)] = params.q_pos * dt;
        q[(i + 3, i + 3)] = params.q_vel * dt;
    }
    Ok(KalmanState {
        x: f * s.x,
        p: symmetrize(&(f * s.p * f.transpose() + q)),
        t,
    })
}

/// Position-only measurement update in Joseph form.
pub fn kalman_update(s: &KalmanState, z: &Vector3<f64>, r: &Matrix3<f64>) -> Result<KalmanState> {
    let mut h = Matrix3x6::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    let innovation = z - h * s.x;
    let cov = h * s.p * h.transpose() + r;
    let cov_inv = cov.cholesky().ok_or(Error::SingularInnovation)?.inverse();
    if !cov_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let k = s.p * h.transpose() * cov_inv;
    let a = Matrix6::identity() - k * h;
    Ok(KalmanState {
        x: s.x + k * innovation,
        p: symmetrize(&(a * s.p * a.transpose() + k * r * k.transpose())),
        t: s.t,
    })
}

/// Filters a timestamped position track, returning one estimate per sample.
pub fn kalman_filter_track(times: &[f64], positions: &[Vector3<f64>], params: &KalmanParams) -> Result<Vec<Vector3<f64>>> {
    if times.is_empty() || times.len() != positions.len() {
        return Err(Error::EmptySequence);
    }
    let r = params.measurement_cov();
    let mut s = KalmanState::new(positions[0], params.r_std * params.r_std, 1.0, times[0]);
    let mut out = Vec::with_capacity(times.len());
    for (t, z) in times.iter().zip(positions) {
        s = kalman_predict(&s, *t, params)?;
        s = kalman_update(&s, z, &r)?;
        out.push(s.position());
    }
    Ok(out)
}

/// Centered moving average over `frames x channels`. Near the ends the window
/// is truncated to the samples that exist, so `[0, 3, 0]` with window 3
/// gives `[1.5, 1, 1.5]`.
pub fn moving_average(traj: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    let n = traj.len();
    if window == 0 || window % 2 == 0 || window > n {
        return Err(Error::BadWindow { window, len: n });
    }
    let half = window / 2;
    let channels = traj[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let count = (hi - lo + 1) as f64;
        let mut row = vec![0.0; channels];
        for frame in &traj[lo..=hi] {
            for (acc, v) in row.iter_mut().zip(frame) {
                *acc += v;
            }
        }
        for v in &mut row {
            *v /= count;
        }
        out.push(row);
    }
    Ok(out)
}

/// Low-pass filters every state channel (and object position) of a demo.
pub fn smooth_demo(demo: &Demonstration, window: usize) -> Result<Demonstration> {
    let rows: Vec<Vec<f64>> = demo.states.iter().map(|s| s.to_array().to_vec()).collect();
    let smoothed = moving_average(&rows, window)?;
    let mut out = demo.clone();
    out.states = smoothed.iter().map(|r| RobotState::from_slice(r)).collect::<Result<_>>()?;
    if let Some(obj) = &demo.object_poses {
        let pos: Vec<Vec<f64>> = obj.iter().map(|p| p[..3].to_vec()).collect();
        let pos = moving_average(&pos, window)?;
        let mut new = obj.clone();
        for (p, s) in new.iter_mut().zip(pos) {
            p[..3].copy_from_slice(&s);
        }
        out.object_poses = Some(new);
    }
    out.provenance.preprocessing.push(format!("moving_average:{window}"));
    out.validate()?;
    Ok(out)
}

/// Index pairs `(i, j)` from `(0, 0)` to `(len_a - 1, len_b - 1)`.
pub type WarpPath = Vec<(usize, usize)>;

/// Full dynamic-programming DTW with unit steps. Ties in the backtrack
/// prefer the diagonal, then advancing `a`, then advancing `b`.
pub fn dtw_align<T, F>(a: &[T], b: &[T], dist: F) -> Result<(WarpPath, f64)>
where
    F: Fn(&T, &T) -> f64,
{
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::EmptySequence);
    }
    let mut d = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = dist(&a[i], &b[j]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(d[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    best = best.min(d[(i - 1) * m + j]);
                }
                if j > 0 {
                    best = best.min(d[i * m + j - 1]);
                }
                best
            };
            d[i * m + j] = c + prev;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok((path, d[n * m - 1]))
}

/// Euclidean distance on the 25-vector with the wrist position scaled by 10
/// so that meters and radians carry comparable weight.
pub fn state_distance(a: &RobotState, b: &RobotState) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    let mut s = 0.0;
    for c in 0..STATE_DIM {
        let w = if WRIST_POS.contains(&c) { 10.0 } else { 1.0 };
        let d = w * (x[c] - y[c]);
        s += d * d;
    }
    s.sqrt()
}

/// Index of the demo with median length (lower median, first on ties).
pub fn median_length_index(demos: &[Demonstration]) -> Option<usize> {
    if demos.is_empty() {
        return None;
    }
    let mut idx: Vec<usize> = (0..demos.len()).collect();
    idx.sort_by_key(|&i| (demos[i].len(), i));
    Some(idx[(idx.len() - 1) / 2])
}

fn average_states(states: &[&RobotState]) -> RobotState {
    if states.iter().all(|s| *s == states[0]) {
        return *states[0];
    }
    let mut acc = [0.0; STATE_DIM];
    for s in states {
        for (a, v) in acc.iter_mut().zip(s.to_array()) {
            *a += v;
        }
    }
    let n = states.len() as f64;
    let avg: Vec<f64> = acc.iter().map(|v| v / n).collect();
    RobotState::from_slice(&avg).expect("25 entries")
}

fn average_poses(poses: &[&ObjectPose]) -> ObjectPose {
    if poses.iter().all(|p| *p == poses[0]) {
        return *poses[0];
    }
    let n = poses.len() as f64;
    let mut out = [0.0; 7];
    let q0 = &poses[0][3..];
    for p in poses {
        let sign = if p[3..].iter().zip(q0).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for k in 0..3 {
            out[k] += p[k] / n;
        }
        for k in 3..7 {
            out[k] += sign * p[k];
        }
    }
    let norm = out[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let flip = if out[3] < 0.0 { -1.0 } else { 1.0 };
    for v in &mut out[3..] {
        *v *= flip / norm;
    }
    out
}

/// Aligns every demo to `demos[reference]` by DTW on [`state_distance`] and
/// averages the frames mapped to each reference index. Outputs take the
/// reference's length and timing.
pub fn warp_to_reference(demos: &[Demonstration], reference: usize) -> Result<Vec<Demonstration>> {
    let r = demos.get(reference).ok_or_else(|| Error::Config(format!("reference index {reference} out of range")))?;
    demos
        .iter()
        .map(|d| {
            let (path, _) = dtw_align(&r.states, &d.states, state_distance)?;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); r.len()];
            for (i, j) in path {
                groups[i].push(j);
            }
            let states = groups
                .iter()
                .map(|g| average_states(&g.iter().map(|&j| &d.states[j]).collect::<Vec<_>>()))
                .collect();
            let object_poses = d.object_poses.as_ref().map(|obj| {
                groups
                    .iter()
                    .map(|g| average_poses(&g.iter().map(|&j| &obj[j]).collect::<Vec<_>>()))
                    .collect()
            });
            let mut out = Demonstration {
                id: d.id.clone(),
                rate_hz: r.rate_hz,
                times: r.times.clone(),
                states,
                object_poses,
                provenance: d.provenance.clone(),
            };
            out.provenance.preprocessing.push("dtw".into());
            out.validate()?;
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predict_examples() {
        let p = KalmanParams::default();
        let mut s = KalmanState::new(Vector3::zeros(), 1e-4, 1.0, 0.0);
        s.x[3] = 1.0;
        assert_eq!(kalman_predict(&s, 0.0, &p).unwrap(), s);
        let n = kalman_predict(&s, 0.04, &p).unwrap();
        assert!((n.x[0] - 0.04).abs() < 1e-15);
        assert!(n.p.trace() > s.p.trace());
        assert!(matches!(kalman_predict(&n, 0.0, &p), Err(Error::NonMonotonicTime { .. })));
    }

    #[test]
    fn update_limits() {
        let s = KalmanState::new(Vector3::new(0.1, 0.2, 0.3), 1e-2, 1.0, 0.0);
        let z = Vector3::new(0.5, -0.2, 0.0);
        let tight = kalman_update(&s, &z, &(Matrix3::identity() * 1e-12)).unwrap();
        assert!((tight.position() - z).norm() < 1e-6);
        let loose = kalman_update(&s, &z, &(Matrix3::identity() * 1e12)).unwrap();
        assert!((loose.position() - s.position()).norm() < 1e-6);
        let singular = KalmanState::new(Vector3::zeros(), 0.0, 0.0, 0.0);
        assert!(matches!(
            kalman_update(&singular, &z, &Matrix3::zeros()),
            Err(Error::SingularInnovation)
        ));
    }

    #[test]
    fn moving_average_examples() {
        let x: Vec<Vec<f64>> = [0.0, 3.0, 0.0].iter().map(|v| vec![*v]).collect();
        assert_eq!(moving_average(&x, 3).unwrap(), vec![vec![1.5], vec![1.0], vec![1.5]]);
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        let c = vec![vec![2.5, -1.0]; 7];
        assert_eq!(moving_average(&c, 5).unwrap(), c);
        assert!(matches!(moving_average(&x, 2), Err(Error::BadWindow { .. })));
        assert!(matches!(moving_average(&x, 5), Err(Error::BadWindow { .. })));
        assert!(matches!(moving_average(&x, 0), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn moving_average_keeps_the_mean_of_whole_periods() {
        // A full window spanning whole periods averages to the period mean.
        let period = [0.3, -1.2, 2.5, 0.7, 4.1];
        let mean = period.iter().sum::<f64>() / period.len() as f64;
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![period[i % period.len()]]).collect();
        for window in [5, 15] {
            let y = moving_average(&x, window).unwrap();
            for row in &y[window / 2..60 - window / 2] {
                assert!((row[0] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dtw_examples() {
        let abs = |a: &f64, b: &f64| (a - b).abs();
        let (path, cost) = dtw_align(&[1.0, 3.0, 4.0], &[1.0, 4.0], abs).unwrap();
        assert_eq!(cost, 1.0);
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(2, 1)));
        let a = [0.5, 1.5, -2.0, 0.25];
        let (p, c) = dtw_align(&a, &a, abs).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(matches!(dtw_align(&[], &a, abs), Err(Error::EmptySequence)));
    }

    #[test]
    fn dtw_is_symmetric_and_beats_lockstep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let abs = |a: &f64, b: &f64| (a - b).abs();
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let m = rng.gen_range(1..20);
            let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen()).collect();
            let (pab, cab) = dtw_align(&a, &b, abs).unwrap();
            let (pba, cba) = dtw_align(&b, &a, abs).unwrap();
            assert!((cab - cba).abs() < 1e-12);
            assert_eq!(pab.iter().map(|&(i, j)| (j, i)).collect::<Vec<_>>(), pba);
            for w in pab.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                assert!([(1, 0), (0, 1), (1, 1)].contains(&step));
            }
            let b2: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let lock: f64 = a.iter().zip(&b2).map(|(x, y)| (x - y).abs()).sum();
            assert!(dtw_align(&a, &b2, abs).unwrap().1 <= lock + 1e-12);
        }
    }

    fn demo_from(values: &[f64]) -> Demonstration {
        let states = values
            .iter()
            .map(|&v| {
                let joints = std::array::from_fn(|k| v + k as f64 * 0.01);
                RobotState::new(joints, &Pose::new(Vector3::new(v, 0.0, 0.0), Rotation::identity()))
            })
            .collect();
        let objects = values.iter().map(|&v| [v, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).collect();
        Demonstration::uniform("d", 30.0, states, Some(objects))
    }

    #[test]
    fn warping_recovers_duplicated_reference() {
        let r = demo_from(&[0.0, 0.2, 0.5, 0.9, 1.0, 0.7]);
        let dup_values: Vec<f64> = [0.0, 0.2, 0.5, 0.9, 1.0, 0.7].iter().flat_map(|v| [*v, *v]).collect();
        let dup = demo_from(&dup_values);
        let out = warp_to_reference(&[r.clone(), dup], 0).unwrap();
        assert_eq!(out[0].states, r.states);
        assert_eq!(out[1].states, r.states);
        assert_eq!(out[1].object_poses, r.object_poses);
        assert_eq!(out[1].len(), r.len());
        let other = demo_from(&[0.0, 0.1, 0.3, 0.6, 0.95, 1.0, 0.9, 0.7, 0.6]);
        let all = warp_to_reference(&[r.clone(), other], 0).unwrap();
        assert!(all.iter().all(|d| d.len() == r.len()));
    }

    #[test]
    fn median_reference() {
        let demos: Vec<_> = [5usize, 9, 3, 7].iter().map(|&n| demo_from(&vec![0.0; n].iter().enumerate().map(|(i, _)| i as f64).collect::<Vec<_>>())).collect();
        assert_eq!(median_length_index(&demos), Some(0));
    }

    #[test]
    fn kalman_tracks_a_ramp() {
        let p = KalmanParams::default();
        let times: Vec<f64> = (0..200).map(|k| k as f64 / 25.0).collect();
        let truth: Vec<Vector3<f64>> = times.iter().map(|t| Vector3::new(0.1 * t, 0.0, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<Vector3<f64>> = truth
            .iter()
            .map(|v| v + Vector3::new(rng.gen_range(-2e-3..2e-3), rng.gen_range(-2e-3..2e-3), 0.0))
            .collect();
        let est = kalman_filter_track(&times, &noisy, &p).unwrap();
        let err: f64 = est[100..].iter().zip(&truth[100..]).map(|(a, b)| (a - b).norm()).sum::<f64>() / 100.0;
        let raw: f64 = noisy[100..].iter().zip(&truth[100..]).map(|(a, b)| (a - b).norm()).sum::<f64>() / 100.0;
        assert!(err < raw);
    }
}
