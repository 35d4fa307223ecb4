//! Demonstration, human-frame and corpus-manifest files.
//!
//! Demo and frame files are JSON lines: one header record, then one record
//! per frame. Floats are written in shortest round-trip form, so a save/load
//! cycle is bit-exact and two saves of the same value are byte-identical.
//! Rotations inside robot states stay in 6D; poses (wrist of a human frame,
//! object) are position + quaternion with `w >= 0`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotation, Pose, Quaternion};
use crate::state::{RobotState, OBJECT_DIM, STATE_DIM};

pub const DEMO_FORMAT: &str = "dexlat-demo";
pub const HUMAN_FORMAT: &str = "dexlat-human";
pub const MANIFEST_FORMAT: &str = "dexlat-corpus";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const HASH_ALGORITHM: &str = "sha256";

/// Object pose as position followed by a unit quaternion (w, x, y, z).
pub type ObjectPose = [f64; OBJECT_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_mean_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_max_m: Option<f64>,
    /// Processing steps applied, in order (e.g. `moving_average:5`, `dtw`).
    #[serde(default)]
    pub preprocessing: Vec<String>,
}

impl Provenance {
    pub fn synthetic() -> Self {
        Self {
            source: Source::Synthetic,
            residual_mean_m: None,
            residual_max_m: None,
            preprocessing: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub rate_hz: f64,
    /// Strictly increasing, seconds.
    pub times: Vec<f64>,
    pub states: Vec<RobotState>,
    pub object_poses: Option<Vec<ObjectPose>>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanFrame {
    pub timestamp: f64,
    pub wrist: Pose,
    /// Wrist frame, meters, thumb to pinky.
    pub fingertips: [Vector3<f64>; 5],
    pub object: Option<ObjectPose>,
}

impl Demonstration {
    /// Uniformly timed demo starting at t = 0.
    pub fn uniform(id: impl Into<String>, rate_hz: f64, states: Vec<RobotState>, object_poses: Option<Vec<ObjectPose>>) -> Self {
        let times = (0..states.len()).map(|i| i as f64 / rate_hz).collect();
        Self {
            id: id.into(),
            rate_hz,
            times,
            states,
            object_poses,
            provenance: Provenance::synthetic(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn object_pose(&self, i: usize) -> Option<&ObjectPose> {
        self.object_poses.as_ref().map(|o| &o[i])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvariantViolation(format!("demo `{}`: {m}", self.id)));
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return fail(format!("rate {} must be positive", self.rate_hz));
        }
        if self.times.len() != self.states.len() {
            return fail(format!("{} timestamps for {} states", self.times.len(), self.states.len()));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return fail(format!("timestamps not increasing ({} then {})", w[0], w[1]));
            }
        }
        for (i, s) in self.states.iter().enumerate() {
            if let Err(e) = s.validate() {
                return fail(format!("frame {i}: {e}"));
            }
        }
        if let Some(obj) = &self.object_poses {
            if obj.len() != self.states.len() {
                return fail(format!("{} object poses for {} states", obj.len(), self.states.len()));
            }
            for (i, p) in obj.iter().enumerate() {
                check_pose7(p).or_else(|m| fail(format!("object pose {i}: {m}")))?;
            }
        }
        Ok(())
    }
}

fn check_pose7(p: &[f64; 7]) -> std::result::Result<(), String> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err("non-finite value".into());
    }
    let n = (p[3] * p[3] + p[4] * p[4] + p[5] * p[5] + p[6] * p[6]).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(format!("quaternion norm {n}"));
    }
    Ok(())
}

pub fn pose_from7(p: &ObjectPose) -> Pose {
    Pose::new(
        Vector3::new(p[0], p[1], p[2]),
        quat_to_rotation(&Quaternion { w: p[3], x: p[4], y: p[5], z: p[6] }),
    )
}

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    fn object<'v>(&self, v: &'v Value) -> Result<&'v Map<String, Value>> {
        v.as_object().ok_or_else(|| self.err("<record>", "expected a JSON object"))
    }

    fn field<'v>(&self, m: &'v Map<String, Value>, key: &str) -> Result<&'v Value> {
        m.get(key).ok_or_else(|| self.err(key, "missing"))
    }

    fn num(&self, m: &Map<String, Value>, key: &str) -> Result<f64> {
        self.field(m, key)?.as_f64().ok_or_else(|| self.err(key, "expected a number"))
    }

    fn str<'v>(&self, m: &'v Map<String, Value>, key: &str) -> Result<&'v str> {
        self.field(m, key)?.as_str().ok_or_else(|| self.err(key, "expected a string"))
    }

    fn vec(&self, v: &Value, key: &str, len: usize) -> Result<Vec<f64>> {
        let arr = v.as_array().ok_or_else(|| self.err(key, "expected an array"))?;
        if arr.len() != len {
            return Err(self.err(key, format!("expected {len} values, found {}", arr.len())));
        }
        arr.iter()
            .map(|x| x.as_f64().ok_or_else(|| self.err(key, "expected numbers")))
            .collect()
    }

    fn reject_unknown(&self, m: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
        match m.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unknown field")),
            None => Ok(()),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, Value)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: p.clone(),
            line: i + 1,
            field: "<record>".into(),
            msg: e.to_string(),
        })?;
        out.push((i + 1, v));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: p,
            line: 0,
            field: "<header>".into(),
            msg: "empty file".into(),
        });
    }
    Ok(out)
}

fn check_header(ctx: &LineCtx, m: &Map<String, Value>, format: &str) -> Result<()> {
    let f = ctx.str(m, "format")?;
    if f != format {
        return Err(ctx.err("format", format!("expected `{format}`, found `{f}`")));
    }
    let version = ctx.num(m, "version")?;
    if version != FORMAT_VERSION as f64 {
        return Err(Error::Version {
            path: ctx.path.to_string(),
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn demo_to_string(demo: &Demonstration) -> Result<String> {
    demo.validate()?;
    let header = json!({
        "format": DEMO_FORMAT,
        "version": FORMAT_VERSION,
        "id": demo.id,
        "rate_hz": demo.rate_hz,
        "dims": STATE_DIM,
        "has_object": demo.object_poses.is_some(),
        "frames": demo.len(),
        "provenance": demo.provenance,
    });
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for (i, s) in demo.states.iter().enumerate() {
        let mut rec = Map::new();
        rec.insert("t".into(), json!(demo.times[i]));
        rec.insert("state".into(), json!(s.to_array().to_vec()));
        if let Some(o) = demo.object_pose(i) {
            rec.insert("object".into(), json!(o.to_vec()));
        }
        out.push_str(&serde_json::to_string(&rec).expect("frame serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_demo(demo: &Demonstration, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), demo_to_string(demo)?.as_bytes())
}

pub fn load_demo(path: impl AsRef<Path>) -> Result<Demonstration> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let p = path.display().to_string();
    let (hline, hv) = &lines[0];
    let ctx = LineCtx { path: &p, line: *hline };
    let h = ctx.object(hv)?;
    ctx.reject_unknown(h, &["format", "version", "id", "rate_hz", "dims", "has_object", "frames", "provenance"])?;
    check_header(&ctx, h, DEMO_FORMAT)?;
    let id = ctx.str(h, "id")?.to_string();
    let rate_hz = ctx.num(h, "rate_hz")?;
    let dims = ctx.num(h, "dims")?;
    if dims != STATE_DIM as f64 {
        return Err(ctx.err("dims", format!("expected {STATE_DIM}, found {dims}")));
    }
    let has_object = ctx.field(h, "has_object")?.as_bool().ok_or_else(|| ctx.err("has_object", "expected a boolean"))?;
    let frames = ctx.num(h, "frames")? as usize;
    let provenance: Provenance =
        serde_json::from_value(ctx.field(h, "provenance")?.clone()).map_err(|e| ctx.err("provenance", e.to_string()))?;

    let mut times = Vec::with_capacity(frames);
    let mut states = Vec::with_capacity(frames);
    let mut objects = Vec::new();
    for (line, v) in &lines[1..] {
        let ctx = LineCtx { path: &p, line: *line };
        let m = ctx.object(v)?;
        ctx.reject_unknown(m, &["t", "state", "object"])?;
        times.push(ctx.num(m, "t")?);
        let s = ctx.vec(ctx.field(m, "state")?, "state", STATE_DIM)?;
        states.push(RobotState::from_slice(&s)?);
        match (has_object, m.get("object")) {
            (true, Some(o)) => {
                let o = ctx.vec(o, "object", OBJECT_DIM)?;
                objects.push(<[f64; 7]>::try_from(o.as_slice()).unwrap());
            }
            (false, None) => {}
            (true, None) => {
                return Err(Error::InvariantViolation(format!("{p}: line {line}: object pose missing")));
            }
            (false, Some(_)) => {
                return Err(Error::InvariantViolation(format!("{p}: line {line}: unexpected object pose")));
            }
        }
    }
    if states.len() != frames {
        return Err(Error::InvariantViolation(format!(
            "{p}: header declares {frames} frames, file has {}",
            states.len()
        )));
    }
    let demo = Demonstration {
        id,
        rate_hz,
        times,
        states,
        object_poses: has_object.then_some(objects),
        provenance,
    };
    demo.validate()?;
    Ok(demo)
}

pub fn human_frames_to_string(frames: &[HumanFrame]) -> String {
    let mut out = serde_json::to_string(&json!({ "format": HUMAN_FORMAT, "version": FORMAT_VERSION })).unwrap();
    out.push('\n');
    for f in frames {
        let mut rec = Map::new();
        rec.insert("t".into(), json!(f.timestamp));
        rec.insert("wrist".into(), json!(f.wrist.to_array7().to_vec()));
        rec.insert(
            "fingertips".into(),
            json!(f.fingertips.iter().map(|p| vec![p.x, p.y, p.z]).collect::<Vec<_>>()),
        );
        if let Some(o) = &f.object {
            rec.insert("object".into(), json!(o.to_vec()));
        }
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    out
}

pub fn save_human_frames(frames: &[HumanFrame], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), human_frames_to_string(frames).as_bytes())
}

/// Reads a human recording: wrist pose in the world frame, fingertips in the
/// wrist frame (each closer than 0.30 m), optional object pose.
pub fn load_human_frames(path: impl AsRef<Path>) -> Result<Vec<HumanFrame>> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let p = path.display().to_string();
    let (hline, hv) = &lines[0];
    let ctx = LineCtx { path: &p, line: *hline };
    let h = ctx.object(hv)?;
    ctx.reject_unknown(h, &["format", "version"])?;
    check_header(&ctx, h, HUMAN_FORMAT)?;
    let mut frames: Vec<HumanFrame> = Vec::with_capacity(lines.len() - 1);
    for (line, v) in &lines[1..] {
        let ctx = LineCtx { path: &p, line: *line };
        let m = ctx.object(v)?;
        ctx.reject_unknown(m, &["t", "wrist", "fingertips", "object"])?;
        let t = ctx.num(m, "t")?;
        if let Some(prev) = frames.last() {
            if !(t > prev.timestamp) {
                return Err(Error::NonMonotonicTime {
                    prev: prev.timestamp,
                    next: t,
                });
            }
        }
        let w: [f64; 7] = ctx.vec(ctx.field(m, "wrist")?, "wrist", 7)?.try_into().unwrap();
        check_pose7(&w).map_err(|e| ctx.err("wrist", e))?;
        let tips_v = ctx.field(m, "fingertips")?.as_array().ok_or_else(|| ctx.err("fingertips", "expected an array"))?;
        if tips_v.len() != 5 {
            return Err(ctx.err("fingertips", format!("expected 5 fingertips, found {}", tips_v.len())));
        }
        let mut tips = [Vector3::zeros(); 5];
        for (k, tv) in tips_v.iter().enumerate() {
            let v = ctx.vec(tv, "fingertips", 3)?;
            tips[k] = Vector3::new(v[0], v[1], v[2]);
            if !(tips[k].norm() < 0.30) {
                return Err(ctx.err("fingertips", format!("fingertip {k} is {} m from the wrist", tips[k].norm())));
            }
        }
        let object = match m.get("object") {
            Some(o) => {
                let o: [f64; 7] = ctx.vec(o, "object", 7)?.try_into().unwrap();
                check_pose7(&o).map_err(|e| ctx.err("object", e))?;
                Some(o)
            }
            None => None,
        };
        frames.push(HumanFrame {
            timestamp: t,
            wrist: pose_from7(&w),
            fingertips: tips,
            object,
        });
    }
    if frames.is_empty() {
        return Err(Error::Parse {
            path: p,
            line: *hline,
            field: "<frames>".into(),
            msg: "no frames".into(),
        });
    }
    Ok(frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Prior,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub digest: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub corpus_id: String,
    pub role: CorpusRole,
    pub hash_algorithm: String,
    pub config_digest: String,
    pub demos: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every demo as `<dir>/<id>.jsonl` plus `manifest.json`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    corpus_id: &str,
    role: CorpusRole,
    config_digest: &str,
    demos: &[Demonstration],
) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(demos.len());
    for d in demos {
        let text = demo_to_string(d)?;
        let file = format!("{}.jsonl", d.id);
        write_atomic(&dir.join(&file), text.as_bytes())?;
        entries.push(ManifestEntry {
            file,
            digest: sha256_hex(text.as_bytes()),
            frames: d.len(),
        });
    }
    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.into(),
        version: FORMAT_VERSION,
        corpus_id: corpus_id.into(),
        role,
        hash_algorithm: HASH_ALGORITHM.into(),
        config_digest: config_digest.into(),
        demos: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        field: "<manifest>".into(),
        msg: e.to_string(),
    })?;
    if m.format != MANIFEST_FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: m.version,
            supported: FORMAT_VERSION,
        });
    }
    if m.hash_algorithm != HASH_ALGORITHM {
        return Err(Error::Config(format!("unsupported hash algorithm `{}`", m.hash_algorithm)));
    }
    Ok(m)
}

/// Accepts either a manifest file or the directory holding `manifest.json`.
pub fn manifest_path(p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Loads every demo of a corpus, failing on the first digest or invariant
/// violation.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Demonstration>)> {
    let mpath = manifest_path(path);
    let manifest = load_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut demos = Vec::with_capacity(manifest.demos.len());
    for e in &manifest.demos {
        let fpath = dir.join(&e.file);
        let bytes = fs::read(&fpath).map_err(|err| Error::io(&fpath, err))?;
        if sha256_hex(&bytes) != e.digest {
            return Err(Error::InvariantViolation(format!("{}: digest mismatch", e.file)));
        }
        demos.push(load_demo(&fpath)?);
    }
    Ok((manifest, demos))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoCheck {
    pub file: String,
    pub frames: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusReport {
    pub corpus_id: String,
    pub demos: Vec<DemoCheck>,
    pub total_frames: usize,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
}

impl CorpusReport {
    pub fn failures(&self) -> Vec<&DemoCheck> {
        self.demos.iter().filter(|d| d.error.is_some()).collect()
    }

    pub fn ok(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Checks digests and invariants of every listed demo. Problems with
/// individual demos are collected in the report rather than returned.
pub fn validate_corpus(path: impl AsRef<Path>) -> Result<CorpusReport> {
    let mpath = manifest_path(path);
    let manifest = load_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut report = CorpusReport {
        corpus_id: manifest.corpus_id.clone(),
        demos: Vec::new(),
        total_frames: 0,
        channel_min: vec![f64::INFINITY; STATE_DIM],
        channel_max: vec![f64::NEG_INFINITY; STATE_DIM],
    };
    for e in &manifest.demos {
        let fpath = dir.join(&e.file);
        let check = match fs::read(&fpath) {
            Err(err) => DemoCheck {
                file: e.file.clone(),
                frames: 0,
                error: Some(err.to_string()),
            },
            Ok(bytes) if sha256_hex(&bytes) != e.digest => DemoCheck {
                file: e.file.clone(),
                frames: 0,
                error: Some("digest mismatch".into()),
            },
            Ok(_) => match load_demo(&fpath) {
                Err(err) => DemoCheck {
                    file: e.file.clone(),
                    frames: 0,
                    error: Some(err.to_string()),
                },
                Ok(d) => {
                    for s in &d.states {
                        for (c, v) in s.to_array().iter().enumerate() {
                            report.channel_min[c] = report.channel_min[c].min(*v);
                            report.channel_max[c] = report.channel_max[c].max(*v);
                        }
                    }
                    DemoCheck {
                        file: e.file.clone(),
                        frames: d.len(),
                        error: None,
                    }
                }
            },
        };
        report.total_frames += check.frames;
        report.demos.push(check);
    }
    Ok(report)
}

/// Stable digest of a sorted string map, used to name run directories.
pub fn digest_of_map(m: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in m {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}
