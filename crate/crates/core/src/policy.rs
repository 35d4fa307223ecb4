//! Chunking behavior-cloning policy.
//!
//! A small transformer encoder reads the last L states (plus one object-pose
//! token) and emits either a latent vector, decoded to an N-frame chunk by a
//! frozen VAE decoder, or the N x 25 chunk directly.

use std::collections::BTreeMap;
use std::path::Path;

use nn::functional::multi_head_attention;
use nn::{AdamConfig, Bind, Checkpoint, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Demonstration, ObjectPose};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::state::{OBJECT_DIM, STATE_DIM};
use crate::train::{accumulate_sharded, LossRecord};
use crate::vae::{decoder_tape, Frame, Normalization, VaeModel};

pub const CHECKPOINT_KIND: &str = "policy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Latent,
    Direct,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Latent => "latent",
            PolicyMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(PolicyMode::Latent),
            "direct" => Ok(PolicyMode::Direct),
            _ => Err(Error::Config(format!("unknown policy mode `{s}` (expected latent or direct)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    /// Input window length in frames.
    pub l: usize,
    /// Shift between input window start and target chunk start.
    pub n_shift: usize,
    /// Chunk length; must match the VAE in latent mode.
    pub chunk: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub use_object: bool,
    /// Also train on windows that start before the demo, padded with the
    /// first frame.
    pub pad_start: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Latent,
            l: 10,
            n_shift: 5,
            chunk: 15,
            width: 64,
            heads: 4,
            layers: 3,
            use_object: true,
            pad_start: true,
            lr: 1e-4,
            batch_size: 32,
            epochs: 500,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("policy: {m}")));
        if self.l == 0 || self.n_shift == 0 || self.chunk == 0 {
            return bad("l, n_shift and chunk must be positive".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    fn arch(&self, out_dim: usize) -> PolicyArch {
        PolicyArch {
            mode: self.mode,
            l: self.l,
            n_shift: self.n_shift,
            chunk: self.chunk,
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            use_object: self.use_object,
            out_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyArch {
    pub mode: PolicyMode,
    pub l: usize,
    pub n_shift: usize,
    pub chunk: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub use_object: bool,
    /// D in latent mode, chunk x 25 in direct mode.
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<Frame>,
    pub object: Option<ObjectPose>,
    pub target: Vec<Frame>,
    pub demo: usize,
    /// Window start; negative for padded windows.
    pub start: i64,
}

/// Input frames `[i, i + l)` and target frames `[i + n, i + n + chunk)` for
/// every `i` with both inside the demo. With `pad_start`, windows starting
/// at `-(l - 1)..0` are added, reading frame 0 for negative indices. The
/// object pose is the one at the last input frame.
pub fn build_training_pairs(demos: &[Demonstration], l: usize, n: usize, chunk: usize, pad_start: bool) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (di, d) in demos.iter().enumerate() {
        let needed = (n + chunk).max(l);
        if d.len() < needed {
            return Err(Error::DemoTooShort { len: d.len(), needed });
        }
        let rows: Vec<Frame> = d.states.iter().map(|s| s.to_array()).collect();
        let at = |j: i64| rows[j.max(0) as usize];
        let first = if pad_start { -(l as i64 - 1) } else { 0 };
        let last = (d.len() - needed) as i64;
        for i in first..=last {
            let last_input = (i + l as i64 - 1).max(0) as usize;
            out.push(TrainingPair {
                input: (0..l as i64).map(|k| at(i + k)).collect(),
                object: d.object_pose(last_input).copied(),
                target: (0..chunk as i64).map(|k| at(i + n as i64 + k)).collect(),
                demo: di,
                start: i,
            });
        }
    }
    Ok(out)
}

struct Layers {
    embed: Linear,
    embed_obj: Linear,
    blocks: Vec<(MultiHeadAttention, LayerNorm, Linear, Linear, LayerNorm)>,
    head: Linear,
}

impl Layers {
    fn new(a: &PolicyArch) -> Self {
        let w = a.width;
        Self {
            embed: Linear::new("embed", STATE_DIM, w),
            embed_obj: Linear::new("embed_obj", OBJECT_DIM, w),
            blocks: (0..a.layers)
                .map(|k| {
                    (
                        MultiHeadAttention::new(format!("block{k}.attn"), w, a.heads),
                        LayerNorm::new(format!("block{k}.ln1"), w),
                        Linear::new(format!("block{k}.ff1"), w, 2 * w),
                        Linear::new(format!("block{k}.ff2"), 2 * w, w),
                        LayerNorm::new(format!("block{k}.ln2"), w),
                    )
                })
                .collect(),
            head: Linear::new("head", w, a.out_dim),
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(a: &PolicyArch, rng: &mut R) -> Result<ParamStore> {
    let l = Layers::new(a);
    let mut s = ParamStore::new();
    l.embed.init(&mut s, rng)?;
    s.insert_uniform("pos", &[a.l, a.width], a.width, rng)?;
    if a.use_object {
        l.embed_obj.init(&mut s, rng)?;
        s.insert_uniform("pos_obj", &[a.width], a.width, rng)?;
    }
    for (attn, ln1, ff1, ff2, ln2) in &l.blocks {
        attn.init(&mut s, rng)?;
        ln1.init(&mut s)?;
        ff1.init(&mut s, rng)?;
        ff2.init(&mut s, rng)?;
        ln2.init(&mut s)?;
    }
    l.head.init(&mut s, rng)?;
    Ok(s)
}

/// Policy network on a batch. `states` is `[batch * l, 25]` normalized,
/// `object` is `[batch, 7]` normalized when the policy uses it. Returns
/// `[batch, out_dim]`.
pub fn policy_tape(tape: &mut Tape, store: &ParamStore, a: &PolicyArch, states: Var, object: Option<Var>, batch: usize) -> nn::Result<Var> {
    let l = Layers::new(a);
    let mode = Bind::Train;
    let e = l.embed.bind(tape, store, mode)?.forward(tape, states)?;
    let pos = tape.param(store, "pos")?;
    let mut x = tape.add_tiled(e, pos)?;
    let mut tokens = a.l;
    if a.use_object {
        let obj = object.ok_or_else(|| nn::NnError::ShapeMismatch {
            op: "policy",
            detail: "object pose required".into(),
        })?;
        let o = l.embed_obj.bind(tape, store, mode)?.forward(tape, obj)?;
        let opos = tape.param(store, "pos_obj")?;
        let o = tape.add_tiled(o, opos)?;
        x = tape.concat_tokens(x, a.l, o, 1)?;
        tokens += 1;
    }
    for (attn, ln1, ff1, ff2, ln2) in &l.blocks {
        let p = attn.bind(tape, store, mode)?;
        let y = multi_head_attention(tape, x, x, batch, tokens, tokens, &p)?;
        let y = tape.add(x, y)?;
        x = ln1.bind(tape, store, mode)?.forward(tape, y)?;
        let h = ff1.bind(tape, store, mode)?.forward(tape, x)?;
        let h = tape.tanh(h)?;
        let h = ff2.bind(tape, store, mode)?.forward(tape, h)?;
        let y = tape.add(x, h)?;
        x = ln2.bind(tape, store, mode)?.forward(tape, y)?;
    }
    let pooled = tape.mean_tokens(x, tokens)?;
    l.head.bind(tape, store, mode)?.forward(tape, pooled)
}

/// Chunk rows `[batch * chunk, 25]` in normalized space: decoded through the
/// frozen VAE in latent mode, reshaped head output in direct mode.
pub fn chunk_tape(tape: &mut Tape, store: &ParamStore, a: &PolicyArch, vae: Option<&VaeModel>, states: Var, object: Option<Var>, batch: usize) -> Result<Var> {
    let out = policy_tape(tape, store, a, states, object, batch)?;
    match a.mode {
        PolicyMode::Latent => {
            let vae = vae.ok_or(Error::DecoderMissing)?;
            Ok(decoder_tape(tape, &vae.params, &vae.arch, out, batch, Bind::Frozen)?.frames)
        }
        PolicyMode::Direct => Ok(tape.reshape(out, &[batch * a.chunk, STATE_DIM])?),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    pub params: ParamStore,
    /// Normalization for states and chunks (the VAE's in latent mode).
    pub norm: Normalization,
    pub obj_norm: Normalization,
    /// Digest of the VAE checkpoint this policy was trained against.
    pub vae_digest: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyOutput {
    Latent(Vec<f64>),
    Chunk(Vec<Frame>),
}

fn stack_inputs(model: &PolicyModel, windows: &[&[Frame]], objects: &[Option<&ObjectPose>]) -> Result<(Tensor, Option<Tensor>)> {
    let a = &model.arch;
    let mut xs = Vec::with_capacity(windows.len() * a.l * STATE_DIM);
    for w in windows {
        if w.len() != a.l {
            return Err(Error::DimensionMismatch { expected: a.l, got: w.len() });
        }
        for f in *w {
            xs.extend_from_slice(&model.norm.apply(f));
        }
    }
    let x = Tensor::new(&[windows.len() * a.l, STATE_DIM], xs)?;
    let o = if a.use_object {
        let mut os = Vec::with_capacity(windows.len() * OBJECT_DIM);
        for o in objects {
            let o = o.ok_or_else(|| Error::InvariantViolation("policy uses the object pose but none was given".into()))?;
            os.extend(model.obj_norm.apply_slice(o));
        }
        Some(Tensor::new(&[windows.len(), OBJECT_DIM], os)?)
    } else {
        None
    };
    Ok((x, o))
}

impl PolicyModel {
    /// Raw network output for one window.
    pub fn forward(&self, window: &[Frame], object: Option<&ObjectPose>) -> Result<PolicyOutput> {
        let (x, o) = stack_inputs(self, &[window], &[object])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let ov = o.map(|o| tape.constant(o)).transpose()?;
        let out = policy_tape(&mut tape, &self.params, &self.arch, xv, ov, 1)?;
        let v = tape.value(out).data().to_vec();
        Ok(match self.arch.mode {
            PolicyMode::Latent => PolicyOutput::Latent(v),
            PolicyMode::Direct => PolicyOutput::Chunk(
                v.chunks(STATE_DIM)
                    .map(|r| self.norm.invert(&r.try_into().expect("row width")))
                    .collect(),
            ),
        })
    }

    /// Predicted chunk in state units.
    pub fn predict_chunk(&self, vae: Option<&VaeModel>, window: &[Frame], object: Option<&ObjectPose>) -> Result<Vec<Frame>> {
        match self.forward(window, object)? {
            PolicyOutput::Chunk(c) => Ok(c),
            PolicyOutput::Latent(z) => {
                let vae = vae.ok_or(Error::DecoderMissing)?;
                check_vae(self, vae)?;
                vae.decode(&z)
            }
        }
    }

    /// Mean per-pair loss over `pairs` in normalized space.
    pub fn mean_loss(&self, vae: Option<&VaeModel>, pairs: &[TrainingPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let prepared = prepare(self, pairs)?;
        let mut total = 0.0;
        for chunk in (0..pairs.len()).collect::<Vec<_>>().chunks(256) {
            let mut tape = Tape::new();
            let l = batch_loss(&mut tape, &self.params, &self.arch, vae, &prepared, chunk)?;
            total += tape.value(l).item();
        }
        Ok(total / pairs.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.arch;
        let json = |v: &[f64]| serde_json::to_string(v).expect("finite floats");
        let mut m = BTreeMap::new();
        m.insert("kind".to_string(), CHECKPOINT_KIND.to_string());
        m.insert("mode".into(), a.mode.as_str().into());
        m.insert("l".into(), a.l.to_string());
        m.insert("n_shift".into(), a.n_shift.to_string());
        m.insert("chunk".into(), a.chunk.to_string());
        m.insert("width".into(), a.width.to_string());
        m.insert("heads".into(), a.heads.to_string());
        m.insert("layers".into(), a.layers.to_string());
        m.insert("use_object".into(), a.use_object.to_string());
        m.insert("out_dim".into(), a.out_dim.to_string());
        if a.mode == PolicyMode::Latent {
            m.insert("d".into(), a.out_dim.to_string());
        }
        m.insert("norm_mean".into(), json(&self.norm.mean));
        m.insert("norm_std".into(), json(&self.norm.std));
        m.insert("obj_mean".into(), json(&self.obj_norm.mean));
        m.insert("obj_std".into(), json(&self.obj_norm.std));
        m.insert("vae_digest".into(), self.vae_digest.clone().unwrap_or_default());
        m.insert("seed".into(), self.seed.to_string());
        let mut ck = Checkpoint::new(self.params.values_only());
        ck.metadata = m;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.metadata;
        let bad = |k: &str| Error::InvariantViolation(format!("policy checkpoint: bad or missing `{k}`"));
        let get = |k: &str| m.get(k).ok_or_else(|| bad(k));
        if get("kind")? != CHECKPOINT_KIND {
            return Err(Error::InvariantViolation(format!("checkpoint kind is `{}`, not `{CHECKPOINT_KIND}`", get("kind")?)));
        }
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let floats = |k: &str| -> Result<Vec<f64>> { serde_json::from_str(get(k)?).map_err(|_| bad(k)) };
        let arch = PolicyArch {
            mode: PolicyMode::parse(get("mode")?)?,
            l: int("l")?,
            n_shift: int("n_shift")?,
            chunk: int("chunk")?,
            width: int("width")?,
            heads: int("heads")?,
            layers: int("layers")?,
            use_object: get("use_object")?.parse().map_err(|_| bad("use_object"))?,
            out_dim: int("out_dim")?,
        };
        let norm = Normalization {
            mean: floats("norm_mean")?,
            std: floats("norm_std")?,
        };
        norm.validate()?;
        let obj_norm = Normalization {
            mean: floats("obj_mean")?,
            std: floats("obj_std")?,
        };
        obj_norm.validate_dim(OBJECT_DIM)?;
        let expected = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        if expected.len() != ck.params.len() {
            return Err(Error::InvariantViolation("policy checkpoint: tensor set does not match its metadata".into()));
        }
        for (name, e) in expected.iter() {
            let got = ck.params.value(name).map_err(|_| bad(name))?;
            if got.shape() != e.value.shape() {
                return Err(bad(name));
            }
        }
        let digest = get("vae_digest")?;
        Ok(Self {
            arch,
            params: ck.params.values_only(),
            norm,
            obj_norm,
            vae_digest: (!digest.is_empty()).then(|| digest.clone()),
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_checkpoint().to_bytes()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }
}

/// Latent policies only run with the VAE they were trained against.
pub fn check_vae(model: &PolicyModel, vae: &VaeModel) -> Result<()> {
    if vae.arch.n != model.arch.chunk || vae.arch.d != model.arch.out_dim {
        return Err(Error::IncompatibleVae(format!(
            "policy expects N = {}, D = {}; VAE has N = {}, D = {}",
            model.arch.chunk, model.arch.out_dim, vae.arch.n, vae.arch.d
        )));
    }
    if let Some(want) = &model.vae_digest {
        let got = vae.digest()?;
        if &got != want {
            return Err(Error::IncompatibleVae(format!("policy was trained against VAE {want}, got {got}")));
        }
    }
    Ok(())
}

struct Prepared {
    inputs: Vec<Vec<f64>>,
    objects: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn prepare(model: &PolicyModel, pairs: &[TrainingPair]) -> Result<Prepared> {
    let norm_rows = |rows: &[Frame]| -> Vec<f64> { rows.iter().flat_map(|f| model.norm.apply(f)).collect() };
    let mut objects = Vec::new();
    if model.arch.use_object {
        for p in pairs {
            let o = p.object.ok_or_else(|| Error::InvariantViolation("policy uses the object pose but a demo has none".into()))?;
            objects.push(model.obj_norm.apply_slice(&o));
        }
    }
    for p in pairs {
        if p.input.len() != model.arch.l || p.target.len() != model.arch.chunk {
            return Err(Error::DimensionMismatch {
                expected: model.arch.l,
                got: p.input.len(),
            });
        }
    }
    Ok(Prepared {
        inputs: pairs.iter().map(|p| norm_rows(&p.input)).collect(),
        objects,
        targets: pairs.iter().map(|p| norm_rows(&p.target)).collect(),
    })
}

/// Summed squared error over the listed pairs.
fn batch_loss(tape: &mut Tape, store: &ParamStore, a: &PolicyArch, vae: Option<&VaeModel>, data: &Prepared, idx: &[usize]) -> Result<Var> {
    let b = idx.len();
    let mut xs = Vec::with_capacity(b * a.l * STATE_DIM);
    let mut ts = Vec::with_capacity(b * a.chunk * STATE_DIM);
    let mut os = Vec::with_capacity(b * OBJECT_DIM);
    for &i in idx {
        xs.extend_from_slice(&data.inputs[i]);
        ts.extend_from_slice(&data.targets[i]);
        if a.use_object {
            os.extend_from_slice(&data.objects[i]);
        }
    }
    let x = tape.constant(Tensor::new(&[b * a.l, STATE_DIM], xs)?)?;
    let o = if a.use_object {
        Some(tape.constant(Tensor::new(&[b, OBJECT_DIM], os)?)?)
    } else {
        None
    };
    let t = tape.constant(Tensor::new(&[b * a.chunk, STATE_DIM], ts)?)?;
    let y = chunk_tape(tape, store, a, vae, x, o, b)?;
    let d = tape.sub(y, t)?;
    Ok(tape.sum_squares(d)?)
}

/// Summed squared chunk error of one pair, in normalized space.
pub fn bc_loss(model: &PolicyModel, vae: Option<&VaeModel>, pair: &TrainingPair) -> Result<f64> {
    let data = prepare(model, std::slice::from_ref(pair))?;
    let mut tape = Tape::new();
    let l = batch_loss(&mut tape, &model.params, &model.arch, vae, &data, &[0])?;
    Ok(tape.value(l).item())
}

/// Gradients of the summed loss over `pairs` with respect to the policy
/// parameters (and nothing else).
pub fn bc_gradients(model: &PolicyModel, vae: Option<&VaeModel>, pairs: &[TrainingPair]) -> Result<Vec<(String, Tensor)>> {
    let data = prepare(model, pairs)?;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut tape = Tape::new();
    let l = batch_loss(&mut tape, &model.params, &model.arch, vae, &data, &idx)?;
    tape.backward(l)?;
    Ok(tape.param_grads())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyReport {
    pub log: Vec<LossRecord>,
    pub pairs: usize,
}

impl PolicyReport {
    /// First epoch whose mean per-element loss is below `threshold`.
    pub fn epochs_to(&self, threshold: f64, elements: usize) -> Option<usize> {
        self.log.iter().find(|r| r.total / elements as f64 <= threshold).map(|r| r.epoch)
    }
}

pub fn new_policy(cfg: &PolicyConfig, demos: &[Demonstration], vae: Option<&VaeModel>) -> Result<PolicyModel> {
    cfg.validate()?;
    let (norm, out_dim, vae_digest) = match cfg.mode {
        PolicyMode::Latent => {
            let vae = vae.ok_or(Error::DecoderMissing)?;
            if vae.arch.n != cfg.chunk {
                return Err(Error::IncompatibleVae(format!("policy chunk is {} frames, VAE decodes {}", cfg.chunk, vae.arch.n)));
            }
            (vae.norm.clone(), vae.arch.d, Some(vae.digest()?))
        }
        PolicyMode::Direct => (Normalization::fit(demos), cfg.chunk * STATE_DIM, None),
    };
    let obj_rows: Vec<&[f64]> = demos
        .iter()
        .filter_map(|d| d.object_poses.as_ref())
        .flat_map(|p| p.iter().map(|o| o.as_slice()))
        .collect();
    let obj_norm = Normalization::fit_rows(obj_rows.iter().copied(), OBJECT_DIM);
    let arch = cfg.arch(out_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(PolicyModel {
        arch,
        params: init_params(&arch, &mut rng)?,
        norm,
        obj_norm,
        vae_digest,
        seed: cfg.seed,
    })
}

pub fn train_policy(cfg: &PolicyConfig, demos: &[Demonstration], vae: Option<&VaeModel>, exec: Exec) -> Result<(PolicyModel, PolicyReport)> {
    train_policy_with(cfg, demos, vae, exec, |_, _| Ok(()))
}

/// Mini-batch Adam over training pairs. `on_epoch` sees each epoch's record
/// and the current model.
pub fn train_policy_with<F>(cfg: &PolicyConfig, demos: &[Demonstration], vae: Option<&VaeModel>, exec: Exec, mut on_epoch: F) -> Result<(PolicyModel, PolicyReport)>
where
    F: FnMut(&LossRecord, &PolicyModel) -> Result<()>,
{
    let mut model = new_policy(cfg, demos, vae)?;
    if demos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = build_training_pairs(demos, cfg.l, cfg.n_shift, cfg.chunk, cfg.pad_start)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = prepare(&model, &pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let arch = model.arch;
            let parts = accumulate_sharded(exec, &mut model.params, batch.len(), |tape, store, r| {
                let l = batch_loss(tape, store, &arch, vae, &data, &batch[r])?;
                let v = tape.value(l).item();
                Ok((l, vec![v]))
            })?;
            model.params.scale_grads(1.0 / batch.len() as f64);
            model.params.adam_step(&adam);
            total += parts[0];
        }
        let mean = total / pairs.len() as f64;
        let record = LossRecord {
            epoch,
            total: mean,
            recon: mean,
            hidden: 0.0,
            kl: 0.0,
        };
        log.push(record);
        on_epoch(&record, &model)?;
    }
    Ok((model, PolicyReport { log, pairs: pairs.len() }))
}
