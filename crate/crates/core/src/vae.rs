//! Subtrajectory VAE: LSTM encoder, MLP bottleneck to a Gaussian latent,
//! MLP back to an initial hidden state, and a state-only LSTM decoder
//! unrolled for N steps.
//!
//! All network math happens in normalized channel space; the per-channel
//! affine normalization is part of the model and is stored with it.

use std::collections::BTreeMap;
use std::path::Path;

use nn::functional::{gaussian_sample, kl_standard_normal, lstm_sequence, zeros_state};
use nn::{AdamConfig, Bind, Checkpoint, Linear, Lstm, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{sha256_hex, Demonstration};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::state::STATE_DIM;
use crate::train::{accumulate_sharded, LossRecord};

pub type Frame = [f64; STATE_DIM];

/// Channels whose spread falls below this are scaled by it instead.
pub const STD_FLOOR: f64 = 1e-3;
pub const CHECKPOINT_KIND: &str = "vae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Subtrajectory length in frames.
    pub n: usize,
    /// Latent dimension.
    pub d: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    /// Width of the single tanh layer in each bottleneck MLP.
    pub mlp_hidden: usize,
    /// KL weight.
    pub gamma: f64,
    pub lr: f64,
    /// Learning rate reached at the last epoch, decaying geometrically from
    /// `lr`. Constant when absent.
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub stride: usize,
    pub seed: u64,
    /// Trailing fraction of the demos held out for reconstruction checks.
    pub holdout_fraction: f64,
    /// Stop once the held-out per-element MSE falls below this.
    pub stop_mse: Option<f64>,
    /// Held-out evaluation cadence in epochs.
    pub eval_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            n: 15,
            d: 20,
            hidden: 128,
            mlp_hidden: 128,
            gamma: 1e-3,
            lr: 1e-3,
            lr_final: None,
            batch_size: 64,
            epochs: 1000,
            stride: 3,
            seed: 0,
            holdout_fraction: 0.1,
            stop_mse: None,
            eval_every: 1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vae: {m}")));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.d < 1 {
            return bad("d must be at least 1".into());
        }
        if self.hidden < self.d {
            return bad(format!("hidden ({}) must be at least d ({})", self.hidden, self.d));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("lr_final must be positive, got {f}"));
            }
        }
        if self.batch_size == 0 || self.stride == 0 || self.eval_every == 0 {
            return bad("batch_size, stride and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        Ok(())
    }

    pub fn arch(&self) -> VaeArch {
        VaeArch {
            n: self.n,
            d: self.d,
            hidden: self.hidden,
            mlp_hidden: self.mlp_hidden,
            gamma: self.gamma,
        }
    }
}

/// Shape-defining part of the configuration, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeArch {
    pub n: usize,
    pub d: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subtrajectory {
    pub frames: Vec<Frame>,
    pub demo_id: String,
    pub start: usize,
}

/// Sliding windows of length `n` every `stride` frames. Returns the windows
/// and the number of demos too short to yield one.
pub fn sample_subtrajectories(demos: &[Demonstration], n: usize, stride: usize) -> (Vec<Subtrajectory>, usize) {
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut skipped = 0;
    for d in demos {
        if d.len() < n || n == 0 {
            skipped += 1;
            continue;
        }
        let rows: Vec<Frame> = d.states.iter().map(|s| s.to_array()).collect();
        for start in (0..=d.len() - n).step_by(stride) {
            out.push(Subtrajectory {
                frames: rows[start..start + n].to_vec(),
                demo_id: d.id.clone(),
                start,
            });
        }
    }
    (out, skipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; STATE_DIM],
            std: vec![1.0; STATE_DIM],
        }
    }

    /// Per-channel mean and standard deviation over every frame.
    pub fn fit(demos: &[Demonstration]) -> Self {
        let rows: Vec<Frame> = demos.iter().flat_map(|d| d.states.iter().map(|s| s.to_array())).collect();
        if rows.is_empty() {
            return Self::identity();
        }
        Self::fit_rows(rows.iter().map(|r| r.as_slice()), STATE_DIM)
    }

    /// Statistics of arbitrary `dim`-wide rows; spreads are floored at
    /// [`STD_FLOOR`]. No rows gives zero mean and unit spread.
    pub fn fit_rows<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
            count += 1;
        }
        if count == 0 {
            return Self {
                mean: vec![0.0; dim],
                std: vec![1.0; dim],
            };
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for (k, v) in r.iter().enumerate() {
                var[k] += (v - mean[k]) * (v - mean[k]);
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, f: &Frame) -> Frame {
        let mut out = [0.0; STATE_DIM];
        for k in 0..STATE_DIM {
            out[k] = (f[k] - self.mean[k]) / self.std[k];
        }
        out
    }

    pub fn invert(&self, f: &Frame) -> Frame {
        let mut out = [0.0; STATE_DIM];
        for k in 0..STATE_DIM {
            out[k] = f[k] * self.std[k] + self.mean[k];
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_dim(STATE_DIM)
    }

    pub fn validate_dim(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.mean.len().min(self.std.len()),
            });
        }
        if !self.mean.iter().all(|v| v.is_finite()) || !self.std.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvariantViolation("normalization statistics must be finite with positive spread".into()));
        }
        Ok(())
    }
}

struct Layers {
    enc_lstm: Lstm,
    enc_fc: Linear,
    enc_mean: Linear,
    enc_logvar: Linear,
    dec_fc: Linear,
    dec_hidden: Linear,
    dec_lstm: Lstm,
    dec_out: Linear,
}

impl Layers {
    fn new(a: &VaeArch) -> Self {
        Self {
            enc_lstm: Lstm::new("enc.lstm", STATE_DIM, a.hidden),
            enc_fc: Linear::new("enc.fc", a.hidden, a.mlp_hidden),
            enc_mean: Linear::new("enc.mean", a.mlp_hidden, a.d),
            enc_logvar: Linear::new("enc.logvar", a.mlp_hidden, a.d),
            dec_fc: Linear::new("dec.fc", a.d, a.mlp_hidden),
            dec_hidden: Linear::new("dec.hidden", a.mlp_hidden, a.hidden),
            dec_lstm: Lstm::new("dec.lstm", 0, a.hidden),
            dec_out: Linear::new("dec.out", a.hidden, STATE_DIM),
        }
    }
}

/// Fresh parameters for `arch`.
pub fn init_params<R: Rng + ?Sized>(arch: &VaeArch, rng: &mut R) -> Result<ParamStore> {
    let l = Layers::new(arch);
    let mut s = ParamStore::new();
    l.enc_lstm.init(&mut s, rng)?;
    l.enc_fc.init(&mut s, rng)?;
    l.enc_mean.init(&mut s, rng)?;
    l.enc_logvar.init(&mut s, rng)?;
    l.dec_fc.init(&mut s, rng)?;
    l.dec_hidden.init(&mut s, rng)?;
    l.dec_lstm.init(&mut s, rng)?;
    l.dec_out.init(&mut s, rng)?;
    Ok(s)
}

pub struct EncoderOut {
    pub h: Var,
    pub mean: Var,
    pub log_var: Var,
}

/// Encoder on `x`: `[batch * n, 25]` normalized rows, row `b * n + t`.
pub fn encoder_tape(tape: &mut Tape, store: &ParamStore, arch: &VaeArch, x: Var, batch: usize, mode: Bind) -> nn::Result<EncoderOut> {
    let l = Layers::new(arch);
    let lstm = l.enc_lstm.bind(tape, store, mode)?;
    let h0 = zeros_state(tape, batch, arch.hidden)?;
    let c0 = zeros_state(tape, batch, arch.hidden)?;
    let out = lstm_sequence(tape, Some(x), arch.n, h0, c0, &lstm)?;
    let fc = l.enc_fc.bind(tape, store, mode)?.forward(tape, out.h)?;
    let fc = tape.tanh(fc)?;
    let mean = l.enc_mean.bind(tape, store, mode)?.forward(tape, fc)?;
    let log_var = l.enc_logvar.bind(tape, store, mode)?.forward(tape, fc)?;
    Ok(EncoderOut { h: out.h, mean, log_var })
}

pub struct DecoderOut {
    pub h_hat: Var,
    /// `[batch * n, 25]` normalized rows, row `b * n + t`.
    pub frames: Var,
}

/// Decoder on `z`: `[batch, d]`. The LSTM starts from `h_hat` with a zero
/// cell state and receives no inputs.
pub fn decoder_tape(tape: &mut Tape, store: &ParamStore, arch: &VaeArch, z: Var, batch: usize, mode: Bind) -> nn::Result<DecoderOut> {
    let l = Layers::new(arch);
    let fc = l.dec_fc.bind(tape, store, mode)?.forward(tape, z)?;
    let fc = tape.tanh(fc)?;
    let h_hat = l.dec_hidden.bind(tape, store, mode)?.forward(tape, fc)?;
    let c0 = zeros_state(tape, batch, arch.hidden)?;
    let lstm = l.dec_lstm.bind(tape, store, mode)?;
    let out = lstm_sequence(tape, None, arch.n, h_hat, c0, &lstm)?;
    let frames = l.dec_out.bind(tape, store, mode)?.forward(tape, out.hidden_states)?;
    Ok(DecoderOut { h_hat, frames })
}

pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub hidden: Var,
    pub kl: Var,
}

/// Batch loss summed over samples: `|x - x_hat|^2 + |h - h_hat|^2 + gamma KL`.
/// `x` is `[batch * n, 25]` normalized, `noise` is `[batch, d]`.
pub fn vae_loss_tape(tape: &mut Tape, store: &ParamStore, arch: &VaeArch, x: &Tensor, noise: &Tensor, gamma: f64) -> nn::Result<LossVars> {
    let batch = noise.shape()[0];
    let xv = tape.constant(x.clone())?;
    let enc = encoder_tape(tape, store, arch, xv, batch, Bind::Train)?;
    let eps = tape.constant(noise.clone())?;
    let z = gaussian_sample(tape, enc.mean, enc.log_var, eps)?;
    let dec = decoder_tape(tape, store, arch, z, batch, Bind::Train)?;
    let dx = tape.sub(dec.frames, xv)?;
    let recon = tape.sum_squares(dx)?;
    let dh = tape.sub(enc.h, dec.h_hat)?;
    let hidden = tape.sum_squares(dh)?;
    let kl = kl_standard_normal(tape, enc.mean, enc.log_var)?;
    let a = tape.add(recon, hidden)?;
    let wkl = tape.scale(kl, gamma)?;
    let total = tape.add(a, wkl)?;
    Ok(LossVars { total, recon, hidden, kl })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub hidden: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub norm: Normalization,
    pub params: ParamStore,
    pub seed: u64,
}

fn stack_windows<'a>(norm: &Normalization, windows: impl Iterator<Item = &'a [Frame]>, n: usize) -> Result<(Tensor, usize)> {
    let mut data = Vec::new();
    let mut batch = 0;
    for w in windows {
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w.len() });
        }
        for f in w {
            data.extend_from_slice(&norm.apply(f));
        }
        batch += 1;
    }
    Ok((Tensor::new(&[batch * n, STATE_DIM], data)?, batch))
}

fn rows_of(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width).map(|c| c.to_vec()).collect()
}

impl VaeModel {
    pub fn new(arch: VaeArch, norm: Normalization, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            arch,
            norm,
            params: init_params(&arch, &mut rng)?,
            seed,
        })
    }

    /// Posterior means and log-variances for a batch of windows.
    pub fn encode_batch(&self, windows: &[&[Frame]]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let (x, batch) = stack_windows(&self.norm, windows.iter().copied(), self.arch.n)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let enc = encoder_tape(&mut tape, &self.params, &self.arch, xv, batch, Bind::Frozen)?;
        let means = rows_of(tape.value(enc.mean), self.arch.d);
        let lvs = rows_of(tape.value(enc.log_var), self.arch.d);
        Ok(means.into_iter().zip(lvs).collect())
    }

    pub fn encode(&self, window: &[Frame]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(self.encode_batch(&[window])?.remove(0))
    }

    /// Decodes latent vectors to windows in normalized space.
    pub fn decode_normalized_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<Frame>>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(zs.len() * self.arch.d);
        for z in zs {
            if z.len() != self.arch.d {
                return Err(Error::DimensionMismatch { expected: self.arch.d, got: z.len() });
            }
            data.extend_from_slice(z);
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(&[zs.len(), self.arch.d], data)?)?;
        let dec = decoder_tape(&mut tape, &self.params, &self.arch, zv, zs.len(), Bind::Frozen)?;
        let flat = tape.value(dec.frames).data();
        Ok(flat
            .chunks(self.arch.n * STATE_DIM)
            .map(|w| w.chunks(STATE_DIM).map(|r| r.try_into().expect("row width")).collect())
            .collect())
    }

    /// Decodes latent vectors to windows in state units.
    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<Frame>>> {
        Ok(self
            .decode_normalized_batch(zs)?
            .into_iter()
            .map(|w| w.iter().map(|f| self.norm.invert(f)).collect())
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<Frame>> {
        Ok(self.decode_batch(&[z.to_vec()])?.remove(0))
    }

    /// Loss of one window under a fixed reparameterization noise draw.
    pub fn loss(&self, window: &[Frame], noise: &[f64], gamma: f64) -> Result<VaeLoss> {
        let (x, _) = stack_windows(&self.norm, std::iter::once(window), self.arch.n)?;
        let eps = Tensor::new(&[1, self.arch.d], noise.to_vec())?;
        let mut tape = Tape::new();
        let l = vae_loss_tape(&mut tape, &self.params, &self.arch, &x, &eps, gamma)?;
        Ok(VaeLoss {
            total: tape.value(l.total).item(),
            recon: tape.value(l.recon).item(),
            hidden: tape.value(l.hidden).item(),
            kl: tape.value(l.kl).item(),
        })
    }

    /// Per-element MSE in normalized space of mean-latent reconstructions.
    pub fn reconstruction_mse(&self, windows: &[Subtrajectory]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sse = 0.0;
        for chunk in windows.chunks(256) {
            let refs: Vec<&[Frame]> = chunk.iter().map(|w| w.frames.as_slice()).collect();
            let means: Vec<Vec<f64>> = self.encode_batch(&refs)?.into_iter().map(|(m, _)| m).collect();
            let rec = self.decode_normalized_batch(&means)?;
            for (w, r) in chunk.iter().zip(rec) {
                for (f, g) in w.frames.iter().zip(r) {
                    let f = self.norm.apply(f);
                    sse += f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
            }
        }
        Ok(sse / (windows.len() * self.arch.n * STATE_DIM) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        let json = |v: &[f64]| serde_json::to_string(v).expect("finite floats");
        meta.insert("kind".into(), CHECKPOINT_KIND.into());
        meta.insert("n".into(), self.arch.n.to_string());
        meta.insert("d".into(), self.arch.d.to_string());
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        meta.insert("mlp_hidden".into(), self.arch.mlp_hidden.to_string());
        meta.insert("gamma".into(), json(&[self.arch.gamma]));
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("norm_mean".into(), json(&self.norm.mean));
        meta.insert("norm_std".into(), json(&self.norm.std));
        let mut ck = Checkpoint::new(self.params.values_only());
        ck.metadata = meta;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.metadata;
        let get = |k: &str| m.get(k).ok_or_else(|| Error::IncompatibleVae(format!("checkpoint metadata lacks `{k}`")));
        if get("kind")? != CHECKPOINT_KIND {
            return Err(Error::IncompatibleVae(format!("checkpoint kind is `{}`, not `{CHECKPOINT_KIND}`", get("kind")?)));
        }
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::IncompatibleVae(format!("bad `{k}`"))) };
        let floats = |k: &str| -> Result<Vec<f64>> { serde_json::from_str(get(k)?).map_err(|_| Error::IncompatibleVae(format!("bad `{k}`"))) };
        let gamma = floats("gamma")?;
        let arch = VaeArch {
            n: int("n")?,
            d: int("d")?,
            hidden: int("hidden")?,
            mlp_hidden: int("mlp_hidden")?,
            gamma: *gamma.first().ok_or_else(|| Error::IncompatibleVae("bad `gamma`".into()))?,
        };
        let norm = Normalization {
            mean: floats("norm_mean")?,
            std: floats("norm_std")?,
        };
        norm.validate()?;
        let seed = get("seed")?.parse().map_err(|_| Error::IncompatibleVae("bad `seed`".into()))?;
        let expected = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, e) in expected.iter() {
            let got = ck.params.value(name).map_err(|_| Error::IncompatibleVae(format!("missing tensor `{name}`")))?;
            if got.shape() != e.value.shape() {
                return Err(Error::IncompatibleVae(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), e.value.shape())));
            }
        }
        if ck.params.len() != expected.len() {
            return Err(Error::IncompatibleVae("unexpected extra tensors".into()));
        }
        Ok(Self {
            arch,
            norm,
            params: ck.params.values_only(),
            seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_checkpoint().to_bytes()?)
    }

    /// Content digest of the inference checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub record: LossRecord,
    pub holdout_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    /// `(epoch, per-element MSE)` at each evaluation.
    pub holdout: Vec<(usize, f64)>,
    pub stopped_early: bool,
    pub windows: usize,
    pub holdout_windows: usize,
    pub skipped_demos: usize,
}

impl TrainReport {
    pub fn final_holdout_mse(&self) -> Option<f64> {
        self.holdout.last().map(|(_, v)| *v)
    }
}

/// Splits off the trailing `fraction` of demos (at least one when the
/// fraction is positive and more than one demo exists).
pub fn holdout_split(demos: &[Demonstration], fraction: f64) -> (&[Demonstration], &[Demonstration]) {
    if fraction <= 0.0 || demos.len() < 2 {
        return (demos, &[]);
    }
    let k = ((demos.len() as f64 * fraction).ceil() as usize).clamp(1, demos.len() - 1);
    demos.split_at(demos.len() - k)
}

pub fn train_vae(cfg: &VaeConfig, demos: &[Demonstration], exec: Exec) -> Result<(VaeModel, TrainReport)> {
    train_vae_with(cfg, demos, exec, |_, _| Ok(()))
}

/// Mini-batch Adam on sampled windows. `on_epoch` runs after every epoch
/// with the current model.
pub fn train_vae_with<F>(cfg: &VaeConfig, demos: &[Demonstration], exec: Exec, mut on_epoch: F) -> Result<(VaeModel, TrainReport)>
where
    F: FnMut(&EpochReport, &VaeModel) -> Result<()>,
{
    cfg.validate()?;
    let (train, held) = holdout_split(demos, cfg.holdout_fraction);
    let (windows, skipped) = sample_subtrajectories(train, cfg.n, cfg.stride);
    let (holdout, skipped_held) = sample_subtrajectories(held, cfg.n, cfg.stride);
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = cfg.arch();
    let mut model = VaeModel::new(arch, Normalization::fit(train), cfg.seed)?;
    let xs: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| w.frames.iter().flat_map(|f| model.norm.apply(f)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut report = TrainReport {
        log: Vec::new(),
        holdout: Vec::new(),
        stopped_early: false,
        windows: windows.len(),
        holdout_windows: holdout.len(),
        skipped_demos: skipped + skipped_held,
    };
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let row = cfg.n * STATE_DIM;
    for epoch in 1..=cfg.epochs {
        adam.lr = epoch_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let noise: Vec<f64> = (0..batch.len() * cfg.d).map(|_| rng.sample(StandardNormal)).collect();
            let parts = accumulate_sharded(exec, &mut model.params, batch.len(), |tape, store, r| {
                let mut x = Vec::with_capacity(r.len() * row);
                for &i in &batch[r.clone()] {
                    x.extend_from_slice(&xs[i]);
                }
                let x = Tensor::new(&[r.len() * cfg.n, STATE_DIM], x)?;
                let eps = Tensor::new(&[r.len(), cfg.d], noise[r.start * cfg.d..r.end * cfg.d].to_vec())?;
                let l = vae_loss_tape(tape, store, &arch, &x, &eps, cfg.gamma)?;
                let v = |var| tape.value(var).item();
                let aux = vec![v(l.total), v(l.recon), v(l.hidden), v(l.kl)];
                Ok((l.total, aux))
            })?;
            model.params.scale_grads(1.0 / batch.len() as f64);
            model.params.adam_step(&adam);
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        let w = windows.len() as f64;
        let record = LossRecord {
            epoch,
            total: sums[0] / w,
            recon: sums[1] / w,
            hidden: sums[2] / w,
            kl: sums[3] / w,
        };
        report.log.push(record);
        let evaluate = !holdout.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let holdout_mse = if evaluate { Some(model.reconstruction_mse(&holdout)?) } else { None };
        if let Some(m) = holdout_mse {
            report.holdout.push((epoch, m));
        }
        on_epoch(&EpochReport { record, holdout_mse }, &model)?;
        if let (Some(m), Some(stop)) = (holdout_mse, cfg.stop_mse) {
            if m < stop {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((model, report))
}

/// Geometric interpolation from `lr` at epoch 1 to `lr_final` at `epochs`.
pub fn epoch_lr(lr: f64, lr_final: Option<f64>, epoch: usize, epochs: usize) -> f64 {
    match lr_final {
        Some(f) if epochs > 1 => lr * (f / lr).powf((epoch - 1) as f64 / (epochs - 1) as f64),
        _ => lr,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub n: usize,
    pub d: usize,
    /// Held-out per-element MSE, or training-window MSE without a holdout.
    pub recon_mse: f64,
    pub epochs: usize,
}

/// Trains one model per `(n, d)` pair with the template's seed and budget.
/// The hidden width is raised to `d` where needed.
/// Cells run through `exec`; rows come back in grid order.
pub fn hyperparameter_grid(template: &VaeConfig, ns: &[usize], ds: &[usize], demos: &[Demonstration], exec: Exec) -> Result<Vec<GridCell>> {
    if ns.is_empty() || ds.is_empty() {
        return Err(Error::Config("vae grid: N and D value lists must be non-empty".into()));
    }
    let cells: Vec<(usize, usize)> = ns.iter().flat_map(|&n| ds.iter().map(move |&d| (n, d))).collect();
    exec.try_map(&cells, |&(n, d)| {
        let cfg = VaeConfig {
            n,
            d,
            hidden: template.hidden.max(d),
            ..template.clone()
        };
        let (model, report) = train_vae(&cfg, demos, Exec::Sequential)?;
        let recon_mse = match report.final_holdout_mse() {
            Some(m) => m,
            None => {
                let (train, _) = holdout_split(demos, cfg.holdout_fraction);
                model.reconstruction_mse(&sample_subtrajectories(train, n, cfg.stride).0)?
            }
        };
        Ok(GridCell {
            n,
            d,
            recon_mse,
            epochs: report.log.len(),
        })
    })
}

pub fn grid_to_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("n,d,recon_mse,epochs\n");
    for c in cells {
        s.push_str(&format!("{},{},{:?},{}\n", c.n, c.d, c.recon_mse, c.epochs));
    }
    s
}

/// Rebuilds a sequence from decoded stride-1 windows: every frame of the
/// first window, then the last frame of each later one.
pub fn stitch(windows: &[Vec<Frame>]) -> Vec<Frame> {
    let mut out = Vec::new();
    if let Some(first) = windows.first() {
        out.extend_from_slice(first);
        for w in &windows[1..] {
            if let Some(last) = w.last() {
                out.push(*last);
            }
        }
    }
    out
}

fn stride_one_windows(model: &VaeModel, demo: &Demonstration) -> Result<Vec<Subtrajectory>> {
    if demo.len() < model.arch.n {
        return Err(Error::DemoTooShort {
            len: demo.len(),
            needed: model.arch.n,
        });
    }
    Ok(sample_subtrajectories(std::slice::from_ref(demo), model.arch.n, 1).0)
}

/// Encodes every stride-1 window to its mean, decodes and stitches.
pub fn reconstruct_demo(model: &VaeModel, demo: &Demonstration) -> Result<Vec<Frame>> {
    let path = latent_path(model, demo)?;
    let mut decoded = Vec::with_capacity(path.len());
    for chunk in path.chunks(256) {
        decoded.extend(model.decode_batch(chunk)?);
    }
    Ok(stitch(&decoded))
}

/// Mean latent codes of consecutive stride-1 windows.
pub fn latent_path(model: &VaeModel, demo: &Demonstration) -> Result<Vec<Vec<f64>>> {
    let windows = stride_one_windows(model, demo)?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let refs: Vec<&[Frame]> = chunk.iter().map(|w| w.frames.as_slice()).collect();
        out.extend(model.encode_batch(&refs)?.into_iter().map(|(m, _)| m));
    }
    Ok(out)
}

/// Largest consecutive latent step divided by the median step.
pub fn latent_jump_ratio(path: &[Vec<f64>]) -> Option<f64> {
    let mut steps: Vec<f64> = path
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    if steps.is_empty() {
        return None;
    }
    let max = steps.iter().cloned().fold(0.0, f64::max);
    steps.sort_by(|a, b| a.total_cmp(b));
    let median = steps[(steps.len() - 1) / 2];
    (median > 0.0).then(|| max / median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::state::RobotState;
    use nn::gradcheck::check_params;

    fn demo(len: usize, f: impl Fn(usize) -> f64) -> Demonstration {
        let states = (0..len)
            .map(|i| {
                let mut s = RobotState::new([f(i); 16], &Pose::identity());
                s.wrist_pos = [f(i) * 0.1, 0.2, 0.3];
                s
            })
            .collect();
        Demonstration::uniform(format!("d{len}"), 30.0, states, None)
    }

    fn tiny() -> VaeArch {
        VaeArch {
            n: 3,
            d: 2,
            hidden: 4,
            mlp_hidden: 5,
            gamma: 0.3,
        }
    }

    #[test]
    fn window_counts() {
        let (w, s) = sample_subtrajectories(&[demo(15, |_| 0.0)], 15, 1);
        assert_eq!((w.len(), s), (1, 0));
        let (w, _) = sample_subtrajectories(&[demo(30, |i| i as f64)], 15, 1);
        assert_eq!(w.len(), 16);
        assert_eq!(w[3].start, 3);
        assert_eq!(w[3].frames[0][0], 3.0);
        let (w, s) = sample_subtrajectories(&[demo(10, |_| 0.0)], 15, 1);
        assert_eq!((w.len(), s), (0, 1));
        let (w, _) = sample_subtrajectories(&[demo(30, |_| 0.0)], 15, 3);
        assert_eq!(w.len(), 6);
    }

    #[test]
    fn normalization_round_trips() {
        let d = demo(20, |i| (i as f64 * 0.3).sin());
        let n = Normalization::fit(&[d.clone()]);
        n.validate().unwrap();
        let f = d.states[7].to_array();
        let back = n.invert(&n.apply(&f));
        for k in 0..STATE_DIM {
            assert!((back[k] - f[k]).abs() < 1e-12);
        }
        // Constant channels fall back to the floor.
        assert_eq!(n.std[17], STD_FLOOR);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let arch = VaeArch {
            n: 15,
            d: 20,
            hidden: 32,
            mlp_hidden: 16,
            gamma: 1e-3,
        };
        let m = VaeModel::new(arch, Normalization::identity(), 3).unwrap();
        let d = demo(15, |i| i as f64 * 0.01);
        let w = &d.states.iter().map(|s| s.to_array()).collect::<Vec<_>>();
        let (mu, lv) = m.encode(w).unwrap();
        assert_eq!((mu.len(), lv.len()), (20, 20));
        assert_eq!(m.encode(w).unwrap(), (mu.clone(), lv));
        let out = m.decode(&mu).unwrap();
        assert_eq!(out.len(), 15);
        assert_eq!(m.decode(&mu).unwrap(), out);
        let mut w2 = w.clone();
        w2[0][0] += 0.5;
        assert_ne!(m.encode(&w2).unwrap().0, mu);
    }

    #[test]
    fn decoder_is_continuous() {
        let arch = tiny();
        let m = VaeModel::new(arch, Normalization::identity(), 4).unwrap();
        let z = vec![0.3, -0.7];
        let base = m.decode(&z).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let delta = 10f64.powi(-k);
            let moved = m.decode(&[z[0] + delta, z[1]]).unwrap();
            let diff = base.iter().flatten().zip(moved.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff / delta < 100.0);
            assert!(diff < prev);
            prev = diff;
        }
    }

    #[test]
    fn kl_examples() {
        let arch = tiny();
        let m = VaeModel::new(arch, Normalization::identity(), 1).unwrap();
        let w: Vec<Frame> = vec![[0.1; STATE_DIM]; 3];
        let l = m.loss(&w, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(l.total, l.recon + l.hidden);
        assert_eq!(nn::functional::kl_value(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(nn::functional::kl_value(&[1.0, 0.0], &[0.0, 0.0]), 0.5);
        let l2 = m.loss(&w, &[0.0, 0.0], 2.0).unwrap();
        assert!((l2.total - (l2.recon + l2.hidden + 2.0 * l2.kl)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = tiny();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let store = init_params(&arch, &mut rng).unwrap();
            let x = Tensor::uniform(&[2 * arch.n, STATE_DIM], 1.0, &mut rng);
            let eps = Tensor::uniform(&[2, arch.d], 1.0, &mut rng);
            let r = check_params(&store, 1e-6, |tape, s| Ok(vae_loss_tape(tape, s, &arch, &x, &eps, arch.gamma)?.total)).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {} at {}", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let d = demo(40, |i| (i as f64 * 0.2).cos());
        let arch = tiny();
        let m = VaeModel::new(arch, Normalization::fit(&[d]), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.ckpt");
        m.save(&p).unwrap();
        let back = VaeModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
        let mut ck = m.to_checkpoint();
        ck.metadata.insert("kind".into(), "policy".into());
        assert!(matches!(VaeModel::from_checkpoint(&ck), Err(Error::IncompatibleVae(_))));
    }

    #[test]
    fn training_is_seeded_and_executor_independent() {
        let demos: Vec<_> = (0..3).map(|k| demo(20, move |i| ((i + k) as f64 * 0.2).sin())).collect();
        let cfg = VaeConfig {
            n: 4,
            d: 2,
            hidden: 6,
            mlp_hidden: 6,
            epochs: 3,
            batch_size: 8,
            stride: 2,
            holdout_fraction: 0.3,
            seed: 5,
            ..VaeConfig::default()
        };
        let (ma, ra) = train_vae(&cfg, &demos, Exec::Parallel).unwrap();
        let (mb, rb) = train_vae(&cfg, &demos, Exec::Sequential).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ma, mb);
        assert_eq!(ra.log.len(), 3);
        assert_eq!(ra.holdout.len(), 3);
        assert!(ra.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let cfg = VaeConfig::default();
        assert!(matches!(train_vae(&cfg, &[demo(5, |_| 0.0)], Exec::Sequential), Err(Error::EmptyDataset)));
    }

    #[test]
    fn stitching_preserves_length() {
        let d = demo(25, |i| i as f64 * 0.01);
        let arch = VaeArch { n: 5, ..tiny() };
        let m = VaeModel::new(arch, Normalization::identity(), 2).unwrap();
        assert_eq!(reconstruct_demo(&m, &d).unwrap().len(), 25);
        let windows: Vec<Vec<Frame>> = (0..21).map(|s| (s..s + 5).map(|i| [i as f64; STATE_DIM]).collect()).collect();
        let st = stitch(&windows);
        assert_eq!(st.len(), 25);
        assert!(st.iter().enumerate().all(|(i, f)| f[0] == i as f64));
    }

    #[test]
    fn jump_ratio() {
        let path: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        assert_eq!(latent_jump_ratio(&path), Some(1.0));
        let mut jumpy = path.clone();
        jumpy[5][0] += 20.0;
        assert!(latent_jump_ratio(&jumpy).unwrap() > 5.0);
        assert_eq!(latent_jump_ratio(&path[..1]), None);
    }
}
