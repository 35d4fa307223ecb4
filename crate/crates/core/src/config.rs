//! Whole-pipeline configuration, read from TOML.
//!
//! The top-level `seed` is copied into every component seed, so a single
//! value pins a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyMode};
use crate::rollout::{EvalSpec, Grid, PriorSpec, RolloutConfig, TaskSpec};
use crate::signal::KalmanParams;
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root under which each run gets a directory named by config digest.
    pub runs_dir: PathBuf,
    /// Hand description; the built-in model when absent.
    pub hand_model: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            hand_model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task_demos: usize,
    pub prior_demos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task_demos: 15,
            prior_demos: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Moving-average window (odd); 1 leaves the data unchanged.
    pub smooth_window: usize,
    /// Align all demos to the median-length one.
    pub dtw: bool,
    /// Filter human wrist positions before retargeting.
    pub kalman: bool,
    pub kalman_params: KalmanParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            smooth_window: 5,
            dtw: false,
            kalman: true,
            kalman_params: KalmanParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub methods: Vec<PolicyMode>,
    /// Noise settings to compare; `true` uses the rollout noise magnitudes.
    pub noise: Vec<bool>,
    /// Number of rollout seeds, counted up from the run seed.
    pub seeds: usize,
    pub grid: Grid,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            methods: vec![PolicyMode::Latent, PolicyMode::Direct],
            noise: vec![false, true],
            seeds: 5,
            grid: Grid::Epochs(vec![500]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub task: TaskSpec,
    pub prior: PriorSpec,
    pub preprocess: PreprocessConfig,
    pub vae: VaeConfig,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.vae.seed = seed;
        self.policy.seed = seed;
        self.rollout.seed = seed;
    }

    /// Short content hash of the effective configuration; names run
    /// directories.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.runs_dir.join(self.digest())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.prior.validate()?;
        self.vae.validate()?;
        self.policy.validate()?;
        self.rollout.validate()?;
        let p = &self.policy;
        let r = &self.rollout;
        if (p.l, p.n_shift, p.chunk) != (r.l, r.n_shift, r.chunk) {
            return Err(Error::Config(format!(
                "policy (l, n_shift, chunk) = ({}, {}, {}) but rollout has ({}, {}, {})",
                p.l, p.n_shift, p.chunk, r.l, r.n_shift, r.chunk
            )));
        }
        if p.mode == PolicyMode::Latent && self.vae.n != p.chunk {
            return Err(Error::IncompatibleVae(format!("policy chunk is {} frames, VAE decodes {}", p.chunk, self.vae.n)));
        }
        let w = self.preprocess.smooth_window;
        if w == 0 || w % 2 == 0 {
            return Err(Error::Config(format!("preprocess.smooth_window must be odd and positive, got {w}")));
        }
        Ok(())
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            methods: self.evaluate.methods.clone(),
            noise: self.evaluate.noise.clone(),
            seeds: (0..self.evaluate.seeds as u64).map(|k| self.seed + k).collect(),
            grid: self.evaluate.grid.clone(),
            policy: self.policy.clone(),
            rollout: self.rollout.clone(),
            noise_spec: self.rollout.noise,
            task: self.task.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn seed_threads_everywhere_and_changes_the_digest() {
        let c = RunConfig::from_toml_str("seed = 7\n[policy]\nepochs = 3\n").unwrap();
        assert_eq!((c.vae.seed, c.policy.seed, c.rollout.seed), (7, 7, 7));
        assert_eq!(c.policy.epochs, 3);
        assert_ne!(c.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_keys_and_bad_geometry_are_config_errors() {
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[vae]\nhiden = 3"), Err(Error::Config(_))));
        let c = RunConfig::from_toml_str("[rollout]\nhorizon = 10\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::HorizonViolation { .. })));
        let c = RunConfig::from_toml_str("[policy]\nchunk = 12\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_and_methods_parse() {
        let c = RunConfig::from_toml_str(
            "[evaluate]\nmethods = [\"direct\"]\nnoise = [true]\nseeds = 2\ngrid = { kind = \"demos\", values = [5, 10] }\n",
        )
        .unwrap();
        let s = c.eval_spec();
        assert_eq!(s.methods, vec![PolicyMode::Direct]);
        assert_eq!(s.grid, Grid::Demos(vec![5, 10]));
        assert_eq!(s.seeds, vec![0, 1]);
    }
}
