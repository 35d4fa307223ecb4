//! Paired latent-vs-direct comparison: train each method per grid cell, then
//! roll every trained policy out under the same seeds with noise off and on.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inference::{demo_world, run_inference, RolloutConfig};
use super::noise::NoiseSpec;
use super::synth::{sample_task_instance, TaskSpec};
use crate::dataset::Demonstration;
use crate::error::{Error, Result};
use crate::hand::HandModel;
use crate::par::Exec;
use crate::policy::{train_policy_with, PolicyConfig, PolicyMode, PolicyModel};
use crate::vae::VaeModel;

/// The axis the study sweeps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "values")]
pub enum Grid {
    /// Training epochs, read from snapshots of a single run per method.
    Epochs(Vec<usize>),
    /// Number of demonstrations (the first k of the set), each at the
    /// configured epoch budget.
    Demos(Vec<usize>),
}

impl Grid {
    pub fn cells(&self) -> &[usize] {
        match self {
            Grid::Epochs(v) | Grid::Demos(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub methods: Vec<PolicyMode>,
    /// Noise settings to run; `false` is noise-free.
    pub noise: Vec<bool>,
    /// Rollout seeds; every (method, noise, cell) uses all of them.
    pub seeds: Vec<u64>,
    pub grid: Grid,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    /// Noise magnitudes used when noise is on.
    pub noise_spec: NoiseSpec,
    /// Source of the per-seed object start pose.
    pub task: TaskSpec,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.noise.is_empty() || self.seeds.is_empty() || self.grid.cells().is_empty() {
            return Err(Error::Config("evaluate: methods, noise settings, seeds and grid must be non-empty".into()));
        }
        if self.grid.cells().contains(&0) {
            return Err(Error::Config("evaluate: grid cells must be positive".into()));
        }
        self.policy.validate()?;
        self.rollout.validate()?;
        self.task.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: PolicyMode,
    pub noise: bool,
    pub cell: usize,
    pub seed: u64,
    pub final_error_m: f64,
    pub success: bool,
    pub steps: usize,
}

pub const TABLE_HEADER: &str = "method,noise,cell,seed,final_error_m,success,steps";

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn table_to_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method.as_str(),
            on_off(r.noise),
            r.cell,
            r.seed,
            r.final_error_m,
            r.success,
            r.steps
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: PolicyMode,
    pub noise: bool,
    pub cell: usize,
    pub runs: usize,
    pub mean_error_m: f64,
    /// Population standard deviation over seeds.
    pub std_error_m: f64,
    pub success_rate: f64,
}

pub const SUMMARY_HEADER: &str = "method,noise,cell,runs,mean_error_m,std_error_m,success_rate";

/// Mean and spread per (method, noise, cell), in first-appearance order.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(PolicyMode, bool, usize)> = Vec::new();
    for r in rows {
        let k = (r.method, r.noise, r.cell);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, noise, cell)| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| (r.method, r.noise, r.cell) == (method, noise, cell)).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.final_error_m).sum::<f64>() / n;
            let var = sel.iter().map(|r| (r.final_error_m - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                method,
                noise,
                cell,
                runs: sel.len(),
                mean_error_m: mean,
                std_error_m: var.sqrt(),
                success_rate: sel.iter().filter(|r| r.success).count() as f64 / n,
            }
        })
        .collect()
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method.as_str(),
            on_off(r.noise),
            r.cell,
            r.runs,
            r.mean_error_m,
            r.std_error_m,
            r.success_rate
        );
    }
    s
}

/// Mean final error of one (method, noise) pair over every cell and seed.
pub fn mean_error(rows: &[EvalRow], method: PolicyMode, noise: bool) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.noise == noise).map(|r| r.final_error_m).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A trained policy for one (method, cell).
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub method: PolicyMode,
    pub cell: usize,
    pub model: PolicyModel,
    /// Demonstrations the model was trained on; they define the rollout
    /// start state and goal.
    pub demos: usize,
}

/// Trains every (method, cell) the grid needs. Jobs run concurrently.
pub fn train_cells(exec: Exec, spec: &EvalSpec, demos: &[Demonstration], vae: Option<&VaeModel>) -> Result<Vec<TrainedCell>> {
    spec.validate()?;
    match &spec.grid {
        Grid::Epochs(epochs) => {
            let max = *epochs.iter().max().expect("validated non-empty");
            let per_method = exec.try_map(&spec.methods, |&method| -> Result<Vec<TrainedCell>> {
                let cfg = PolicyConfig {
                    mode: method,
                    epochs: max,
                    ..spec.policy.clone()
                };
                let mut snaps = Vec::new();
                train_policy_with(&cfg, demos, vae, exec, |rec, m| {
                    if epochs.contains(&rec.epoch) {
                        snaps.push((rec.epoch, m.clone()));
                    }
                    Ok(())
                })?;
                Ok(epochs
                    .iter()
                    .map(|e| TrainedCell {
                        method,
                        cell: *e,
                        model: snaps.iter().find(|(k, _)| k == e).expect("snapshot per grid epoch").1.clone(),
                        demos: demos.len(),
                    })
                    .collect())
            })?;
            Ok(per_method.into_iter().flatten().collect())
        }
        Grid::Demos(counts) => {
            if let Some(c) = counts.iter().find(|c| **c > demos.len()) {
                return Err(Error::Config(format!("evaluate: grid asks for {c} demos, only {} available", demos.len())));
            }
            let jobs: Vec<(PolicyMode, usize)> = spec.methods.iter().flat_map(|m| counts.iter().map(move |c| (*m, *c))).collect();
            exec.try_map(&jobs, |&(method, count)| {
                let cfg = PolicyConfig {
                    mode: method,
                    ..spec.policy.clone()
                };
                let (model, _) = train_policy_with(&cfg, &demos[..count], vae, exec, |_, _| Ok(()))?;
                Ok(TrainedCell {
                    method,
                    cell: count,
                    model,
                    demos: count,
                })
            })
        }
    }
}

/// Runs every trained cell under every noise setting and seed. Rows come out
/// ordered by method, noise, cell, seed.
pub fn rollout_cells(exec: Exec, spec: &EvalSpec, cells: &[TrainedCell], demos: &[Demonstration], vae: Option<&VaeModel>, model: &HandModel) -> Result<Vec<EvalRow>> {
    let mut jobs = Vec::new();
    for &method in &spec.methods {
        for &noise in &spec.noise {
            for cell in cells.iter().filter(|c| c.method == method) {
                for &seed in &spec.seeds {
                    jobs.push((cell, noise, seed));
                }
            }
        }
    }
    exec.try_map(&jobs, |&(cell, noise, seed)| {
        let inst = sample_task_instance(&spec.task, &mut ChaCha8Rng::seed_from_u64(seed));
        let world = demo_world(&demos[..cell.demos], inst.object)?;
        let cfg = RolloutConfig {
            noise: NoiseSpec {
                enabled: noise,
                ..spec.noise_spec
            },
            seed,
            ..spec.rollout.clone()
        };
        let r = run_inference(&cell.model, vae, world, model, &cfg)?;
        Ok(EvalRow {
            method: cell.method,
            noise,
            cell: cell.cell,
            seed,
            final_error_m: r.final_error_m,
            success: r.success,
            steps: r.steps,
        })
    })
}

/// Trains and evaluates the full study.
pub fn evaluate(exec: Exec, spec: &EvalSpec, demos: &[Demonstration], vae: Option<&VaeModel>, model: &HandModel) -> Result<Vec<EvalRow>> {
    let cells = train_cells(exec, spec, demos, vae)?;
    rollout_cells(exec, spec, &cells, demos, vae, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::synth::generate_task_demos;
    use crate::vae::{Normalization, VaeArch};

    fn spec(grid: Grid) -> EvalSpec {
        EvalSpec {
            methods: vec![PolicyMode::Latent, PolicyMode::Direct],
            noise: vec![false, true],
            seeds: vec![0, 1],
            grid,
            policy: PolicyConfig {
                width: 8,
                heads: 2,
                layers: 1,
                epochs: 1,
                batch_size: 64,
                ..PolicyConfig::default()
            },
            rollout: RolloutConfig {
                max_steps: 12,
                ..RolloutConfig::default()
            },
            noise_spec: NoiseSpec::on(),
            task: TaskSpec::default(),
        }
    }

    fn setup() -> (HandModel, Vec<Demonstration>, VaeModel) {
        let model = HandModel::default_model();
        let demos = generate_task_demos(Exec::Sequential, &model, &TaskSpec::default(), 2, 5).unwrap();
        let arch = VaeArch {
            n: 15,
            d: 3,
            hidden: 4,
            mlp_hidden: 4,
            gamma: 1e-3,
        };
        let vae = VaeModel::new(arch, Normalization::fit(&demos), 0).unwrap();
        (model, demos, vae)
    }

    #[test]
    fn table_has_one_row_per_method_noise_cell_seed() {
        let (model, demos, vae) = setup();
        let s = spec(Grid::Epochs(vec![1]));
        let rows = evaluate(Exec::Parallel, &s, &demos, Some(&vae), &model).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert_eq!((rows[0].method, rows[0].noise, rows[0].seed), (PolicyMode::Latent, false, 0));
        assert_eq!((rows[7].method, rows[7].noise, rows[7].seed), (PolicyMode::Direct, true, 1));
        let csv = table_to_csv(&rows);
        assert!(csv.starts_with("method,noise,cell,seed,final_error_m,success,steps\n"));
        assert_eq!(csv.lines().count(), 9);
        let again = evaluate(Exec::Sequential, &s, &demos, Some(&vae), &model).unwrap();
        assert_eq!(table_to_csv(&again), csv);
        let sum = summarize(&rows);
        assert_eq!(sum.len(), 4);
        assert!(sum.iter().all(|r| r.runs == 2 && r.std_error_m >= 0.0));
    }

    #[test]
    fn single_cell_single_seed_gives_one_row() {
        let (model, demos, vae) = setup();
        let s = EvalSpec {
            methods: vec![PolicyMode::Direct],
            noise: vec![true],
            seeds: vec![3],
            ..spec(Grid::Demos(vec![1]))
        };
        let rows = evaluate(Exec::Sequential, &s, &demos, Some(&vae), &model).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].cell, rows[0].seed), (1, 3));
    }

    #[test]
    fn epoch_grid_snapshots_every_cell() {
        let (model, demos, vae) = setup();
        let s = EvalSpec {
            methods: vec![PolicyMode::Direct],
            seeds: vec![0],
            ..spec(Grid::Epochs(vec![1, 2]))
        };
        let cells = train_cells(Exec::Sequential, &s, &demos, Some(&vae)).unwrap();
        assert_eq!(cells.iter().map(|c| c.cell).collect::<Vec<_>>(), vec![1, 2]);
        assert_ne!(cells[0].model, cells[1].model);
        let rows = rollout_cells(Exec::Sequential, &s, &cells, &demos, Some(&vae), &model).unwrap();
        assert_eq!(rows.len(), 2 * 2);
    }

    #[test]
    fn bad_grids_are_rejected() {
        let (model, demos, vae) = setup();
        let too_many = spec(Grid::Demos(vec![3]));
        assert!(matches!(evaluate(Exec::Sequential, &too_many, &demos, Some(&vae), &model), Err(Error::Config(_))));
        let empty = EvalSpec { seeds: vec![], ..spec(Grid::Demos(vec![1])) };
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
    }
}
