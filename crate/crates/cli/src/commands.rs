use std::fs;
use std::path::{Path, PathBuf};

use dexlat::config::RunConfig;
use dexlat::dataset::{load_corpus, load_human_frames, save_human_frames, validate_corpus, write_corpus, CorpusRole};
use dexlat::hand::HandModel;
use dexlat::par::{with_jobs, Exec};
use dexlat::policy::{train_policy_with, PolicyMode, PolicyModel};
use dexlat::retarget::{frame_from_state, retarget_many};
use dexlat::rollout::{
    demo_world, evaluate, generate_prior_demos, generate_task_demos, run_inference, sample_task_instance, summarize, summary_to_csv, table_to_csv, write_trace, Grid,
};
use dexlat::signal::{kalman_filter_track, median_length_index, smooth_demo, warp_to_reference};
use dexlat::train::write_loss_log;
use dexlat::vae::{grid_to_csv, hyperparameter_grid, train_vae_with, VaeModel};
use dexlat::{Error, Result};
use nn::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::log;
use crate::{Cli, Command, Mode, OnOff, Role, WindowFlags};

struct Ctx {
    cfg: RunConfig,
    exec: Exec,
    run_dir: PathBuf,
    hand: HandModel,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn mode(m: Mode) -> PolicyMode {
    match m {
        Mode::Latent => PolicyMode::Latent,
        Mode::Direct => PolicyMode::Direct,
    }
}

fn apply_window(cfg: &mut RunConfig, w: &WindowFlags) {
    if let Some(l) = w.l {
        cfg.policy.l = l;
        cfg.rollout.l = l;
    }
    if let Some(n) = w.n_shift {
        cfg.policy.n_shift = n;
        cfg.rollout.n_shift = n;
    }
    if let Some(c) = w.chunk {
        cfg.policy.chunk = c;
        cfg.rollout.chunk = c;
    }
}

/// Folds command-line flags into the configuration so the run digest
/// reflects them.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::GenData { role, count: Some(c), .. } => match role {
            Role::Task => cfg.data.task_demos = *c,
            Role::Prior => cfg.data.prior_demos = *c,
        },
        Command::Retarget { no_kalman: true, .. } => cfg.preprocess.kalman = false,
        Command::Preprocess { window, dtw, .. } => {
            if let Some(w) = window {
                cfg.preprocess.smooth_window = *w;
            }
            cfg.preprocess.dtw |= *dtw;
        }
        Command::TrainVae { epochs, stop_mse, n, d, .. } => {
            if let Some(e) = epochs {
                cfg.vae.epochs = *e;
            }
            if stop_mse.is_some() {
                cfg.vae.stop_mse = *stop_mse;
            }
            if let Some(n) = n {
                cfg.vae.n = *n;
                cfg.policy.chunk = *n;
                cfg.rollout.chunk = *n;
            }
            if let Some(d) = d {
                cfg.vae.d = *d;
            }
        }
        Command::GridVae { epochs: Some(e), .. } => cfg.vae.epochs = *e,
        Command::TrainPolicy { mode: m, epochs, window, .. } => {
            if let Some(m) = m {
                cfg.policy.mode = mode(*m);
            }
            if let Some(e) = epochs {
                cfg.policy.epochs = *e;
            }
            apply_window(cfg, window);
        }
        Command::Rollout {
            horizon,
            window,
            noise,
            max_steps,
            ..
        } => {
            if let Some(h) = horizon {
                cfg.rollout.horizon = *h;
            }
            apply_window(cfg, window);
            if let Some(n) = noise {
                cfg.rollout.noise.enabled = *n == OnOff::On;
            }
            if let Some(m) = max_steps {
                cfg.rollout.max_steps = *m;
            }
        }
        Command::Evaluate {
            methods,
            noise,
            seeds,
            epochs_grid,
            demos_grid,
            ..
        } => {
            if !methods.is_empty() {
                cfg.evaluate.methods = methods.iter().map(|m| mode(*m)).collect();
            }
            if !noise.is_empty() {
                cfg.evaluate.noise = noise.iter().map(|n| *n == OnOff::On).collect();
            }
            if let Some(s) = seeds {
                cfg.evaluate.seeds = *s;
            }
            if !epochs_grid.is_empty() {
                cfg.evaluate.grid = Grid::Epochs(epochs_grid.clone());
            } else if !demos_grid.is_empty() {
                cfg.evaluate.grid = Grid::Demos(demos_grid.clone());
            }
        }
        _ => {}
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;
    if let Command::Inspect { checkpoint } = &cli.command {
        return inspect(checkpoint);
    }
    let hand = match &cfg.paths.hand_model {
        Some(p) => HandModel::load(p)?,
        None => HandModel::default_model(),
    };
    let run_dir = g.run_dir.clone().unwrap_or_else(|| cfg.run_dir());
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    log::event("start", json!({ "run_dir": run_dir.display().to_string(), "digest": cfg.digest(), "seed": cfg.seed }));
    let ctx = Ctx {
        cfg,
        exec: if g.sequential { Exec::Sequential } else { Exec::Parallel },
        run_dir,
        hand,
    };
    with_jobs(g.jobs, || dispatch(&ctx, cli.command))
}

fn dispatch(ctx: &Ctx, cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { role, human, out, .. } => gen_data(ctx, role, human, out),
        Command::Retarget { input, out, .. } => retarget(ctx, &input, out),
        Command::Preprocess { data, out, .. } => preprocess(ctx, &data, out),
        Command::TrainVae { data, out, .. } => train_vae_cmd(ctx, &data, out),
        Command::GridVae { data, ns, ds, .. } => grid_vae(ctx, &data, &ns, &ds),
        Command::TrainPolicy { data, vae, out, .. } => train_policy_cmd(ctx, &data, vae.as_deref(), out),
        Command::Rollout { policy, vae, data, .. } => rollout(ctx, policy.as_deref(), vae.as_deref(), data.as_deref()),
        Command::Evaluate { data, vae, .. } => evaluate_cmd(ctx, &data, vae.as_deref()),
        Command::Validate { data } => validate(data.as_deref()),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn gen_data(ctx: &Ctx, role: Role, human: bool, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (demos, corpus_role, name) = match role {
        Role::Task => (generate_task_demos(ctx.exec, &ctx.hand, &cfg.task, cfg.data.task_demos, cfg.seed)?, CorpusRole::Task, "task"),
        Role::Prior => (generate_prior_demos(ctx.exec, &ctx.hand, &cfg.prior, cfg.data.prior_demos, cfg.seed)?, CorpusRole::Prior, "prior"),
    };
    let dir = out.unwrap_or_else(|| ctx.run_dir.join("data").join(name));
    ensure_dir(&dir)?;
    write_corpus(&dir, &format!("{name}-{}", cfg.seed), corpus_role, &cfg.digest(), &demos)?;
    if human {
        for d in &demos {
            let frames = d
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut f = frame_from_state(&ctx.hand, s, d.times[i])?;
                    f.object = d.object_pose(i).copied();
                    Ok(f)
                })
                .collect::<Result<Vec<_>>>()?;
            save_human_frames(&frames, dir.join(format!("{}.human.jsonl", d.id)))?;
        }
    }
    let frames: usize = demos.iter().map(|d| d.len()).sum();
    log::event("gen-data", json!({ "role": name, "demos": demos.len(), "frames": frames, "out": dir.display().to_string() }));
    Ok(())
}

fn human_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".human.jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(files)
}

fn retarget(ctx: &Ctx, inputs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let mut recordings = Vec::new();
    for f in human_files(inputs)? {
        let mut frames = load_human_frames(&f)?;
        if ctx.cfg.preprocess.kalman {
            let times: Vec<f64> = frames.iter().map(|h| h.timestamp).collect();
            let pos: Vec<_> = frames.iter().map(|h| h.wrist.position).collect();
            let filtered = kalman_filter_track(&times, &pos, &ctx.cfg.preprocess.kalman_params)?;
            for (h, p) in frames.iter_mut().zip(filtered) {
                h.wrist.position = p;
            }
        }
        let name = f.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let id = name.trim_end_matches(".jsonl").trim_end_matches(".human").to_string();
        recordings.push((id, frames));
    }
    let mut demos = retarget_many(ctx.exec, &ctx.hand, &recordings)?;
    for d in &mut demos {
        if ctx.cfg.preprocess.kalman {
            d.provenance.preprocessing.insert(0, "kalman".into());
        }
        log::event(
            "retarget",
            json!({ "id": d.id, "frames": d.len(), "residual_mean_m": d.provenance.residual_mean_m, "residual_max_m": d.provenance.residual_max_m }),
        );
    }
    let dir = out.unwrap_or_else(|| ctx.path("data/retargeted"));
    ensure_dir(&dir)?;
    write_corpus(&dir, &format!("retargeted-{}", ctx.cfg.seed), CorpusRole::Task, &ctx.cfg.digest(), &demos)?;
    Ok(())
}

fn preprocess(ctx: &Ctx, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let (manifest, demos) = load_corpus(data)?;
    let w = ctx.cfg.preprocess.smooth_window;
    let mut demos = if w > 1 {
        demos.iter().map(|d| smooth_demo(d, w)).collect::<Result<Vec<_>>>()?
    } else {
        demos
    };
    if ctx.cfg.preprocess.dtw {
        let r = median_length_index(&demos).ok_or(Error::EmptyDataset)?;
        demos = warp_to_reference(&demos, r)?;
    }
    let dir = out.unwrap_or_else(|| ctx.path("data/preprocessed"));
    ensure_dir(&dir)?;
    write_corpus(&dir, &format!("{}-pre", manifest.corpus_id), manifest.role, &ctx.cfg.digest(), &demos)?;
    log::event("preprocess", json!({ "demos": demos.len(), "window": w, "dtw": ctx.cfg.preprocess.dtw }));
    Ok(())
}

fn train_vae_cmd(ctx: &Ctx, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let (_, demos) = load_corpus(data)?;
    let (model, report) = train_vae_with(&ctx.cfg.vae, &demos, ctx.exec, |e, _| {
        log::event(
            "vae-epoch",
            json!({ "epoch": e.record.epoch, "total": e.record.total, "recon": e.record.recon, "kl": e.record.kl, "holdout_mse": e.holdout_mse }),
        );
        Ok(())
    })?;
    let path = out.unwrap_or_else(|| ctx.path("vae.ckpt"));
    model.save(&path)?;
    write_loss_log(ctx.path("vae_loss.csv"), &report.log)?;
    log::event(
        "train-vae",
        json!({ "checkpoint": path.display().to_string(), "epochs": report.log.len(), "holdout_mse": report.final_holdout_mse(), "windows": report.windows }),
    );
    Ok(())
}

fn grid_vae(ctx: &Ctx, data: &Path, ns: &[usize], ds: &[usize]) -> Result<()> {
    let (_, demos) = load_corpus(data)?;
    let cells = hyperparameter_grid(&ctx.cfg.vae, ns, ds, &demos, ctx.exec)?;
    write_text(&ctx.path("grid.csv"), &grid_to_csv(&cells))?;
    log::event("grid-vae", json!({ "cells": cells.len() }));
    Ok(())
}

fn load_vae(path: Option<&Path>, needed: bool) -> Result<Option<VaeModel>> {
    match path {
        Some(p) => Ok(Some(VaeModel::load(p)?)),
        None if needed => Err(Error::DecoderMissing),
        None => Ok(None),
    }
}

fn train_policy_cmd(ctx: &Ctx, data: &Path, vae: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (_, demos) = load_corpus(data)?;
    let cfg = &ctx.cfg.policy;
    let vae = load_vae(vae, cfg.mode == PolicyMode::Latent)?;
    let (model, report) = train_policy_with(cfg, &demos, vae.as_ref(), ctx.exec, |r, _| {
        log::event("policy-epoch", json!({ "epoch": r.epoch, "loss": r.total }));
        Ok(())
    })?;
    let m = cfg.mode.as_str();
    let path = out.unwrap_or_else(|| ctx.path(&format!("policy-{m}.ckpt")));
    model.save(&path)?;
    write_loss_log(ctx.path(&format!("policy-{m}_loss.csv")), &report.log)?;
    log::event("train-policy", json!({ "mode": m, "checkpoint": path.display().to_string(), "pairs": report.pairs }));
    Ok(())
}

fn rollout(ctx: &Ctx, policy: Option<&Path>, vae: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let policy = policy.ok_or_else(|| Error::Config("rollout needs --policy".into()))?;
    let data = data.ok_or_else(|| Error::Config("rollout needs --data (task demos for start state and goal)".into()))?;
    let model = PolicyModel::load(policy)?;
    let r = &ctx.cfg.rollout;
    let a = &model.arch;
    if (a.l, a.n_shift, a.chunk) != (r.l, r.n_shift, r.chunk) {
        return Err(Error::Config(format!(
            "policy was trained with (L, n, N) = ({}, {}, {}), rollout config has ({}, {}, {})",
            a.l, a.n_shift, a.chunk, r.l, r.n_shift, r.chunk
        )));
    }
    let vae = load_vae(vae, a.mode == PolicyMode::Latent)?;
    let (_, demos) = load_corpus(data)?;
    let inst = sample_task_instance(&ctx.cfg.task, &mut ChaCha8Rng::seed_from_u64(r.seed));
    let world = demo_world(&demos, inst.object)?;
    let res = run_inference(&model, vae.as_ref(), world, &ctx.hand, r)?;
    write_trace(ctx.path("trace.jsonl"), &res.trace)?;
    let summary = json!({ "final_error_m": res.final_error_m, "success": res.success, "steps": res.steps, "noise": r.noise.enabled, "seed": r.seed });
    write_text(&ctx.path("rollout.json"), &format!("{summary}\n"))?;
    log::event("rollout", summary);
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, data: &Path, vae: Option<&Path>) -> Result<()> {
    let (_, demos) = load_corpus(data)?;
    let spec = ctx.cfg.eval_spec();
    let vae = load_vae(vae, spec.methods.contains(&PolicyMode::Latent))?;
    let rows = evaluate(ctx.exec, &spec, &demos, vae.as_ref(), &ctx.hand)?;
    write_text(&ctx.path("table.csv"), &table_to_csv(&rows))?;
    let summary = summarize(&rows);
    write_text(&ctx.path("summary.csv"), &summary_to_csv(&summary))?;
    for s in &summary {
        log::event(
            "evaluate",
            json!({ "method": s.method.as_str(), "noise": s.noise, "cell": s.cell, "mean_error_m": s.mean_error_m, "std_error_m": s.std_error_m, "success_rate": s.success_rate }),
        );
    }
    Ok(())
}

fn validate(data: Option<&Path>) -> Result<()> {
    let Some(data) = data else {
        log::event("validate", json!({ "config": "ok" }));
        return Ok(());
    };
    let report = validate_corpus(data)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if !report.ok() {
        return Err(Error::InvariantViolation(format!("{} of {} demos failed validation", report.failures().len(), report.demos.len())));
    }
    log::event("validate", json!({ "corpus": report.corpus_id, "demos": report.demos.len(), "frames": report.total_frames }));
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let s = Checkpoint::summarize(path)?;
    let tensors: Vec<_> = s.tensors.iter().map(|(n, shape)| json!({ "name": n, "shape": shape })).collect();
    let out = json!({ "version": s.version, "with_optimizer": s.with_optimizer, "metadata": s.metadata, "tensors": tensors });
    println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
    Ok(())
}
