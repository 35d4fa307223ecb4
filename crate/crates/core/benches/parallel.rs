use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dexlat::hand::HandModel;
use dexlat::par::Exec;
use dexlat::policy::{train_policy, PolicyConfig, PolicyMode};
use dexlat::retarget::{frame_from_state, retarget_many};
use dexlat::rollout::{generate_prior_demos, generate_task_demos, PriorSpec, TaskSpec};
use dexlat::vae::{train_vae, VaeConfig};

const EXECS: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn synth(c: &mut Criterion) {
    let model = HandModel::default_model();
    let spec = TaskSpec::default();
    let mut g = c.benchmark_group("generate_task_demos");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, 16), |b| b.iter(|| generate_task_demos(exec, &model, &spec, 16, 1).unwrap()));
    }
    g.finish();
}

fn retarget(c: &mut Criterion) {
    let model = HandModel::default_model();
    let demos = generate_task_demos(Exec::Parallel, &model, &TaskSpec::default(), 8, 2).unwrap();
    let recordings: Vec<_> = demos
        .iter()
        .map(|d| {
            let frames = d.states.iter().step_by(4).zip(&d.times).map(|(s, &t)| frame_from_state(&model, s, t).unwrap()).collect();
            (d.id.clone(), frames)
        })
        .collect();
    let mut g = c.benchmark_group("retarget_many");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| retarget_many(exec, &model, &recordings).unwrap()));
    }
    g.finish();
}

fn vae_epoch(c: &mut Criterion) {
    let model = HandModel::default_model();
    let prior = generate_prior_demos(Exec::Parallel, &model, &PriorSpec::default(), 4, 3).unwrap();
    let cfg = VaeConfig {
        hidden: 32,
        mlp_hidden: 32,
        d: 8,
        epochs: 1,
        batch_size: 64,
        stride: 4,
        ..VaeConfig::default()
    };
    let mut g = c.benchmark_group("vae_epoch");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| train_vae(&cfg, &prior, exec).unwrap()));
    }
    g.finish();
}

fn policy_epoch(c: &mut Criterion) {
    let model = HandModel::default_model();
    let demos = generate_task_demos(Exec::Parallel, &model, &TaskSpec::default(), 4, 4).unwrap();
    let cfg = PolicyConfig {
        mode: PolicyMode::Direct,
        width: 32,
        heads: 4,
        layers: 2,
        epochs: 1,
        ..PolicyConfig::default()
    };
    let mut g = c.benchmark_group("policy_epoch");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| train_policy(&cfg, &demos, None, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, synth, retarget, vae_epoch, policy_epoch);
criterion_main!(benches);
