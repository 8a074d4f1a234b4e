use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deflect::asyncsim::{run_batch, AsyncConfig, Strategy};
use deflect::env::{generate_demos, Env, EnvConfig};
use deflect::flowpolicy::{ChunkShape, FlowModel};
use deflect::par::Execution;
use deflect::trainer::{Objective, TrainConfig, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (Env, FlowModel, deflect::diffnet::PolicyParams) {
    let env = Env::new(EnvConfig::default()).unwrap();
    let model = FlowModel { shape: ChunkShape::default(), half_width: env.config().half_width };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = model.init_params(&[128, 128], &mut rng).unwrap();
    (env, model, params)
}

fn rollouts(c: &mut Criterion) {
    let (env, model, params) = setup();
    let cfg = AsyncConfig::standard(4, Strategy::Rollforward, 5);
    let mut g = c.benchmark_group("run_batch_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_batch(&env, &model, &params, &cfg, 64, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn objective(c: &mut Criterion) {
    let (env, model, params) = setup();
    let (ds, _) = generate_demos(&env, 200, 0, model.shape.horizon, Execution::Sequential).unwrap();
    let cfg = TrainConfig { mode: TrainMode::Deflect, ..TrainConfig::default() };
    let mut g = c.benchmark_group("objective_batch_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        let obj = Objective::new(model, &ds, Some(&params), &cfg, env.config().task_tag, exec).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| obj.evaluate(&params, 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, rollouts, objective);
criterion_main!(benches);
