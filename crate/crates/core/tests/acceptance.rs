//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line under `cargo test`; exits non-zero if any criterion fails.
//!
//! The first four criteria and the Wilson coverage check are cheap. The rest
//! share one end-to-end run of the default experiment.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use deflect::asyncsim::{run_batch, run_episode, AsyncConfig, Strategy};
use deflect::diffnet::{GradAccum, PolicyParams};
use deflect::env::{generate_demos, Dataset, Env, EnvConfig, Observation, Vec2};
use deflect::evalanal::{cell_seed, wilson_ci, Method, SweepReport, DEFLECT, REFERENCE, SFT_CONTINUE};
use deflect::experiment::{Experiment, ExperimentConfig, Threshold, VariantSpec};
use deflect::flowpolicy::{ActionChunk, ChunkShape, DeploymentContext, FlowDraw, FlowModel, SampleSeed};
use deflect::pairgen::{make_pair, DelaySpec};
use deflect::par::{init_thread_pool, Execution};
use deflect::trainer::{dpo_margin, LossWeights, MarginTerms, Objective, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

// Tolerances and budgets.
const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;
const FD_INSTANCES: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(60);
const EXACT_TOL: f64 = 1e-12;
const D0_EPISODES: u64 = 100;
const STRESS_DELAY: usize = 6;
const STRESS_EPISODES: usize = 1000;
const STRESS_GAP: f64 = 0.15;
const STRESS_BUDGET: Duration = Duration::from_secs(5 * 60);
const HEADLINE_BAND: [usize; 3] = [5, 6, 7];
const HEADLINE_GAIN: f64 = 0.02;
const HEADLINE_MIN_POOLED: usize = 2000;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const ANCHOR_GAP: f64 = 0.30;
const SPREAD_BAND: (f64, f64) = (0.8, 1.2);
const FILTER_TOL: f64 = 0.02;
const WILSON_P: f64 = 0.3;
const WILSON_N: u64 = 200;
const WILSON_BATCHES: usize = 10_000;
const WILSON_COVERAGE: (f64, f64) = (0.94, 0.96);

const NO_ANCHOR: &str = "no-anchor";
const MATCHED: &str = "matched-input";
const NARROW: &str = "narrow-delay";
const FILTERED: &str = "deflect-p10";

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, id: u8, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn small_model() -> FlowModel {
    FlowModel { shape: ChunkShape::default(), half_width: 2.0 }
}

fn gaussian_chunk(shape: ChunkShape, rng: &mut ChaCha8Rng) -> ActionChunk {
    ActionChunk::new(shape, (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_context(rng: &mut ChaCha8Rng) -> DeploymentContext {
    let mut v = || Vec2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    DeploymentContext { observation: Observation { target: v(), time: 0 }, proprio: v(), task_tag: 1.0 }
}

/// Largest deviation between the analytic gradient and central differences,
/// relative to the largest finite-difference component.
fn fd_error(params: &PolicyParams, grads: &GradAccum, f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let analytic = grads.flatten();
    let mut p = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_arrays = p.named_arrays_mut().len();
    for a in 0..n_arrays {
        let len = p.named_arrays_mut()[a].1.len();
        for i in 0..len {
            let orig = p.named_arrays_mut()[a].1[i];
            p.named_arrays_mut()[a].1[i] = orig + FD_STEP;
            let up = f(&p);
            p.named_arrays_mut()[a].1[i] = orig - FD_STEP;
            let down = f(&p);
            p.named_arrays_mut()[a].1[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    assert_eq!(numeric.len(), analytic.len(), "parameter and gradient layouts differ");
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn tiny_dataset() -> (Env, Dataset) {
    let env = Env::new(EnvConfig::default()).unwrap();
    let (ds, _) = generate_demos(&env, 20, 77, ChunkShape::default().horizon, Execution::Sequential).unwrap();
    (env, ds)
}

fn objective_error(mode: TrainMode, seed: u64, ds: &Dataset) -> f64 {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = model.init_params(&[8, 8], &mut rng).unwrap();
    let mut theta = reference.clone();
    for (_, arr) in theta.named_arrays_mut() {
        for v in arr.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cfg = TrainConfig {
        mode,
        batch_size: 2,
        weights: LossWeights { beta: 1.0, lambda_sft: 1.0, lambda_dpo: 0.5 },
        seed,
        ..TrainConfig::default()
    };
    let obj = Objective::new(model, ds, Some(&reference), &cfg, 1.0, Execution::Sequential).unwrap();
    let step = seed as usize;
    let (grads, _) = obj.evaluate(&theta, step).unwrap();
    fd_error(&theta, &grads, |p| obj.evaluate(p, step).unwrap().1.objective)
}

fn gradient_oracle(ledger: &mut Ledger) {
    let start = Instant::now();
    let model = small_model();
    let (_, ds) = tiny_dataset();
    let mut worst = [0.0f64; 3];
    for i in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i as u64);
        let params = model.init_params(&[8, 8], &mut rng).unwrap();
        let a = gaussian_chunk(model.shape, &mut rng);
        let ctx = random_context(&mut rng);
        let draw = FlowDraw::draw(model.shape, &mut rng);
        let (_, grads) = model.fm_loss(&params, &a, &ctx, &draw).unwrap();
        worst[0] = worst[0].max(fd_error(&params, &grads, |p| model.fm_loss_value(p, &a, &ctx, &draw).unwrap()));
        worst[1] = worst[1].max(objective_error(TrainMode::NoAnchor, i as u64, &ds));
        worst[2] = worst[2].max(objective_error(TrainMode::Deflect, i as u64, &ds));
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e <= FD_RTOL) && elapsed < FD_BUDGET;
    ledger.record(
        1,
        "gradient oracle",
        pass,
        format!(
            "{FD_INSTANCES} instances, max rel err fm {:.2e} pref {:.2e} combined {:.2e} (tol {FD_RTOL:.0e}), {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            elapsed.as_secs_f64()
        ),
    );
}

fn zero_margin(ledger: &mut Ledger) {
    let model = small_model();
    let (_, ds) = tiny_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reference = model.init_params(&[32, 32], &mut rng).unwrap();
    let cfg = TrainConfig { mode: TrainMode::Deflect, batch_size: 64, ..TrainConfig::default() };
    let obj = Objective::new(model, &ds, Some(&reference), &cfg, 1.0, Execution::Sequential).unwrap();
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for step in 0..4 {
        let (_, rep) = obj.evaluate(&reference, step).unwrap();
        worst = worst.max((rep.dpo_loss - LN_2).abs()).max(rep.margin_mean.abs());
        pairs += rep.pairs;
    }
    ledger.record(
        2,
        "zero-margin exactness",
        worst <= EXACT_TOL && pairs > 0,
        format!("{pairs} pairs, max |loss - ln 2| or |margin| = {worst:.1e} (tol {EXACT_TOL:.0e})"),
    );
}

fn cancellation(ledger: &mut Ledger) {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta = model.init_params(&[16, 16], &mut rng).unwrap();
    let reference = model.init_params(&[16, 16], &mut rng).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ctx = random_context(&mut rng);
        let (plus, minus) = (gaussian_chunk(model.shape, &mut rng), gaussian_chunk(model.shape, &mut rng));
        let draw = FlowDraw::draw(model.shape, &mut rng);
        let base = MarginTerms {
            theta_plus: model.fm_loss_value(&theta, &plus, &ctx, &draw).unwrap(),
            theta_minus: model.fm_loss_value(&theta, &minus, &ctx, &draw).unwrap(),
            ref_plus: model.fm_loss_value(&reference, &plus, &ctx, &draw).unwrap(),
            ref_minus: model.fm_loss_value(&reference, &minus, &ctx, &draw).unwrap(),
        };
        // one additive constant per action entry, shared by the matched branches
        let shift = |rng: &mut ChaCha8Rng| (0..model.shape.len()).map(|_| rng.random_range(-10.0..10.0)).sum::<f64>();
        let (cp, cm) = (shift(&mut rng), shift(&mut rng));
        let moved = MarginTerms {
            theta_plus: base.theta_plus + cp,
            ref_plus: base.ref_plus + cp,
            theta_minus: base.theta_minus + cm,
            ref_minus: base.ref_minus + cm,
        };
        let beta = rng.random_range(0.1..5.0);
        let (m0, _) = dpo_margin(&base, beta).unwrap();
        let (m1, _) = dpo_margin(&moved, beta).unwrap();
        worst = worst.max((m0 - m1).abs());
    }
    ledger.record(
        3,
        "cancellation",
        worst <= EXACT_TOL,
        format!("1000 random pairs, max margin change {worst:.1e} (tol {EXACT_TOL:.0e})"),
    );
}

fn shared_noise_degeneracy(ledger: &mut Ledger) {
    let model = small_model();
    let (_, ds) = tiny_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let reference = model.init_params(&[32, 32], &mut rng).unwrap();
    let mut ok = true;
    let mut checked = 0;
    for (i, demo) in ds.demos.iter().enumerate().filter(|(_, d)| d.len() > 3) {
        // freeze the world for one step so the stale and future inputs coincide
        let mut demo = demo.clone();
        demo.steps[2].state = demo.steps[1].state;
        let xi = SampleSeed::draw(model.shape, 5, &mut rng);
        let delays = DelaySpec { d_max: 1, d_ctx: 0, d_dpo: 1 };
        let t = make_pair(&model, &reference, &demo, i, 1, delays, &xi, 1.0).unwrap();
        let bitwise = t.preferred.as_slice().iter().zip(t.rejected.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ok &= bitwise && t.contrast == 0.0;
        checked += 1;
    }
    ledger.record(
        4,
        "shared-noise degeneracy",
        ok && checked > 0,
        format!("{checked} pairs with identical inputs, all bitwise equal with contrast 0: {ok}"),
    );
}

fn wilson_coverage(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let binom = Binomial::new(WILSON_N, WILSON_P).unwrap();
    let covered = (0..WILSON_BATCHES)
        .filter(|_| {
            let k = binom.sample(&mut rng) as usize;
            wilson_ci(k, WILSON_N as usize, 0.95).unwrap().contains(WILSON_P)
        })
        .count();
    let cov = covered as f64 / WILSON_BATCHES as f64;
    ledger.record(
        13,
        "Wilson interval coverage",
        (WILSON_COVERAGE.0..=WILSON_COVERAGE.1).contains(&cov),
        format!("p={WILSON_P} n={WILSON_N}: {:.2}% over {WILSON_BATCHES} batches", 100.0 * cov),
    );
}

/// Everything the trend criteria read.
struct Pipeline {
    x: Experiment,
    reference: PolicyParams,
    variants: Vec<(String, PolicyParams)>,
    sweep: SweepReport,
    stress_gap: (f64, f64),
    stress_time: Duration,
    total_time: Duration,
}

impl Pipeline {
    fn params(&self, name: &str) -> &PolicyParams {
        &self.variants.iter().find(|(n, _)| n == name).expect("trained variant").1
    }
}

fn run_pipeline() -> Pipeline {
    let start = Instant::now();
    let x = Experiment::new(ExperimentConfig::default(), Execution::from_env()).unwrap();
    let (ds, summary) = x.demos().unwrap();
    println!("      demos: {} of {} episodes retained", summary.retained, summary.total);
    let reference = x.train_reference(&ds).unwrap().params;
    println!("      reference trained at {:.0}s", start.elapsed().as_secs_f64());

    let spec = x.sweep_spec();
    let cfg = |s| AsyncConfig::standard(STRESS_DELAY, s, spec.n_flow);
    let seed = cell_seed(spec.seed, STRESS_DELAY);
    let run = |s| run_batch(&x.env, &x.model, &reference, &cfg(s), STRESS_EPISODES, seed, x.exec).unwrap().rate();
    let stress_gap = (run(Strategy::Oracle), run(Strategy::Naive));
    let stress_time = start.elapsed();

    let mut variants = Vec::new();
    for mode in [TrainMode::SftContinue, TrainMode::Deflect, TrainMode::NoAnchor, TrainMode::MatchedInput, TrainMode::NarrowDelay] {
        let spec = VariantSpec::mode(mode);
        variants.push((spec.name(), x.train_variant(&ds, &reference, &spec).unwrap().params));
        println!("      {} trained at {:.0}s", spec.name(), start.elapsed().as_secs_f64());
    }
    let contrasts = x.contrast_pool(&ds, &reference).unwrap();
    let p10 = x.resolve_threshold(Threshold::Percentile(10.0), &contrasts).unwrap();
    let filtered = VariantSpec { contrast_threshold: Some(p10), ..VariantSpec::mode(TrainMode::Deflect) };
    variants.push((FILTERED.to_string(), x.train_variant(&ds, &reference, &filtered).unwrap().params));
    println!("      P10 filter at contrast {p10:.4}, trained at {:.0}s", start.elapsed().as_secs_f64());

    let strategy = x.cfg.eval.strategy;
    let mut methods = vec![Method { name: REFERENCE, params: &reference, strategy }];
    methods.extend(variants.iter().map(|(n, p)| Method { name: n, params: p, strategy }));
    let sweep = x.sweep(&methods).unwrap();
    print!("{}", sweep.render());
    let total_time = start.elapsed();
    Pipeline { x, reference, variants, sweep, stress_gap, stress_time, total_time }
}

fn d0_equivalence(ledger: &mut Ledger, p: &Pipeline) {
    let x = &p.x;
    let mut identical = true;
    for seed in 0..D0_EPISODES {
        let runs: Vec<_> = [Strategy::Naive, Strategy::Rollforward, Strategy::Oracle]
            .into_iter()
            .map(|s| run_episode(&x.env, &x.model, &p.reference, &AsyncConfig::standard(0, s, 5), seed).unwrap())
            .collect();
        for r in &runs[1..] {
            identical &= r.states == runs[0].states && r.actions == runs[0].actions && r.success == runs[0].success;
            identical &= r
                .cycles
                .iter()
                .zip(&runs[0].cycles)
                .all(|(a, b)| a.chunk.as_slice().iter().zip(b.chunk.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
    ledger.record(
        5,
        "zero-delay strategy equivalence",
        identical,
        format!("{D0_EPISODES} episodes, naive/rollforward/oracle trajectories identical: {identical}"),
    );
}

fn pp(v: f64) -> String {
    format!("{:+.1} pp", 100.0 * v)
}

fn latency_stress(ledger: &mut Ledger, p: &Pipeline) {
    let (oracle, naive) = p.stress_gap;
    ledger.record(
        6,
        "environment stresses latency",
        oracle - naive >= STRESS_GAP && p.stress_time < STRESS_BUDGET,
        format!(
            "d={STRESS_DELAY}, {STRESS_EPISODES} paired episodes: oracle {:.1}% naive {:.1}% gap {} (need >= {}), {:.0}s incl. demos and reference",
            100.0 * oracle,
            100.0 * naive,
            pp(oracle - naive),
            pp(STRESS_GAP),
            p.stress_time.as_secs_f64()
        ),
    );
}

fn headline(ledger: &mut Ledger, p: &Pipeline) {
    let s = &p.sweep;
    let band = s.pooled_diff(DEFLECT, SFT_CONTINUE, &HEADLINE_BAND).unwrap();
    let low = s.pooled_diff(DEFLECT, SFT_CONTINUE, &[0, 1]).unwrap().mean;
    let high = s.pooled_diff(DEFLECT, SFT_CONTINUE, &[6, 7]).unwrap().mean;
    let pass = band.mean >= HEADLINE_GAIN
        && band.ci.lower > 0.0
        && band.n >= HEADLINE_MIN_POOLED
        && low < high
        && p.total_time < PIPELINE_BUDGET;
    ledger.record(
        7,
        "headline trend",
        pass,
        format!(
            "deflect - sft-continue over d 5-7: {} [{}, {}] n={} (need >= {} with CI above 0); d 0-1 {} vs d 6-7 {}; pipeline {:.0}s",
            pp(band.mean),
            pp(band.ci.lower),
            pp(band.ci.upper),
            band.n,
            pp(HEADLINE_GAIN),
            pp(low),
            pp(high),
            p.total_time.as_secs_f64()
        ),
    );
}

fn anchor_necessity(ledger: &mut Ledger, p: &Pipeline) {
    let full = p.sweep.delay_average(DEFLECT).unwrap();
    let bare = p.sweep.delay_average(NO_ANCHOR).unwrap();
    ledger.record(
        8,
        "anchor necessity",
        full - bare >= ANCHOR_GAP,
        format!(
            "delay-averaged deflect {:.1}% vs no-anchor {:.1}%, gap {} (need >= {})",
            100.0 * full,
            100.0 * bare,
            pp(full - bare),
            pp(ANCHOR_GAP)
        ),
    );
}

fn matched_input(ledger: &mut Ledger, p: &Pipeline) {
    let s = &p.sweep;
    let top = *s.delays.iter().max().unwrap();
    let at_top = s.paired_diff(MATCHED, DEFLECT, top).unwrap();
    let at_zero = s.paired_diff(MATCHED, DEFLECT, 0).unwrap();
    let pass = at_top.mean <= 0.0 && at_top.ci.upper < 0.0 && -at_top.mean > -at_zero.mean;
    ledger.record(
        9,
        "matched-input inferiority",
        pass,
        format!(
            "matched-input - deflect at d={top}: {} [{}, {}]; at d=0: {}",
            pp(at_top.mean),
            pp(at_top.ci.lower),
            pp(at_top.ci.upper),
            pp(at_zero.mean)
        ),
    );
}

fn zero_shot(ledger: &mut Ledger, p: &Pipeline) {
    let d = p.sweep.paired_diff(NARROW, SFT_CONTINUE, 7).unwrap();
    ledger.record(
        10,
        "zero-shot delay generalization",
        d.mean > 0.0,
        format!("narrow-delay - sft-continue at d=7: {} [{}, {}]", pp(d.mean), pp(d.ci.lower), pp(d.ci.upper)),
    );
}

fn variance_preservation(ledger: &mut Ledger, p: &Pipeline) {
    let report = p.x.probe(p.params(DEFLECT), &p.reference).unwrap();
    let ratios: Vec<String> = report.states.iter().map(|s| format!("{:.3}", s.spread_ratio)).collect();
    let m = report.median_spread_ratio();
    ledger.record(
        11,
        "variance preservation",
        (SPREAD_BAND.0..=SPREAD_BAND.1).contains(&m),
        format!("median spread ratio {m:.3} over states [{}] (need {:?})", ratios.join(", "), SPREAD_BAND),
    );
}

fn filter_insensitivity(ledger: &mut Ledger, p: &Pipeline) {
    let s = &p.sweep;
    let worst = s
        .delays
        .iter()
        .map(|&d| (s.rate(FILTERED, d).unwrap() - s.rate(DEFLECT, d).unwrap()).abs())
        .fold(0.0f64, f64::max);
    ledger.record(
        12,
        "contrast-filter insensitivity",
        worst < FILTER_TOL,
        format!("max per-delay |P10 filtered - unfiltered| {} (need < {})", pp(worst), pp(FILTER_TOL)),
    );
}

fn determinism(ledger: &mut Ledger) {
    let run = |exec: Execution| {
        let mut cfg = ExperimentConfig::default();
        cfg.demos.episodes = 150;
        cfg.reference.steps = 120;
        cfg.post.steps = 40;
        cfg.eval.episodes = 40;
        cfg.contrast.pool = 128;
        let x = Experiment::new(cfg, exec).unwrap();
        let (ds, _) = x.demos().unwrap();
        let reference = x.train_reference(&ds).unwrap();
        let variant = x.train_variant(&ds, &reference.params, &VariantSpec::mode(TrainMode::Deflect)).unwrap();
        let strategy = x.cfg.eval.strategy;
        let sweep = x
            .sweep(&[
                Method { name: REFERENCE, params: &reference.params, strategy },
                Method { name: DEFLECT, params: &variant.params, strategy },
            ])
            .unwrap();
        (ds.to_bytes(), reference.params.to_bytes(), variant.params.to_bytes(), variant.log.to_csv(), sweep.to_csv())
    };
    let a = run(Execution::Parallel);
    let b = run(Execution::Parallel);
    let c = run(Execution::Sequential);
    ledger.record(
        14,
        "determinism",
        a == b && a == c,
        format!("repeat run identical: {}, sequential run identical: {}", a == b, a == c),
    );
}

fn main() -> ExitCode {
    init_thread_pool();
    let mut ledger = Ledger { failed: 0 };
    gradient_oracle(&mut ledger);
    zero_margin(&mut ledger);
    cancellation(&mut ledger);
    shared_noise_degeneracy(&mut ledger);
    wilson_coverage(&mut ledger);
    determinism(&mut ledger);

    println!("      running the default experiment end to end");
    let p = run_pipeline();
    d0_equivalence(&mut ledger, &p);
    latency_stress(&mut ledger, &p);
    headline(&mut ledger, &p);
    anchor_necessity(&mut ledger, &p);
    matched_input(&mut ledger, &p);
    zero_shot(&mut ledger, &p);
    variance_preservation(&mut ledger, &p);
    filter_insensitivity(&mut ledger, &p);

    println!("acceptance: {} of 14 criteria passed", 14 - ledger.failed);
    if ledger.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
