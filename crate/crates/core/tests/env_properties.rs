use deflect::env::{generate_demos, Env, EnvConfig};
use deflect::par::Execution;

/// Two-sided one-sample KS statistic against U[lo, hi].
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn target_speeds_are_uniform() {
    let cfg = EnvConfig::default();
    let env = Env::new(cfg.clone()).unwrap();
    let speeds: Vec<f64> = (0..10_000).map(|s| env.reset(s).velocity.norm()).collect();
    assert!(speeds.iter().all(|&v| v >= cfg.speed_min - 1e-12 && v <= cfg.speed_max + 1e-12));
    let d = ks_uniform(speeds, cfg.speed_min, cfg.speed_max);
    // 1% critical value of the asymptotic KS distribution.
    assert!(d < 1.628 / (10_000f64).sqrt(), "KS statistic {d}");
}

#[test]
fn expert_solves_default_task() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let (ds, summary) = generate_demos(&env, 2000, 0, 8, Execution::Parallel).unwrap();
    assert!(summary.retained >= 1900, "{summary:?}");
    assert!(summary.success_rate() >= 0.95);
    for demo in &ds.demos {
        assert!(demo.len() <= env.config().horizon);
        for s in &demo.steps {
            assert!(s.action.x.abs() <= 1.0 && s.action.y.abs() <= 1.0);
        }
    }
}

#[test]
fn stale_pursuit_trails_the_expert() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let n = 1000;
    let expert = (0..n).filter(|&s| env.expert_episode(s).success).count();
    let stale = (0..n).filter(|&s| env.stale_pursuit_episode(s, 6)).count();
    eprintln!("expert {expert}/{n}, stale pursuit {stale}/{n}");
    assert!(expert as f64 - stale as f64 >= 0.15 * n as f64);
}

#[test]
fn trajectories_are_determined_by_seed_and_actions() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let run = || {
        let mut s = env.reset(42);
        let mut trace = vec![s];
        for k in 0..30 {
            let a = deflect::env::Vec2::new((k as f64 * 0.3).sin(), (k as f64 * 0.2).cos());
            s = env.step(&s, a).state;
            trace.push(s);
        }
        trace
    };
    assert_eq!(run(), run());
}
