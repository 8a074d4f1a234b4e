//! Delay sweeps, confidence intervals, restart decomposition and the
//! mechanism probe.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asyncsim::{run_batch, run_episode, AsyncConfig, Strategy};
use crate::diffnet::PolicyParams;
use crate::env::Env;
use crate::flowpolicy::{DeploymentContext, FlowModel, SampleSeed};
use crate::par::Execution;
use crate::{Error, Result};

/// Two-sided standard-normal quantile for `confidence` in `(0, 1)`.
fn z_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence {confidence} outside (0, 1)")));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(normal.inverse_cdf(0.5 + confidence / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn excludes_zero(&self) -> bool {
        !self.contains(0.0)
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_ci(k: usize, n: usize, confidence: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::Domain("Wilson interval needs at least one trial".into()));
    }
    if k > n {
        return Err(Error::Domain(format!("{k} successes out of {n} trials")));
    }
    let z = z_value(confidence)?;
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2n = z * z / nf;
    let center = (p + z2n / 2.0) / (1.0 + z2n);
    let half = z / (1.0 + z2n) * (p * (1.0 - p) / nf + z2n / (4.0 * nf)).sqrt();
    let lower = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let upper = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok(Interval { lower, upper })
}

/// Mean of paired indicator differences `a - b` with its normal interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDiff {
    pub mean: f64,
    pub n: usize,
    pub ci: Interval,
}

pub fn paired_difference(a: &[bool], b: &[bool], confidence: f64) -> Result<PairedDiff> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Domain("paired difference of empty samples".into()));
    }
    let z = z_value(confidence)?;
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| f64::from(u8::from(x)) - f64::from(u8::from(y))).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if a.len() > 1 {
        diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let half = z * (var / n).sqrt();
    Ok(PairedDiff { mean, n: a.len(), ci: Interval { lower: mean - half, upper: mean + half } })
}

/// Episode seed base for the cell at `delay`; shared by every method.
pub fn cell_seed(seed: u64, delay: usize) -> u64 {
    seed.wrapping_add(delay as u64 * 100_000)
}

/// A named policy evaluated under one context strategy.
#[derive(Debug, Clone, Copy)]
pub struct Method<'a> {
    pub name: &'a str,
    pub params: &'a PolicyParams,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: String,
    pub delay: usize,
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
    pub ci: Interval,
    /// Per-episode outcomes in seed order, for paired comparisons.
    pub flags: Vec<bool>,
}

/// Delay bands reported alongside the per-delay cells.
pub const BANDS: [(usize, usize); 2] = [(0, 7), (5, 7)];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub methods: Vec<String>,
    pub delays: Vec<usize>,
    pub confidence: f64,
    /// Method-major: all delays of the first method, then the next.
    pub cells: Vec<Cell>,
}

impl SweepReport {
    pub fn cell(&self, method: &str, delay: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.delay == delay)
    }

    pub fn rate(&self, method: &str, delay: usize) -> Option<f64> {
        self.cell(method, delay).map(|c| c.rate)
    }

    /// Mean rate over the method's cells with delay in `lo..=hi`.
    pub fn band_average(&self, method: &str, lo: usize, hi: usize) -> Option<f64> {
        let rates: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && (lo..=hi).contains(&c.delay))
            .map(|c| c.rate)
            .collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    /// Mean over every evaluated delay.
    pub fn delay_average(&self, method: &str) -> Option<f64> {
        self.band_average(method, 0, usize::MAX)
    }

    fn method_cell(&self, method: &str, delay: usize) -> Result<&Cell> {
        self.cell(method, delay)
            .ok_or_else(|| Error::Index(format!("no cell for method {method} at delay {delay}")))
    }

    /// Paired difference `a - b` at one delay.
    pub fn paired_diff(&self, a: &str, b: &str, delay: usize) -> Result<PairedDiff> {
        let (ca, cb) = (self.method_cell(a, delay)?, self.method_cell(b, delay)?);
        paired_difference(&ca.flags, &cb.flags, self.confidence)
    }

    /// Paired difference `a - b` pooled over all episodes at `delays`.
    pub fn pooled_diff(&self, a: &str, b: &str, delays: &[usize]) -> Result<PairedDiff> {
        let (mut fa, mut fb) = (Vec::new(), Vec::new());
        for &d in delays {
            fa.extend_from_slice(&self.method_cell(a, d)?.flags);
            fb.extend_from_slice(&self.method_cell(b, d)?.flags);
        }
        paired_difference(&fa, &fb, self.confidence)
    }

    fn bands_for(&self, method: &str) -> Vec<(String, f64)> {
        BANDS
            .iter()
            .filter_map(|&(lo, hi)| {
                self.band_average(method, lo, hi).map(|r| (format!("avg({lo}-{hi})"), r))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,delay,successes,n,rate,ci_lower,ci_upper\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                c.method, c.delay, c.successes, c.n, c.rate, c.ci.lower, c.ci.upper
            );
        }
        for m in &self.methods {
            for (label, r) in self.bands_for(m) {
                let _ = writeln!(out, "{m},{label},,,{r:.6},,");
            }
        }
        out
    }

    /// Plain-text table: one row per delay, one column per method.
    pub fn render(&self) -> String {
        let width = self.methods.iter().map(|m| m.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:>9}", "d");
        for m in &self.methods {
            let _ = write!(out, "  {m:>width$}");
        }
        out.push('\n');
        for &d in &self.delays {
            let _ = write!(out, "{d:>9}");
            for m in &self.methods {
                match self.rate(m, d) {
                    Some(r) => {
                        let _ = write!(out, "  {:>width$.1}", 100.0 * r);
                    }
                    None => {
                        let _ = write!(out, "  {:>width$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for &(lo, hi) in &BANDS {
            let label = format!("avg({lo}-{hi})");
            if self.methods.iter().all(|m| self.band_average(m, lo, hi).is_none()) {
                continue;
            }
            let _ = write!(out, "{label:>9}");
            for m in &self.methods {
                match self.band_average(m, lo, hi) {
                    Some(r) => {
                        let _ = write!(out, "  {:>width$.1}", 100.0 * r);
                    }
                    None => {
                        let _ = write!(out, "  {:>width$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluation settings shared by every cell of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepSpec<'a> {
    pub delays: &'a [usize],
    pub n_episodes: usize,
    pub seed: u64,
    pub n_flow: usize,
    pub confidence: f64,
}

pub fn delay_sweep(
    env: &Env,
    model: &FlowModel,
    methods: &[Method<'_>],
    spec: &SweepSpec<'_>,
    exec: Execution,
) -> Result<SweepReport> {
    if methods.is_empty() {
        return Err(Error::Config("a sweep needs at least one method".into()));
    }
    if spec.delays.is_empty() {
        return Err(Error::Config("a sweep needs at least one delay".into()));
    }
    let mut cells = Vec::with_capacity(methods.len() * spec.delays.len());
    for m in methods {
        for &d in spec.delays {
            let cfg = AsyncConfig::standard(d, m.strategy, spec.n_flow);
            let stats = run_batch(env, model, m.params, &cfg, spec.n_episodes, cell_seed(spec.seed, d), exec)?;
            cells.push(Cell {
                method: m.name.to_string(),
                delay: d,
                successes: stats.successes,
                n: stats.n,
                rate: stats.rate(),
                ci: wilson_ci(stats.successes, stats.n, spec.confidence)?,
                flags: stats.flags,
            });
        }
    }
    Ok(SweepReport {
        methods: methods.iter().map(|m| m.name.to_string()).collect(),
        delays: spec.delays.to_vec(),
        confidence: spec.confidence,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRow {
    pub delay: usize,
    pub reference: f64,
    pub sft_continue: f64,
    pub deflect: f64,
    /// `sft_continue - reference`.
    pub restart: PairedDiff,
    /// `deflect - sft_continue`.
    pub dpo: PairedDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTable {
    pub rows: Vec<DecompositionRow>,
    pub sweep: SweepReport,
}

pub const REFERENCE: &str = "reference";
pub const SFT_CONTINUE: &str = "sft-continue";
pub const DEFLECT: &str = "deflect";

impl DecompositionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "delay,reference,sft_continue,deflect,delta_restart,restart_lower,restart_upper,delta_dpo,dpo_lower,dpo_upper\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.delay,
                r.reference,
                r.sft_continue,
                r.deflect,
                r.restart.mean,
                r.restart.ci.lower,
                r.restart.ci.upper,
                r.dpo.mean,
                r.dpo.ci.lower,
                r.dpo.ci.upper
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>3}  {:>9}  {:>12}  {:>7}  {:>9}  {:>9}\n",
            "d", REFERENCE, SFT_CONTINUE, DEFLECT, "d_restart", "d_dpo"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>3}  {:>9.1}  {:>12.1}  {:>7.1}  {:>+9.1}  {:>+9.1}",
                r.delay,
                100.0 * r.reference,
                100.0 * r.sft_continue,
                100.0 * r.deflect,
                100.0 * r.restart.mean,
                100.0 * r.dpo.mean
            );
        }
        out
    }
}

/// Per-delay restart and preference deltas, all three policies evaluated
/// under `strategy` with shared episode seeds.
pub fn decomposition_table(
    env: &Env,
    model: &FlowModel,
    policies: [&PolicyParams; 3],
    strategy: Strategy,
    spec: &SweepSpec<'_>,
    exec: Execution,
) -> Result<DecompositionTable> {
    let [reference, sft, deflect] = policies;
    let methods = [
        Method { name: REFERENCE, params: reference, strategy },
        Method { name: SFT_CONTINUE, params: sft, strategy },
        Method { name: DEFLECT, params: deflect, strategy },
    ];
    let sweep = delay_sweep(env, model, &methods, spec, exec)?;
    let mut rows = Vec::with_capacity(spec.delays.len());
    for &d in spec.delays {
        let rate = |m: &str| sweep.method_cell(m, d).map(|c| c.rate);
        rows.push(DecompositionRow {
            delay: d,
            reference: rate(REFERENCE)?,
            sft_continue: rate(SFT_CONTINUE)?,
            deflect: rate(DEFLECT)?,
            restart: sweep.paired_diff(SFT_CONTINUE, REFERENCE, d)?,
            dpo: sweep.paired_diff(DEFLECT, SFT_CONTINUE, d)?,
        });
    }
    Ok(DecompositionTable { rows, sweep })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeState {
    pub context: DeploymentContext,
    /// Shared-noise chunk distance between the two policies at selection.
    pub disagreement: f64,
    pub episode_seed: u64,
    pub chunk_id: usize,
}

/// Contexts where `theta` and `reference` disagree most.
///
/// Rolls `theta` out for `n_rollouts` episodes under `cfg`. At every cycle
/// both policies sample a chunk from the recorded context with the same
/// noise, and the `k` contexts with the largest chunk distance are kept.
#[allow(clippy::too_many_arguments)]
pub fn select_probe_states(
    env: &Env,
    model: &FlowModel,
    theta: &PolicyParams,
    reference: &PolicyParams,
    cfg: &AsyncConfig,
    n_rollouts: usize,
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ProbeState>> {
    if n_rollouts == 0 || k == 0 {
        return Err(Error::Config("probe selection needs rollouts and k >= 1".into()));
    }
    let per_episode = exec
        .map(n_rollouts, |i| -> Result<Vec<ProbeState>> {
            let episode_seed = seed.wrapping_add(i as u64);
            let result = run_episode(env, model, theta, cfg, episode_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            result
                .cycles
                .iter()
                .map(|c| {
                    let xi = SampleSeed::draw(model.shape, cfg.n_flow, &mut rng);
                    let a = model.sample_chunk(theta, &c.context, &xi)?;
                    let b = model.sample_chunk(reference, &c.context, &xi)?;
                    Ok(ProbeState {
                        context: c.context,
                        disagreement: a.distance(&b),
                        episode_seed,
                        chunk_id: c.chunk_id,
                    })
                })
                .collect()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<ProbeState> = per_episode.into_iter().flatten().collect();
    // Stable sort keeps rollout order among ties.
    all.sort_by(|a, b| b.disagreement.total_cmp(&a.disagreement));
    all.truncate(k);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// `|mean(theta chunk) - mean(ref chunk)|` over the whole chunk.
    pub correction: f64,
    /// `sigma_theta / sigma_ref` per action dimension at chunk position 0.
    pub spread_ratio_dims: Vec<f64>,
    /// Mean of `spread_ratio_dims`.
    pub spread_ratio: f64,
    /// Mean-action displacement at each chunk position.
    pub position_correction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismReport {
    pub n_noise: usize,
    pub states: Vec<ProbeResult>,
    /// Per chunk position, averaged over probe states.
    pub position_correction: Vec<f64>,
}

impl MechanismReport {
    pub fn median_spread_ratio(&self) -> f64 {
        median(self.states.iter().map(|s| s.spread_ratio).collect())
    }

    pub fn median_correction(&self) -> f64 {
        median(self.states.iter().map(|s| s.correction).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,index,correction,spread_ratio\n");
        for (i, s) in self.states.iter().enumerate() {
            let _ = writeln!(out, "state,{i},{:.6},{:.6}", s.correction, s.spread_ratio);
        }
        for (h, c) in self.position_correction.iter().enumerate() {
            let _ = writeln!(out, "position,{h},{c:.6},");
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!("probe states: {}  noises per state: {}\n", self.states.len(), self.n_noise);
        for (i, s) in self.states.iter().enumerate() {
            let _ = writeln!(out, "  state {i}: correction {:.4}  spread ratio {:.3}", s.correction, s.spread_ratio);
        }
        let _ = writeln!(out, "median spread ratio {:.3}", self.median_spread_ratio());
        out.push_str("per-position correction:");
        for c in &self.position_correction {
            let _ = write!(out, " {c:.4}");
        }
        out.push('\n');
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Mean and sample standard deviation of each column of `rows`.
fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m) / (n - 1.0);
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Samples `n_noise` chunks from each policy at every probe context. Both
/// policies see the same `n_noise` independent noise draws.
#[allow(clippy::too_many_arguments)]
pub fn mechanism_probe(
    model: &FlowModel,
    theta: &PolicyParams,
    reference: &PolicyParams,
    contexts: &[DeploymentContext],
    n_noise: usize,
    n_flow: usize,
    seed: u64,
    exec: Execution,
) -> Result<MechanismReport> {
    if n_noise < 2 {
        return Err(Error::Config(format!("the probe needs n_noise >= 2, got {n_noise}")));
    }
    let (horizon, dim) = (model.shape.horizon, model.shape.action_dim);
    let states = exec
        .map(contexts.len(), |i| -> Result<ProbeResult> {
            let draw = |params: &PolicyParams| -> Result<Vec<Vec<f64>>> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                (0..n_noise)
                    .map(|_| {
                        let xi = SampleSeed::draw(model.shape, n_flow, &mut rng);
                        Ok(model.sample_chunk(params, &contexts[i], &xi)?.as_slice().to_vec())
                    })
                    .collect()
            };
            let a = draw(theta)?;
            let b = draw(reference)?;
            let (mean_a, sd_a) = column_stats(&a);
            let (mean_b, sd_b) = column_stats(&b);
            let correction = mean_a.iter().zip(&mean_b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let position_correction = (0..horizon)
                .map(|h| {
                    (0..dim)
                        .map(|j| (mean_a[h * dim + j] - mean_b[h * dim + j]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut spread_ratio_dims = Vec::with_capacity(dim);
            for j in 0..dim {
                if sd_b[j] <= 0.0 {
                    return Err(Error::Domain(format!(
                        "reference spread is zero at probe state {i}, dimension {j}"
                    )));
                }
                spread_ratio_dims.push(sd_a[j] / sd_b[j]);
            }
            let spread_ratio = spread_ratio_dims.iter().sum::<f64>() / dim as f64;
            Ok(ProbeResult { correction, spread_ratio_dims, spread_ratio, position_correction })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut position_correction = vec![0.0; horizon];
    for s in &states {
        for (acc, c) in position_correction.iter_mut().zip(&s.position_correction) {
            *acc += c / states.len() as f64;
        }
    }
    Ok(MechanismReport { n_noise, states, position_correction })
}
