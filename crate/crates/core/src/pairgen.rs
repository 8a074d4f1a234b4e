//! Temporal counterfactual preference pairs cut from demonstrations.
//!
//! The preferred chunk is what the frozen reference would emit from the state
//! at execution time; the rejected chunk is what it emits from the stale
//! capture-time state. Both use the same sampling noise.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffnet::PolicyParams;
use crate::env::{Dataset, Demonstration};
use crate::error::{Error, Result};
use crate::flowpolicy::{ActionChunk, DeploymentContext, FlowModel, SampleSeed};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelaySpec {
    pub d_max: usize,
    /// Staleness of the context the trainable policy sees.
    pub d_ctx: usize,
    /// Temporal offset between the preferred and rejected reference inputs.
    pub d_dpo: usize,
}

/// Ranges the two delays are drawn from: `d_ctx` in `0..=ctx_max`,
/// `d_dpo` in `1..=dpo_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayBounds {
    pub ctx_max: usize,
    pub dpo_max: usize,
}

impl DelayBounds {
    pub fn uniform(d_max: usize) -> Self {
        DelayBounds { ctx_max: d_max, dpo_max: d_max }
    }

    pub fn largest(&self) -> usize {
        self.ctx_max.max(self.dpo_max)
    }
}

pub fn sample_delays<R: Rng + ?Sized>(rng: &mut R, d_max: usize) -> Result<DelaySpec> {
    sample_delays_in(rng, DelayBounds::uniform(d_max))
}

/// Independent uniform draws, `d_ctx` first.
pub fn sample_delays_in<R: Rng + ?Sized>(rng: &mut R, b: DelayBounds) -> Result<DelaySpec> {
    if b.dpo_max < 1 {
        return Err(Error::Config(format!("d_max must be at least 1, got {}", b.dpo_max)));
    }
    let d_ctx = rng.random_range(0..=b.ctx_max);
    let d_dpo = rng.random_range(1..=b.dpo_max);
    Ok(DelaySpec { d_max: b.largest(), d_ctx, d_dpo })
}

/// Expert actions `t + d_ctx .. t + d_ctx + H`, padded with the final action.
pub fn expert_slice(
    demo: &Demonstration,
    t: usize,
    d_ctx: usize,
    model: &FlowModel,
) -> Result<ActionChunk> {
    let start = t + d_ctx;
    if start >= demo.len() {
        return Err(Error::Index(format!(
            "slice start {start} outside a demonstration of length {}",
            demo.len()
        )));
    }
    let last = demo.len() - 1;
    let mut data = Vec::with_capacity(model.shape.len());
    for i in 0..model.shape.horizon {
        let a = demo.steps[(start + i).min(last)].action;
        data.extend_from_slice(&[a.x, a.y]);
    }
    ActionChunk::new(model.shape, data)
}

/// Context built from the recorded observation at `obs_idx` and the recorded
/// robot position at `proprio_idx`.
pub fn demo_context(
    demo: &Demonstration,
    obs_idx: usize,
    proprio_idx: usize,
    task_tag: f64,
) -> DeploymentContext {
    DeploymentContext {
        observation: demo.steps[obs_idx].state.observe(),
        proprio: demo.steps[proprio_idx].state.robot,
        task_tag,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub episode: usize,
    pub t: usize,
    pub context: DeploymentContext,
    pub preferred: ActionChunk,
    pub rejected: ActionChunk,
    pub expert: ActionChunk,
    pub delays: DelaySpec,
    pub contrast: f64,
}

/// Builds the deployment context, expert anchor and the shared-noise pair.
#[allow(clippy::too_many_arguments)]
pub fn make_pair(
    model: &FlowModel,
    reference: &PolicyParams,
    demo: &Demonstration,
    episode: usize,
    t: usize,
    delays: DelaySpec,
    xi: &SampleSeed,
    task_tag: f64,
) -> Result<PreferenceTriple> {
    let reach = t + delays.d_ctx.max(delays.d_dpo);
    if reach >= demo.len() {
        return Err(Error::Index(format!(
            "pair at t={t} with delays ({}, {}) exceeds demonstration length {}",
            delays.d_ctx,
            delays.d_dpo,
            demo.len()
        )));
    }
    let future = t + delays.d_dpo;
    let preferred = model.sample_chunk(reference, &demo_context(demo, future, future, task_tag), xi)?;
    let rejected = model.sample_chunk(reference, &demo_context(demo, t, t, task_tag), xi)?;
    let context = demo_context(demo, t, t + delays.d_ctx, task_tag);
    let expert = expert_slice(demo, t, delays.d_ctx, model)?;
    let contrast = preferred.distance(&rejected);
    Ok(PreferenceTriple { episode, t, context, preferred, rejected, expert, delays, contrast })
}

/// Which training example a batch slot uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleIndex {
    pub delays: DelaySpec,
    pub episode: usize,
    pub t: usize,
}

/// Draws delays, then an episode long enough for them, then a start index.
/// Episodes too short for the largest delay bound are never chosen.
pub struct ExampleSampler<'a> {
    dataset: &'a Dataset,
    eligible: Vec<usize>,
    bounds: DelayBounds,
}

impl<'a> ExampleSampler<'a> {
    pub fn new(dataset: &'a Dataset, bounds: DelayBounds) -> Result<Self> {
        let eligible: Vec<usize> = dataset
            .demos
            .iter()
            .enumerate()
            .filter(|(_, d)| d.len() > bounds.largest())
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(format!(
                "no demonstration is longer than the largest delay {}",
                bounds.largest()
            )));
        }
        Ok(ExampleSampler { dataset, eligible, bounds })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ExampleIndex> {
        let delays = sample_delays_in(rng, self.bounds)?;
        let episode = self.eligible[rng.random_range(0..self.eligible.len())];
        let len = self.dataset.demos[episode].len();
        let t = rng.random_range(0..len - delays.d_ctx.max(delays.d_dpo));
        Ok(ExampleIndex { delays, episode, t })
    }
}

/// `n` triples drawn the way a training step draws them, triple `i` from
/// stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn pair_pool(
    model: &FlowModel,
    reference: &PolicyParams,
    sampler: &ExampleSampler<'_>,
    n: usize,
    seed: u64,
    n_flow: usize,
    task_tag: f64,
    exec: Execution,
) -> Result<Vec<PreferenceTriple>> {
    exec.map(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let ix = sampler.sample(&mut rng)?;
        let xi = SampleSeed::draw(model.shape, n_flow, &mut rng);
        let demo = &sampler.dataset().demos[ix.episode];
        make_pair(model, reference, demo, ix.episode, ix.t, ix.delays, &xi, task_tag)
    })
    .into_iter()
    .collect()
}

/// Linear-interpolation percentile of `values` at `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Domain(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastFilter {
    pub threshold: f64,
    /// Per input triple: true when it is dropped from the preference term.
    pub dpo_excluded: Vec<bool>,
    pub n_excluded: usize,
    /// Every triple stays in the anchor term.
    pub n_sft_retained: usize,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

pub fn filter_by_contrast(contrasts: &[f64], threshold: f64) -> Result<ContrastFilter> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Domain(format!("contrast threshold must be >= 0, got {threshold}")));
    }
    let dpo_excluded: Vec<bool> = contrasts.iter().map(|&c| c < threshold).collect();
    let n_excluded = dpo_excluded.iter().filter(|&&e| e).count();
    let (p10, p50, p90) = if contrasts.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (percentile(contrasts, 10.0)?, percentile(contrasts, 50.0)?, percentile(contrasts, 90.0)?)
    };
    Ok(ContrastFilter {
        threshold,
        dpo_excluded,
        n_excluded,
        n_sft_retained: contrasts.len(),
        p10,
        p50,
        p90,
    })
}

/// One triple per line: indices, delays, contrast, then the three flattened
/// chunks separated by `|`.
pub fn pair_pool_text(triples: &[PreferenceTriple]) -> String {
    let mut out = String::from("# episode t d_ctx d_dpo contrast | preferred | rejected | expert\n");
    for p in triples {
        let _ = write!(
            out,
            "{} {} {} {} {}",
            p.episode, p.t, p.delays.d_ctx, p.delays.d_dpo, p.contrast
        );
        for chunk in [&p.preferred, &p.rejected, &p.expert] {
            out.push_str(" |");
            for v in chunk.as_slice() {
                let _ = write!(out, " {v}");
            }
        }
        out.push('\n');
    }
    out
}
