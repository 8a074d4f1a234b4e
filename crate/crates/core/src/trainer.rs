//! Training objectives and loops: asynchronous behavior cloning for the
//! reference, the anchored preference objective, and its control variants.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{adamw_step, cosine_lr, sigmoid, AdamWHyper, GradAccum, LrSchedule, OptimizerState, PolicyParams};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::flowpolicy::{FlowDraw, FlowModel, SampleSeed};
use crate::pairgen::{demo_context, expert_slice, DelayBounds, ExampleSampler};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Behavior cloning from scratch on stale contexts.
    ReferenceBc,
    #[default]
    Deflect,
    /// Same schedule as `Deflect` with the preference weight forced to zero.
    SftContinue,
    /// Preference term only.
    NoAnchor,
    /// Preferred chunk scored under the future context, rejected under the stale one.
    MatchedInput,
    /// Expert chunk preferred over the reference chunk, both at zero delay.
    CleanPreference,
    /// Preference offsets restricted to `{1, 2}`.
    NarrowDelay,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::ReferenceBc,
        TrainMode::Deflect,
        TrainMode::SftContinue,
        TrainMode::NoAnchor,
        TrainMode::MatchedInput,
        TrainMode::CleanPreference,
        TrainMode::NarrowDelay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::ReferenceBc => "reference-bc",
            TrainMode::Deflect => "deflect",
            TrainMode::SftContinue => "sft-continue",
            TrainMode::NoAnchor => "no-anchor",
            TrainMode::MatchedInput => "matched-input",
            TrainMode::CleanPreference => "clean-preference",
            TrainMode::NarrowDelay => "narrow-delay",
        }
    }

    /// Weights after the mode's overrides.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            TrainMode::ReferenceBc | TrainMode::SftContinue => LossWeights { lambda_dpo: 0.0, ..w },
            TrainMode::NoAnchor => LossWeights { lambda_sft: 0.0, ..w },
            _ => w,
        }
    }

    pub fn delay_bounds(self, cfg: &TrainConfig) -> DelayBounds {
        let dpo_max = match self {
            TrainMode::NarrowDelay => cfg.dpo_delay_max.min(2),
            _ => cfg.dpo_delay_max,
        };
        DelayBounds { ctx_max: cfg.ctx_delay_max, dpo_max }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_sft: f64,
    pub lambda_dpo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 1.0, lambda_sft: 1.0, lambda_dpo: 0.02 }
    }
}

/// Preference weights swept by the ablation battery.
pub const LAMBDA_SWEEP: [f64; 7] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, v) in [("lambda_sft", self.lambda_sft), ("lambda_dpo", self.lambda_dpo)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The four flow-matching losses entering the preference margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginTerms {
    pub theta_plus: f64,
    pub theta_minus: f64,
    pub ref_plus: f64,
    pub ref_minus: f64,
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Returns `(M, -log sigmoid(M))` with
/// `M = -beta * ((L_theta+ - L_ref+) - (L_theta- - L_ref-))`.
pub fn dpo_margin(m: &MarginTerms, beta: f64) -> Result<(f64, f64)> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let margin = -beta * ((m.theta_plus - m.ref_plus) - (m.theta_minus - m.ref_minus));
    Ok((margin, softplus(-margin)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Upper bound of the context staleness `d_ctx`.
    pub ctx_delay_max: usize,
    /// Upper bound of the preference offset `d_dpo`.
    pub dpo_delay_max: usize,
    pub seed: u64,
    /// Pairs with contrast below this are left out of the preference term.
    pub contrast_threshold: Option<f64>,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub n_flow: usize,
    /// Ceiling on the final anchor loss; exceeding it is a convergence failure.
    pub loss_ceiling: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Deflect,
            steps: 1000,
            batch_size: 64,
            weights: LossWeights::default(),
            ctx_delay_max: 4,
            dpo_delay_max: 4,
            seed: 0,
            contrast_threshold: None,
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            n_flow: 5,
            loss_ceiling: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.dpo_delay_max == 0 {
            return Err(Error::Config("dpo_delay_max must be at least 1".into()));
        }
        if self.n_flow == 0 {
            return Err(Error::Config("n_flow must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if let Some(t) = self.contrast_threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::Config(format!("contrast_threshold must be >= 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: (self.warmup_fraction * self.steps as f64).round() as usize,
            total_steps: self.steps,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    /// Batch mean of the anchor loss.
    pub fm_loss: f64,
    /// Mean preference loss over pairs that were not filtered out.
    pub dpo_loss: f64,
    pub margin_mean: f64,
    pub contrast_mean: f64,
    pub excluded_fraction: f64,
    /// Batch mean of the full objective.
    pub objective: f64,
    /// Number of `(tau, eps)` draws taken; one per batch element.
    pub flow_draws: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<StepReport>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,fm_loss,dpo_loss,margin_mean,contrast_mean,excluded_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.lr, r.fm_loss, r.dpo_loss, r.margin_mean, r.contrast_mean, r.excluded_fraction
            );
        }
        out
    }

    /// Mean anchor loss over the last `n` rows.
    pub fn tail_fm_loss(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.fm_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: TrainLog,
}

/// Per batch slot result before the ordered reduction.
struct ExampleOut {
    grads: GradAccum,
    anchor: f64,
    dpo: Option<(f64, f64)>,
    contrast: Option<f64>,
    excluded: bool,
    objective: f64,
}

/// Batch objective evaluator bound to a dataset, a reference and a config.
pub struct Objective<'a> {
    model: FlowModel,
    sampler: ExampleSampler<'a>,
    reference: Option<&'a PolicyParams>,
    mode: TrainMode,
    weights: LossWeights,
    cfg: TrainConfig,
    task_tag: f64,
    exec: Execution,
}

impl<'a> Objective<'a> {
    pub fn new(
        model: FlowModel,
        dataset: &'a Dataset,
        reference: Option<&'a PolicyParams>,
        cfg: &TrainConfig,
        task_tag: f64,
        exec: Execution,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.demos.is_empty() {
            return Err(Error::Config("training needs at least one demonstration".into()));
        }
        let weights = cfg.mode.effective_weights(cfg.weights);
        if weights.lambda_dpo > 0.0 {
            let r = reference.ok_or_else(|| {
                Error::Config(format!("mode {} needs a reference checkpoint", cfg.mode))
            })?;
            model.check_params(r)?;
        }
        let sampler = ExampleSampler::new(dataset, cfg.mode.delay_bounds(cfg))?;
        Ok(Objective { model, sampler, reference, mode: cfg.mode, weights, cfg: cfg.clone(), task_tag, exec })
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// Independent stream per (step, slot) so results do not depend on scheduling.
    fn element_rng(&self, step: usize, slot: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((step as u64) << 32) | slot as u64);
        rng
    }

    fn example(&self, theta: &PolicyParams, step: usize, slot: usize) -> Result<ExampleOut> {
        let m = &self.model;
        let b = self.cfg.batch_size as f64;
        let w = self.weights;
        let mut rng = self.element_rng(step, slot);
        let ix = self.sampler.sample(&mut rng)?;
        let xi = SampleSeed::draw(m.shape, self.cfg.n_flow, &mut rng);
        let draw = FlowDraw::draw(m.shape, &mut rng);

        let demo = &self.sampler.dataset().demos[ix.episode];
        let (t, d) = (ix.t, ix.delays);
        let c_dep = demo_context(demo, t, t + d.d_ctx, self.task_tag);
        let a_exp = expert_slice(demo, t, d.d_ctx, m)?;

        let mut grads = GradAccum::zeros_like(theta);
        let anchor = m.fm_forward(theta, &a_exp, &c_dep, &draw)?;
        m.fm_backward(theta, &anchor, w.lambda_sft / b, &mut grads)?;
        let mut out = ExampleOut {
            grads,
            anchor: anchor.loss,
            dpo: None,
            contrast: None,
            excluded: false,
            objective: w.lambda_sft * anchor.loss,
        };
        if w.lambda_dpo == 0.0 {
            return Ok(out);
        }

        let reference = self.reference.expect("checked in Objective::new");
        let stale = demo_context(demo, t, t, self.task_tag);
        let (plus, minus, ctx_plus, ctx_minus) = match self.mode {
            TrainMode::CleanPreference => {
                let plus = expert_slice(demo, t, 0, m)?;
                let minus = m.sample_chunk(reference, &stale, &xi)?;
                (plus, minus, stale, stale)
            }
            _ => {
                let f = t + d.d_dpo;
                let future = demo_context(demo, f, f, self.task_tag);
                let plus = m.sample_chunk(reference, &future, &xi)?;
                let minus = m.sample_chunk(reference, &stale, &xi)?;
                if self.mode == TrainMode::MatchedInput {
                    (plus, minus, future, stale)
                } else {
                    (plus, minus, c_dep, c_dep)
                }
            }
        };
        let contrast = plus.distance(&minus);
        out.contrast = Some(contrast);
        if self.cfg.contrast_threshold.is_some_and(|th| contrast < th) {
            out.excluded = true;
            return Ok(out);
        }

        let th_plus = m.fm_forward(theta, &plus, &ctx_plus, &draw)?;
        let th_minus = m.fm_forward(theta, &minus, &ctx_minus, &draw)?;
        let terms = MarginTerms {
            theta_plus: th_plus.loss,
            theta_minus: th_minus.loss,
            ref_plus: m.fm_loss_value(reference, &plus, &ctx_plus, &draw)?,
            ref_minus: m.fm_loss_value(reference, &minus, &ctx_minus, &draw)?,
        };
        let (margin, loss) = dpo_margin(&terms, w.beta)?;
        // d loss / d L_theta+ = beta * sigmoid(-M); the minus branch flips sign.
        let g = w.lambda_dpo * w.beta * sigmoid(-margin) / b;
        m.fm_backward(theta, &th_plus, g, &mut out.grads)?;
        m.fm_backward(theta, &th_minus, -g, &mut out.grads)?;
        out.dpo = Some((loss, margin));
        out.objective += w.lambda_dpo * loss;
        Ok(out)
    }

    /// Batch-mean objective and its gradient at training step `step`.
    pub fn evaluate(&self, theta: &PolicyParams, step: usize) -> Result<(GradAccum, StepReport)> {
        self.model.check_params(theta)?;
        if let Some(r) = self.reference {
            if !GradAccum::zeros_like(r).matches(theta) {
                return Err(Error::Contract("trainable and reference networks differ in shape".into()));
            }
        }
        let b = self.cfg.batch_size;
        let outs = self.exec.map(b, |i| self.example(theta, step, i));
        let mut grads = GradAccum::zeros_like(theta);
        let mut rep = StepReport { step, ..Default::default() };
        let (mut n_dpo, mut n_excl) = (0usize, 0usize);
        for out in outs {
            let out = out.map_err(|e| at_step(e, step))?;
            grads.add_scaled(1.0, &out.grads);
            rep.fm_loss += out.anchor;
            rep.objective += out.objective;
            rep.flow_draws += 1;
            if let Some(c) = out.contrast {
                rep.contrast_mean += c;
                rep.pairs += 1;
            }
            if out.excluded {
                n_excl += 1;
            }
            if let Some((l, m)) = out.dpo {
                rep.dpo_loss += l;
                rep.margin_mean += m;
                n_dpo += 1;
            }
        }
        let bf = b as f64;
        rep.fm_loss /= bf;
        rep.objective /= bf;
        rep.excluded_fraction = n_excl as f64 / bf;
        if rep.pairs > 0 {
            rep.contrast_mean /= rep.pairs as f64;
        }
        if n_dpo > 0 {
            rep.dpo_loss /= n_dpo as f64;
            rep.margin_mean /= n_dpo as f64;
        }
        if !rep.objective.is_finite() {
            return Err(Error::Training { step, reason: format!("non-finite objective {}", rep.objective) });
        }
        Ok((grads, rep))
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { reason, .. } => Error::Training { step, reason },
        other => other,
    }
}

fn run(
    model: FlowModel,
    dataset: &Dataset,
    mut theta: PolicyParams,
    reference: Option<&PolicyParams>,
    cfg: &TrainConfig,
    task_tag: f64,
    exec: Execution,
) -> Result<TrainOutcome> {
    let objective = Objective::new(model, dataset, reference, cfg, task_tag, exec)?;
    let mut opt = OptimizerState::new(&theta, cfg.schedule(), AdamWHyper::default())?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let (grads, mut rep) = objective.evaluate(&theta, step)?;
        rep.lr = cosine_lr(&opt)?;
        adamw_step(&mut theta, &grads, &mut opt)?;
        log.rows.push(rep);
    }
    if let Some(ceiling) = cfg.loss_ceiling {
        let tail = log.tail_fm_loss((cfg.steps / 10).max(1));
        if cfg.steps > 0 && tail > ceiling {
            return Err(Error::Convergence(format!(
                "final flow-matching loss {tail:.4} above ceiling {ceiling}"
            )));
        }
    }
    Ok(TrainOutcome { params: theta, log })
}

/// Asynchronous behavior cloning from a seeded random initialization.
pub fn train_reference(
    model: FlowModel,
    dataset: &Dataset,
    hidden: &[usize],
    cfg: &TrainConfig,
    task_tag: f64,
    exec: Execution,
) -> Result<TrainOutcome> {
    if cfg.mode != TrainMode::ReferenceBc {
        return Err(Error::Config(format!("train_reference called with mode {}", cfg.mode)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let theta = model.init_params(hidden, &mut rng)?;
    run(model, dataset, theta, None, cfg, task_tag, exec)
}

/// Post-training from the reference with a fresh optimizer and full schedule.
pub fn train_variant(
    model: FlowModel,
    dataset: &Dataset,
    reference: &PolicyParams,
    cfg: &TrainConfig,
    task_tag: f64,
    exec: Execution,
) -> Result<TrainOutcome> {
    if cfg.mode == TrainMode::ReferenceBc {
        return Err(Error::Config("reference-bc is not a post-training mode".into()));
    }
    run(model, dataset, reference.clone(), Some(reference), cfg, task_tag, exec)
}
