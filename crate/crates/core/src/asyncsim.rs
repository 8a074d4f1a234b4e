//! Chunked execution under inference latency.
//!
//! Chunk `k` is captured at `k*K` and starts executing at `k*K + d`, where `d`
//! is the inference delay and `K` the execution horizon. While the first chunk
//! is being computed the robot holds still.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::PolicyParams;
use crate::env::{Env, EnvState, Vec2};
use crate::error::{Error, Result};
use crate::flowpolicy::{ActionChunk, DeploymentContext, FlowModel, SampleSeed};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Capture-time observation and capture-time proprio.
    Naive,
    /// Capture-time observation, proprio rolled forward through committed actions.
    Rollforward,
    /// Execution-time observation and proprio. Evaluation only.
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::Rollforward, Strategy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Rollforward => "rollforward",
            Strategy::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown context strategy '{s}'")))
    }
}

/// Whether evaluation-only information may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Realism {
    Deployment,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsyncConfig {
    pub delay: usize,
    /// Actions of each chunk executed before the next takes over.
    pub horizon_k: usize,
    pub strategy: Strategy,
    pub n_flow: usize,
}

impl AsyncConfig {
    /// `K = max(d, 1)`.
    pub fn standard(delay: usize, strategy: Strategy, n_flow: usize) -> Self {
        AsyncConfig { delay, horizon_k: delay.max(1), strategy, n_flow }
    }

    pub fn validate(&self, chunk_len: usize) -> Result<()> {
        if self.delay > chunk_len {
            return Err(Error::Config(format!(
                "delay {} exceeds chunk length {chunk_len}",
                self.delay
            )));
        }
        if self.horizon_k < self.delay.max(1) || self.horizon_k > chunk_len {
            return Err(Error::Config(format!(
                "execution horizon {} must lie in [max(d, 1), H] = [{}, {chunk_len}]",
                self.horizon_k,
                self.delay.max(1)
            )));
        }
        if self.n_flow == 0 {
            return Err(Error::Config("n_flow must be at least 1".into()));
        }
        Ok(())
    }
}

/// Advances the robot position through actions already committed for execution.
pub fn rollforward_state(env: &Env, s_capture: Vec2, committed: &[Vec2]) -> Vec2 {
    committed.iter().fold(s_capture, |s, &a| env.move_robot(s, a))
}

/// Context for a chunk captured at `t_capture` and executed from `t_capture + d`.
/// `states[i]` is the state at time `i`; `actions[i]` the action executed at `i`.
pub fn build_context(
    env: &Env,
    strategy: Strategy,
    realism: Realism,
    states: &[EnvState],
    actions: &[Vec2],
    t_capture: usize,
    d: usize,
) -> Result<DeploymentContext> {
    let tag = env.config().task_tag;
    let need = match strategy {
        Strategy::Oracle => t_capture + d,
        _ => t_capture,
    };
    if need >= states.len() {
        return Err(Error::Index(format!("no state recorded for time {need}")));
    }
    let cap = &states[t_capture];
    match strategy {
        Strategy::Naive => Ok(DeploymentContext { observation: cap.observe(), proprio: cap.robot, task_tag: tag }),
        Strategy::Rollforward => {
            if t_capture + d > actions.len() {
                return Err(Error::Index(format!(
                    "committed actions up to {} are not scheduled yet",
                    t_capture + d
                )));
            }
            let s_hat = rollforward_state(env, cap.robot, &actions[t_capture..t_capture + d]);
            Ok(DeploymentContext { observation: cap.observe(), proprio: s_hat, task_tag: tag })
        }
        Strategy::Oracle => {
            if realism == Realism::Deployment {
                return Err(Error::Contract("the oracle context is evaluation-only".into()));
            }
            let s = &states[t_capture + d];
            Ok(DeploymentContext { observation: s.observe(), proprio: s.robot, task_tag: tag })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub chunk_id: usize,
    pub capture_time: usize,
    pub exec_start: usize,
    pub context: DeploymentContext,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub steps_used: usize,
    pub cycles: Vec<CycleRecord>,
    /// `states[i]` is the state at time `i`, including the final one.
    pub states: Vec<EnvState>,
    pub actions: Vec<Vec2>,
    /// Chunk id active at each executed step (`None` during the cold start).
    pub active_chunk: Vec<Option<usize>>,
    pub failure: Option<String>,
}

impl EpisodeResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,robot_x,robot_y,target_x,target_y,chunk,action_x,action_y\n");
        for (i, a) in self.actions.iter().enumerate() {
            let s = &self.states[i];
            let chunk = self.active_chunk[i].map_or(-1, |c| c as i64);
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{chunk},{},{}",
                s.robot.x, s.robot.y, s.target.x, s.target.y, a.x, a.y
            );
        }
        out
    }
}

/// Sampling noise for chunk `k` of the episode with seed `seed`. Identical for
/// every method and strategy evaluated on that episode.
pub fn chunk_seed(model: &FlowModel, seed: u64, k: usize, n_flow: usize) -> SampleSeed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    SampleSeed::draw(model.shape, n_flow, &mut rng)
}

pub fn run_episode(
    env: &Env,
    model: &FlowModel,
    params: &PolicyParams,
    cfg: &AsyncConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    cfg.validate(model.shape.horizon)?;
    model.check_params(params)?;
    let (d, k_exec) = (cfg.delay, cfg.horizon_k);
    let horizon = env.config().horizon;
    let mut state = env.reset(seed);
    let mut res = EpisodeResult {
        seed,
        success: false,
        steps_used: 0,
        cycles: Vec::new(),
        states: vec![state],
        actions: Vec::with_capacity(horizon),
        active_chunk: Vec::with_capacity(horizon),
        failure: None,
    };
    for t in 0..horizon {
        if t >= d && (t - d) % k_exec == 0 {
            let k = (t - d) / k_exec;
            let capture = t - d;
            let ctx = build_context(env, cfg.strategy, Realism::Evaluation, &res.states, &res.actions, capture, d)?;
            let chunk = match model.sample_chunk(params, &ctx, &chunk_seed(model, seed, k, cfg.n_flow)) {
                Ok(c) if c.is_finite() => c,
                Ok(_) | Err(Error::Sampling(_)) => {
                    res.failure = Some(format!("non-finite chunk {k} at step {t}"));
                    res.steps_used = t;
                    return Ok(res);
                }
                Err(e) => return Err(e),
            };
            res.cycles.push(CycleRecord { chunk_id: k, capture_time: capture, exec_start: t, context: ctx, chunk });
        }
        let (action, active) = match res.cycles.last() {
            Some(c) if t >= d => (c.chunk.action(t - c.exec_start), Some(c.chunk_id)),
            _ => (Vec2::ZERO, None),
        };
        let out = env.step(&state, action);
        res.actions.push(action);
        res.active_chunk.push(active);
        res.states.push(out.state);
        state = out.state;
        if out.done {
            res.success = out.success;
            res.steps_used = t + 1;
            return Ok(res);
        }
    }
    res.steps_used = horizon;
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub successes: usize,
    pub n: usize,
    pub flags: Vec<bool>,
}

impl BatchStats {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

/// Episodes with seeds `base_seed + i` for `i < n_episodes`.
pub fn run_batch(
    env: &Env,
    model: &FlowModel,
    params: &PolicyParams,
    cfg: &AsyncConfig,
    n_episodes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<BatchStats> {
    if n_episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    cfg.validate(model.shape.horizon)?;
    let flags = exec
        .map(n_episodes, |i| run_episode(env, model, params, cfg, base_seed.wrapping_add(i as u64)).map(|r| r.success))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let successes = flags.iter().filter(|&&f| f).count();
    Ok(BatchStats { successes, n: n_episodes, flags })
}
