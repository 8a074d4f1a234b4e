//! Planar intercept task: a robot point chases a target that drifts with
//! constant velocity. Includes a lead-pursuit expert, demonstration generation
//! and the `DFLDSET2` dataset format.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use serde::{Deserialize, Serialize};

use crate::diffnet::ByteCursor;
use crate::error::{Error, Result};
use crate::par::Execution;

const DATASET_MAGIC: &[u8; 8] = b"DFLDSET2";
pub const ACTION_DIM: usize = 2;
const RECORD_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn clamp_box(self, half_width: f64) -> Self {
        Vec2::new(self.x.clamp(-half_width, half_width), self.y.clamp(-half_width, half_width))
    }

    pub fn clip_unit(self) -> Self {
        self.clamp_box(1.0)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Direction of the target's drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Drift {
    /// Counter-clockwise, tangent to the spawn position.
    Tangential,
    /// Along `+x` for every episode, spawning on the `-x` half.
    Conveyor,
}

/// Task geometry and dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Half-width `W` of the square workspace `[-W, W]^2`.
    pub half_width: f64,
    /// Episode horizon `T` in control steps.
    pub horizon: usize,
    pub success_radius: f64,
    /// Robot displacement per unit action per step.
    pub step_gain: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Spawn annulus for the target, as fractions of `W`.
    pub spawn_inner: f64,
    pub spawn_outer: f64,
    pub task_tag: f64,
    /// Expert proportional gain, in units of `1/step_gain`.
    pub expert_gain: f64,
    pub drift: Drift,
    /// Std of Gaussian noise added to the expert's action while recording
    /// demonstrations. The executed (noisy) action is what gets recorded.
    pub demo_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            half_width: 2.0,
            horizon: 40,
            success_radius: 0.12,
            step_gain: 0.1,
            speed_min: 0.05,
            speed_max: 0.09,
            spawn_inner: 0.6,
            spawn_outer: 0.8,
            task_tag: 1.0,
            expert_gain: 1.0,
            drift: Drift::Conveyor,
            demo_noise: 0.0,
        }
    }
}

impl EnvConfig {
    /// Same geometry with a motionless target.
    pub fn stationary() -> Self {
        EnvConfig { speed_min: 0.0, speed_max: 0.0, ..EnvConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("half_width", self.half_width),
            ("success_radius", self.success_radius),
            ("step_gain", self.step_gain),
            ("expert_gain", self.expert_gain),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be at least 1".into()));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return Err(Error::Config(format!(
                "env speeds must satisfy 0 <= min <= max, got [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        if !(0.0 <= self.spawn_inner && self.spawn_inner <= self.spawn_outer && self.spawn_outer <= 1.0) {
            return Err(Error::Config("env spawn band must satisfy 0 <= inner <= outer <= 1".into()));
        }
        if !(self.demo_noise.is_finite() && self.demo_noise >= 0.0) {
            return Err(Error::Config("env.demo_noise must be >= 0".into()));
        }
        if !self.task_tag.is_finite() {
            return Err(Error::Config("env.task_tag must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub robot: Vec2,
    pub target: Vec2,
    /// Constant for the whole episode.
    pub velocity: Vec2,
}

impl EnvState {
    pub fn observe(&self) -> Observation {
        Observation { target: self.target, time: self.t }
    }
}

/// Snapshot of the target position taken at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub target: Vec2,
    pub time: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub success: bool,
    pub done: bool,
}

/// The intercept environment. Stateless apart from its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    cfg: EnvConfig,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Env { cfg })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Robot at the origin; target uniform (by area) on the spawn annulus, or
    /// on its upstream half under conveyor drift, at a uniform random speed.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.cfg.half_width;
        let (r_in, r_out) = (self.cfg.spawn_inner * w, self.cfg.spawn_outer * w);
        let u: f64 = rng.random();
        let radius = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
        let angle = match self.cfg.drift {
            Drift::Tangential => rng.random::<f64>() * TAU,
            // Upstream half only, so the target crosses the workspace.
            Drift::Conveyor => FRAC_PI_2 + rng.random::<f64>() * PI,
        };
        let speed = self.cfg.speed_min + rng.random::<f64>() * (self.cfg.speed_max - self.cfg.speed_min);
        let target = Vec2::new(radius * angle.cos(), radius * angle.sin()).clamp_box(w);
        let direction = match self.cfg.drift {
            Drift::Tangential => Vec2::new(-angle.sin(), angle.cos()),
            Drift::Conveyor => Vec2::new(1.0, 0.0),
        };
        let velocity = direction * speed;
        EnvState { t: 0, robot: Vec2::ZERO, target, velocity }
    }

    /// Robot update alone; the rule used to roll a proprio estimate forward.
    pub fn move_robot(&self, robot: Vec2, action: Vec2) -> Vec2 {
        (robot + action.clip_unit() * self.cfg.step_gain).clamp_box(self.cfg.half_width)
    }

    pub fn step(&self, state: &EnvState, action: Vec2) -> StepOutcome {
        let w = self.cfg.half_width;
        let robot = self.move_robot(state.robot, action);
        let target = (state.target + state.velocity).clamp_box(w);
        let next = EnvState { t: state.t + 1, robot, target, velocity: state.velocity };
        let success = (robot - target).norm() <= self.cfg.success_radius;
        StepOutcome { state: next, success, done: success || next.t >= self.cfg.horizon }
    }

    /// Lead pursuit: aim at where the target will be when the robot can get
    /// there, move there at the largest admissible rate.
    pub fn expert_action(&self, state: &EnvState) -> Vec2 {
        let gap = state.target - state.robot;
        if gap.norm() <= self.cfg.success_radius {
            return Vec2::ZERO;
        }
        let next_target = state.target + state.velocity;
        let mut t_hat = 0.0;
        for _ in 0..4 {
            let aim = next_target + state.velocity * t_hat;
            t_hat = ((aim - state.robot).norm() / self.cfg.step_gain - 1.0).max(0.0);
        }
        let aim = (next_target + state.velocity * t_hat).clamp_box(self.cfg.half_width);
        saturate((aim - state.robot) * (self.cfg.expert_gain / self.cfg.step_gain))
    }

    /// Pursues the target position observed `lag` steps earlier, without lead.
    pub fn stale_pursuit_action(&self, robot: Vec2, stale_target: Vec2) -> Vec2 {
        saturate((stale_target - robot) * (1.0 / self.cfg.step_gain))
    }

    /// Runs the (optionally noise-perturbed) expert from `reset(seed)` until
    /// success or the horizon.
    pub fn expert_episode(&self, seed: u64) -> Demonstration {
        let mut state = self.reset(seed);
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(1);
        loop {
            let mut action = self.expert_action(&state);
            if self.cfg.demo_noise > 0.0 {
                let (nx, ny): (f64, f64) = (noise.sample(StandardNormal), noise.sample(StandardNormal));
                action = (action + Vec2::new(nx, ny) * self.cfg.demo_noise).clip_unit();
            }
            steps.push(DemoStep { state, action });
            let out = self.step(&state, action);
            if out.done {
                return Demonstration { episode_id: seed, success: out.success, steps };
            }
            state = out.state;
        }
    }

    /// Episode driven by [`Env::stale_pursuit_action`] with a fixed observation lag.
    pub fn stale_pursuit_episode(&self, seed: u64, lag: usize) -> bool {
        let mut state = self.reset(seed);
        let mut history = vec![state.target];
        loop {
            let seen = history[history.len().saturating_sub(lag + 1)];
            let out = self.step(&state, self.stale_pursuit_action(state.robot, seen));
            if out.done {
                return out.success;
            }
            state = out.state;
            history.push(state.target);
        }
    }
}

/// Scales an action uniformly so its largest component is at most 1.
fn saturate(a: Vec2) -> Vec2 {
    let m = a.x.abs().max(a.y.abs());
    if m > 1.0 {
        a * (1.0 / m)
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoStep {
    pub state: EnvState,
    pub action: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub episode_id: u64,
    pub success: bool,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Successful expert demonstrations plus the chunk length they were cut for.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub chunk_len: usize,
    pub demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSummary {
    pub retained: usize,
    pub total: usize,
}

impl DemoSummary {
    pub fn success_rate(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }
}

/// Minimum expert success rate for a dataset to be accepted.
pub const MIN_EXPERT_SUCCESS: f64 = 0.9;

/// Runs the expert on seeds `seed..seed + n` and keeps the successful episodes.
pub fn generate_demos(
    env: &Env,
    n_episodes: usize,
    seed: u64,
    chunk_len: usize,
    exec: Execution,
) -> Result<(Dataset, DemoSummary)> {
    if n_episodes == 0 {
        return Err(Error::Config("need at least one demonstration episode".into()));
    }
    let episodes = exec.map(n_episodes, |i| env.expert_episode(seed.wrapping_add(i as u64)));
    let demos: Vec<_> = episodes.into_iter().filter(|d| d.success).collect();
    let summary = DemoSummary { retained: demos.len(), total: n_episodes };
    if summary.success_rate() < MIN_EXPERT_SUCCESS {
        return Err(Error::Config(format!(
            "expert solved only {}/{} episodes; environment is misconfigured",
            summary.retained, summary.total
        )));
    }
    Ok((Dataset { chunk_len, demos }, summary))
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.demos.len(), ACTION_DIM, 2, 2, self.chunk_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for demo in &self.demos {
            out.extend_from_slice(&demo.episode_id.to_le_bytes());
            out.extend_from_slice(&(demo.steps.len() as u32).to_le_bytes());
            for s in &demo.steps {
                for v in record(s) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut cur = ByteCursor::new(bytes);
        if cur.take(8).ok_or_else(|| bad("truncated magic"))? != DATASET_MAGIC {
            return Err(bad("bad magic, expected DFLDSET2"));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let [count, action_dim, obs_dim, proprio_dim, chunk_len] = header;
        if (action_dim, obs_dim, proprio_dim) != (ACTION_DIM, 2, 2) {
            return Err(bad("unsupported dimensions"));
        }
        let mut demos = Vec::with_capacity(count);
        for _ in 0..count {
            let id = cur.u64().ok_or_else(|| bad("truncated episode id"))?;
            let len = cur.u32().ok_or_else(|| bad("truncated episode length"))? as usize;
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                let r = cur.f64s(RECORD_LEN).ok_or_else(|| bad("truncated record"))?;
                if r[0] < 0.0 || r[0].fract() != 0.0 {
                    return Err(bad("record time index is not a non-negative integer"));
                }
                let state = EnvState {
                    t: r[0] as usize,
                    robot: Vec2::new(r[1], r[2]),
                    target: Vec2::new(r[3], r[4]),
                    velocity: Vec2::new(r[5], r[6]),
                };
                steps.push(DemoStep { state, action: Vec2::new(r[7], r[8]) });
            }
            demos.push(Demonstration { episode_id: id, success: true, steps });
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Dataset { chunk_len, demos })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path)
    }

    /// Same fields as the binary records, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "episode,t,robot_x,robot_y,target_x,target_y,vel_x,vel_y,action_x,action_y\n",
        );
        for (i, demo) in self.demos.iter().enumerate() {
            for s in &demo.steps {
                let _ = write!(out, "{i}");
                for v in record(s) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

fn record(s: &DemoStep) -> [f64; RECORD_LEN] {
    let st = &s.state;
    [
        st.t as f64,
        st.robot.x,
        st.robot.y,
        st.target.x,
        st.target.y,
        st.velocity.x,
        st.velocity.y,
        s.action.x,
        s.action.y,
    ]
}
