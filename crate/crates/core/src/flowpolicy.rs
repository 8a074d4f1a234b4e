//! Flow-matching action-chunk policy: context encoding, the linear noise/action
//! interpolant, Euler sampling, and the per-example regression loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{ForwardTrace, GradAccum, PolicyParams};
use crate::env::{Observation, Vec2};
use crate::error::{Error, Result};

pub const CONTEXT_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkShape {
    /// Actions per chunk `H`.
    pub horizon: usize,
    pub action_dim: usize,
}

impl ChunkShape {
    pub fn len(self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl Default for ChunkShape {
    fn default() -> Self {
        ChunkShape { horizon: 8, action_dim: 2 }
    }
}

/// `H x A` actions stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    shape: ChunkShape,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(shape: ChunkShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "chunk of shape {}x{} given {} values",
                shape.horizon,
                shape.action_dim,
                data.len()
            )));
        }
        Ok(ActionChunk { shape, data })
    }

    pub fn filled(shape: ChunkShape, value: f64) -> Self {
        ActionChunk { shape, data: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> ChunkShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let a = self.shape.action_dim;
        &self.data[i * a..(i + 1) * a]
    }

    /// Row `i` as a planar action (requires `action_dim == 2`).
    pub fn action(&self, i: usize) -> Vec2 {
        let r = self.row(i);
        Vec2::new(r[0], r[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &ActionChunk) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn gaussian<R: Rng + ?Sized>(shape: ChunkShape, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        ActionChunk { shape, data }
    }
}

/// The stale input available at inference time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeploymentContext {
    pub observation: Observation,
    /// Proprio estimate for the moment the chunk starts executing.
    pub proprio: Vec2,
    pub task_tag: f64,
}

/// `[target x, target y, proprio x, proprio y, tag]`, all scaled by `1/W`.
pub fn encode_context(ctx: &DeploymentContext, half_width: f64) -> [f64; CONTEXT_DIM] {
    let s = 1.0 / half_width;
    let o = ctx.observation.target;
    [o.x * s, o.y * s, ctx.proprio.x * s, ctx.proprio.y * s, ctx.task_tag * s]
}

/// Sampling randomness: the initial noise and the Euler step count.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeed {
    pub noise: ActionChunk,
    pub n_flow: usize,
}

impl SampleSeed {
    pub fn draw<R: Rng + ?Sized>(shape: ChunkShape, n_flow: usize, rng: &mut R) -> Self {
        SampleSeed { noise: ActionChunk::gaussian(shape, rng), n_flow }
    }
}

/// One Monte Carlo draw of flow time and noise for the regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub tau: f64,
    pub eps: ActionChunk,
}

impl FlowDraw {
    /// `tau` uniform on `[0, 1)`, `eps` standard normal. Draw order is fixed.
    pub fn draw<R: Rng + ?Sized>(shape: ChunkShape, rng: &mut R) -> Self {
        let tau = rng.random::<f64>();
        FlowDraw { tau, eps: ActionChunk::gaussian(shape, rng) }
    }
}

/// `tau * a + (1 - tau) * eps`, elementwise.
pub fn interpolate(a: &ActionChunk, eps: &ActionChunk, tau: f64) -> Result<ActionChunk> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("flow time {tau} outside [0, 1]")));
    }
    if a.shape != eps.shape {
        return Err(Error::Contract("interpolant shapes differ".into()));
    }
    let data = a.data.iter().zip(&eps.data).map(|(x, e)| tau * x + (1.0 - tau) * e).collect();
    Ok(ActionChunk { shape: a.shape, data })
}

/// Static description of the velocity field `v(x_tau, tau, ctx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowModel {
    pub shape: ChunkShape,
    /// Workspace half-width used to scale the context.
    pub half_width: f64,
}

impl FlowModel {
    pub fn input_dim(&self) -> usize {
        CONTEXT_DIM + self.shape.len() + 1
    }

    /// Fresh network: `[input, hidden.., H*A]`.
    pub fn init_params<R: Rng + ?Sized>(&self, hidden: &[usize], rng: &mut R) -> Result<PolicyParams> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(self.shape.len());
        PolicyParams::mlp(&sizes, rng)
    }

    pub fn check_params(&self, params: &PolicyParams) -> Result<()> {
        if params.input_dim() != self.input_dim() || params.output_dim() != self.shape.len() {
            return Err(Error::Contract(format!(
                "network maps {} -> {}, flow model needs {} -> {}",
                params.input_dim(),
                params.output_dim(),
                self.input_dim(),
                self.shape.len()
            )));
        }
        Ok(())
    }

    fn net_input(&self, ctx: &[f64; CONTEXT_DIM], x: &[f64], tau: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_dim());
        v.extend_from_slice(ctx);
        v.extend_from_slice(x);
        v.push(tau);
        v
    }

    fn check_chunk(&self, a: &ActionChunk) -> Result<()> {
        if a.shape != self.shape {
            return Err(Error::Contract(format!(
                "chunk shape {}x{} does not match policy {}x{}",
                a.shape.horizon, a.shape.action_dim, self.shape.horizon, self.shape.action_dim
            )));
        }
        Ok(())
    }

    /// `v - (a - eps)` for every `H x A` entry.
    fn residual(
        &self,
        params: &PolicyParams,
        a: &ActionChunk,
        ctx: &DeploymentContext,
        draw: &FlowDraw,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_chunk(a)?;
        self.check_chunk(&draw.eps)?;
        let x = interpolate(a, &draw.eps, draw.tau)?;
        let input = self.net_input(&encode_context(ctx, self.half_width), &x.data, draw.tau);
        let v = params.forward(&input)?;
        Ok(v.iter().zip(a.data.iter().zip(&draw.eps.data)).map(|(v, (a, e))| v - (a - e)).collect())
    }

    /// Loss value only (used for the gradient-free reference branch).
    pub fn fm_loss_value(
        &self,
        params: &PolicyParams,
        a: &ActionChunk,
        ctx: &DeploymentContext,
        draw: &FlowDraw,
    ) -> Result<f64> {
        let r = self.residual(params, a, ctx, draw)?;
        finite_loss(r.iter().map(|v| v * v).sum())
    }

    /// Forward half of the loss; keep the result to backpropagate later.
    pub fn fm_forward(
        &self,
        params: &PolicyParams,
        a: &ActionChunk,
        ctx: &DeploymentContext,
        draw: &FlowDraw,
    ) -> Result<FmEval> {
        self.check_params(params)?;
        self.check_chunk(a)?;
        self.check_chunk(&draw.eps)?;
        let x = interpolate(a, &draw.eps, draw.tau)?;
        let input = self.net_input(&encode_context(ctx, self.half_width), &x.data, draw.tau);
        let trace = params.forward_traced(&input)?;
        let residual: Vec<f64> = trace
            .output()
            .iter()
            .zip(a.data.iter().zip(&draw.eps.data))
            .map(|(v, (a, e))| v - (a - e))
            .collect();
        let loss = finite_loss(residual.iter().map(|v| v * v).sum())?;
        Ok(FmEval { trace, residual, loss })
    }

    /// Adds `weight * grad(loss)` into `grads`.
    pub fn fm_backward(
        &self,
        params: &PolicyParams,
        eval: &FmEval,
        weight: f64,
        grads: &mut GradAccum,
    ) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let upstream: Vec<f64> = eval.residual.iter().map(|v| 2.0 * weight * v).collect();
        params.backward_traced(&eval.trace, &upstream, grads)?;
        Ok(())
    }

    /// Adds `weight * grad(loss)` into `grads` and returns the loss.
    pub fn fm_loss_accumulate(
        &self,
        params: &PolicyParams,
        a: &ActionChunk,
        ctx: &DeploymentContext,
        draw: &FlowDraw,
        weight: f64,
        grads: &mut GradAccum,
    ) -> Result<f64> {
        let eval = self.fm_forward(params, a, ctx, draw)?;
        self.fm_backward(params, &eval, weight, grads)?;
        Ok(eval.loss)
    }

    pub fn fm_loss(
        &self,
        params: &PolicyParams,
        a: &ActionChunk,
        ctx: &DeploymentContext,
        draw: &FlowDraw,
    ) -> Result<(f64, GradAccum)> {
        let mut grads = GradAccum::zeros_like(params);
        let loss = self.fm_loss_accumulate(params, a, ctx, draw, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Euler integration of the learned flow from `seed.noise`.
    pub fn sample_chunk(
        &self,
        params: &PolicyParams,
        ctx: &DeploymentContext,
        seed: &SampleSeed,
    ) -> Result<ActionChunk> {
        self.check_params(params)?;
        self.check_chunk(&seed.noise)?;
        if seed.n_flow == 0 {
            return Err(Error::Config("n_flow must be at least 1".into()));
        }
        let enc = encode_context(ctx, self.half_width);
        let dt = 1.0 / seed.n_flow as f64;
        let mut x = seed.noise.data.clone();
        for k in 0..seed.n_flow {
            let tau = k as f64 * dt;
            let v = params.forward(&self.net_input(&enc, &x, tau))?;
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi += dt * vi;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampling(format!("non-finite state at Euler step {k}")));
            }
        }
        Ok(ActionChunk { shape: self.shape, data: x })
    }
}

/// A forward pass of the flow-matching loss kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FmEval {
    trace: ForwardTrace,
    residual: Vec<f64>,
    pub loss: f64,
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training { step: 0, reason: format!("non-finite flow-matching loss {loss}") })
    }
}
