//! Variance schedules, the forward noising process, the noise-prediction
//! loss and the ancestral sampler.
//!
//! Step indices are 1-based throughout: `t = 1` is the first noising step and
//! `t = T` the last. Schedule quantities are kept in f64 and applied to f32
//! tensors.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{Graph, NamedTensors, NodeId, ParamTable, Tensor};
use crate::rng::{self, Rng};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
const MAX_BETA: f64 = 0.999;
/// Samples per graph evaluation in [`generate`]; fixed so that output does
/// not depend on the worker count.
const GENERATE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_variance = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])
                }
            })
            .collect();
        NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variance
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::Argument(format!(
                "step {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear interpolation of β from `beta_start` at t = 1 to `beta_end` at t = T.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Argument(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Argument(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let last = (steps - 1) as f64;
    // Written as a convex combination so both endpoints are reproduced exactly.
    let beta = (0..steps)
        .map(|i| {
            let w = i as f64 / last;
            beta_start * (1.0 - w) + beta_end * w
        })
        .collect();
    Ok(NoiseSchedule::from_betas(ScheduleKind::Linear, beta))
}

/// Cosine schedule: ᾱ_t = f(t)/f(0) with f(t) = cos²(((t/T + s)/(1 + s))·π/2),
/// β_t = 1 − ᾱ_t/ᾱ_{t−1} clipped to 0.999.
pub fn make_cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Argument(format!("need at least 2 steps, got {steps}")));
    }
    if !(offset > 0.0 && offset.is_finite()) {
        return Err(Error::Argument(format!("cosine offset must be positive, got {offset}")));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut prev = 1.0;
    let mut beta = Vec::with_capacity(steps);
    for t in 1..=steps {
        let ab = f(t) / f0;
        beta.push((1.0 - ab / prev).min(MAX_BETA));
        prev = ab;
    }
    Ok(NoiseSchedule::from_betas(ScheduleKind::Cosine, beta))
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => make_linear_schedule(steps, DEFAULT_BETA_START, DEFAULT_BETA_END),
        ScheduleKind::Cosine => make_cosine_schedule(steps, DEFAULT_COSINE_OFFSET),
    }
}

fn affine(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    x.zip_map(y, |p, q| (a * p as f64 + b * q as f64) as f32)
}

/// One forward step: √(1−β_t)·x_{t−1} + √β_t·ε.
pub fn q_sample_step(x_prev: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t, false)?;
    let beta = schedule.beta(t);
    affine((1.0 - beta).sqrt(), x_prev, beta.sqrt(), noise)
}

/// Closed form of `t` forward steps: √ᾱ_t·x₀ + √(1−ᾱ_t)·ε. `t = 0` returns x₀.
pub fn q_sample_closed(x0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t, true)?;
    let ab = schedule.alpha_bar(t);
    affine(ab.sqrt(), x0, (1.0 - ab).sqrt(), noise)
}

/// Per-sample variant of [`q_sample_closed`] for a batch `[n, ...]` with one
/// step index per row.
pub fn q_sample_batch(x0: &Tensor, steps: &[u32], schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::Argument(format!(
            "x0 {:?} vs noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    if steps.len() != x0.shape()[0] {
        return Err(Error::Argument(format!(
            "{} step indices for batch of {}",
            steps.len(),
            x0.shape()[0]
        )));
    }
    let row = x0.row_len();
    let mut out = x0.clone();
    for (r, &t) in steps.iter().enumerate() {
        schedule.check_step(t as usize, true)?;
        let ab = schedule.alpha_bar(t as usize);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let dst = &mut out.data_mut()[r * row..(r + 1) * row];
        for (j, v) in dst.iter_mut().enumerate() {
            *v = (a * x0.row(r)[j] as f64 + b * noise.row(r)[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// A network ε_θ(x_t, t) that can be laid out on a compute graph.
pub trait NoisePredictor {
    fn params(&self) -> &ParamTable;

    /// Appends the prediction for input node `x` (batch `[n, c, h, w]`) at the
    /// given per-row step indices and returns the output node.
    fn build(&self, graph: &mut Graph, x: NodeId, steps: &[u32]) -> Result<NodeId>;

    fn predict(&self, x_t: &Tensor, steps: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let out = self.build(&mut g, x, steps)?;
        g.set_output(out);
        g.forward(&[self.params()]).cloned()
    }
}

/// The MSE noise-prediction objective for one batch, as a differentiable graph.
pub struct LossGraph {
    graph: Graph,
}

impl LossGraph {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Forward pass only.
    pub fn loss(&mut self, params: &ParamTable) -> Result<f32> {
        Ok(self.graph.forward(&[params])?.item())
    }

    /// Loss and gradients with respect to every parameter.
    pub fn loss_and_grad(&mut self, params: &ParamTable) -> Result<(f32, NamedTensors)> {
        let loss = self.loss(params)?;
        Ok((loss, self.graph.backward()?))
    }
}

/// Builds x_t from (x₀, t, ε) in closed form and the MSE between ε_θ(x_t, t)
/// and ε.
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    steps: &[u32],
    noise: &Tensor,
) -> Result<LossGraph> {
    if let Some(&t) = steps.iter().find(|&&t| t == 0 || t as usize > schedule.steps()) {
        return Err(Error::Argument(format!("training step {t} outside [1, {}]", schedule.steps())));
    }
    let x_t = q_sample_batch(x0, steps, schedule, noise)?;
    let mut graph = Graph::new();
    let x = graph.constant(x_t);
    let target = graph.constant(noise.clone());
    let pred = model.build(&mut graph, x, steps)?;
    let loss = graph.mse(pred, target);
    graph.set_output(loss);
    Ok(LossGraph { graph })
}

/// A training batch whose step and noise for each sample are drawn from a
/// stream keyed by `(seed, round, epoch, sample index)`. The same sample gets
/// the same corruption no matter which batch, client or worker it lands in.
pub fn keyed_noise_batch(
    images: &Tensor,
    indices: &[usize],
    total_steps: usize,
    seed: u64,
    round: u64,
    epoch: u64,
) -> Result<(Tensor, Vec<u32>, Tensor)> {
    use rand::Rng as _;
    let x0 = images.gather_rows(indices)?;
    let per = x0.row_len();
    let mut noise = Tensor::zeros(x0.shape());
    let mut steps = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let mut r = rng::substream(seed, &[rng::STREAM_SAMPLE_NOISE, round, epoch, i as u64]);
        steps.push(r.random_range(1..=total_steps as u32));
        rng::fill_normal(&mut r, &mut noise.data_mut()[row * per..(row + 1) * per]);
    }
    Ok((x0, steps, noise))
}

/// One reverse step: (1/√α_t)(x_t − β_t/√(1−ᾱ_t)·ε_θ(x_t, t)) + √β̃_t·z.
/// `z` must be all zeros at `t = 1`.
pub fn p_sample_step<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_step(t, false)?;
    if noise.shape() != x_t.shape() {
        return Err(Error::Argument(format!(
            "noise {:?} vs x_t {:?}",
            noise.shape(),
            x_t.shape()
        )));
    }
    if t == 1 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Argument("noise must be zero at the final step t = 1".into()));
    }
    let steps = vec![t as u32; x_t.shape()[0]];
    let eps = model.predict(x_t, &steps)?;
    Ok(posterior_step(x_t, &eps, t, schedule, noise))
}

fn posterior_step(x_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Tensor {
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = schedule.posterior_variance(t).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| {
            let mean = inv_sqrt_alpha * (x as f64 - eps_coef * e as f64);
            let z = if t == 1 { 0.0 } else { sigma * z as f64 };
            (mean + z) as f32
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data).expect("same shape as x_t")
}

/// Draws `count` samples of shape `sample_shape` by ancestral sampling from
/// t = T down to 1, clamped to [−1, 1].
///
/// Sample `i` uses its own random stream derived from `(seed, i)`, so a
/// sample's value does not depend on `count` or on how work is split across
/// the current rayon pool.
pub fn generate<M: NoisePredictor + Sync + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    sample_shape: &[usize],
    count: usize,
    seed: u64,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    let chunks: Vec<(usize, usize)> = (0..count)
        .step_by(GENERATE_CHUNK)
        .map(|s| (s, (s + GENERATE_CHUNK).min(count)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(lo, hi)| generate_chunk(model, schedule, sample_shape, lo, hi, seed))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

fn generate_chunk<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    sample_shape: &[usize],
    lo: usize,
    hi: usize,
    seed: u64,
) -> Result<Tensor> {
    let n = hi - lo;
    let per: usize = sample_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    let mut streams: Vec<Rng> = (lo..hi)
        .map(|i| rng::substream(seed, &[rng::STREAM_GENERATE, i as u64]))
        .collect();
    let mut x = Tensor::zeros(&shape);
    for (r, s) in streams.iter_mut().enumerate() {
        rng::fill_normal(s, &mut x.data_mut()[r * per..(r + 1) * per]);
    }
    let mut z = Tensor::zeros(&shape);
    for t in (1..=schedule.steps()).rev() {
        if t > 1 {
            for (r, s) in streams.iter_mut().enumerate() {
                rng::fill_normal(s, &mut z.data_mut()[r * per..(r + 1) * per]);
            }
        } else {
            z.data_mut().fill(0.0);
        }
        let steps = vec![t as u32; n];
        let eps = model.predict(&x, &steps)?;
        x = posterior_step(&x, &eps, t, schedule, &z);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at step {t}")));
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Maps a value in [−1, 1] to an 8-bit pixel.
pub fn to_pixel(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Writes one `[c, h, w]` sample as binary PGM (c = 1) or PPM (c = 3).
pub fn write_image(path: &Path, sample: &[f32], channels: usize, height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    let (magic, body): (&str, Vec<u8>) = match channels {
        1 => ("P5", sample.iter().map(|&v| to_pixel(v)).collect()),
        3 => (
            "P6",
            (0..plane)
                .flat_map(|p| (0..3).map(move |c| to_pixel(sample[c * plane + p])))
                .collect(),
        ),
        c => return Err(Error::Argument(format!("cannot write {c}-channel image"))),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "{magic}\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(&body))
        .map_err(|e| Error::io(path, e))
}
