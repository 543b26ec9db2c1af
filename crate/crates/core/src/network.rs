//! Patch-wise two-layer network `F(w, x) = sum_c sum_p psi(<w_c, x_p>)` with a
//! fixed second layer, logistic loss and full-batch gradient descent.
//!
//! All evaluations run on the sparse sample representation: a feature patch
//! contributes through `<w_c, v_k>`, a noise patch through `<w_c, xi>`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, ProbeFrame};
use crate::distribution::{Dataset, DistParams, Sample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub channels: usize,
    pub d: usize,
    pub q: u32,
    /// Channel-major `C x d`.
    pub weights: Vec<f64>,
}

impl Model {
    pub fn zeros(channels: usize, d: usize, q: u32) -> Self {
        Model { channels, d, q, weights: vec![0.0; channels * d] }
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.weights[c * self.d..(c + 1) * self.d]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.weights[c * self.d..(c + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// `w_c(0) ~ N(0, sigma_0^2 I_d)`, one stream per channel.
pub fn init_weights(channels: usize, d: usize, q: u32, sigma_0: f64, seed: u64) -> Model {
    let mut m = Model::zeros(channels, d, q);
    if sigma_0 == 0.0 {
        return m;
    }
    for c in 0..channels {
        let mut r = rng::stream(seed, Domain::Init, c as u64);
        let row = rng::normal_vec(&mut r, d, sigma_0);
        m.channel_mut(c).copy_from_slice(&row);
    }
    m
}

/// Smoothed symmetric ReLU: polynomial `sign(z)|z|^q / q` inside `[-1, 1]`,
/// linear with slope 1 outside.
#[inline]
pub fn psi(z: f64, q: u32) -> f64 {
    let a = z.abs();
    let qf = f64::from(q);
    if a <= 1.0 {
        z.signum() * a.powi(q as i32) / qf
    } else {
        z - z.signum() * (qf - 1.0) / qf
    }
}

#[inline]
pub fn psi_prime(z: f64, q: u32) -> f64 {
    let a = z.abs();
    if a <= 1.0 {
        a.powi(q as i32 - 1)
    } else {
        1.0
    }
}

/// `log(1 + exp(-z))` without overflow.
#[inline]
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Derivative of `log(1 + exp(-z))`, i.e. `-1 / (1 + e^z)`.
#[inline]
pub fn logistic_slope(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// Number of activation slots per channel: feature, noise, then background.
#[inline]
fn slots(sample: &Sample) -> usize {
    sample.background.len() + 2
}

/// Pre-activations `<w_c, x_p>` in role order, channel-major.
pub fn activations(model: &Model, sample: &Sample, params: &DistParams) -> Result<Vec<f64>> {
    if sample.dim() != model.d {
        return Err(Error::DimensionMismatch { expected: model.d, got: sample.dim() });
    }
    let np = slots(sample);
    let y = sample.label();
    let basis = &params.feature_basis;
    let spurious = params.spurious.as_ref().filter(|_| sample.has_spurious);
    let mut out = vec![0.0; model.channels * np];
    for c in 0..model.channels {
        let w = model.channel(c);
        let a = &mut out[c * np..(c + 1) * np];
        a[0] = y * basis.project(w, sample.k_star);
        a[1] = dot(w, &sample.xi);
        for (j, b) in sample.background.iter().enumerate() {
            let mut v = -b.alpha * y * basis.project(w, b.k);
            if let Some(z) = &b.zeta {
                v += dot(w, z);
            }
            if let Some(s) = spurious {
                if s.slot == j {
                    v += dot(w, &s.u);
                }
            }
            a[2 + j] = v;
        }
    }
    Ok(out)
}

fn score_from(acts: &[f64], q: u32) -> f64 {
    acts.iter().map(|&a| psi(a, q)).sum()
}

/// `F(w, x)`.
pub fn forward(model: &Model, sample: &Sample, params: &DistParams) -> Result<f64> {
    Ok(score_from(&activations(model, sample, params)?, model.q))
}

/// Cached pre-activations and margins for a whole dataset at one model.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub acts: Vec<Vec<f64>>,
    /// `y_i F(w, x_i)`
    pub margins: Vec<f64>,
}

impl BatchEval {
    pub fn loss(&self) -> f64 {
        let n = self.margins.len().max(1) as f64;
        self.margins.iter().map(|&m| logistic_loss(m)).sum::<f64>() / n
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<BatchEval> {
    let acts = dataset
        .samples
        .par_iter()
        .map(|s| activations(model, s, &dataset.params))
        .collect::<Result<Vec<_>>>()?;
    let margins = acts
        .iter()
        .zip(&dataset.samples)
        .map(|(a, s)| s.label() * score_from(a, model.q))
        .collect();
    Ok(BatchEval { acts, margins })
}

/// `L(w) = (1/n) sum_i log(1 + exp(-y_i F(w, x_i)))`.
pub fn dataset_loss(model: &Model, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate(model, dataset)?.loss())
}

/// Gradient of the loss given cached activations, channel-major `C x d`.
pub fn gradient_from(model: &Model, dataset: &Dataset, eval: &BatchEval) -> Vec<f64> {
    let n = dataset.len().max(1) as f64;
    let q = model.q;
    let params = &dataset.params;
    let basis = &params.feature_basis;
    let coefs: Vec<f64> = dataset
        .samples
        .iter()
        .zip(&eval.margins)
        .map(|(s, &m)| logistic_slope(m) * s.label() / n)
        .collect();
    let mut grad = vec![0.0; model.weights.len()];
    for c in 0..model.channels {
        let g = &mut grad[c * model.d..(c + 1) * model.d];
        for ((s, a), &coef) in dataset.samples.iter().zip(&eval.acts).zip(&coefs) {
            let np = slots(s);
            let a = &a[c * np..(c + 1) * np];
            let y = s.label();
            let t = coef * psi_prime(a[0], q);
            if t != 0.0 {
                basis.add_scaled(t * y, s.k_star, g);
            }
            let t = coef * psi_prime(a[1], q);
            if t != 0.0 {
                axpy(t, &s.xi, g);
            }
            for (j, b) in s.background.iter().enumerate() {
                let t = coef * psi_prime(a[2 + j], q);
                if t == 0.0 {
                    continue;
                }
                if b.alpha != 0.0 {
                    basis.add_scaled(-t * b.alpha * y, b.k, g);
                }
                if let Some(z) = &b.zeta {
                    axpy(t, z, g);
                }
                if let Some(sp) = params.spurious.as_ref().filter(|sp| s.has_spurious && sp.slot == j) {
                    axpy(t, &sp.u, g);
                }
            }
        }
    }
    grad
}

pub fn gradient(model: &Model, dataset: &Dataset) -> Result<Vec<f64>> {
    let eval = evaluate(model, dataset)?;
    Ok(gradient_from(model, dataset, &eval))
}

fn apply_step(model: &Model, grad: &[f64], eta: f64) -> Model {
    let mut next = model.clone();
    axpy(-eta, grad, &mut next.weights);
    next
}

/// One full-batch update `w <- w - eta * grad L(w)`.
pub fn gd_step(model: &Model, dataset: &Dataset, eta: f64) -> Result<Model> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {eta} must be non-negative")));
    }
    Ok(apply_step(model, &gradient(model, dataset)?, eta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub sigma_0: f64,
    #[serde(default = "default_margin")]
    pub margin_target: f64,
    pub max_steps: usize,
    #[serde(default = "default_stride")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_margin() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if !(self.margin_target > 0.0) {
            return Err(Error::InvalidArgument("margin_target must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// What to record besides loss and minimum margin.
#[derive(Debug, Clone, Default)]
pub struct ProbeSpec {
    /// Record the full `n x C` matrix of `y_i <w_c, xi_i>`.
    pub full_noise: bool,
    /// Fresh noise vectors whose correlation with the weights is tracked.
    pub heldout: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MarginHistogram {
    pub fn of(margins: &[f64], bins: usize) -> Self {
        let lo = margins.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &m in margins {
            let b = (((m - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        MarginHistogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    MarginReached,
    MaxSteps { final_min_margin: f64, histogram: MarginHistogram },
    Diverged { step: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    /// First step whose minimum training margin reaches the target.
    pub stop_time: Option<usize>,
    pub stop_reason: StopReason,
    pub model: Model,
    /// Frames at `t = 0, r, 2r, ...` up to the last evaluated step.
    pub trajectory: Vec<ProbeFrame>,
    /// Frame at the last evaluated step (the stopping step on success).
    pub final_frame: ProbeFrame,
    /// Loss at every evaluated step.
    pub losses: Vec<f64>,
    /// Minimum margin at every evaluated step.
    pub min_margins: Vec<f64>,
}

/// Runs gradient descent from `model` until every training margin reaches
/// `margin_target` or `max_steps` updates have been made.
pub fn train(dataset: &Dataset, model: Model, config: &TrainConfig, probes: Option<&ProbeSpec>) -> Result<TrainResult> {
    config.check()?;
    let default_spec = ProbeSpec::default();
    let spec = probes.unwrap_or(&default_spec);
    let mut model = model;
    let mut trajectory = Vec::new();
    let mut losses = Vec::new();
    let mut min_margins = Vec::new();
    let mut t = 0usize;
    loop {
        let eval = evaluate(&model, dataset)?;
        let loss = eval.loss();
        let mm = eval.min_margin();
        losses.push(loss);
        min_margins.push(mm);
        let reached = mm >= config.margin_target;
        let last = reached || t == config.max_steps || !model.is_finite();
        let on_stride = t % config.record_every == 0;
        if on_stride || last {
            let frame = diagnostics::frame_from_eval(t, &model, dataset, &eval, spec);
            if on_stride {
                trajectory.push(frame.clone());
            }
            if last {
                let stop_reason = if reached {
                    StopReason::MarginReached
                } else if !model.is_finite() {
                    StopReason::Diverged { step: t }
                } else {
                    StopReason::MaxSteps { final_min_margin: mm, histogram: MarginHistogram::of(&eval.margins, 10) }
                };
                return Ok(TrainResult {
                    stop_time: reached.then_some(t),
                    stop_reason,
                    model,
                    trajectory,
                    final_frame: frame,
                    losses,
                    min_margins,
                });
            }
        }
        let grad = gradient_from(&model, dataset, &eval);
        model = apply_step(&model, &grad, config.eta);
        t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{generate_dataset, DistParams, SamplingMode};

    #[test]
    fn activation_values() {
        assert_eq!(psi(0.0, 3), 0.0);
        assert!((psi(1.0, 3) - 1.0 / 3.0).abs() < 1e-15);
        assert!((psi(1.0 + 1e-12, 3) - 1.0 / 3.0).abs() < 1e-11);
        assert!((psi(2.0, 3) - 4.0 / 3.0).abs() < 1e-15);
        assert!((psi(-2.0, 3) + 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(psi_prime(0.5, 3), 0.25);
        assert_eq!(psi_prime(-0.5, 3), 0.25);
        assert_eq!(psi_prime(7.0, 3), 1.0);
        assert_eq!(psi_prime(-7.0, 3), 1.0);
    }

    #[test]
    fn loss_is_overflow_safe() {
        assert_eq!(logistic_loss(0.0), std::f64::consts::LN_2);
        assert!(logistic_loss(100.0) <= 1e-40);
        assert!((logistic_loss(-1e4) - 1e4).abs() < 1e-9);
        assert!(logistic_slope(1e4).abs() < 1e-300);
        assert_eq!(logistic_slope(-1e4), -1.0);
    }

    #[test]
    fn zero_model_has_log2_loss() {
        let p = DistParams::two_patch(16, vec![0.5, 0.5], 1.0);
        let ds = generate_dataset(&p, 6, SamplingMode::Iid, 1).unwrap();
        let m = Model::zeros(3, 16, 3);
        assert_eq!(dataset_loss(&m, &ds).unwrap(), std::f64::consts::LN_2);
        assert!(gradient(&m, &ds).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_step_keeps_model() {
        let p = DistParams::two_patch(16, vec![0.5, 0.5], 1.0);
        let ds = generate_dataset(&p, 6, SamplingMode::Iid, 1).unwrap();
        let m = init_weights(2, 16, 3, 0.3, 4);
        assert_eq!(gd_step(&m, &ds, 0.0).unwrap(), m);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_weights(2, 8, 3, 0.1, 5), init_weights(2, 8, 3, 0.1, 5));
        assert!(init_weights(2, 8, 3, 0.0, 5).weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn already_separated_stops_at_zero() {
        let p = DistParams::two_patch(16, vec![1.0], 0.0);
        let ds = generate_dataset(&p, 4, SamplingMode::Iid, 2).unwrap();
        let mut m = Model::zeros(1, 16, 3);
        m.weights[0] = 6.0;
        let cfg = TrainConfig { eta: 0.1, sigma_0: 0.0, margin_target: 1.0, max_steps: 10, record_every: 1, seed: 0 };
        let r = train(&ds, m, &cfg, None).unwrap();
        assert_eq!(r.stop_time, Some(0));
        assert_eq!(r.trajectory.len(), 1);
    }
}
