//! Linear and tensor predictors, their cutoff frequencies, hand-built
//! networks, and a linear-separability probe for data with feature noise.
//!
//! Linear predictors act on the patch sum `x̄ = sum_p x_p`.

use serde::{Deserialize, Serialize};

use crate::distribution::{
    materialize, sample_point, AlphaPolicy, Dataset, DistParams, Forced, Placement, Sample,
};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_sq};
use crate::network::{self, Model};
use crate::rng::{self, Domain};

/// Dense `x̄ = sum_p x_p`.
pub fn patch_sum(sample: &Sample, params: &DistParams) -> Vec<f64> {
    let mut out = sample.xi.clone();
    let y = sample.label();
    params.feature_basis.add_scaled(y, sample.k_star, &mut out);
    for b in &sample.background {
        params.feature_basis.add_scaled(-b.alpha * y, b.k, &mut out);
        if let Some(z) = &b.zeta {
            axpy(1.0, z, &mut out);
        }
    }
    if sample.has_spurious {
        if let Some(s) = &params.spurious {
            axpy(1.0, &s.u, &mut out);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Mean,
    MaxmarginClosed,
    MaxmarginOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub kind: LinearKind,
    pub theta: Vec<f64>,
    /// Projection of `theta` onto the feature span.
    pub signal: Vec<f64>,
    /// `theta - signal`.
    pub noise: Vec<f64>,
}

impl LinearPredictor {
    fn new(kind: LinearKind, theta: Vec<f64>, params: &DistParams) -> Self {
        let mut signal = vec![0.0; theta.len()];
        for k in 0..params.num_features {
            let c = params.feature_basis.project(&theta, k);
            params.feature_basis.add_scaled(c, k, &mut signal);
        }
        let noise = theta.iter().zip(&signal).map(|(t, s)| t - s).collect();
        LinearPredictor { kind, theta, signal, noise }
    }

    /// `sum_p <theta, x_p>`
    pub fn score(&self, sample: &Sample, params: &DistParams) -> f64 {
        dot(&self.theta, &patch_sum(sample, params))
    }

    pub fn signal_score(&self, sample: &Sample, params: &DistParams) -> f64 {
        dot(&self.signal, &patch_sum(sample, params))
    }

    pub fn noise_score(&self, sample: &Sample, params: &DistParams) -> f64 {
        dot(&self.noise, &patch_sum(sample, params))
    }
}

/// `θ̄ = (1/n) sum_i y_i x̄_i`.
pub fn mean_linear(dataset: &Dataset) -> LinearPredictor {
    let params = &dataset.params;
    let mut theta = vec![0.0; params.d];
    let n = dataset.len().max(1) as f64;
    for s in &dataset.samples {
        axpy(s.label() / n, &patch_sum(s, params), &mut theta);
    }
    LinearPredictor::new(LinearKind::Mean, theta, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub rho_cut_linear: f64,
    pub rho_cut_tensor: f64,
}

/// Frequencies below which the empirical mean (order 1) or the empirical
/// order-`q` tensor is dominated by noise.
pub fn cutoffs(sigma_xi: f64, n: usize, d: usize, q: u32) -> Cutoffs {
    let (n, d) = (n as f64, d as f64);
    Cutoffs {
        rho_cut_linear: sigma_xi * sigma_xi / (n * d).sqrt(),
        rho_cut_tensor: sigma_xi.powi(2 * q as i32) / (n * d.powi(q as i32)).sqrt(),
    }
}

/// Sparse view of one patch: feature coefficients plus dense parts.
struct PatchParts<'a> {
    coeffs: Vec<(usize, f64)>,
    dense: Vec<&'a [f64]>,
}

fn patch_parts<'a>(sample: &'a Sample, params: &'a DistParams) -> Vec<PatchParts<'a>> {
    let mut out: Vec<PatchParts<'a>> = (0..sample.num_patches()).map(|_| PatchParts { coeffs: vec![], dense: vec![] }).collect();
    out[sample.p_star].coeffs.push((sample.k_star, sample.label()));
    out[sample.p_xi].dense.push(&sample.xi);
    for (j, b) in sample.background.iter().enumerate() {
        let part = &mut out[b.patch];
        if b.alpha != 0.0 {
            part.coeffs.push((b.k, -b.alpha * sample.label()));
        }
        if let Some(z) = &b.zeta {
            part.dense.push(z);
        }
        if let Some(s) = params.spurious.as_ref().filter(|s| sample.has_spurious && s.slot == j) {
            part.dense.push(&s.u);
        }
    }
    out
}

fn patch_inner(a: &PatchParts, b: &PatchParts, params: &DistParams) -> f64 {
    let mut v = 0.0;
    for &(ka, ca) in &a.coeffs {
        for &(kb, cb) in &b.coeffs {
            if ka == kb {
                v += ca * cb;
            }
        }
        for z in &b.dense {
            v += ca * params.feature_basis.project(z, ka);
        }
    }
    for z in &a.dense {
        for &(kb, cb) in &b.coeffs {
            v += cb * params.feature_basis.project(z, kb);
        }
        for w in &b.dense {
            v += dot(z, w);
        }
    }
    v
}

/// `T(x) = (1/n) sum_i y_i sum_{p'} sum_p <x_{p'}^{(i)}, x_p>^q` evaluated
/// as a kernel sum; `q` must be odd.
pub fn tensor_score(dataset: &Dataset, x: &Sample, q: u32) -> Result<f64> {
    if q % 2 == 0 {
        return Err(Error::InvalidArgument(format!("tensor order q = {q} must be odd")));
    }
    let params = &dataset.params;
    let xp = patch_parts(x, params);
    let n = dataset.len().max(1) as f64;
    let mut total = 0.0;
    for s in &dataset.samples {
        let sp = patch_parts(s, params);
        let mut acc = 0.0;
        for a in &sp {
            for b in &xp {
                acc += patch_inner(a, b, params).powi(q as i32);
            }
        }
        total += s.label() * acc;
    }
    Ok(total / n)
}

/// Closed-form max-margin direction for feature-noise-free data: dual value
/// `1 / (n_k + sigma_xi^2)` on every sample of view `k`.
pub fn maxmargin_closed_form(dataset: &Dataset) -> (LinearPredictor, Vec<f64>) {
    let params = &dataset.params;
    let s2 = params.sigma_xi * params.sigma_xi;
    let mut n_k = vec![0usize; params.num_features];
    for s in &dataset.samples {
        n_k[s.k_star] += 1;
    }
    let mut theta = vec![0.0; params.d];
    let mut dual = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let nu = 1.0 / (n_k[s.k_star] as f64 + s2);
        dual.push(nu);
        axpy(nu * s.label(), &patch_sum(s, params), &mut theta);
    }
    (LinearPredictor::new(LinearKind::MaxmarginClosed, theta, params), dual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMarginSolution {
    pub predictor: LinearPredictor,
    pub dual: Vec<f64>,
    pub margins: Vec<f64>,
    pub min_margin: f64,
    /// Largest violation among primal feasibility and complementarity.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gram matrix of `y_i x̄_i`.
pub fn signed_gram(dataset: &Dataset) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let z: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| {
            let mut v = patch_sum(s, &dataset.params);
            v.iter_mut().for_each(|x| *x *= s.label());
            v
        })
        .collect();
    let gram = gram_of(&z);
    (z, gram)
}

fn gram_of(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = z.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&z[i], &z[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

fn kkt_residual(dual: &[f64], margins: &[f64]) -> f64 {
    dual.iter()
        .zip(margins)
        .map(|(&nu, &m)| (1.0 - m).max(0.0).max(nu * (m - 1.0).abs()))
        .fold(0.0, f64::max)
}

/// Hard-margin SVM through the dual `max sum nu - ½ nu'G nu, nu >= 0`,
/// solved by projected coordinate ascent.
pub fn maxmargin_oracle(dataset: &Dataset, tol: f64, max_sweeps: usize) -> Result<MaxMarginSolution> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (z, g) = signed_gram(dataset);
    let n = z.len();
    let mut nu = vec![0.0; n];
    let mut gnu = vec![0.0; n];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        for i in 0..n {
            if g[i][i] <= 0.0 {
                continue;
            }
            let new = (nu[i] + (1.0 - gnu[i]) / g[i][i]).max(0.0);
            let delta = new - nu[i];
            if delta != 0.0 {
                for (j, gj) in gnu.iter_mut().enumerate() {
                    *gj += delta * g[i][j];
                }
                nu[i] = new;
            }
        }
        if kkt_residual(&nu, &gnu) <= tol {
            converged = true;
            break;
        }
    }
    // recompute margins from scratch to avoid accumulated drift
    let margins: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i][j] * nu[j]).sum()).collect();
    let mut theta = vec![0.0; dataset.params.d];
    for (zi, &v) in z.iter().zip(&nu) {
        if v != 0.0 {
            axpy(v, zi, &mut theta);
        }
    }
    let kkt = kkt_residual(&nu, &margins);
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(MaxMarginSolution {
        predictor: LinearPredictor::new(LinearKind::MaxmarginOracle, theta, &dataset.params),
        dual: nu,
        margins,
        min_margin,
        kkt_residual: kkt,
        iterations: sweeps,
        converged: converged && kkt <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandbuiltKind {
    /// `γ sum_k v_k`
    Gen,
    /// `γ sum_i y_i xi_i`
    Overfit,
}

/// Single-channel model with hand-set weights.
pub fn construct_handbuilt(
    kind: HandbuiltKind,
    gamma: f64,
    q: u32,
    params: &DistParams,
    dataset: Option<&Dataset>,
) -> Result<Model> {
    let mut m = Model::zeros(1, params.d, q);
    match kind {
        HandbuiltKind::Gen => {
            for k in 0..params.num_features {
                params.feature_basis.add_scaled(gamma, k, &mut m.weights);
            }
        }
        HandbuiltKind::Overfit => {
            let ds = dataset.ok_or_else(|| Error::InvalidArgument("the memorizing model needs a dataset".into()))?;
            for s in &ds.samples {
                axpy(gamma * s.label(), &s.xi, &mut m.weights);
            }
        }
    }
    Ok(m)
}

/// Fraction of `samples` misclassified by `model` (`y F <= 0` counts as wrong).
pub fn network_error(model: &Model, samples: &[Sample], params: &DistParams) -> Result<f64> {
    let mut wrong = 0usize;
    for s in samples {
        if s.label() * network::forward(model, s, params)? <= 0.0 {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len().max(1) as f64)
}

/// Per-sample sum of feature-noise coefficients and the fraction above 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNoiseStats {
    pub lambda: Vec<f64>,
    pub mu_lambda: f64,
}

pub fn feature_noise_stats(samples: &[Sample]) -> FeatureNoiseStats {
    let lambda: Vec<f64> = samples.iter().map(|s| s.feature_noise_mass()).collect();
    let above = lambda.iter().filter(|&&l| l > 1.0).count();
    FeatureNoiseStats { mu_lambda: above as f64 / lambda.len().max(1) as f64, lambda }
}

/// Parameters of the separability experiment: no dominant noise, the main
/// feature in a uniformly random patch, and two feature-noise levels.
pub fn impossibility_params(d: usize, patches: usize, rho: Vec<f64>, alpha_high: f64, alpha_low: f64, prob_high: f64) -> DistParams {
    DistParams {
        d,
        num_patches: patches,
        num_features: rho.len(),
        rho,
        sigma_xi: 0.0,
        sigma_zeta: 0.0,
        alpha: alpha_high,
        alpha_policy: AlphaPolicy::TwoLevel { low: alpha_low, prob_high },
        feature_basis: Default::default(),
        spurious: None,
        placement: Placement::UniformMain,
    }
}

/// One sample per (main patch, feature, noise level): every cell is covered
/// with both a heavy (`Λ > 1`) and a light (`Λ <= 1`) feature-noise sample
/// when the two levels straddle `1 / (P - 2)`.
pub fn witness_samples(params: &DistParams, seed: u64) -> Result<Vec<Sample>> {
    let levels = match params.alpha_policy {
        AlphaPolicy::TwoLevel { low, .. } => [params.alpha, low],
        _ => return Err(Error::InvalidArgument("witness construction needs a two-level feature-noise policy".into())),
    };
    let big_p = params.num_patches;
    let mut out = Vec::new();
    let mut idx = 0u64;
    for p in 0..big_p {
        for k in 0..params.num_features {
            for &level in &levels {
                let fixed = DistParams {
                    alpha: level,
                    alpha_policy: AlphaPolicy::Constant,
                    placement: Placement::Fixed { p_star: p, p_xi: (p + 1) % big_p },
                    ..params.clone()
                };
                let mut r = rng::stream(seed, Domain::Oracle, idx);
                let label = if idx % 2 == 0 { 1 } else { -1 };
                out.push(sample_point(&fixed, Forced { label: Some(label), view: Some(k) }, &mut r)?);
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Outcome of the separability oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Separability {
    /// A direction with positive margin on every sample was found.
    Separable { min_margin: f64 },
    /// The origin lies in the convex hull of `y_i x_i` (up to `residual`), so
    /// no `θ` has `y_i <θ, x_i> > 0` for all `i`; `certificate` holds the
    /// convex weights.
    Infeasible { residual: f64, certificate: Vec<f64> },
    /// Neither conclusion reached within the iteration budget.
    BudgetExhausted { residual: f64, gap: f64 },
}

/// Minimum-norm point of the convex hull of the rows of `z` (Wolfe's
/// algorithm). Returns convex weights and whether it terminated.
pub fn min_norm_point(z: &[Vec<f64>], tol: f64, max_iter: usize) -> (Vec<f64>, bool) {
    let n = z.len();
    let g = gram_of(z);
    let scale = (0..n).map(|i| g[i][i]).fold(0.0, f64::max).max(1e-300);
    let start = (0..n).min_by(|&a, &b| g[a][a].total_cmp(&g[b][b])).unwrap_or(0);
    let mut lambda = vec![0.0; n];
    lambda[start] = 1.0;
    let mut active = vec![start];
    let gx = |lam: &[f64], i: usize| -> f64 { (0..n).map(|j| g[i][j] * lam[j]).sum() };
    for _ in 0..max_iter {
        let xx: f64 = active.iter().map(|&i| lambda[i] * gx(&lambda, i)).sum();
        if xx <= tol * tol * scale {
            return (lambda, true);
        }
        let (j, best) = (0..n).map(|i| (i, gx(&lambda, i))).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        if xx - best <= tol * scale || active.contains(&j) {
            return (lambda, true);
        }
        active.push(j);
        loop {
            let Some(alpha) = affine_minimizer(&g, &active) else {
                return (lambda, false);
            };
            if alpha.iter().all(|&a| a > 1e-15) {
                for (&i, &a) in active.iter().zip(&alpha) {
                    lambda[i] = a;
                }
                break;
            }
            let mut theta = 1.0f64;
            for (&i, &a) in active.iter().zip(&alpha) {
                if a <= 1e-15 {
                    let denom = lambda[i] - a;
                    if denom > 0.0 {
                        theta = theta.min(lambda[i] / denom);
                    }
                }
            }
            for (&i, &a) in active.iter().zip(&alpha) {
                lambda[i] = (1.0 - theta) * lambda[i] + theta * a;
            }
            active.retain(|&i| {
                if lambda[i] <= 1e-15 {
                    lambda[i] = 0.0;
                    false
                } else {
                    true
                }
            });
            if active.is_empty() {
                return (lambda, false);
            }
        }
    }
    (lambda, false)
}

/// Weights summing to one that minimize the norm of the affine combination
/// of the active points.
fn affine_minimizer(g: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let m = active.len();
    let size = m + 1;
    let mut a = vec![vec![0.0; size + 1]; size];
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            a[r][c] = g[i][j];
        }
        a[r][m] = 1.0;
        a[r][size] = 0.0;
    }
    for c in 0..m {
        a[m][c] = 1.0;
    }
    a[m][size] = 1.0;
    let x = solve(a)?;
    Some(x[..m].to_vec())
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}

/// Strict linear separability of `{y_i x_i}` through the minimum-norm point
/// of their convex hull.
pub fn separability(z: &[Vec<f64>], tol: f64, max_iter: usize) -> Separability {
    let (lambda, _) = min_norm_point(z, tol, max_iter);
    let d = z.first().map_or(0, |r| r.len());
    let mut u = vec![0.0; d];
    for (zi, &l) in z.iter().zip(&lambda) {
        if l != 0.0 {
            axpy(l, zi, &mut u);
        }
    }
    let uu = norm_sq(&u);
    let scale = z.iter().map(|r| norm_sq(r)).fold(0.0, f64::max).max(1e-300);
    let min_margin = z.iter().map(|r| dot(r, &u)).fold(f64::INFINITY, f64::min);
    if uu <= tol * tol * scale {
        Separability::Infeasible { residual: uu.sqrt(), certificate: lambda }
    } else if min_margin > 0.0 {
        Separability::Separable { min_margin: min_margin / uu.sqrt() }
    } else {
        Separability::BudgetExhausted { residual: uu.sqrt(), gap: uu - min_margin }
    }
}

/// Patch-concatenated `y x ∈ R^{dP}`.
fn concatenated(sample: &Sample, params: &DistParams) -> Vec<f64> {
    let y = sample.label();
    materialize(sample, params).into_iter().flatten().map(|v| v * y).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpossibilityReport {
    pub separability: Separability,
    /// Lowest training error among the linear classifiers tried.
    pub best_linear_error: f64,
    /// `(1/P) min(μ, 1-μ) min_k ρ_k` for the sampling distribution.
    pub population_lower_bound: f64,
    pub mu_lambda: f64,
    /// Error of the network with `w_1 = sum_k v_k` on the probe samples.
    pub witness_error: f64,
    pub witness_min_margin: f64,
    /// `1/q - α^q P / q`
    pub witness_margin_bound: f64,
    pub n_samples: usize,
}

/// Checks whether any `θ ∈ R^{dP}` classifies `samples` linearly and
/// compares with the nonlinear witness network.
pub fn linear_impossibility_probe(params: &DistParams, samples: &[Sample], q: u32, max_iter: usize) -> Result<ImpossibilityReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let z: Vec<Vec<f64>> = samples.iter().map(|s| concatenated(s, params)).collect();
    let sep = separability(&z, 1e-9, max_iter);

    // candidate linear classifiers: the hull direction and the class mean
    let dim = z[0].len();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let mut mean = vec![0.0; dim];
    for r in &z {
        axpy(1.0 / z.len() as f64, r, &mut mean);
    }
    candidates.push(mean);
    if let Separability::Separable { .. } | Separability::BudgetExhausted { .. } = sep {
        let (lambda, _) = min_norm_point(&z, 1e-9, max_iter);
        let mut u = vec![0.0; dim];
        for (zi, &l) in z.iter().zip(&lambda) {
            axpy(l, zi, &mut u);
        }
        candidates.push(u);
    }
    candidates.push(perceptron(&z, 2000));
    let best_linear_error = candidates
        .iter()
        .map(|th| z.iter().filter(|r| dot(r, th) <= 0.0).count() as f64 / z.len() as f64)
        .fold(1.0, f64::min);

    let mu_lambda = match params.alpha_policy {
        AlphaPolicy::TwoLevel { low, prob_high } => {
            let bg = params.num_patches.saturating_sub(2) as f64;
            (if params.alpha * bg > 1.0 { prob_high } else { 0.0 }) + (if low * bg > 1.0 { 1.0 - prob_high } else { 0.0 })
        }
        _ => feature_noise_stats(samples).mu_lambda,
    };
    let min_rho = params.rho.iter().cloned().fold(f64::INFINITY, f64::min);
    let population_lower_bound = mu_lambda.min(1.0 - mu_lambda) * min_rho / params.num_patches as f64;

    let witness = construct_handbuilt(HandbuiltKind::Gen, 1.0, q, params, None)?;
    let mut wrong = 0usize;
    let mut wmin = f64::INFINITY;
    for s in samples {
        let m = s.label() * network::forward(&witness, s, params)?;
        wmin = wmin.min(m);
        wrong += usize::from(m <= 0.0);
    }
    let qf = f64::from(q);
    Ok(ImpossibilityReport {
        separability: sep,
        best_linear_error,
        population_lower_bound,
        mu_lambda,
        witness_error: wrong as f64 / samples.len() as f64,
        witness_min_margin: wmin,
        witness_margin_bound: 1.0 / qf - params.alpha.powi(q as i32) * params.num_patches as f64 / qf,
        n_samples: samples.len(),
    })
}

/// Pocket perceptron on `y x` rows; returns the best weights seen.
fn perceptron(z: &[Vec<f64>], epochs: usize) -> Vec<f64> {
    let dim = z[0].len();
    let mut w = vec![0.0; dim];
    let errors = |w: &[f64]| z.iter().filter(|r| dot(r, w) <= 0.0).count();
    let mut best = w.clone();
    let mut best_err = errors(&w);
    for _ in 0..epochs {
        let mut changed = false;
        for r in z {
            if dot(r, &w) <= 0.0 {
                axpy(1.0, r, &mut w);
                changed = true;
            }
        }
        let e = errors(&w);
        if e < best_err {
            best_err = e;
            best = w.clone();
        }
        if !changed || best_err == 0 {
            break;
        }
    }
    best
}

/// Conditional accuracy of a linear predictor on fresh samples of one view.
pub fn linear_view_accuracy(pred: &LinearPredictor, params: &DistParams, view: usize, n_test: usize, seed: u64) -> Result<f64> {
    let mut right = 0usize;
    for i in 0..n_test {
        let mut r = rng::stream(seed, Domain::Test, i as u64);
        let s = sample_point(params, Forced { label: None, view: Some(view) }, &mut r)?;
        right += usize::from(s.label() * pred.score(&s, params) > 0.0);
    }
    Ok(right as f64 / n_test.max(1) as f64)
}

/// Conditional accuracy of the empirical tensor predictor on one view.
pub fn tensor_view_accuracy(dataset: &Dataset, q: u32, view: usize, n_test: usize, seed: u64) -> Result<f64> {
    use rayon::prelude::*;
    let params = &dataset.params;
    let right = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Test, i as u64);
            let s = sample_point(params, Forced { label: None, view: Some(view) }, &mut r)?;
            Ok(usize::from(s.label() * tensor_score(dataset, &s, q)? > 0.0))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(right as f64 / n_test.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kind: LinearKind,
    pub cutoffs: Cutoffs,
    pub per_view_accuracy: Vec<f64>,
    pub oracle_kkt_residual: Option<f64>,
    pub oracle_cosine: Option<f64>,
}

/// Fits one linear baseline and scores it on fresh samples of every view.
/// The oracle variant also reports its KKT residual and its cosine with the
/// closed form.
pub fn baseline_report(dataset: &Dataset, kind: LinearKind, q: u32, n_test: usize, seed: u64) -> Result<BaselineReport> {
    let params = &dataset.params;
    let (pred, oracle_kkt_residual, oracle_cosine) = match kind {
        LinearKind::Mean => (mean_linear(dataset), None, None),
        LinearKind::MaxmarginClosed => (maxmargin_closed_form(dataset).0, None, None),
        LinearKind::MaxmarginOracle => {
            let sol = maxmargin_oracle(dataset, 1e-9, 200_000)?;
            let closed = maxmargin_closed_form(dataset).0;
            let cos = crate::linalg::cosine(&closed.theta, &sol.predictor.theta);
            (sol.predictor, Some(sol.kkt_residual), Some(cos))
        }
    };
    let per_view_accuracy =
        (0..params.num_features).map(|k| linear_view_accuracy(&pred, params, k, n_test, seed)).collect::<Result<Vec<_>>>()?;
    Ok(BaselineReport {
        kind,
        cutoffs: cutoffs(params.sigma_xi, dataset.len(), params.d, q),
        per_view_accuracy,
        oracle_kkt_residual,
        oracle_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{generate_dataset, SamplingMode};

    #[test]
    fn single_sample_mean_is_feature_plus_signed_noise() {
        let p = DistParams::two_patch(16, vec![1.0], 1.0);
        let ds = generate_dataset(&p, 1, SamplingMode::Iid, 3).unwrap();
        let s = &ds.samples[0];
        let th = mean_linear(&ds);
        for j in 0..16 {
            let want = if j == 0 { 1.0 } else { 0.0 } + s.label() * s.xi[j];
            assert!((th.theta[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cutoff_identities() {
        let c1 = cutoffs(2.0, 16, 1024, 1);
        assert!((c1.rho_cut_linear - c1.rho_cut_tensor).abs() < 1e-15);
        let c3 = cutoffs(2.0, 16, 1024, 3);
        let ratio = c3.rho_cut_tensor / c3.rho_cut_linear;
        assert!((ratio - (4.0f64 / 32.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn even_tensor_order_is_rejected() {
        let p = DistParams::two_patch(8, vec![1.0], 1.0);
        let ds = generate_dataset(&p, 2, SamplingMode::Iid, 3).unwrap();
        assert!(tensor_score(&ds, &ds.samples[0], 2).is_err());
    }

    #[test]
    fn order_one_tensor_is_the_mean_predictor() {
        let mut p = DistParams::two_patch(24, vec![0.6, 0.4], 1.5);
        p.num_patches = 4;
        p.alpha = 0.2;
        let ds = generate_dataset(&p, 7, SamplingMode::Iid, 3).unwrap();
        let fresh = generate_dataset(&p, 3, SamplingMode::Iid, 4).unwrap();
        let th = mean_linear(&ds);
        for x in &fresh.samples {
            let a = tensor_score(&ds, x, 1).unwrap();
            let b = th.score(x, &p);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn opposite_points_give_symmetric_margins() {
        let p = DistParams::two_patch(8, vec![1.0], 0.0);
        let ds = generate_dataset(&p, 6, SamplingMode::Iid, 3).unwrap();
        let sol = maxmargin_oracle(&ds, 1e-12, 1000).unwrap();
        assert!(sol.converged);
        assert!((sol.predictor.theta[0] - 1.0).abs() < 1e-9);
        for m in &sol.margins {
            assert!((m - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn overfit_needs_data_and_is_zero_on_empty() {
        let p = DistParams::two_patch(8, vec![1.0], 1.0);
        assert!(construct_handbuilt(HandbuiltKind::Overfit, 1.0, 3, &p, None).is_err());
        let empty = Dataset { samples: vec![], params: p.clone(), seed: 0, mode: SamplingMode::Iid, augmented_from: None };
        let m = construct_handbuilt(HandbuiltKind::Overfit, 1.0, 3, &p, Some(&empty)).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn noiseless_data_without_feature_noise_is_separable() {
        let p = impossibility_params(8, 4, vec![0.5, 0.5], 0.0, 0.0, 0.5);
        let ds = generate_dataset(&p, 20, SamplingMode::Iid, 1).unwrap();
        let rep = linear_impossibility_probe(&p, &ds.samples, 3, 10_000).unwrap();
        assert!(matches!(rep.separability, Separability::Separable { .. }), "{:?}", rep.separability);
        assert_eq!(rep.best_linear_error, 0.0);
    }

    #[test]
    fn min_norm_point_of_segment() {
        let z = vec![vec![1.0, 1.0], vec![-1.0, 1.0]];
        let (lam, ok) = min_norm_point(&z, 1e-12, 100);
        assert!(ok);
        assert!((lam[0] - 0.5).abs() < 1e-12 && (lam[1] - 0.5).abs() < 1e-12);
        let z = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(separability(&z, 1e-9, 100), Separability::Infeasible { .. }));
    }
}
