//! Initialization checks, correlation probes, fit classification, test error
//! and per-step envelope monitors for training runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{sample_point, Dataset, DistParams, Forced};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, norm_sq};
use crate::network::{self, psi_prime, BatchEval, Model, ProbeSpec, TrainResult};
use crate::rng::{self, Domain};
use crate::stats::{self, wilson, Z95};

/// Correlations between the weights and the data at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFrame {
    pub t: usize,
    pub loss: f64,
    pub min_margin: f64,
    /// `K x C` matrix of `<w_c, v_k>`.
    pub feat_corr: Vec<Vec<f64>>,
    /// `max_c y_i <w_c, xi_i>` per training sample.
    pub noise_corr: Vec<f64>,
    /// `min_c y_i <w_c, xi_i>` per training sample.
    pub noise_corr_min: Vec<f64>,
    /// Full `n x C` matrix of `y_i <w_c, xi_i>` when requested.
    pub noise_full: Option<Vec<Vec<f64>>>,
    /// `<w_c, u>` per channel when the data carry a spurious direction.
    pub spurious_corr: Option<Vec<f64>>,
    /// `H x C` matrix of `<w_c, xi>` for held-out noise vectors.
    pub heldout_corr: Option<Vec<Vec<f64>>>,
}

impl ProbeFrame {
    pub fn max_feature_corr(&self, k: usize) -> f64 {
        self.feat_corr[k].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_feature_corr(&self, k: usize) -> f64 {
        self.feat_corr[k].iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spurious_corr(&self) -> Option<f64> {
        self.spurious_corr.as_ref().map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Builds a frame from activations already computed for the training step.
pub fn frame_from_eval(t: usize, model: &Model, dataset: &Dataset, eval: &BatchEval, spec: &ProbeSpec) -> ProbeFrame {
    let params = &dataset.params;
    let c_count = model.channels;
    let feat_corr = (0..params.num_features)
        .map(|k| (0..c_count).map(|c| params.feature_basis.project(model.channel(c), k)).collect())
        .collect();
    let mut noise_corr = Vec::with_capacity(dataset.len());
    let mut noise_corr_min = Vec::with_capacity(dataset.len());
    let mut full = spec.full_noise.then(Vec::new);
    for (s, a) in dataset.samples.iter().zip(&eval.acts) {
        let np = s.background.len() + 2;
        let row: Vec<f64> = (0..c_count).map(|c| s.label() * a[c * np + 1]).collect();
        noise_corr.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        noise_corr_min.push(row.iter().cloned().fold(f64::INFINITY, f64::min));
        if let Some(f) = full.as_mut() {
            f.push(row);
        }
    }
    let spurious_corr =
        params.spurious.as_ref().map(|s| (0..c_count).map(|c| dot(model.channel(c), &s.u)).collect());
    let heldout_corr = (!spec.heldout.is_empty()).then(|| {
        spec.heldout.iter().map(|xi| (0..c_count).map(|c| dot(model.channel(c), xi)).collect()).collect()
    });
    ProbeFrame {
        t,
        loss: eval.loss(),
        min_margin: eval.min_margin(),
        feat_corr,
        noise_corr,
        noise_corr_min,
        noise_full: full,
        spurious_corr,
        heldout_corr,
    }
}

/// Exact correlations of `model` with the dataset, labelled as step `t`.
pub fn correlation_probe(t: usize, model: &Model, dataset: &Dataset, spec: &ProbeSpec) -> Result<ProbeFrame> {
    let eval = network::evaluate(model, dataset)?;
    Ok(frame_from_eval(t, model, dataset, &eval, spec))
}

/// Noise vectors drawn independently of any training set.
pub fn heldout_noise(params: &DistParams, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let scale = params.sigma_xi / (params.d as f64).sqrt();
    (0..count)
        .map(|h| rng::normal_vec(&mut rng::stream(seed, Domain::Heldout, h as u64), params.d, scale))
        .collect()
}

/// Band constants for the initialization checks. Upper bands carry a
/// `sqrt(log(dC))` factor, the noise lower band divides by it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GinitTolerances {
    pub c_lo: f64,
    pub c_hi: f64,
}

impl Default for GinitTolerances {
    fn default() -> Self {
        GinitTolerances { c_lo: 0.2, c_hi: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub name: String,
    /// Measured quantity compared with the lower band, if the condition has one.
    pub measured_low: Option<f64>,
    pub band_low: Option<f64>,
    pub measured_high: f64,
    pub band_high: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinitReport {
    pub conditions: Vec<ConditionVerdict>,
    pub tolerances: GinitTolerances,
    pub sigma_0: f64,
    pub pass: bool,
}

impl GinitReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionVerdict> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

fn verdict(name: &str, low: Option<(f64, f64)>, high: (f64, f64)) -> ConditionVerdict {
    let low_ok = low.is_none_or(|(m, b)| m > 0.0 && m >= b);
    let high_ok = high.0 >= 0.0 && high.0 <= high.1 && high.0.is_finite();
    ConditionVerdict {
        name: name.to_string(),
        measured_low: low.map(|l| l.0),
        band_low: low.map(|l| l.1),
        measured_high: high.0,
        band_high: high.1,
        pass: low_ok && high_ok,
    }
}

/// Evaluates the five initialization conditions for `model0` on `dataset`.
/// `sigma_0` is the scale the model was drawn with.
pub fn check_ginit(model0: &Model, dataset: &Dataset, sigma_0: f64, tol: GinitTolerances) -> GinitReport {
    let params = &dataset.params;
    let d = params.d as f64;
    let c_count = model0.channels;
    let log_factor = (d * c_count as f64).ln().max(1.0).sqrt();
    let sx = params.sigma_xi;
    let basis = &params.feature_basis;

    // feature vs parameter
    let mut min_of_max = f64::INFINITY;
    let mut max_abs = 0.0f64;
    for k in 0..params.num_features {
        let vals: Vec<f64> = (0..c_count).map(|c| basis.project(model0.channel(c), k)).collect();
        min_of_max = min_of_max.min(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        max_abs = vals.iter().fold(max_abs, |m, v| m.max(v.abs()));
    }
    let feature = verdict(
        "feature_vs_parameter",
        Some((min_of_max, tol.c_lo * sigma_0)),
        (max_abs, tol.c_hi * sigma_0 * log_factor),
    );

    // noise vs parameter
    let mut min_of_max = f64::INFINITY;
    let mut max_abs = 0.0f64;
    for s in &dataset.samples {
        let vals: Vec<f64> = (0..c_count).map(|c| s.label() * dot(model0.channel(c), &s.xi)).collect();
        min_of_max = min_of_max.min(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        max_abs = vals.iter().fold(max_abs, |m, v| m.max(v.abs()));
    }
    let noise = verdict(
        "noise_vs_parameter",
        Some((min_of_max, tol.c_lo * sigma_0 * sx / log_factor)),
        (max_abs, tol.c_hi * sigma_0 * sx * log_factor),
    );

    // noise vs noise: squared norms in a Theta band, cross terms small
    let norms: Vec<f64> = dataset.samples.iter().map(|s| norm_sq(&s.xi)).collect();
    let ratio_lo = norms.iter().cloned().fold(f64::INFINITY, f64::min) / (sx * sx);
    let ratio_hi = norms.iter().cloned().fold(0.0, f64::max) / (sx * sx);
    let mut cross = 0.0f64;
    for i in 0..dataset.len() {
        for j in (i + 1)..dataset.len() {
            cross = cross.max(dot(&dataset.samples[i].xi, &dataset.samples[j].xi).abs());
        }
    }
    let cross_band = tol.c_hi * sx * sx / d.sqrt() * log_factor;
    let nn_pass = ratio_lo >= tol.c_lo && ratio_hi <= tol.c_hi && cross <= cross_band && sx > 0.0;
    let noise_noise = ConditionVerdict {
        name: "noise_vs_noise".into(),
        measured_low: Some(ratio_lo),
        band_low: Some(tol.c_lo),
        measured_high: cross,
        band_high: cross_band,
        pass: nn_pass && ratio_lo.is_finite(),
    };

    // feature vs noise
    let mut fx = 0.0f64;
    for s in &dataset.samples {
        for k in 0..params.num_features {
            fx = fx.max(basis.project(&s.xi, k).abs());
        }
    }
    let feature_noise = verdict("feature_vs_noise", None, (fx, tol.c_hi * sx / d.sqrt() * log_factor));

    // parameter norm in a Theta band
    let scale = sigma_0 * d.sqrt();
    let norms: Vec<f64> = (0..c_count).map(|c| norm(model0.channel(c))).collect();
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(0.0, f64::max);
    let pnorm = verdict("parameter_norm", Some((lo, tol.c_lo * scale)), (hi, tol.c_hi * scale));

    let conditions = vec![feature, noise, noise_noise, feature_noise, pnorm];
    let pass = conditions.iter().all(|c| c.pass);
    GinitReport { conditions, tolerances: tol, sigma_0, pass }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTag {
    FeatureLearned,
    NoiseMemorized,
    Both,
    Unfit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLabel {
    pub index: usize,
    pub k_star: usize,
    pub tag: FitTag,
    /// `max_c <w_c, v_{k*}>`
    pub feature_corr: f64,
    /// `max_c y <w_c, xi>`
    pub noise_corr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitThresholds {
    pub feature: f64,
    pub noise: f64,
}

impl FitThresholds {
    /// Half the learned scale `C^{-1/q}`.
    pub fn default_for(channels: usize, q: u32) -> Self {
        let t = 0.5 * (channels as f64).powf(-1.0 / f64::from(q));
        FitThresholds { feature: t, noise: t }
    }
}

pub fn classify_frame(frame: &ProbeFrame, dataset: &Dataset, th: FitThresholds) -> Vec<FitLabel> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let feature_corr = frame.max_feature_corr(s.k_star);
            let noise_corr = frame.noise_corr[i];
            let tag = match (feature_corr >= th.feature, noise_corr >= th.noise) {
                (true, true) => FitTag::Both,
                (true, false) => FitTag::FeatureLearned,
                (false, true) => FitTag::NoiseMemorized,
                (false, false) => FitTag::Unfit,
            };
            FitLabel { index: i, k_star: s.k_star, tag, feature_corr, noise_corr }
        })
        .collect()
}

/// Labels every training sample at the final (stopping) step.
pub fn classify_fit(result: &TrainResult, dataset: &Dataset, th: FitThresholds) -> Vec<FitLabel> {
    classify_frame(&result.final_frame, dataset, th)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub trials: usize,
    pub errors: usize,
    pub error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ErrorEstimate {
    fn of(errors: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson(errors, trials, Z95);
        let error = if trials == 0 { f64::NAN } else { errors as f64 / trials as f64 };
        ErrorEstimate { trials, errors, error, ci_low, ci_high }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestError {
    pub overall: ErrorEstimate,
    /// Error conditional on the main feature of the test sample.
    pub per_view: Vec<ErrorEstimate>,
}

impl TestError {
    pub fn error(&self) -> f64 {
        self.overall.error
    }

    /// Mean of the per-view accuracies.
    pub fn balanced_accuracy(&self) -> f64 {
        let views: Vec<f64> = self.per_view.iter().filter(|v| v.trials > 0).map(|v| 1.0 - v.error).collect();
        stats::mean(&views)
    }
}

/// Monte Carlo test error on fresh samples; `y F = 0` counts as an error.
pub fn estimate_test_error(model: &Model, params: &DistParams, n_test: usize, seed: u64) -> Result<TestError> {
    if n_test < 100 {
        return Err(Error::InvalidArgument(format!("n_test = {n_test}; need at least 100")));
    }
    params.check()?;
    let outcomes = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Test, i as u64);
            let s = sample_point(params, Forced::default(), &mut r)?;
            let f = network::forward(model, &s, params)?;
            Ok((s.k_star, s.label() * f <= 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = params.num_features;
    let mut trials = vec![0usize; k];
    let mut errs = vec![0usize; k];
    for (view, wrong) in outcomes {
        trials[view] += 1;
        errs[view] += usize::from(wrong);
    }
    Ok(TestError {
        overall: ErrorEstimate::of(errs.iter().sum(), n_test),
        per_view: (0..k).map(|v| ErrorEstimate::of(errs[v], trials[v])).collect(),
    })
}

/// Constants for the per-step envelope monitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBands {
    /// Growth ratios must fall in `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    /// Required fraction of checked steps inside the band.
    pub quota: f64,
    /// Premise cap on correlations, in units of `C^{-1/q}`.
    pub cap: f64,
    /// Premise cap on training-noise correlations in the feature block, in
    /// units of `sigma_0 sigma_xi sqrt(log(dC))`.
    pub noise_premise: f64,
    /// Multiplier on the per-step drift scales.
    pub drift: f64,
    /// Held-out drift allowance in units of `sigma_0 sigma_xi`.
    pub heldout: f64,
}

impl Default for EnvelopeBands {
    fn default() -> Self {
        EnvelopeBands { lo: 0.1, hi: 10.0, quota: 0.95, cap: 1.0, noise_premise: 4.0, drift: 10.0, heldout: 1.0 }
    }
}

/// Which features and samples the growth monitors follow.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeScope {
    pub features: Vec<usize>,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    /// Feature index, sample index or held-out index, depending on the block.
    pub index: usize,
    pub value: f64,
    pub band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub checked: usize,
    pub violations: usize,
    pub compliance: f64,
    pub pass: bool,
    /// First violations, capped to keep reports small.
    pub examples: Vec<Violation>,
}

const MAX_EXAMPLES: usize = 50;

impl BlockReport {
    fn new(block: &str) -> Self {
        BlockReport { block: block.into(), checked: 0, violations: 0, compliance: 1.0, pass: true, examples: Vec::new() }
    }

    fn record(&mut self, ok: bool, v: Violation) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            if self.examples.len() < MAX_EXAMPLES {
                self.examples.push(v);
            }
        }
    }

    fn finish(mut self, quota: f64) -> Self {
        self.compliance = if self.checked == 0 { 1.0 } else { 1.0 - self.violations as f64 / self.checked as f64 };
        self.pass = self.compliance >= quota;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub bands: EnvelopeBands,
    pub feature_growth: BlockReport,
    pub noise_growth: BlockReport,
    pub feature_drift: BlockReport,
    pub noise_drift: BlockReport,
    pub heldout_drift: BlockReport,
}

/// Checks the recorded trajectory step by step against the growth and drift
/// envelopes. Steps where a growth premise fails are skipped, not flagged.
pub fn envelope_monitor(
    result: &TrainResult,
    dataset: &Dataset,
    eta: f64,
    sigma_0: f64,
    scope: &EnvelopeScope,
    bands: EnvelopeBands,
) -> Result<EnvelopeReport> {
    let params = &dataset.params;
    let frames = &result.trajectory;
    if frames.windows(2).any(|w| w[1].t != w[0].t + 1) {
        return Err(Error::InvalidArgument("envelope monitoring needs a trajectory recorded every step".into()));
    }
    let c_count = result.model.channels;
    let q = result.model.q;
    let d = params.d as f64;
    let sx = params.sigma_xi;
    let n = dataset.len() as f64;
    let cap = bands.cap * (c_count as f64).powf(-1.0 / f64::from(q));
    let noise_cap = bands.noise_premise * sigma_0 * sx * (d * c_count as f64).ln().sqrt();
    let rho_hat = dataset.view_frequencies();

    let mut fg = BlockReport::new("feature_growth");
    let mut ng = BlockReport::new("noise_growth");
    let mut fd = BlockReport::new("feature_drift");
    let mut nd = BlockReport::new("noise_drift");
    let mut hd = BlockReport::new("heldout_drift");
    let feat_drift = bands.drift * eta * sx / d.sqrt();
    let noise_drift = bands.drift * eta * (sx * sx + sx) / d.sqrt();

    for w in frames.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let max_noise = a.noise_corr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &k in &scope.features {
            let m = a.max_feature_corr(k);
            if m <= cap && max_noise <= noise_cap {
                let expected = eta * rho_hat[k] * psi_prime(m, q);
                let ratio = (b.max_feature_corr(k) - m) / expected;
                let ok = ratio >= bands.lo && ratio <= bands.hi;
                fg.record(ok, Violation { step: a.t, index: k, value: ratio, band: (bands.lo, bands.hi) });
            }
        }
        for &i in &scope.samples {
            let k = dataset.samples[i].k_star;
            let m = a.noise_corr[i];
            if a.max_feature_corr(k) <= cap && m <= cap {
                let expected = eta / n * sx * sx * psi_prime(m, q);
                let ratio = (b.noise_corr[i] - m) / expected;
                let ok = ratio >= bands.lo && ratio <= bands.hi;
                ng.record(ok, Violation { step: a.t, index: i, value: ratio, band: (bands.lo, bands.hi) });
            }
        }
        for k in 0..params.num_features {
            let drop = a.min_feature_corr(k) - b.min_feature_corr(k);
            fd.record(drop <= feat_drift, Violation { step: a.t, index: k, value: drop, band: (f64::NEG_INFINITY, feat_drift) });
        }
        for i in 0..dataset.len() {
            let drop = a.noise_corr_min[i] - b.noise_corr_min[i];
            nd.record(drop <= noise_drift, Violation { step: a.t, index: i, value: drop, band: (f64::NEG_INFINITY, noise_drift) });
        }
    }
    if let (Some(first), Some(rest)) = (frames.first(), frames.get(1..)) {
        if let Some(h0) = &first.heldout_corr {
            let band = bands.heldout * sigma_0 * sx;
            for f in rest {
                if let Some(h) = &f.heldout_corr {
                    for (j, (now, start)) in h.iter().zip(h0).enumerate() {
                        let dev = now.iter().zip(start).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                        hd.record(dev <= band, Violation { step: f.t, index: j, value: dev, band: (0.0, band) });
                    }
                }
            }
        }
    }
    Ok(EnvelopeReport {
        bands,
        feature_growth: fg.finish(bands.quota),
        noise_growth: ng.finish(bands.quota),
        feature_drift: fd.finish(bands.quota),
        noise_drift: nd.finish(bands.quota),
        heldout_drift: hd.finish(bands.quota),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{generate_dataset, SamplingMode};
    use crate::network::init_weights;

    #[test]
    fn zero_init_fails_parameter_conditions() {
        let p = DistParams::two_patch(256, vec![0.5, 0.5], 2.0);
        let ds = generate_dataset(&p, 8, SamplingMode::Iid, 1).unwrap();
        let m = Model::zeros(6, 256, 3);
        let r = check_ginit(&m, &ds, 0.0, GinitTolerances::default());
        assert_eq!(r.conditions.len(), 5);
        for name in ["feature_vs_parameter", "noise_vs_parameter", "parameter_norm"] {
            let c = r.condition(name).unwrap();
            assert!(!c.pass, "{name}");
            assert_eq!(c.measured_high, 0.0);
        }
        assert!(r.condition("noise_vs_noise").unwrap().pass);
        assert!(r.condition("feature_vs_noise").unwrap().pass);
    }

    #[test]
    fn zero_model_is_unfit_and_always_wrong() {
        let p = DistParams::two_patch(64, vec![0.5, 0.5], 1.0);
        let ds = generate_dataset(&p, 8, SamplingMode::Iid, 1).unwrap();
        let m = Model::zeros(2, 64, 3);
        let f = correlation_probe(0, &m, &ds, &ProbeSpec::default()).unwrap();
        let labels = classify_frame(&f, &ds, FitThresholds::default_for(2, 3));
        assert!(labels.iter().all(|l| l.tag == FitTag::Unfit));
        let te = estimate_test_error(&m, &p, 200, 3).unwrap();
        assert_eq!(te.error(), 1.0);
    }

    #[test]
    fn unit_feature_probe() {
        let p = DistParams::two_patch(32, vec![0.5, 0.5], 1.0);
        let ds = generate_dataset(&p, 4, SamplingMode::Iid, 1).unwrap();
        let mut m = Model::zeros(2, 32, 3);
        m.weights[0] = 1.0;
        let f = correlation_probe(0, &m, &ds, &ProbeSpec::default()).unwrap();
        assert_eq!(f.feat_corr[0], vec![1.0, 0.0]);
        assert_eq!(f.feat_corr[1], vec![0.0, 0.0]);
    }

    #[test]
    fn ginit_passes_at_moderate_size() {
        let p = DistParams::two_patch(4096, vec![0.25; 4], 2.0);
        let ds = generate_dataset(&p, 16, SamplingMode::Iid, 11).unwrap();
        let m = init_weights(12, 4096, 3, 0.05, 11);
        let r = check_ginit(&m, &ds, 0.05, GinitTolerances::default());
        assert!(r.pass, "{r:?}");
    }
}
