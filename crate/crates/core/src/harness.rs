//! Scenario runner, parameter sweeps, scaling fits, assumption checks and
//! report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply, augment_dataset, build_permutation};
use crate::baselines::{self, Cutoffs};
use crate::diagnostics::{
    self, EnvelopeBands, EnvelopeReport, EnvelopeScope, FitLabel, FitTag, FitThresholds, GinitReport,
    GinitTolerances, ProbeFrame, TestError,
};
use crate::distribution::{
    generate_dataset, sample_point, AugmentationInfo, Dataset, DistParams, Forced, SamplingMode,
};
use crate::error::{Error, Result};
use crate::io;
use crate::network::{self, Model, ProbeSpec, StopReason, TrainConfig};
use crate::rng::{self, Domain};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Thm1,
    Thm2,
    Scaling,
    Cutoff,
    Spurious,
    Unbalanced,
    AugVsIid,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 7] = [
        ScenarioName::Thm1,
        ScenarioName::Thm2,
        ScenarioName::Scaling,
        ScenarioName::Cutoff,
        ScenarioName::Spurious,
        ScenarioName::Unbalanced,
        ScenarioName::AugVsIid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Thm1 => "thm1",
            ScenarioName::Thm2 => "thm2",
            ScenarioName::Scaling => "scaling",
            ScenarioName::Cutoff => "cutoff",
            ScenarioName::Spurious => "spurious",
            ScenarioName::Unbalanced => "unbalanced",
            ScenarioName::AugVsIid => "aug_vs_iid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    #[serde(rename = "C")]
    pub channels: usize,
    pub q: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Number of fresh noise vectors tracked during training.
    #[serde(default)]
    pub heldout: usize,
    #[serde(default)]
    pub full_noise: bool,
}

/// Knobs only some scenarios read.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioOptions {
    /// `scaling`: train on the augmented dataset.
    #[serde(default)]
    pub augment: bool,
    /// Keep every minor view at this many samples when `n` is swept.
    #[serde(default)]
    pub minor_count: Option<usize>,
    /// `aug_vs_iid`: fraction of the budget spent on iid samples.
    #[serde(default)]
    pub iid_fraction: Option<f64>,
    /// `unbalanced`: extra first-view samples appended to the balanced set.
    #[serde(default)]
    pub extra_major: Option<usize>,
    /// `cutoff`: also score the degree-`q` tensor predictor.
    #[serde(default)]
    pub tensor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub dist: DistParams,
    pub n: usize,
    #[serde(default)]
    pub mode: SamplingMode,
    pub train: TrainConfig,
    pub model: ModelHyper,
    #[serde(default)]
    pub probes: ProbeSettings,
    #[serde(default)]
    pub monitor: Option<EnvelopeBands>,
    #[serde(default)]
    pub ginit: GinitTolerances,
    #[serde(default)]
    pub thresholds: Option<FitThresholds>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub options: ScenarioOptions,
}

fn default_n_test() -> usize {
    10_000
}

fn desk_thm_family(sigma_xi: f64) -> DistParams {
    DistParams::two_patch(4096, vec![0.875, 1.0 / 24.0, 1.0 / 24.0, 1.0 / 24.0], sigma_xi)
}

impl ScenarioSpec {
    /// Desk-scale defaults for each named scenario.
    pub fn preset(name: ScenarioName) -> Self {
        let base = ScenarioSpec {
            name,
            dist: desk_thm_family(1.5),
            n: 24,
            mode: SamplingMode::Stratified,
            train: TrainConfig { eta: 0.2, sigma_0: 0.03, margin_target: 1.0, max_steps: 60_000, record_every: 1, seed: 0 },
            model: ModelHyper { channels: 12, q: 3 },
            probes: ProbeSettings::default(),
            monitor: None,
            ginit: GinitTolerances::default(),
            thresholds: None,
            n_test: default_n_test(),
            seeds: vec![1, 2, 3],
            options: ScenarioOptions::default(),
        };
        match name {
            ScenarioName::Thm1 | ScenarioName::Thm2 => {
                ScenarioSpec { monitor: Some(EnvelopeBands::default()), probes: ProbeSettings { heldout: 8, full_noise: false }, ..base }
            }
            ScenarioName::Scaling => ScenarioSpec {
                train: TrainConfig { record_every: 50, ..base.train.clone() },
                n_test: 1000,
                options: ScenarioOptions { minor_count: Some(1), ..Default::default() },
                ..base
            },
            ScenarioName::Cutoff => {
                let mut dist = DistParams::two_patch(4096, vec![0.95, 0.05], 10.0);
                dist.num_features = 2;
                ScenarioSpec { dist, n: 1024, n_test: 2000, ..base }
            }
            ScenarioName::Spurious => {
                let d = 1024;
                let mut dist = DistParams::two_patch(d, vec![0.5, 0.5], 1.44);
                dist.num_patches = 3;
                let mut u = vec![0.0; d];
                u[d - 1] = 1.0;
                dist.spurious = Some(crate::distribution::SpuriousConfig { u, rho_u_pos: 0.8, rho_u_neg: 0.2, slot: 0 });
                ScenarioSpec { dist, n: 32, train: TrainConfig { record_every: 10, ..base.train.clone() }, n_test: 4000, ..base }
            }
            ScenarioName::Unbalanced => {
                let dist = DistParams::two_patch(4096, vec![0.25; 4], 2.0);
                ScenarioSpec {
                    dist,
                    n: 32,
                    train: TrainConfig { record_every: 10, ..base.train.clone() },
                    options: ScenarioOptions { extra_major: Some(64), ..Default::default() },
                    ..base
                }
            }
            ScenarioName::AugVsIid => {
                let dist = DistParams::two_patch(4096, vec![0.8, 0.2], 2.4);
                ScenarioSpec {
                    dist,
                    n: 64,
                    train: TrainConfig { record_every: 10, ..base.train.clone() },
                    options: ScenarioOptions { iid_fraction: Some(0.5), ..Default::default() },
                    ..base
                }
            }
        }
    }

    pub fn thresholds(&self) -> FitThresholds {
        self.thresholds.unwrap_or_else(|| FitThresholds::default_for(self.model.channels, self.model.q))
    }

    /// Checks that the named scenario has what its runner reads.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(format!("{}: {m}", self.name.as_str())));
        self.dist.check()?;
        self.train.check()?;
        if self.seeds.is_empty() {
            return bad("seeds list is empty".into());
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.model.channels == 0 || self.model.q < 3 {
            return bad("need C >= 1 and q >= 3".into());
        }
        if self.n_test < 100 {
            return bad(format!("n_test = {} is below 100", self.n_test));
        }
        if self.monitor.is_some() && self.train.record_every != 1 {
            return bad("envelope monitoring needs record_every = 1".into());
        }
        let k = self.dist.num_features;
        let needs_aug = matches!(self.name, ScenarioName::Thm2 | ScenarioName::AugVsIid | ScenarioName::Spurious)
            || (self.name == ScenarioName::Scaling && self.options.augment);
        if needs_aug && (k < 2 || self.dist.d < k + 2) {
            return bad(format!("augmentation needs K >= 2 and d - K >= 2 (K = {k}, d = {})", self.dist.d));
        }
        match self.name {
            ScenarioName::Thm1 | ScenarioName::Thm2 if k < 2 => bad("needs at least one minor view".into()),
            ScenarioName::Cutoff if k != 2 => bad(format!("needs K = 2, got {k}")),
            ScenarioName::Cutoff if self.options.tensor && self.model.q % 2 == 0 => bad("tensor scoring needs odd q".into()),
            ScenarioName::Spurious => match &self.dist.spurious {
                None => bad("missing spurious configuration".into()),
                Some(s) if !(s.rho_u_pos < 1.0 && s.rho_u_neg < s.rho_u_pos) => {
                    bad("balancing needs rho_u_neg < rho_u_pos < 1".into())
                }
                _ => Ok(()),
            },
            ScenarioName::Unbalanced if self.options.extra_major.unwrap_or(0) == 0 => {
                bad("extra_major must be set and positive".into())
            }
            ScenarioName::AugVsIid => match self.options.iid_fraction {
                Some(p) if p > 0.0 && p < 1.0 && (p * self.n as f64).round() >= 1.0 => Ok(()),
                _ => bad("iid_fraction must lie in (0, 1) and leave at least one iid sample".into()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagCounts {
    pub feature_learned: usize,
    pub noise_memorized: usize,
    pub both: usize,
    pub unfit: usize,
}

impl TagCounts {
    fn add(&mut self, tag: FitTag) {
        match tag {
            FitTag::FeatureLearned => self.feature_learned += 1,
            FitTag::NoiseMemorized => self.noise_memorized += 1,
            FitTag::Both => self.both += 1,
            FitTag::Unfit => self.unfit += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.feature_learned + self.noise_memorized + self.both + self.unfit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub thresholds: FitThresholds,
    pub overall: TagCounts,
    /// Indexed by main feature.
    pub per_view: Vec<TagCounts>,
}

fn summarize_fit(labels: &[FitLabel], k: usize, th: FitThresholds) -> FitSummary {
    let mut overall = TagCounts::default();
    let mut per_view = vec![TagCounts::default(); k];
    for l in labels {
        overall.add(l.tag);
        per_view[l.k_star].add(l.tag);
    }
    FitSummary { thresholds: th, overall, per_view }
}

/// Full trajectories, labels and weights; kept in memory only.
#[derive(Debug, Clone)]
pub struct ArmDetail {
    pub trajectory: Vec<ProbeFrame>,
    pub labels: Vec<FitLabel>,
    pub model: Model,
}

/// One training run inside a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmRecord {
    pub label: String,
    pub n_train: usize,
    pub stop_time: Option<usize>,
    pub stop_reason: StopReason,
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_min_margin: f64,
    pub ginit: GinitReport,
    pub fit: FitSummary,
    pub test: Option<TestError>,
    pub envelope: Option<EnvelopeReport>,
    /// Per view: largest `<w_c, v_k>` over channels and recorded steps.
    pub peak_feature_corr: Vec<f64>,
    /// Per view: largest `<w_c, v_k>` over channels at the last step.
    pub final_feature_corr: Vec<f64>,
    /// Largest `<w_c, u>` at the first and last recorded step, if tracked.
    pub spurious_corr: Option<(f64, f64)>,
    #[serde(skip)]
    pub detail: Option<ArmDetail>,
}

impl ArmRecord {
    /// Error conditional on the main feature lying in `views`, pooled.
    pub fn pooled_error(&self, views: std::ops::Range<usize>) -> Option<f64> {
        let t = self.test.as_ref()?;
        let (e, n) = t.per_view[views].iter().fold((0, 0), |(e, n), v| (e + v.errors, n + v.trials));
        (n > 0).then(|| e as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Assertion { name: name.into(), pass, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecord {
    pub rho: Vec<f64>,
    pub cutoffs: Cutoffs,
    /// View-conditional accuracy of the mean predictor.
    pub mean_accuracy: Vec<f64>,
    pub tensor_accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousRecord {
    /// `rho_u(+1) - rho_u(-1)` in the raw training set.
    pub raw_rate: f64,
    /// The same difference after balancing.
    pub balanced_rate: f64,
    pub copies_added: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: ScenarioName,
    pub seed: u64,
    /// The spec this run came from, narrowed to its own seed.
    pub spec: ScenarioSpec,
    pub sweep: Option<SweepPoint>,
    /// Arm whose stop time the scaling fits read.
    pub primary: String,
    pub arms: Vec<ArmRecord>,
    pub linear: Option<LinearRecord>,
    pub spurious: Option<SpuriousRecord>,
    pub assertions: Vec<Assertion>,
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn arm(&self, label: &str) -> Option<&ArmRecord> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn primary_stop_time(&self) -> Option<usize> {
        self.arm(&self.primary).and_then(|a| a.stop_time)
    }
}

/// Seeds derived from a run seed, one per purpose.
pub fn dataset_seed(seed: u64) -> u64 {
    rng::child_seed(seed, 0)
}
pub fn init_seed(seed: u64) -> u64 {
    rng::child_seed(seed, 1)
}
pub fn test_seed(seed: u64) -> u64 {
    rng::child_seed(seed, 2)
}
fn heldout_seed(seed: u64) -> u64 {
    rng::child_seed(seed, 3)
}
fn extra_seed(seed: u64) -> u64 {
    rng::child_seed(seed, 4)
}

struct ArmPlan<'a> {
    label: &'a str,
    data: &'a Dataset,
    test_params: &'a DistParams,
    scope: Option<EnvelopeScope>,
}

fn train_arm(spec: &ScenarioSpec, seed: u64, plan: ArmPlan<'_>) -> Result<ArmRecord> {
    let data = plan.data;
    let params = &data.params;
    let model0 = network::init_weights(spec.model.channels, params.d, spec.model.q, spec.train.sigma_0, init_seed(seed));
    let ginit = diagnostics::check_ginit(&model0, data, spec.train.sigma_0, spec.ginit);
    let probes = ProbeSpec {
        full_noise: spec.probes.full_noise,
        heldout: diagnostics::heldout_noise(params, spec.probes.heldout, heldout_seed(seed)),
    };
    let config = TrainConfig { seed, ..spec.train.clone() };
    let result = network::train(data, model0, &config, Some(&probes))?;
    let th = spec.thresholds();
    let labels = diagnostics::classify_fit(&result, data, th);
    let k = params.num_features;
    let fit = summarize_fit(&labels, k, th);
    let test = if result.model.is_finite() {
        Some(diagnostics::estimate_test_error(&result.model, plan.test_params, spec.n_test, test_seed(seed))?)
    } else {
        None
    };
    let envelope = match (&spec.monitor, plan.scope) {
        (Some(bands), Some(scope)) => {
            Some(diagnostics::envelope_monitor(&result, data, spec.train.eta, spec.train.sigma_0, &scope, *bands)?)
        }
        _ => None,
    };
    let frames = result.trajectory.iter().chain(std::iter::once(&result.final_frame));
    let mut peak = vec![f64::NEG_INFINITY; k];
    for f in frames {
        for (kk, p) in peak.iter_mut().enumerate() {
            *p = p.max(f.max_feature_corr(kk));
        }
    }
    let final_feature_corr = (0..k).map(|kk| result.final_frame.max_feature_corr(kk)).collect();
    let spurious_corr = match (result.trajectory.first().and_then(|f| f.max_spurious_corr()), result.final_frame.max_spurious_corr()) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    Ok(ArmRecord {
        label: plan.label.into(),
        n_train: data.len(),
        stop_time: result.stop_time,
        steps_run: result.final_frame.t,
        stop_reason: result.stop_reason.clone(),
        final_loss: result.final_frame.loss,
        final_min_margin: result.final_frame.min_margin,
        ginit,
        fit,
        test,
        envelope,
        peak_feature_corr: peak,
        final_feature_corr,
        spurious_corr,
        detail: Some(ArmDetail { trajectory: result.trajectory, labels, model: result.model }),
    })
}

/// Trains on a given dataset with the spec's model, probes and monitor, and
/// tests against the spec's distribution.
pub fn train_on(spec: &ScenarioSpec, seed: u64, data: &Dataset, label: &str) -> Result<ArmRecord> {
    spec.train.check()?;
    let scope = spec.monitor.map(|_| full_scope(data));
    train_arm(spec, seed, ArmPlan { label, data, test_params: &spec.dist, scope })
}

fn minor_scope(data: &Dataset) -> EnvelopeScope {
    EnvelopeScope { features: vec![0], samples: (0..data.len()).filter(|&i| data.samples[i].k_star != 0).collect() }
}

fn full_scope(data: &Dataset) -> EnvelopeScope {
    EnvelopeScope { features: (0..data.params.num_features).collect(), samples: (0..data.len()).collect() }
}

/// Checks for the run without augmentation: every sample fit, minor views
/// never learned, their samples memorized, chance-level error on them.
pub fn thm1_assertions(spec: &ScenarioSpec, arm: &ArmRecord) -> Vec<Assertion> {
    let k = spec.dist.num_features;
    let sigma_0 = spec.train.sigma_0;
    let cap = 3.0 * sigma_0 * (spec.dist.d as f64).ln().sqrt();
    let minor_peak = arm.peak_feature_corr[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let minor_tags = &arm.fit.per_view[1..];
    let memorized = minor_tags.iter().all(|t| t.noise_memorized == t.total());
    let mut out = vec![
        Assertion::new("margins_reached", arm.stop_time.is_some(), format!("stop_time = {:?}", arm.stop_time)),
        Assertion::new("minor_views_unlearned", minor_peak <= cap, format!("peak minor correlation {minor_peak:.4} vs cap {cap:.4}")),
        Assertion::new("minor_samples_memorized", memorized, format!("minor-view tags {minor_tags:?}")),
    ];
    match (arm.pooled_error(1..k), arm.test.as_ref()) {
        (Some(minor), Some(t)) => {
            out.push(Assertion::new(
                "minor_conditional_error",
                (0.3..=0.7).contains(&minor),
                format!("pooled minor-view error {minor:.4}, band [0.3, 0.7]"),
            ));
            let expected = 0.5 * spec.dist.rho[1..].iter().sum::<f64>();
            out.push(Assertion::new(
                "total_error",
                (t.error() - expected).abs() <= 0.1,
                format!("test error {:.4} vs {expected:.4} +- 0.1", t.error()),
            ));
        }
        _ => out.push(Assertion::new("test_error", false, "model diverged; no test estimate".into())),
    }
    if let Some(env) = &arm.envelope {
        out.push(Assertion::new(
            "noise_growth_envelope",
            env.noise_growth.pass,
            format!("compliance {:.4} over {} steps", env.noise_growth.compliance, env.noise_growth.checked),
        ));
    }
    out
}

/// Checks for the augmented run against its matched unaugmented run.
pub fn thm2_assertions(spec: &ScenarioSpec, iid: &ArmRecord, aug: &ArmRecord) -> Vec<Assertion> {
    let th = spec.thresholds();
    let weakest = aug.final_feature_corr.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = vec![
        Assertion::new("features_learned", weakest >= th.feature, format!("weakest feature {weakest:.4} vs {:.4}", th.feature)),
        Assertion::new(
            "samples_feature_learned",
            aug.fit.overall.feature_learned + aug.fit.overall.both == aug.n_train,
            format!(
                "{} of {} clear the feature threshold ({} of them also clear the noise threshold)",
                aug.fit.overall.feature_learned + aug.fit.overall.both,
                aug.n_train,
                aug.fit.overall.both
            ),
        ),
    ];
    match &aug.test {
        Some(t) => out.push(Assertion::new("test_error", t.error() <= 0.01, format!("test error {:.4} vs 0.01", t.error()))),
        None => out.push(Assertion::new("test_error", false, "model diverged".into())),
    }
    let faster = matches!((aug.stop_time, iid.stop_time), (Some(a), Some(b)) if a < b);
    out.push(Assertion::new(
        "faster_than_memorization",
        faster,
        format!("augmented stop {:?} vs unaugmented {:?}", aug.stop_time, iid.stop_time),
    ));
    if let Some(env) = &aug.envelope {
        out.push(Assertion::new(
            "feature_growth_envelope",
            env.feature_growth.pass,
            format!("compliance {:.4} over {} steps", env.feature_growth.compliance, env.feature_growth.checked),
        ));
    }
    out
}

/// Appends `count` samples of the first view drawn from their own streams.
fn with_extra_major(base: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let mut samples = base.samples.clone();
    for j in 0..count {
        let mut r = rng::stream(seed, Domain::Misc, j as u64);
        samples.push(sample_point(&base.params, Forced { label: None, view: Some(0) }, &mut r)?);
    }
    let mut out = Dataset { samples, ..base.clone() };
    out.params.rho = out.view_frequencies();
    Ok(out)
}

/// The first `m` samples of `source` plus `extra` one-shot augmented copies,
/// cycling through sources and shifts.
fn one_shot_augmented(source: &Dataset, extra: usize) -> Result<Dataset> {
    let params = &source.params;
    let k = params.num_features;
    let m = source.len();
    let perms = (1..k).map(|s| build_permutation(s, params.d, k)).collect::<Result<Vec<_>>>()?;
    let mut samples = source.samples.clone();
    let mut pairing: Vec<(usize, usize)> = (0..m).map(|i| (i, 0)).collect();
    for j in 0..extra {
        let (src, shift) = (j % m, 1 + (j / m) % (k - 1));
        samples.push(apply(&perms[shift - 1], &source.samples[src])?);
        pairing.push((src, shift));
    }
    let mut shifts: Vec<usize> = pairing.iter().map(|p| p.1).filter(|&s| s > 0).collect();
    shifts.sort_unstable();
    shifts.dedup();
    Ok(Dataset {
        samples,
        params: params.clone(),
        seed: source.seed,
        mode: source.mode,
        augmented_from: Some(AugmentationInfo { source_seed: source.seed, shifts_applied: shifts, pairing }),
    })
}

/// Adds shifted copies of negative samples carrying `u` until both classes
/// carry it at the same rate.
fn balance_spurious(data: &Dataset) -> Result<(Dataset, usize)> {
    let rate = |ds: &Dataset, y: i8| {
        let of: Vec<_> = ds.samples.iter().filter(|s| s.y == y).collect();
        (of.iter().filter(|s| s.has_spurious).count(), of.len())
    };
    let (ap, np) = rate(data, 1);
    let (an, nn) = rate(data, -1);
    let target = ap as f64 / np.max(1) as f64;
    let need = ((target * nn as f64 - an as f64) / (1.0 - target)).ceil().max(0.0) as usize;
    let negatives: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].y == -1).collect();
    if need > 0 && negatives.is_empty() {
        return Err(Error::Insufficient("no negative samples to copy".into()));
    }
    let k = data.params.num_features;
    let perm = build_permutation(1, data.params.d, k)?;
    let mut out = data.clone();
    for j in 0..need {
        let mut s = apply(&perm, &data.samples[negatives[j % negatives.len()]])?;
        s.has_spurious = true;
        out.samples.push(s);
    }
    Ok((out, need))
}

fn spurious_rate(data: &Dataset) -> f64 {
    let frac = |y: i8| {
        let of: Vec<_> = data.samples.iter().filter(|s| s.y == y).collect();
        of.iter().filter(|s| s.has_spurious).count() as f64 / of.len().max(1) as f64
    };
    frac(1) - frac(-1)
}

/// Runs one seed of a scenario. Failed assertions are recorded, not raised.
pub fn run_seed(spec: &ScenarioSpec, seed: u64) -> Result<RunRecord> {
    spec.validate()?;
    let started = Instant::now();
    let snapshot = ScenarioSpec { seeds: vec![seed], ..spec.clone() };
    let params = &spec.dist;
    let mut arms = Vec::new();
    let mut assertions = Vec::new();
    let mut linear = None;
    let mut spurious = None;
    let primary;
    match spec.name {
        ScenarioName::Thm1 => {
            let d = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let arm = train_arm(spec, seed, ArmPlan { label: "iid", data: &d, test_params: params, scope: Some(minor_scope(&d)) })?;
            assertions = thm1_assertions(spec, &arm);
            arms.push(arm);
            primary = "iid";
        }
        ScenarioName::Thm2 => {
            let d = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let aug = augment_dataset(&d)?;
            let iid = train_arm(spec, seed, ArmPlan { label: "iid", data: &d, test_params: params, scope: Some(minor_scope(&d)) })?;
            let augd = train_arm(spec, seed, ArmPlan { label: "aug", data: &aug, test_params: params, scope: Some(full_scope(&aug)) })?;
            assertions = thm2_assertions(spec, &iid, &augd);
            arms.push(iid);
            arms.push(augd);
            primary = "aug";
        }
        ScenarioName::Scaling => {
            let d = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let data = if spec.options.augment { augment_dataset(&d)? } else { d };
            let arm = train_arm(spec, seed, ArmPlan { label: "train", data: &data, test_params: params, scope: None })?;
            assertions.push(Assertion::new("margins_reached", arm.stop_time.is_some(), format!("stop_time = {:?}", arm.stop_time)));
            arms.push(arm);
            primary = "train";
        }
        ScenarioName::Cutoff => {
            let d = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let pred = baselines::mean_linear(&d);
            let views = 0..params.num_features;
            let mean_accuracy = views
                .clone()
                .map(|k| baselines::linear_view_accuracy(&pred, params, k, spec.n_test, test_seed(seed)))
                .collect::<Result<Vec<_>>>()?;
            let tensor_accuracy = if spec.options.tensor {
                Some(
                    views
                        .map(|k| baselines::tensor_view_accuracy(&d, spec.model.q, k, spec.n_test, test_seed(seed)))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            linear = Some(LinearRecord {
                rho: params.rho.clone(),
                cutoffs: baselines::cutoffs(params.sigma_xi, spec.n, params.d, spec.model.q),
                mean_accuracy,
                tensor_accuracy,
            });
            primary = "";
        }
        ScenarioName::Spurious => {
            let d = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let (bal, copies) = balance_spurious(&d)?;
            let clean = DistParams { spurious: None, ..params.clone() };
            let raw = train_arm(spec, seed, ArmPlan { label: "raw", data: &d, test_params: &clean, scope: None })?;
            let balanced = train_arm(spec, seed, ArmPlan { label: "balanced", data: &bal, test_params: &clean, scope: None })?;
            let (r, b) = (raw.spurious_corr.map_or(f64::NAN, |s| s.1), balanced.spurious_corr.map_or(f64::NAN, |s| s.1));
            assertions.push(Assertion::new(
                "balancing_reduces_spurious",
                b < r,
                format!("final max <w_c, u>: balanced {b:.4} vs raw {r:.4}"),
            ));
            spurious = Some(SpuriousRecord { raw_rate: spurious_rate(&d), balanced_rate: spurious_rate(&bal), copies_added: copies });
            arms.push(raw);
            arms.push(balanced);
            primary = "raw";
        }
        ScenarioName::Unbalanced => {
            let bal = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let full = with_extra_major(&bal, spec.options.extra_major.unwrap_or(0), extra_seed(seed))?;
            let b = train_arm(spec, seed, ArmPlan { label: "balanced", data: &bal, test_params: params, scope: None })?;
            let f = train_arm(spec, seed, ArmPlan { label: "full", data: &full, test_params: params, scope: None })?;
            let acc = |a: &ArmRecord| a.test.as_ref().map_or(f64::NAN, TestError::balanced_accuracy);
            assertions.push(Assertion::new(
                "balanced_not_worse",
                acc(&b) >= acc(&f) - 0.01,
                format!("balanced-subset accuracy {:.4} vs full {:.4} (tolerance 0.01)", acc(&b), acc(&f)),
            ));
            arms.push(b);
            arms.push(f);
            primary = "full";
        }
        ScenarioName::AugVsIid => {
            let p = spec.options.iid_fraction.unwrap_or(1.0);
            let m = (p * spec.n as f64).round() as usize;
            let full = generate_dataset(params, spec.n, spec.mode, dataset_seed(seed))?;
            let part = generate_dataset(params, m, spec.mode, dataset_seed(seed))?;
            let mixed = one_shot_augmented(&part, spec.n - m)?;
            let pi = train_arm(spec, seed, ArmPlan { label: "p_iid", data: &part, test_params: params, scope: None })?;
            let pa = train_arm(spec, seed, ArmPlan { label: "p_aug", data: &mixed, test_params: params, scope: None })?;
            let fi = train_arm(spec, seed, ArmPlan { label: "full_iid", data: &full, test_params: params, scope: None })?;
            let err = |a: &ArmRecord| a.test.as_ref().map_or(f64::NAN, TestError::error);
            assertions.push(Assertion::new(
                "beats_iid_subset",
                err(&pa) < err(&pi),
                format!("mixed error {:.4} vs iid-subset error {:.4}", err(&pa), err(&pi)),
            ));
            assertions.push(Assertion::new(
                "near_full_iid",
                err(&pa) <= err(&fi) + 0.02,
                format!("mixed error {:.4} vs full iid error {:.4} (+0.02)", err(&pa), err(&fi)),
            ));
            arms.extend([pi, pa, fi]);
            primary = "p_aug";
        }
    }
    Ok(RunRecord {
        scenario: spec.name,
        seed,
        spec: snapshot,
        sweep: None,
        primary: primary.into(),
        arms,
        linear,
        spurious,
        assertions,
        wall_clock_s: started.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Runs every seed of the spec, at most `jobs` at a time.
pub fn run_scenario(spec: &ScenarioSpec, jobs: usize) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    pool(jobs)?.install(|| spec.seeds.par_iter().map(|&s| run_seed(spec, s)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    SigmaXi,
    Sigma0,
    Rho2,
    P,
    K,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::SigmaXi => "sigma_xi",
            SweepAxis::Sigma0 => "sigma_0",
            SweepAxis::Rho2 => "rho_2",
            SweepAxis::P => "p",
            SweepAxis::K => "K",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SweepAxis::N, SweepAxis::SigmaXi, SweepAxis::Sigma0, SweepAxis::Rho2, SweepAxis::P, SweepAxis::K]
            .into_iter()
            .find(|a| a.as_str() == s)
    }

    /// The spec with this axis set to `value`.
    pub fn apply(self, spec: &ScenarioSpec, value: f64) -> Result<ScenarioSpec> {
        let mut s = spec.clone();
        let integral = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidArgument(format!("{} must be a positive integer, got {value}", self.as_str())))
            }
        };
        match self {
            SweepAxis::N => {
                s.n = integral()?;
                if let Some(c) = s.options.minor_count {
                    let k = s.dist.num_features;
                    let minor = c as f64 / s.n as f64;
                    s.dist.rho = std::iter::once(1.0 - (k - 1) as f64 * minor).chain(std::iter::repeat(minor).take(k - 1)).collect();
                }
            }
            SweepAxis::SigmaXi => s.dist.sigma_xi = value,
            SweepAxis::Sigma0 => s.train.sigma_0 = value,
            SweepAxis::Rho2 => {
                if s.dist.num_features != 2 {
                    return Err(Error::InvalidArgument("rho_2 sweeps need K = 2".into()));
                }
                s.dist.rho = vec![1.0 - value, value];
            }
            SweepAxis::P => s.options.iid_fraction = Some(value),
            SweepAxis::K => {
                let k = integral()?;
                s.dist.num_features = k;
                s.dist.rho = vec![1.0 / k as f64; k];
            }
        }
        Ok(s)
    }

    /// Reads this axis back from a spec.
    pub fn value_of(self, spec: &ScenarioSpec) -> f64 {
        match self {
            SweepAxis::N => spec.n as f64,
            SweepAxis::SigmaXi => spec.dist.sigma_xi,
            SweepAxis::Sigma0 => spec.train.sigma_0,
            SweepAxis::Rho2 => spec.dist.rho.get(1).copied().unwrap_or(f64::NAN),
            SweepAxis::P => spec.options.iid_fraction.unwrap_or(1.0),
            SweepAxis::K => spec.dist.num_features as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFailure {
    pub value: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub records: Vec<RunRecord>,
    pub failures: Vec<SweepFailure>,
}

/// One run per (grid value, seed); per-run details are dropped to bound memory.
pub fn sweep(spec: &ScenarioSpec, axis: SweepAxis, grid: &[f64], jobs: usize) -> Result<SweepResult> {
    if grid.len() < 4 {
        return Err(Error::InvalidArgument(format!("sweep grid needs at least 4 points, got {}", grid.len())));
    }
    let up = grid.windows(2).all(|w| w[1] > w[0]);
    let down = grid.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::InvalidArgument("sweep grid must be strictly monotone".into()));
    }
    if spec.seeds.len() < 3 {
        return Err(Error::InvalidArgument(format!("sweeps need at least 3 seeds, got {}", spec.seeds.len())));
    }
    let specs = grid.iter().map(|&v| axis.apply(spec, v).map(|s| (v, s))).collect::<Result<Vec<_>>>()?;
    for (_, s) in &specs {
        s.validate()?;
    }
    let jobs_list: Vec<(f64, &ScenarioSpec, u64)> =
        specs.iter().flat_map(|(v, s)| s.seeds.iter().map(move |&seed| (*v, s, seed))).collect();
    let outcomes: Vec<(f64, u64, Result<RunRecord>)> = pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(v, s, seed)| {
                let r = run_seed(s, seed).map(|mut r| {
                    r.sweep = Some(SweepPoint { axis, value: v });
                    for a in &mut r.arms {
                        a.detail = None;
                    }
                    r
                });
                (v, seed, r)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (value, seed, r) in outcomes {
        match r {
            Ok(r) => records.push(r),
            Err(e) => failures.push(SweepFailure { value, seed, error: e.to_string() }),
        }
    }
    Ok(SweepResult { axis, grid: grid.to_vec(), records, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub finite_runs: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<ScalingPoint>,
}

/// Log-log least squares of the per-point median against `x`. Runs without a
/// value are counted but skipped; points with no finite run are dropped.
pub fn fit_scaling_points(samples: &[(f64, Option<f64>)]) -> Result<ScalingFit> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>, usize)> = BTreeMap::new();
    for &(x, y) in samples {
        let g = groups.entry(x.to_bits()).or_insert((x, Vec::new(), 0));
        g.2 += 1;
        if let Some(y) = y.filter(|y| y.is_finite() && *y > 0.0) {
            g.1.push(y);
        }
    }
    let mut points: Vec<ScalingPoint> = groups
        .into_values()
        .filter(|(_, ys, _)| !ys.is_empty())
        .map(|(x, ys, runs)| ScalingPoint {
            x,
            median: stats::median(&ys),
            min: ys.iter().copied().fold(f64::INFINITY, f64::min),
            max: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            finite_runs: ys.len(),
            runs,
        })
        .collect();
    points.sort_by(|a, b| a.x.total_cmp(&b.x));
    if points.len() < 4 {
        return Err(Error::Insufficient(format!("{} grid points with finite values; need 4", points.len())));
    }
    if points.iter().any(|p| p.x <= 0.0) {
        return Err(Error::InvalidArgument("log-log fits need positive x".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.x.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.median.ln()).collect();
    let line = stats::least_squares(&lx, &ly);
    Ok(ScalingFit { slope: line.slope, intercept: line.intercept, r_squared: line.r_squared, points })
}

/// Scaling of the primary arm's stop time along `axis`.
pub fn fit_scaling(records: &[RunRecord], axis: SweepAxis) -> Result<ScalingFit> {
    let samples: Vec<(f64, Option<f64>)> =
        records.iter().map(|r| (axis.value_of(&r.spec), r.primary_stop_time().map(|t| t as f64))).collect();
    fit_scaling_points(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffTransition {
    /// `(rho_2, median view-2 accuracy)` in increasing `rho_2`.
    pub points: Vec<(f64, f64)>,
    pub rho_cut: f64,
    /// Log-interpolated `rho_2` where accuracy crosses 0.75.
    pub midpoint: Option<f64>,
    pub low_end_ok: bool,
    pub high_end_ok: bool,
    pub midpoint_ok: bool,
}

impl CutoffTransition {
    pub fn pass(&self) -> bool {
        self.low_end_ok && self.high_end_ok && self.midpoint_ok
    }
}

/// Reads the mean predictor's view-2 accuracy along a `rho_2` sweep.
pub fn cutoff_transition(records: &[RunRecord]) -> Result<CutoffTransition> {
    let samples: Vec<(f64, f64, f64)> = records
        .iter()
        .filter_map(|r| {
            let l = r.linear.as_ref()?;
            Some((l.rho[1], l.mean_accuracy[1], l.cutoffs.rho_cut_linear))
        })
        .collect();
    let Some(rho_cut) = samples.first().map(|s| s.2) else {
        return Err(Error::Insufficient("no cutoff records".into()));
    };
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for (x, a, _) in &samples {
        groups.entry(x.to_bits()).or_insert((*x, Vec::new())).1.push(*a);
    }
    let mut points: Vec<(f64, f64)> = groups.into_values().map(|(x, a)| (x, stats::median(&a))).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let midpoint = points.windows(2).find(|w| w[0].1 < 0.75 && w[1].1 >= 0.75).map(|w| {
        let t = (0.75 - w[0].1) / (w[1].1 - w[0].1);
        (w[0].0.ln() + t * (w[1].0.ln() - w[0].0.ln())).exp()
    });
    let midpoint_ok = midpoint.is_some_and(|m| m / rho_cut <= 10.0 && rho_cut / m <= 10.0);
    Ok(CutoffTransition {
        low_end_ok: points.first().is_some_and(|p| p.1 <= 0.6),
        high_end_ok: points.last().is_some_and(|p| p.1 >= 0.9),
        points,
        rho_cut,
        midpoint,
        midpoint_ok,
    })
}

/// Inputs to the parameter-regime check. Counts are real-valued so that
/// asymptotic families such as `n = d^0.33` can be evaluated directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeInputs {
    pub d: f64,
    pub patches: f64,
    pub num_features: f64,
    pub n: f64,
    pub rho: Vec<f64>,
    pub sigma_xi: f64,
    pub sigma_0: f64,
    pub alpha: f64,
    pub q: u32,
    pub eta: f64,
}

impl RegimeInputs {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        RegimeInputs {
            d: spec.dist.d as f64,
            patches: spec.dist.num_patches as f64,
            num_features: spec.dist.num_features as f64,
            n: spec.n as f64,
            rho: spec.dist.rho.clone(),
            sigma_xi: spec.dist.sigma_xi,
            sigma_0: spec.train.sigma_0,
            alpha: spec.dist.alpha,
            q: spec.model.q,
            eta: spec.train.eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCheck {
    pub condition: u8,
    pub name: String,
    /// Should be small (`o(1)` reading) unless `expect_order_one`.
    pub ratio: f64,
    pub expect_order_one: bool,
    pub consistent: bool,
    /// Within 5% of 1, where the asymptotic reading is a judgement call.
    pub borderline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub checks: Vec<RegimeCheck>,
}

impl RegimeReport {
    pub fn check(&self, name: &str) -> Option<&RegimeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_consistent(&self) -> bool {
        self.checks.iter().all(|c| c.consistent)
    }
}

/// Evaluates the five regime conditions as ratios that should be below one
/// (or, for the dominant view, of order one).
pub fn validate_assumptions(inp: &RegimeInputs) -> RegimeReport {
    let q = f64::from(inp.q);
    let noise_q = inp.sigma_xi.powf(q);
    let mut checks = Vec::new();
    let mut push = |condition: u8, name: String, ratio: f64, expect_order_one: bool| {
        let consistent = if expect_order_one { ratio > 0.0 && ratio <= 1.0 } else { ratio < 1.0 };
        let borderline = ratio.is_finite() && (ratio - 1.0).abs() <= 0.05;
        checks.push(RegimeCheck { condition, name, ratio, expect_order_one, consistent, borderline });
    };
    push(1, "dominant_view".into(), inp.rho.first().copied().unwrap_or(0.0), true);
    for (k, r) in inp.rho.iter().enumerate().skip(1) {
        push(1, format!("minor_view_{}", k + 1), inp.n * r / noise_q, false);
    }
    push(2, "noise_lower".into(), 1.0 / noise_q, false);
    push(2, "noise_upper".into(), noise_q / inp.n, false);
    push(3, "init_scale".into(), inp.sigma_0 * inp.sigma_xi, false);
    let sample_budget = inp.sigma_0.powf(q - 1.0) * inp.sigma_xi.powf(q - 1.0) * inp.d.sqrt();
    push(4, "sample_budget".into(), inp.n * inp.num_features / sample_budget, false);
    let horizon = (inp.n / (inp.eta * noise_q * inp.sigma_0.powf(q - 2.0)))
        .max(inp.num_features / (inp.eta * inp.sigma_0.powf(q - 2.0)));
    let alpha_cap = inp.patches.powf(-1.0 / q) * inp.sigma_xi * inp.d.powf(-0.5).min(inp.sigma_0) / (inp.eta * horizon);
    push(5, "alpha_lower".into(), 1.0 / (inp.patches * inp.alpha), false);
    push(5, "alpha_upper".into(), inp.alpha / alpha_cap, false);
    RegimeReport { checks }
}

#[derive(Serialize)]
struct Summary<'a> {
    schema: &'static str,
    runs: usize,
    passed: usize,
    records: &'a [RunRecord],
    plots: Vec<String>,
}

fn run_id(r: &RunRecord, idx: usize) -> String {
    match &r.sweep {
        Some(p) => format!("{:03}_{}_{}={}_s{}", idx, r.scenario.as_str(), p.axis.as_str(), p.value, r.seed),
        None => format!("{:03}_{}_s{}", idx, r.scenario.as_str(), r.seed),
    }
}

/// Writes the per-arm report files into `dir` and appends their paths.
pub fn write_arm(dir: &Path, arm: &ArmRecord, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let p = dir.join(name);
        f(&p)?;
        files.push(p);
        Ok(())
    };
    put("ginit_report.json", &|p| io::write_json(p, &arm.ginit))?;
    if let Some(t) = &arm.test {
        put("test_error.json", &|p| io::write_json(p, t))?;
    }
    if let Some(e) = &arm.envelope {
        put("envelope_report.json", &|p| io::write_json(p, e))?;
    }
    if let Some(det) = &arm.detail {
        put("trajectory.csv", &|p| io::write_trajectory_csv(p, &det.trajectory))?;
        put("fit_labels.csv", &|p| io::write_fit_labels_csv(p, &det.labels))?;
        put("model.bin", &|p| io::write_model(p, &det.model))?;
    }
    Ok(())
}

fn span(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Writes summary, per-run files and plot data; returns the hashed manifest,
/// which is also written to `manifest.json`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<io::ManifestEntry>> {
    fs::create_dir_all(out_dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let mut plots: Vec<(String, Vec<[f64; 4]>)> = Vec::new();

    for (idx, r) in records.iter().enumerate() {
        let run_dir = out_dir.join("runs").join(run_id(r, idx));
        for arm in &r.arms {
            write_arm(&run_dir.join(&arm.label), arm, &mut files)?;
        }
        if !r.arms.is_empty() || r.linear.is_some() {
            let p = run_dir.join("record.json");
            fs::create_dir_all(&run_dir)?;
            io::write_json(&p, r)?;
            files.push(p);
        }
    }

    // Per-view conditional error for each (scenario, arm) outside sweeps.
    let mut per_view: BTreeMap<(ScenarioName, String), Vec<&TestError>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.sweep.is_none()) {
        for a in &r.arms {
            if let Some(t) = &a.test {
                per_view.entry((r.scenario, a.label.clone())).or_default().push(t);
            }
        }
    }
    for ((scenario, arm), tests) in &per_view {
        let views = tests[0].per_view.len();
        let rows = (0..views)
            .map(|k| {
                let errs: Vec<f64> = tests.iter().map(|t| t.per_view[k].error).collect();
                let lo = tests.iter().map(|t| t.per_view[k].ci_low).fold(f64::INFINITY, f64::min);
                let hi = tests.iter().map(|t| t.per_view[k].ci_high).fold(f64::NEG_INFINITY, f64::max);
                [k as f64, stats::median(&errs), lo, hi]
            })
            .collect();
        plots.push((format!("per_view_error_{}_{}.csv", scenario.as_str(), arm), rows));
    }

    // Sweep curves: stop time of the primary arm, or view-2 accuracy for cutoffs.
    let mut sweeps: BTreeMap<(ScenarioName, &'static str), BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let Some(p) = r.sweep else { continue };
        let y = match &r.linear {
            Some(l) => l.mean_accuracy.get(1).copied(),
            None => r.primary_stop_time().map(|t| t as f64),
        };
        let g = sweeps.entry((r.scenario, p.axis.as_str())).or_default().entry(p.value.to_bits()).or_insert((p.value, Vec::new()));
        if let Some(y) = y {
            g.1.push(y);
        }
    }
    for ((scenario, axis), pts) in &sweeps {
        let mut rows: Vec<[f64; 4]> = pts
            .values()
            .filter(|(_, ys)| !ys.is_empty())
            .map(|(x, ys)| {
                let (lo, hi) = span(ys);
                [*x, stats::median(ys), lo, hi]
            })
            .collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        plots.push((format!("sweep_{}_{}.csv", scenario.as_str(), axis), rows));
    }

    let mut plot_names = Vec::new();
    if !plots.is_empty() {
        fs::create_dir_all(out_dir.join("plots"))?;
    }
    for (name, rows) in &plots {
        let p = out_dir.join("plots").join(name);
        io::write_plot_csv(&p, rows)?;
        plot_names.push(format!("plots/{name}"));
        files.push(p);
    }

    let summary = Summary {
        schema: "augdyn-report-v1",
        runs: records.len(),
        passed: records.iter().filter(|r| r.passed()).count(),
        records,
        plots: plot_names,
    };
    let sp = out_dir.join("summary.json");
    io::write_json(&sp, &summary)?;
    files.push(sp);

    let manifest = io::build_manifest(out_dir, &files)?;
    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
