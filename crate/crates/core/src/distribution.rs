//! The multi-view data distribution: samples carry one feature patch
//! `y * v_k`, one dominant Gaussian noise patch, and background patches
//! holding feature noise `-alpha_p * y * v_{k_p}` plus optional Gaussian
//! background noise.
//!
//! Samples are stored sparsely (metadata plus the dense noise vectors) so
//! that large `d` and `P` stay cheap; [`materialize`] produces the dense
//! `P x d` patch matrix on demand.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::rng::{self, Domain};

const ORTHO_TOL: f64 = 1e-10;

/// Rule assigning the feature-noise coefficient `alpha_p` of each background patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Every background patch gets `alpha_p = alpha`.
    #[default]
    Constant,
    /// `alpha_p ~ U[0, alpha]` independently per patch.
    Uniform,
    /// Per sample, all background patches get `alpha` with probability
    /// `prob_high` and `low` otherwise.
    TwoLevel { low: f64, prob_high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureBasis {
    /// `v_k = e_k`.
    #[default]
    Standard,
    Custom { vectors: Vec<Vec<f64>> },
}

impl FeatureBasis {
    pub fn vector(&self, k: usize, d: usize) -> Vec<f64> {
        match self {
            FeatureBasis::Standard => {
                let mut v = vec![0.0; d];
                v[k] = 1.0;
                v
            }
            FeatureBasis::Custom { vectors } => vectors[k].clone(),
        }
    }

    /// `<w, v_k>`
    #[inline]
    pub fn project(&self, w: &[f64], k: usize) -> f64 {
        match self {
            FeatureBasis::Standard => w[k],
            FeatureBasis::Custom { vectors } => dot(w, &vectors[k]),
        }
    }

    /// `w += a * v_k`
    #[inline]
    pub fn add_scaled(&self, a: f64, k: usize, w: &mut [f64]) {
        match self {
            FeatureBasis::Standard => w[k] += a,
            FeatureBasis::Custom { vectors } => axpy(a, &vectors[k], w),
        }
    }
}

/// Where the feature patch and the dominant-noise patch sit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    Fixed { p_star: usize, p_xi: usize },
    /// Feature patch uniform over `[P]`, noise patch uniform over the rest.
    UniformMain,
}

impl Default for Placement {
    fn default() -> Self {
        Placement::Fixed { p_star: 0, p_xi: 1 }
    }
}

/// A class-imbalanced spurious direction `u` added to one background slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousConfig {
    pub u: Vec<f64>,
    /// Fraction of `y = +1` samples carrying `u`.
    pub rho_u_pos: f64,
    /// Fraction of `y = -1` samples carrying `u`.
    pub rho_u_neg: f64,
    /// Index into the sample's background patches (0 = first background patch).
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistParams {
    pub d: usize,
    #[serde(rename = "P")]
    pub num_patches: usize,
    #[serde(rename = "K")]
    pub num_features: usize,
    pub rho: Vec<f64>,
    pub sigma_xi: f64,
    #[serde(default)]
    pub sigma_zeta: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub alpha_policy: AlphaPolicy,
    #[serde(default)]
    pub feature_basis: FeatureBasis,
    #[serde(default)]
    pub spurious: Option<SpuriousConfig>,
    #[serde(default)]
    pub placement: Placement,
}

impl DistParams {
    /// `P = 2`, `alpha = 0`, `sigma_zeta = 0`, standard basis.
    pub fn two_patch(d: usize, rho: Vec<f64>, sigma_xi: f64) -> Self {
        DistParams {
            d,
            num_patches: 2,
            num_features: rho.len(),
            rho,
            sigma_xi,
            sigma_zeta: 0.0,
            alpha: 0.0,
            alpha_policy: AlphaPolicy::Constant,
            feature_basis: FeatureBasis::Standard,
            spurious: None,
            placement: Placement::default(),
        }
    }

    pub fn feature_vector(&self, k: usize) -> Vec<f64> {
        self.feature_basis.vector(k, self.d)
    }

    pub fn check(&self) -> Result<()> {
        let report = validate_params(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidParams(report.violations.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

/// Lists every violated parameter invariant; empty iff the parameters are usable.
pub fn validate_params(p: &DistParams) -> ValidationReport {
    let mut v = Vec::new();
    if p.d == 0 {
        v.push("d must be positive".to_string());
    }
    if p.num_patches < 2 {
        v.push(format!("P = {} leaves no room for feature and noise patches", p.num_patches));
    }
    if p.num_features == 0 {
        v.push("K must be at least 1".to_string());
    }
    if p.num_features > p.d {
        v.push(format!("K exceeds d ({} > {})", p.num_features, p.d));
    }
    if p.rho.len() != p.num_features {
        v.push(format!("rho has length {} but K = {}", p.rho.len(), p.num_features));
    }
    if p.rho.iter().any(|&r| !(r >= 0.0)) {
        v.push("rho has negative or non-finite entries".to_string());
    }
    let total: f64 = p.rho.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        v.push(format!("rho sums to {total}, not 1"));
    }
    if p.rho.windows(2).any(|w| w[0] < w[1]) {
        v.push("rho not sorted non-increasing".to_string());
    }
    if !(p.sigma_xi >= 0.0) || !(p.sigma_zeta >= 0.0) {
        v.push("noise scales must be non-negative".to_string());
    }
    if !(p.alpha >= 0.0) {
        v.push("alpha must be non-negative".to_string());
    }
    if let AlphaPolicy::TwoLevel { low, prob_high } = p.alpha_policy {
        if !(0.0..=p.alpha).contains(&low) {
            v.push(format!("two-level low value {low} outside [0, alpha]"));
        }
        if !(0.0..=1.0).contains(&prob_high) {
            v.push(format!("two-level probability {prob_high} outside [0, 1]"));
        }
    }
    if let Placement::Fixed { p_star, p_xi } = p.placement {
        if p_star == p_xi {
            v.push("feature patch and noise patch coincide".to_string());
        }
        if p_star >= p.num_patches || p_xi >= p.num_patches {
            v.push("placement index out of range".to_string());
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if let FeatureBasis::Custom { vectors } = &p.feature_basis {
        if vectors.len() != p.num_features {
            v.push(format!("feature basis has {} vectors but K = {}", vectors.len(), p.num_features));
        }
        if vectors.iter().any(|x| x.len() != p.d) {
            v.push("feature basis vector has wrong dimension".to_string());
        } else {
            for (a, va) in vectors.iter().enumerate() {
                for (b, vb) in vectors.iter().enumerate().skip(a) {
                    let target = if a == b { 1.0 } else { 0.0 };
                    if (dot(va, vb) - target).abs() > ORTHO_TOL {
                        v.push(format!("feature basis not orthonormal at ({a}, {b})"));
                    }
                }
            }
            basis = vectors.clone();
        }
    } else if p.num_features <= p.d {
        basis = (0..p.num_features).map(|k| p.feature_vector(k)).collect();
    }
    if let Some(s) = &p.spurious {
        if s.u.len() != p.d {
            v.push("spurious vector has wrong dimension".to_string());
        } else {
            if (norm(&s.u) - 1.0).abs() > ORTHO_TOL {
                v.push("spurious vector is not unit norm".to_string());
            }
            if basis.iter().any(|b| dot(b, &s.u).abs() > ORTHO_TOL) {
                v.push("spurious vector not orthogonal to the features".to_string());
            }
        }
        if !(0.0 <= s.rho_u_neg && s.rho_u_neg < s.rho_u_pos && s.rho_u_pos <= 1.0) {
            v.push("spurious frequencies must satisfy 0 <= rho_u_neg < rho_u_pos <= 1".to_string());
        }
        if s.slot + 2 >= p.num_patches {
            v.push("spurious slot needs a background patch".to_string());
        }
    }
    ValidationReport { violations: v }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPatch {
    pub patch: usize,
    pub alpha: f64,
    pub k: usize,
    pub zeta: Option<Vec<f64>>,
}

/// One labelled input in sparse form. Feature indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: i8,
    pub k_star: usize,
    pub p_star: usize,
    pub p_xi: usize,
    pub xi: Vec<f64>,
    pub background: Vec<BackgroundPatch>,
    pub has_spurious: bool,
}

impl Sample {
    #[inline]
    pub fn label(&self) -> f64 {
        f64::from(self.y)
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn num_patches(&self) -> usize {
        self.background.len() + 2
    }

    /// Sum of feature-noise coefficients over background patches.
    pub fn feature_noise_mass(&self) -> f64 {
        self.background.iter().map(|b| b.alpha).sum()
    }
}

/// Values fixed in advance instead of drawn.
#[derive(Debug, Clone, Copy, Default)]
pub struct Forced {
    pub label: Option<i8>,
    pub view: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Iid,
    /// Main-feature counts equal `round(n * rho_k)` via largest remainders.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationInfo {
    pub source_seed: u64,
    pub shifts_applied: Vec<usize>,
    /// `(source index, shift)` for every output sample; shift 0 is the original.
    pub pairing: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub params: DistParams,
    pub seed: u64,
    pub mode: SamplingMode,
    pub augmented_from: Option<AugmentationInfo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Empirical main-feature frequencies.
    pub fn view_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.params.num_features];
        for s in &self.samples {
            counts[s.k_star] += 1;
        }
        let n = self.samples.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

fn draw_view<R: Rng + ?Sized>(rho: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &r) in rho.iter().enumerate() {
        acc += r;
        if u < acc {
            return k;
        }
    }
    // rounding slack: last feature with positive mass
    rho.iter().rposition(|&r| r > 0.0).unwrap_or(0)
}

/// Draw one sample.
pub fn sample_point<R: Rng + ?Sized>(params: &DistParams, forced: Forced, rng: &mut R) -> Result<Sample> {
    let big_p = params.num_patches;
    if big_p < 2 {
        return Err(Error::InvalidParams(format!("P = {big_p} < 2")));
    }
    let d = params.d;
    let y: i8 = match forced.label {
        Some(l) if l == 1 || l == -1 => l,
        Some(l) => return Err(Error::InvalidArgument(format!("label {l} not in {{-1, +1}}"))),
        None => {
            if rng.random_bool(0.5) {
                1
            } else {
                -1
            }
        }
    };
    let k_star = match forced.view {
        Some(k) if k < params.num_features => k,
        Some(k) => return Err(Error::InvalidArgument(format!("view {k} out of range"))),
        None => draw_view(&params.rho, rng),
    };
    let (p_star, p_xi) = match params.placement {
        Placement::Fixed { p_star, p_xi } => (p_star, p_xi),
        Placement::UniformMain => {
            let ps = rng.random_range(0..big_p);
            let mut px = rng.random_range(0..big_p - 1);
            if px >= ps {
                px += 1;
            }
            (ps, px)
        }
    };
    let xi = if params.sigma_xi > 0.0 {
        rng::normal_vec(rng, d, params.sigma_xi / (d as f64).sqrt())
    } else {
        vec![0.0; d]
    };
    let level = match params.alpha_policy {
        AlphaPolicy::TwoLevel { low, prob_high } => {
            if rng.random_bool(prob_high) {
                params.alpha
            } else {
                low
            }
        }
        _ => params.alpha,
    };
    let mut background = Vec::with_capacity(big_p - 2);
    for patch in (0..big_p).filter(|&p| p != p_star && p != p_xi) {
        let alpha = match params.alpha_policy {
            AlphaPolicy::Constant | AlphaPolicy::TwoLevel { .. } => level,
            AlphaPolicy::Uniform => params.alpha * rng.random::<f64>(),
        };
        let k = draw_view(&params.rho, rng);
        let zeta = (params.sigma_zeta > 0.0).then(|| rng::normal_vec(rng, d, params.sigma_zeta));
        background.push(BackgroundPatch { patch, alpha, k, zeta });
    }
    let has_spurious = match &params.spurious {
        Some(s) => rng.random_bool(if y > 0 { s.rho_u_pos } else { s.rho_u_neg }),
        None => false,
    };
    Ok(Sample { y, k_star, p_star, p_xi, xi, background, has_spurious })
}

/// Largest-remainder apportionment of `n` over `rho`; ties go to the lower index.
pub fn stratified_counts(rho: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = rho.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Draw `n` samples. Sample `i` uses its own stream split from `seed`, so the
/// result is independent of evaluation order.
pub fn generate_dataset(params: &DistParams, n: usize, mode: SamplingMode, seed: u64) -> Result<Dataset> {
    params.check()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let views: Vec<Option<usize>> = match mode {
        SamplingMode::Iid => vec![None; n],
        SamplingMode::Stratified => {
            let counts = stratified_counts(&params.rho, n);
            let mut v: Vec<Option<usize>> = counts
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| std::iter::repeat_n(Some(k), c))
                .collect();
            v.shuffle(&mut rng::stream(seed, Domain::Assignment, 0));
            v
        }
    };
    let samples = views
        .par_iter()
        .enumerate()
        .map(|(i, &view)| {
            let mut r = rng::stream(seed, Domain::Sample, i as u64);
            sample_point(params, Forced { label: None, view }, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, params: params.clone(), seed, mode, augmented_from: None })
}

/// Dense `P x d` patch matrix of a sample.
pub fn materialize(sample: &Sample, params: &DistParams) -> Vec<Vec<f64>> {
    let d = sample.dim();
    let mut rows = vec![vec![0.0; d]; sample.num_patches()];
    params.feature_basis.add_scaled(sample.label(), sample.k_star, &mut rows[sample.p_star]);
    rows[sample.p_xi].copy_from_slice(&sample.xi);
    for b in &sample.background {
        let row = &mut rows[b.patch];
        params.feature_basis.add_scaled(-b.alpha * sample.label(), b.k, row);
        if let Some(z) = &b.zeta {
            axpy(1.0, z, row);
        }
    }
    if sample.has_spurious {
        if let Some(s) = &params.spurious {
            axpy(1.0, &s.u, &mut rows[sample.background[s.slot].patch]);
        }
    }
    rows
}

/// Role of a patch in the sparse encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Feature,
    Noise,
    Background,
}

/// Per-patch layout needed to recover the sparse form from dense rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMeta {
    pub kind: PatchKind,
    /// Feature index for feature and background patches.
    pub k: usize,
    /// Feature-noise coefficient of a background patch.
    pub alpha: f64,
    /// Whether the patch carries the spurious direction.
    pub spurious: bool,
}

impl Sample {
    pub fn layout(&self, params: &DistParams) -> Vec<PatchMeta> {
        let blank = PatchMeta { kind: PatchKind::Background, k: 0, alpha: 0.0, spurious: false };
        let mut out = vec![blank; self.num_patches()];
        out[self.p_star] = PatchMeta { kind: PatchKind::Feature, k: self.k_star, ..blank };
        out[self.p_xi] = PatchMeta { kind: PatchKind::Noise, ..blank };
        let slot = params.spurious.as_ref().map(|s| s.slot).filter(|_| self.has_spurious);
        for (j, b) in self.background.iter().enumerate() {
            out[b.patch] = PatchMeta { kind: PatchKind::Background, k: b.k, alpha: b.alpha, spurious: slot == Some(j) };
        }
        out
    }
}

/// Inverse of [`materialize`] given the label and the patch layout.
pub fn encode(rows: &[Vec<f64>], y: i8, layout: &[PatchMeta], params: &DistParams) -> Result<Sample> {
    if rows.len() != layout.len() {
        return Err(Error::DimensionMismatch { expected: layout.len(), got: rows.len() });
    }
    let label = f64::from(y);
    let find = |kind| layout.iter().position(|m| m.kind == kind);
    let p_star = find(PatchKind::Feature).ok_or_else(|| Error::Malformed("no feature patch".into()))?;
    let p_xi = find(PatchKind::Noise).ok_or_else(|| Error::Malformed("no noise patch".into()))?;
    let k_star = layout[p_star].k;
    let mut expect = vec![0.0; params.d];
    params.feature_basis.add_scaled(label, k_star, &mut expect);
    if rows[p_star] != expect {
        return Err(Error::Malformed("feature patch is not y * v_k".into()));
    }
    let mut has_spurious = false;
    let mut background = Vec::new();
    for (patch, meta) in layout.iter().enumerate().filter(|(_, m)| m.kind == PatchKind::Background) {
        let mut residual = rows[patch].clone();
        if meta.spurious {
            let s = params.spurious.as_ref().ok_or_else(|| Error::Malformed("spurious patch without a spurious direction".into()))?;
            if s.slot != background.len() {
                return Err(Error::Malformed("spurious direction in the wrong slot".into()));
            }
            axpy(-1.0, &s.u, &mut residual);
            has_spurious = true;
        }
        params.feature_basis.add_scaled(meta.alpha * label, meta.k, &mut residual);
        let zeta = (params.sigma_zeta > 0.0).then_some(residual);
        background.push(BackgroundPatch { patch, alpha: meta.alpha, k: meta.k, zeta });
    }
    Ok(Sample { y, k_star, p_star, p_xi, xi: rows[p_xi].clone(), background, has_spurious })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n: usize,
    pub n_k: Vec<usize>,
    pub rho_hat: Vec<f64>,
    /// Fraction of background patches carrying feature noise along each `v_k`;
    /// absent when there are no background patches.
    pub rho_noise: Option<Vec<f64>>,
    pub spurious_pos: usize,
    pub spurious_neg: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let kk = ds.params.num_features;
    let mut n_k = vec![0usize; kk];
    let mut noise_k = vec![0usize; kk];
    let mut bg_total = 0usize;
    let (mut sp, mut sn, mut np, mut nn) = (0, 0, 0, 0);
    for s in &ds.samples {
        n_k[s.k_star] += 1;
        for b in &s.background {
            noise_k[b.k] += 1;
            bg_total += 1;
        }
        if s.y > 0 {
            np += 1;
            sp += usize::from(s.has_spurious);
        } else {
            nn += 1;
            sn += usize::from(s.has_spurious);
        }
    }
    let n = ds.samples.len();
    let rho_hat = n_k.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
    let rho_noise = (bg_total > 0).then(|| noise_k.iter().map(|&c| c as f64 / bg_total as f64).collect());
    DatasetStats { n, n_k, rho_hat, rho_noise, spurious_pos: sp, spurious_neg: sn, n_pos: np, n_neg: nn }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(rho: Vec<f64>) -> DistParams {
        DistParams::two_patch(16, rho, 1.0)
    }

    #[test]
    fn symmetric_rho_is_valid() {
        assert!(validate_params(&base(vec![0.5, 0.5])).is_valid());
    }

    #[test]
    fn unsorted_rho_is_reported() {
        let r = validate_params(&base(vec![0.3, 0.7]));
        assert!(r.mentions("rho not sorted non-increasing"), "{r:?}");
    }

    #[test]
    fn too_many_features_is_reported() {
        let mut p = base(vec![1.0 / 17.0; 17]);
        p.num_features = 17;
        assert!(validate_params(&p).mentions("K exceeds d"));
    }

    #[test]
    fn non_orthonormal_basis_and_bad_spurious_are_reported() {
        let mut p = base(vec![0.5, 0.5]);
        let mut v0 = vec![0.0; 16];
        v0[0] = 1.0;
        let mut v1 = vec![0.0; 16];
        v1[0] = 0.1;
        v1[1] = 1.0;
        p.feature_basis = FeatureBasis::Custom { vectors: vec![v0, v1] };
        p.num_patches = 3;
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        p.spurious = Some(SpuriousConfig { u, rho_u_pos: 0.2, rho_u_neg: 0.5, slot: 0 });
        let r = validate_params(&p);
        assert!(r.mentions("orthonormal"));
        assert!(r.mentions("orthogonal"));
        assert!(r.mentions("rho_u_neg < rho_u_pos"));
    }

    #[test]
    fn single_patch_is_rejected() {
        let mut p = base(vec![1.0]);
        p.num_patches = 1;
        let mut r = rng::stream(0, Domain::Misc, 0);
        assert!(sample_point(&p, Forced::default(), &mut r).is_err());
    }

    #[test]
    fn degenerate_background_sample() {
        let p = DistParams { alpha: 0.0, ..base(vec![0.5, 0.5]) };
        let mut r = rng::stream(1, Domain::Misc, 0);
        let s = sample_point(&p, Forced::default(), &mut r).unwrap();
        assert!(s.background.is_empty());
        assert_ne!(s.p_star, s.p_xi);
        assert_eq!(s.xi.len(), 16);
    }

    #[test]
    fn forced_sample_has_exact_feature_patch() {
        let p = base(vec![0.5, 0.25, 0.25]);
        let mut r = rng::stream(3, Domain::Misc, 0);
        let s = sample_point(&p, Forced { label: Some(-1), view: Some(1) }, &mut r).unwrap();
        let rows = materialize(&s, &p);
        let mut want = vec![0.0; 16];
        want[1] = -1.0;
        assert_eq!(rows[s.p_star], want);
        assert_eq!(rows[s.p_xi], s.xi);
    }

    #[test]
    fn stratified_counts_are_exact() {
        assert_eq!(stratified_counts(&[0.5, 0.5], 10), vec![5, 5]);
        assert_eq!(stratified_counts(&[0.875, 1.0 / 24.0, 1.0 / 24.0, 1.0 / 24.0], 24), vec![21, 1, 1, 1]);
        // ties broken toward the lower index
        assert_eq!(stratified_counts(&[1.0 / 3.0; 3], 4), vec![2, 1, 1]);
        let ds = generate_dataset(&base(vec![0.5, 0.5]), 10, SamplingMode::Stratified, 9).unwrap();
        assert_eq!(dataset_stats(&ds).n_k, vec![5, 5]);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = base(vec![0.7, 0.3]);
        let a = generate_dataset(&p, 12, SamplingMode::Iid, 42).unwrap();
        let b = generate_dataset(&p, 12, SamplingMode::Iid, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&p, 12, SamplingMode::Iid, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_background_rows_when_alpha_and_zeta_vanish() {
        let mut p = base(vec![0.5, 0.5]);
        p.num_patches = 5;
        let ds = generate_dataset(&p, 4, SamplingMode::Iid, 1).unwrap();
        for s in &ds.samples {
            let rows = materialize(s, &p);
            for b in &s.background {
                assert!(rows[b.patch].iter().all(|&x| x == 0.0));
            }
            assert_eq!(rows[s.p_star][s.k_star] * s.label(), 1.0);
        }
    }

    #[test]
    fn empty_background_has_no_noise_frequency() {
        let ds = generate_dataset(&base(vec![0.5, 0.5]), 10, SamplingMode::Stratified, 2).unwrap();
        assert!(dataset_stats(&ds).rho_noise.is_none());
    }

    #[test]
    fn encode_inverts_materialize_with_feature_noise_and_spurious() {
        let mut p = base(vec![0.5, 0.3, 0.2]);
        p.num_patches = 5;
        p.alpha = 0.2;
        p.alpha_policy = AlphaPolicy::Uniform;
        p.sigma_zeta = 0.05;
        let mut u = vec![0.0; 16];
        u[10] = 1.0;
        p.spurious = Some(SpuriousConfig { u, rho_u_pos: 1.0, rho_u_neg: 0.5, slot: 1 });
        p.placement = Placement::UniformMain;
        let ds = generate_dataset(&p, 6, SamplingMode::Iid, 5).unwrap();
        for s in &ds.samples {
            let rows = materialize(s, &p);
            let back = encode(&rows, s.y, &s.layout(&p), &p).unwrap();
            assert_eq!(back.k_star, s.k_star);
            assert_eq!((back.p_star, back.p_xi), (s.p_star, s.p_xi));
            assert_eq!(back.has_spurious, s.has_spurious);
            assert_eq!(back.xi, s.xi);
            for (a, b) in back.background.iter().zip(&s.background) {
                assert_eq!((a.patch, a.k), (b.patch, b.k));
                assert_eq!(a.alpha, b.alpha);
                let (za, zb) = (a.zeta.as_ref().unwrap(), b.zeta.as_ref().unwrap());
                assert!(za.iter().zip(zb).all(|(x, y)| (x - y).abs() < 1e-12));
            }
            assert_eq!(materialize(&back, &p).len(), rows.len());
        }
    }
}
