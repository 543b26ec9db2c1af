//! Feature-cycling coordinate permutations and the augmented dataset built
//! from all nontrivial cyclic shifts of the feature indices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{AugmentationInfo, Dataset, DistParams, Sample};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::rng::{self, Domain};
use crate::stats;

/// A fixed-point-free permutation of `[d]` that sends `v_k` to
/// `v_{(k + shift) mod K}` (0-based).
///
/// `pi[i]` is the image of coordinate `i`: `T(z)[pi[i]] = z[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePermutation {
    pub pi: Vec<usize>,
    pub shift: usize,
    pub num_features: usize,
    pub d: usize,
}

/// Standard-basis construction: the feature block `0..K` and the tail
/// `K..d` are rotated independently.
pub fn build_permutation(shift: usize, d: usize, num_features: usize) -> Result<FeaturePermutation> {
    if num_features > d {
        return Err(Error::InvalidArgument(format!("K = {num_features} exceeds d = {d}")));
    }
    if shift == 0 || shift >= num_features {
        return Err(Error::InvalidArgument(format!("shift {shift} outside [1, {}]", num_features.saturating_sub(1))));
    }
    let tail = d - num_features;
    if tail < 2 {
        // a single tail coordinate (or none) cannot move
        return Err(Error::InvalidArgument(format!(
            "d - K = {tail} leaves no fixed-point-free permutation of the non-feature coordinates"
        )));
    }
    let s = match shift % tail {
        0 => 1,
        s => s,
    };
    let mut pi = Vec::with_capacity(d);
    pi.extend((0..num_features).map(|i| (i + shift) % num_features));
    pi.extend((0..tail).map(|j| num_features + (j + s) % tail));
    let perm = FeaturePermutation { pi, shift, num_features, d };
    perm.validate()?;
    Ok(perm)
}

impl FeaturePermutation {
    /// Checks bijectivity, absence of fixed points and feature cycling
    /// (standard basis).
    pub fn validate(&self) -> Result<()> {
        if self.pi.len() != self.d {
            return Err(Error::InvalidPermutation(format!("length {} != d = {}", self.pi.len(), self.d)));
        }
        let mut seen = vec![false; self.d];
        for (i, &j) in self.pi.iter().enumerate() {
            if j >= self.d || seen[j] {
                return Err(Error::InvalidPermutation("not a bijection".into()));
            }
            seen[j] = true;
            if i == j {
                return Err(Error::InvalidPermutation(format!("fixed point at {i}")));
            }
        }
        let k = self.num_features;
        if k > 0 && (0..k).any(|i| self.pi[i] != (i + self.shift) % k) {
            return Err(Error::InvalidPermutation("does not cycle the features".into()));
        }
        Ok(())
    }

    /// `T(z)`
    pub fn permute(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        for (i, &j) in self.pi.iter().enumerate() {
            out[j] = z[i];
        }
        out
    }

    #[inline]
    pub fn map_feature(&self, k: usize) -> usize {
        (k + self.shift) % self.num_features
    }
}

/// Applies `T` to every patch of a sample.
///
/// Only the standard feature basis is supported, since the permutation is
/// defined coordinate-wise. A spurious direction, if the sample carries one,
/// is a dataset-level vector and stays attached to its slot unpermuted.
pub fn apply(perm: &FeaturePermutation, sample: &Sample) -> Result<Sample> {
    if sample.dim() != perm.d {
        return Err(Error::DimensionMismatch { expected: perm.d, got: sample.dim() });
    }
    let mut out = sample.clone();
    out.k_star = perm.map_feature(sample.k_star);
    out.xi = perm.permute(&sample.xi);
    for b in &mut out.background {
        b.k = perm.map_feature(b.k);
        if let Some(z) = &b.zeta {
            b.zeta = Some(perm.permute(z));
        }
    }
    Ok(out)
}

/// `D ∪ T_1(D) ∪ … ∪ T_{K-1}(D)` in source-major, shift-minor order.
pub fn augment_dataset(dataset: &Dataset) -> Result<Dataset> {
    let params = &dataset.params;
    if !matches!(params.feature_basis, crate::distribution::FeatureBasis::Standard) {
        return Err(Error::InvalidArgument("augmentation requires the standard feature basis".into()));
    }
    let k = params.num_features;
    let perms = (1..k).map(|s| build_permutation(s, params.d, k)).collect::<Result<Vec<_>>>()?;
    let pairing: Vec<(usize, usize)> =
        (0..dataset.len()).flat_map(|i| (0..k).map(move |s| (i, s))).collect();
    let samples = pairing
        .par_iter()
        .map(|&(i, s)| {
            let src = &dataset.samples[i];
            if s == 0 {
                Ok(src.clone())
            } else {
                apply(&perms[s - 1], src)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        params: params.clone(),
        seed: dataset.seed,
        mode: dataset.mode,
        augmented_from: Some(AugmentationInfo {
            source_seed: dataset.seed,
            shifts_applied: (1..k).collect(),
            pairing,
        }),
    })
}

/// Confidence-bound shape used to judge `|<xi, T xi>|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBound {
    pub c: f64,
    pub delta: f64,
    /// Quantile of the empirical distribution compared against the bound.
    pub level: f64,
}

impl Default for CorrelationBound {
    fn default() -> Self {
        CorrelationBound { c: 3.0, delta: 1.0 / 200.0, level: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub trials: usize,
    pub mean: f64,
    pub max: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub at_level: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Monte Carlo statistics of `|<xi, T_shift(xi)>|` for `xi ~ N(0, sigma_xi^2/d I)`.
pub fn permuted_noise_correlation(
    params: &DistParams,
    shift: usize,
    trials: usize,
    seed: u64,
    bound: CorrelationBound,
) -> Result<CorrelationStats> {
    let perm = build_permutation(shift, params.d, params.num_features)?;
    permutation_noise_correlation(&perm, params.sigma_xi, trials, seed, bound)
}

/// As [`permuted_noise_correlation`] for an explicit permutation; permutations
/// with fixed points are rejected.
pub fn permutation_noise_correlation(
    perm: &FeaturePermutation,
    sigma_xi: f64,
    trials: usize,
    seed: u64,
    bound: CorrelationBound,
) -> Result<CorrelationStats> {
    perm.validate()?;
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("{trials} trials; need at least 100")));
    }
    let d = perm.d;
    let scale = sigma_xi / (d as f64).sqrt();
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, Domain::Misc, t as u64);
            let xi = rng::normal_vec(&mut r, d, scale);
            dot(&xi, &perm.permute(&xi)).abs()
        })
        .collect();
    let at_level = stats::quantile(&values, bound.level);
    let limit = bound.c * sigma_xi * sigma_xi * ((1.0 / bound.delta).ln() / d as f64).sqrt();
    Ok(CorrelationStats {
        trials,
        mean: stats::mean(&values),
        max: values.iter().cloned().fold(0.0, f64::max),
        q50: stats::quantile(&values, 0.5),
        q90: stats::quantile(&values, 0.9),
        q99: stats::quantile(&values, 0.99),
        at_level,
        bound: limit,
        pass: at_level <= limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{generate_dataset, materialize, DistParams, SamplingMode};

    #[test]
    fn three_cycle_on_features() {
        let p = build_permutation(1, 8, 3).unwrap();
        let mut v0 = vec![0.0; 8];
        v0[0] = 1.0;
        let v1 = p.permute(&v0);
        assert_eq!(v1[1], 1.0);
        let v2 = p.permute(&v1);
        assert_eq!(v2[2], 1.0);
        assert_eq!(p.permute(&v2), v0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_permutation(0, 8, 3).is_err());
        assert!(build_permutation(3, 8, 3).is_err());
        assert!(build_permutation(1, 3, 3).is_err());
        assert!(build_permutation(1, 4, 3).is_err());
        assert!(build_permutation(1, 5, 3).is_ok());
    }

    #[test]
    fn identity_is_rejected() {
        let id = FeaturePermutation { pi: (0..16).collect(), shift: 0, num_features: 1, d: 16 };
        assert!(permutation_noise_correlation(&id, 1.0, 200, 0, CorrelationBound::default()).is_err());
    }

    #[test]
    fn single_feature_augmentation_is_identity() {
        let p = DistParams::two_patch(8, vec![1.0], 1.0);
        let ds = generate_dataset(&p, 5, SamplingMode::Iid, 3).unwrap();
        let aug = augment_dataset(&ds).unwrap();
        assert_eq!(aug.samples, ds.samples);
    }

    #[test]
    fn apply_commutes_with_materialize() {
        let mut p = DistParams::two_patch(11, vec![0.5, 0.3, 0.2], 1.0);
        p.num_patches = 4;
        p.alpha = 0.3;
        p.sigma_zeta = 0.1;
        let ds = generate_dataset(&p, 4, SamplingMode::Iid, 8).unwrap();
        let perm = build_permutation(2, 11, 3).unwrap();
        for s in &ds.samples {
            let lhs = materialize(&apply(&perm, s).unwrap(), &p);
            let rhs: Vec<Vec<f64>> = materialize(s, &p).iter().map(|r| perm.permute(r)).collect();
            assert_eq!(lhs, rhs);
        }
    }
}
