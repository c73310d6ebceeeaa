//! Plausibility masking and the distribution fusion rules.
//!
//! Every rule combines distributions in probability space, clamps negative
//! weights to zero, restricts to the plausible set computed from the
//! original-image distribution, and renormalizes.

use serde::Serialize;

use crate::dist::{combine_unmasked, linear_combine, DistError, TokenDistribution, TokenId};

/// Tokens admitted by the adaptive plausibility constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct PlausibleSet {
    allowed: Vec<bool>,
}

impl PlausibleSet {
    pub fn all(vocab_size: usize) -> Self {
        Self {
            allowed: vec![true; vocab_size],
        }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.allowed.get(id.index()).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.allowed.len()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Admits `id` regardless of its probability.
    pub fn force(mut self, id: TokenId) -> Self {
        if let Some(a) = self.allowed.get_mut(id.index()) {
            *a = true;
        }
        self
    }

    pub fn is_subset_of(&self, other: &PlausibleSet) -> bool {
        self.allowed.len() == other.allowed.len()
            && self.allowed.iter().zip(&other.allowed).all(|(a, b)| !a || *b)
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| TokenId(i as u32))
    }
}

/// `{ i : p(i) ≥ β · max p }` over the unmasked entries of `base`.
pub fn plausibility_mask(base: &TokenDistribution, beta: f64) -> PlausibleSet {
    let probs = base.probs();
    let max = probs.iter().copied().fold(0.0, f64::max);
    let threshold = beta * max;
    let allowed = base
        .log_weights()
        .iter()
        .zip(&probs)
        .map(|(lw, p)| *lw != f64::NEG_INFINITY && *p >= threshold)
        .collect();
    PlausibleSet { allowed }
}

/// `p` restricted to `mask` and renormalized.
pub fn apply_mask(p: &TokenDistribution, mask: &PlausibleSet) -> Result<TokenDistribution, DistError> {
    linear_combine(&[(1.0, p)])?
        .restrict(mask.as_slice())?
        .into_distribution()
}

/// `normalize(p_orig + α · p_trans)` under `mask`.
pub fn fuse_ritual(
    p_orig: &TokenDistribution,
    p_trans: &TokenDistribution,
    alpha: f64,
    mask: &PlausibleSet,
) -> Result<TokenDistribution, DistError> {
    linear_combine(&[(1.0, p_orig), (alpha, p_trans)])?
        .restrict(mask.as_slice())?
        .into_distribution()
}

/// `normalize(max(γ · p_orig − δ · p_distorted, 0))` under `mask`.
pub fn fuse_vcd(
    p_orig: &TokenDistribution,
    p_distorted: &TokenDistribution,
    gamma: f64,
    delta: f64,
    mask: &PlausibleSet,
) -> Result<TokenDistribution, DistError> {
    linear_combine(&[(gamma, p_orig), (-delta, p_distorted)])?
        .clamp_negative()
        .restrict(mask.as_slice())?
        .into_distribution()
}

/// `(1 − e^{−λt}) / e^{−λt}`, i.e. `e^{λt} − 1`.
pub fn m3id_weight(lambda: f64, t: usize) -> f64 {
    (lambda * t as f64).exp_m1()
}

/// `normalize(max(p_cond + w(t) · (p_cond − p_uncond), 0))` under `mask`,
/// with `t = 1` for the first generated token.
pub fn fuse_m3id(
    p_cond: &TokenDistribution,
    p_uncond: &TokenDistribution,
    lambda: f64,
    t: usize,
    mask: &PlausibleSet,
) -> Result<TokenDistribution, DistError> {
    let w = m3id_weight(lambda, t);
    linear_combine(&[(1.0 + w, p_cond), (-w, p_uncond)])?
        .clamp_negative()
        .restrict(mask.as_slice())?
        .into_distribution()
}

/// `normalize(ζ · p_trans + d_fused)` under `mask`, where `d_fused` is the
/// output of a contrastive rule. Tokens the contrastive rule clamped to zero
/// stay eligible: only `mask` excludes.
pub fn fuse_combined(
    p_trans: &TokenDistribution,
    d_fused: &TokenDistribution,
    zeta: f64,
    mask: &PlausibleSet,
) -> Result<TokenDistribution, DistError> {
    combine_unmasked(&[(1.0, d_fused), (zeta, p_trans)])?
        .restrict(mask.as_slice())?
        .into_distribution()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::from_probs(p).unwrap().normalize().unwrap()
    }

    fn close(d: &TokenDistribution, expected: &[f64]) {
        for (a, b) in d.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {expected:?}", d.probs());
        }
    }

    #[test]
    fn mask_threshold() {
        let m = plausibility_mask(&dist(&[0.6, 0.3, 0.05, 0.05]), 0.1);
        assert_eq!(m.as_slice(), &[true, true, false, false]);
        let m = plausibility_mask(&dist(&[0.6, 0.3, 0.05, 0.05]), 0.0);
        assert_eq!(m.len(), 4);
        let m = plausibility_mask(&dist(&[0.4, 0.4, 0.2]), 1.0);
        assert_eq!(m.as_slice(), &[true, true, false]);
    }

    #[test]
    fn masked_entries_never_plausible() {
        let m = plausibility_mask(&dist(&[0.0, 1.0]), 0.0);
        assert_eq!(m.as_slice(), &[false, true]);
        assert!(m.clone().force(TokenId(0)).contains(TokenId(0)));
    }

    #[test]
    fn ritual_examples() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = dist(&[0.2, 0.2, 0.6]);
        let mask = plausibility_mask(&p, 0.1);
        close(&fuse_ritual(&p, &q, 3.0, &mask).unwrap(), &[0.275, 0.225, 0.5]);
        close(&fuse_ritual(&p, &q, 0.0, &mask).unwrap(), &[0.5, 0.3, 0.2]);
    }

    #[test]
    fn vcd_examples() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = dist(&[0.4, 0.4, 0.2]);
        let mask = plausibility_mask(&p, 0.1);
        close(&fuse_vcd(&p, &q, 2.0, 1.0, &mask).unwrap(), &[0.6, 0.2, 0.2]);
        close(&fuse_vcd(&p, &q, 1.0, 0.0, &mask).unwrap(), &[0.5, 0.3, 0.2]);
    }

    #[test]
    fn m3id_weight_closed_form() {
        assert!((m3id_weight(0.1, 1) - 0.10517091807564763).abs() < 1e-15);
        let direct = |t: f64| (1.0 - (-0.1 * t).exp()) / (-0.1 * t).exp();
        for t in 1..50 {
            assert!((m3id_weight(0.1, t) - direct(t as f64)).abs() < 1e-12);
            assert!(m3id_weight(0.1, t + 1) > m3id_weight(0.1, t));
        }
    }

    #[test]
    fn combined_example() {
        let p_trans = dist(&[0.5, 0.5, 0.0]);
        let fused = dist(&[0.2, 0.3, 0.5]);
        let mask = PlausibleSet::all(3);
        close(&fuse_combined(&p_trans, &fused, 3.0, &mask).unwrap(), &[0.425, 0.45, 0.125]);
        close(&fuse_combined(&p_trans, &fused, 0.0, &mask).unwrap(), &[0.2, 0.3, 0.5]);
        // A token clamped to zero by the contrastive step can still win mass.
        let clamped = dist(&[0.0, 0.5, 0.5]);
        close(&fuse_combined(&dist(&[0.5, 0.25, 0.25]), &clamped, 2.0, &mask).unwrap(), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.2, 0.2, 0.6]);
        let mask = PlausibleSet::all(2);
        assert!(matches!(fuse_ritual(&p, &q, 1.0, &mask), Err(DistError::ShapeMismatch { .. })));
        assert!(matches!(fuse_vcd(&p, &q, 1.0, 1.0, &mask), Err(DistError::ShapeMismatch { .. })));
        assert!(matches!(fuse_m3id(&p, &q, 0.1, 1, &mask), Err(DistError::ShapeMismatch { .. })));
        assert!(matches!(fuse_combined(&q, &p, 1.0, &mask), Err(DistError::ShapeMismatch { .. })));
    }

    #[test]
    fn contrast_can_remove_everything() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.5, 0.5]);
        let mask = PlausibleSet::all(2);
        assert_eq!(fuse_vcd(&p, &q, 1.0, 1.0, &mask), Err(DistError::AllMasked));
    }
}
