//! Value types and loss functionals.
//!
//! All types validate on construction and are immutable afterwards.

use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on `Σ η_y` for a [`LogDensity`].
pub const CENTERING_TOLERANCE: f64 = 1e-8;

/// Tolerance on `Σ p_y - 1` for a [`Composition`].
pub const SUM_TOLERANCE: f64 = 1e-10;

/// Observed counts per cell. Entries are non-negative reals; they need not
/// be integers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountVector {
    counts: Vec<f64>,
    total: f64,
}

impl CountVector {
    pub fn new(counts: Vec<f64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty);
        }
        for (index, &value) in counts.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidCount { index, value });
            }
        }
        let total = counts.iter().sum();
        Ok(Self { counts, total })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn zero_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0.0).count()
    }

    /// Errors unless the total is positive.
    pub fn require_positive_total(&self) -> Result<()> {
        if self.total > 0.0 {
            Ok(())
        } else {
            Err(Error::ZeroTotal)
        }
    }

    /// Same counts multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.counts.iter().map(|&k| k * c).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.counts
    }
}

/// Strictly positive base-measure weights. Only the shape matters: `w` and
/// `c·w` give identical fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseMeasure {
    weights: Vec<f64>,
}

impl BaseMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidWeight { index, value });
            }
        }
        Ok(Self { weights })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True when every weight equals the first one exactly.
    pub fn is_uniform(&self) -> bool {
        let first = self.weights[0];
        self.weights.iter().all(|&w| w == first)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `w / Σw`, the limit of the estimate as `λ → ∞`.
    pub fn normalized(&self) -> Composition {
        let total = self.total();
        Composition {
            probs: self.weights.iter().map(|&w| w / total).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|&w| w * c).collect())
    }

    pub(crate) fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }
}

impl From<&Composition> for BaseMeasure {
    fn from(p: &Composition) -> Self {
        BaseMeasure {
            weights: p.probs.clone(),
        }
    }
}

/// Centered log-density coordinates, `Σ η_y = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogDensity {
    eta: Vec<f64>,
}

impl LogDensity {
    /// Validates the centering side condition.
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::Empty);
        }
        let sum: f64 = eta.iter().sum();
        if !sum.is_finite() || sum.abs() > CENTERING_TOLERANCE {
            return Err(Error::NotCentered(sum));
        }
        Ok(Self { eta })
    }

    /// Subtracts the mean.
    pub fn centered(mut eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::Empty);
        }
        let mean = eta.iter().sum::<f64>() / eta.len() as f64;
        for v in &mut eta {
            *v -= mean;
        }
        Ok(Self { eta })
    }

    /// For solver output, where centering emerges from stationarity and is
    /// checked by the callers' tests rather than enforced.
    pub(crate) fn from_solver(eta: Vec<f64>) -> Self {
        Self { eta }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// `Σ η_y²`, which equals the shrinkage penalty `J(η)` under centering.
    pub fn squared_norm(&self) -> f64 {
        self.eta.iter().map(|e| e * e).sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.eta
    }
}

/// Probability vector with strictly positive entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Composition {
    probs: Vec<f64>,
}

impl Composition {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty);
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::InvalidComposition(format!(
                    "entry {i} is {p}; entries must be strictly positive"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidComposition(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Divides a strictly positive vector by its sum.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        Self::new(values.into_iter().map(|v| v / sum).collect())
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Empty);
        }
        Ok(Self {
            probs: vec![1.0 / m as f64; m],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// `log Σ exp(a_y)` with max-subtraction.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + a.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Weighted softmax `w_y e^{η_y} / Σ w_x e^{η_x}` from log weights, together
/// with the log partition `log Σ w_x e^{η_x}`. Entries may underflow to zero.
pub(crate) fn softmax_with_log_partition(eta: &[f64], log_w: &[f64]) -> (Vec<f64>, f64) {
    let a: Vec<f64> = eta.iter().zip(log_w).map(|(e, lw)| e + lw).collect();
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    (p, max + sum.ln())
}

/// Maps log-density coordinates to probabilities relative to `w`. The
/// input need not be centered; a constant shift leaves the result unchanged.
pub fn to_composition(eta: &[f64], w: &BaseMeasure) -> Result<Composition> {
    if eta.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            found: eta.len(),
        });
    }
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidComposition(
            "log density has non-finite entries".into(),
        ));
    }
    let (p, _) = softmax_with_log_partition(eta, &w.log_weights());
    Composition::new(p)
}

/// `KL(p, q) = Σ p_y log(p_y / q_y)`.
pub fn kl_divergence(p: &Composition, q: &Composition) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let kl: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    // Rounding can leave a tiny negative value when p ≈ q.
    Ok(kl.max(0.0))
}

/// `dᵀ(P₀ − p₀p₀ᵀ)d`, the quadratic proxy for symmetrized KL. Computed as a
/// weighted variance so it is non-negative and exactly shift invariant in
/// the mean.
pub fn quadratic_proxy_v(p0: &Composition, d: &[f64]) -> Result<f64> {
    weighted_variance(p0.as_slice(), d)
}

pub(crate) fn weighted_variance(p: &[f64], d: &[f64]) -> Result<f64> {
    if p.len() != d.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            found: d.len(),
        });
    }
    let mean: f64 = p.iter().zip(d).map(|(pi, di)| pi * di).sum();
    Ok(p.iter()
        .zip(d)
        .map(|(pi, di)| pi * (di - mean) * (di - mean))
        .sum())
}

/// Raw ratios `k_y / n`. May contain zeros, so this is a plain vector.
pub fn empirical_composition(k: &CountVector) -> Result<Vec<f64>> {
    k.require_positive_total()?;
    let n = k.total();
    Ok(k.as_slice().iter().map(|&c| c / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn comp(v: &[f64]) -> Composition {
        Composition::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_eta_gives_uniform_composition() {
        let p = to_composition(&[0.0, 0.0, 0.0], &BaseMeasure::uniform(3).unwrap()).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_only_case() {
        let w = BaseMeasure::new(vec![1.0, 3.0]).unwrap();
        let p = to_composition(&[0.0, 0.0], &w).unwrap();
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_two_split() {
        let l2 = 2f64.ln();
        let p = to_composition(&[l2, -l2], &BaseMeasure::uniform(2).unwrap()).unwrap();
        // e^{l2} / (e^{l2} + e^{-l2}) = 2 / 2.5
        assert!((p.as_slice()[0] - 0.8).abs() < 1e-15);
        assert!((p.as_slice()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn to_composition_rejects_mismatch_and_bad_weights() {
        let w = BaseMeasure::uniform(3).unwrap();
        assert!(matches!(
            to_composition(&[0.0, 0.0], &w),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            BaseMeasure::new(vec![1.0, 0.0]),
            Err(Error::InvalidWeight { index: 1, .. })
        ));
        assert!(matches!(
            BaseMeasure::new(vec![-2.0]),
            Err(Error::InvalidWeight { index: 0, .. })
        ));
    }

    #[test]
    fn large_eta_does_not_overflow() {
        let w = BaseMeasure::uniform(3).unwrap();
        let p = to_composition(&[800.0, 790.0, 770.0], &w).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        assert!(p.as_slice()[0] > p.as_slice()[1]);
        // A cell 800 nats below the rest underflows; that is not a composition.
        assert!(matches!(
            to_composition(&[800.0, 790.0, 0.0], &w),
            Err(Error::InvalidComposition(_))
        ));
    }

    #[test]
    fn kl_identity_is_zero() {
        let u = Composition::uniform(4).unwrap();
        assert_eq!(kl_divergence(&u, &u).unwrap(), 0.0);
    }

    #[test]
    fn kl_half_vs_quarter() {
        // 0.5 ln 2 + 0.5 ln(2/3), evaluated in high precision.
        let kl = kl_divergence(&comp(&[0.5, 0.5]), &comp(&[0.25, 0.75])).unwrap();
        assert!((kl - 0.143_841_036_225_890_46).abs() < 1e-15, "{kl}");
    }

    #[test]
    fn kl_length_mismatch() {
        assert!(matches!(
            kl_divergence(&comp(&[0.5, 0.5]), &Composition::uniform(3).unwrap()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn composition_rejects_zero_entries() {
        assert!(Composition::new(vec![1.0, 0.0]).is_err());
        assert!(Composition::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn proxy_constant_vector_is_zero() {
        let p = comp(&[0.2, 0.3, 0.5]);
        assert!(quadratic_proxy_v(&p, &[4.0, 4.0, 4.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn proxy_hand_value() {
        let v = quadratic_proxy_v(&comp(&[0.5, 0.5]), &[1.0, -1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_ratios() {
        let k = CountVector::new(vec![3.0, 1.0, 0.0]).unwrap();
        assert_eq!(empirical_composition(&k).unwrap(), vec![0.75, 0.25, 0.0]);
        let k = CountVector::new(vec![1.5, 0.5]).unwrap();
        assert_eq!(empirical_composition(&k).unwrap(), vec![0.75, 0.25]);
        let k = CountVector::new(vec![2.0, 2.0]).unwrap();
        assert_eq!(empirical_composition(&k).unwrap(), vec![0.5, 0.5]);
        let k = CountVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(empirical_composition(&k), Err(Error::ZeroTotal));
    }

    #[test]
    fn counts_reject_negative_and_nan() {
        assert!(matches!(
            CountVector::new(vec![1.0, -1.0]),
            Err(Error::InvalidCount { index: 1, .. })
        ));
        assert!(CountVector::new(vec![f64::NAN]).is_err());
        assert_eq!(CountVector::new(vec![]), Err(Error::Empty));
    }

    #[test]
    fn log_density_centering() {
        assert!(LogDensity::new(vec![1.0, -1.0]).is_ok());
        assert!(matches!(
            LogDensity::new(vec![1.0, 1.0]),
            Err(Error::NotCentered(_))
        ));
        let c = LogDensity::centered(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.as_slice(), &[1.0, -1.0, 0.0]);
    }

    fn symmetrized_kl_and_proxy(eta0: &[f64], w: Vec<f64>, d: &[f64]) -> (f64, f64) {
        let w = BaseMeasure::new(w).unwrap();
        let p0 = to_composition(eta0, &w).unwrap();
        let eta1: Vec<f64> = eta0.iter().zip(d).map(|(a, b)| a + b).collect();
        let p1 = to_composition(&eta1, &w).unwrap();
        let skl = kl_divergence(&p0, &p1).unwrap() + kl_divergence(&p1, &p0).unwrap();
        (skl, quadratic_proxy_v(&p0, d).unwrap())
    }

    fn positive_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..10.0, len)
    }

    proptest! {
        #[test]
        fn shift_and_weight_scale_invariance(
            (eta, w) in (2usize..30).prop_flat_map(|m| (
                prop::collection::vec(-5.0f64..5.0, m),
                positive_vec(m),
            )),
            shift in -20.0f64..20.0,
            scale in 0.001f64..1000.0,
        ) {
            let w = BaseMeasure::new(w).unwrap();
            let base = to_composition(&eta, &w).unwrap();
            let centered = LogDensity::centered(eta.clone()).unwrap();
            let shifted: Vec<f64> = centered.as_slice().iter().map(|e| e + shift).collect();
            let p_shift = to_composition(&shifted, &w).unwrap();
            let p_scale = to_composition(&eta, &w.scaled(scale).unwrap()).unwrap();
            for i in 0..eta.len() {
                prop_assert!((base.as_slice()[i] - p_shift.as_slice()[i]).abs() <= 1e-12);
                prop_assert!((base.as_slice()[i] - p_scale.as_slice()[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_only_at_identity(
            (a, b) in (2usize..20).prop_flat_map(|m| (positive_vec(m), positive_vec(m)))
        ) {
            let p = Composition::normalized(a).unwrap();
            let q = Composition::normalized(b).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            let diff = p.as_slice().iter().zip(q.as_slice())
                .map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if diff > 1e-6 {
                prop_assert!(kl > 0.0);
            }
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn proxy_shift_invariant(
            (p, d) in (2usize..20).prop_flat_map(|m| (
                positive_vec(m),
                prop::collection::vec(-3.0f64..3.0, m),
            )),
        ) {
            let p = Composition::normalized(p).unwrap();
            let v = quadratic_proxy_v(&p, &d).unwrap();
            let shifted: Vec<f64> = d.iter().map(|x| x + 7.0).collect();
            let v7 = quadratic_proxy_v(&p, &shifted).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - v7).abs() <= 1e-12 * (1.0 + v));
        }

        #[test]
        fn proxy_approximates_symmetrized_kl(
            (eta0, w, d) in (2usize..30).prop_flat_map(|m| (
                prop::collection::vec(-2.0f64..2.0, m),
                positive_vec(m),
                prop::collection::vec(-0.05f64..0.05, m),
            )),
        ) {
            let (skl, v) = symmetrized_kl_and_proxy(&eta0, w, &d);
            prop_assert!((skl - v).abs() <= 0.05 * v + 1e-12, "skl {} v {}", skl, v);
        }

        // skl = ∫₀¹ Var_{p_t}(d) dt along the exponential tilt, and the
        // variance changes at relative rate at most osc(d), which bounds
        // skl / V within [(1 − e^{−osc})/osc, (e^{osc} − 1)/osc].
        #[test]
        fn symmetrized_kl_within_tilt_bound(
            (eta0, w, d) in (2usize..30).prop_flat_map(|m| (
                prop::collection::vec(-2.0f64..2.0, m),
                positive_vec(m),
                prop::collection::vec(-0.1f64..0.1, m),
            )),
        ) {
            let (skl, v) = symmetrized_kl_and_proxy(&eta0, w, &d);
            let osc = d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = if osc > 0.0 { osc.exp_m1() / osc } else { 1.0 };
            let lo = if osc > 0.0 { -(-osc).exp_m1() / osc } else { 1.0 };
            prop_assert!(skl <= hi * v + 1e-12 && skl >= lo * v - 1e-12, "skl {} v {}", skl, v);
        }
    }
}
