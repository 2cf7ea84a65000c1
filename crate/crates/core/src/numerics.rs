//! Numerically stable primitives over vocabulary-sized distributions.
//!
//! Everything is `f64` and carried in the log domain where possible;
//! probabilities are only materialized at the edges. The slice kernels at
//! the bottom of the file are what the training loops call; the row types
//! wrap them with invariant checks.

use crate::error::{Error, Result};

/// Tolerance used when validating that a distribution is normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Unnormalized scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow(Vec<f64>);

impl LogitRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain(format!(
                "logit row needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A probability vector: non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("empty probability row"));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!(
                "probability {i} = {} is not a finite non-negative number",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Natural log of every entry; zero-probability entries map to `-inf`.
    pub fn to_log(&self) -> LogProbRow {
        LogProbRow(self.0.iter().map(|p| p.ln()).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Natural-log probabilities. `-inf` is allowed and stands for an exact zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbRow(Vec<f64>);

impl LogProbRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("empty log-probability row"));
        }
        if let Some(i) = values
            .iter()
            .position(|v| v.is_nan() || *v == f64::INFINITY || *v > NORMALIZATION_TOL)
        {
            return Err(Error::domain(format!(
                "log-probability {i} = {} is not <= 0",
                values[i]
            )));
        }
        let lse = lse_slice(&values);
        if lse.abs() > NORMALIZATION_TOL {
            return Err(Error::domain(format!(
                "log-probabilities have log-sum-exp {lse}, not 0"
            )));
        }
        Ok(Self(values))
    }

    /// Wraps a row already known to be normalized (output of a log-softmax).
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(lse_slice(&values).abs() < 1e-6);
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_probs(&self) -> ProbRow {
        ProbRow(self.0.iter().map(|v| v.exp()).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Something that can be read as a distribution over the vocabulary.
pub trait Distribution {
    fn len(&self) -> usize;
    fn prob(&self, i: usize) -> f64;
    fn log_prob(&self, i: usize) -> f64;
}

impl Distribution for ProbRow {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn prob(&self, i: usize) -> f64 {
        self.0[i]
    }
    fn log_prob(&self, i: usize) -> f64 {
        self.0[i].ln()
    }
}

impl Distribution for LogProbRow {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn prob(&self, i: usize) -> f64 {
        self.0[i].exp()
    }
    fn log_prob(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::domain(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

pub type TokenId = u32;

pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("log_sum_exp of an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("log_sum_exp input must be finite"));
    }
    Ok(lse_slice(values))
}

pub fn temp_softmax(logits: &LogitRow, tau: Temperature) -> ProbRow {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits.values(), tau.get(), &mut out);
    out.iter_mut().for_each(|v| *v = v.exp());
    ProbRow(out)
}

pub fn log_softmax(logits: &LogitRow, tau: Temperature) -> LogProbRow {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits.values(), tau.get(), &mut out);
    LogProbRow(out)
}

/// `KL(p || q)` in nats. Terms with `p_i = 0` contribute nothing.
pub fn kl_divergence<P: Distribution + ?Sized>(p: &P, q: &LogProbRow) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..p.len() {
        let pi = p.prob(i);
        if pi > 0.0 {
            acc += pi * (p.log_prob(i) - q.values()[i]);
        }
    }
    Ok(acc)
}

pub fn cross_entropy(target: TokenId, log_probs: &LogProbRow) -> Result<f64> {
    let t = target as usize;
    if t >= log_probs.len() {
        return Err(Error::domain(format!(
            "target token {target} out of range for vocabulary of {}",
            log_probs.len()
        )));
    }
    Ok(-log_probs.values()[t])
}

// ---------------------------------------------------------------------------
// Slice kernels. No validation; callers guarantee lengths and finiteness.

#[inline]
pub fn lse_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `out = log_softmax(z / tau)`.
#[inline]
pub fn log_softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert_eq!(z.len(), out.len());
    let inv = 1.0 / tau;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) * inv;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v * inv - max;
        sum += o.exp();
    }
    let ln = sum.ln();
    out.iter_mut().for_each(|o| *o -= ln);
}

/// Re-normalizes an arbitrary finite log-space vector in place, returning
/// the log partition function that was subtracted.
#[inline]
pub fn normalize_log_in_place(u: &mut [f64]) -> f64 {
    let log_z = lse_slice(u);
    u.iter_mut().for_each(|v| *v -= log_z);
    log_z
}

/// `KL(p || q)` on log-probability slices.
#[inline]
pub fn kl_log_slices(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum()
}

/// Back-propagates `g = dL/d(log_softmax(z / tau))` to `dL/dz`, in place.
#[inline]
pub fn log_softmax_backward(log_probs: &[f64], tau: f64, g: &mut [f64]) {
    let total: f64 = g.iter().sum();
    let inv = 1.0 / tau;
    for (gi, &lp) in g.iter_mut().zip(log_probs) {
        *gi = (*gi - lp.exp() * total) * inv;
    }
}

/// Total-variation distance between two probability slices.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> LogitRow {
        LogitRow::new(v.to_vec()).unwrap()
    }

    fn lp(p: &[f64]) -> LogProbRow {
        ProbRow::new(p.to_vec()).unwrap().to_log()
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
        assert!(log_sum_exp(&[1e4, -1e4, 9_999.5]).unwrap().is_finite());
    }

    #[test]
    fn softmax_examples() {
        let p = temp_softmax(&row(&[2.5, 2.5, 2.5]), Temperature::new(0.7).unwrap());
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // sigmoid(1) from the closed form 1 / (1 + e^-1)
        let p = temp_softmax(&row(&[1.0, 0.0]), Temperature::ONE);
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.values()[0] - s).abs() < 1e-15);
        assert!((p.values()[0] - 0.731059).abs() < 1e-6);
        assert!((p.values()[1] - 0.268941).abs() < 1e-6);
        let q = temp_softmax(&row(&[2.0, 0.0]), Temperature::new(2.0).unwrap());
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let l = log_softmax(&row(&[0.0, 0.0]), Temperature::ONE);
        for v in l.values() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let l = log_softmax(&row(&[1.0, 0.0]), Temperature::ONE);
        let p = temp_softmax(&row(&[1.0, 0.0]), Temperature::ONE);
        for (a, b) in l.values().iter().zip(p.values()) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let p = ProbRow::new(vec![0.5, 0.5]).unwrap();
        assert!(kl_divergence(&p, &p.to_log()).unwrap().abs() < 1e-12);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = kl_divergence(&p, &lp(&[0.25, 0.75])).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-6);
        let one_hot = ProbRow::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&one_hot, &lp(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        // the log-row form of p gives the same answer, including the -inf entry
        let kl2 = kl_divergence(&one_hot.to_log(), &lp(&[0.5, 0.5])).unwrap();
        assert_eq!(kl, kl2);
        assert!(kl_divergence(&p, &lp(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(1, &lp(&[0.0, 1.0])).unwrap(), 0.0);
        let u = lp(&[0.25; 4]);
        assert!((cross_entropy(3, &u).unwrap() - 4f64.ln()).abs() < 1e-15);
        let l = log_softmax(&row(&[1.0, 0.0]), Temperature::ONE);
        let ce = cross_entropy(1, &l).unwrap();
        assert!((ce - (1.0 + (1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((ce - 1.313262).abs() < 1e-6);
        assert!(cross_entropy(4, &u).is_err());
    }

    #[test]
    fn row_validation() {
        assert!(LogitRow::new(vec![1.0]).is_err());
        assert!(LogitRow::new(vec![1.0, f64::NAN]).is_err());
        assert!(ProbRow::new(vec![0.5, 0.6]).is_err());
        assert!(ProbRow::new(vec![-0.1, 1.1]).is_err());
        assert!(LogProbRow::new(vec![0.1, -1.0]).is_err());
        assert!(LogProbRow::new(vec![0.0, f64::NEG_INFINITY]).is_ok());
    }

    #[test]
    fn log_softmax_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let w = [0.5, -1.0, 2.0, 0.25];
        let tau = 1.7;
        let f = |z: &[f64]| {
            let mut out = [0.0; 4];
            log_softmax_into(z, tau, &mut out);
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut lps = [0.0; 4];
        log_softmax_into(&z, tau, &mut lps);
        let mut g = w;
        log_softmax_backward(&lps, tau, &mut g);
        for i in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop_oneof![Just(2usize), Just(16usize), Just(64usize)]
            .prop_flat_map(|v| prop::collection::vec(-20.0f64..20.0, v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_is_a_distribution(z in logits_strategy()) {
            let p = temp_softmax(&LogitRow::new(z).unwrap(), Temperature::ONE);
            let sum: f64 = p.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            // 1 - e^-40 rounds to 1.0, so the upper bound cannot be strict
            prop_assert!(p.values().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn shift_invariance(z in logits_strategy(), c in -50.0f64..50.0, tau in 0.2f64..3.0) {
            let tau = Temperature::new(tau).unwrap();
            let a = temp_softmax(&LogitRow::new(z.clone()).unwrap(), tau);
            let b = temp_softmax(&LogitRow::new(z.iter().map(|v| v + c).collect()).unwrap(), tau);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_log_softmax_is_softmax(z in logits_strategy(), tau in 0.2f64..3.0) {
            let tau = Temperature::new(tau).unwrap();
            let z = LogitRow::new(z).unwrap();
            let p = temp_softmax(&z, tau);
            let l = log_softmax(&z, tau);
            prop_assert!(log_sum_exp(l.values()).unwrap().abs() < 1e-9);
            for (x, y) in l.values().iter().zip(p.values()) {
                prop_assert!((x.exp() - y).abs() < 1e-12);
            }
        }

        #[test]
        fn gibbs_inequality(a in logits_strategy(), seed in any::<u64>()) {
            let n = a.len();
            let b: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 4001) as f64) / 100.0 - 20.0).collect();
            let p = temp_softmax(&LogitRow::new(a).unwrap(), Temperature::ONE);
            let q = log_softmax(&LogitRow::new(b).unwrap(), Temperature::ONE);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn lse_never_overflows(v in prop::collection::vec(-1e4f64..1e4, 1..64)) {
            prop_assert!(log_sum_exp(&v).unwrap().is_finite());
        }
    }
}
