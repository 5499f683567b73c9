//! Distributions over the next byte and the divergences used to compare them.

use crate::error::{BldError, Result};

/// 256 byte values plus end-of-sequence.
pub const BYTE_OUTCOMES: usize = 257;
/// Slot index of the end-of-sequence outcome in a [`ByteDistribution`].
pub const EOS_SLOT: usize = 256;

/// Next-byte simplex: entries `0..256` are byte values, entry 256 is
/// end-of-sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteDistribution {
    probs: Vec<f64>,
}

impl ByteDistribution {
    /// Wraps a 257-entry probability vector. Entries must be finite and
    /// non-negative; normalization is the caller's responsibility and can
    /// be checked with [`ByteDistribution::validate`].
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != BYTE_OUTCOMES {
            return Err(BldError::Shape(format!(
                "byte distribution needs {BYTE_OUTCOMES} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(BldError::Shape(
                "byte distribution entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { probs })
    }

    /// Normalizes a vector of non-negative masses.
    pub fn from_masses(mut masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(BldError::NotNormalized { sum: total });
        }
        for m in &mut masses {
            *m /= total;
        }
        Self::from_probs(masses)
    }

    pub fn point_mass(slot: usize) -> Self {
        let mut probs = vec![0.0; BYTE_OUTCOMES];
        probs[slot] = 1.0;
        Self { probs }
    }

    pub fn uniform() -> Self {
        Self {
            probs: vec![1.0 / BYTE_OUTCOMES as f64; BYTE_OUTCOMES],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn byte(&self, b: u8) -> f64 {
        self.probs[b as usize]
    }

    pub fn eos(&self) -> f64 {
        self.probs[EOS_SLOT]
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let sum = self.sum();
        if (sum - 1.0).abs() > tol {
            return Err(BldError::NotNormalized { sum });
        }
        Ok(())
    }

    pub fn to_log(&self) -> LogByteDistribution {
        LogByteDistribution {
            logp: self.probs.iter().map(|p| p.ln()).collect(),
        }
    }
}

/// Log-domain counterpart of [`ByteDistribution`]; zero-probability slots
/// hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogByteDistribution {
    logp: Vec<f64>,
}

impl LogByteDistribution {
    pub fn from_logp(logp: Vec<f64>) -> Result<Self> {
        if logp.len() != BYTE_OUTCOMES {
            return Err(BldError::Shape(format!(
                "byte distribution needs {BYTE_OUTCOMES} entries, got {}",
                logp.len()
            )));
        }
        Ok(Self { logp })
    }

    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    pub fn to_probs(&self) -> ByteDistribution {
        ByteDistribution {
            probs: self.logp.iter().map(|l| l.exp()).collect(),
        }
    }
}

/// `ln(sum(exp(xs)))`, returning `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `KL(p || q)` in nats. Terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn jsd(p: &ByteDistribution, q: &ByteDistribution) -> Result<f64> {
    const TOL: f64 = 1e-6;
    p.validate(TOL)?;
    q.validate(TOL)?;
    Ok(jsd_unchecked(p.probs(), q.probs()))
}

pub(crate) fn jsd_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        let term = |x: f64| if x > 0.0 { x * (x / mi).ln() } else { 0.0 };
        total += 0.5 * (term(pi) + term(qi));
    }
    total.clamp(0.0, std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsd_of_identical_is_zero() {
        let p = ByteDistribution::uniform();
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_of_disjoint_point_masses_is_ln2() {
        let p = ByteDistribution::point_mass(0);
        let q = ByteDistribution::point_mass(1);
        assert!((jsd(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn jsd_uniform_vs_point_mass_matches_closed_form() {
        // m = (u + delta)/2: the point slot holds (1/n + 1)/2, the rest 1/(2n).
        let n = BYTE_OUTCOMES as f64;
        let m_hot = 0.5 * (1.0 / n + 1.0);
        let m_cold = 0.5 / n;
        let kl_point = (1.0 / m_hot).ln();
        let kl_uniform =
            (1.0 / n) * ((1.0 / n) / m_hot).ln() + (n - 1.0) / n * ((1.0 / n) / m_cold).ln();
        let expected = 0.5 * kl_point + 0.5 * kl_uniform;

        let got = jsd(
            &ByteDistribution::uniform(),
            &ByteDistribution::point_mass(7),
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn jsd_rejects_unnormalized() {
        let mut probs = vec![0.0; BYTE_OUTCOMES];
        probs[0] = 0.5;
        let p = ByteDistribution::from_probs(probs).unwrap();
        assert!(matches!(
            jsd(&p, &ByteDistribution::uniform()),
            Err(BldError::NotNormalized { .. })
        ));
    }

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn jsd_is_symmetric() {
        let p = ByteDistribution::from_masses((0..BYTE_OUTCOMES).map(|i| 1.0 + i as f64).collect())
            .unwrap();
        let q = ByteDistribution::uniform();
        assert_eq!(jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
    }
}
