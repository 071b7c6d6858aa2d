use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_HIGH_PASI_THRESHOLD: f64 = 10.0;

/// Per-visit draw weights correcting the low/high PASI imbalance.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    pub weights: Vec<f64>,
    pub threshold: f64,
    /// Set when one bin was empty and uniform weights were used instead.
    pub warning: Option<String>,
}

impl SamplingWeights {
    pub fn uniform(n: usize, threshold: f64) -> Self {
        SamplingWeights {
            weights: vec![1.0; n],
            threshold,
            warning: None,
        }
    }

    /// Draw `n` visit indices with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let dist = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::validation("sampling weights", e.to_string()))?;
        Ok((0..n).map(|_| dist.sample(rng)).collect())
    }

    /// Analytic probability of drawing a visit whose total exceeds the threshold.
    pub fn high_bin_probability(&self, totals: &[f64]) -> f64 {
        let sum: f64 = self.weights.iter().sum();
        let high: f64 = self
            .weights
            .iter()
            .zip(totals)
            .filter(|(_, &t)| t > self.threshold)
            .map(|(w, _)| w)
            .sum();
        high / sum
    }
}

/// Two-bin inverse-frequency weights: visits with total PASI above
/// `threshold` get weight `n_low / n_high`, the rest weight 1, so each bin
/// is drawn with probability one half.
pub fn compute_sampling_weights(totals: &[f64], threshold: f64) -> Result<SamplingWeights> {
    if totals.is_empty() {
        return Err(Error::Structure("no training visits to weight".into()));
    }
    if let Some(bad) = totals.iter().find(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("visit total {bad}")));
    }
    let n_high = totals.iter().filter(|&&t| t > threshold).count();
    let n_low = totals.len() - n_high;
    if n_high == 0 || n_low == 0 {
        let mut w = SamplingWeights::uniform(totals.len(), threshold);
        w.warning = Some(format!(
            "PASI > {threshold} bin has {n_high} of {} visits; using uniform weights",
            totals.len()
        ));
        return Ok(w);
    }
    let high_weight = n_low as f64 / n_high as f64;
    Ok(SamplingWeights {
        weights: totals
            .iter()
            .map(|&t| if t > threshold { high_weight } else { 1.0 })
            .collect(),
        threshold,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ninety_ten() -> Vec<f64> {
        (0..100).map(|i| if i < 90 { 4.0 } else { 20.0 }).collect()
    }

    #[test]
    fn inverse_frequency() {
        let w = compute_sampling_weights(&ninety_ten(), 10.0).unwrap();
        assert!(w.warning.is_none());
        assert_eq!(w.weights[0], 1.0);
        assert_eq!(w.weights[95], 9.0);
        assert!((w.high_bin_probability(&ninety_ten()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let w = compute_sampling_weights(&[10.0, 10.0, 10.5], 10.0).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn degenerate_bin_falls_back_to_uniform() {
        let w = compute_sampling_weights(&[1.0, 5.0, 10.0], 10.0).unwrap();
        assert!(w.warning.is_some());
        assert!(w.weights.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(compute_sampling_weights(&[1.0, f64::NAN], 10.0).is_err());
        assert!(compute_sampling_weights(&[], 10.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let w = compute_sampling_weights(&ninety_ten(), 10.0).unwrap();
        let a = w.sample(50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = w.sample(50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
