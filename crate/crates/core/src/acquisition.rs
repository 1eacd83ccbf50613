//! Acquisition scores and top-k batch selection.
//!
//! All scores are oriented so that a higher score means "acquire sooner".

use crate::error::{config_err, data_err, Result};
use crate::model::ProbVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcqFn {
    LeastConfidence,
    Entropy,
    Margin,
    Random,
}

impl AcqFn {
    pub const ALL: [AcqFn; 4] = [AcqFn::LeastConfidence, AcqFn::Entropy, AcqFn::Margin, AcqFn::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            AcqFn::LeastConfidence => "least_confidence",
            AcqFn::Entropy => "entropy",
            AcqFn::Margin => "margin",
            AcqFn::Random => "random",
        }
    }

    pub fn is_uncertainty(&self) -> bool {
        !matches!(self, AcqFn::Random)
    }

    /// Score a model prediction. Random acquisition ignores `p` and draws from `rng`.
    pub fn score(&self, p: &ProbVector, rng: &mut impl Rng) -> Result<f64> {
        Ok(match self {
            AcqFn::LeastConfidence => least_confidence(p),
            AcqFn::Entropy => entropy_score(p),
            AcqFn::Margin => margin_score(p)?,
            AcqFn::Random => random_score(rng),
        })
    }
}

impl fmt::Display for AcqFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcqFn {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        AcqFn::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown acquisition function '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcquisitionScore {
    pub example_id: u64,
    pub score: f64,
}

/// `-max_i p_i`
pub fn least_confidence(p: &ProbVector) -> f64 {
    -p.probs().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats, with 0·ln 0 = 0.
pub fn entropy_score(p: &ProbVector) -> f64 {
    -p.probs()
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Negated gap between the two largest probabilities.
pub fn margin_score(p: &ProbVector) -> Result<f64> {
    if p.len() < 2 {
        return Err(config_err("margin needs at least two classes"));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &q in p.probs() {
        if q > first {
            second = first;
            first = q;
        } else if q > second {
            second = q;
        }
    }
    Ok(-(first - second))
}

/// Uniform in [0, 1).
pub fn random_score(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// Score descending, then id ascending.
pub fn ranking_order(a: &AcquisitionScore, b: &AcquisitionScore) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.example_id.cmp(&b.example_id))
}

/// The `k` highest-scoring ids; ties go to the lower id.
pub fn select_batch(scores: &[AcquisitionScore], k: usize) -> Result<Vec<u64>> {
    let mut seen = HashSet::with_capacity(scores.len());
    for s in scores {
        if !seen.insert(s.example_id) {
            return Err(data_err(format!("duplicate example id {}", s.example_id)));
        }
        if !s.score.is_finite() {
            return Err(data_err(format!("non-finite score for example {}", s.example_id)));
        }
    }
    let mut ranked = scores.to_vec();
    if k < ranked.len() {
        if k == 0 {
            return Ok(Vec::new());
        }
        ranked.select_nth_unstable_by(k - 1, ranking_order);
        ranked.truncate(k);
    }
    ranked.sort_by(ranking_order);
    Ok(ranked.into_iter().map(|s| s.example_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn sc(pairs: &[(u64, f64)]) -> Vec<AcquisitionScore> {
        pairs
            .iter()
            .map(|&(example_id, score)| AcquisitionScore { example_id, score })
            .collect()
    }

    #[test]
    fn least_confidence_values() {
        assert_eq!(least_confidence(&pv(&[0.7, 0.3])), -0.7);
        assert_eq!(least_confidence(&pv(&[1.0, 0.0, 0.0, 0.0])), -1.0);
        assert_eq!(least_confidence(&pv(&[0.25; 4])), -0.25);
    }

    #[test]
    fn entropy_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((entropy_score(&pv(&[0.5, 0.5])) - ln2).abs() < 1e-15);
        assert_eq!(entropy_score(&pv(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy_score(&pv(&[0.5, 0.25, 0.25])) - 1.5 * ln2).abs() < 1e-15);
        assert!((entropy_score(&pv(&[0.5, 0.25, 0.25])) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn margin_values() {
        assert_eq!(margin_score(&pv(&[0.5, 0.5])).unwrap(), 0.0);
        assert!((margin_score(&pv(&[0.9, 0.1])).unwrap() + 0.8).abs() < 1e-15);
        assert!((margin_score(&pv(&[0.4, 0.35, 0.25])).unwrap() + 0.05).abs() < 1e-15);
        assert!(margin_score(&pv(&[1.0])).is_err());
    }

    #[test]
    fn random_scores() {
        let s = SeedStream::new(4).child("acq");
        let a = random_score(&mut s.rng());
        let b = random_score(&mut s.rng());
        assert_eq!(a, b);
        let mut rng = s.rng();
        let draws: Vec<f64> = (0..10_000).map(|_| random_score(&mut rng)).collect();
        assert!(draws.iter().all(|v| (0.0..1.0).contains(v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() <= 0.02);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_batch(&sc(&[(0, 0.1), (1, 0.9), (2, 0.5)]), 2).unwrap(), vec![1, 2]);
        assert_eq!(select_batch(&sc(&[(0, 0.5), (1, 0.5), (2, 0.1)]), 1).unwrap(), vec![0]);
        assert!(select_batch(&sc(&[(0, 0.5)]), 0).unwrap().is_empty());
        assert_eq!(select_batch(&sc(&[(5, 0.1), (3, 0.1)]), 10).unwrap(), vec![3, 5]);
        assert!(select_batch(&sc(&[(1, 0.5), (1, 0.2)]), 1).is_err());
    }

    #[test]
    fn names_round_trip() {
        for a in AcqFn::ALL {
            assert_eq!(a.as_str().parse::<AcqFn>().unwrap(), a);
        }
        assert!("bald".parse::<AcqFn>().is_err());
    }

    proptest! {
        #[test]
        fn binary_scores_decrease_with_confidence(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let (a, b) = (pv(&[p, 1.0 - p]), pv(&[q, 1.0 - q]));
            let (da, db) = ((p - 0.5).abs(), (q - 0.5).abs());
            prop_assume!((da - db).abs() > 1e-9);
            let closer = da < db;
            prop_assert_eq!(least_confidence(&a) > least_confidence(&b), closer);
            prop_assert_eq!(entropy_score(&a) > entropy_score(&b), closer);
            prop_assert_eq!(margin_score(&a).unwrap() > margin_score(&b).unwrap(), closer);
        }

        #[test]
        fn selection_is_permutation_invariant(
            raw in proptest::collection::vec(0u8..5, 1..40),
            k in 0usize..45,
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let scores: Vec<AcquisitionScore> = raw
                .iter()
                .enumerate()
                .map(|(i, &s)| AcquisitionScore { example_id: i as u64 * 3, score: s as f64 / 4.0 })
                .collect();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut SeedStream::new(seed).rng());
            prop_assert_eq!(select_batch(&scores, k).unwrap(), select_batch(&shuffled, k).unwrap());
        }
    }
}
