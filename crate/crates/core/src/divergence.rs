//! Information-theoretic primitives in bits (log base 2), so that the
//! Jensen–Shannon divergence is bounded by exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A discrete probability distribution: nonnegative entries summing to 1
/// (within 1e-9), at least one entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("ProbVector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// Normalises nonnegative weights with a positive total.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidArgument(format!("weight total {total}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Self::from_weights(&w)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("ProbVector"));
        }
        Ok(ProbVector(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::InvalidArgument(format!("index {i} >= {n}")));
        }
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

fn same_len(op: &'static str, p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape(op, format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// `Σ p(i) log₂(p(i)/q(i))`. Terms with `p(i) = 0` contribute nothing; if
/// `p(i) > 0` where `q(i) = 0` the result is `+∞`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len("kl_divergence", p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += pi * (pi / qi).log2();
        }
    }
    Ok(total.max(0.0))
}

/// Jensen–Shannon divergence in bits: symmetric, finite, within `[0, 1]`.
pub fn jsd(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len("jsd", p, q)?;
    // Summed termwise so that jsd(p, q) and jsd(q, p) add identical terms.
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / m).log2();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / m).log2();
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// `−Σ p log₂ p` with `0 log 0 = 0`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    -p.probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// Decides whether two sampled answers mean the same thing. Implementations
/// must be equivalence relations.
pub trait AnswerClusterer {
    fn equivalent(&self, a: &str, b: &str) -> bool;
}

/// Exact match after lowercasing and collapsing whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormalizedMatch;

impl NormalizedMatch {
    pub fn normalize(s: &str) -> String {
        s.split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl AnswerClusterer for NormalizedMatch {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        Self::normalize(a) == Self::normalize(b)
    }
}

/// Cluster sizes, in order of first appearance.
pub fn cluster_sizes<S: AsRef<str>>(answers: &[S], clusterer: &dyn AnswerClusterer) -> Vec<usize> {
    let mut reps: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for a in answers {
        let a = a.as_ref();
        match reps.iter().position(|r| clusterer.equivalent(r, a)) {
            Some(i) => sizes[i] += 1,
            None => {
                reps.push(a);
                sizes.push(1);
            }
        }
    }
    sizes
}

/// Shannon entropy (bits) of the empirical distribution over answer
/// equivalence classes.
pub fn semantic_entropy<S: AsRef<str>>(answers: &[S], clusterer: &dyn AnswerClusterer) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::Empty("semantic_entropy samples"));
    }
    let dist = ProbVector::from_counts(&cluster_sizes(answers, clusterer))?;
    Ok(shannon_entropy(&dist))
}
