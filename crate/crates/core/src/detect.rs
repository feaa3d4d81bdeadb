//! Paraphrase-divergence hallucination detection.
//!
//! Two prompts that mean the same thing should activate the same per-layer
//! next-token distributions. The per-layer Jensen–Shannon divergence
//! between the two logit-lens profiles is aggregated into one statistic and
//! compared with a threshold; the most divergent layer is where the fusion
//! module gets inserted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::jsd;
use crate::error::{Error, Result};
use crate::model::LayerProfile;

/// Default JSD threshold.
pub const DEFAULT_DELTA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    pub per_layer: Vec<f64>,
}

impl DivergenceProfile {
    pub fn new(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::InvalidArgument("per-layer JSD outside [0, 1]".into()));
        }
        Ok(DivergenceProfile { per_layer })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }
}

/// `d_l = JSD(s_l, ŝ_l)` for every layer.
pub fn divergence_profile(x: &LayerProfile, xhat: &LayerProfile) -> Result<DivergenceProfile> {
    if x.layers.len() != xhat.layers.len() {
        return Err(Error::shape(
            "divergence_profile",
            format!("{} layers vs {}", x.layers.len(), xhat.layers.len()),
        ));
    }
    let per_layer = x
        .layers
        .iter()
        .zip(&xhat.layers)
        .map(|(p, q)| jsd(p, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceProfile { per_layer })
}

/// How per-layer divergences become one statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    Max,
    /// Sum over the deepest `⌈n_layers / 4⌉` layers.
    #[default]
    TailSum,
    /// Sum over the deepest `k` layers.
    TailSumK(usize),
}

impl Aggregation {
    fn tail_len(self, n_layers: usize) -> Option<usize> {
        match self {
            Aggregation::Max => None,
            Aggregation::TailSum => Some(n_layers.div_ceil(4).max(1)),
            Aggregation::TailSumK(k) => Some(k),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Max => write!(f, "max"),
            Aggregation::TailSum => write!(f, "tail_sum"),
            Aggregation::TailSumK(k) => write!(f, "tail_sum({k})"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "max" => return Ok(Aggregation::Max),
            "tail_sum" => return Ok(Aggregation::TailSum),
            _ => {}
        }
        s.strip_prefix("tail_sum(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.trim().parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(Aggregation::TailSumK)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown aggregation {s:?}")))
    }
}

impl Serialize for Aggregation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub hallucination: bool,
    pub statistic: f64,
    pub delta: f64,
    pub aggregation: Aggregation,
    pub insertion_layer: usize,
    pub per_layer: Vec<f64>,
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn detect(profile: &DivergenceProfile, delta: f64, aggregation: Aggregation) -> Result<DetectionVerdict> {
    let d = &profile.per_layer;
    if d.is_empty() {
        return Err(Error::Empty("divergence profile"));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {delta}")));
    }
    let statistic = match aggregation.tail_len(d.len()) {
        None => d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Some(k) if k > d.len() => {
            return Err(Error::InvalidArgument(format!("tail_sum({k}) over {} layers", d.len())));
        }
        Some(k) => d[d.len() - k..].iter().sum(),
    };
    Ok(DetectionVerdict {
        hallucination: statistic > delta,
        statistic,
        delta,
        aggregation,
        insertion_layer: argmax(d).expect("non-empty"),
        per_layer: d.clone(),
    })
}

/// Lowercased words with surrounding punctuation removed; a possessive
/// `'s` becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let w = w.trim_matches('\'').to_lowercase();
        if w.is_empty() {
            continue;
        }
        match w.strip_suffix("'s").or_else(|| w.strip_suffix("’s")) {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push("'s".to_string());
            }
            _ => out.push(w),
        }
    }
    out
}

/// Deterministic paraphrase rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantRule {
    /// `wh aux X… verb` → `X… aux verb wh`, e.g. "where was X born" →
    /// "X was born where".
    #[default]
    Cleft,
}

const WH_WORDS: [&str; 7] = ["where", "when", "who", "what", "which", "why", "how"];
const AUXILIARIES: [&str; 12] = ["was", "is", "were", "are", "did", "does", "do", "has", "have", "had", "will", "can"];

pub fn make_variant<S: AsRef<str>>(query: &[S], rule: VariantRule) -> Result<Vec<String>> {
    let q: Vec<&str> = query.iter().map(AsRef::as_ref).collect();
    match rule {
        VariantRule::Cleft => {
            let applicable = q.len() >= 4
                && WH_WORDS.contains(&q[0])
                && AUXILIARIES.contains(&q[1])
                && !WH_WORDS.contains(&q[q.len() - 1])
                && !AUXILIARIES.contains(&q[q.len() - 1]);
            if !applicable {
                return Err(Error::VariantUnavailable(format!(
                    "cleft rule needs `wh aux subject… verb`, got {:?}",
                    q.join(" ")
                )));
            }
            let n = q.len();
            let mut v: Vec<String> = q[2..n - 1].iter().map(|s| s.to_string()).collect();
            v.push(q[1].to_string());
            v.push(q[n - 1].to_string());
            v.push(q[0].to_string());
            Ok(v)
        }
    }
}

/// Paraphrase pairs must tokenize to the same length.
pub fn validate_variant_pair<A: AsRef<str>, B: AsRef<str>>(question: &[A], variant: &[B]) -> Result<()> {
    if question.is_empty() {
        return Err(Error::Empty("question"));
    }
    if question.len() != variant.len() {
        return Err(Error::shape(
            "variant pair",
            format!("question has {} tokens, variant {}", question.len(), variant.len()),
        ));
    }
    Ok(())
}
