//! Layer-pruning analysis and Energy-Quotient filtering of external
//! knowledge.
//!
//! A pruning sweep removes one layer at a time and measures how the
//! semantic entropy of sampled answers moves. The layer whose removal hurts
//! most is the key layer β, the one whose removal helps most is the offset
//! layer α. External tokens that α attends to more than β are treated as
//! noise and down-weighted by a softmax over `−λ·ΔA`, scaled by a gate ε
//! that is active only when removing α clearly lowers uncertainty.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detect::argmax;
use crate::divergence::{semantic_entropy, AnswerClusterer, ProbVector};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ForwardTrace, GenerateSpec, Model};
use crate::numeric::Matrix;
use crate::par::{self, ExecMode};

/// Entropy change (bits) below which the gate opens.
pub const GATE_THRESHOLD: f64 = -0.1;

/// Default Energy-Quotient temperature.
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningSweep {
    /// Mean semantic entropy with no layer removed.
    pub baseline: f64,
    /// Mean semantic entropy with layer `l` removed, minus the baseline.
    pub delta_entropy: Vec<f64>,
}

/// One row of the sweep for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub delta_entropy: f64,
}

impl PruningSweep {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.delta_entropy
            .iter()
            .enumerate()
            .map(|(layer, &delta_entropy)| SweepRow { layer, delta_entropy })
            .collect()
    }

    /// Mean semantic entropy with `layer` removed.
    pub fn entropy_without(&self, layer: usize) -> f64 {
        self.baseline + self.delta_entropy[layer]
    }
}

/// Answers are rendered as space-separated token ids before clustering.
pub fn render_answer(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Runs the baseline and every single-layer removal over `queries`.
///
/// Query `q` samples with seed `spec.seed + q` in every configuration, so
/// configurations are compared on common random numbers. Configurations
/// and queries are independent and are evaluated under `mode`.
pub fn pruning_sweep(
    model: &Model,
    queries: &[Vec<usize>],
    spec: &GenerateSpec,
    clusterer: &(dyn AnswerClusterer + Sync),
    mode: ExecMode,
) -> Result<PruningSweep> {
    if queries.is_empty() {
        return Err(Error::Empty("pruning sweep queries"));
    }
    let n_layers = model.config.n_layers;
    let nq = queries.len();
    // Configuration 0 is the baseline, configuration l + 1 removes layer l.
    let entropies = par::try_map_indices(mode, (n_layers + 1) * nq, |job| {
        let (config, q) = (job / nq, job % nq);
        let opts = if config == 0 {
            ForwardOptions::default()
        } else {
            ForwardOptions::skipping([config - 1])
        };
        let query_spec = GenerateSpec {
            seed: spec.seed.wrapping_add(q as u64),
            ..spec.clone()
        };
        let samples = model.generate(&queries[q], &query_spec, &opts)?;
        let rendered: Vec<String> = samples.iter().map(|s| render_answer(s)).collect();
        semantic_entropy(&rendered, clusterer)
    })?;
    let mean = |config: usize| entropies[config * nq..(config + 1) * nq].iter().sum::<f64>() / nq as f64;
    let baseline = mean(0);
    Ok(PruningSweep {
        baseline,
        delta_entropy: (1..=n_layers).map(|c| mean(c) - baseline).collect(),
    })
}

/// `(β, α)`: the layers with the largest and smallest entropy change,
/// lowest index on ties.
pub fn classify_layers(sweep: &PruningSweep) -> Result<(usize, usize)> {
    let d = &sweep.delta_entropy;
    if d.len() < 2 {
        return Err(Error::InvalidArgument(format!("classification needs at least 2 layers, got {}", d.len())));
    }
    let beta = argmax(d).expect("non-empty");
    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
    let alpha = argmax(&neg).expect("non-empty");
    if d[beta] == d[alpha] {
        return Err(Error::NoSeparableStructure);
    }
    Ok((beta, alpha))
}

/// Attention mass received by each position in `span`, averaged over heads
/// and over every query position of `layer`.
pub fn attention_token_scores(trace: &ForwardTrace, layer: usize, span: Range<usize>) -> Result<Vec<f64>> {
    if span.is_empty() {
        return Err(Error::Empty("external span"));
    }
    let heads = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} outside trace")))?;
    let seq = heads[0].cols();
    if span.end > seq {
        return Err(Error::shape("attention_token_scores", format!("span {span:?} beyond {seq} positions")));
    }
    let mut scores = vec![0.0; span.len()];
    for a in heads {
        for q in 0..a.rows() {
            for (s, &v) in scores.iter_mut().zip(&a.row(q)[span.clone()]) {
                *s += v;
            }
        }
    }
    let denom = (heads.len() * heads[0].rows()) as f64;
    Ok(scores.into_iter().map(|s| s / denom).collect())
}

/// `EQᵢ = exp(−λ ΔAᵢ) / Σⱼ exp(−λ ΔAⱼ)`.
pub fn energy_quotient(delta_a: &[f64], lambda: f64) -> Result<ProbVector> {
    if delta_a.is_empty() {
        return Err(Error::Empty("energy_quotient scores"));
    }
    if !lambda.is_finite() || delta_a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("energy_quotient"));
    }
    let logits: Vec<f64> = delta_a.iter().map(|a| -lambda * a).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    ProbVector::new(w.into_iter().map(|x| x / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub epsilon: f64,
    pub delta_h: f64,
}

impl Gate {
    pub fn is_open(&self) -> bool {
        self.delta_h < GATE_THRESHOLD
    }
}

/// `Δħ = ħ_α − ħ_orig`; `ε = ln(1 − Δħ/ħ_orig)` when `Δħ < −0.1`, else 0.
pub fn entropy_gate(h_orig: f64, h_alpha: f64) -> Result<Gate> {
    if !(h_orig > 0.0) || !h_orig.is_finite() {
        return Err(Error::InvalidArgument(format!("baseline entropy {h_orig} must be positive")));
    }
    if !h_alpha.is_finite() {
        return Err(Error::NonFinite("entropy_gate"));
    }
    let delta_h = h_alpha - h_orig;
    let epsilon = if delta_h < GATE_THRESHOLD {
        (1.0 - delta_h / h_orig).ln()
    } else {
        0.0
    };
    Ok(Gate { epsilon, delta_h })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rescale {
    #[default]
    None,
    SeqLen,
}

/// `D̂ᵢ = ε · EQᵢ · r · Dᵢ` when the gate is open (`r` is 1 or the token
/// count), otherwise `D` unchanged.
pub fn filter_knowledge(d: &Matrix, eq: &ProbVector, epsilon: f64, delta_h: f64, rescale: Rescale) -> Result<Matrix> {
    if eq.len() != d.rows() {
        return Err(Error::shape(
            "filter_knowledge",
            format!("{} weights for {} tokens", eq.len(), d.rows()),
        ));
    }
    if delta_h >= GATE_THRESHOLD {
        return Ok(d.clone());
    }
    let r = match rescale {
        Rescale::None => 1.0,
        Rescale::SeqLen => d.rows() as f64,
    };
    let mut out = d.clone();
    for (i, &w) in eq.probs().iter().enumerate() {
        let k = epsilon * w * r;
        for v in out.data_mut()[i * d.cols()..(i + 1) * d.cols()].iter_mut() {
            *v *= k;
        }
    }
    Ok(out)
}

/// Layer roles and the gate inputs measured once per checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCalibration {
    pub key_layer: usize,
    pub offset_layer: usize,
    pub h_orig: f64,
    pub h_alpha: f64,
}

impl FilterCalibration {
    pub fn from_sweep(sweep: &PruningSweep) -> Result<Self> {
        let (key_layer, offset_layer) = classify_layers(sweep)?;
        Ok(FilterCalibration {
            key_layer,
            offset_layer,
            h_orig: sweep.baseline,
            h_alpha: sweep.entropy_without(offset_layer),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterProfile {
    pub key_layer: usize,
    pub offset_layer: usize,
    pub delta_a: Vec<f64>,
    pub eq: ProbVector,
    pub epsilon: f64,
    pub delta_h: f64,
}

impl FilterProfile {
    /// Scores the external `span` of `trace` under `calib`.
    pub fn compute(trace: &ForwardTrace, calib: &FilterCalibration, span: Range<usize>, lambda: f64) -> Result<Self> {
        if calib.key_layer == calib.offset_layer {
            return Err(Error::NoSeparableStructure);
        }
        let a_alpha = attention_token_scores(trace, calib.offset_layer, span.clone())?;
        let a_beta = attention_token_scores(trace, calib.key_layer, span)?;
        let delta_a: Vec<f64> = a_alpha.iter().zip(&a_beta).map(|(a, b)| a - b).collect();
        let eq = energy_quotient(&delta_a, lambda)?;
        let gate = entropy_gate(calib.h_orig, calib.h_alpha)?;
        Ok(FilterProfile {
            key_layer: calib.key_layer,
            offset_layer: calib.offset_layer,
            delta_a,
            eq,
            epsilon: gate.epsilon,
            delta_h: gate.delta_h,
        })
    }

    pub fn apply(&self, d: &Matrix, rescale: Rescale) -> Result<Matrix> {
        filter_knowledge(d, &self.eq, self.epsilon, self.delta_h, rescale)
    }
}
