//! Seeded sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForwardOptions, Model};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub n_samples: usize,
    /// `0` decodes greedily.
    pub temperature: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub max_new_tokens: usize,
    /// Generation of a sample stops after emitting this token.
    #[serde(default)]
    pub stop_token: Option<usize>,
}

fn one() -> usize {
    1
}

impl GenerateSpec {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerateSpec {
            n_samples: 1,
            temperature: 0.0,
            seed: 0,
            max_new_tokens,
            stop_token: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Picks a token from `logits`: argmax (lowest index on ties) at
/// temperature 0, otherwise inverse-CDF sampling of `softmax(logits / T)`
/// with one uniform draw.
pub(crate) fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

impl Model {
    /// Samples `spec.n_samples` continuations of `prompt`. Sample `k` draws
    /// from its own ChaCha stream, so results do not depend on how many
    /// samples are requested alongside it.
    pub fn generate(&self, prompt: &[usize], spec: &GenerateSpec, opts: &ForwardOptions<'_>) -> Result<Vec<Vec<usize>>> {
        spec.validate()?;
        let first = self.forward(prompt, opts)?;
        let first_logits = first.last_logits().to_vec();
        let mut out = Vec::with_capacity(spec.n_samples);
        for k in 0..spec.n_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let mut seq = prompt.to_vec();
            let mut answer = Vec::new();
            let mut logits = first_logits.clone();
            loop {
                let tok = pick(&logits, spec.temperature, &mut rng);
                answer.push(tok);
                seq.push(tok);
                if answer.len() == spec.max_new_tokens || spec.stop_token == Some(tok) {
                    break;
                }
                logits = self.forward(&seq, opts)?.last_logits().to_vec();
            }
            out.push(answer);
        }
        Ok(out)
    }
}
