//! Loss terms, natural log throughout.

use serde::{Deserialize, Serialize};

use crate::divergence::ProbVector;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn same_len(op: &'static str, a: &ProbVector, b: &ProbVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `−Σ p_base · ln p_aug`, the cross-entropy of the augmented prediction
/// under the base prediction.
pub fn conditional_entropy_term(p_base: &ProbVector, p_aug: &ProbVector) -> Result<f64> {
    same_len("conditional_entropy_term", p_base, p_aug)?;
    Ok(-p_base
        .probs()
        .iter()
        .zip(p_aug.probs())
        .map(|(b, a)| b * a.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `Σ p_aug · ln(p_aug / p_base)`.
pub fn kl_term(p_aug: &ProbVector, p_base: &ProbVector) -> Result<f64> {
    same_len("kl_term", p_aug, p_base)?;
    Ok(p_aug
        .probs()
        .iter()
        .zip(p_base.probs())
        .map(|(a, b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum())
}

pub fn total_loss(ce: f64, h: f64, kl: f64, mu: f64, nu: f64) -> f64 {
    ce + mu * h + nu * kl
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub h: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub h: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape<'_>) -> LossParts {
        let v = |x: Var| tape.value(x).get(0, 0);
        LossParts {
            ce: v(self.ce),
            h: v(self.h),
            kl: v(self.kl),
            total: v(self.total),
        }
    }
}

/// Records the objective for one answer token. `logits` is the `1 × V`
/// augmented prediction; `p_base` is the constant base prediction.
pub fn loss_on(tape: &mut Tape<'_>, logits: Var, p_base: &ProbVector, gold: usize, mu: f64, nu: f64) -> Result<LossVars> {
    let (rows, v) = tape.shape(logits);
    if rows != 1 || v != p_base.len() {
        return Err(Error::shape("loss", format!("logits {:?} for {} base probabilities", (rows, v), p_base.len())));
    }
    if gold >= v {
        return Err(Error::OutOfVocab { token: gold, vocab: v });
    }
    let log_p = tape.log_softmax_rows(logits);
    let gold_lp = tape.element(log_p, 0, gold)?;
    let ce = tape.scale(gold_lp, -1.0);

    let p = tape.softmax_rows(logits, 1.0, None)?;
    let ln_p = tape.ln_clamped(p, PROB_FLOOR);
    let base = tape.constant_owned(Matrix::row_vector(p_base.probs().to_vec())?);
    let weighted = tape.mul(base, ln_p)?;
    let neg_h = tape.sum(weighted);
    let h = tape.scale(neg_h, -1.0);

    let ln_base = tape.constant_owned(Matrix::row_vector(
        p_base.probs().iter().map(|b| b.max(PROB_FLOOR).ln()).collect(),
    )?);
    let ratio = tape.sub(ln_p, ln_base)?;
    let kl_terms = tape.mul(p, ratio)?;
    let kl = tape.sum(kl_terms);

    let mh = tape.scale(h, mu);
    let nk = tape.scale(kl, nu);
    let t = tape.add(ce, mh)?;
    let total = tape.add(t, nk)?;
    Ok(LossVars { ce, h, kl, total })
}
