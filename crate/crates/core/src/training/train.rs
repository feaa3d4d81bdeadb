//! Gradient descent on the fusion module with a frozen host.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{loss_on, LossParts};
use crate::divergence::ProbVector;
use crate::dssp::DsspParams;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, TapeHook};
use crate::numeric::{DType, Matrix, Tape};
use crate::par::{self, ExecMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub mu: f64,
    pub nu: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Fraction of all steps spent on the linear warmup.
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also update block weights and the final norm.
    #[serde(default)]
    pub train_host: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            mu: 0.55,
            nu: 0.1,
            lr: 4e-5,
            epochs: 7,
            warmup_ratio: 0.1,
            batch_size: 8,
            seed: 0,
            train_host: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.mu.is_finite() && self.mu >= 0.0) || !(self.nu.is_finite() && self.nu >= 0.0) {
            return bad(format!("mu and nu must be finite and non-negative, got {} and {}", self.mu, self.nu));
        }
        // A zero rate is allowed: it is the no-op run.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` with linear warmup.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_ratio * total as f64).ceil() as usize;
        if warm == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

/// One answer token to predict from a question prompt, with the filtered
/// external states fed to the module.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub prompt: Vec<usize>,
    pub answer: usize,
    pub external: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub h: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    /// sha256 of the trained module serialised as f32.
    pub checkpoint_id: String,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_json_lines(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("plain record") + "\n")
            .collect()
    }
}

pub fn checkpoint_id(params: &DsspParams) -> Result<String> {
    let bytes = params.to_tensor_file(DType::F32).to_bytes()?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn base_distribution(model: &Model, prompt: &[usize]) -> Result<ProbVector> {
    let trace = model.forward(prompt, &ForwardOptions::default())?;
    model.next_token_distribution(&trace)
}

struct ItemGrad {
    parts: LossParts,
    grads: Vec<Matrix>,
}

fn item_gradient(
    model: &Model,
    params: &DsspParams,
    ex: &TrainExample,
    p_base: &ProbVector,
    layer: usize,
    hp: &Hyperparams,
    with_grads: bool,
) -> Result<ItemGrad> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, with_grads);
    let external = tape.constant(&ex.external);
    let hook = TapeHook { layer, params: vars, external };
    let out = model.forward_on(&mut tape, &ex.prompt, &BTreeSet::new(), Some(hook), with_grads && hp.train_host)?;
    let last = ex.prompt.len() - 1;
    let logits = tape.gather_rows(out.logits, &[last])?;
    let loss = loss_on(&mut tape, logits, p_base, ex.answer, hp.mu, hp.nu)?;
    let parts = loss.values(&tape);
    if !with_grads {
        return Ok(ItemGrad { parts, grads: Vec::new() });
    }
    let g = tape.backward(loss.total)?;
    let grads = vars
        .vars
        .iter()
        .chain(out.host_params.iter())
        .map(|&v| g.get_or_zeros(v, tape.shape(v)))
        .collect();
    Ok(ItemGrad { parts, grads })
}

fn check_data(model: &Model, params: &DsspParams, data: &[TrainExample], layer: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if layer >= model.config.n_layers {
        return Err(Error::InvalidArgument(format!("insertion layer {layer} >= n_layers {}", model.config.n_layers)));
    }
    if params.d_model() != model.config.d_model {
        return Err(Error::shape("train", format!("module width {} vs model {}", params.d_model(), model.config.d_model)));
    }
    for ex in data {
        if ex.prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if ex.external.cols() != model.config.d_model || ex.external.rows() == 0 {
            return Err(Error::shape("train", format!("external states {:?}", ex.external.shape())));
        }
    }
    Ok(())
}

/// Mean loss components over `data` without updating anything.
pub fn mean_loss(
    model: &Model,
    params: &DsspParams,
    data: &[TrainExample],
    layer: usize,
    hp: &Hyperparams,
    mode: ExecMode,
) -> Result<LossParts> {
    check_data(model, params, data, layer)?;
    let parts = par::try_map_indices(mode, data.len(), |i| {
        let p_base = base_distribution(model, &data[i].prompt)?;
        Ok(item_gradient(model, params, &data[i], &p_base, layer, hp, false)?.parts)
    })?;
    let n = parts.len() as f64;
    let mut m = LossParts { ce: 0.0, h: 0.0, kl: 0.0, total: 0.0 };
    for p in &parts {
        m.ce += p.ce / n;
        m.h += p.h / n;
        m.kl += p.kl / n;
        m.total += p.total / n;
    }
    Ok(m)
}

/// Mini-batch gradient descent with linear warmup. The base prediction of
/// each example comes from the hook-free forward of the starting host.
/// Per-example gradients are reduced in example order, so the result is
/// bit-identical across execution modes.
pub fn train(
    model: &mut Model,
    params: &mut DsspParams,
    data: &[TrainExample],
    insertion_layer: usize,
    hp: &Hyperparams,
    mode: ExecMode,
) -> Result<TrainReport> {
    hp.validate()?;
    check_data(model, params, data, insertion_layer)?;
    let started = Instant::now();
    let p_base: Vec<ProbVector> = {
        let m: &Model = model;
        par::try_map_indices(mode, data.len(), |i| base_distribution(m, &data[i].prompt))?
    };
    let per_epoch = data.len().div_ceil(hp.batch_size);
    let total_steps = per_epoch * hp.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::with_capacity(total_steps);
    let mut epoch_mean_loss = Vec::with_capacity(hp.epochs);
    let mut step = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let items = {
                let (m, p): (&Model, &DsspParams) = (model, params);
                par::try_map_indices(mode, batch.len(), |k| {
                    let i = batch[k];
                    item_gradient(m, p, &data[i], &p_base[i], insertion_layer, hp, true)
                })
                .map_err(|e| match e {
                    Error::NonFinite(_) | Error::DegenerateMask { .. } => Error::NonFiniteLoss { step },
                    e => e,
                })?
            };
            let b = batch.len() as f64;
            let mut rec = StepRecord { step, epoch, lr: hp.lr_at(step, total_steps), ce: 0.0, h: 0.0, kl: 0.0, total: 0.0 };
            let mut sum: Vec<Matrix> = items[0].grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            for it in &items {
                rec.ce += it.parts.ce / b;
                rec.h += it.parts.h / b;
                rec.kl += it.parts.kl / b;
                rec.total += it.parts.total / b;
                for (s, g) in sum.iter_mut().zip(&it.grads) {
                    s.add_assign(g);
                }
            }
            if !rec.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let scale = rec.lr / b;
            let mut targets: Vec<&mut Matrix> = params.tensors_mut().into_iter().collect();
            if hp.train_host {
                targets.extend(model.host_tensors_mut());
            }
            for (t, g) in targets.into_iter().zip(&sum) {
                for (w, d) in t.data_mut().iter_mut().zip(g.as_slice()) {
                    *w -= scale * d;
                }
            }
            epoch_sum += rec.total * b;
            steps.push(rec);
            step += 1;
        }
        epoch_mean_loss.push(epoch_sum / data.len() as f64);
    }
    Ok(TrainReport {
        steps,
        epoch_mean_loss,
        checkpoint_id: checkpoint_id(params)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
