//! Run configuration shared by every batch command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{PipelineSettings, RetrievalPolicy, SweepSettings};
use crate::detect::{Aggregation, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::filter::{Rescale, DEFAULT_LAMBDA};
use crate::par::ExecMode;
use crate::training::Hyperparams;

pub const DEFAULT_TOP_T: usize = 10;
pub const DEFAULT_D_FF: usize = 128;
/// Offset between the run seed and the generated training corpus seed.
pub const TRAIN_SEED_OFFSET: u64 = 1000;

/// Every knob of a run. Missing JSON fields take the defaults below;
/// unknown fields are rejected. Paths left unset fall back to the planted
/// fixture model, a freshly initialised fusion module and the generated
/// conflict corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_checkpoint: Option<PathBuf>,
    pub dssp_checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Training corpus; generated with seed `TRAIN_SEED_OFFSET + seed`
    /// when unset.
    pub train_dataset: Option<PathBuf>,
    pub delta: f64,
    pub aggregation: Aggregation,
    pub lambda: f64,
    pub top_t: usize,
    pub rescale: Rescale,
    pub mu: f64,
    pub nu: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub policy: RetrievalPolicy,
    pub filter: bool,
    pub max_new_tokens: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub train_host: bool,
    pub d_ff: usize,
    pub n_records: usize,
    pub noise_rate: f64,
    pub dataset_seed: u64,
    pub sweep_samples: usize,
    pub sweep_temperature: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        let sweep = SweepSettings::default();
        RunConfig {
            model_checkpoint: None,
            dssp_checkpoint: None,
            dataset: None,
            train_dataset: None,
            delta: DEFAULT_DELTA,
            aggregation: Aggregation::TailSum,
            lambda: DEFAULT_LAMBDA,
            top_t: DEFAULT_TOP_T,
            rescale: Rescale::None,
            mu: hp.mu,
            nu: hp.nu,
            seed: hp.seed,
            output_dir: PathBuf::from("out"),
            policy: RetrievalPolicy::Adaptive,
            filter: true,
            max_new_tokens: 1,
            lr: hp.lr,
            epochs: hp.epochs,
            warmup_ratio: hp.warmup_ratio,
            batch_size: hp.batch_size,
            train_host: hp.train_host,
            d_ff: DEFAULT_D_FF,
            n_records: 64,
            noise_rate: 0.5,
            dataset_seed: 7,
            sweep_samples: sweep.n_samples,
            sweep_temperature: sweep.temperature,
            parallel: true,
        }
    }
}

impl RunConfig {
    /// Settings tuned to the planted fixture: sharper Energy Quotient
    /// weighting, length-rescaled filtered states and a learning rate sized
    /// for a six-layer host.
    pub fn fixture() -> Self {
        RunConfig {
            lambda: 40.0,
            rescale: Rescale::SeqLen,
            lr: 0.01,
            ..RunConfig::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Range checks plus existence of every referenced input path.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: String| Err(Error::InvalidArgument(format!("{what} = {v}")));
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad("delta", self.delta.to_string());
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad("lambda", self.lambda.to_string());
        }
        if self.top_t == 0 {
            return bad("top_t", "0".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff", "0".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens", "0".into());
        }
        if self.n_records == 0 {
            return bad("n_records", "0".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate", self.noise_rate.to_string());
        }
        if self.sweep_samples == 0 {
            return bad("sweep_samples", "0".into());
        }
        if !(self.sweep_temperature.is_finite() && self.sweep_temperature > 0.0) {
            return bad("sweep_temperature", self.sweep_temperature.to_string());
        }
        self.hyperparams().validate()?;
        for p in [&self.model_checkpoint, &self.dssp_checkpoint, &self.dataset, &self.train_dataset].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            delta: self.delta,
            aggregation: self.aggregation,
            lambda: self.lambda,
            rescale: self.rescale,
            policy: self.policy,
            filter: self.filter,
            max_new_tokens: self.max_new_tokens,
            mode: self.mode(),
        }
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings { n_samples: self.sweep_samples, temperature: self.sweep_temperature }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            mu: self.mu,
            nu: self.nu,
            lr: self.lr,
            epochs: self.epochs,
            warmup_ratio: self.warmup_ratio,
            batch_size: self.batch_size,
            seed: self.seed,
            train_host: self.train_host,
        }
    }
}
