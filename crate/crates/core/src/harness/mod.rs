//! Synthetic data, the planted fixture, and end-to-end orchestration.

mod config;
mod dataset;
mod fixture;
mod pipeline;
mod synth;
mod vocab;

pub use config::{RunConfig, DEFAULT_D_FF, DEFAULT_TOP_T, TRAIN_SEED_OFFSET};
pub use dataset::{
    dataset_checksum, make_conflict_dataset, read_jsonl, to_jsonl, write_jsonl, QARecord, DOCS_PER_RECORD,
};
pub use fixture::{fixture_config, fixture_model, FixtureKnobs, FIXTURE_KEY_LAYER, FIXTURE_LAYERS, FIXTURE_OFFSET_LAYER};
pub use pipeline::{
    calibrate, detect_record, document_span, evaluate, external_states, fit_dssp, pipeline_run, training_examples, Calibration,
    EvalReport, FilterStage, Pipeline, PipelineSettings, PipelineTrace, RetrievalPolicy, StageTimings, SweepSettings,
};
pub use synth::{decomposition_report, synth_streams, DecompositionReport, SynthDims, SyntheticDecomposition, ENERGY_FLOOR};
pub use vocab::Vocab;
pub mod tokens {
    pub use super::vocab::{BIRTHPLACE, BORN, BOS, EOS, PAD, SEP, WAS, WHERE};
}
