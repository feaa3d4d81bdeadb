//! Detection, filtering and fusion chained over QA records.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::QARecord;
use crate::detect::{detect, divergence_profile, Aggregation, DetectionVerdict, DEFAULT_DELTA};
use crate::divergence::NormalizedMatch;
use crate::dssp::DsspParams;
use crate::error::{Error, Result};
use crate::filter::{pruning_sweep, FilterCalibration, FilterProfile, PruningSweep, Rescale, DEFAULT_LAMBDA};
use crate::model::{DsspHook, ForwardOptions, GenerateSpec, Model};
use crate::numeric::Matrix;
use crate::par::{self, ExecMode};
use crate::training::{train, Hyperparams, TrainExample, TrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPolicy {
    /// Retrieve only when the detector flags the question.
    #[default]
    Adaptive,
    /// Retrieve for every question.
    Always,
}

/// Knobs shared by calibration, data preparation and the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub delta: f64,
    pub aggregation: Aggregation,
    pub lambda: f64,
    pub rescale: Rescale,
    pub policy: RetrievalPolicy,
    /// Apply the knowledge filter to retrieved states.
    pub filter: bool,
    pub max_new_tokens: usize,
    pub mode: ExecMode,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            delta: DEFAULT_DELTA,
            aggregation: Aggregation::TailSum,
            lambda: DEFAULT_LAMBDA,
            rescale: Rescale::None,
            policy: RetrievalPolicy::Adaptive,
            filter: true,
            max_new_tokens: 1,
            mode: ExecMode::Parallel,
        }
    }
}

/// Per-checkpoint measurements reused by every query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub filter: FilterCalibration,
    /// Layer the fusion module is trained at.
    pub insertion_layer: usize,
    pub sweep: PruningSweep,
}

/// Sampling used by the pruning sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub n_samples: usize,
    pub temperature: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings { n_samples: 32, temperature: 1.0 }
    }
}

fn variant_of(record: &QARecord) -> Result<&[usize]> {
    record
        .variant
        .as_deref()
        .ok_or_else(|| Error::VariantUnavailable(format!("record {} has no variant and token records cannot be rephrased", record.id)))
}

pub fn detect_record(model: &Model, record: &QARecord, s: &PipelineSettings) -> Result<DetectionVerdict> {
    let variant = variant_of(record)?;
    let x = model.layer_distributions(&record.question)?;
    let xhat = model.layer_distributions(variant)?;
    detect(&divergence_profile(&x, &xhat)?, s.delta, s.aggregation)
}

/// Pruning sweep over the records' document prompts, plus the most common
/// insertion layer among their verdicts (lowest on ties).
pub fn calibrate(
    model: &Model,
    records: &[QARecord],
    sweep: &SweepSettings,
    seed: u64,
    s: &PipelineSettings,
) -> Result<Calibration> {
    let with_docs: Vec<&QARecord> = records.iter().filter(|r| !r.documents.is_empty()).collect();
    if with_docs.is_empty() {
        return Err(Error::Empty("records with documents"));
    }
    let queries: Vec<Vec<usize>> = with_docs.iter().map(|r| r.prompt_with_documents().0).collect();
    let spec = GenerateSpec {
        n_samples: sweep.n_samples,
        temperature: sweep.temperature,
        seed,
        max_new_tokens: 1,
        stop_token: None,
    };
    let sweep = pruning_sweep(model, &queries, &spec, &NormalizedMatch, s.mode)?;
    let filter = FilterCalibration::from_sweep(&sweep)?;
    let layers = par::try_map_indices(s.mode, with_docs.len(), |i| Ok(detect_record(model, with_docs[i], s)?.insertion_layer))?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in layers {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max().expect("non-empty");
    let insertion_layer = counts.iter().find(|(_, &c)| c == top).map(|(&l, _)| l).expect("non-empty");
    Ok(Calibration { filter, insertion_layer, sweep })
}

/// Hidden states of the document span at the input of `layer`, filtered
/// when `s.filter` is set.
pub fn external_states(
    model: &Model,
    record: &QARecord,
    layer: usize,
    calib: &FilterCalibration,
    s: &PipelineSettings,
) -> Result<(Matrix, Option<FilterProfile>)> {
    let (prompt, span) = record.prompt_with_documents();
    if span.is_empty() {
        return Err(Error::Empty("documents"));
    }
    let trace = model.forward(&prompt, &ForwardOptions::default())?;
    let rows: Vec<usize> = span.clone().collect();
    let d = trace.layer_input(layer).select_rows(&rows)?;
    if !s.filter {
        return Ok((d, None));
    }
    let profile = FilterProfile::compute(&trace, calib, span, s.lambda)?;
    let filtered = profile.apply(&d, s.rescale)?;
    Ok((filtered, Some(profile)))
}

/// Question prompts paired with their first gold token and the (filtered)
/// document states at the calibrated insertion layer.
pub fn training_examples(
    model: &Model,
    records: &[QARecord],
    calib: &Calibration,
    s: &PipelineSettings,
) -> Result<Vec<TrainExample>> {
    let usable: Vec<&QARecord> = records.iter().filter(|r| !r.documents.is_empty()).collect();
    par::try_map_indices(s.mode, usable.len(), |i| {
        let r = usable[i];
        let (external, _) = external_states(model, r, calib.insertion_layer, &calib.filter, s)?;
        Ok(TrainExample {
            prompt: r.question.clone(),
            answer: r.gold[0],
            external,
        })
    })
}

/// Trains a freshly initialised fusion module (seeded by `hp.seed`) on
/// `records` at the calibrated insertion layer. Returns the host as well,
/// since `hp.train_host` lets training update it.
pub fn fit_dssp(
    model: &Model,
    records: &[QARecord],
    calib: &Calibration,
    s: &PipelineSettings,
    hp: &Hyperparams,
    d_ff: usize,
    top_t: usize,
) -> Result<(Model, DsspParams, TrainReport)> {
    let data = training_examples(model, records, calib, s)?;
    let mut params = DsspParams::init(model.config.d_model, d_ff, top_t, hp.seed)?;
    let mut host = model.clone();
    let report = train(&mut host, &mut params, &data, calib.insertion_layer, hp, s.mode)?;
    Ok((host, params, report))
}

/// What happened to retrieved knowledge for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    /// No retrieval took place.
    Skipped,
    /// Retrieval without the knowledge filter.
    Unfiltered,
    Applied(FilterProfile),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_ms: f64,
    pub filter_ms: f64,
    pub generate_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub id: String,
    pub verdict: DetectionVerdict,
    pub retrieved: bool,
    pub filter: FilterStage,
    pub answer: Vec<usize>,
    /// Wall-clock measurements; not serialised so traces stay reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

/// A loaded host, fusion module and calibration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: Model,
    pub dssp: Option<DsspParams>,
    pub calibration: Calibration,
    pub settings: PipelineSettings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    /// Detect; when the question is flagged (or retrieval is forced),
    /// filter the document states and answer through the fusion module at
    /// the insertion layer; otherwise answer from the question alone.
    pub fn run(&self, record: &QARecord) -> Result<PipelineTrace> {
        record.validate()?;
        let s = &self.settings;
        let t = Instant::now();
        let verdict = detect_record(&self.model, record, s)?;
        let detect_ms = ms(t);

        let retrieve = (verdict.hallucination || s.policy == RetrievalPolicy::Always) && !record.documents.is_empty();
        let spec = GenerateSpec::greedy(s.max_new_tokens);
        let t = Instant::now();
        let (filter, external, layer) = if retrieve {
            let layer = if verdict.hallucination {
                verdict.insertion_layer
            } else {
                self.calibration.insertion_layer
            };
            let (d, profile) = external_states(&self.model, record, layer, &self.calibration.filter, s)?;
            let stage = profile.map_or(FilterStage::Unfiltered, FilterStage::Applied);
            (stage, Some(d), layer)
        } else {
            (FilterStage::Skipped, None, 0)
        };
        let filter_ms = ms(t);

        let t = Instant::now();
        let answer = match &external {
            Some(d) => {
                let params = self
                    .dssp
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("retrieval needs a dssp checkpoint".into()))?;
                let opts = ForwardOptions {
                    skip_layers: Default::default(),
                    dssp_hook: Some(DsspHook { layer, params, external: d }),
                };
                self.model.generate(&record.question, &spec, &opts)?
            }
            None => self.model.generate(&record.question, &spec, &ForwardOptions::default())?,
        };
        let generate_ms = ms(t);
        Ok(PipelineTrace {
            id: record.id.clone(),
            verdict,
            retrieved: retrieve,
            filter,
            answer: answer.into_iter().next().expect("one sample"),
            timings: StageTimings { detect_ms, filter_ms, generate_ms },
        })
    }

    /// Runs every record; output order matches input order.
    pub fn run_all(&self, records: &[QARecord]) -> Result<Vec<PipelineTrace>> {
        par::try_map_indices(self.settings.mode, records.len(), |i| self.run(&records[i]))
    }
}

pub fn pipeline_run(record: &QARecord, pipeline: &Pipeline) -> Result<PipelineTrace> {
    pipeline.run(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    /// Exact match of the generated tokens against the gold prefix of the
    /// same length.
    pub answer_token_accuracy: f64,
    pub detection_rate: f64,
    pub retrieval_rate: f64,
    pub mean_stage_times: StageTimings,
}

pub fn evaluate(traces: &[PipelineTrace], records: &[QARecord]) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::Empty("traces"));
    }
    if traces.len() != records.len() {
        return Err(Error::shape("evaluate", format!("{} traces for {} records", traces.len(), records.len())));
    }
    if let Some((t, r)) = traces.iter().zip(records).find(|(t, r)| t.id != r.id) {
        return Err(Error::InvalidArgument(format!("trace {} aligned with record {}", t.id, r.id)));
    }
    let n = traces.len() as f64;
    let rate = |f: &dyn Fn(&PipelineTrace, &QARecord) -> bool| {
        traces.iter().zip(records).filter(|(t, r)| f(t, r)).count() as f64 / n
    };
    let mut times = StageTimings::default();
    for t in traces {
        times.detect_ms += t.timings.detect_ms / n;
        times.filter_ms += t.timings.filter_ms / n;
        times.generate_ms += t.timings.generate_ms / n;
    }
    Ok(EvalReport {
        n_records: traces.len(),
        answer_token_accuracy: rate(&|t, r| !t.answer.is_empty() && r.gold.starts_with(&t.answer)),
        detection_rate: rate(&|t, _| t.verdict.hallucination),
        retrieval_rate: rate(&|t, _| t.retrieved),
        mean_stage_times: times,
    })
}

/// The span of `record`'s documents inside its document prompt.
pub fn document_span(record: &QARecord) -> Range<usize> {
    record.prompt_with_documents().1
}
