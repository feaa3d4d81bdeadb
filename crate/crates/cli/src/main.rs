//! `dssp`: batch driver for detection, layer analysis, knowledge filtering,
//! fusion-module training and the end-to-end pipeline.
//!
//! Every run writes its effective configuration to `<out>/config.json` and
//! the invocation to `<out>/command.json`; running the same subcommand with
//! `--config <out>/config.json` reproduces the outputs. Wall-clock figures
//! go to `<out>/timings.json` only. Failures print one line,
//! `error[<kind>]: <message>`, on stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dssp_core::detect::divergence_profile;
use dssp_core::dssp::{differential_attention, self_attention, DsspParams, Triple};
use dssp_core::filter::classify_layers;
use dssp_core::harness::{
    calibrate, decomposition_report, detect_record, evaluate, external_states, fit_dssp, fixture_model,
    make_conflict_dataset, read_jsonl, synth_streams, write_jsonl, Calibration, DecompositionReport, FixtureKnobs,
    Pipeline, PipelineTrace, QARecord, RunConfig, SynthDims, Vocab, TRAIN_SEED_OFFSET,
};
use dssp_core::model::Model;
use dssp_core::numeric::{DType, TensorFile};
use dssp_core::training::{grid_search, mean_loss, GridSpec, Hyperparams};
use dssp_core::{Error, Matrix};

#[derive(Parser, Debug)]
#[command(name = "dssp", version, about = "Shared/private knowledge fusion on a small transformer")]
struct Cli {
    /// JSON run configuration (field names as in RunConfig).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write the planted fixture model, its reference corpus and a config.
    Fixture,
    /// Paraphrase-divergence hallucination verdict for every record.
    Detect,
    /// Layer-pruning sweep, key/offset classification and per-layer
    /// divergence curves.
    AnalyzeLayers,
    /// Energy Quotient weights and gate for every record's documents.
    Filter,
    /// Train the fusion module and write its checkpoint.
    Train,
    /// Run the pipeline with a trained fusion module and score it.
    Eval {
        /// Score an existing traces file instead of running the pipeline.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Also run with the knowledge filter flipped and report both.
        #[arg(long)]
        compare_filter: bool,
    },
    /// Planted shared/private streams: how much shared energy survives
    /// self-attention versus differential attention.
    DemoDecompose {
        #[arg(long, default_value_t = 100)]
        runs: u64,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        shared: usize,
        #[arg(long, default_value_t = 4)]
        private_x: usize,
        #[arg(long, default_value_t = 4)]
        private_y: usize,
        #[arg(long, default_value_t = 8)]
        n_x: usize,
        #[arg(long, default_value_t = 8)]
        n_y: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Search (mu, nu) over the standard grid.
    GridSearch {
        #[arg(long, value_enum, default_value_t = Objective::Training)]
        objective: Objective,
    },
    /// Detect, filter, fuse and answer every record; trains a fusion module
    /// first when no checkpoint is configured.
    Pipeline,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Objective {
    /// Held-out cross-entropy after training at each grid point.
    Training,
    /// `(mu - 0.55)^2 + (nu - 0.10)^2`, for checking the search itself.
    Planted,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(Error::Format(format!("csv: {e}")))
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        let m = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        m.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    timings: Vec<(String, f64)>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self)?;
        self.timings.push((stage.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn model(&self) -> Result<Model> {
        match &self.cfg.model_checkpoint {
            Some(p) => Ok(Model::load(p)?),
            None => Ok(fixture_model(&Vocab::default(), &FixtureKnobs::default())?),
        }
    }

    fn records(&self) -> Result<Vec<QARecord>> {
        let c = &self.cfg;
        match &c.dataset {
            Some(p) => Ok(read_jsonl(p)?),
            None => Ok(make_conflict_dataset(c.n_records, &Vocab::default(), c.noise_rate, c.dataset_seed)?),
        }
    }

    fn train_records(&self) -> Result<Vec<QARecord>> {
        let c = &self.cfg;
        match &c.train_dataset {
            Some(p) => Ok(read_jsonl(p)?),
            None => Ok(make_conflict_dataset(c.n_records, &Vocab::default(), c.noise_rate, TRAIN_SEED_OFFSET + c.seed)?),
        }
    }

    fn dssp(&self) -> Result<Option<DsspParams>> {
        match &self.cfg.dssp_checkpoint {
            Some(p) => Ok(Some(DsspParams::from_tensor_file(&TensorFile::load(p)?, self.cfg.top_t)?)),
            None => Ok(None),
        }
    }

    fn calibrate(&self, model: &Model, records: &[QARecord]) -> Result<Calibration> {
        let c = &self.cfg;
        Ok(calibrate(model, records, &c.sweep_settings(), c.seed, &c.pipeline_settings())?)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail(&CliError::Usage(first), 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, 1),
    }
}

fn fail(e: &CliError, code: u8) -> ExitCode {
    eprintln!("error[{}]: {}", e.kind(), e.message());
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        // Without a config every input falls back to the fixture, so start
        // from the settings tuned for it.
        None => RunConfig::fixture(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let mut ctx = Ctx { cfg, out, timings: Vec::new() };
    ctx.write_json("config.json", &ctx.cfg)?;
    ctx.write_json("command.json", &cli.command)?;

    match &cli.command {
        Command::Fixture => cmd_fixture(&mut ctx)?,
        Command::Detect => cmd_detect(&mut ctx)?,
        Command::AnalyzeLayers => cmd_analyze_layers(&mut ctx)?,
        Command::Filter => cmd_filter(&mut ctx)?,
        Command::Train => cmd_train(&mut ctx)?,
        Command::Eval { traces, compare_filter } => cmd_eval(&mut ctx, traces.as_deref(), *compare_filter)?,
        Command::DemoDecompose { runs, d_model, shared, private_x, private_y, n_x, n_y, noise } => {
            let dims = SynthDims { shared: *shared, private_x: *private_x, private_y: *private_y };
            cmd_demo_decompose(&mut ctx, *runs, *d_model, dims, (*n_x, *n_y), *noise)?
        }
        Command::GridSearch { objective } => cmd_grid_search(&mut ctx, *objective)?,
        Command::Pipeline => cmd_pipeline(&mut ctx)?,
    }
    let timings: serde_json::Map<String, serde_json::Value> =
        ctx.timings.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
    ctx.write_json("timings.json", &timings)?;
    Ok(())
}

fn cmd_fixture(ctx: &mut Ctx) -> Result<()> {
    let model = fixture_model(&Vocab::default(), &FixtureKnobs::default())?;
    let c = &ctx.cfg;
    let records = make_conflict_dataset(c.n_records, &Vocab::default(), c.noise_rate, c.dataset_seed)?;
    let model_path = ctx.path("model.bin");
    let data_path = ctx.path("dataset.jsonl");
    model.save(&model_path, DType::F32)?;
    write_jsonl(&data_path, &records)?;
    // Re-echo with the written inputs so the next command can load them.
    ctx.cfg.model_checkpoint = Some(model_path);
    ctx.cfg.dataset = Some(data_path);
    ctx.write_json("config.json", &ctx.cfg)?;
    println!("wrote fixture model, {} records and config to {}", records.len(), ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DetectRow<'a> {
    id: &'a str,
    verdict: dssp_core::detect::DetectionVerdict,
}

fn cmd_detect(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let records = ctx.records()?;
    let s = ctx.cfg.pipeline_settings();
    let rows = ctx.timed("detect", |_| {
        records
            .iter()
            .map(|r| Ok(DetectRow { id: &r.id, verdict: detect_record(&model, r, &s)? }))
            .collect::<Result<Vec<_>>>()
    })?;
    let flagged = rows.iter().filter(|r| r.verdict.hallucination).count();
    ctx.write_jsonl("detect.jsonl", &rows)?;
    ctx.write_json(
        "detect_summary.json",
        &serde_json::json!({ "n_records": rows.len(), "flagged": flagged, "detection_rate": flagged as f64 / rows.len().max(1) as f64 }),
    )?;
    println!("flagged {flagged} of {} records", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    delta_entropy: f64,
    role: &'static str,
}

#[derive(Serialize)]
struct DivergenceRow<'a> {
    id: &'a str,
    layer: usize,
    jsd: f64,
}

fn cmd_analyze_layers(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let records = ctx.records()?;
    let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
    let (key, offset) = classify_layers(&calib.sweep)?;
    let rows: Vec<LayerRow> = calib
        .sweep
        .rows()
        .into_iter()
        .map(|r| LayerRow {
            layer: r.layer,
            delta_entropy: r.delta_entropy,
            role: if r.layer == key {
                "key"
            } else if r.layer == offset {
                "offset"
            } else {
                ""
            },
        })
        .collect();
    ctx.write_csv("layers.csv", &rows)?;
    ctx.write_json("layers.json", &calib)?;

    let mut curves = Vec::new();
    for r in records.iter().filter(|r| r.variant.is_some()) {
        let variant = r.variant.as_deref().expect("filtered");
        let p = divergence_profile(&model.layer_distributions(&r.question)?, &model.layer_distributions(variant)?)?;
        curves.extend(p.per_layer.iter().enumerate().map(|(layer, &jsd)| DivergenceRow { id: &r.id, layer, jsd }));
    }
    ctx.write_csv("divergence.csv", &curves)?;
    println!(
        "key layer {key}, offset layer {offset}, insertion layer {} (baseline entropy {:.4})",
        calib.insertion_layer, calib.sweep.baseline
    );
    Ok(())
}

fn cmd_filter(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let records = ctx.records()?;
    let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
    let s = dssp_core::harness::PipelineSettings { filter: true, ..ctx.cfg.pipeline_settings() };
    let rows = ctx.timed("filter", |_| {
        let mut rows = Vec::new();
        for r in records.iter().filter(|r| !r.documents.is_empty()) {
            let (_, profile) = external_states(&model, r, calib.insertion_layer, &calib.filter, &s)?;
            rows.push(serde_json::json!({ "id": r.id, "profile": profile }));
        }
        Ok(rows)
    })?;
    ctx.write_jsonl("filter.jsonl", &rows)?;
    ctx.write_json("calibration.json", &calib)?;
    println!("scored documents of {} records at layer {}", rows.len(), calib.insertion_layer);
    Ok(())
}

fn train_module(ctx: &mut Ctx, model: &Model, calib: &Calibration) -> Result<(Model, DsspParams)> {
    let train_set = ctx.train_records()?;
    let c = ctx.cfg.clone();
    let (host, params, report) = ctx.timed("train", |_| {
        Ok(fit_dssp(model, &train_set, calib, &c.pipeline_settings(), &c.hyperparams(), c.d_ff, c.top_t)?)
    })?;
    // The module is kept in f64 so evaluation from the checkpoint matches
    // evaluation straight after training.
    params.to_tensor_file(DType::F64).save(ctx.path("dssp.bin"))?;
    if c.train_host {
        host.save(ctx.path("host.bin"), DType::F64)?;
    }
    ctx.write_csv("loss.csv", &report.steps)?;
    ctx.write_json(
        "train_report.json",
        &serde_json::json!({
            "epoch_mean_loss": report.epoch_mean_loss,
            "checkpoint_id": report.checkpoint_id,
            "insertion_layer": calib.insertion_layer,
            "n_steps": report.steps.len(),
        }),
    )?;
    ctx.timings.push(("train_wall_time".into(), report.wall_time_s));
    let l = &report.epoch_mean_loss;
    println!(
        "trained {} epochs: mean loss {:.4} -> {:.4}; checkpoint {}",
        l.len(),
        l[0],
        l[l.len() - 1],
        report.checkpoint_id
    );
    Ok((host, params))
}

fn cmd_train(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let records = ctx.records()?;
    let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
    ctx.write_json("calibration.json", &calib)?;
    train_module(ctx, &model, &calib)?;
    Ok(())
}

fn run_pipeline(ctx: &mut Ctx, pipe: &Pipeline, records: &[QARecord], name: &str) -> Result<Vec<PipelineTrace>> {
    let traces = ctx.timed(name, |_| Ok(pipe.run_all(records)?))?;
    ctx.write_jsonl(&format!("{name}.jsonl"), &traces)?;
    Ok(traces)
}

fn scored(ctx: &Ctx, traces: &[PipelineTrace], records: &[QARecord], name: &str) -> Result<f64> {
    let report = evaluate(traces, records)?;
    ctx.write_json(&format!("{name}.json"), &serde_json::json!({
        "n_records": report.n_records,
        "answer_token_accuracy": report.answer_token_accuracy,
        "detection_rate": report.detection_rate,
        "retrieval_rate": report.retrieval_rate,
    }))?;
    Ok(report.answer_token_accuracy)
}

fn cmd_eval(ctx: &mut Ctx, traces: Option<&Path>, compare_filter: bool) -> Result<()> {
    let records = ctx.records()?;
    if let Some(path) = traces {
        let text = fs::read_to_string(path)?;
        let traces = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<PipelineTrace>(l)
                    .map_err(|e| CliError::Core(Error::Format(format!("traces line {}: {e}", i + 1))))
            })
            .collect::<Result<Vec<_>>>()?;
        let acc = scored(ctx, &traces, &records, "eval")?;
        println!("answer-token accuracy {acc:.4} over {} records", traces.len());
        return Ok(());
    }
    let model = ctx.model()?;
    let dssp = ctx
        .dssp()?
        .ok_or_else(|| CliError::Usage("eval needs dssp_checkpoint in the config (run `dssp train` first)".into()))?;
    let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
    let mut pipe = Pipeline { model, dssp: Some(dssp), calibration: calib, settings: ctx.cfg.pipeline_settings() };
    let traces = run_pipeline(ctx, &pipe, &records, "traces")?;
    let acc = scored(ctx, &traces, &records, "eval")?;
    println!("answer-token accuracy {acc:.4} (filter {})", if pipe.settings.filter { "on" } else { "off" });
    if compare_filter {
        pipe.settings.filter = !pipe.settings.filter;
        let flipped = run_pipeline(ctx, &pipe, &records, "traces_flipped")?;
        let acc2 = scored(ctx, &flipped, &records, "eval_flipped")?;
        let (on, off) = if pipe.settings.filter { (acc2, acc) } else { (acc, acc2) };
        ctx.write_json(
            "filter_comparison.json",
            &serde_json::json!({ "filter_on": on, "filter_off": off, "delta": on - off }),
        )?;
        println!("filter on {on:.4}, off {off:.4}, delta {:+.4}", on - off);
    }
    Ok(())
}

#[derive(Serialize)]
struct DecomposeRow {
    seed: u64,
    tau_energy_s: f64,
    tau_energy_px: f64,
    tau_ratio: f64,
    private_energy_s: f64,
    private_energy_px: f64,
    private_ratio: f64,
    suppressed: bool,
}

fn cmd_demo_decompose(ctx: &mut Ctx, runs: u64, d_model: usize, dims: SynthDims, n: (usize, usize), noise: f64) -> Result<()> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let eye = Matrix::identity(d_model);
    let t = Triple { wq: &eye, wk: &eye, wv: &eye };
    let base_seed = ctx.cfg.seed;
    let rows = ctx.timed("decompose", |_| {
        (0..runs)
            .map(|i| {
                let seed = base_seed + i;
                let d = synth_streams(d_model, n.0, n.1, dims, noise, seed)?;
                let tau: DecompositionReport = decomposition_report(&self_attention(&d.x, t)?, &d)?;
                let private = decomposition_report(&differential_attention(&d.x, &d.y, t, t)?, &d)?;
                Ok(DecomposeRow {
                    seed,
                    tau_energy_s: tau.energy_s,
                    tau_energy_px: tau.energy_px,
                    tau_ratio: tau.suppression_ratio,
                    private_energy_s: private.energy_s,
                    private_energy_px: private.energy_px,
                    private_ratio: private.suppression_ratio,
                    suppressed: private.suppression_ratio < tau.suppression_ratio,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let wins = rows.iter().filter(|r| r.suppressed).count();
    ctx.write_csv("decompose.csv", &rows)?;
    ctx.write_json("decompose_summary.json", &serde_json::json!({ "runs": runs, "suppressed": wins }))?;
    println!("differential attention lowered the shared/private energy ratio on {wins} of {runs} runs");
    Ok(())
}

fn cmd_grid_search(ctx: &mut Ctx, objective: Objective) -> Result<()> {
    let spec = GridSpec::default();
    let mode = ctx.cfg.mode();
    let result = match objective {
        Objective::Planted => ctx.timed("grid", |_| {
            Ok(grid_search(&spec, |mu, nu| Ok((mu - 0.55).powi(2) + (nu - 0.10).powi(2)), mode)?)
        })?,
        Objective::Training => {
            let model = ctx.model()?;
            let records = ctx.records()?;
            let train_set = ctx.train_records()?;
            let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
            let c = ctx.cfg.clone();
            let s = c.pipeline_settings();
            let held_out = dssp_core::harness::training_examples(&model, &records, &calib, &s)?;
            ctx.timed("grid", |_| {
                Ok(grid_search(
                    &spec,
                    |mu, nu| {
                        let hp = Hyperparams { mu, nu, ..c.hyperparams() };
                        let (host, params, _) = fit_dssp(&model, &train_set, &calib, &s, &hp, c.d_ff, c.top_t)?;
                        Ok(mean_loss(&host, &params, &held_out, calib.insertion_layer, &hp, mode)?.ce)
                    },
                    mode,
                )?)
            })?
        }
    };
    ctx.write_csv("grid.csv", &result.table)?;
    ctx.write_json("grid.json", &result)?;
    println!(
        "best mu {:.2}, nu {:.2}, objective {:.6} ({} of {} points missing)",
        result.best_mu,
        result.best_nu,
        result.best_objective,
        result.missing,
        result.table.len()
    );
    Ok(())
}

fn cmd_pipeline(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let records = ctx.records()?;
    let calib = ctx.timed("sweep", |c| c.calibrate(&model, &records))?;
    ctx.write_json("calibration.json", &calib)?;
    let (host, dssp) = match ctx.dssp()? {
        Some(p) => (model, p),
        None => train_module(ctx, &model, &calib)?,
    };
    let pipe = Pipeline { model: host, dssp: Some(dssp), calibration: calib, settings: ctx.cfg.pipeline_settings() };
    let traces = run_pipeline(ctx, &pipe, &records, "traces")?;
    let acc = scored(ctx, &traces, &records, "eval")?;
    let flagged = traces.iter().filter(|t| t.verdict.hallucination).count();
    println!("{} traces, {flagged} flagged, answer-token accuracy {acc:.4}", traces.len());
    Ok(())
}
