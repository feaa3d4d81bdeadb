use dssp_core::dssp::{differential_attention, self_attention, DsspParams, Triple};
use dssp_core::filter::classify_layers;
use dssp_core::harness::*;
use dssp_core::model::{ForwardOptions, GenerateSpec};
use dssp_core::{Error, ExecMode, Matrix};
use proptest::prelude::*;

fn dims(shared: usize, private_x: usize, private_y: usize) -> SynthDims {
    SynthDims { shared, private_x, private_y }
}

fn fixture() -> (Vocab, dssp_core::model::Model, Vec<QARecord>) {
    let v = Vocab::default();
    let m = fixture_model(&v, &FixtureKnobs::default()).unwrap();
    let records = make_conflict_dataset(64, &v, 0.5, 7).unwrap();
    (v, m, records)
}

fn settings() -> PipelineSettings {
    RunConfig::fixture().pipeline_settings()
}

fn gram_offdiag(b: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn span_residual(m: &Matrix, bases: &[&Matrix]) -> f64 {
    let all = Matrix::vstack(bases).unwrap();
    let coeffs = dssp_core::numeric::matmul(m, &all.transpose()).unwrap();
    let proj = dssp_core::numeric::matmul(&coeffs, &all).unwrap();
    m.sub(&proj).unwrap().max_abs()
}

#[test]
fn noise_free_stream_lies_in_its_planted_span() {
    let d = synth_streams(16, 5, 7, dims(3, 2, 4), 0.0, 1).unwrap();
    assert!(span_residual(&d.x, &[&d.basis_s, &d.basis_px]) < 1e-12);
    assert!(span_residual(&d.y, &[&d.basis_s, &d.basis_py]) < 1e-12);
    let r = decomposition_report(&d.x, &d).unwrap();
    assert!(r.energy_py < 1e-20);
}

#[test]
fn without_private_dims_both_streams_share_one_subspace() {
    let d = synth_streams(12, 4, 6, dims(3, 0, 0), 0.3, 2).unwrap();
    let sx = d.x.sub(&d.n_x).unwrap();
    let sy = d.y.sub(&d.n_y).unwrap();
    assert!(span_residual(&sx, &[&d.basis_s]) < 1e-12);
    assert!(span_residual(&sy, &[&d.basis_s]) < 1e-12);
}

#[test]
fn synth_streams_are_bit_identical_per_seed() {
    let a = synth_streams(16, 4, 4, dims(2, 2, 2), 0.1, 42).unwrap();
    let b = synth_streams(16, 4, 4, dims(2, 2, 2), 0.1, 42).unwrap();
    assert_eq!(a, b);
    let c = synth_streams(16, 4, 4, dims(2, 2, 2), 0.1, 43).unwrap();
    assert_ne!(a.x, c.x);
}

#[test]
fn synth_streams_rejects_bad_budgets() {
    assert!(matches!(synth_streams(8, 2, 2, dims(4, 3, 2), 0.1, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(synth_streams(8, 0, 2, dims(1, 1, 1), 0.1, 0), Err(Error::InvalidArgument(_))));
    assert!(synth_streams(8, 2, 2, dims(4, 2, 2), 0.0, 0).is_ok());
}

#[test]
fn shared_rows_carry_no_private_energy() {
    let d = synth_streams(16, 6, 6, dims(4, 4, 4), 0.1, 3).unwrap();
    let r = decomposition_report(&d.s_x, &d).unwrap();
    assert!(r.energy_px < 1e-20 && r.energy_py < 1e-20);
    assert!(r.energy_s > 0.0);
    assert_eq!(r.suppression_ratio, f64::INFINITY);
}

#[test]
fn report_rejects_width_mismatch() {
    let d = synth_streams(16, 2, 2, dims(2, 2, 2), 0.1, 0).unwrap();
    let err = decomposition_report(&Matrix::zeros(2, 8), &d).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn differential_attention_suppresses_shared_energy_on_planted_streams() {
    let eye = Matrix::identity(32);
    let t = Triple { wq: &eye, wk: &eye, wv: &eye };
    for seed in 0..10 {
        let d = synth_streams(32, 8, 8, dims(4, 4, 4), 0.1, seed).unwrap();
        let tau = self_attention(&d.x, t).unwrap();
        let u = differential_attention(&d.x, &d.y, t, t).unwrap();
        let base = decomposition_report(&tau, &d).unwrap().suppression_ratio;
        let diff = decomposition_report(&u, &d).unwrap().suppression_ratio;
        assert!(diff < base, "seed {seed}: {diff} vs {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planted_bases_are_orthonormal_and_streams_reconstruct(
        seed in any::<u64>(),
        d_model in 6usize..24,
        n_x in 1usize..6,
        n_y in 1usize..6,
        noise in 0.0f64..1.0,
    ) {
        let k = d_model / 3;
        let d = synth_streams(d_model, n_x, n_y, dims(k, k, d_model - 2 * k), noise, seed).unwrap();
        let all = Matrix::vstack(&[&d.basis_s, &d.basis_px, &d.basis_py]).unwrap();
        prop_assert!(gram_offdiag(&all) <= 1e-9);
        prop_assert_eq!(d.s_x.add(&d.p_x).unwrap().add(&d.n_x).unwrap(), d.x.clone());
        prop_assert_eq!(d.s_y.add(&d.p_y).unwrap().add(&d.n_y).unwrap(), d.y.clone());
    }

    #[test]
    fn report_energies_are_nonnegative_and_sum_to_total(
        seed in any::<u64>(),
        rows in 1usize..6,
        shared in 0usize..4,
        px in 0usize..4,
        py in 0usize..4,
    ) {
        let d = synth_streams(12, 3, 3, dims(shared, px, py), 0.2, seed).unwrap();
        let u = Matrix::from_vec(rows, 12, (0..rows * 12).map(|i| ((i as f64 + seed as f64 % 97.0) * 0.37).sin()).collect()).unwrap();
        let r = decomposition_report(&u, &d).unwrap();
        for e in [r.energy_s, r.energy_px, r.energy_py, r.energy_residual] {
            prop_assert!(e >= 0.0);
        }
        let total: f64 = u.as_slice().iter().map(|x| x * x).sum();
        prop_assert!((r.energy_s + r.energy_px + r.energy_py + r.energy_residual - total).abs() <= 1e-9);
    }
}

#[test]
fn clean_corpus_has_no_noise_masks() {
    let records = make_conflict_dataset(32, &Vocab::default(), 0.0, 5).unwrap();
    assert!(records.iter().all(|r| r.noise_mask.is_none() && !r.has_noise()));
}

#[test]
fn fully_noisy_corpus_marks_every_document() {
    let records = make_conflict_dataset(32, &Vocab::default(), 1.0, 5).unwrap();
    for r in &records {
        let mask = r.noise_mask.as_ref().unwrap();
        assert_eq!(mask.len(), r.documents.len());
        assert!(mask.iter().all(|m| m.iter().filter(|&&b| b).count() == 2));
    }
}

#[test]
fn reference_fixture_checksum_is_frozen() {
    let records = make_conflict_dataset(64, &Vocab::default(), 0.5, 7).unwrap();
    assert_eq!(records.len(), 64);
    assert_eq!(dataset_checksum(&records), REFERENCE_CHECKSUM);
}

const REFERENCE_CHECKSUM: &str = "7d90b6a83260d4c887db75d05571063b045de8e1ebb1f810b2edd0cf56210398";

#[test]
fn corpus_rejects_bad_inputs() {
    assert!(make_conflict_dataset(4, &Vocab::default(), 1.5, 0).is_err());
    assert!(Vocab::new(2, 8).is_err());
}

#[test]
fn jsonl_round_trip_and_line_numbered_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let records = make_conflict_dataset(8, &Vocab::default(), 0.5, 1).unwrap();
    write_jsonl(&path, &records).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), records);

    let mut text = to_jsonl(&records[..2]);
    text.push_str("{\"id\": \"bad\"}\n");
    std::fs::write(&path, text).unwrap();
    match read_jsonl(&path) {
        Err(Error::Format(msg)) => assert!(msg.contains("line 3"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn run_config_defaults_round_trip_and_reject_unknown_fields() {
    let cfg = RunConfig::default();
    let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let partial: RunConfig = serde_json::from_str(r#"{"lambda": 2.5, "aggregation": "max"}"#).unwrap();
    assert_eq!(partial.lambda, 2.5);
    assert_eq!(partial.top_t, DEFAULT_TOP_T);
    assert!(serde_json::from_str::<RunConfig>(r#"{"lamda": 2.5}"#).is_err());
}

#[test]
fn run_config_checks_paths_and_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let missing = RunConfig { model_checkpoint: Some(dir.path().join("nope.bin")), ..RunConfig::default() };
    std::fs::write(&path, missing.to_json().unwrap()).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::InvalidArgument(_))));
    for bad in [
        RunConfig { lambda: 0.0, ..RunConfig::default() },
        RunConfig { noise_rate: 2.0, ..RunConfig::default() },
        RunConfig { batch_size: 0, ..RunConfig::default() },
        RunConfig { top_t: 0, ..RunConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Format(_))));
}

#[test]
fn fixture_sweep_recovers_planted_layers() {
    let (_, m, records) = fixture();
    let calib = calibrate(&m, &records, &SweepSettings::default(), 0, &settings()).unwrap();
    assert_eq!(classify_layers(&calib.sweep).unwrap(), (FIXTURE_KEY_LAYER, FIXTURE_OFFSET_LAYER));
    assert_eq!(calib.insertion_layer, FIXTURE_OFFSET_LAYER);
}

fn pipeline(m: &dssp_core::model::Model, records: &[QARecord], s: PipelineSettings) -> Pipeline {
    let calibration = calibrate(m, records, &SweepSettings::default(), 0, &s).unwrap();
    Pipeline {
        model: m.clone(),
        dssp: Some(DsspParams::init(m.config.d_model, 32, DEFAULT_TOP_T, 0).unwrap()),
        calibration,
        settings: s,
    }
}

#[test]
fn identical_profiles_skip_retrieval() {
    let (_, m, records) = fixture();
    let p = pipeline(&m, &records, settings());
    let mut r = records[0].clone();
    r.variant = Some(r.question.clone());
    let trace = p.run(&r).unwrap();
    assert!(!trace.verdict.hallucination);
    assert!(!trace.retrieved);
    assert_eq!(trace.filter, FilterStage::Skipped);
    let plain = m.generate(&r.question, &GenerateSpec::greedy(1), &ForwardOptions::default()).unwrap();
    assert_eq!(trace.answer, plain[0]);
}

#[test]
fn flagged_fixture_record_carries_filter_stage() {
    let (_, m, records) = fixture();
    let p = pipeline(&m, &records, settings());
    let trace = p.run(&records[0]).unwrap();
    assert!(trace.verdict.hallucination);
    assert_eq!(trace.verdict.insertion_layer, FIXTURE_OFFSET_LAYER);
    assert!(matches!(trace.filter, FilterStage::Applied(_)));
}

#[test]
fn filter_stage_follows_the_verdict_under_adaptive_retrieval() {
    let (_, m, records) = fixture();
    let p = pipeline(&m, &records, settings());
    let traces = p.run_all(&records).unwrap();
    assert_eq!(traces.len(), 64);
    for (t, r) in traces.iter().zip(&records) {
        assert_eq!(t.id, r.id);
        assert_eq!(t.retrieved, t.verdict.hallucination);
        assert_eq!(matches!(t.filter, FilterStage::Applied(_)), t.verdict.hallucination);
        assert_eq!(t.answer.len(), 1);
    }
}

#[test]
fn pipeline_is_deterministic_across_modes() {
    let (_, m, records) = fixture();
    let seq = pipeline(&m, &records, PipelineSettings { mode: ExecMode::Sequential, ..settings() });
    let par = pipeline(&m, &records, PipelineSettings { mode: ExecMode::Parallel, ..settings() });
    let a = seq.run_all(&records[..16]).unwrap();
    let b = par.run_all(&records[..16]).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn unfiltered_retrieval_is_reported_as_such() {
    let (_, m, records) = fixture();
    let p = pipeline(&m, &records, PipelineSettings { filter: false, ..settings() });
    let trace = p.run(&records[0]).unwrap();
    assert!(trace.retrieved);
    assert_eq!(trace.filter, FilterStage::Unfiltered);
}

#[test]
fn retrieval_without_fusion_module_is_an_error() {
    let (_, m, records) = fixture();
    let mut p = pipeline(&m, &records, settings());
    p.dssp = None;
    assert!(matches!(p.run(&records[0]), Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluate_scores_exact_matches_and_rejects_bad_inputs() {
    let (_, m, records) = fixture();
    let p = pipeline(&m, &records, settings());
    let mut traces = p.run_all(&records[..4]).unwrap();
    for (t, r) in traces.iter_mut().zip(&records) {
        t.answer = r.gold.clone();
    }
    let report = evaluate(&traces, &records[..4]).unwrap();
    assert_eq!(report.answer_token_accuracy, 1.0);
    assert_eq!(report.n_records, 4);
    assert!(matches!(evaluate(&[], &[]), Err(Error::Empty(_))));
    assert!(evaluate(&traces, &records[..3]).is_err());
    assert!(evaluate(&traces, &records[1..5]).is_err());
}

#[test]
fn records_without_variant_are_rejected_by_detection() {
    let (_, m, records) = fixture();
    let mut r = records[0].clone();
    r.variant = None;
    assert!(matches!(detect_record(&m, &r, &settings()), Err(Error::VariantUnavailable(_))));
}
