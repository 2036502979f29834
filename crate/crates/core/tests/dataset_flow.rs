//! Synthetic records through CoT generation, dataset files, SFT export and
//! evaluation.

use cotcanvas::backends::mock::{FixedJudge, MeanPoolEmbedder, MockMllm};
use cotcanvas::backends::scene::SceneLayout;
use cotcanvas::cotparse::parse_cot;
use cotcanvas::datagen::*;
use cotcanvas::evalx::{emit_report, evaluate, read_eval_corpus, ReportFormat};
use cotcanvas::ClauseLexicon;

fn entries(n: usize) -> Vec<DatasetEntry> {
    let records = synthesize_records(n, 77, SceneLayout::default(), ClauseLexicon::builtin()).unwrap();
    records
        .iter()
        .map(|r| {
            let cot = generate_cot_for_record(r, &MockMllm::default()).unwrap();
            let sample = assemble_sample(r.source.clone(), &r.instruction, r.mask.clone(), r.target.clone(), cot).unwrap();
            DatasetEntry { edited: Some(r.target.clone()), turns: r.turns.clone(), sample }
        })
        .collect()
}

#[test]
fn write_read_sft_and_evaluate() {
    let es = entries(6);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&es, dir.path(), "synthetic", Some(7)).unwrap();
    assert_eq!((manifest.count, manifest.attempted, manifest.retained), (6, 7, 6));

    let (back, m2) = read_dataset(dir.path()).unwrap();
    assert_eq!(back, es);
    assert_eq!(m2, manifest);

    let sft = dir.path().join("sft.jsonl");
    assert_eq!(write_sft(&back, &sft).unwrap(), 6);
    for (line, e) in read_sft(&sft).unwrap().iter().zip(&es) {
        assert_eq!(line.sample_id, e.sample.sample_id);
        let d = format_sft(&e.sample).unwrap();
        assert_eq!(parse_cot(&d.assistant_turn).unwrap().steps, e.sample.cot.steps);
    }

    let corpus = read_eval_corpus(dir.path()).unwrap();
    let report = evaluate(&corpus, "mock", &MeanPoolEmbedder, &FixedJudge::default(), 0, 3);
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    assert_eq!(report.aggregate.n, 6);
    // targets came from the mask-confined pipeline
    assert_eq!(report.aggregate.fidelity, Some(1.0));
    let md = emit_report(&[report], ReportFormat::Markdown);
    assert!(md.contains("| mock | "));
}

#[test]
fn corpus_without_edited_images_is_rejected() {
    let mut es = entries(1);
    es[0].edited = None;
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&es, dir.path(), "synthetic", None).unwrap();
    assert!(read_eval_corpus(dir.path()).is_err());
}

#[test]
fn dangling_image_reference_is_reported() {
    let es = entries(2);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&es, dir.path(), "synthetic", None).unwrap();
    let victim = std::fs::read_dir(dir.path().join("images")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(victim).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Dangling { .. })));
}
