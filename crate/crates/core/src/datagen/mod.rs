//! Training-data preparation: three-phase CoT generation per record, sample
//! assembly, SFT dialogue formatting and synthetic record generation.

pub mod dataset;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::scene::{generate_scene_with, SceneLayout, SyntheticScene, PALETTE};
use crate::backends::{BackendError, Backends, MllmBackend};
use crate::cotparse::{
    decomposition_preamble, format_cot, locate_request, parse_cot, parse_description_reply, CoTError,
};
use crate::decompose::{parse_list_reply, ClauseLexicon};
use crate::pipeline::{run_edit, PipelinePolicy};
use crate::raster::{BinaryMask, RasterImage};
use crate::types::{CoTResponse, CoTStep, EditInstruction, EditSample, ValidationError};

pub use crate::templates::{render_template, TemplateError, TemplateName};
pub use dataset::{
    ingest_magicbrush, read_dataset, read_sft, write_dataset, write_sft, DatasetEntry, DatasetError,
    DatasetManifest, SCHEMA_VERSION,
};

use crate::templates::{render_decomposition, render_localization};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{phase} phase failed: {message}")]
    Generation { phase: TemplateName, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    CoT(#[from] CoTError),
}

fn gen_err(phase: TemplateName, message: impl Into<String>) -> DatagenError {
    DatagenError::Generation { phase, message: message.into() }
}

/// One unprocessed editing record (MagicBrush style).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub sample_id: String,
    pub source: RasterImage,
    pub mask: BinaryMask,
    pub target: RasterImage,
    pub instruction: String,
    /// Per-turn instructions when `instruction` joins several turns.
    pub turns: Vec<String>,
}

impl SourceRecord {
    fn check(&self) -> Result<(), ValidationError> {
        if self.source.dims() != self.target.dims() || self.mask.dims() != self.source.dims() {
            return Err(ValidationError::new(
                "record",
                format!(
                    "source {:?}, mask {:?} and target {:?} differ in size",
                    self.source.dims(),
                    self.mask.dims(),
                    self.target.dims()
                ),
            ));
        }
        EditInstruction::new(self.instruction.clone())?;
        Ok(())
    }
}

fn ask(
    backend: &dyn MllmBackend,
    image: &RasterImage,
    prompt: &str,
    phase: TemplateName,
) -> Result<String, DatagenError> {
    let reply = backend
        .chat(Some(image), prompt)
        .map_err(|e: BackendError| gen_err(phase, e.to_string()))?;
    if reply.trim().is_empty() {
        return Err(gen_err(phase, "empty reply"));
    }
    Ok(reply)
}

/// Run decomposition, then localization and description per clause, and
/// assemble the replies into a parsed CoT response.
pub fn generate_cot_for_record(
    record: &SourceRecord,
    backend: &dyn MllmBackend,
) -> Result<CoTResponse, DatagenError> {
    record.check()?;
    let reply = ask(
        backend,
        &record.source,
        &render_decomposition(&record.instruction),
        TemplateName::Decomposition,
    )?;
    let clauses = parse_list_reply(&reply);
    if clauses.is_empty() {
        return Err(gen_err(TemplateName::Decomposition, "reply contains no list"));
    }
    let mut steps = Vec::with_capacity(clauses.len());
    for (i, clause) in clauses.iter().enumerate() {
        let loc_prompt = render_localization(clause);
        let loc = ask(backend, &record.source, &loc_prompt, TemplateName::Localization)?;
        let transcript = format!(
            "{loc_prompt}\n\nASSISTANT: {}\n\nUSER: {}",
            loc.trim(),
            TemplateName::Description.body()
        );
        let desc = ask(backend, &record.source, &transcript, TemplateName::Description)?;
        let d = parse_description_reply(&desc);
        let prompt = d
            .reprompt
            .ok_or_else(|| gen_err(TemplateName::Description, format!("no re-prompt for {clause:?}")))?;
        let reasoning = if d.reasoning.is_empty() {
            parse_description_reply(&loc).reasoning
        } else {
            d.reasoning
        };
        steps.push(CoTStep {
            index: i as u32 + 1,
            reasoning: sanitize(&reasoning),
            area_description: d.area_description.map(|a| sanitize(&a)),
            seg_index: i,
            inpaint_prompt: sanitize(&prompt),
        });
    }
    let refs: Vec<&str> = clauses.iter().map(String::as_str).collect();
    let text = format_cot(&steps, Some(&decomposition_preamble(&refs)))
        .map_err(|e| gen_err(TemplateName::Description, e.to_string()))?;
    Ok(parse_cot(&text)?)
}

/// Strip wire-format keywords a model may echo back.
fn sanitize(s: &str) -> String {
    use crate::cotparse::{AREA_LABEL, HEADER_PHRASE, TRAILER};
    let mut out = s.to_string();
    for k in [crate::types::SEG_MARKER, HEADER_PHRASE, AREA_LABEL, TRAILER] {
        out = out.replace(k, "");
    }
    out.trim().to_string()
}

/// Bundle the five components into a validated sample with a fresh id.
pub fn assemble_sample(
    source: RasterImage,
    instruction: &str,
    mask: BinaryMask,
    target: RasterImage,
    cot: CoTResponse,
) -> Result<EditSample, ValidationError> {
    let sample = EditSample {
        sample_id: uuid::Uuid::new_v4().to_string(),
        source,
        instruction: EditInstruction::new(instruction)?,
        mask,
        target,
        cot,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generate CoT for every record and assemble dataset entries, keeping the
/// record ids. The edited image of each entry is the record's target.
/// Records whose generation fails are returned separately, in input order.
pub fn build_entries(
    records: &[SourceRecord],
    backend: &dyn MllmBackend,
) -> (Vec<DatasetEntry>, Vec<(String, DatagenError)>) {
    let results: Vec<_> = records
        .par_iter()
        .map(|r| -> Result<DatasetEntry, DatagenError> {
            let cot = generate_cot_for_record(r, backend)?;
            let mut sample = assemble_sample(r.source.clone(), &r.instruction, r.mask.clone(), r.target.clone(), cot)?;
            sample.sample_id = r.sample_id.clone();
            Ok(DatasetEntry { sample, turns: r.turns.clone(), edited: Some(r.target.clone()) })
        })
        .collect();
    let mut entries = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(e) => entries.push(e),
            Err(e) => dropped.push((r.sample_id.clone(), e)),
        }
    }
    (entries, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftDialogue {
    pub user_turn: String,
    pub assistant_turn: String,
}

/// User turn: the locate request; assistant turn: the sample's CoT.
pub fn format_sft(sample: &EditSample) -> Result<SftDialogue, CoTError> {
    let preamble = match &sample.cot.preamble {
        Some(p) => p.clone(),
        None => {
            let prompts: Vec<&str> = sample.cot.steps.iter().map(|s| s.inpaint_prompt.as_str()).collect();
            decomposition_preamble(&prompts)
        }
    };
    Ok(SftDialogue {
        user_turn: locate_request(sample.instruction.as_str()),
        assistant_turn: format_cot(&sample.cot.steps, Some(&preamble))?,
    })
}

const NOUNS: [&str; 6] = ["dog", "hat", "lamp", "ball", "cat", "vase of flowers"];
const BACKDROPS: [&str; 4] = ["a sunny beach", "a snowy field", "a brick wall", "a night sky"];

fn article(noun: &str) -> &'static str {
    if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

/// A random instruction of `ops` clauses over distinct objects of `scene`,
/// phrased in the controlled grammar.
pub fn synth_instruction(scene: &SyntheticScene, rng: &mut impl Rng, ops: usize) -> String {
    let mut objs: Vec<_> = scene.objects.iter().collect();
    objs.shuffle(rng);
    let mut clauses = Vec::new();
    let mut used_background = false;
    for o in objs.into_iter().take(ops) {
        let name = o.name();
        let other = PALETTE
            .iter()
            .map(|(c, _)| *c)
            .filter(|c| *c != o.color)
            .collect::<Vec<_>>()
            .choose(rng)
            .copied()
            .unwrap_or("green");
        let noun = *NOUNS.choose(rng).unwrap();
        let clause = match rng.random_range(0..6) {
            0 => format!("remove the {name}"),
            1 => format!("change the {name} to {other}"),
            2 => format!("turn the {name} {other}"),
            3 => format!("replace the {name} with {} {noun}", article(noun)),
            4 => format!("add {} {noun} on the {name}", article(noun)),
            _ if !used_background => {
                used_background = true;
                format!("change the background to {}", BACKDROPS.choose(rng).unwrap())
            }
            _ => format!("erase the {name}"),
        };
        clauses.push(clause);
    }
    match clauses.len() {
        0 => "change the background to a night sky".into(),
        1 => clauses.remove(0),
        _ => {
            let last = clauses.pop().unwrap();
            format!("{}, and {last}", clauses.join(", "))
        }
    }
}

/// Synthetic MagicBrush-style records: scene, random instruction, and the
/// target/mask produced by the mock pipeline.
pub fn synthesize_records(
    count: usize,
    seed: u64,
    layout: SceneLayout,
    lexicon: &ClauseLexicon,
) -> Result<Vec<SourceRecord>, DatagenError> {
    let backends = Backends::mock();
    let policy = PipelinePolicy { mask_dilation_px: 0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene_with(rng.random(), None, layout)
            .map_err(|e| ValidationError::new("scene", e.to_string()))?;
        let ops = rng.random_range(1..=3usize.min(scene.objects.len()).max(1));
        let instruction = synth_instruction(&scene, &mut rng, ops);
        let trace = run_edit(&scene.image, &instruction, &policy, &backends, lexicon)
            .map_err(|f| ValidationError::new("synthetic edit", f.to_string()))?;
        out.push(SourceRecord {
            sample_id: format!("syn{i:05}"),
            mask: trace.mask_union(),
            target: trace.final_image.clone(),
            source: scene.image,
            turns: vec![instruction.clone()],
            instruction,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockMllm;
    use crate::backends::BackendResult;
    use crate::types::SEG_MARKER;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn record() -> SourceRecord {
        synthesize_records(1, 5, SceneLayout { cols: 2, rows: 2 }, ClauseLexicon::builtin())
            .unwrap()
            .remove(0)
    }

    #[test]
    fn mock_generation_yields_steps() {
        let mut r = record();
        let cot = generate_cot_for_record(&r, &MockMllm::default()).unwrap();
        assert!(!cot.steps.is_empty());
        assert!(cot.steps.iter().all(|s| !s.inpaint_prompt.is_empty()));
        r.instruction = "remove the red square".into();
        let cot = generate_cot_for_record(&r, &MockMllm::default()).unwrap();
        assert_eq!(cot.steps.len(), 1);
    }

    struct GoesQuiet(AtomicUsize, usize);
    impl MllmBackend for GoesQuiet {
        fn chat(&self, img: Option<&RasterImage>, p: &str) -> BackendResult<String> {
            if self.0.fetch_add(1, Ordering::SeqCst) == self.1 {
                return Ok(String::new());
            }
            MockMllm::default().chat(img, p)
        }
    }

    #[test]
    fn empty_reply_names_the_phase() {
        let r = record();
        for (call, phase) in [(0, "DECOMPOSITION"), (1, "LOCALIZATION"), (2, "DESCRIPTION")] {
            let e = generate_cot_for_record(&r, &GoesQuiet(AtomicUsize::new(0), call)).unwrap_err();
            assert!(e.to_string().starts_with(phase), "{e}");
        }
    }

    #[test]
    fn assemble_and_sft() {
        let r = record();
        let cot = generate_cot_for_record(&r, &MockMllm::default()).unwrap();
        let s = assemble_sample(r.source.clone(), &r.instruction, r.mask.clone(), r.target.clone(), cot).unwrap();
        let d = format_sft(&s).unwrap();
        assert_eq!(d.user_turn, locate_request(&r.instruction));
        assert_eq!(d.assistant_turn.matches(SEG_MARKER).count(), s.cot.steps.len());
        assert_eq!(parse_cot(&d.assistant_turn).unwrap().steps, s.cot.steps);

        let small = BinaryMask::empty(10, 10).unwrap();
        let img = RasterImage::filled(12, 12, [0, 0, 0]).unwrap();
        assert!(assemble_sample(img.clone(), "x", small, img.clone(), s.cot.clone()).is_err());
        let m = BinaryMask::empty(12, 12).unwrap();
        assert!(assemble_sample(img.clone(), "  ", m, img, s.cot.clone()).is_err());
    }
}
