//! Deterministic offline backends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::scene::{self, PALETTE};
use super::{
    BackendError, BackendResult, EmbeddingBackend, InpaintBackend, JudgeBackend, JudgeCriterion,
    MllmBackend, Segmentation, SegmentationBackend,
};
use crate::cotparse::{decomposition_preamble, format_cot, parse_locate_request};
use crate::decompose::{analyze_clause, decompose_grammar, split_clauses, ClauseAnalysis, ClauseLexicon};
use crate::raster::{BinaryMask, RasterImage};
use crate::templates::{extract_decomposition_instruction, extract_simple_prompts, TemplateName};
use crate::types::{CoTStep, EditInstruction, EditOpKind};

/// What a REMOVE re-prompt asks the inpainter to paint.
pub const REMOVE_FILL: &str = "empty grey textured background";

/// Marker the pipeline uses to append reviewer feedback to a prompt.
pub const FEEDBACK_LABEL: &str = "User feedback:";

/// Template-driven MLLM stand-in built on the clause grammar.
#[derive(Debug, Clone, Default)]
pub struct MockMllm {
    pub lexicon: ClauseLexicon,
}

impl MockMllm {
    pub fn new(lexicon: ClauseLexicon) -> Self {
        Self { lexicon }
    }

    fn decomposition_reply(&self, instruction: &str) -> String {
        let items: Vec<String> = match decompose_grammar(instruction, &self.lexicon) {
            Ok(sps) => sps.into_iter().map(|s| s.raw_clause).collect(),
            Err(_) => match EditInstruction::new(instruction) {
                Ok(i) => split_clauses(&i, &self.lexicon),
                Err(_) => Vec::new(),
            },
        };
        if items.is_empty() {
            return "There is no instruction to decompose.".into();
        }
        items
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}\n", i + 1))
            .collect()
    }

    fn describe(&self, image: Option<&RasterImage>, clause: &str, feedback: Option<&str>) -> Description {
        let analysis = analyze_clause(clause, &self.lexicon).ok();
        let position = image.and_then(|img| {
            let m = match analysis.as_ref().map(|a| (a.kind, localization_reference(a))) {
                Some((_, Some(r))) => scene::localize_on_image(img, &r).ok(),
                Some((EditOpKind::Add, None)) => scene::free_window(img).ok(),
                _ => None,
            }?;
            let (x0, y0, x1, y1) = m.bounding_box()?;
            let b = scene::BBox { x0, y0, x1: x1 + 1, y1: y1 + 1 };
            Some(scene::position_phrase(b, img.width(), img.height()))
        });
        let place = position
            .map(|p| format!("in the {p} of the image"))
            .unwrap_or_else(|| "in the indicated part of the image".into());
        let mut d = match analysis {
            None => Description {
                reasoning: format!("The request \"{clause}\" has to be located in the image."),
                area: format!("The target area is the region the request refers to, {place}."),
                reprompt: clause.to_string(),
            },
            Some(a) => describe_analysis(&a, &place),
        };
        if let Some(fb) = feedback {
            d.reasoning.push_str(&format!(" Taking the reviewer's note into account: {fb}."));
        }
        d
    }
}

struct Description {
    reasoning: String,
    area: String,
    reprompt: String,
}

fn describe_analysis(a: &ClauseAnalysis, place: &str) -> Description {
    let target = &a.target;
    match a.kind {
        EditOpKind::Remove => Description {
            reasoning: format!("To {} {target}, we need to find where {target} is in the image. The target area is the region it occupies.", a.verb),
            area: format!("The target area is {target}, {place}."),
            reprompt: REMOVE_FILL.into(),
        },
        EditOpKind::Add => match &a.anchor {
            Some(anchor) => Description {
                reasoning: format!("To add {target}, we need to find {anchor} and the free space directly above it."),
                area: format!("The target area is the empty region resting on {anchor}, {place}."),
                reprompt: format!("{target} on {anchor}"),
            },
            None => Description {
                reasoning: format!("To add {target}, we need an empty part of the image."),
                area: format!("The target area is an empty patch of background, {place}."),
                reprompt: target.clone(),
            },
        },
        EditOpKind::ChangeObject => {
            let dest = a.destination.clone().unwrap_or_else(|| target.clone());
            Description {
                reasoning: format!("To {} {target}, we need to locate {target} in the image.", a.verb),
                area: format!("The target area is {target}, {place}."),
                reprompt: dest,
            }
        }
        EditOpKind::ChangeAttribute => {
            let head = head_noun(target);
            let reprompt = match &a.destination {
                Some(d) if !head.is_empty() => format!("{d} {head}"),
                Some(d) => d.clone(),
                None => target.clone(),
            };
            Description {
                reasoning: format!("To {} {target}, we need to locate {target} and keep its shape.", a.verb),
                area: format!("The target area is {target}, {place}."),
                reprompt,
            }
        }
        EditOpKind::ChangeBackground => Description {
            reasoning: "To change the background, we need everything that is not a foreground object.".into(),
            area: format!("The target area is the background surrounding the objects, {place}."),
            reprompt: match &a.destination {
                Some(d) => format!("{d} background"),
                None => "a new background".into(),
            },
        },
    }
}

/// Last word of the noun phrase before any "of"/locative tail, minus determiners.
fn head_noun(target: &str) -> String {
    let mut head = "";
    for w in target.split_whitespace() {
        let l = w.to_lowercase();
        if matches!(l.as_str(), "of" | "on" | "in" | "at" | "near" | "with") {
            break;
        }
        head = w;
    }
    head.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Reference phrase a clause localizes through on a synthetic scene.
/// `None` for an anchorless ADD, which uses a free window.
pub fn localization_reference(a: &ClauseAnalysis) -> Option<String> {
    match a.kind {
        EditOpKind::Add => a.anchor.as_ref().map(|x| format!("on {x}")),
        EditOpKind::ChangeBackground => Some("the background".into()),
        _ => Some(a.target.clone()),
    }
}

fn answer_skeleton(d: &Description) -> String {
    format!(
        "- Reasoning and locating the regions:\n {}\n- Area description:\n {}\n -The inpainting prompt is {}.",
        d.reasoning, d.area, d.reprompt
    )
}

fn feedback_of(prompt: &str) -> Option<&str> {
    let i = prompt.rfind(FEEDBACK_LABEL)?;
    let fb = prompt[i + FEEDBACK_LABEL.len()..].lines().next()?.trim();
    (!fb.is_empty()).then_some(fb)
}

impl MllmBackend for MockMllm {
    fn chat(&self, image: Option<&RasterImage>, prompt: &str) -> BackendResult<String> {
        if prompt.contains(TemplateName::Decomposition.signature()) {
            let instr = extract_decomposition_instruction(prompt).unwrap_or("");
            return Ok(self.decomposition_reply(instr));
        }
        let clause = extract_simple_prompts(prompt).map(str::trim).filter(|s| !s.is_empty());
        let d = self.describe(image, clause.unwrap_or("the indicated area"), feedback_of(prompt));
        if prompt.contains(TemplateName::Description.signature()) {
            return Ok(answer_skeleton(&d));
        }
        if prompt.contains(TemplateName::Localization.signature()) {
            return Ok(format!("- Reasoning and locating the regions:\n {}", d.reasoning));
        }
        Ok("I can only answer the editing templates.".into())
    }
}

/// Segmentation oracle for synthetic scenes: resolves each clause of the
/// locate request against the objects visible in the image.
#[derive(Debug, Clone, Default)]
pub struct OracleSegmenter {
    pub lexicon: ClauseLexicon,
}

impl OracleSegmenter {
    pub fn new(lexicon: ClauseLexicon) -> Self {
        Self { lexicon }
    }

    pub fn mask_for_clause(&self, image: &RasterImage, clause: &str) -> BackendResult<BinaryMask> {
        let a = analyze_clause(clause, &self.lexicon).map_err(|e| BackendError::Localization {
            reference: clause.to_string(),
            reason: e.to_string(),
        })?;
        match localization_reference(&a) {
            Some(r) => scene::localize_on_image(image, &r),
            None => scene::free_window(image),
        }
    }
}

impl SegmentationBackend for OracleSegmenter {
    fn segment(&self, image: &RasterImage, dialogue: &str) -> BackendResult<Segmentation> {
        let instr = parse_locate_request(dialogue)
            .ok_or_else(|| BackendError::Argument("dialogue is not a locate request".into()))?;
        let sps = decompose_grammar(&instr, &self.lexicon).map_err(|e| BackendError::Localization {
            reference: instr.clone(),
            reason: e.to_string(),
        })?;
        let mut masks = Vec::with_capacity(sps.len());
        let mut steps = Vec::with_capacity(sps.len());
        for (i, sp) in sps.iter().enumerate() {
            masks.push(self.mask_for_clause(image, &sp.raw_clause)?);
            steps.push(CoTStep {
                index: i as u32 + 1,
                reasoning: format!("Locating the region for \"{}\".", sp.raw_clause),
                area_description: None,
                seg_index: i,
                inpaint_prompt: sp.raw_clause.clone(),
            });
        }
        let clauses: Vec<&str> = sps.iter().map(|s| s.raw_clause.as_str()).collect();
        let preamble = (clauses.len() > 1).then(|| decomposition_preamble(&clauses));
        let reply_text = format_cot(&steps, preamble.as_deref())
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(Segmentation { reply_text, masks })
    }
}

/// 24-bit color derived from SHA-256 of the prompt.
pub fn prompt_color(prompt: &str) -> [u8; 3] {
    let d = Sha256::digest(prompt.as_bytes());
    [d[0], d[1], d[2]]
}

/// Fills the mask with [`prompt_color`]; pixels outside the mask are untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Compositor;

impl InpaintBackend for Compositor {
    fn inpaint(&self, image: &RasterImage, mask: &BinaryMask, prompt: &str) -> BackendResult<RasterImage> {
        Ok(image.fill_masked(mask, prompt_color(prompt))?)
    }
}

/// Like [`Compositor`] but paints the palette color named in the prompt, so
/// painted regions become detectable objects for later steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct PalettePainter;

impl InpaintBackend for PalettePainter {
    fn inpaint(&self, image: &RasterImage, mask: &BinaryMask, prompt: &str) -> BackendResult<RasterImage> {
        let named = prompt
            .split(|c: char| !c.is_alphanumeric())
            .find_map(scene::palette_rgb);
        Ok(image.fill_masked(mask, named.unwrap_or_else(|| prompt_color(prompt)))?)
    }
}

pub const MEAN_POOL_GRID: u32 = 8;

/// Images: 8×8 mean-pool of each channel mapped to [-1, 1] (192 values).
/// Text: a pseudo-random vector seeded from the text's digest.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPoolEmbedder;

fn cell_range(i: u32, n: u32) -> (u32, u32) {
    let a = i * n / MEAN_POOL_GRID;
    let b = ((i + 1) * n / MEAN_POOL_GRID).max(a + 1).min(n);
    (a.min(n - 1), b)
}

impl EmbeddingBackend for MeanPoolEmbedder {
    fn model_id(&self) -> String {
        "mock-meanpool-8x8".into()
    }

    fn embed_image(&self, image: &RasterImage) -> BackendResult<Vec<f64>> {
        let (w, h) = image.dims();
        let mut out = Vec::with_capacity((MEAN_POOL_GRID * MEAN_POOL_GRID * 3) as usize);
        for gy in 0..MEAN_POOL_GRID {
            let (y0, y1) = cell_range(gy, h);
            for gx in 0..MEAN_POOL_GRID {
                let (x0, x1) = cell_range(gx, w);
                let mut sum = [0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get(x, y);
                        for c in 0..3 {
                            sum[c] += p[c] as f64 / 255.0 * 2.0 - 1.0;
                        }
                    }
                }
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                out.extend(sum.iter().map(|s| s / n));
            }
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        let d = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok((0..MEAN_POOL_GRID * MEAN_POOL_GRID * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect())
    }
}

/// Palette histogram: one bin per palette color plus an "other" bin. Text
/// counts named palette colors; text naming none lands in the "other" bin.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorHistogramEmbedder;

impl EmbeddingBackend for ColorHistogramEmbedder {
    fn model_id(&self) -> String {
        "mock-color-histogram".into()
    }

    fn embed_image(&self, image: &RasterImage) -> BackendResult<Vec<f64>> {
        let mut hist = vec![0f64; PALETTE.len() + 1];
        for i in 0..image.pixel_count() {
            let p = image.at(i);
            let bin = PALETTE.iter().position(|(_, c)| *c == p).unwrap_or(PALETTE.len());
            hist[bin] += 1.0;
        }
        let n = image.pixel_count() as f64;
        Ok(hist.into_iter().map(|v| v / n).collect())
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        let mut hist = vec![0f64; PALETTE.len() + 1];
        for w in text.split(|c: char| !c.is_alphanumeric()) {
            if let Some(i) = PALETTE.iter().position(|(n, _)| n.eq_ignore_ascii_case(w)) {
                hist[i] += 1.0;
            }
        }
        if hist.iter().all(|v| *v == 0.0) {
            hist[PALETTE.len()] = 1.0;
        }
        Ok(hist)
    }
}

/// Judge replying with fixed per-criterion integers.
#[derive(Debug, Clone, Copy)]
pub struct FixedJudge {
    pub alignment: i64,
    pub coherence: i64,
}

impl Default for FixedJudge {
    fn default() -> Self {
        Self { alignment: 57, coherence: 80 }
    }
}

impl JudgeBackend for FixedJudge {
    fn judge(&self, _: &RasterImage, _: &RasterImage, _: &str, criterion: JudgeCriterion) -> BackendResult<String> {
        Ok(match criterion {
            JudgeCriterion::Alignment => self.alignment,
            JudgeCriterion::Coherence => self.coherence,
        }
        .to_string())
    }
}

/// Judge that always sends the same raw reply text.
#[derive(Debug, Clone)]
pub struct ReplyJudge(pub String);

impl JudgeBackend for ReplyJudge {
    fn judge(&self, _: &RasterImage, _: &RasterImage, _: &str, _: JudgeCriterion) -> BackendResult<String> {
        Ok(self.0.clone())
    }
}
