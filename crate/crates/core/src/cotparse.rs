//! Codec for segmentation-in-CoT replies.
//!
//! Wire format, one block per step after an opaque preamble:
//!
//! ```text
//! (1) - Reasoning and locating the regions:
//! <reasoning>
//! - Area description:          (optional)
//! <area description>
//! [SEG] The inpainting prompt is <prompt>.
//! ```
//!
//! Headers are recognized by the phrase, with or without the `(i)` numeral.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::raster::BinaryMask;
use crate::templates::IMAGE_SENTINEL;
use crate::types::{CoTResponse, CoTStep, CoTWarning, SEG_MARKER};

pub const HEADER_PHRASE: &str = "Reasoning and locating the regions:";
pub const AREA_LABEL: &str = "Area description:";
pub const TRAILER: &str = "The inpainting prompt is";
pub const REPROMPT_LABEL: &str = "Reprompt:";

const PREAMBLE_LEAD: &str = "We first disassemble this prompt as:";
const PREAMBLE_TAIL: &str = "With these prompts and the image, here is what we think the indicated area should be:";
const REQUEST_HEAD: &str = " \n You are an expert in locating the area in the image when given a prompt. Here is the prompt: ";
const REQUEST_TAIL: &str = ". please locate the indicated area in the image and generate the corresponding inpainting prompt.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoTError {
    #[error("invalid steps: {0}")]
    Argument(String),
    #[error("{}{message}", step.map(|s| format!("step {s}: ")).unwrap_or_default())]
    Parse { step: Option<u32>, message: String },
    #[error("cannot bind masks: {steps} vs {masks}")]
    Binding { steps: usize, masks: usize },
}

fn parse_err(step: Option<u32>, message: impl Into<String>) -> CoTError {
    CoTError::Parse { step, message: message.into() }
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:\((\d+)\)\s*)?-?\s*Reasoning and locating the regions:").unwrap()
    })
}

fn area_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:-\s*)?Area description:").unwrap())
}

fn check_text(field: &str, text: &str, banned: &[&str]) -> Result<(), CoTError> {
    for b in banned {
        if text.contains(b) {
            return Err(CoTError::Argument(format!("{field} contains {b:?}")));
        }
    }
    Ok(())
}

/// Render steps in the wire format. Indices must run 1..=n and seg_index 0..n.
pub fn format_cot(steps: &[CoTStep], preamble: Option<&str>) -> Result<String, CoTError> {
    if steps.is_empty() {
        return Err(CoTError::Argument("no steps".into()));
    }
    let mut out = String::new();
    if let Some(p) = preamble {
        check_text("preamble", p, &[SEG_MARKER, HEADER_PHRASE])?;
        out.push_str(p);
        out.push('\n');
    }
    for (i, s) in steps.iter().enumerate() {
        if s.index as usize != i + 1 {
            return Err(CoTError::Argument(format!(
                "step at position {} has index {}",
                i + 1,
                s.index
            )));
        }
        if s.seg_index != i {
            return Err(CoTError::Argument(format!(
                "step {} binds marker {} instead of {i}",
                s.index, s.seg_index
            )));
        }
        s.validate().map_err(|e| CoTError::Argument(e.to_string()))?;
        check_text("reasoning", &s.reasoning, &[SEG_MARKER, HEADER_PHRASE, AREA_LABEL, TRAILER])?;
        if let Some(a) = &s.area_description {
            check_text("area description", a, &[SEG_MARKER, HEADER_PHRASE, TRAILER])?;
        }
        check_text("inpainting prompt", &s.inpaint_prompt, &[HEADER_PHRASE])?;
        out.push_str(&format!("({}) - {HEADER_PHRASE}\n{}\n", s.index, s.reasoning));
        if let Some(a) = &s.area_description {
            out.push_str(&format!("- {AREA_LABEL}\n{a}\n"));
        }
        out.push_str(&format!("{SEG_MARKER} {TRAILER} {}.\n", s.inpaint_prompt));
    }
    Ok(out)
}

fn strip_one_period(s: &str) -> &str {
    let s = s.trim();
    s.strip_suffix('.').unwrap_or(s).trim_end()
}

/// Parse a reply in the wire format.
pub fn parse_cot(text: &str) -> Result<CoTResponse, CoTError> {
    let markers = text.matches(SEG_MARKER).count();
    if markers == 0 {
        return Err(parse_err(None, "no segmentation steps"));
    }
    let headers: Vec<_> = header_re().captures_iter(text).collect();
    if headers.is_empty() {
        return Err(parse_err(None, format!("{markers} {SEG_MARKER} markers but no step headers")));
    }
    let first = headers[0].get(0).unwrap().start();
    let preamble_text = &text[..first];
    if preamble_text.contains(SEG_MARKER) {
        return Err(parse_err(None, format!("{SEG_MARKER} before the first step header")));
    }
    let mut steps = Vec::with_capacity(headers.len());
    for (i, cap) in headers.iter().enumerate() {
        let whole = cap.get(0).unwrap();
        let seq = i as u32 + 1;
        let index = match cap.get(1) {
            Some(n) => n.as_str().parse::<u32>().unwrap_or(seq),
            None => seq,
        };
        let end = headers.get(i + 1).map_or(text.len(), |n| n.get(0).unwrap().start());
        let span = &text[whole.end()..end];
        let n_markers = span.matches(SEG_MARKER).count();
        if n_markers != 1 {
            return Err(parse_err(
                Some(seq),
                format!("expected one {SEG_MARKER} marker, found {n_markers}"),
            ));
        }
        let mpos = span.find(SEG_MARKER).unwrap();
        let (before, after) = (&span[..mpos], &span[mpos + SEG_MARKER.len()..]);
        if before.contains(TRAILER) {
            return Err(parse_err(Some(seq), format!("\"{TRAILER}\" appears before {SEG_MARKER}")));
        }
        let tpos = after
            .find(TRAILER)
            .ok_or_else(|| parse_err(Some(seq), format!("{SEG_MARKER} without \"{TRAILER} ...\"")))?;
        let prompt = strip_one_period(&after[tpos + TRAILER.len()..]).to_string();
        if prompt.is_empty() {
            return Err(parse_err(Some(seq), "empty inpainting prompt"));
        }
        let (reasoning, area) = match area_re().find(before) {
            Some(m) => (&before[..m.start()], Some(before[m.end()..].trim().to_string())),
            None => (before, None),
        };
        steps.push(CoTStep {
            index,
            reasoning: reasoning.trim().to_string(),
            area_description: area,
            seg_index: i,
            inpaint_prompt: prompt,
        });
    }
    let preamble = Some(preamble_text.trim().to_string()).filter(|p| !p.is_empty());
    let mut warnings = Vec::new();
    if let Some(p) = &preamble {
        let declared = declared_items(p);
        if declared > 0 && declared != steps.len() {
            warnings.push(CoTWarning::CountMismatch { declared, found: steps.len() });
        }
    }
    Ok(CoTResponse { steps, raw_text: text.to_string(), preamble, warnings })
}

/// Number of distinct `(k)` items enumerated in a preamble.
fn declared_items(preamble: &str) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\((\d+)\)").unwrap());
    let mut seen: Vec<&str> = re.captures_iter(preamble).map(|c| c.get(1).unwrap().as_str()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Pair each step with the mask its marker requested.
pub fn bind_masks(
    response: &CoTResponse,
    masks: Vec<BinaryMask>,
) -> Result<Vec<(CoTStep, BinaryMask)>, CoTError> {
    if masks.len() != response.steps.len() {
        return Err(CoTError::Binding { steps: response.steps.len(), masks: masks.len() });
    }
    let mut slots: Vec<Option<BinaryMask>> = masks.into_iter().map(Some).collect();
    response
        .steps
        .iter()
        .map(|s| {
            let m = slots.get_mut(s.seg_index).and_then(Option::take).ok_or_else(|| {
                CoTError::Argument(format!("step {} has unusable seg_index {}", s.index, s.seg_index))
            })?;
            Ok((s.clone(), m))
        })
        .collect()
}

/// The recap that opens an assistant turn.
pub fn decomposition_preamble(clauses: &[&str]) -> String {
    let items: String = clauses
        .iter()
        .enumerate()
        .map(|(i, c)| format!(" ({}) {}.", i + 1, strip_one_period(c)))
        .collect();
    format!("{PREAMBLE_LEAD}{items} \n{PREAMBLE_TAIL}")
}

/// The user turn asking a segmentation model to locate and re-prompt.
pub fn locate_request(instruction: &str) -> String {
    format!("{IMAGE_SENTINEL}{REQUEST_HEAD}{}{REQUEST_TAIL}", strip_one_period(instruction))
}

/// Inverse of [`locate_request`].
pub fn parse_locate_request(dialogue: &str) -> Option<String> {
    let start = dialogue.find(REQUEST_HEAD)? + REQUEST_HEAD.len();
    let end = dialogue.rfind(REQUEST_TAIL)?;
    (end >= start).then(|| dialogue[start..end].to_string())
}

/// Fields of a reasoning/description reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionReply {
    pub reasoning: String,
    pub area_description: Option<String>,
    pub reprompt: Option<String>,
}

/// Extract reasoning, area description and re-prompt from a free-form
/// description answer. The re-prompt may follow "The inpainting prompt is"
/// or "Reprompt:"; the last such label wins.
pub fn parse_description_reply(text: &str) -> DescriptionReply {
    let label = [TRAILER, REPROMPT_LABEL]
        .iter()
        .filter_map(|l| text.rfind(l).map(|p| (p, l.len())))
        .max();
    let (body, reprompt) = match label {
        Some((p, len)) => {
            let tail = text[p + len..].trim_start_matches(':');
            let line = tail.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            let r = strip_one_period(line).to_string();
            (text[..p].trim_end().trim_end_matches('-'), Some(r).filter(|r| !r.is_empty()))
        }
        None => (text, None),
    };
    let body = match body.find(HEADER_PHRASE) {
        Some(p) => &body[p + HEADER_PHRASE.len()..],
        None => body,
    };
    let (reasoning, area) = match area_re().find(body) {
        Some(m) => (&body[..m.start()], Some(body[m.end()..].trim().to_string())),
        None => (body, None),
    };
    DescriptionReply {
        reasoning: reasoning.trim().to_string(),
        area_description: area.filter(|a| !a.is_empty()),
        reprompt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(i: usize, r: &str, a: Option<&str>, p: &str) -> CoTStep {
        CoTStep {
            index: i as u32 + 1,
            reasoning: r.into(),
            area_description: a.map(Into::into),
            seg_index: i,
            inpaint_prompt: p.into(),
        }
    }

    #[test]
    fn single_step_format() {
        let t = format_cot(&[step(0, "r", None, "a glass of soda on the table")], None).unwrap();
        assert_eq!(t.matches(SEG_MARKER).count(), 1);
        assert!(t.contains("[SEG] The inpainting prompt is a glass of soda on the table."));
        assert!(matches!(format_cot(&[], None), Err(CoTError::Argument(_))));
        let bad = [step(0, "r", None, "p"), step(2, "r", None, "p")];
        assert!(format_cot(&bad, None).is_err());
    }

    #[test]
    fn three_steps_three_markers() {
        let s: Vec<_> = (0..3).map(|i| step(i, "why", Some("where"), "what")).collect();
        let t = format_cot(&s, Some("pre")).unwrap();
        assert_eq!(t.matches(SEG_MARKER).count(), 3);
        let back = parse_cot(&t).unwrap();
        assert_eq!(back.steps, s);
        assert_eq!(back.preamble.as_deref(), Some("pre"));
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_cot("hello").unwrap_err(), parse_err(None, "no segmentation steps"));
        let e = parse_cot("(1) - Reasoning and locating the regions: x [SEG] nothing here").unwrap_err();
        assert!(matches!(e, CoTError::Parse { step: Some(1), .. }));
        let e = parse_cot("(1) - Reasoning and locating the regions: The inpainting prompt is x. [SEG] The inpainting prompt is y.").unwrap_err();
        assert!(matches!(e, CoTError::Parse { step: Some(1), .. }));
        assert!(matches!(parse_cot("[SEG] The inpainting prompt is x."), Err(CoTError::Parse { step: None, .. })));
    }

    #[test]
    fn preamble_count_mismatch_warns() {
        let pre = decomposition_preamble(&["a", "b", "c"]);
        let s = [step(0, "r", None, "p"), step(1, "r", None, "q")];
        let t = format_cot(&s, Some(&pre)).unwrap();
        let r = parse_cot(&t).unwrap();
        assert_eq!(r.steps.len(), 2);
        assert_eq!(r.warnings, [CoTWarning::CountMismatch { declared: 3, found: 2 }]);
    }

    #[test]
    fn binding() {
        let s = [step(0, "r", None, "p"), step(1, "r", None, "q")];
        let r = parse_cot(&format_cot(&s, None).unwrap()).unwrap();
        let m = BinaryMask::empty(2, 2).unwrap();
        assert_eq!(bind_masks(&r, vec![m.clone(), m.clone()]).unwrap().len(), 2);
        let e = bind_masks(&r, vec![m]).unwrap_err();
        assert_eq!(e.to_string(), "cannot bind masks: 2 vs 1");
        let empty = CoTResponse { steps: vec![], raw_text: String::new(), preamble: None, warnings: vec![] };
        assert!(bind_masks(&empty, vec![]).unwrap().is_empty());
    }

    #[test]
    fn locate_request_round_trip() {
        let u = locate_request("Place a single vase of flowers and a glass of soda on the table, and also add a bottle of beer");
        assert_eq!(u.matches(IMAGE_SENTINEL).count(), 1);
        assert!(u.starts_with("<img> \n You are an expert in locating the area in the image when given a prompt. Here is the prompt: Place"));
        assert!(u.ends_with("add a bottle of beer. please locate the indicated area in the image and generate the corresponding inpainting prompt."));
        assert_eq!(
            parse_locate_request(&u).as_deref(),
            Some("Place a single vase of flowers and a glass of soda on the table, and also add a bottle of beer")
        );
        assert_eq!(parse_locate_request("hello"), None);
    }

    #[test]
    fn description_reply_fields() {
        let r = parse_description_reply(
            "- Reasoning and locating the regions:\n To add a suitcase we look.\n- Area description:\n The laptop.\n -The inpainting prompt is a suitcase on the leftside of the image.",
        );
        assert_eq!(r.reasoning, "To add a suitcase we look.");
        assert_eq!(r.area_description.as_deref(), Some("The laptop."));
        assert_eq!(r.reprompt.as_deref(), Some("a suitcase on the leftside of the image"));
        let r = parse_description_reply("Reasoning and locating the regions: x\n-Reprompt:\n a hat.");
        assert_eq!(r.reprompt.as_deref(), Some("a hat"));
        assert_eq!(parse_description_reply("nothing").reprompt, None);
    }

    fn text_field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.;:()'\"\n\u{e9}\u{4e2d}-]{0,60}".prop_map(|s| s.trim().to_string())
    }

    fn step_list() -> impl Strategy<Value = (Vec<CoTStep>, Option<String>)> {
        let one = (
            text_field(),
            proptest::option::of(text_field()),
            "[A-Za-z0-9 ,.'-]{1,40}".prop_filter_map("blank prompt", |s| {
                let t = s.trim().to_string();
                (!t.is_empty() && t != ".").then_some(t)
            }),
        );
        (proptest::collection::vec(one, 1..6), proptest::option::of("[A-Za-z ():.]{1,40}"))
            .prop_map(|(v, pre)| {
                let steps = v
                    .into_iter()
                    .enumerate()
                    .map(|(i, (r, a, p))| CoTStep {
                        index: i as u32 + 1,
                        reasoning: r,
                        area_description: a,
                        seg_index: i,
                        inpaint_prompt: p,
                    })
                    .collect();
                (steps, pre.map(|p| p.trim().to_string()).filter(|p| !p.is_empty()))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip((steps, pre) in step_list()) {
            let text = format_cot(&steps, pre.as_deref()).unwrap();
            prop_assert_eq!(text.matches(SEG_MARKER).count(), steps.len());
            let back = parse_cot(&text).unwrap();
            prop_assert_eq!(back.steps, steps);
            prop_assert_eq!(back.preamble, pre);
        }

        #[test]
        fn parse_never_panics(s in "(?s).{0,200}", noise in "[\\[\\]SEG()1-3 \n-]{0,40}") {
            let _ = parse_cot(&s);
            let _ = parse_cot(&format!("{noise}(1) - Reasoning and locating the regions:{s}[SEG]{noise}"));
            let _ = parse_description_reply(&s);
        }
    }
}
