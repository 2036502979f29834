//! Instruction decomposition: complex instruction → ordered single-operation
//! sub-prompts.
//!
//! Two routes are provided. [`decompose_grammar`] is a deterministic clause
//! grammar over a [`ClauseLexicon`]; it is the offline default and the oracle
//! for [`decompose_llm`], which asks an MLLM backend with the decomposition
//! template and classifies each listed item through the same grammar.

mod lexicon;

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::backends::{BackendError, MllmBackend};
use crate::raster::RasterImage;
use crate::templates::render_decomposition;
use crate::types::{EditInstruction, EditOpKind, SubPrompt};

pub use lexicon::ClauseLexicon;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error(
        "cannot classify clause {}{clause:?}: {reason}",
        index.map(|i| format!("{} ", i + 1)).unwrap_or_default()
    )]
    Classification {
        index: Option<usize>,
        clause: String,
        reason: String,
    },
    #[error("no recognizable list in decomposition reply: {excerpt:?}")]
    Parse { excerpt: String },
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "one", "two", "three", "four", "five", "another", "more", "several",
    "his", "her", "their", "its", "my", "this", "that", "these", "those",
];

const LOCATIVES: &[&str] = &[
    "on", "onto", "in", "inside", "at", "near", "above", "under", "below", "beside", "behind",
    "over", "next", "to",
];

const PRONOUNS: &[&str] = &["it", "them", "they", "this", "that", "these", "those", "him", "her"];

const COURTESY: &[&str] = &["please", "kindly"];
const ARTICLES: &[&str] = &["a", "an", "some"];

/// Parsed shape of one clause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClauseAnalysis {
    pub kind: EditOpKind,
    pub verb: String,
    pub target: String,
    pub anchor: Option<String>,
    /// What the target should become (`green`, `a dog`, `a white sundress`).
    pub destination: Option<String>,
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '\'')
        .to_lowercase()
}

/// Words with their byte offsets.
fn words(s: &str) -> Vec<(usize, &str)> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let re = WORD.get_or_init(|| Regex::new(r"\S+").unwrap());
    re.find_iter(s).map(|m| (m.start(), m.as_str())).collect()
}

fn trim_clause(s: &str) -> &str {
    s.trim()
        .trim_end_matches(['.', ',', ';', '!', '?'])
        .trim()
}

/// First word after any courtesy prefix.
fn leading_word(piece: &str) -> Option<String> {
    words(piece)
        .into_iter()
        .map(|(_, w)| normalize_word(w))
        .find(|w| !COURTESY.contains(&w.as_str()))
}

/// Byte offset of the first locative preposition (as a whole word), if any.
fn find_locative(s: &str) -> Option<usize> {
    let ws = words(s);
    for (i, (off, w)) in ws.iter().enumerate() {
        let w = normalize_word(w);
        if w == "next" {
            if ws.get(i + 1).is_some_and(|(_, n)| normalize_word(n) == "to") {
                return Some(*off);
            }
            continue;
        }
        if LOCATIVES.contains(&w.as_str()) {
            return Some(*off);
        }
    }
    None
}

fn strip_locative_prefix(s: &str) -> &str {
    let s = s.trim_start();
    let ws = words(s);
    let skip = match ws.first().map(|(_, w)| normalize_word(w)) {
        Some(w) if w == "next" => 2,
        Some(_) => 1,
        None => 0,
    };
    match ws.get(skip) {
        Some((off, _)) => &s[*off..],
        None => "",
    }
}

fn coordinator_regex(lex: &ClauseLexicon) -> Regex {
    let alts = lex
        .coordinators()
        .iter()
        .map(|c| regex::escape(c))
        .collect::<Vec<_>>()
        .join("|");
    Regex::new(&format!(
        r"(?i)\s*,(?:\s*\b(?:{alts})\b)*\s*|\s+(?:(?:{alts})\s+)+"
    ))
    .expect("coordinator regex compiles")
}

struct Clause {
    text: String,
    verb: Option<String>,
    group: usize,
}

/// Split an instruction into clauses in textual order.
///
/// Coordinators and commas are consumed. A conjunct that starts with a
/// determiner inherits the preceding clause's verb ("add A and B" → "add A",
/// "add B"); for ADD verbs a trailing locative on the last conjunct is shared
/// with earlier conjuncts that lack one. Any other fragment is glued back
/// onto the preceding clause.
pub fn split_clauses(instruction: &EditInstruction, lex: &ClauseLexicon) -> Vec<String> {
    let text = instruction.as_str().trim();
    let re = coordinator_regex(lex);
    let mut pieces: Vec<(&str, &str)> = Vec::new();
    let mut last = 0;
    for m in re.find_iter(text) {
        pieces.push((&text[last..m.start()], m.as_str()));
        last = m.end();
    }
    pieces.push((&text[last..], ""));

    let mut clauses: Vec<Clause> = Vec::new();
    let mut prev_sep = "";
    let mut next_group = 0;
    for (piece, sep) in pieces {
        let lead = leading_word(piece);
        let is_verb = lead.as_deref().and_then(|w| lex.verb_kind(w)).is_some();
        let is_det = lead.as_deref().is_some_and(|w| DETERMINERS.contains(&w));
        if piece.trim().is_empty() {
            prev_sep = sep;
            continue;
        }
        if is_verb {
            let verb = words(piece)
                .into_iter()
                .map(|(_, w)| w)
                .find(|w| !COURTESY.contains(&normalize_word(w).as_str()))
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string());
            clauses.push(Clause {
                text: piece.trim().to_string(),
                verb,
                group: next_group,
            });
            next_group += 1;
        } else if let (true, Some(prev)) = (is_det, clauses.last()) {
            if let Some(verb) = prev.verb.clone() {
                let group = prev.group;
                clauses.push(Clause {
                    text: format!("{verb} {}", piece.trim()),
                    verb: Some(verb),
                    group,
                });
            } else {
                let prev = clauses.last_mut().unwrap();
                prev.text.push_str(prev_sep);
                prev.text.push_str(piece.trim());
            }
        } else if let Some(prev) = clauses.last_mut() {
            prev.text.push_str(prev_sep);
            prev.text.push_str(piece.trim());
        } else {
            clauses.push(Clause {
                text: piece.trim().to_string(),
                verb: None,
                group: next_group,
            });
            next_group += 1;
        }
        prev_sep = sep;
    }

    distribute_locatives(&mut clauses, lex);
    clauses
        .into_iter()
        .map(|c| trim_clause(&c.text).to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn distribute_locatives(clauses: &mut [Clause], lex: &ClauseLexicon) {
    let mut start = 0;
    while start < clauses.len() {
        let group = clauses[start].group;
        let end = clauses[start..]
            .iter()
            .position(|c| c.group != group)
            .map_or(clauses.len(), |p| start + p);
        let is_add = clauses[start]
            .verb
            .as_deref()
            .and_then(|v| lex.verb_kind(v))
            == Some(EditOpKind::Add);
        if is_add && end - start > 1 {
            let last = trim_clause(&clauses[end - 1].text).to_string();
            let body_off = after_verb_offset(&last);
            if let Some(loc) = find_locative(&last[body_off..]) {
                let suffix = last[body_off + loc..].to_string();
                for c in &mut clauses[start..end - 1] {
                    let t = trim_clause(&c.text).to_string();
                    let off = after_verb_offset(&t);
                    if find_locative(&t[off..]).is_none() {
                        c.text = format!("{t} {suffix}");
                    }
                }
            }
        }
        start = end;
    }
}

fn after_verb_offset(clause: &str) -> usize {
    let ws = words(clause);
    ws.iter()
        .position(|(_, w)| !COURTESY.contains(&normalize_word(w).as_str()))
        .and_then(|i| ws.get(i + 1))
        .map_or(clause.len(), |(off, _)| *off)
}

fn classification_error(clause: &str, reason: impl Into<String>) -> DecomposeError {
    DecomposeError::Classification {
        index: None,
        clause: clause.to_string(),
        reason: reason.into(),
    }
}

/// Find `needle` as a whole-word phrase (case-insensitive), leftmost or rightmost.
fn find_phrase(haystack: &str, needle: &str, rightmost: bool) -> Option<usize> {
    let re = Regex::new(&format!(r"(?i)\b{}\b", regex::escape(needle))).ok()?;
    let mut it = re.find_iter(haystack).map(|m| m.start());
    if rightmost {
        it.last()
    } else {
        it.next()
    }
}

/// Analyze one clause: operation kind, target phrase, ADD anchor, destination.
pub fn analyze_clause(clause: &str, lex: &ClauseLexicon) -> Result<ClauseAnalysis, DecomposeError> {
    let clause = trim_clause(clause);
    if clause.is_empty() {
        return Err(classification_error(clause, "empty clause"));
    }
    let ws = words(clause);
    let (verb_pos, verb_kind) = ws
        .iter()
        .enumerate()
        .find_map(|(i, (_, w))| lex.verb_kind(&normalize_word(w)).map(|k| (i, k)))
        .ok_or_else(|| classification_error(clause, "no editing verb from the lexicon"))?;
    let verb = normalize_word(ws[verb_pos].1);
    let rest_start = ws.get(verb_pos + 1).map_or(clause.len(), |(o, _)| *o);
    let rest = trim_clause(&clause[rest_start..]);
    if rest.is_empty() {
        return Err(classification_error(clause, "verb has no object"));
    }
    let rest_words = words(rest);
    if let Some(first) = rest_words.first().map(|(_, w)| normalize_word(w)) {
        let bare = matches!(first.as_str(), "it" | "them" | "they" | "him");
        if PRONOUNS.contains(&first.as_str()) && (bare || rest_words.len() == 1) {
            return Err(classification_error(
                clause,
                format!("pronoun reference {first:?} cannot be resolved"),
            ));
        }
    }

    let mut kind = verb_kind;
    let mut anchor = None;
    let mut destination = None;
    let target: String = match verb_kind {
        EditOpKind::Add => {
            let (obj, loc) = match find_locative(rest) {
                Some(off) => (rest[..off].trim(), Some(strip_locative_prefix(&rest[off..]).trim())),
                None => (rest, None),
            };
            let reducer = lex
                .reducers()
                .iter()
                .find_map(|r| find_phrase(rest, r, false).map(|o| (o, r.len())));
            if let Some((off, len)) = reducer {
                kind = EditOpKind::ChangeObject;
                destination = Some(format!("{}one{}", &rest[..off], &rest[off + len..]));
            } else {
                anchor = loc.filter(|l| !l.is_empty()).map(str::to_string);
            }
            obj.to_string()
        }
        EditOpKind::Remove => {
            static FROM: OnceLock<Regex> = OnceLock::new();
            let re = FROM.get_or_init(|| {
                Regex::new(r"(?i)\s+from\s+the\s+(image|picture|photo|scene)$").unwrap()
            });
            re.replace(rest, "").trim().to_string()
        }
        EditOpKind::ChangeObject => {
            let split = ["with", "by", "for", "into", "to"]
                .iter()
                .filter_map(|p| find_phrase(rest, p, false).map(|o| (o, p.len())))
                .min();
            match split {
                Some((off, len)) => {
                    destination = Some(rest[off + len..].trim().to_string());
                    rest[..off].trim().to_string()
                }
                None => rest.to_string(),
            }
        }
        EditOpKind::ChangeAttribute | EditOpKind::ChangeBackground => {
            let split = find_phrase(rest, "into", true)
                .map(|o| (o, 4))
                .or_else(|| find_phrase(rest, "to", true).map(|o| (o, 2)));
            match split {
                Some((off, len)) => {
                    let dest = rest.get(off + len..).unwrap_or("").trim();
                    // "into a white sundress" names a new object, "to green" an attribute
                    let first = words(dest).first().map(|(_, w)| normalize_word(w));
                    if first.is_some_and(|w| ARTICLES.contains(&w.as_str())) {
                        kind = EditOpKind::ChangeObject;
                    }
                    destination = Some(dest.to_string());
                    rest[..off].trim().to_string()
                }
                None => {
                    let ws = words(rest);
                    let mut keep = ws.len();
                    while keep > 1 && lex.is_attribute(&normalize_word(ws[keep - 1].1)) {
                        keep -= 1;
                    }
                    if keep < ws.len() {
                        let cut = ws[keep].0;
                        destination = Some(rest[cut..].trim().to_string());
                        rest[..cut].trim().to_string()
                    } else {
                        rest.to_string()
                    }
                }
            }
        }
    };

    let target = trim_clause(&target).to_string();
    if target.is_empty() {
        return Err(classification_error(clause, "empty target phrase"));
    }
    if kind.is_change() && words(&target).iter().any(|(_, w)| lex.is_background_noun(&normalize_word(w))) {
        kind = EditOpKind::ChangeBackground;
    }
    Ok(ClauseAnalysis {
        kind,
        verb,
        target,
        anchor,
        destination: destination.filter(|d| !d.is_empty()),
    })
}

/// Classify one clause into a single-operation sub-prompt.
pub fn classify_clause(clause: &str, lex: &ClauseLexicon) -> Result<SubPrompt, DecomposeError> {
    let a = analyze_clause(clause, lex)?;
    SubPrompt::new(a.kind, a.target, a.anchor, trim_clause(clause))
        .map_err(|e| classification_error(clause, e.reason))
}

/// `split_clauses` then `classify_clause` per clause, order preserved.
pub fn decompose_grammar(
    instruction: &str,
    lex: &ClauseLexicon,
) -> Result<Vec<SubPrompt>, DecomposeError> {
    let instruction = EditInstruction::new(instruction).map_err(|_| DecomposeError::EmptyInstruction)?;
    split_clauses(&instruction, lex)
        .iter()
        .enumerate()
        .map(|(i, c)| {
            classify_clause(c, lex).map_err(|e| match e {
                DecomposeError::Classification { clause, reason, .. } => {
                    DecomposeError::Classification {
                        index: Some(i),
                        clause,
                        reason,
                    }
                }
                other => other,
            })
        })
        .collect()
}

/// Items of a numbered or bulleted list in a model reply.
pub fn parse_list_reply(reply: &str) -> Vec<String> {
    static LINE_ITEM: OnceLock<Regex> = OnceLock::new();
    static INLINE_ITEM: OnceLock<Regex> = OnceLock::new();
    let line_re = LINE_ITEM
        .get_or_init(|| Regex::new(r"^\s*(?:\d+[.):]|\(\d+\)|[-*•])\s+(.+?)\s*$").unwrap());
    let items: Vec<String> = reply
        .lines()
        .filter_map(|l| line_re.captures(l))
        .map(|c| trim_clause(&c[1]).to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if !items.is_empty() {
        return items;
    }
    let inline_re = INLINE_ITEM.get_or_init(|| Regex::new(r"\(\d+\)").unwrap());
    let marks: Vec<_> = inline_re.find_iter(reply).collect();
    marks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let end = marks.get(i + 1).map_or(reply.len(), |n| n.start());
            trim_clause(&reply[m.end()..end]).to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Decompose through an MLLM using the decomposition template.
///
/// Items that do not classify fall back to CHANGE_OBJECT with
/// [`SubPrompt::fallback`] set.
pub fn decompose_llm(
    instruction: &str,
    image: Option<&RasterImage>,
    backend: &dyn MllmBackend,
    lex: &ClauseLexicon,
) -> Result<Vec<SubPrompt>, DecomposeError> {
    let instruction = EditInstruction::new(instruction).map_err(|_| DecomposeError::EmptyInstruction)?;
    let prompt = render_decomposition(instruction.as_str());
    let reply = backend.chat(image, &prompt)?;
    let items = parse_list_reply(&reply);
    if items.is_empty() {
        return Err(DecomposeError::Parse {
            excerpt: reply.chars().take(120).collect(),
        });
    }
    Ok(items
        .into_iter()
        .map(|item| match classify_clause(&item, lex) {
            Ok(sp) => sp,
            Err(e) => {
                log::warn!("falling back to CHANGE_OBJECT for {item:?}: {e}");
                SubPrompt {
                    kind: EditOpKind::ChangeObject,
                    target_ref: item.clone(),
                    anchor_ref: None,
                    raw_clause: item,
                    fallback: true,
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> &'static ClauseLexicon {
        ClauseLexicon::builtin()
    }

    fn split(s: &str) -> Vec<String> {
        split_clauses(&EditInstruction::new(s).unwrap(), lex())
    }

    #[test]
    fn single_clause_is_untouched() {
        assert_eq!(split("add a dog on the sofa"), ["add a dog on the sofa"]);
    }

    #[test]
    fn star_and_hat_split_in_two() {
        assert_eq!(
            split("Remove the star on the wall and add a black hat on the man"),
            ["Remove the star on the wall", "add a black hat on the man"]
        );
    }

    #[test]
    fn shared_verb_and_locative_distribute() {
        assert_eq!(
            split("Place a single vase of flowers and a glass of soda on the table, and also add a bottle of beer"),
            [
                "Place a single vase of flowers on the table",
                "Place a glass of soda on the table",
                "add a bottle of beer"
            ]
        );
    }

    #[test]
    fn non_determiner_fragments_rejoin() {
        assert_eq!(split("add a black and white dog"), ["add a black and white dog"]);
        assert_eq!(split("add a big, red ball"), ["add a big, red ball"]);
    }

    #[test]
    fn attribute_change_strips_trailing_color() {
        let sp = classify_clause("Turn the hair of the person on the left red", lex()).unwrap();
        assert_eq!(sp.kind, EditOpKind::ChangeAttribute);
        assert_eq!(sp.target_ref, "the hair of the person on the left");
        assert_eq!(sp.anchor_ref, None);
    }

    #[test]
    fn add_has_target_and_anchor() {
        let sp = classify_clause("add a black hat on the man", lex()).unwrap();
        assert_eq!(sp.kind, EditOpKind::Add);
        assert_eq!(sp.target_ref, "a black hat");
        assert_eq!(sp.anchor_ref.as_deref(), Some("the man"));
        let a = analyze_clause("put a lamp next to the bed", lex()).unwrap();
        assert_eq!(a.target, "a lamp");
        assert_eq!(a.anchor.as_deref(), Some("the bed"));
    }

    #[test]
    fn unknown_verb_is_a_classification_error() {
        assert!(matches!(
            classify_clause("sparkle the picture", lex()),
            Err(DecomposeError::Classification { .. })
        ));
        assert!(matches!(
            classify_clause("remove it", lex()),
            Err(DecomposeError::Classification { .. })
        ));
    }

    #[test]
    fn reductions_and_backgrounds() {
        let sp = classify_clause("Place a single vase of flowers on the table", lex()).unwrap();
        assert_eq!(sp.kind, EditOpKind::ChangeObject);
        assert_eq!(sp.anchor_ref, None);
        let sp = classify_clause("change the background to a sunny beach", lex()).unwrap();
        assert_eq!(sp.kind, EditOpKind::ChangeBackground);
        assert_eq!(sp.target_ref, "the background");
        let a = analyze_clause("replace the red square with a dog", lex()).unwrap();
        assert_eq!((a.kind, a.target.as_str(), a.destination.as_deref()), (EditOpKind::ChangeObject, "the red square", Some("a dog")));
        let a = analyze_clause("change the blue circle to green", lex()).unwrap();
        assert_eq!((a.kind, a.target.as_str(), a.destination.as_deref()), (EditOpKind::ChangeAttribute, "the blue circle", Some("green")));
    }

    #[test]
    fn grammar_examples() {
        let out = decompose_grammar("remove the red square and add a dog on the blue circle", lex()).unwrap();
        let kinds: Vec<_> = out.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [EditOpKind::Remove, EditOpKind::Add]);
        assert_eq!(out[1].anchor_ref.as_deref(), Some("the blue circle"));

        let out = decompose_grammar(
            "Turn the hair of the person on the left red, and transform the dress of the person on the right into a white sundress",
            lex(),
        )
        .unwrap();
        let kinds: Vec<_> = out.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [EditOpKind::ChangeAttribute, EditOpKind::ChangeObject]);
        assert_eq!(out[1].target_ref, "the dress of the person on the right");

        let out = decompose_grammar("Can we have just one vase of flowers", lex()).unwrap();
        assert_eq!(out[0].kind, EditOpKind::ChangeObject);

        assert!(matches!(decompose_grammar("  ", lex()), Err(DecomposeError::EmptyInstruction)));
        assert!(matches!(
            decompose_grammar("sparkle the dog and remove the cat", lex()),
            Err(DecomposeError::Classification { index: Some(0), .. })
        ));
    }

    #[test]
    fn list_reply_parsing() {
        assert_eq!(parse_list_reply("1. add a cat\n2) remove the dog\n- make the sky blue"), ["add a cat", "remove the dog", "make the sky blue"]);
        assert_eq!(
            parse_list_reply("We first disassemble this prompt as: (1) Put a glass of soda on the table. (2) Can we have just one vase of flowers? (3) Put a bottle of beer on the table."),
            ["Put a glass of soda on the table", "Can we have just one vase of flowers", "Put a bottle of beer on the table"]
        );
        assert!(parse_list_reply("I cannot help").is_empty());
    }
}
