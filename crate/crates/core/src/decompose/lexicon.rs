use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::types::EditOpKind;

use super::DecomposeError;

const DEFAULT_LEXICON: &str = include_str!("lexicon.tsv");

/// Verb table and word lists driving the clause grammar. Loaded from a
/// line-oriented text file; see `lexicon.tsv` for the format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClauseLexicon {
    verbs: BTreeMap<String, EditOpKind>,
    coordinators: Vec<String>,
    background_nouns: Vec<String>,
    reducers: Vec<String>,
    attributes: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Verbs,
    Coordinators,
    Background,
    Reducers,
    Attributes,
}

impl ClauseLexicon {
    pub fn parse(text: &str) -> Result<Self, DecomposeError> {
        let mut lex = ClauseLexicon {
            verbs: BTreeMap::new(),
            coordinators: Vec::new(),
            background_nouns: Vec::new(),
            reducers: Vec::new(),
            attributes: Vec::new(),
        };
        let mut section = Section::Verbs;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if let Some(name) = line.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim() {
                    "verbs" => Section::Verbs,
                    "coordinators" => Section::Coordinators,
                    "background" => Section::Background,
                    "reducers" => Section::Reducers,
                    "attributes" => Section::Attributes,
                    other => {
                        return Err(DecomposeError::Lexicon {
                            line: line_no,
                            reason: format!("unknown section [{other}]"),
                        })
                    }
                };
                continue;
            }
            let entry = line.trim().to_lowercase();
            match section {
                Section::Verbs => {
                    let (verb, kind) = line.split_once('\t').ok_or_else(|| DecomposeError::Lexicon {
                        line: line_no,
                        reason: "expected verb<TAB>KIND".into(),
                    })?;
                    let kind: EditOpKind = kind.parse().map_err(|_| DecomposeError::Lexicon {
                        line: line_no,
                        reason: format!("unknown kind {:?}", kind.trim()),
                    })?;
                    let verb = verb.trim().to_lowercase();
                    if verb.is_empty() || verb.contains(char::is_whitespace) {
                        return Err(DecomposeError::Lexicon {
                            line: line_no,
                            reason: format!("verb must be a single word, got {verb:?}"),
                        });
                    }
                    if let Some(prev) = lex.verbs.insert(verb.clone(), kind) {
                        if prev != kind {
                            return Err(DecomposeError::Lexicon {
                                line: line_no,
                                reason: format!("verb {verb:?} maps to both {prev} and {kind}"),
                            });
                        }
                    }
                }
                Section::Coordinators => lex.coordinators.push(entry),
                Section::Background => lex.background_nouns.push(entry),
                Section::Reducers => lex.reducers.push(entry),
                Section::Attributes => lex.attributes.push(entry),
            }
        }
        if lex.verbs.is_empty() {
            return Err(DecomposeError::Lexicon {
                line: 0,
                reason: "lexicon defines no verbs".into(),
            });
        }
        Ok(lex)
    }

    pub fn from_path(path: &Path) -> Result<Self, DecomposeError> {
        let text = std::fs::read_to_string(path).map_err(|e| DecomposeError::Lexicon {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// The embedded default lexicon.
    pub fn builtin() -> &'static ClauseLexicon {
        static LEX: OnceLock<ClauseLexicon> = OnceLock::new();
        LEX.get_or_init(|| ClauseLexicon::parse(DEFAULT_LEXICON).expect("embedded lexicon parses"))
    }

    pub fn verb_kind(&self, word: &str) -> Option<EditOpKind> {
        self.verbs.get(&word.to_lowercase()).copied()
    }

    pub fn verbs(&self) -> impl Iterator<Item = (&str, EditOpKind)> {
        self.verbs.iter().map(|(v, k)| (v.as_str(), *k))
    }

    pub fn coordinators(&self) -> &[String] {
        &self.coordinators
    }

    pub fn is_background_noun(&self, word: &str) -> bool {
        self.background_nouns.iter().any(|b| b.eq_ignore_ascii_case(word))
    }

    pub fn reducers(&self) -> &[String] {
        &self.reducers
    }

    pub fn is_attribute(&self, word: &str) -> bool {
        self.attributes.iter().any(|a| a.eq_ignore_ascii_case(word))
    }
}

impl Default for ClauseLexicon {
    fn default() -> Self {
        Self::builtin().clone()
    }
}
