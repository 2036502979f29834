//! On-disk dataset layout.
//!
//! ```text
//! <dir>/records.jsonl     one record per line
//! <dir>/manifest.json     counts and schema version
//! <dir>/images/*.png      source, mask, target (and edited) per record
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{format_sft, SftDialogue, SourceRecord};
use crate::codec::{decode_image_png, decode_mask_png, encode_image_png, encode_mask_png};
use crate::decompose::{decompose_grammar, ClauseLexicon};
use crate::raster::RasterImage;
use crate::types::{CoTResponse, EditInstruction, EditSample};

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("record at line {line} references missing file {path}")]
    Dangling { line: usize, path: String },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// A sample plus the optional raw turns and an optional edited image
/// (evaluation corpora carry the latter).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub sample: EditSample,
    pub turns: Vec<String>,
    pub edited: Option<RasterImage>,
}

impl From<EditSample> for DatasetEntry {
    fn from(sample: EditSample) -> Self {
        Self { sample, turns: Vec::new(), edited: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    schema_version: u32,
    sample_id: String,
    instruction: EditInstruction,
    source: String,
    mask: String,
    target: String,
    cot: CoTResponse,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    turns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edited: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub source_tag: String,
    pub count: usize,
    /// Sub-prompt kinds over all instructions; unparseable ones count as UNCLASSIFIED.
    pub per_kind: BTreeMap<String, usize>,
    /// Records the generator attempted, before malformed generations were dropped.
    pub attempted: usize,
    pub retained: usize,
}

fn file_stem(i: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    format!("{i:05}_{safe}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Write `entries` under `dir`. `attempted` defaults to the entry count.
pub fn write_dataset(
    entries: &[DatasetEntry],
    dir: &Path,
    source_tag: &str,
    attempted: Option<usize>,
) -> Result<DatasetManifest, DatasetError> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).map_err(|e| io_err(&records_path, e))?;
    let mut out = BufWriter::new(file);
    let mut per_kind: BTreeMap<String, usize> = BTreeMap::new();
    let lex = ClauseLexicon::builtin();
    for (i, e) in entries.iter().enumerate() {
        let s = &e.sample;
        s.validate().map_err(|v| DatasetError::Manifest(format!("sample {}: {v}", s.sample_id)))?;
        let stem = file_stem(i, &s.sample_id);
        let rel = |kind: &str| format!("{IMAGES_DIR}/{stem}_{kind}.png");
        let png = |r: crate::raster::Result<Vec<u8>>| r.map_err(|err| io_err(dir, err));
        write_file(&dir.join(rel("source")), &png(encode_image_png(&s.source))?)?;
        write_file(&dir.join(rel("mask")), &png(encode_mask_png(&s.mask))?)?;
        write_file(&dir.join(rel("target")), &png(encode_image_png(&s.target))?)?;
        let edited = match &e.edited {
            Some(img) => {
                write_file(&dir.join(rel("edited")), &png(encode_image_png(img))?)?;
                Some(rel("edited"))
            }
            None => None,
        };
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            sample_id: s.sample_id.clone(),
            instruction: s.instruction.clone(),
            source: rel("source"),
            mask: rel("mask"),
            target: rel("target"),
            cot: s.cot.clone(),
            turns: e.turns.clone(),
            edited,
        };
        let line = serde_json::to_string(&rec).map_err(|err| io_err(&records_path, err))?;
        writeln!(out, "{line}").map_err(|err| io_err(&records_path, err))?;
        match decompose_grammar(s.instruction.as_str(), lex) {
            Ok(sps) => {
                for sp in sps {
                    *per_kind.entry(sp.kind.to_string()).or_default() += 1;
                }
            }
            Err(_) => *per_kind.entry("UNCLASSIFIED".into()).or_default() += 1,
        }
    }
    out.flush().map_err(|e| io_err(&records_path, e))?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        source_tag: source_tag.to_string(),
        count: entries.len(),
        per_kind,
        attempted: attempted.unwrap_or(entries.len()).max(entries.len()),
        retained: entries.len(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&mpath, e))?;
    write_file(&mpath, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
        path: mpath.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn load(dir: &Path, rel: &str, line: usize) -> Result<Vec<u8>, DatasetError> {
    let p: PathBuf = dir.join(rel);
    if !p.is_file() {
        return Err(DatasetError::Dangling { line, path: rel.to_string() });
    }
    fs::read(&p).map_err(|e| io_err(&p, e))
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<DatasetEntry>, DatasetManifest), DatasetError> {
    let manifest = read_manifest(dir)?;
    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&records_path).map_err(|e| io_err(&records_path, e))?;
    let rp = records_path.display().to_string();
    let corrupt = |line: usize, message: String| DatasetError::Corrupt { path: rp.clone(), line, message };
    let mut entries = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| corrupt(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| corrupt(n, e.to_string()))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(corrupt(n, format!("unsupported schema version {}", rec.schema_version)));
        }
        let bad = |e: crate::raster::RasterError| corrupt(n, e.to_string());
        let source = decode_image_png(&load(dir, &rec.source, n)?).map_err(bad)?;
        let mask = decode_mask_png(&load(dir, &rec.mask, n)?).map_err(bad)?;
        let target = decode_image_png(&load(dir, &rec.target, n)?).map_err(bad)?;
        let edited = match &rec.edited {
            Some(p) => Some(decode_image_png(&load(dir, p, n)?).map_err(bad)?),
            None => None,
        };
        let sample = EditSample {
            sample_id: rec.sample_id,
            source,
            instruction: rec.instruction,
            mask,
            target,
            cot: rec.cot,
        };
        sample.validate().map_err(|e| corrupt(n, e.to_string()))?;
        entries.push(DatasetEntry { sample, turns: rec.turns, edited });
    }
    if entries.len() != manifest.count {
        return Err(DatasetError::Manifest(format!(
            "manifest declares {} records, file has {}",
            manifest.count,
            entries.len()
        )));
    }
    Ok((entries, manifest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLine {
    pub sample_id: String,
    pub image: String,
    #[serde(flatten)]
    pub dialogue: SftDialogue,
}

/// Write one SFT dialogue per line. Image paths are relative to the dataset dir.
pub fn write_sft(entries: &[DatasetEntry], out: &Path) -> Result<usize, DatasetError> {
    let file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    let mut w = BufWriter::new(file);
    for (i, e) in entries.iter().enumerate() {
        let dialogue = format_sft(&e.sample).map_err(|err| io_err(out, err))?;
        let line = SftLine {
            sample_id: e.sample.sample_id.clone(),
            image: format!("{IMAGES_DIR}/{}_source.png", file_stem(i, &e.sample.sample_id)),
            dialogue,
        };
        writeln!(w, "{}", serde_json::to_string(&line).map_err(|err| io_err(out, err))?)
            .map_err(|err| io_err(out, err))?;
    }
    w.flush().map_err(|e| io_err(out, e))?;
    Ok(entries.len())
}

pub fn read_sft(path: &Path) -> Result<Vec<SftLine>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub const MAGICBRUSH_INDEX: &str = "index.txt";

/// Read a MagicBrush-style tree: `index.txt` lists sample directories, each
/// holding `source.png`, `mask.png`, `target.png` and `instruction.txt` with
/// one editing turn per line. Turns are joined with ", and ".
pub fn ingest_magicbrush(root: &Path) -> Result<Vec<SourceRecord>, DatasetError> {
    let index = root.join(MAGICBRUSH_INDEX);
    let text = fs::read_to_string(&index).map_err(|e| io_err(&index, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let name = line.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        let corrupt = |message: String| DatasetError::Corrupt {
            path: index.display().to_string(),
            line: n,
            message,
        };
        let rel = |f: &str| format!("{name}/{f}");
        let source = decode_image_png(&load(root, &rel("source.png"), n)?).map_err(|e| corrupt(e.to_string()))?;
        let mask = decode_mask_png(&load(root, &rel("mask.png"), n)?).map_err(|e| corrupt(e.to_string()))?;
        let target = decode_image_png(&load(root, &rel("target.png"), n)?).map_err(|e| corrupt(e.to_string()))?;
        let raw = String::from_utf8(load(root, &rel("instruction.txt"), n)?)
            .map_err(|e| corrupt(e.to_string()))?;
        let turns: Vec<String> = raw
            .lines()
            .map(|l| l.trim().trim_end_matches('.').trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if turns.is_empty() {
            return Err(corrupt(format!("{name}: empty instruction.txt")));
        }
        out.push(SourceRecord {
            sample_id: name.to_string(),
            source,
            mask,
            target,
            instruction: turns.join(", and "),
            turns,
        });
    }
    Ok(out)
}
