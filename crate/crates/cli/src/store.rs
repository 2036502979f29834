//! File-backed session store.
//!
//! ```text
//! <root>/blobs/<sha256 hex>.png     content-addressed, immutable
//! <root>/sessions/<id>.json         one metadata record per session
//! ```
//!
//! Every write goes to a unique temp file, is fsynced, then renamed over the
//! target, so a crash leaves either the old or the new record. Blobs are
//! written before the record that references them.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotcanvas::pipeline::{StepStatus, TraceMeta};
use cotcanvas::types::{CoTStep, SubPrompt};

pub const STORE_SCHEMA: u32 = 1;
const BLOBS: &str = "blobs";
const SESSIONS: &str = "sessions";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub index: usize,
    pub sub_prompt: SubPrompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_step: Option<CoTStep>,
    pub mask: String,
    pub status: StepStatus,
    pub transitions: Vec<StepStatus>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub instruction: String,
    pub trace: TraceMeta,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Blob holding the current canvas.
    pub canvas: String,
    pub history: Vec<TraceMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<BatchRecord>,
}

impl SessionRecord {
    pub fn blob_refs(&self) -> Vec<&str> {
        let mut out = vec![self.canvas.as_str()];
        for t in &self.history {
            out.extend(t.blob_refs());
        }
        if let Some(b) = &self.pending {
            out.extend(b.trace.blob_refs());
            out.extend(b.proposals.iter().map(|p| p.mask.as_str()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

fn valid_blob_ref(r: &str) -> bool {
    r.len() == 64 && r.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    fs::File::open(dir)?.sync_all()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    sync_dir(dir)
}

impl SessionStore {
    /// Open (creating if needed) a store and sweep temp files left by a crash.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in [BLOBS, SESSIONS] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir)?;
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(".tmp-")) {
                    fs::remove_file(p)?;
                }
            }
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, r: &str) -> PathBuf {
        self.root.join(BLOBS).join(format!("{r}.png"))
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.root.join(SESSIONS).join(format!("{id}.json"))
    }

    /// Store bytes under their SHA-256 and return the reference.
    pub fn put_blob(&self, bytes: &[u8]) -> io::Result<String> {
        let r = hex(&Sha256::digest(bytes));
        let path = self.blob_path(&r);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(r)
    }

    pub fn get_blob(&self, r: &str) -> io::Result<Vec<u8>> {
        if !valid_blob_ref(r) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad blob reference {r:?}")));
        }
        fs::read(self.blob_path(r))
    }

    pub fn blob_count(&self) -> io::Result<usize> {
        Ok(fs::read_dir(self.root.join(BLOBS))?.count())
    }

    pub fn save(&self, rec: &SessionRecord) -> io::Result<()> {
        if !valid_session_id(&rec.session_id) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "bad session id"));
        }
        let json = serde_json::to_vec_pretty(rec).map_err(io::Error::other)?;
        write_atomic(&self.record_path(&rec.session_id), &json)
    }

    /// Load a record and check that every blob it references exists.
    pub fn load(&self, id: &str) -> io::Result<SessionRecord> {
        if !valid_session_id(id) {
            return Err(io::Error::new(io::ErrorKind::NotFound, format!("no session {id:?}")));
        }
        let text = fs::read(self.record_path(id))?;
        let rec: SessionRecord = serde_json::from_slice(&text)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("session {id}: {e}")))?;
        if rec.schema_version != STORE_SCHEMA {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("session {id}: schema {} (expected {STORE_SCHEMA})", rec.schema_version),
            ));
        }
        for r in rec.blob_refs() {
            if !valid_blob_ref(r) || !self.blob_path(r).is_file() {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("session {id}: missing blob {r}")));
            }
        }
        Ok(rec)
    }

    pub fn session_ids(&self) -> io::Result<Vec<String>> {
        let mut ids = Vec::new();
        for e in fs::read_dir(self.root.join(SESSIONS))? {
            let name = e?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                if valid_session_id(id) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let s = SessionStore::open(dir.path()).unwrap();
        let a = s.put_blob(b"abc").unwrap();
        assert_eq!(a, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(s.put_blob(b"abc").unwrap(), a);
        assert_eq!(s.blob_count().unwrap(), 1);
        assert_eq!(s.get_blob(&a).unwrap(), b"abc");
        assert!(s.get_blob("../x").is_err());
    }

    #[test]
    fn records_round_trip_and_dangling_refs_fail() {
        let dir = tempfile::tempdir().unwrap();
        let s = SessionStore::open(dir.path()).unwrap();
        let canvas = s.put_blob(b"png").unwrap();
        let rec = SessionRecord {
            schema_version: STORE_SCHEMA,
            session_id: "abc-1".into(),
            created_unix: 1,
            updated_unix: 2,
            canvas,
            history: vec![],
            pending: None,
        };
        s.save(&rec).unwrap();
        assert_eq!(s.load("abc-1").unwrap(), rec);
        assert_eq!(s.session_ids().unwrap(), ["abc-1"]);
        let bad = SessionRecord { session_id: "abc-2".into(), canvas: "0".repeat(64), ..rec };
        s.save(&bad).unwrap();
        assert_eq!(s.load("abc-2").unwrap_err().kind(), io::ErrorKind::InvalidData);
        assert_eq!(s.load("../etc").unwrap_err().kind(), io::ErrorKind::NotFound);
    }

    #[test]
    fn open_sweeps_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        SessionStore::open(dir.path()).unwrap();
        fs::write(dir.path().join(SESSIONS).join(".tmp-1-1"), b"partial").unwrap();
        SessionStore::open(dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path().join(SESSIONS)).unwrap().count(), 0);
    }
}
