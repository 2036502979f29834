//! Trace serialization: PNG blobs plus a JSON metadata record.
//!
//! A run directory holds `initial.png`, `stepNN_mask.png`,
//! `stepNN_after.png`, `final.png` and `trace.json`. The same metadata
//! record is reused by the session store, where blob references are content
//! hashes instead of file names.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelinePolicy;
use crate::codec::{decode_image_png, decode_mask_png, encode_image_png, encode_mask_png};
use crate::types::{CoTStep, EditTrace, StepProvenance, StepResult, SubPrompt};

pub const TRACE_FILE: &str = "trace.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    /// 1-based.
    pub index: usize,
    pub sub_prompt: SubPrompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_step: Option<CoTStep>,
    pub inpaint_prompt: String,
    #[serde(default)]
    pub provenance: StepProvenance,
    pub elapsed_ms: u64,
    pub mask: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub initial: String,
    #[serde(rename = "final")]
    pub final_image: String,
    pub sub_prompts: Vec<SubPrompt>,
    pub steps: Vec<StepMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PipelinePolicy>,
    /// Set when the run aborted: 1-based failing step (0 for decomposition) and the error text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<(usize, String)>,
}

fn codec_io(e: crate::raster::RasterError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

impl TraceMeta {
    /// Store every image and mask of `trace` through `put(png_bytes, suggested_name)`,
    /// which returns the reference to record.
    pub fn from_trace(
        trace: &EditTrace,
        policy: Option<&PipelinePolicy>,
        put: &mut dyn FnMut(Vec<u8>, &str) -> io::Result<String>,
    ) -> io::Result<Self> {
        let initial = put(encode_image_png(&trace.initial).map_err(codec_io)?, "initial.png")?;
        let mut steps = Vec::with_capacity(trace.steps.len());
        for (i, s) in trace.steps.iter().enumerate() {
            let n = i + 1;
            let mask = put(encode_mask_png(&s.mask).map_err(codec_io)?, &format!("step{n:02}_mask.png"))?;
            let after = put(encode_image_png(&s.image_after).map_err(codec_io)?, &format!("step{n:02}_after.png"))?;
            steps.push(StepMeta {
                index: n,
                sub_prompt: s.sub_prompt.clone(),
                cot_step: s.cot_step.clone(),
                inpaint_prompt: s.inpaint_prompt.clone(),
                provenance: s.provenance,
                elapsed_ms: s.elapsed_ms,
                mask,
                after,
            });
        }
        let final_image = put(encode_image_png(&trace.final_image).map_err(codec_io)?, "final.png")?;
        Ok(Self {
            initial,
            final_image,
            sub_prompts: trace.sub_prompts.clone(),
            steps,
            policy: policy.cloned(),
            failure: None,
        })
    }

    /// Rebuild the trace, fetching PNG bytes by reference through `get`.
    pub fn to_trace(&self, get: &mut dyn FnMut(&str) -> io::Result<Vec<u8>>) -> io::Result<EditTrace> {
        let initial = decode_image_png(&get(&self.initial)?).map_err(codec_io)?;
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let mask = decode_mask_png(&get(&s.mask)?).map_err(codec_io)?;
            let image_after = decode_image_png(&get(&s.after)?).map_err(codec_io)?;
            if mask.dims() != initial.dims() || image_after.dims() != initial.dims() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("step {} blobs do not match the initial image size", s.index),
                ));
            }
            steps.push(StepResult {
                sub_prompt: s.sub_prompt.clone(),
                cot_step: s.cot_step.clone(),
                mask,
                inpaint_prompt: s.inpaint_prompt.clone(),
                image_after,
                provenance: s.provenance,
                elapsed_ms: s.elapsed_ms,
            });
        }
        let final_image = decode_image_png(&get(&self.final_image)?).map_err(codec_io)?;
        Ok(EditTrace { initial, sub_prompts: self.sub_prompts.clone(), steps, final_image })
    }

    /// Every blob reference in the record.
    pub fn blob_refs(&self) -> Vec<&str> {
        let mut out = vec![self.initial.as_str(), self.final_image.as_str()];
        for s in &self.steps {
            out.push(&s.mask);
            out.push(&s.after);
        }
        out
    }
}

/// Write a run directory. `failure` records an aborted run.
pub fn write_trace_dir(
    trace: &EditTrace,
    policy: &PipelinePolicy,
    failure: Option<(usize, String)>,
    dir: &Path,
) -> io::Result<TraceMeta> {
    fs::create_dir_all(dir)?;
    let mut meta = TraceMeta::from_trace(trace, Some(policy), &mut |bytes, name| {
        fs::write(dir.join(name), bytes)?;
        Ok(name.to_string())
    })?;
    meta.failure = failure;
    let json = serde_json::to_string_pretty(&meta).map_err(io::Error::other)?;
    fs::write(dir.join(TRACE_FILE), json)?;
    Ok(meta)
}

pub fn read_trace_dir(dir: &Path) -> io::Result<(EditTrace, TraceMeta)> {
    let text = fs::read_to_string(dir.join(TRACE_FILE))?;
    let meta: TraceMeta = serde_json::from_str(&text)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    let trace = meta.to_trace(&mut |name| fs::read(dir.join(name)))?;
    Ok((trace, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scene::generate_scene;
    use crate::backends::Backends;
    use crate::decompose::ClauseLexicon;
    use crate::pipeline::run_edit;

    #[test]
    fn directory_round_trip() {
        let s = generate_scene(9, None).unwrap();
        let name = s.objects[0].name();
        let policy = PipelinePolicy { mask_dilation_px: 0, ..Default::default() };
        let t = run_edit(&s.image, &format!("remove the {name}"), &policy, &Backends::mock(), ClauseLexicon::builtin()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace_dir(&t, &policy, None, dir.path()).unwrap();
        for f in ["initial.png", "step01_mask.png", "step01_after.png", "final.png", TRACE_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let (back, meta) = read_trace_dir(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(meta.policy, Some(policy));
    }
}
