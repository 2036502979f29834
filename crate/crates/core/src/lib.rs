//! Chain-of-thought instruction-guided image editing.
//!
//! A complex instruction is split into simple sub-prompts, each one is
//! reasoned about and localized by a multimodal backend, re-prompted, and
//! applied by a mask-confined inpainter. Everything outside the mask union
//! stays byte-identical.

pub mod backends;
pub mod codec;
pub mod cotparse;
pub mod datagen;
pub mod decompose;
pub mod evalx;
pub mod pipeline;
pub mod raster;
pub mod templates;
pub mod types;

pub use backends::{
    BackendError, Backends, EmbeddingBackend, InpaintBackend, JudgeBackend, JudgeCriterion, MllmBackend,
    SegmentationBackend,
};
pub use cotparse::{format_cot, parse_cot, CoTError};
pub use decompose::{decompose_grammar, ClauseLexicon, DecomposeError};
pub use pipeline::{run_edit, PipelineError, PipelinePolicy};
pub use raster::{BinaryMask, RasterError, RasterImage};
pub use types::{CoTResponse, CoTStep, EditInstruction, EditOpKind, EditSample, EditTrace, StepResult, SubPrompt};
