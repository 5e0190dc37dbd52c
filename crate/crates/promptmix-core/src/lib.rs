//! Controlled data augmentation for low-resource NLU: per-attribute soft
//! prompts tuned against a frozen language model, attribute mixing, prompt
//! assembly with exemplar retrieval, over-generation with a two-factor
//! denoising filter, student training on the merged corpus, and evaluation.
//!
//! Everything is deterministic under a fixed seed, including the mock
//! backend, so full pipeline runs are bit-reproducible at desk scale.

pub mod assembly;
pub mod backend;
pub mod data_model;
pub mod error;
pub mod evalsuite;
pub mod generator;
pub mod gradcheck;
pub mod mixer;
pub mod pipeline;
pub mod prompt_bank;
pub mod text;
pub mod tuner;

pub use assembly::{retrieve_exemplars, AssembledInput, AssemblyMode, AssemblyOptions, ExemplarSet};
pub use backend::{BackendDescriptor, BackendKind, DecodeParams, LmBackend, StudentTask};
pub use data_model::{AttributeSpec, DatasetSchema, SeedExample, Split, TaskKind};
pub use error::{Error, Result};
pub use evalsuite::EvalReport;
pub use generator::{GenConfig, SynthesizedExample};
pub use mixer::{MixStrategy, MixedPrompt, MixerGrads, MixerHyper, MixerParams};
pub use pipeline::{RunConfig, RunManifest, RunPaths, StageOutcome, TeacherKind};
pub use prompt_bank::{InstructionPrefix, SoftPrompt, SoftPromptBank};
pub use tuner::{TuneConfig, TuneOutcome, TuneReport};
