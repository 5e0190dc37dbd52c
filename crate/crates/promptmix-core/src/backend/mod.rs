//! The boundary to teacher and student language models: embedding lookup,
//! loss-and-gradient evaluation with a soft prefix prepended, and text
//! generation. Two teacher implementations ship: a deterministic mock for
//! desk-scale runs and an adapter that drives a sidecar process hosting a
//! real pretrained model.

pub mod mock;
pub mod remote;
pub mod student;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Seq2seq,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub embed_dim: usize,
    pub max_input_rows: usize,
    pub kind: BackendKind,
}

/// Sampling controls for generation. Defaults are conservative; the request
/// for multiple utterances lives in the instruction prefix, so one returned
/// sequence per call is the norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub num_return_sequences: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_new_tokens: 48,
            temperature: 0.9,
            top_p: 0.95,
            num_return_sequences: 1,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(crate::error::Error::Argument(format!(
                "decode temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(crate::error::Error::Argument(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// One downstream training instance: utterance in, canonical label out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTask {
    pub input: String,
    pub target: String,
}

/// A frozen language model. Implementations must be deterministic: repeated
/// calls with identical arguments return identical results, and nothing in
/// this trait mutates model weights (checked via `param_checksum`).
pub trait LmBackend {
    fn descriptor(&self) -> BackendDescriptor;

    /// (n × d) embedding of the text under the backend's own tokenizer.
    fn embed_tokens(&self, text: &str) -> Result<Array2<f64>>;

    /// Token-level cross-entropy of `target` given the soft block and text
    /// suffix, plus the gradient w.r.t. the soft block only.
    fn loss_and_input_grads(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        target: &str,
    ) -> Result<(f64, Array2<f64>)>;

    /// `params.num_return_sequences` sampled texts, deterministic given
    /// `params.seed`.
    fn generate(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        params: &DecodeParams,
    ) -> Result<Vec<String>>;

    /// Checksum over all model weights; unchanged across any use of the
    /// backend.
    fn param_checksum(&self) -> Result<u64>;
}
