//! The learnable instruction prefix and per-attribute soft prompts, their
//! text-seeded initialization, and versioned persistence.
//!
//! Checkpoint container (`.spbank`): an 8-byte magic, a little-endian u64
//! header length, a JSON header (format version, embed width, tensor names
//! and shapes, optional mixer metadata), then the tensors as row-major
//! little-endian f64, concatenated in header order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data_model::{AttributeSpec, DatasetSchema};
use crate::error::{Error, Result};
use crate::mixer::{MixStrategy, MixerParams};

/// Rows of every attribute prompt.
pub const ATTR_ROWS: usize = 20;
/// Rows of the instruction prefix.
pub const PREFIX_ROWS: usize = 100;
/// The fixed instruction phrase embedded to initialize the prefix. The "X"
/// is embedded literally.
pub const PREFIX_PHRASE: &str = "Show me three distinct utterances that all express the X";
/// Checkpoint format version; loads accept any file with the same major.
pub const FORMAT_VERSION: &str = "1.1";
/// Recommended checkpoint file extension.
pub const CHECKPOINT_EXTENSION: &str = "spbank";

const MAGIC: &[u8; 8] = b"SPBANK01";

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub attribute_id: String,
    /// (20 × d).
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionPrefix {
    /// (100 × d).
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPromptBank {
    pub prefix: InstructionPrefix,
    pub prompts: BTreeMap<String, SoftPrompt>,
    pub embed_dim: usize,
    pub version: String,
}

/// Repeats or truncates rows to exactly `rows`: row i of the result is row
/// (i mod n) of the source.
fn cyclic_resize(src: &Array2<f64>, rows: usize) -> Array2<f64> {
    let n = src.nrows();
    Array2::from_shape_fn((rows, src.ncols()), |(i, j)| src[(i % n, j)])
}

fn embed_nonempty<F>(embed: &F, text: &str, what: &str) -> Result<Array2<f64>>
where
    F: Fn(&str) -> Result<Array2<f64>>,
{
    let emb = embed(text).map_err(|e| Error::Backend(format!("embedding {what}: {e}")))?;
    if emb.nrows() == 0 {
        return Err(Error::Backend(format!("embedder returned no tokens for {what}")));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("embedding for {what} contains non-finite values")));
    }
    Ok(emb)
}

/// Builds one attribute prompt from the embedding of
/// "<name> is <description>", cyclically padded or truncated to 20 rows.
pub fn initialize_attribute_prompt<F>(spec: &AttributeSpec, embed: F) -> Result<SoftPrompt>
where
    F: Fn(&str) -> Result<Array2<f64>>,
{
    let text = format!("{} is {}", spec.name, spec.description);
    let emb = embed_nonempty(&embed, &text, &format!("attribute '{}'", spec.id))?;
    Ok(SoftPrompt { attribute_id: spec.id.clone(), matrix: cyclic_resize(&emb, ATTR_ROWS) })
}

/// Builds the instruction prefix from the fixed phrase, padded or truncated
/// to 100 rows by the same cyclic rule.
pub fn initialize_prefix<F>(embed: F) -> Result<InstructionPrefix>
where
    F: Fn(&str) -> Result<Array2<f64>>,
{
    let emb = embed_nonempty(&embed, PREFIX_PHRASE, "the instruction prefix")?;
    Ok(InstructionPrefix { matrix: cyclic_resize(&emb, PREFIX_ROWS) })
}

/// Initializes a bank covering every attribute in the schema ontology.
pub fn initialize_bank<F>(schema: &DatasetSchema, embed: F) -> Result<SoftPromptBank>
where
    F: Fn(&str) -> Result<Array2<f64>>,
{
    let prefix = initialize_prefix(&embed)?;
    let embed_dim = prefix.matrix.ncols();
    let mut prompts = BTreeMap::new();
    for spec in &schema.ontology {
        let prompt = initialize_attribute_prompt(spec, &embed)?;
        if prompt.matrix.ncols() != embed_dim {
            return Err(Error::Backend(format!(
                "attribute '{}' embedded with width {}, expected {embed_dim}",
                spec.id,
                prompt.matrix.ncols()
            )));
        }
        prompts.insert(spec.id.clone(), prompt);
    }
    Ok(SoftPromptBank { prefix, prompts, embed_dim, version: FORMAT_VERSION.to_string() })
}

impl SoftPromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.prefix.matrix.dim() != (PREFIX_ROWS, self.embed_dim) {
            return Err(Error::Corrupt(format!(
                "prefix shape {:?} does not match ({PREFIX_ROWS}, {})",
                self.prefix.matrix.dim(),
                self.embed_dim
            )));
        }
        for (id, prompt) in &self.prompts {
            if prompt.matrix.dim() != (ATTR_ROWS, self.embed_dim) {
                return Err(Error::Corrupt(format!(
                    "prompt '{id}' shape {:?} does not match ({ATTR_ROWS}, {})",
                    prompt.matrix.dim(),
                    self.embed_dim
                )));
            }
            if prompt.matrix.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("prompt '{id}' contains non-finite values")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MixerMeta {
    strategy: MixStrategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    embed_dim: usize,
    tensors: Vec<TensorMeta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mixer: Option<MixerMeta>,
}

fn push_tensor(
    tensors: &mut Vec<TensorMeta>,
    payload: &mut Vec<u8>,
    name: &str,
    rows: usize,
    cols: usize,
    values: impl Iterator<Item = f64>,
) {
    tensors.push(TensorMeta { name: name.to_string(), rows, cols });
    let mut count = 0usize;
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
        count += 1;
    }
    debug_assert_eq!(count, rows * cols);
}

/// Saves a bank plus optional mixer parameters. The write is atomic: a
/// temporary sibling file is renamed into place.
pub fn save_checkpoint(
    bank: &SoftPromptBank,
    mixer: Option<&MixerParams>,
    path: &Path,
) -> Result<()> {
    bank.validate()?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let d = bank.embed_dim;
    push_tensor(&mut tensors, &mut payload, "prefix", PREFIX_ROWS, d, bank.prefix.matrix.iter().copied());
    for (id, prompt) in &bank.prompts {
        push_tensor(
            &mut tensors,
            &mut payload,
            &format!("attr:{id}"),
            ATTR_ROWS,
            d,
            prompt.matrix.iter().copied(),
        );
    }
    let mixer_meta = match mixer {
        None => None,
        Some(MixerParams::Concat) => Some(MixerMeta {
            strategy: MixStrategy::Concat,
            temperature: None,
            n_max: None,
            channels: None,
            kernel: None,
        }),
        Some(MixerParams::Pooling) => Some(MixerMeta {
            strategy: MixStrategy::Pooling,
            temperature: None,
            n_max: None,
            channels: None,
            kernel: None,
        }),
        Some(MixerParams::Attention { w_q, temperature }) => {
            push_tensor(
                &mut tensors,
                &mut payload,
                "mixer:w_q",
                w_q.nrows(),
                w_q.ncols(),
                w_q.iter().copied(),
            );
            Some(MixerMeta {
                strategy: MixStrategy::Attention,
                temperature: Some(*temperature),
                n_max: None,
                channels: None,
                kernel: None,
            })
        }
        Some(MixerParams::Bottleneck { w_down, w_up, temperature }) => {
            push_tensor(
                &mut tensors,
                &mut payload,
                "mixer:w_down",
                w_down.nrows(),
                w_down.ncols(),
                w_down.iter().copied(),
            );
            push_tensor(
                &mut tensors,
                &mut payload,
                "mixer:w_up",
                w_up.nrows(),
                w_up.ncols(),
                w_up.iter().copied(),
            );
            Some(MixerMeta {
                strategy: MixStrategy::Bottleneck,
                temperature: Some(*temperature),
                n_max: None,
                channels: None,
                kernel: None,
            })
        }
        Some(MixerParams::Convolution { conv1_w, conv1_b, conv2_w, conv2_b, n_max }) => {
            let (c, cin, kh, kw) = conv1_w.dim();
            push_tensor(
                &mut tensors,
                &mut payload,
                "mixer:conv1_w",
                c,
                cin * kh * kw,
                conv1_w.iter().copied(),
            );
            push_tensor(&mut tensors, &mut payload, "mixer:conv1_b", 1, c, conv1_b.iter().copied());
            push_tensor(
                &mut tensors,
                &mut payload,
                "mixer:conv2_w",
                1,
                c * kh * kw,
                conv2_w.iter().copied(),
            );
            push_tensor(&mut tensors, &mut payload, "mixer:conv2_b", 1, 1, conv2_b.iter().copied());
            Some(MixerMeta {
                strategy: MixStrategy::Convolution,
                temperature: None,
                n_max: Some(*n_max),
                channels: Some(c),
                kernel: Some(kh),
            })
        }
    };
    let header = Header {
        version: bank.version.clone(),
        embed_dim: d,
        tensors,
        mixer: mixer_meta,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Corrupt(format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    crate::pipeline::write_atomic(path, &bytes)
}

pub fn save_bank(bank: &SoftPromptBank, path: &Path) -> Result<()> {
    save_checkpoint(bank, None, path)
}

fn major_of(version: &str) -> Option<&str> {
    version.split('.').next()
}

struct TensorReader<'a> {
    metas: &'a [TensorMeta],
    payload: &'a [u8],
    offset: usize,
    index: usize,
}

impl<'a> TensorReader<'a> {
    fn next(&mut self, expect_name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let meta = self.metas.get(self.index).ok_or_else(|| {
            Error::Corrupt(format!("missing tensor '{expect_name}' in header"))
        })?;
        if meta.name != expect_name {
            return Err(Error::Corrupt(format!(
                "expected tensor '{expect_name}', found '{}'",
                meta.name
            )));
        }
        self.index += 1;
        let len = meta.rows * meta.cols * 8;
        let end = self.offset + len;
        if end > self.payload.len() {
            return Err(Error::Corrupt(format!("tensor '{}' overruns the payload", meta.name)));
        }
        let chunk = &self.payload[self.offset..end];
        self.offset = end;
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Ok((meta.rows, meta.cols, values))
    }
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(SoftPromptBank, Option<MixerParams>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(Error::Corrupt(format!("{} is not a prompt-bank checkpoint", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Corrupt("header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Corrupt(format!("header decode: {e}")))?;
    let supported = major_of(FORMAT_VERSION);
    if major_of(&header.version) != supported {
        return Err(Error::VersionMismatch {
            found: header.version.clone(),
            supported: FORMAT_VERSION.to_string(),
        });
    }
    let payload = &bytes[16 + header_len..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut reader =
        TensorReader { metas: &header.tensors, payload, offset: 0, index: 0 };
    let d = header.embed_dim;

    let (rows, cols, values) = reader.next("prefix")?;
    if rows != PREFIX_ROWS || cols != d {
        return Err(Error::Corrupt(format!(
            "prefix tensor is {rows}x{cols}, expected {PREFIX_ROWS}x{d}"
        )));
    }
    let prefix = InstructionPrefix {
        matrix: Array2::from_shape_vec((rows, cols), values).expect("shape matches length"),
    };

    let mut prompts = BTreeMap::new();
    while reader
        .metas
        .get(reader.index)
        .map(|m| m.name.starts_with("attr:"))
        .unwrap_or(false)
    {
        let name = reader.metas[reader.index].name.clone();
        let id = name["attr:".len()..].to_string();
        let (rows, cols, values) = reader.next(&name)?;
        if rows != ATTR_ROWS || cols != d {
            return Err(Error::Corrupt(format!(
                "prompt '{id}' tensor is {rows}x{cols}, expected {ATTR_ROWS}x{d}"
            )));
        }
        prompts.insert(
            id.clone(),
            SoftPrompt {
                attribute_id: id,
                matrix: Array2::from_shape_vec((rows, cols), values).expect("shape matches length"),
            },
        );
    }

    let mixer = match &header.mixer {
        None => None,
        Some(meta) => Some(load_mixer(meta, &mut reader, d)?),
    };

    let bank = SoftPromptBank { prefix, prompts, embed_dim: d, version: header.version };
    bank.validate()?;
    if let Some(params) = &mixer {
        params.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    Ok((bank, mixer))
}

fn load_mixer(meta: &MixerMeta, reader: &mut TensorReader<'_>, d: usize) -> Result<MixerParams> {
    let need_temp = || -> Result<f64> {
        meta.temperature
            .ok_or_else(|| Error::Corrupt("mixer metadata is missing the temperature".into()))
    };
    match meta.strategy {
        MixStrategy::Concat => Ok(MixerParams::Concat),
        MixStrategy::Pooling => Ok(MixerParams::Pooling),
        MixStrategy::Attention => {
            let (rows, cols, values) = reader.next("mixer:w_q")?;
            if rows != d || cols != d {
                return Err(Error::Corrupt(format!("w_q is {rows}x{cols}, expected {d}x{d}")));
            }
            Ok(MixerParams::Attention {
                w_q: Array2::from_shape_vec((rows, cols), values).expect("shape matches length"),
                temperature: need_temp()?,
            })
        }
        MixStrategy::Bottleneck => {
            let (dr, b, down) = reader.next("mixer:w_down")?;
            let (b2, du, up) = reader.next("mixer:w_up")?;
            if dr != d || du != d || b != b2 {
                return Err(Error::Corrupt(format!(
                    "bottleneck tensors {dr}x{b} / {b2}x{du} do not fit embed_dim {d}"
                )));
            }
            Ok(MixerParams::Bottleneck {
                w_down: Array2::from_shape_vec((dr, b), down).expect("shape matches length"),
                w_up: Array2::from_shape_vec((b2, du), up).expect("shape matches length"),
                temperature: need_temp()?,
            })
        }
        MixStrategy::Convolution => {
            let (Some(n_max), Some(channels), Some(kernel)) = (meta.n_max, meta.channels, meta.kernel)
            else {
                return Err(Error::Corrupt("convolution metadata is incomplete".into()));
            };
            let (c, flat1, w1) = reader.next("mixer:conv1_w")?;
            if c != channels || flat1 != n_max * kernel * kernel {
                return Err(Error::Corrupt("conv1 tensor does not match its metadata".into()));
            }
            let (_, cb, b1) = reader.next("mixer:conv1_b")?;
            if cb != channels {
                return Err(Error::Corrupt("conv1 bias does not match channel count".into()));
            }
            let (_, flat2, w2) = reader.next("mixer:conv2_w")?;
            if flat2 != channels * kernel * kernel {
                return Err(Error::Corrupt("conv2 tensor does not match its metadata".into()));
            }
            let (_, one, b2) = reader.next("mixer:conv2_b")?;
            if one != 1 {
                return Err(Error::Corrupt("conv2 bias must have exactly one entry".into()));
            }
            Ok(MixerParams::Convolution {
                conv1_w: Array4::from_shape_vec((channels, n_max, kernel, kernel), w1)
                    .expect("shape matches length"),
                conv1_b: Array1::from_vec(b1),
                conv2_w: Array4::from_shape_vec((1, channels, kernel, kernel), w2)
                    .expect("shape matches length"),
                conv2_b: Array1::from_vec(b2),
                n_max,
            })
        }
    }
}

pub fn load_bank(path: &Path) -> Result<SoftPromptBank> {
    Ok(load_checkpoint(path)?.0)
}
