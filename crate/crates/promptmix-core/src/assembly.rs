//! Builds the full model input: instruction prefix, mixed attribute prompt,
//! meta-data text, and retrieved exemplars.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data_model::{attribute_overlap, SeedExample};
use crate::error::{Error, Result};
use crate::mixer::MixedPrompt;
use crate::prompt_bank::SoftPromptBank;

/// Whether the seed example may appear among its own exemplars. During
/// tuning it must not: the model would learn to copy it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyMode {
    Tune,
    Generate,
}

/// Component toggles for ablation runs. Everything on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblyOptions {
    pub include_prefix: bool,
    pub include_attribute_prompt: bool,
    pub include_metadata: bool,
    pub include_exemplars: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            include_prefix: true,
            include_attribute_prompt: true,
            include_metadata: true,
            include_exemplars: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub exemplars: Vec<SeedExample>,
    /// Ids of the top-ranked candidates the exemplars were drawn from.
    pub candidate_pool_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    /// [prefix rows; mixed prompt rows], subject to the options.
    pub soft_block: Array2<f64>,
    /// Meta-data line plus numbered exemplar utterances.
    pub text_suffix: String,
    /// The seed utterance in tune mode, absent in generate mode.
    pub target: Option<String>,
}

/// Ranks the pool by attribute overlap with the seed (descending, ties by
/// id), keeps the `top` closest, and samples `k` of them uniformly without
/// replacement. In tune mode the seed itself is excluded from the pool.
pub fn retrieve_exemplars(
    seed: &SeedExample,
    pool: &[SeedExample],
    k: usize,
    top: usize,
    rng: &mut ChaCha8Rng,
    mode: AssemblyMode,
) -> Result<ExemplarSet> {
    let mut ranked: Vec<&SeedExample> = pool
        .iter()
        .filter(|ex| mode == AssemblyMode::Generate || ex.id != seed.id)
        .collect();
    if ranked.is_empty() {
        return Err(Error::Retrieval(format!(
            "no exemplar candidates available for seed '{}'",
            seed.id
        )));
    }
    let mut scored: Vec<(f64, &SeedExample)> = ranked
        .drain(..)
        .map(|ex| (attribute_overlap(&seed.attributes, &ex.attributes), ex))
        .collect();
    scored.sort_by(|(sa, ea), (sb, eb)| {
        sb.partial_cmp(sa).expect("overlap scores are finite").then_with(|| ea.id.cmp(&eb.id))
    });
    scored.truncate(top.min(scored.len()));
    let candidate_pool_ids: Vec<String> = scored.iter().map(|(_, ex)| ex.id.clone()).collect();

    let mut remaining: Vec<usize> = (0..scored.len()).collect();
    let mut exemplars = Vec::new();
    for _ in 0..k.min(scored.len()) {
        let pick = rng.random_range(0..remaining.len());
        let idx = remaining.swap_remove(pick);
        exemplars.push(scored[idx].1.clone());
    }
    Ok(ExemplarSet { exemplars, candidate_pool_ids })
}

/// Canonical meta-data template: "domain: <domain> | slots: <type=value; ...>"
/// with slots in (type, value) order. Without slots, only the domain clause.
pub fn serialize_metadata(domain: &str, slots: &[(String, String)]) -> String {
    if slots.is_empty() {
        return format!("domain: {domain}");
    }
    let mut sorted: Vec<&(String, String)> = slots.iter().collect();
    sorted.sort();
    let rendered: Vec<String> =
        sorted.iter().map(|(ty, value)| format!("{ty}={value}")).collect();
    format!("domain: {domain} | slots: {}", rendered.join("; "))
}

/// Looks up the soft prompt of every attribute, preserving attribute order.
/// A missing prompt names the attribute.
pub fn collect_prompts<'a>(
    bank: &'a SoftPromptBank,
    attributes: &[String],
) -> Result<Vec<&'a Array2<f64>>> {
    attributes
        .iter()
        .map(|attr| {
            bank.prompts
                .get(attr)
                .map(|p| &p.matrix)
                .ok_or_else(|| Error::Assembly { attribute: attr.clone() })
        })
        .collect()
}

/// Stacks the soft block and renders the text suffix for one example.
/// `mixer_out` must have been produced from exactly `seed.attributes`.
pub fn assemble(
    seed: &SeedExample,
    bank: &SoftPromptBank,
    mixer_out: &MixedPrompt,
    exemplars: &ExemplarSet,
    mode: AssemblyMode,
    options: &AssemblyOptions,
) -> Result<AssembledInput> {
    let d = bank.embed_dim;
    if options.include_attribute_prompt {
        // Surfaces a clear error even though the caller already mixed.
        collect_prompts(bank, &seed.attributes)?;
        if mixer_out.matrix.ncols() != d {
            return Err(Error::Argument(format!(
                "mixed prompt width {} does not match bank embed_dim {d}",
                mixer_out.matrix.ncols()
            )));
        }
    }
    let soft_block = match (options.include_prefix, options.include_attribute_prompt) {
        (true, true) => concatenate(
            Axis(0),
            &[bank.prefix.matrix.view(), mixer_out.matrix.view()],
        )
        .expect("widths match"),
        (true, false) => bank.prefix.matrix.clone(),
        (false, true) => mixer_out.matrix.clone(),
        (false, false) => Array2::zeros((0, d)),
    };

    let mut lines: Vec<String> = Vec::new();
    if options.include_metadata {
        lines.push(serialize_metadata(&seed.domain, &seed.slots));
    }
    if options.include_exemplars {
        for (i, ex) in exemplars.exemplars.iter().enumerate() {
            lines.push(format!("{}. {}", i + 1, ex.utterance));
        }
    }
    Ok(AssembledInput {
        soft_block,
        text_suffix: lines.join("\n"),
        target: if mode == AssemblyMode::Tune { Some(seed.utterance.clone()) } else { None },
    })
}
