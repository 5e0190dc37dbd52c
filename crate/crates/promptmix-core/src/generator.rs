//! Controlled synthesis from tuned prompts: over-generate candidates per
//! seed, copy the seed's labels onto every candidate, score each candidate
//! by attribute rarity and seed similarity, and filter back down to the
//! target corpus size by weighted sampling without replacement.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, collect_prompts, retrieve_exemplars, AssemblyMode, AssemblyOptions, ExemplarSet};
use crate::backend::{DecodeParams, LmBackend};
use crate::data_model::{attribute_frequencies, SeedExample, Split};
use crate::error::{Error, Result};
use crate::mixer::{mix, MixStrategy, MixerParams};
use crate::prompt_bank::SoftPromptBank;
use crate::text::{fnv1a64, mix_seed, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_id: String,
    pub exemplar_ids: Vec<String>,
    pub decode_seed: u64,
    pub strategy: MixStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedExample {
    pub utterance: String,
    /// Copied verbatim from the conditioning seed.
    pub attributes: Vec<String>,
    pub slots: Vec<(String, String)>,
    pub domain: String,
    pub provenance: Provenance,
    /// Both weights live in (0, 1] once scored; 1.0 before scoring.
    pub weight_rarity: f64,
    pub weight_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_per_seed: usize,
    pub overgen_factor: f64,
    pub decode: DecodeParams,
    /// Lower bound on similarity weights; keeps zero-overlap candidates
    /// selectable and the weight invariant strict.
    pub similarity_floor: f64,
    pub exemplar_k: usize,
    pub exemplar_top: usize,
    /// Also generate for attribute pairs that never co-occur in the seeds.
    pub recombine_unseen: bool,
    /// Drop exact duplicate utterances across the whole candidate pool.
    pub dedup_corpus: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_per_seed: 4,
            overgen_factor: 1.2,
            decode: DecodeParams::default(),
            similarity_floor: 1e-3,
            exemplar_k: 2,
            exemplar_top: 10,
            recombine_unseen: false,
            dedup_corpus: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_seed < 1 {
            return Err(Error::Argument("n_per_seed must be at least 1".into()));
        }
        if !(self.overgen_factor >= 1.0) {
            return Err(Error::Argument(format!(
                "overgen_factor must be at least 1, got {}",
                self.overgen_factor
            )));
        }
        if !(self.similarity_floor > 0.0 && self.similarity_floor <= 1.0) {
            return Err(Error::Argument(format!(
                "similarity_floor must be in (0, 1], got {}",
                self.similarity_floor
            )));
        }
        self.decode.validate()
    }

    /// Candidates requested per generation unit.
    pub fn per_unit_candidates(&self) -> usize {
        (self.n_per_seed as f64 * self.overgen_factor).ceil() as usize
    }
}

/// Splits raw backend output into clean utterances: one per line, leading
/// enumeration markers ("1.", "-", "•") stripped, empties and exact
/// duplicates within the same raw text dropped.
pub fn split_generations(raw: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in raw.lines() {
        let mut text = line.trim();
        let digits = text.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 && text[digits..].starts_with('.') {
            text = &text[digits + 1..];
        } else if let Some(rest) = text.strip_prefix('-') {
            text = rest;
        } else if let Some(rest) = text.strip_prefix('•') {
            text = rest;
        }
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        if seen.insert(text.to_string()) {
            out.push(text.to_string());
        }
    }
    out
}

/// Unordered attribute pairs that occur in the seed pool individually but
/// never together in one example.
pub fn unseen_pairs(seeds: &[SeedExample]) -> Vec<(String, String)> {
    let mut all = BTreeSet::new();
    let mut together: BTreeSet<(String, String)> = BTreeSet::new();
    for ex in seeds {
        for a in &ex.attributes {
            all.insert(a.clone());
        }
        for a in &ex.attributes {
            for b in &ex.attributes {
                if a < b {
                    together.insert((a.clone(), b.clone()));
                }
            }
        }
    }
    let attrs: Vec<&String> = all.iter().collect();
    let mut out = Vec::new();
    for i in 0..attrs.len() {
        for j in i + 1..attrs.len() {
            let pair = (attrs[i].clone(), attrs[j].clone());
            if !together.contains(&pair) {
                out.push(pair);
            }
        }
    }
    out
}

/// The conditioning units of one generation run: every real seed, plus one
/// virtual seed per unseen attribute pair when recombination is on. Virtual
/// seeds have an empty utterance and ids prefixed "recombined:".
pub fn generation_units(seeds: &[SeedExample], cfg: &GenConfig) -> Vec<SeedExample> {
    let mut units: Vec<SeedExample> = seeds.to_vec();
    if cfg.recombine_unseen && !seeds.is_empty() {
        let domain = seeds[0].domain.clone();
        for (a, b) in unseen_pairs(seeds) {
            units.push(SeedExample {
                id: format!("recombined:{a}+{b}"),
                utterance: String::new(),
                attributes: vec![a, b],
                slots: Vec::new(),
                domain: domain.clone(),
                split: Split::TargetTrain,
            });
        }
    }
    units
}

/// Over-generates candidates for every generation unit. Each unit requests
/// ceil(n_per_seed x overgen_factor) utterances through as many generate
/// calls as needed; surplus within a call is truncated so every unit
/// contributes the same count. Exemplars always come from the real seeds.
/// Exemplars for one generation unit. A real seed ranks the whole pool at
/// once. A recombined unit has no home neighborhood, so it retrieves per
/// attribute from that attribute's own seeds, guaranteeing every conditioned
/// attribute is represented in the prompt text.
fn unit_exemplars(
    unit: &SeedExample,
    seeds: &[SeedExample],
    is_virtual: bool,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExemplarSet> {
    if !is_virtual {
        return retrieve_exemplars(
            unit,
            seeds,
            cfg.exemplar_k,
            cfg.exemplar_top,
            rng,
            AssemblyMode::Generate,
        );
    }
    let mut exemplars = Vec::new();
    let mut pool_ids = Vec::new();
    let mut seen = BTreeSet::new();
    for attr in &unit.attributes {
        let pool: Vec<SeedExample> = seeds
            .iter()
            .filter(|s| s.attributes.iter().any(|a| a == attr))
            .cloned()
            .collect();
        if pool.is_empty() {
            return Err(Error::Retrieval(format!(
                "no seeds carry attribute '{attr}' for recombined unit '{}'",
                unit.id
            )));
        }
        let probe = SeedExample { attributes: vec![attr.clone()], ..unit.clone() };
        let sub = retrieve_exemplars(
            &probe,
            &pool,
            cfg.exemplar_k,
            cfg.exemplar_top,
            rng,
            AssemblyMode::Generate,
        )?;
        for ex in sub.exemplars {
            if seen.insert(ex.id.clone()) {
                exemplars.push(ex);
            }
        }
        for id in sub.candidate_pool_ids {
            if !pool_ids.contains(&id) {
                pool_ids.push(id);
            }
        }
    }
    Ok(ExemplarSet { exemplars, candidate_pool_ids: pool_ids })
}

pub fn synthesize(
    bank: &SoftPromptBank,
    mixer: &MixerParams,
    seeds: &[SeedExample],
    backend: &dyn LmBackend,
    cfg: &GenConfig,
    options: &AssemblyOptions,
) -> Result<Vec<SynthesizedExample>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let real_ids: BTreeSet<&str> = seeds.iter().map(|s| s.id.as_str()).collect();
    let needed = cfg.per_unit_candidates();
    let mut out = Vec::new();
    for unit in generation_units(seeds, cfg) {
        let is_virtual = !real_ids.contains(unit.id.as_str());
        let mut collected: Vec<SynthesizedExample> = Vec::new();
        let mut attempt: u64 = 0;
        let max_attempts = (needed as u64) * 4 + 4;
        while collected.len() < needed && attempt < max_attempts {
            let exemplars = if options.include_exemplars {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    cfg.seed,
                    fnv1a64(b"gen-exemplars"),
                    fnv1a64(unit.id.as_bytes()),
                    attempt,
                ]));
                unit_exemplars(&unit, seeds, is_virtual, cfg, &mut rng)?
            } else {
                ExemplarSet { exemplars: Vec::new(), candidate_pool_ids: Vec::new() }
            };
            let prompts = collect_prompts(bank, &unit.attributes)?;
            let mixed = mix(&prompts, mixer)?;
            let assembled =
                assemble(&unit, bank, &mixed, &exemplars, AssemblyMode::Generate, options)?;
            let decode_seed = mix_seed(&[
                cfg.seed,
                cfg.decode.seed,
                fnv1a64(unit.id.as_bytes()),
                attempt,
            ]);
            let params = DecodeParams { seed: decode_seed, ..cfg.decode.clone() };
            let raws = backend
                .generate(&assembled.soft_block, &assembled.text_suffix, &params)
                .map_err(|e| match e {
                    Error::Backend(msg) => {
                        Error::Backend(format!("generating for seed '{}': {msg}", unit.id))
                    }
                    other => other,
                })?;
            let exemplar_ids: Vec<String> =
                exemplars.exemplars.iter().map(|e| e.id.clone()).collect();
            for raw in raws {
                for utterance in split_generations(&raw) {
                    if collected.len() >= needed {
                        break;
                    }
                    collected.push(SynthesizedExample {
                        utterance,
                        attributes: unit.attributes.clone(),
                        slots: unit.slots.clone(),
                        domain: unit.domain.clone(),
                        provenance: Provenance {
                            seed_id: unit.id.clone(),
                            exemplar_ids: exemplar_ids.clone(),
                            decode_seed,
                            strategy: mixer.strategy(),
                        },
                        weight_rarity: 1.0,
                        weight_similarity: 1.0,
                    });
                }
            }
            attempt += 1;
        }
        out.extend(collected);
    }
    if cfg.dedup_corpus {
        let mut seen = BTreeSet::new();
        out.retain(|c| seen.insert(c.utterance.clone()));
    }
    Ok(out)
}

/// Attaches rarity weights: for a candidate with attribute set A, the mean
/// over A of min_nonzero_freq / freq(a), where unseen attributes count as
/// maximally rare (1.0). Result clipped into (0, 1].
pub fn score_rarity(candidates: &mut [SynthesizedExample], freqs: &BTreeMap<String, usize>) {
    let min_nz = freqs.values().copied().filter(|&f| f > 0).min().unwrap_or(1) as f64;
    for cand in candidates.iter_mut() {
        if cand.attributes.is_empty() {
            cand.weight_rarity = 1.0;
            continue;
        }
        let mut total = 0.0;
        for attr in &cand.attributes {
            let f = freqs.get(attr).copied().unwrap_or(0);
            total += if f == 0 { 1.0 } else { min_nz / f as f64 };
        }
        let raw = total / cand.attributes.len() as f64;
        cand.weight_rarity = raw.clamp(f64::MIN_POSITIVE, 1.0);
    }
}

/// Unigram multiset F1 between the two texts under lowercase whitespace
/// tokenization. Two empty texts count as identical.
pub fn score_similarity(candidate: &str, seed: &str) -> f64 {
    let c = tokenize(candidate);
    let s = tokenize(seed);
    if c.is_empty() && s.is_empty() {
        return 1.0;
    }
    if c.is_empty() || s.is_empty() {
        return 0.0;
    }
    let mut seed_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in &s {
        *seed_counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for tok in &c {
        if let Some(n) = seed_counts.get_mut(tok.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let r = overlap as f64 / s.len() as f64;
    2.0 * p * r / (p + r)
}

/// Scores every candidate in place: rarity from the seed pool's attribute
/// frequencies, similarity against the conditioning seed's utterance.
/// Candidates of virtual (recombined) seeds have no text anchor and get
/// similarity 1.0. The floor keeps every weight strictly positive.
pub fn score_candidates(
    candidates: &mut [SynthesizedExample],
    seeds: &[SeedExample],
    similarity_floor: f64,
) {
    let freqs = attribute_frequencies(seeds);
    score_rarity(candidates, &freqs);
    let by_id: BTreeMap<&str, &SeedExample> =
        seeds.iter().map(|s| (s.id.as_str(), s)).collect();
    for cand in candidates.iter_mut() {
        cand.weight_similarity = match by_id.get(cand.provenance.seed_id.as_str()) {
            Some(seed) => {
                score_similarity(&cand.utterance, &seed.utterance).max(similarity_floor)
            }
            None => 1.0,
        };
    }
}

/// What the filter actually did, for the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub requested: usize,
    pub kept: usize,
    /// All weights were zero and sampling fell back to uniform.
    pub uniform_fallback: bool,
    /// target_count exceeded the candidate count; everything was kept.
    pub kept_all: bool,
}

/// Weighted sampling without replacement of exactly `target_count`
/// candidates (all of them when fewer exist), weight = rarity x similarity.
/// Survivors keep their original order.
pub fn weighted_select(
    candidates: Vec<SynthesizedExample>,
    target_count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<SynthesizedExample>, DenoiseReport) {
    let n = candidates.len();
    if target_count >= n {
        return (
            candidates,
            DenoiseReport {
                requested: target_count,
                kept: n,
                uniform_fallback: false,
                kept_all: target_count > n,
            },
        );
    }
    let mut weights: Vec<f64> =
        candidates.iter().map(|c| c.weight_rarity * c.weight_similarity).collect();
    let uniform_fallback = weights.iter().all(|&w| w <= 0.0);
    if uniform_fallback {
        weights = vec![1.0; n];
    }
    let mut alive = vec![true; n];
    let mut remaining: f64 = weights.iter().sum();
    for _ in 0..target_count {
        let mut x = rng.random_range(0.0..remaining);
        let mut chosen = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            if x < weights[i] {
                chosen = Some(i);
                break;
            }
            x -= weights[i];
        }
        // Float round-off can step past the last live candidate.
        let idx = chosen.unwrap_or_else(|| {
            (0..n).rev().find(|&i| alive[i]).expect("target_count < live count")
        });
        alive[idx] = false;
        remaining -= weights[idx];
    }
    let kept: Vec<SynthesizedExample> = candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !alive[*i])
        .map(|(_, c)| c)
        .collect();
    let report = DenoiseReport {
        requested: target_count,
        kept: kept.len(),
        uniform_fallback,
        kept_all: false,
    };
    (kept, report)
}

/// The full two-factor filter: score against the seeds, then sample down to
/// `target_count`.
pub fn denoise(
    mut candidates: Vec<SynthesizedExample>,
    seeds: &[SeedExample],
    target_count: usize,
    rng: &mut ChaCha8Rng,
    similarity_floor: f64,
) -> (Vec<SynthesizedExample>, DenoiseReport) {
    score_candidates(&mut candidates, seeds, similarity_floor);
    weighted_select(candidates, target_count, rng)
}

pub fn synthesized_to_jsonl(examples: &[SynthesizedExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| Error::Corrupt(format!("encoding synthesized example: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn synthesized_from_jsonl(raw: &str) -> Result<Vec<SynthesizedExample>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: SynthesizedExample = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}
