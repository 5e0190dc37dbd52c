//! A deterministic mock teacher for desk-scale testing.
//!
//! The model is a tiny fixed-weight two-layer sequence scorer over a
//! 64-entry vocabulary with d = 16: every input row contributes to a pooled
//! context vector, a tanh layer conditions each target position on the
//! previous gold token, and a linear head produces vocabulary logits. All
//! weights are derived from the construction seed via ChaCha, and token
//! embeddings are derived from an FNV hash of the token text, so behavior is
//! reproducible across processes and platforms.
//!
//! `generate` does not decode from the scorer; it emits enumerated lines
//! from a seeded template that recombines tokens parsed out of the text
//! suffix (exemplar utterances and slot values), conditioned on soft-block
//! statistics through the sampling seed.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{fnv1a64, mix_seed, tokenize};

use super::{BackendDescriptor, BackendKind, DecodeParams, LmBackend};

pub const MOCK_EMBED_DIM: usize = 16;
pub const MOCK_VOCAB: usize = 64;
const MAX_INPUT_ROWS: usize = 4096;

/// Fallback lexicon for generation when the suffix carries no usable tokens.
const FALLBACK_WORDS: [&str; 16] = [
    "please", "show", "find", "set", "book", "play", "cancel", "check", "the", "a", "my", "for",
    "tomorrow", "today", "now", "again",
];

pub struct MockBackend {
    seed: u64,
    /// (64 × 16) vocabulary embeddings.
    embeddings: Array2<f64>,
    w1: Array2<f64>,
    u1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_vec(
        (rows, cols),
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape matches length")
}

impl MockBackend {
    pub fn new(seed: u64) -> MockBackend {
        let d = MOCK_EMBED_DIM;
        let v = MOCK_VOCAB;
        let bound = 0.5 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(b"mock-weights")]));
        let embeddings = uniform_matrix(&mut rng, v, d, 0.5);
        let w1 = uniform_matrix(&mut rng, d, d, bound);
        let u1 = uniform_matrix(&mut rng, d, d, bound);
        let w2 = uniform_matrix(&mut rng, v, d, bound);
        MockBackend {
            seed,
            embeddings,
            w1,
            u1,
            b1: Array1::zeros(d),
            w2,
            b2: Array1::zeros(v),
        }
    }

    /// Stable vocabulary id of a token.
    fn vocab_id(token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % MOCK_VOCAB as u64) as usize
    }

    fn embed_row(&self, token: &str) -> Array1<f64> {
        self.embeddings.row(Self::vocab_id(token)).to_owned()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows > MAX_INPUT_ROWS {
            return Err(Error::Length { expected: MAX_INPUT_ROWS, got: rows });
        }
        Ok(())
    }
}

/// Pulls the reusable tokens out of an assembled text suffix: exemplar
/// utterance tokens first, then slot values from the meta-data line.
/// Duplicates are removed, first occurrence wins.
fn suffix_token_pool(text_suffix: &str) -> Vec<String> {
    let mut pool: Vec<String> = Vec::new();
    let mut push = |tok: String| {
        if !pool.contains(&tok) {
            pool.push(tok);
        }
    };
    for line in text_suffix.lines() {
        let trimmed = line.trim();
        if let Some(rest) = strip_enumeration(trimmed) {
            for tok in tokenize(rest) {
                push(tok);
            }
        } else if let Some(meta) = trimmed.strip_prefix("domain: ") {
            if let Some((_, slots)) = meta.split_once("| slots: ") {
                for clause in slots.split("; ") {
                    if let Some((_, value)) = clause.split_once('=') {
                        for tok in tokenize(value) {
                            push(tok);
                        }
                    }
                }
            }
        }
    }
    pool
}

fn strip_enumeration(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix(". ").or_else(|| rest.strip_prefix('.'))
}

impl LmBackend for MockBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("mock-{}", self.seed),
            embed_dim: MOCK_EMBED_DIM,
            max_input_rows: MAX_INPUT_ROWS,
            kind: BackendKind::Seq2seq,
        }
    }

    fn embed_tokens(&self, text: &str) -> Result<Array2<f64>> {
        let tokens = tokenize(text);
        self.check_rows(tokens.len())?;
        let mut out = Array2::zeros((tokens.len(), MOCK_EMBED_DIM));
        for (i, tok) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&self.embed_row(tok));
        }
        Ok(out)
    }

    fn loss_and_input_grads(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        target: &str,
    ) -> Result<(f64, Array2<f64>)> {
        let d = MOCK_EMBED_DIM;
        if soft_block.ncols() != d && soft_block.nrows() > 0 {
            return Err(Error::Argument(format!(
                "soft block width {} does not match embed_dim {d}",
                soft_block.ncols()
            )));
        }
        let suffix = self.embed_tokens(text_suffix)?;
        let rows = soft_block.nrows() + suffix.nrows();
        self.check_rows(rows)?;
        let targets = tokenize(target);
        if targets.is_empty() {
            return Ok((0.0, Array2::zeros(soft_block.dim())));
        }

        // Pooled context over every input row (soft block and suffix alike).
        let mut c = Array1::zeros(d);
        for row in soft_block.axis_iter(Axis(0)) {
            c += &row;
        }
        for row in suffix.axis_iter(Axis(0)) {
            c += &row;
        }
        if rows > 0 {
            c /= rows as f64;
        }

        let mut loss = 0.0;
        let mut dc: Array1<f64> = Array1::zeros(d);
        for (t, tok) in targets.iter().enumerate() {
            let y = Self::vocab_id(tok);
            let prev: Array1<f64> = if t == 0 {
                Array1::zeros(d)
            } else {
                self.embed_row(&targets[t - 1])
            };
            let pre = self.w1.dot(&c) + self.u1.dot(&prev) + &self.b1;
            let h = pre.mapv(f64::tanh);
            let logits = self.w2.dot(&h) + &self.b2;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = logits.mapv(|v| (v - max).exp());
            let total = exps.sum();
            let p = &exps / total;
            loss -= p[y].ln();
            // dlogits = p - onehot(y); dh through tanh; dc through w1.
            let mut dlogits = p;
            dlogits[y] -= 1.0;
            let dh = self.w2.t().dot(&dlogits) * h.mapv(|v| 1.0 - v * v);
            dc += &self.w1.t().dot(&dh);
        }
        let t_count = targets.len() as f64;
        loss /= t_count;
        dc /= t_count;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("mock backend loss is {loss}")));
        }
        let mut grad = Array2::zeros(soft_block.dim());
        if rows > 0 {
            // Every input row contributes 1/rows of the pooled context; only
            // the soft block's share is returned.
            let per_row = dc / rows as f64;
            for mut row in grad.axis_iter_mut(Axis(0)) {
                row.assign(&per_row);
            }
        }
        Ok((loss, grad))
    }

    fn generate(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        params: &DecodeParams,
    ) -> Result<Vec<String>> {
        params.validate()?;
        self.check_rows(soft_block.nrows() + tokenize(text_suffix).len())?;
        if params.num_return_sequences == 0 {
            return Ok(Vec::new());
        }
        let pool = {
            let parsed = suffix_token_pool(text_suffix);
            if parsed.is_empty() {
                FALLBACK_WORDS.iter().map(|s| s.to_string()).collect()
            } else {
                parsed
            }
        };
        // The soft block conditions generation through the sampling seed:
        // different tuned prompts produce different recombinations.
        let soft_stat = soft_block.sum().to_bits();
        let mut outputs = Vec::with_capacity(params.num_return_sequences);
        for seq in 0..params.num_return_sequences {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                self.seed,
                params.seed,
                fnv1a64(text_suffix.as_bytes()),
                soft_stat,
                seq as u64,
            ]));
            let lines = 1 + rng.random_range(0..3usize);
            let mut raw = Vec::with_capacity(lines);
            for line_no in 0..lines {
                let take = pool.len().clamp(3, 8).min(pool.len());
                let mut remaining: Vec<usize> = (0..pool.len()).collect();
                let mut words = Vec::with_capacity(take);
                for _ in 0..take {
                    let pick = rng.random_range(0..remaining.len());
                    words.push(pool[remaining.swap_remove(pick)].clone());
                }
                while words.len() < 3 {
                    let pick = rng.random_range(0..FALLBACK_WORDS.len());
                    words.push(FALLBACK_WORDS[pick].to_string());
                }
                words.truncate(params.max_new_tokens.max(1));
                raw.push(format!("{}. {}", line_no + 1, words.join(" ")));
            }
            outputs.push(raw.join("\n"));
        }
        Ok(outputs)
    }

    fn param_checksum(&self) -> Result<u64> {
        let mut bytes = Vec::new();
        for arr in [&self.embeddings, &self.w1, &self.u1, &self.w2] {
            for v in arr.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for arr in [&self.b1, &self.b2] {
            for v in arr.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(fnv1a64(&bytes))
    }
}
