//! Small text utilities shared across the crate: tokenization, n-gram
//! counting, a smoothed sentence BLEU, and a process-independent hash.
//!
//! Every consumer of token statistics in this crate (similarity scoring,
//! diversity metrics, the BLEU convergence proxy, the mock backend) uses the
//! same tokenization: lowercase, split on ASCII whitespace.

use std::collections::BTreeMap;

/// Lowercase whitespace tokenization. Empty and all-whitespace input yield
/// an empty vector.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Counts of contiguous n-grams over a token slice. Tokens shorter than `n`
/// produce an empty map.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU of `candidate` against a single `reference`.
///
/// Uses up to 4-gram precision (capped at the candidate length), add-one
/// smoothing for orders above 1, clipped match counts, geometric mean, and
/// the standard brevity penalty. Identical sentences score exactly 1.0; an
/// empty candidate scores 0.0. Tokenization is [`tokenize`].
pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let max_n = cand.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cc = ngram_counts(&cand, n);
        let rc = ngram_counts(&refr, n);
        let total: usize = cc.values().sum();
        let matched: usize = cc
            .iter()
            .map(|(gram, count)| (*count).min(rc.get(gram).copied().unwrap_or(0)))
            .sum();
        // Add-one smoothing only above unigrams, so a candidate sharing no
        // vocabulary with the reference still scores 0.
        let (num, den) = if n == 1 {
            (matched as f64, total as f64)
        } else {
            ((matched + 1) as f64, (total + 1) as f64)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if cand.len() < refr.len() {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

/// FNV-1a over raw bytes. Stable across processes and platforms, unlike the
/// std hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Folds several 64-bit values into one seed, order-sensitively.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a64(&bytes)
}
