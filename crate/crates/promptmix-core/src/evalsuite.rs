//! Data-quality metrics for the synthesized corpus (diversity, label
//! correctness, fluency) and downstream task metrics for the three task
//! shapes (multi-intent F1, entity-pair F1, canonical-form exact match).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::SynthesizedExample;
use crate::text::{ngram_counts, tokenize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// k -> distinct@k over the synthesized corpus.
    pub distinct: BTreeMap<usize, f64>,
    /// Percentage of examples whose oracle-predicted attributes match the
    /// conditioning attributes; absent when no example could be scored.
    pub correctness: Option<f64>,
    pub oracle_failures: usize,
    pub perplexity: Option<f64>,
    /// What the scorer actually computes, copied from the handle.
    pub perplexity_semantics: Option<String>,
    pub downstream: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Fixed-order human-readable table for CLI output.
    pub fn render_table(&self) -> String {
        let mut lines = Vec::new();
        for (k, v) in &self.distinct {
            lines.push(format!("distinct@{k}            {v:.4}"));
        }
        match self.correctness {
            Some(c) => lines.push(format!("correctness          {c:.1}")),
            None => lines.push("correctness          (omitted)".to_string()),
        }
        if self.oracle_failures > 0 {
            lines.push(format!("oracle failures      {}", self.oracle_failures));
        }
        match self.perplexity {
            Some(p) => lines.push(format!("perplexity           {p:.4}")),
            None => lines.push("perplexity           (omitted)".to_string()),
        }
        for (name, value) in &self.downstream {
            lines.push(format!("{name:<20} {value:.4}"));
        }
        for (name, value) in &self.counts {
            lines.push(format!("count:{name:<14} {value}"));
        }
        for note in &self.notes {
            lines.push(format!("note: {note}"));
        }
        lines.join("\n")
    }
}

/// Corpus-wide distinct@k: unique k-grams divided by total k-grams under
/// lowercase whitespace tokenization; 0 when the corpus has no k-grams.
pub fn distinct_k(corpus: &[String], k: usize) -> f64 {
    assert!(k >= 1, "distinct@k needs k >= 1");
    let mut unique: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut total = 0usize;
    for text in corpus {
        let tokens = tokenize(text);
        for (gram, count) in ngram_counts(&tokens, k) {
            total += count;
            unique.insert(gram);
        }
    }
    if total == 0 {
        return 0.0;
    }
    unique.len() as f64 / total as f64
}

/// Predicts the primary attribute set of an utterance. Deterministic per
/// handle.
pub trait OracleHandle {
    fn classify(&self, text: &str) -> Result<BTreeSet<String>>;
}

/// Reads the hidden ground truth: maps every corpus utterance back to its
/// conditioning attributes. Synthesized labels are copied from seeds by
/// construction, so this oracle scores any pipeline-produced corpus at 100.
/// An utterance recorded under two different attribute sets is ambiguous
/// and classifies as a failure rather than guessing.
pub struct TruthOracle {
    truth: BTreeMap<String, Vec<BTreeSet<String>>>,
}

impl TruthOracle {
    pub fn new(corpus: &[SynthesizedExample]) -> TruthOracle {
        let mut truth: BTreeMap<String, Vec<BTreeSet<String>>> = BTreeMap::new();
        for ex in corpus {
            let attrs: BTreeSet<String> = ex.attributes.iter().cloned().collect();
            let sets = truth.entry(ex.utterance.clone()).or_default();
            if !sets.contains(&attrs) {
                sets.push(attrs);
            }
        }
        TruthOracle { truth }
    }
}

impl OracleHandle for TruthOracle {
    fn classify(&self, text: &str) -> Result<BTreeSet<String>> {
        let sets = self
            .truth
            .get(text)
            .ok_or_else(|| Error::Unsupported(format!("utterance not in oracle table: {text}")))?;
        if sets.len() > 1 {
            return Err(Error::Unsupported(format!(
                "utterance appears with {} different attribute sets: {text}",
                sets.len()
            )));
        }
        Ok(sets[0].clone())
    }
}

/// Always predicts a sentinel set no real example carries.
pub struct AdversarialOracle;

impl OracleHandle for AdversarialOracle {
    fn classify(&self, _text: &str) -> Result<BTreeSet<String>> {
        Ok(BTreeSet::from(["__adversarial__".to_string()]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectnessOutcome {
    /// Match percentage over the examples the oracle could score.
    pub percentage: Option<f64>,
    pub evaluated: usize,
    pub failures: usize,
}

/// Set equality between the oracle's prediction and the conditioning
/// attributes, as a percentage. Oracle failures shrink the denominator and
/// are reported, never silently dropped.
pub fn correctness(examples: &[SynthesizedExample], oracle: &dyn OracleHandle) -> CorrectnessOutcome {
    let mut matches = 0usize;
    let mut evaluated = 0usize;
    let mut failures = 0usize;
    for ex in examples {
        match oracle.classify(&ex.utterance) {
            Ok(pred) => {
                evaluated += 1;
                let gold: BTreeSet<String> = ex.attributes.iter().cloned().collect();
                if pred == gold {
                    matches += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    CorrectnessOutcome {
        percentage: if evaluated > 0 {
            Some(matches as f64 / evaluated as f64 * 100.0)
        } else {
            None
        },
        evaluated,
        failures,
    }
}

/// Scores one text for fluency; lower is more fluent under the shipped
/// scorer. Semantics belong to the handle and are recorded in the report.
pub trait ScorerHandle {
    fn score(&self, text: &str) -> Result<f64>;
    fn semantics(&self) -> String;
}

/// Mean negative log unigram frequency under a fixed reference corpus.
/// Tokens absent from the reference count as frequency 1.
pub struct TokenFrequencyScorer {
    counts: BTreeMap<String, usize>,
    total: usize,
}

impl TokenFrequencyScorer {
    pub fn new(reference: &[String]) -> TokenFrequencyScorer {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for text in reference {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
                total += 1;
            }
        }
        TokenFrequencyScorer { counts, total: total.max(1) }
    }
}

impl ScorerHandle for TokenFrequencyScorer {
    fn score(&self, text: &str) -> Result<f64> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for tok in &tokens {
            let count = self.counts.get(tok).copied().unwrap_or(1).max(1);
            sum += -((count as f64 / self.total as f64).ln());
        }
        Ok(sum / tokens.len() as f64)
    }

    fn semantics(&self) -> String {
        "mean negative log unigram frequency against the seed corpus".to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityResult {
    pub value: Option<f64>,
    /// Why the metric is absent, when it is.
    pub omitted_reason: Option<String>,
}

/// Mean scorer output over the corpus. An empty corpus or a scorer failure
/// omits the metric with a reason instead of failing the run.
pub fn perplexity(corpus: &[String], scorer: &dyn ScorerHandle) -> PerplexityResult {
    if corpus.is_empty() {
        return PerplexityResult {
            value: None,
            omitted_reason: Some("empty corpus".to_string()),
        };
    }
    let mut sum = 0.0;
    for text in corpus {
        match scorer.score(text) {
            Ok(v) => sum += v,
            Err(e) => {
                return PerplexityResult {
                    value: None,
                    omitted_reason: Some(format!("scorer failed: {e}")),
                }
            }
        }
    }
    PerplexityResult { value: Some(sum / corpus.len() as f64), omitted_reason: None }
}

/// Micro-averaged true positives / false positives / false negatives over
/// instance sets. Exchanging preds and golds swaps FP and FN.
pub fn micro_counts<T: Ord>(
    preds: &[BTreeSet<T>],
    golds: &[BTreeSet<T>],
) -> Result<(usize, usize, usize)> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "preds and golds differ in length: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        tp += p.intersection(g).count();
        fp += p.difference(g).count();
        fnn += g.difference(p).count();
    }
    Ok((tp, fp, fnn))
}

fn micro_f1<T: Ord>(preds: &[BTreeSet<T>], golds: &[BTreeSet<T>]) -> Result<f64> {
    let (tp, fp, fnn) = micro_counts(preds, golds)?;
    let denom = 2 * tp + fp + fnn;
    // No instances on either side: vacuously perfect.
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Micro-F1 over attribute instances for multi-intent prediction.
pub fn multilabel_f1(preds: &[BTreeSet<String>], golds: &[BTreeSet<String>]) -> Result<f64> {
    micro_f1(preds, golds)
}

/// Micro-F1 over exact (category, value) pairs for entity recognition.
pub fn pair_f1(
    preds: &[BTreeSet<(String, String)>],
    golds: &[BTreeSet<(String, String)>],
) -> Result<f64> {
    micro_f1(preds, golds)
}

/// Fraction of exact string matches between canonicalized parses.
pub fn exact_match(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "preds and golds differ in length: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Ok(1.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Provenance;
    use crate::mixer::MixStrategy;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(utterance: &str, attrs: &[&str]) -> SynthesizedExample {
        SynthesizedExample {
            utterance: utterance.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            slots: Vec::new(),
            domain: "office".into(),
            provenance: Provenance {
                seed_id: "s".into(),
                exemplar_ids: Vec::new(),
                decode_seed: 0,
                strategy: MixStrategy::Pooling,
            },
            weight_rarity: 1.0,
            weight_similarity: 1.0,
        }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn distinct_trivial_values() {
        assert_eq!(distinct_k(&["a b c".to_string()], 1), 1.0);
        assert!((distinct_k(&["a a a".to_string()], 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_k(&[], 2), 0.0);
        assert_eq!(distinct_k(&["one".to_string()], 2), 0.0);
    }

    #[test]
    fn distinct_matches_brute_force_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vocab = ["set", "an", "alarm", "for", "seven", "check", "my", "balance"];
        for _ in 0..5 {
            let corpus: Vec<String> = (0..50)
                .map(|_| {
                    let len = rng.random_range(1..9);
                    (0..len)
                        .map(|_| vocab[rng.random_range(0..vocab.len())])
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            for k in 1..=3 {
                // Independent counter: collect every window, dedupe by sort.
                let mut grams: Vec<Vec<&str>> = Vec::new();
                for line in &corpus {
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    if toks.len() >= k {
                        for w in toks.windows(k) {
                            grams.push(w.to_vec());
                        }
                    }
                }
                let total = grams.len();
                grams.sort();
                grams.dedup();
                let want =
                    if total == 0 { 0.0 } else { grams.len() as f64 / total as f64 };
                assert_eq!(distinct_k(&corpus, k), want);
            }
        }
    }

    #[test]
    fn distinct_is_order_invariant_and_duplication_halves_it() {
        let corpus = vec!["alpha beta".to_string(), "gamma delta".to_string()];
        let mut reversed = corpus.clone();
        reversed.reverse();
        assert_eq!(distinct_k(&corpus, 1), distinct_k(&reversed, 1));
        assert_eq!(distinct_k(&corpus, 1), 1.0);
        let mut doubled = corpus.clone();
        doubled.extend(corpus.clone());
        assert_eq!(distinct_k(&doubled, 1), 0.5);
    }

    #[test]
    fn truth_oracle_scores_100_adversarial_0() {
        let corpus =
            vec![synth("wake me at seven", &["alarm"]), synth("check my balance", &["banking"])];
        let truth = TruthOracle::new(&corpus);
        let out = correctness(&corpus, &truth);
        assert_eq!(out.percentage, Some(100.0));
        assert_eq!(out.failures, 0);
        let out = correctness(&corpus, &AdversarialOracle);
        assert_eq!(out.percentage, Some(0.0));
    }

    #[test]
    fn ambiguous_utterance_fails_instead_of_guessing() {
        let corpus = vec![
            synth("set something up", &["alarm"]),
            synth("set something up", &["banking"]),
            synth("check my balance", &["banking"]),
        ];
        let truth = TruthOracle::new(&corpus);
        let out = correctness(&corpus, &truth);
        // The colliding pair is skipped; the rest still scores perfectly.
        assert_eq!(out.percentage, Some(100.0));
        assert_eq!(out.evaluated, 1);
        assert_eq!(out.failures, 2);
    }

    #[test]
    fn mixed_oracle_fixture_scores_70() {
        struct SevenOfTen;
        impl OracleHandle for SevenOfTen {
            fn classify(&self, text: &str) -> Result<BTreeSet<String>> {
                let idx: usize = text.rsplit(' ').next().unwrap().parse().unwrap();
                if idx < 7 {
                    Ok(set(&["right"]))
                } else {
                    Ok(set(&["wrong"]))
                }
            }
        }
        let corpus: Vec<SynthesizedExample> =
            (0..10).map(|i| synth(&format!("utterance {i}"), &["right"])).collect();
        let out = correctness(&corpus, &SevenOfTen);
        assert_eq!(out.percentage, Some(70.0));
        assert_eq!(out.evaluated, 10);
    }

    #[test]
    fn oracle_failures_shrink_the_denominator() {
        struct Flaky;
        impl OracleHandle for Flaky {
            fn classify(&self, text: &str) -> Result<BTreeSet<String>> {
                if text.contains("bad") {
                    Err(Error::Backend("no prediction".into()))
                } else {
                    Ok(set(&["a"]))
                }
            }
        }
        let corpus = vec![synth("good one", &["a"]), synth("bad one", &["a"])];
        let out = correctness(&corpus, &Flaky);
        assert_eq!(out.percentage, Some(100.0));
        assert_eq!(out.evaluated, 1);
        assert_eq!(out.failures, 1);
        let all_bad = vec![synth("bad bad", &["a"])];
        let out = correctness(&all_bad, &Flaky);
        assert_eq!(out.percentage, None);
        assert_eq!(out.failures, 1);
    }

    #[test]
    fn perplexity_degenerate_cases() {
        struct Const(f64);
        impl ScorerHandle for Const {
            fn score(&self, _: &str) -> Result<f64> {
                Ok(self.0)
            }
            fn semantics(&self) -> String {
                "constant".into()
            }
        }
        let corpus = vec!["a".to_string(), "b".to_string()];
        let r = perplexity(&corpus, &Const(1.27));
        assert_eq!(r.value, Some(1.27));
        let r = perplexity(&[], &Const(1.27));
        assert_eq!(r.value, None);
        assert!(r.omitted_reason.unwrap().contains("empty"));
    }

    #[test]
    fn scorer_failure_omits_with_reason() {
        struct Broken;
        impl ScorerHandle for Broken {
            fn score(&self, _: &str) -> Result<f64> {
                Err(Error::Backend("scorer offline".into()))
            }
            fn semantics(&self) -> String {
                "broken".into()
            }
        }
        let r = perplexity(&["x".to_string()], &Broken);
        assert_eq!(r.value, None);
        assert!(r.omitted_reason.unwrap().contains("scorer offline"));
    }

    #[test]
    fn token_frequency_scorer_matches_hand_computation() {
        // Reference: "a a b" -> counts a=2, b=1, total=3.
        let scorer = TokenFrequencyScorer::new(&["a a b".to_string()]);
        let want_a = -(2.0f64 / 3.0).ln();
        let want_b = -(1.0f64 / 3.0).ln();
        assert!((scorer.score("a").unwrap() - want_a).abs() < 1e-15);
        assert!((scorer.score("a b").unwrap() - (want_a + want_b) / 2.0).abs() < 1e-15);
        // Unseen token scores like count 1.
        assert!((scorer.score("zzz").unwrap() - want_b).abs() < 1e-15);
        assert!(scorer.semantics().contains("negative log"));
    }

    #[test]
    fn multilabel_trivial_and_hand_values() {
        let golds = vec![set(&["a", "b"]), set(&["c"])];
        assert_eq!(multilabel_f1(&golds, &golds).unwrap(), 1.0);
        let empty_preds = vec![BTreeSet::new(), BTreeSet::new()];
        assert_eq!(multilabel_f1(&empty_preds, &golds).unwrap(), 0.0);
        // TP=3, FP=1, FN=2 -> 2*3 / (2*3 + 1 + 2) = 2/3.
        let preds = vec![set(&["a", "b", "c", "x"])];
        let golds = vec![set(&["a", "b", "c", "d", "e"])];
        assert!((multilabel_f1(&preds, &golds).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn swapping_preds_and_golds_swaps_fp_and_fn() {
        let preds = vec![set(&["a", "x"])];
        let golds = vec![set(&["a", "b", "c"])];
        let (tp, fp, fnn) = micro_counts(&preds, &golds).unwrap();
        assert_eq!((tp, fp, fnn), (1, 1, 2));
        let (tp2, fp2, fn2) = micro_counts(&golds, &preds).unwrap();
        assert_eq!((tp2, fp2, fn2), (1, 2, 1));
        assert_eq!(
            multilabel_f1(&preds, &golds).unwrap(),
            multilabel_f1(&golds, &preds).unwrap()
        );
    }

    #[test]
    fn length_mismatch_is_an_argument_error() {
        let one = vec![set(&["a"])];
        assert!(matches!(multilabel_f1(&one, &[]), Err(Error::Argument(_))));
        assert!(matches!(exact_match(&["x".into()], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn pair_f1_values() {
        let p = |c: &str, v: &str| (c.to_string(), v.to_string());
        let preds = vec![BTreeSet::from([p("loc", "paris")])];
        let golds = vec![BTreeSet::from([p("loc", "paris")])];
        assert_eq!(pair_f1(&preds, &golds).unwrap(), 1.0);
        // Category right, value wrong: zero TP, one FP, one FN.
        let preds = vec![BTreeSet::from([p("loc", "paris")])];
        let golds = vec![BTreeSet::from([p("loc", "london")])];
        assert_eq!(pair_f1(&preds, &golds).unwrap(), 0.0);
        // TP=2, FP=1, FN=1 -> 4/6.
        let preds = vec![BTreeSet::from([p("loc", "paris"), p("per", "ada"), p("org", "acme")])];
        let golds = vec![BTreeSet::from([p("loc", "paris"), p("per", "ada"), p("org", "zeta")])];
        assert!((pair_f1(&preds, &golds).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn exact_match_values() {
        let a = vec!["x".to_string(), "y".to_string()];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        let b = vec!["p".to_string(), "q".to_string()];
        assert_eq!(exact_match(&a, &b).unwrap(), 0.0);
        let preds: Vec<String> = ["1", "2", "3", "x", "y"].iter().map(|s| s.to_string()).collect();
        let golds: Vec<String> = ["1", "2", "3", "4", "5"].iter().map(|s| s.to_string()).collect();
        assert_eq!(exact_match(&preds, &golds).unwrap(), 0.6);
    }

    #[test]
    fn report_serializes_and_renders() {
        let mut report = EvalReport::default();
        report.distinct.insert(1, 0.5);
        report.distinct.insert(2, 0.75);
        report.correctness = Some(100.0);
        report.downstream.insert("multilabel_f1".into(), 0.9);
        report.counts.insert("synthesized".into(), 40);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let table = report.render_table();
        assert!(table.contains("distinct@1"));
        assert!(table.contains("correctness"));
        assert!(table.contains("multilabel_f1"));
    }
}
