//! Dataset schemas, loaders, the attribute ontology, and label
//! canonicalization for the three supported task shapes (multi-intent,
//! NER pairs, compositional semantic parse).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One attribute in the ontology: an intent, an entity category, or a slot
/// type, depending on the task shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    /// Unique within the ontology.
    pub id: String,
    /// Short human label, used in prompt initialization text.
    pub name: String,
    /// Natural-language gloss. Must be non-empty: it seeds prompt
    /// initialization.
    pub description: String,
    pub domain: String,
}

/// How examples are labeled and how labels render canonically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultiIntent,
    Ner,
    SemanticParse,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::MultiIntent => "multi-intent",
            TaskKind::Ner => "ner",
            TaskKind::SemanticParse => "semantic-parse",
        };
        f.write_str(s)
    }
}

/// Which partition of the corpus an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetDev,
    TargetTest,
}

/// A labeled utterance. `attributes` keeps the order it appeared in on disk
/// so records round-trip field-for-field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExample {
    pub id: String,
    pub utterance: String,
    pub attributes: Vec<String>,
    pub slots: Vec<(String, String)>,
    pub domain: String,
    pub split: Split,
}

/// Task description: ontology, domain split, and (for semantic parse)
/// the filler tokens removed during canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub task_kind: TaskKind,
    pub ontology: Vec<AttributeSpec>,
    pub source_domains: BTreeSet<String>,
    pub target_domain: String,
    #[serde(default)]
    pub filler_words: Vec<String>,
}

/// Deterministic task-specific rendering of a structured label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalLabel {
    pub rendered: String,
}

impl DatasetSchema {
    pub fn load(path: &Path) -> Result<DatasetSchema> {
        let raw = std::fs::read_to_string(path)?;
        let schema: DatasetSchema = serde_json::from_str(&raw)
            .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_domains.contains(&self.target_domain) {
            return Err(Error::Validation(format!(
                "target domain '{}' also appears in source domains",
                self.target_domain
            )));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.ontology {
            if !seen.insert(spec.id.as_str()) {
                return Err(Error::Validation(format!("duplicate attribute id '{}'", spec.id)));
            }
            if spec.description.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "attribute '{}' has an empty description",
                    spec.id
                )));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, id: &str) -> Option<&AttributeSpec> {
        self.ontology.iter().find(|a| a.id == id)
    }
}

/// Loads a JSONL dataset and validates it against the schema. Records are
/// returned sorted by id. Malformed lines report their 1-based line number;
/// semantic problems name the offending record.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<Vec<SeedExample>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SeedExample = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        validate_example(&record, schema)?;
        if !seen_ids.insert(record.id.clone()) {
            return Err(Error::Validation(format!("duplicate example id '{}'", record.id)));
        }
        out.push(record);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn validate_example(ex: &SeedExample, schema: &DatasetSchema) -> Result<()> {
    if ex.utterance.trim().is_empty() {
        return Err(Error::Validation(format!("record '{}' has an empty utterance", ex.id)));
    }
    if ex.attributes.is_empty() {
        return Err(Error::Validation(format!("record '{}' has no attributes", ex.id)));
    }
    for attr in &ex.attributes {
        if schema.attribute(attr).is_none() {
            return Err(Error::Validation(format!(
                "record '{}' references unknown attribute '{attr}'",
                ex.id
            )));
        }
    }
    Ok(())
}

/// Serializes examples back to the JSONL format accepted by [`load_dataset`].
pub fn to_jsonl(examples: &[SeedExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| Error::Corrupt(format!("serializing record '{}': {e}", ex.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Multiset occurrence counts of attribute ids over a corpus. Attributes
/// that never occur are simply absent; callers treat missing keys as 0.
pub fn attribute_frequencies(data: &[SeedExample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for ex in data {
        for attr in &ex.attributes {
            *counts.entry(attr.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Jaccard index of two attribute-id sets. Both empty is defined as 1.0.
pub fn attribute_overlap(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<&str> = a.iter().map(String::as_str).collect();
    let sb: BTreeSet<&str> = b.iter().map(String::as_str).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

/// Sorts slot pairs and removes filler tokens from their values.
///
/// Fillers are removed first (exact match of a lowercased token against the
/// filler list; original casing of surviving tokens is kept), then pairs are
/// sorted ascending by slot type with ties broken by value. Applying this
/// twice equals applying it once.
pub fn normalize_slots(
    slots: &[(String, String)],
    filler_words: &[String],
) -> Vec<(String, String)> {
    let fillers: BTreeSet<&str> = filler_words.iter().map(String::as_str).collect();
    let mut out: Vec<(String, String)> = slots
        .iter()
        .map(|(ty, value)| {
            let kept: Vec<&str> = value
                .split_whitespace()
                .filter(|tok| !fillers.contains(tok.to_lowercase().as_str()))
                .collect();
            (ty.clone(), kept.join(" "))
        })
        .collect();
    out.sort();
    out
}

/// Canonical rendering of a compositional parse label.
///
/// Grammar: `[IN:first [IN:second ...]] [SL:type value] ...` with intents
/// nested in the given order and slot clauses space-separated in sorted
/// order. A slot whose value is empty after filler removal renders as
/// `[SL:type]`. Empty intents and slots render an empty string.
pub fn canonicalize_semantic_parse(
    intents: &[String],
    slots: &[(String, String)],
    schema: &DatasetSchema,
) -> CanonicalLabel {
    let mut parts: Vec<String> = Vec::new();
    if !intents.is_empty() {
        let mut nested = String::new();
        for intent in intents {
            if nested.is_empty() {
                nested = format!("[IN:{intent}");
            } else {
                nested = format!("{nested} [IN:{intent}");
            }
        }
        nested.push_str(&"]".repeat(intents.len()));
        parts.push(nested);
    }
    for (ty, value) in normalize_slots(slots, &schema.filler_words) {
        if value.is_empty() {
            parts.push(format!("[SL:{ty}]"));
        } else {
            parts.push(format!("[SL:{ty} {value}]"));
        }
    }
    CanonicalLabel { rendered: parts.join(" ") }
}

/// Task-specific canonical label for one example.
///
/// multi-intent: sorted attribute ids joined by ", ". NER: sorted
/// "type=value" slot pairs joined by "; ". Semantic parse: the grammar
/// rendering with attributes as the ordered intent list.
pub fn canonical_label(ex: &SeedExample, schema: &DatasetSchema) -> CanonicalLabel {
    match schema.task_kind {
        TaskKind::MultiIntent => {
            let mut ids: Vec<&str> = ex.attributes.iter().map(String::as_str).collect();
            ids.sort();
            ids.dedup();
            CanonicalLabel { rendered: ids.join(", ") }
        }
        TaskKind::Ner => {
            let mut pairs: Vec<String> =
                ex.slots.iter().map(|(ty, value)| format!("{ty}={value}")).collect();
            pairs.sort();
            CanonicalLabel { rendered: pairs.join("; ") }
        }
        TaskKind::SemanticParse => canonicalize_semantic_parse(&ex.attributes, &ex.slots, schema),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema(task: TaskKind) -> DatasetSchema {
        DatasetSchema {
            task_kind: task,
            ontology: vec![
                AttributeSpec {
                    id: "song".into(),
                    name: "song".into(),
                    description: "a musical song or melody".into(),
                    domain: "music".into(),
                },
                AttributeSpec {
                    id: "artist".into(),
                    name: "artist".into(),
                    description: "a musical performer".into(),
                    domain: "music".into(),
                },
            ],
            source_domains: ["books".to_string()].into_iter().collect(),
            target_domain: "music".into(),
            filler_words: vec!["the".into(), "please".into()],
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_lines(&[]);
        let got = load_dataset(f.path(), &schema(TaskKind::MultiIntent)).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn known_attribute_round_trips() {
        let f = write_lines(&[
            r#"{"id":"e1","utterance":"play yesterday","attributes":["song"],"slots":[["track","yesterday"]],"domain":"music","split":"target-train"}"#,
        ]);
        let got = load_dataset(f.path(), &schema(TaskKind::MultiIntent)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].attributes, vec!["song"]);
        assert_eq!(got[0].slots, vec![("track".to_string(), "yesterday".to_string())]);
        assert_eq!(got[0].split, Split::TargetTrain);
    }

    #[test]
    fn unknown_attribute_is_a_validation_error_naming_the_record() {
        let f = write_lines(&[
            r#"{"id":"e9","utterance":"book a flight","attributes":["flights"],"slots":[],"domain":"music","split":"source"}"#,
        ]);
        let err = load_dataset(f.path(), &schema(TaskKind::MultiIntent)).unwrap_err();
        match err {
            Error::Validation(msg) => {
                assert!(msg.contains("e9") && msg.contains("flights"), "{msg}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"id":"e1","utterance":"play yesterday","attributes":["song"],"slots":[],"domain":"music","split":"source"}"#,
            r#"{"id":"e2" this is not json"#,
        ]);
        let err = load_dataset(f.path(), &schema(TaskKind::MultiIntent)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected_and_output_sorted() {
        let f = write_lines(&[
            r#"{"id":"b","utterance":"x y","attributes":["song"],"slots":[],"domain":"music","split":"source"}"#,
            r#"{"id":"a","utterance":"z w","attributes":["artist"],"slots":[],"domain":"music","split":"source"}"#,
        ]);
        let got = load_dataset(f.path(), &schema(TaskKind::MultiIntent)).unwrap();
        assert_eq!(got[0].id, "a");
        assert_eq!(got[1].id, "b");

        let dup = write_lines(&[
            r#"{"id":"a","utterance":"x","attributes":["song"],"slots":[],"domain":"music","split":"source"}"#,
            r#"{"id":"a","utterance":"y","attributes":["song"],"slots":[],"domain":"music","split":"source"}"#,
        ]);
        assert!(matches!(
            load_dataset(dup.path(), &schema(TaskKind::MultiIntent)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn serialization_round_trip_is_field_for_field() {
        let line = r#"{"id":"e1","utterance":"play The song","attributes":["song","artist"],"slots":[["track","yesterday"],["band","the beatles"]],"domain":"music","split":"target-dev"}"#;
        let ex: SeedExample = serde_json::from_str(line).unwrap();
        let back = serde_json::to_string(&ex).unwrap();
        let again: SeedExample = serde_json::from_str(&back).unwrap();
        assert_eq!(ex, again);
        // Attribute order from disk is preserved.
        assert_eq!(ex.attributes, vec!["song", "artist"]);
    }

    #[test]
    fn frequencies_count_multiset_occurrences() {
        assert!(attribute_frequencies(&[]).is_empty());
        let exs = vec![
            SeedExample {
                id: "1".into(),
                utterance: "u".into(),
                attributes: vec!["a".into(), "b".into()],
                slots: vec![],
                domain: "d".into(),
                split: Split::Source,
            },
            SeedExample {
                id: "2".into(),
                utterance: "u".into(),
                attributes: vec!["a".into()],
                slots: vec![],
                domain: "d".into(),
                split: Split::Source,
            },
        ];
        let freqs = attribute_frequencies(&exs);
        assert_eq!(freqs["a"], 2);
        assert_eq!(freqs["b"], 1);
        assert_eq!(freqs.get("c").copied().unwrap_or(0), 0);
    }

    #[test]
    fn frequencies_match_brute_force_tally_on_skewed_corpus() {
        // 100 examples: id i carries "hot" always, "cold" when i % 7 == 0,
        // "mild" when i % 3 == 0.
        let mut exs = Vec::new();
        for i in 0..100usize {
            let mut attrs = vec!["hot".to_string()];
            if i % 7 == 0 {
                attrs.push("cold".into());
            }
            if i % 3 == 0 {
                attrs.push("mild".into());
            }
            exs.push(SeedExample {
                id: format!("{i:03}"),
                utterance: "u".into(),
                attributes: attrs,
                slots: vec![],
                domain: "d".into(),
                split: Split::Source,
            });
        }
        let freqs = attribute_frequencies(&exs);
        // Reference tally, written independently of the implementation.
        let mut reference: BTreeMap<String, usize> = BTreeMap::new();
        for ex in &exs {
            for a in &ex.attributes {
                let slot = reference.entry(a.clone()).or_default();
                *slot += 1;
            }
        }
        assert_eq!(freqs, reference);
        assert_eq!(freqs["hot"], 100);
        assert_eq!(freqs["cold"], 15);
        assert_eq!(freqs["mild"], 34);
    }

    #[test]
    fn overlap_examples() {
        let x = vec!["x".to_string()];
        let y = vec!["y".to_string()];
        assert_eq!(attribute_overlap(&x, &x), 1.0);
        assert_eq!(attribute_overlap(&x, &y), 0.0);
        let a: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = ["b", "c", "d"].iter().map(|s| s.to_string()).collect();
        assert_eq!(attribute_overlap(&a, &b), 0.5);
        assert_eq!(attribute_overlap(&[], &[]), 1.0);
    }

    #[test]
    fn canonical_parse_empty_is_empty() {
        let s = schema(TaskKind::SemanticParse);
        assert_eq!(canonicalize_semantic_parse(&[], &[], &s).rendered, "");
    }

    #[test]
    fn canonical_parse_sorts_slot_types_alphabetically() {
        let s = schema(TaskKind::SemanticParse);
        let slots = vec![
            ("todo".to_string(), "pay bill".to_string()),
            ("date_time".to_string(), "July 28th".to_string()),
        ];
        let label = canonicalize_semantic_parse(&["create_reminder".to_string()], &slots, &s);
        assert_eq!(
            label.rendered,
            "[IN:create_reminder] [SL:date_time July 28th] [SL:todo pay bill]"
        );
    }

    #[test]
    fn canonical_parse_nests_multiple_intents_in_order() {
        let s = schema(TaskKind::SemanticParse);
        let label = canonicalize_semantic_parse(
            &["get_weather".to_string(), "get_location".to_string()],
            &[],
            &s,
        );
        assert_eq!(label.rendered, "[IN:get_weather [IN:get_location]]");
    }

    #[test]
    fn filler_removal_matches_brute_force_token_filter() {
        let s = schema(TaskKind::SemanticParse);
        let slots =
            vec![("todo".to_string(), "please pay The the bill".to_string())];
        let normalized = normalize_slots(&slots, &s.filler_words);
        // Reference: keep tokens whose lowercase form is not a filler.
        let mut expected = Vec::new();
        for tok in "please pay The the bill".split_whitespace() {
            let lower = tok.to_lowercase();
            if !s.filler_words.iter().any(|f| *f == lower) {
                expected.push(tok);
            }
        }
        assert_eq!(normalized[0].1, expected.join(" "));
        assert_eq!(normalized[0].1, "pay bill");
    }

    #[test]
    fn slot_with_only_fillers_renders_bare_type() {
        let s = schema(TaskKind::SemanticParse);
        let slots = vec![("politeness".to_string(), "please".to_string())];
        let label = canonicalize_semantic_parse(&["x".to_string()], &slots, &s);
        assert_eq!(label.rendered, "[IN:x] [SL:politeness]");
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let s = schema(TaskKind::SemanticParse);
        let slots = vec![
            ("todo".to_string(), "please pay the bill".to_string()),
            ("date_time".to_string(), "tomorrow".to_string()),
            ("todo".to_string(), "call mom".to_string()),
        ];
        let once = normalize_slots(&slots, &s.filler_words);
        let twice = normalize_slots(&once, &s.filler_words);
        assert_eq!(once, twice);
        let intents = vec!["create_reminder".to_string()];
        assert_eq!(
            canonicalize_semantic_parse(&intents, &slots, &s),
            canonicalize_semantic_parse(&intents, &once, &s)
        );
    }

    #[test]
    fn canonical_label_per_task_shape() {
        let ex = SeedExample {
            id: "1".into(),
            utterance: "u".into(),
            attributes: vec!["song".into(), "artist".into()],
            slots: vec![
                ("track".to_string(), "yesterday".to_string()),
                ("band".to_string(), "beatles".to_string()),
            ],
            domain: "music".into(),
            split: Split::Source,
        };
        let mi = canonical_label(&ex, &schema(TaskKind::MultiIntent));
        assert_eq!(mi.rendered, "artist, song");
        let ner = canonical_label(&ex, &schema(TaskKind::Ner));
        assert_eq!(ner.rendered, "band=beatles; track=yesterday");
    }

    #[test]
    fn schema_rejects_target_inside_sources() {
        let mut s = schema(TaskKind::MultiIntent);
        s.source_domains.insert("music".into());
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }
}
