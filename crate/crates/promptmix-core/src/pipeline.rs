//! Run orchestration: the run config, stage commands, run-directory layout,
//! and the manifest that records which stages have completed.
//!
//! Stages communicate only through files in the run directory, so any stage
//! can be rerun in isolation and a missing upstream artifact is a stage-order
//! error rather than a silent recompute.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::AssemblyOptions;
use crate::backend::mock::MockBackend;
use crate::backend::remote::{RemoteBackend, RemoteConfig};
use crate::backend::student::{train_student, MockStudent, StudentConfig};
use crate::backend::{BackendKind, LmBackend, StudentTask};
use crate::data_model::{
    canonical_label, load_dataset, DatasetSchema, SeedExample, Split, TaskKind,
};
use crate::error::{Error, Result};
use crate::evalsuite::{
    correctness, distinct_k, exact_match, multilabel_f1, pair_f1, perplexity, EvalReport,
    ScorerHandle, TokenFrequencyScorer, TruthOracle,
};
use crate::generator::{
    denoise, generation_units, synthesize, synthesized_from_jsonl, synthesized_to_jsonl,
    DenoiseReport, GenConfig, SynthesizedExample,
};
use crate::mixer::{MixStrategy, MixerHyper, MixerParams};
use crate::prompt_bank::{initialize_bank, load_checkpoint, save_checkpoint, CHECKPOINT_EXTENSION};
use crate::text::{fnv1a64, mix_seed};
use crate::tuner::{tune, TuneConfig};

/// The only environment variable the pipeline reads: a cache directory
/// exported to sidecar backends for their model downloads.
pub const CACHE_DIR_ENV: &str = "PROMPTMIX_CACHE_DIR";

/// Which language model drives tuning and generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// In-process deterministic stand-in; needs no external processes.
    Mock,
    /// Encoder-decoder model behind a sidecar process.
    HfSeq2seq,
    /// Decoder-only model behind a sidecar process.
    HfCausal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    /// Model identifier forwarded to the sidecar. Ignored by the mock.
    pub model_id: String,
    /// Sidecar command line, e.g. ["python3", "scripts/hf_backend.py"].
    pub command: Vec<String>,
    /// Seed for the mock backend's frozen weights. Deliberately not mixed
    /// with the run seed: the teacher is a fixed model, not a run variable.
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { kind: TeacherKind::Mock, model_id: String::new(), command: Vec::new(), seed: 0 }
    }
}

impl TeacherConfig {
    pub fn build(&self) -> Result<Box<dyn LmBackend>> {
        match self.kind {
            TeacherKind::Mock => Ok(Box::new(MockBackend::new(self.seed))),
            TeacherKind::HfSeq2seq | TeacherKind::HfCausal => {
                let kind = if self.kind == TeacherKind::HfSeq2seq {
                    BackendKind::Seq2seq
                } else {
                    BackendKind::Causal
                };
                let remote = RemoteBackend::spawn(&RemoteConfig {
                    kind,
                    model_id: self.model_id.clone(),
                    command: self.command.clone(),
                    cache_dir: std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
                })?;
                Ok(Box::new(remote))
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub schema: PathBuf,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Score synthesized output against the truth-reading oracle.
    pub correctness: bool,
    /// Score synthesized output with the token-frequency scorer.
    pub perplexity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { correctness: true, perplexity: true }
    }
}

/// Component removals for ablation runs. Each flag removes exactly one
/// assembly or filtering component.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Skip candidate weighting and filtering; over-generation is disabled
    /// so counts still match the target.
    pub no_denoise: bool,
    /// Drop the shared instruction prefix from assembled inputs.
    pub no_instruction: bool,
    /// Drop the serialized metadata line.
    pub no_metadata: bool,
    /// Drop the mixed attribute prompt.
    pub no_attribute_prompt: bool,
    /// Drop retrieved exemplars.
    pub no_exemplars: bool,
}

impl AblationFlags {
    pub fn assembly_options(&self) -> AssemblyOptions {
        AssemblyOptions {
            include_prefix: !self.no_instruction,
            include_attribute_prompt: !self.no_attribute_prompt,
            include_metadata: !self.no_metadata,
            include_exemplars: !self.no_exemplars,
        }
    }
}

/// Everything one run needs, loadable from a single TOML file. Every field
/// has a default so a config can state only what it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run-level seed. Stage seeds are derived from it, so one knob reseeds
    /// the whole pipeline while stages stay decorrelated.
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub mixer: MixerHyper,
    pub tune: TuneConfig,
    pub generate: GenConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            mixer: MixerHyper::default(),
            tune: TuneConfig::default(),
            generate: GenConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "config file does not exist: {}",
                path.display()
            )));
        }
        let raw = fs::read_to_string(path)?;
        toml::from_str(&raw)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    /// Checks the config before any compute: referenced files must exist and
    /// the stage configs must be self-consistent.
    pub fn validate(&self) -> Result<()> {
        if self.run_dir.as_os_str().is_empty() {
            return Err(Error::Validation("run_dir must not be empty".into()));
        }
        for (label, path) in [("schema", &self.data.schema), ("dataset", &self.data.dataset)] {
            if !path.is_file() {
                return Err(Error::Validation(format!(
                    "{label} file does not exist: {}",
                    path.display()
                )));
            }
        }
        if self.teacher.kind != TeacherKind::Mock && self.teacher.command.is_empty() {
            return Err(Error::Validation(
                "teacher kinds other than mock need a sidecar command".into(),
            ));
        }
        self.tune.validate()?;
        self.generate.validate()?;
        Ok(())
    }

    /// Hash of the canonical JSON rendering. Any field change changes the
    /// hash; formatting of the source TOML does not.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

/// Artifact locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> RunPaths {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    /// Effective config as of the last stage run, for provenance.
    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot.toml")
    }
    pub fn bank_last(&self) -> PathBuf {
        self.root.join(format!("bank.last.{CHECKPOINT_EXTENSION}"))
    }
    pub fn bank_best(&self) -> PathBuf {
        self.root.join(format!("bank.best.{CHECKPOINT_EXTENSION}"))
    }
    pub fn tune_report(&self) -> PathBuf {
        self.root.join("tune_report.json")
    }
    /// Raw candidates before weighting and filtering.
    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.jsonl")
    }
    pub fn synthesized(&self) -> PathBuf {
        self.root.join("synthesized.jsonl")
    }
    pub fn denoise_report(&self) -> PathBuf {
        self.root.join("denoise_report.json")
    }
    pub fn student(&self) -> PathBuf {
        self.root.join("student.json")
    }
    pub fn student_report(&self) -> PathBuf {
        self.root.join("student_report.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

/// Run-directory ledger: which stages completed, what they wrote, and the
/// config hash they ran under. Stage records are only ever added or
/// replaced, never removed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Result<RunManifest> {
        if !path.is_file() {
            return Ok(RunManifest::default());
        }
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Corrupt(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut raw = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Corrupt(format!("encoding manifest: {e}")))?;
        raw.push('\n');
        write_atomic(path, raw.as_bytes())
    }

    pub fn completed(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }
}

/// What one stage command produced, for display at the call site.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

struct RunContext {
    schema: DatasetSchema,
    dataset: Vec<SeedExample>,
    paths: RunPaths,
}

fn load_context(cfg: &RunConfig) -> Result<RunContext> {
    cfg.validate()?;
    let schema = DatasetSchema::load(&cfg.data.schema)?;
    let dataset = load_dataset(&cfg.data.dataset, &schema)?;
    Ok(RunContext { schema, dataset, paths: RunPaths::new(&cfg.run_dir) })
}

/// Snapshots the effective config and appends the stage record.
fn finish_stage(
    cfg: &RunConfig,
    paths: &RunPaths,
    stage: &str,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let snapshot = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Validation(format!("encoding config snapshot: {e}")))?;
    write_atomic(&paths.config_snapshot(), snapshot.as_bytes())?;
    let mut manifest = RunManifest::load_or_default(&paths.manifest())?;
    manifest.config_hash = cfg.hash();
    manifest.stages.insert(
        stage.to_string(),
        StageRecord {
            wall_clock_secs: started.elapsed().as_secs_f64(),
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        },
    );
    manifest.save(&paths.manifest())
}

fn require_artifact(path: &Path, stage: &str, missing: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::StageOrder { stage: stage.to_string(), missing: missing.to_string() })
    }
}

pub fn select_split(data: &[SeedExample], split: Split) -> Vec<SeedExample> {
    data.iter().filter(|ex| ex.split == split).cloned().collect()
}

/// Examples the tuner trains on: the target-domain few-shot set, plus, when
/// asked, source examples whose attributes all occur in that set. Source
/// examples carrying unseen attributes would tune prompts the target task
/// never uses, so they stay out.
pub fn tuning_pool(data: &[SeedExample], include_source: bool) -> Vec<SeedExample> {
    let mut pool = select_split(data, Split::TargetTrain);
    if include_source {
        let covered: BTreeSet<String> =
            pool.iter().flat_map(|ex| ex.attributes.iter().cloned()).collect();
        for ex in data.iter().filter(|ex| ex.split == Split::Source) {
            if !ex.attributes.is_empty() && ex.attributes.iter().all(|a| covered.contains(a)) {
                pool.push(ex.clone());
            }
        }
    }
    pool
}

/// Post-filter corpus size: every generation unit contributes its quota.
pub fn synthesis_target(seeds: &[SeedExample], cfg: &GenConfig) -> usize {
    cfg.n_per_seed * generation_units(seeds, cfg).len()
}

fn effective_tune(cfg: &RunConfig) -> TuneConfig {
    let mut t = cfg.tune.clone();
    t.seed = mix_seed(&[cfg.seed, fnv1a64(b"tune"), cfg.tune.seed]);
    t
}

fn effective_gen(cfg: &RunConfig) -> GenConfig {
    let mut g = cfg.generate.clone();
    g.seed = mix_seed(&[cfg.seed, fnv1a64(b"generate"), cfg.generate.seed]);
    g
}

fn effective_student(cfg: &RunConfig) -> StudentConfig {
    let mut s = cfg.student.clone();
    s.seed = mix_seed(&[cfg.seed, fnv1a64(b"student"), cfg.student.seed]);
    s
}

fn denoise_rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, fnv1a64(b"denoise"), cfg.generate.seed]))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut raw = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Corrupt(format!("encoding {}: {e}", path.display())))?;
    raw.push('\n');
    write_atomic(path, raw.as_bytes())
}

/// Tunes the prompt bank and mixer on the target few-shot set and writes
/// last/best checkpoints plus the tuning report.
pub fn cmd_tune(cfg: &RunConfig) -> Result<StageOutcome> {
    let ctx = load_context(cfg)?;
    let started = Instant::now();
    let backend = cfg.teacher.build()?;
    let train = tuning_pool(&ctx.dataset, cfg.tune.include_source);
    let dev = select_split(&ctx.dataset, Split::TargetDev);
    let bank = initialize_bank(&ctx.schema, |text| backend.embed_tokens(text))?;
    let mixer = MixerParams::init(
        cfg.tune.strategy,
        bank.embed_dim,
        &cfg.mixer,
        mix_seed(&[cfg.seed, fnv1a64(b"mixer-init"), cfg.tune.seed]),
    )?;
    let tune_cfg = effective_tune(cfg);
    let options = cfg.ablation.assembly_options();
    let outcome = tune(&bank, &mixer, &train, &dev, backend.as_ref(), &tune_cfg, &options)?;

    save_checkpoint(&outcome.bank, Some(&outcome.mixer), &ctx.paths.bank_last())?;
    save_checkpoint(&outcome.best_bank, Some(&outcome.best_mixer), &ctx.paths.bank_best())?;
    write_json(&ctx.paths.tune_report(), &outcome.report)?;

    let artifacts =
        vec![ctx.paths.bank_last(), ctx.paths.bank_best(), ctx.paths.tune_report()];
    finish_stage(cfg, &ctx.paths, "tune", &artifacts, started)?;
    let last_loss = outcome.report.loss_curve.last().map(|(_, l)| *l);
    Ok(StageOutcome {
        stage: "tune".into(),
        artifacts,
        summary: format!(
            "tuned {} steps on {} examples; final loss {}",
            outcome.report.steps_run,
            train.len(),
            last_loss.map_or("n/a".to_string(), |l| format!("{l:.4}")),
        ),
    })
}

/// Synthesizes candidates from the tuned bank, then weights and filters them
/// down to the target count. `bank_override` generates from an explicit
/// checkpoint instead of this run's tuned one.
pub fn cmd_generate(cfg: &RunConfig, bank_override: Option<&Path>) -> Result<StageOutcome> {
    let ctx = load_context(cfg)?;
    let started = Instant::now();
    let bank_path = match bank_override {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Validation(format!(
                    "bank checkpoint does not exist: {}",
                    p.display()
                )));
            }
            p.to_path_buf()
        }
        None => {
            let p = ctx.paths.bank_best();
            require_artifact(&p, "generate", "tune")?;
            p
        }
    };
    let (bank, mixer) = load_checkpoint(&bank_path)?;
    let mixer = match mixer {
        Some(m) => m,
        // Parameter-free strategies load from bank-only checkpoints.
        None => match cfg.tune.strategy {
            MixStrategy::Concat => MixerParams::Concat,
            MixStrategy::Pooling => MixerParams::Pooling,
            s => {
                return Err(Error::Corrupt(format!(
                    "checkpoint {} has no mixer parameters but strategy {s} needs them",
                    bank_path.display()
                )));
            }
        },
    };

    let seeds = select_split(&ctx.dataset, Split::TargetTrain);
    if seeds.is_empty() {
        return Err(Error::Argument("no target-train seed examples to generate from".into()));
    }
    let mut gen_cfg = effective_gen(cfg);
    if cfg.ablation.no_denoise {
        gen_cfg.overgen_factor = 1.0;
    }
    let backend = cfg.teacher.build()?;
    let options = cfg.ablation.assembly_options();
    let candidates = synthesize(&bank, &mixer, &seeds, backend.as_ref(), &gen_cfg, &options)?;
    write_atomic(&ctx.paths.candidates(), synthesized_to_jsonl(&candidates)?.as_bytes())?;

    let target = synthesis_target(&seeds, &gen_cfg);
    let candidate_count = candidates.len();
    let (kept, report) = if cfg.ablation.no_denoise {
        let n = candidates.len();
        (
            candidates,
            DenoiseReport { requested: target, kept: n, uniform_fallback: false, kept_all: true },
        )
    } else {
        denoise(candidates, &seeds, target, &mut denoise_rng(cfg), gen_cfg.similarity_floor)
    };
    write_atomic(&ctx.paths.synthesized(), synthesized_to_jsonl(&kept)?.as_bytes())?;
    write_json(&ctx.paths.denoise_report(), &report)?;

    let artifacts =
        vec![ctx.paths.candidates(), ctx.paths.synthesized(), ctx.paths.denoise_report()];
    finish_stage(cfg, &ctx.paths, "generate", &artifacts, started)?;
    Ok(StageOutcome {
        stage: "generate".into(),
        artifacts,
        summary: format!(
            "synthesized {candidate_count} candidates from {} units; kept {}",
            generation_units(&seeds, &gen_cfg).len(),
            report.kept,
        ),
    })
}

/// Reruns weighting and filtering over the stored raw candidates. Produces
/// the same survivors as the filter pass inside `cmd_generate`.
pub fn cmd_denoise(cfg: &RunConfig) -> Result<StageOutcome> {
    let ctx = load_context(cfg)?;
    let started = Instant::now();
    require_artifact(&ctx.paths.candidates(), "denoise", "generate")?;
    let raw = fs::read_to_string(ctx.paths.candidates())?;
    let candidates = synthesized_from_jsonl(&raw)?;
    let seeds = select_split(&ctx.dataset, Split::TargetTrain);
    let gen_cfg = effective_gen(cfg);
    let target = synthesis_target(&seeds, &gen_cfg);
    let candidate_count = candidates.len();

    let (kept, report) = if cfg.ablation.no_denoise {
        let n = candidates.len();
        (
            candidates,
            DenoiseReport { requested: target, kept: n, uniform_fallback: false, kept_all: true },
        )
    } else {
        denoise(candidates, &seeds, target, &mut denoise_rng(cfg), gen_cfg.similarity_floor)
    };
    write_atomic(&ctx.paths.synthesized(), synthesized_to_jsonl(&kept)?.as_bytes())?;
    write_json(&ctx.paths.denoise_report(), &report)?;

    let artifacts = vec![ctx.paths.synthesized(), ctx.paths.denoise_report()];
    finish_stage(cfg, &ctx.paths, "denoise", &artifacts, started)?;
    Ok(StageOutcome {
        stage: "denoise".into(),
        artifacts,
        summary: format!("kept {} of {candidate_count} candidates", report.kept),
    })
}

fn seed_tasks(examples: &[SeedExample], schema: &DatasetSchema) -> Vec<StudentTask> {
    examples
        .iter()
        .map(|ex| StudentTask {
            input: ex.utterance.clone(),
            target: canonical_label(ex, schema).rendered,
        })
        .collect()
}

/// Synthesized records become ordinary labeled examples for the student.
pub fn synthesized_seed(ex: &SynthesizedExample, index: usize) -> SeedExample {
    SeedExample {
        id: format!("syn-{index:05}"),
        utterance: ex.utterance.clone(),
        attributes: ex.attributes.clone(),
        slots: ex.slots.clone(),
        domain: ex.domain.clone(),
        split: Split::TargetTrain,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentReport {
    /// Sizes of each merged part; "merged" is their exact sum.
    pub counts: BTreeMap<String, usize>,
    pub used_synthetic: bool,
    pub train_curve: Vec<f64>,
    pub dev_curve: Vec<f64>,
    /// Held-out test metrics, keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
}

fn intent_set(label: &str) -> BTreeSet<String> {
    label.split(", ").filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn slot_pairs(label: &str) -> BTreeSet<(String, String)> {
    label
        .split("; ")
        .filter(|s| !s.is_empty())
        .filter_map(|p| p.split_once('='))
        .map(|(ty, value)| (ty.to_string(), value.to_string()))
        .collect()
}

/// Held-out metrics for a trained student: exact match always, plus the
/// task-shaped F1 recovered by parsing predictions back out of the
/// canonical label grammar.
pub fn student_metrics(
    student: &MockStudent,
    test: &[SeedExample],
    schema: &DatasetSchema,
) -> Result<BTreeMap<String, f64>> {
    let golds: Vec<String> =
        test.iter().map(|ex| canonical_label(ex, schema).rendered).collect();
    let preds: Vec<String> = test.iter().map(|ex| student.predict(&ex.utterance)).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("exact_match".to_string(), exact_match(&preds, &golds)?);
    match schema.task_kind {
        TaskKind::MultiIntent => {
            let p: Vec<BTreeSet<String>> = preds.iter().map(|s| intent_set(s)).collect();
            let g: Vec<BTreeSet<String>> = golds.iter().map(|s| intent_set(s)).collect();
            metrics.insert("multilabel_f1".to_string(), multilabel_f1(&p, &g)?);
        }
        TaskKind::Ner => {
            let p: Vec<BTreeSet<(String, String)>> =
                preds.iter().map(|s| slot_pairs(s)).collect();
            let g: Vec<BTreeSet<(String, String)>> =
                golds.iter().map(|s| slot_pairs(s)).collect();
            metrics.insert("pair_f1".to_string(), pair_f1(&p, &g)?);
        }
        // Exact match over canonical parses is already the headline metric.
        TaskKind::SemanticParse => {}
    }
    Ok(metrics)
}

/// Trains the downstream student on source + target-train + synthesized
/// data, duplicates preserved. `no_syn` trains the real-data-only baseline.
pub fn cmd_train_student(cfg: &RunConfig, no_syn: bool) -> Result<StageOutcome> {
    let ctx = load_context(cfg)?;
    let started = Instant::now();
    let source = select_split(&ctx.dataset, Split::Source);
    let target_train = select_split(&ctx.dataset, Split::TargetTrain);

    let mut merged = seed_tasks(&source, &ctx.schema);
    merged.extend(seed_tasks(&target_train, &ctx.schema));
    let syn_count = if no_syn {
        0
    } else {
        require_artifact(&ctx.paths.synthesized(), "train-student", "generate")?;
        let raw = fs::read_to_string(ctx.paths.synthesized())?;
        let synthesized = synthesized_from_jsonl(&raw)?;
        let as_seeds: Vec<SeedExample> = synthesized
            .iter()
            .enumerate()
            .map(|(i, ex)| synthesized_seed(ex, i))
            .collect();
        merged.extend(seed_tasks(&as_seeds, &ctx.schema));
        synthesized.len()
    };
    let dev = seed_tasks(&select_split(&ctx.dataset, Split::TargetDev), &ctx.schema);

    let student = train_student(&merged, &dev, &effective_student(cfg))?;
    write_atomic(&ctx.paths.student(), student.to_json()?.as_bytes())?;

    let test = select_split(&ctx.dataset, Split::TargetTest);
    let metrics = student_metrics(&student, &test, &ctx.schema)?;
    let mut counts = BTreeMap::new();
    counts.insert("source".to_string(), source.len());
    counts.insert("target_train".to_string(), target_train.len());
    counts.insert("synthetic".to_string(), syn_count);
    counts.insert("merged".to_string(), merged.len());
    let report = StudentReport {
        counts,
        used_synthetic: !no_syn,
        train_curve: student.train_curve.clone(),
        dev_curve: student.dev_curve.clone(),
        metrics: metrics.clone(),
    };
    write_json(&ctx.paths.student_report(), &report)?;

    let artifacts = vec![ctx.paths.student(), ctx.paths.student_report()];
    finish_stage(cfg, &ctx.paths, "train-student", &artifacts, started)?;
    let headline = metrics
        .iter()
        .map(|(k, v)| format!("{k} {v:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(StageOutcome {
        stage: "train-student".into(),
        artifacts,
        summary: format!("trained on {} merged examples; test {headline}", merged.len()),
    })
}

/// Scores the synthesized corpus and collects everything into one report.
/// Reruns over the same artifacts write byte-identical output.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<StageOutcome> {
    let ctx = load_context(cfg)?;
    let started = Instant::now();
    require_artifact(&ctx.paths.synthesized(), "evaluate", "generate")?;
    let raw = fs::read_to_string(ctx.paths.synthesized())?;
    let synthesized = synthesized_from_jsonl(&raw)?;
    let corpus: Vec<String> = synthesized.iter().map(|ex| ex.utterance.clone()).collect();

    let mut report = EvalReport::default();
    for k in 1..=3 {
        report.distinct.insert(k, distinct_k(&corpus, k));
    }
    if cfg.eval.correctness {
        let oracle = TruthOracle::new(&synthesized);
        let outcome = correctness(&synthesized, &oracle);
        report.correctness = outcome.percentage;
        report.oracle_failures = outcome.failures;
    }
    if cfg.eval.perplexity {
        let reference: Vec<String> = ctx
            .dataset
            .iter()
            .filter(|ex| matches!(ex.split, Split::Source | Split::TargetTrain))
            .map(|ex| ex.utterance.clone())
            .collect();
        let scorer = TokenFrequencyScorer::new(&reference);
        let result = perplexity(&corpus, &scorer);
        report.perplexity = result.value;
        report.perplexity_semantics = Some(scorer.semantics());
        if let Some(reason) = result.omitted_reason {
            report.notes.push(format!("perplexity omitted: {reason}"));
        }
    }
    if ctx.paths.student_report().is_file() {
        let raw = fs::read_to_string(ctx.paths.student_report())?;
        let student: StudentReport = serde_json::from_str(&raw)
            .map_err(|e| Error::Corrupt(format!("student report: {e}")))?;
        report.downstream = student.metrics;
        if !student.used_synthetic {
            report.notes.push("student was trained without synthetic data".to_string());
        }
    }
    if ctx.paths.denoise_report().is_file() {
        let raw = fs::read_to_string(ctx.paths.denoise_report())?;
        let denoise_report: DenoiseReport = serde_json::from_str(&raw)
            .map_err(|e| Error::Corrupt(format!("denoise report: {e}")))?;
        report.notes.push(format!(
            "filter target {}, kept {}",
            denoise_report.requested, denoise_report.kept
        ));
    }
    report.counts.insert("synthesized".to_string(), synthesized.len());
    for (name, split) in [
        ("source", Split::Source),
        ("target_train", Split::TargetTrain),
        ("target_dev", Split::TargetDev),
        ("target_test", Split::TargetTest),
    ] {
        report
            .counts
            .insert(name.to_string(), ctx.dataset.iter().filter(|ex| ex.split == split).count());
    }
    write_json(&ctx.paths.eval_report(), &report)?;

    let artifacts = vec![ctx.paths.eval_report()];
    finish_stage(cfg, &ctx.paths, "evaluate", &artifacts, started)?;
    Ok(StageOutcome {
        stage: "evaluate".into(),
        artifacts,
        summary: format!(
            "distinct@1 {:.3}; correctness {}",
            report.distinct.get(&1).copied().unwrap_or(0.0),
            report.correctness.map_or("n/a".to_string(), |c| format!("{c:.1}")),
        ),
    })
}

/// All stages in order: tune, generate (with filtering), train-student,
/// evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutcome>> {
    Ok(vec![
        cmd_tune(cfg)?,
        cmd_generate(cfg, None)?,
        cmd_train_student(cfg, false)?,
        cmd_evaluate(cfg)?,
    ])
}

/// Writes `bytes` to `path` via a sibling temp file and rename, so readers
/// never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let mut tmp = dir.join(file_name);
    tmp.set_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
