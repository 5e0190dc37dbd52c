//! The prompt-tuning loop: optimizes the instruction prefix, the attribute
//! prompts, and the mixer parameters against a frozen backend. The backend
//! itself is never updated; a parameter checksum taken before and after the
//! run enforces that.
//!
//! One step consumes `effective_batch` examples. Gradients are accumulated
//! per example and divided once by the effective batch, so the result does
//! not depend on how the batch is split into micro-batches.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, collect_prompts, retrieve_exemplars, AssemblyMode, AssemblyOptions};
use crate::backend::{DecodeParams, LmBackend};
use crate::data_model::SeedExample;
use crate::error::{Error, Result};
use crate::generator::split_generations;
use crate::mixer::{mix, mixer_backward, MixStrategy, MixerParams};
use crate::prompt_bank::{SoftPromptBank, PREFIX_ROWS};
use crate::text::{fnv1a64, mix_seed, sentence_bleu};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
    pub max_steps: usize,
    /// BLEU-proxy evaluation cadence in steps; 0 disables mid-run evals.
    pub eval_every: usize,
    pub seed: u64,
    pub strategy: MixStrategy,
    pub exemplar_k: usize,
    pub exemplar_top: usize,
    /// Include source-domain examples of shared attributes in the tuning
    /// pool. Interpreted by the pipeline when it builds the pool.
    pub include_source: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            learning_rate: 3e-2,
            effective_batch: 24,
            micro_batch: 8,
            grad_accum_steps: 3,
            max_steps: 50,
            eval_every: 10,
            seed: 0,
            strategy: MixStrategy::Attention,
            exemplar_k: 2,
            exemplar_top: 10,
            include_source: false,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Argument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.micro_batch * self.grad_accum_steps != self.effective_batch {
            return Err(Error::Argument(format!(
                "micro_batch {} x grad_accum_steps {} must equal effective_batch {}",
                self.micro_batch, self.grad_accum_steps, self.effective_batch
            )));
        }
        if self.effective_batch == 0 {
            return Err(Error::Argument("effective_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub steps_run: usize,
    /// (step, mean loss over the step's effective batch).
    pub loss_curve: Vec<(usize, f64)>,
    /// (step, BLEU proxy on the dev seeds).
    pub bleu_curve: Vec<(usize, f64)>,
    /// Step whose parameters scored the highest proxy; equals steps_run
    /// when no proxy was ever evaluated.
    pub best_step: usize,
}

/// Everything a finished tuning run hands to the pipeline: the final
/// parameters, the proxy-selected best parameters, and the report. The
/// proxy is a heuristic, so both checkpoints are kept.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub bank: SoftPromptBank,
    pub mixer: MixerParams,
    pub report: TuneReport,
    pub best_bank: SoftPromptBank,
    pub best_mixer: MixerParams,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct AdamSlot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive optimizer with lazily created per-tensor state: a tensor that
/// never receives a gradient is never touched, which is what keeps unused
/// attribute prompts bit-identical across a run.
#[derive(Debug, Default)]
pub struct AdamState {
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// One update of `param` by `grad * scale`. `scale` carries the batch
    /// division so callers can accumulate raw sums.
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64, scale: f64) {
        assert_eq!(param.len(), grad.len(), "gradient shape must match tensor '{name}'");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            t: 0,
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        slot.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
        for i in 0..param.len() {
            let g = grad[i] * scale;
            slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
            slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

fn accumulate(acc: &mut BTreeMap<String, Vec<f64>>, name: &str, grad: &[f64]) {
    let entry = acc.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
    assert_eq!(entry.len(), grad.len(), "accumulated shape drift on '{name}'");
    for (a, g) in entry.iter_mut().zip(grad) {
        *a += *g;
    }
}

fn apply_updates(
    bank: &mut SoftPromptBank,
    mixer: &mut MixerParams,
    acc: &BTreeMap<String, Vec<f64>>,
    opt: &mut AdamState,
    lr: f64,
    scale: f64,
) {
    if let Some(g) = acc.get("prefix") {
        let slice = bank.prefix.matrix.as_slice_mut().expect("standard layout");
        opt.update("prefix", slice, g, lr, scale);
    }
    for (name, g) in acc {
        if let Some(id) = name.strip_prefix("attr:") {
            let prompt = bank.prompts.get_mut(id).expect("gradients only for known prompts");
            let slice = prompt.matrix.as_slice_mut().expect("standard layout");
            opt.update(name, slice, g, lr, scale);
        }
    }
    for (name, slice) in mixer.tensor_slices_mut() {
        if let Some(g) = acc.get(name) {
            opt.update(name, slice, g, lr, scale);
        }
    }
}

/// Cursor over an endlessly reshuffled example order. Each epoch gets its
/// own stream derived from (seed, epoch), so the order is independent of
/// batch geometry.
struct ExampleStream {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl ExampleStream {
    fn new(seed: u64, n: usize) -> ExampleStream {
        let mut s = ExampleStream { seed, n, epoch: 0, order: Vec::new(), cursor: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, fnv1a64(b"epoch"), self.epoch]));
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
        self.epoch += 1;
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

/// Forward and backward for one example; accumulates raw gradients.
fn example_pass(
    example: &SeedExample,
    bank: &SoftPromptBank,
    mixer: &MixerParams,
    pool: &[SeedExample],
    backend: &dyn LmBackend,
    cfg: &TuneConfig,
    options: &AssemblyOptions,
    retrieval_rng: &mut ChaCha8Rng,
    acc: &mut BTreeMap<String, Vec<f64>>,
) -> Result<f64> {
    let exemplars = if options.include_exemplars {
        retrieve_exemplars(
            example,
            pool,
            cfg.exemplar_k,
            cfg.exemplar_top,
            retrieval_rng,
            AssemblyMode::Tune,
        )?
    } else {
        crate::assembly::ExemplarSet { exemplars: Vec::new(), candidate_pool_ids: Vec::new() }
    };
    let prompts = collect_prompts(bank, &example.attributes)?;
    let mixed = mix(&prompts, mixer)?;
    let assembled = assemble(example, bank, &mixed, &exemplars, AssemblyMode::Tune, options)?;
    let target = assembled.target.as_deref().expect("tune mode always has a target");
    let (loss, grad) =
        backend.loss_and_input_grads(&assembled.soft_block, &assembled.text_suffix, target)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on example '{}'", example.id)));
    }

    let prefix_rows = if options.include_prefix { PREFIX_ROWS } else { 0 };
    if options.include_prefix {
        let prefix_grad = grad.slice(ndarray::s![..prefix_rows, ..]);
        accumulate(acc, "prefix", prefix_grad.to_owned().as_slice().expect("contiguous"));
    }
    if options.include_attribute_prompt {
        let upstream = grad.slice(ndarray::s![prefix_rows.., ..]).to_owned();
        let grads = mixer_backward(&prompts, mixer, &upstream)?;
        for (attr, prompt_grad) in example.attributes.iter().zip(&grads.prompts) {
            accumulate(
                acc,
                &format!("attr:{attr}"),
                prompt_grad.as_slice().expect("standard layout"),
            );
        }
        for (name, slice) in grads.params.tensor_slices() {
            accumulate(acc, name, slice);
        }
    }
    Ok(loss)
}

/// Mean sentence-BLEU of one generation per dev seed against the seed's own
/// utterance. The generation's first utterance (after splitting) is scored;
/// an empty generation scores 0.
pub fn bleu_proxy(
    bank: &SoftPromptBank,
    mixer: &MixerParams,
    dev: &[SeedExample],
    backend: &dyn LmBackend,
    decode: &DecodeParams,
    options: &AssemblyOptions,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Argument("BLEU proxy needs a non-empty dev set".into()));
    }
    let mut total = 0.0;
    for seed_ex in dev {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            decode.seed,
            fnv1a64(b"bleu-proxy"),
            fnv1a64(seed_ex.id.as_bytes()),
        ]));
        let exemplars = if options.include_exemplars {
            retrieve_exemplars(seed_ex, dev, 2, 10, &mut rng, AssemblyMode::Generate)?
        } else {
            crate::assembly::ExemplarSet { exemplars: Vec::new(), candidate_pool_ids: Vec::new() }
        };
        let prompts = collect_prompts(bank, &seed_ex.attributes)?;
        let mixed = mix(&prompts, mixer)?;
        let assembled =
            assemble(seed_ex, bank, &mixed, &exemplars, AssemblyMode::Generate, options)?;
        let params = DecodeParams {
            num_return_sequences: 1,
            seed: mix_seed(&[decode.seed, fnv1a64(seed_ex.id.as_bytes())]),
            ..decode.clone()
        };
        let raw = backend.generate(&assembled.soft_block, &assembled.text_suffix, &params)?;
        let candidate = raw
            .first()
            .map(|r| split_generations(r))
            .unwrap_or_default()
            .into_iter()
            .next()
            .unwrap_or_default();
        total += sentence_bleu(&candidate, &seed_ex.utterance);
    }
    Ok(total / dev.len() as f64)
}

/// Runs the tuning loop. `train` is both the example stream and the
/// exemplar pool; `dev` feeds the BLEU proxy (empty disables it).
pub fn tune(
    bank: &SoftPromptBank,
    mixer: &MixerParams,
    train: &[SeedExample],
    dev: &[SeedExample],
    backend: &dyn LmBackend,
    cfg: &TuneConfig,
    options: &AssemblyOptions,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    if mixer.strategy() != cfg.strategy {
        return Err(Error::Argument(format!(
            "mixer parameters are for {} but config says {}",
            mixer.strategy(),
            cfg.strategy
        )));
    }
    let mut bank = bank.clone();
    let mut mixer = mixer.clone();
    let mut report = TuneReport {
        steps_run: 0,
        loss_curve: Vec::new(),
        bleu_curve: Vec::new(),
        best_step: 0,
    };
    if cfg.max_steps == 0 {
        return Ok(TuneOutcome {
            best_bank: bank.clone(),
            best_mixer: mixer.clone(),
            bank,
            mixer,
            report,
        });
    }
    if train.is_empty() {
        return Err(Error::Argument("tuning needs a non-empty training pool".into()));
    }
    let checksum_before = backend.param_checksum()?;

    let mut stream = ExampleStream::new(mix_seed(&[cfg.seed, fnv1a64(b"order")]), train.len());
    let mut retrieval_rng =
        ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, fnv1a64(b"exemplars")]));
    let mut opt = AdamState::new();
    let decode = DecodeParams::default();
    let mut best_proxy = f64::NEG_INFINITY;
    let mut best_bank = bank.clone();
    let mut best_mixer = mixer.clone();
    let mut proxy_evaluated = false;

    for step in 1..=cfg.max_steps {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut step_loss = 0.0;
        for _ in 0..cfg.effective_batch {
            let example = &train[stream.next()];
            let loss = example_pass(
                example,
                &bank,
                &mixer,
                train,
                backend,
                cfg,
                options,
                &mut retrieval_rng,
                &mut acc,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
            step_loss += loss;
        }
        let scale = 1.0 / cfg.effective_batch as f64;
        apply_updates(&mut bank, &mut mixer, &acc, &mut opt, cfg.learning_rate, scale);
        report.loss_curve.push((step, step_loss * scale));
        report.steps_run = step;

        let eval_now = !dev.is_empty()
            && cfg.eval_every > 0
            && (step % cfg.eval_every == 0 || step == cfg.max_steps);
        if eval_now {
            let proxy = bleu_proxy(&bank, &mixer, dev, backend, &decode, options)?;
            report.bleu_curve.push((step, proxy));
            proxy_evaluated = true;
            if proxy > best_proxy {
                best_proxy = proxy;
                best_bank = bank.clone();
                best_mixer = mixer.clone();
                report.best_step = step;
            }
        }
    }
    if !proxy_evaluated {
        best_bank = bank.clone();
        best_mixer = mixer.clone();
        report.best_step = report.steps_run;
    }

    if backend.param_checksum()? != checksum_before {
        return Err(Error::Backend("backend parameters changed during tuning".into()));
    }
    Ok(TuneOutcome { bank, mixer, report, best_bank, best_mixer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::backend::BackendDescriptor;
    use crate::data_model::{AttributeSpec, DatasetSchema, Split, TaskKind};
    use crate::prompt_bank::initialize_bank;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn schema(attrs: &[&str]) -> DatasetSchema {
        DatasetSchema {
            task_kind: TaskKind::MultiIntent,
            ontology: attrs
                .iter()
                .map(|a| AttributeSpec {
                    id: a.to_string(),
                    name: a.to_string(),
                    description: format!("requests about {a}"),
                    domain: "office".into(),
                })
                .collect(),
            source_domains: BTreeSet::from(["home".to_string()]),
            target_domain: "office".into(),
            filler_words: Vec::new(),
        }
    }

    fn seed_ex(id: &str, utterance: &str, attrs: &[&str]) -> SeedExample {
        SeedExample {
            id: id.into(),
            utterance: utterance.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            slots: Vec::new(),
            domain: "office".into(),
            split: Split::TargetTrain,
        }
    }

    fn fixture() -> (SoftPromptBank, Vec<SeedExample>, MockBackend) {
        let backend = MockBackend::new(11);
        let schema = schema(&["alarm", "banking"]);
        let bank = initialize_bank(&schema, |t| backend.embed_tokens(t)).unwrap();
        let data = vec![
            seed_ex("t1", "wake me at seven tomorrow", &["alarm"]),
            seed_ex("t2", "set an alarm for my meeting", &["alarm"]),
            seed_ex("t3", "check my account balance", &["banking"]),
            seed_ex("t4", "transfer rent to my landlord", &["banking"]),
            seed_ex("t5", "alarm me when the transfer clears", &["alarm", "banking"]),
        ];
        (bank, data, backend)
    }

    fn small_cfg(strategy: MixStrategy) -> TuneConfig {
        TuneConfig {
            max_steps: 8,
            effective_batch: 4,
            micro_batch: 2,
            grad_accum_steps: 2,
            eval_every: 4,
            seed: 5,
            strategy,
            ..TuneConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_bank_unchanged() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::Concat;
        let cfg = TuneConfig {
            max_steps: 0,
            strategy: MixStrategy::Concat,
            ..small_cfg(MixStrategy::Concat)
        };
        let out =
            tune(&bank, &mixer, &data, &[], &backend, &cfg, &AssemblyOptions::default()).unwrap();
        assert_eq!(out.bank, bank);
        assert!(out.report.loss_curve.is_empty());
        assert!(out.report.bleu_curve.is_empty());
        assert_eq!(out.report.steps_run, 0);
    }

    #[test]
    fn loss_decreases_on_the_fixture() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::init(
            MixStrategy::Attention,
            bank.embed_dim,
            &crate::mixer::MixerHyper::default(),
            7,
        )
        .unwrap();
        let cfg = TuneConfig { max_steps: 30, ..small_cfg(MixStrategy::Attention) };
        let out =
            tune(&bank, &mixer, &data, &[], &backend, &cfg, &AssemblyOptions::default()).unwrap();
        let first = out.report.loss_curve.first().unwrap().1;
        let last = out.report.loss_curve.last().unwrap().1;
        assert!(last < first, "loss did not drop: {first} -> {last}");
        assert_eq!(out.report.steps_run, 30);
    }

    #[test]
    fn same_seed_same_report_and_parameters() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::init(
            MixStrategy::Bottleneck,
            bank.embed_dim,
            &crate::mixer::MixerHyper::default(),
            7,
        )
        .unwrap();
        let cfg = small_cfg(MixStrategy::Bottleneck);
        let opts = AssemblyOptions::default();
        let a = tune(&bank, &mixer, &data, &data, &backend, &cfg, &opts).unwrap();
        let b = tune(&bank, &mixer, &data, &data, &backend, &cfg, &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.mixer, b.mixer);
    }

    #[test]
    fn unused_attribute_prompt_is_bit_identical() {
        let (bank, data, backend) = fixture();
        let alarm_only: Vec<SeedExample> =
            data.iter().filter(|e| e.attributes == vec!["alarm".to_string()]).cloned().collect();
        let mixer = MixerParams::Pooling;
        let cfg = small_cfg(MixStrategy::Pooling);
        let out = tune(
            &bank,
            &mixer,
            &alarm_only,
            &[],
            &backend,
            &cfg,
            &AssemblyOptions::default(),
        )
        .unwrap();
        assert_eq!(out.bank.prompts["banking"], bank.prompts["banking"]);
        assert_ne!(out.bank.prompts["alarm"], bank.prompts["alarm"]);
        assert_ne!(out.bank.prefix, bank.prefix);
    }

    #[test]
    fn batch_split_does_not_change_the_result() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::Pooling;
        let whole = TuneConfig {
            effective_batch: 6,
            micro_batch: 6,
            grad_accum_steps: 1,
            max_steps: 5,
            eval_every: 0,
            seed: 9,
            strategy: MixStrategy::Pooling,
            ..TuneConfig::default()
        };
        let split = TuneConfig { micro_batch: 2, grad_accum_steps: 3, ..whole.clone() };
        let opts = AssemblyOptions::default();
        let a = tune(&bank, &mixer, &data, &[], &backend, &whole, &opts).unwrap();
        let b = tune(&bank, &mixer, &data, &[], &backend, &split, &opts).unwrap();
        let pa = a.bank.prefix.matrix.as_slice().unwrap();
        let pb = b.bank.prefix.matrix.as_slice().unwrap();
        assert_eq!(pa, pb);
        for (x, y) in pa.iter().zip(pb) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_update_is_bit_identity() {
        let mut opt = AdamState::new();
        let mut param = vec![0.5, -1.25, 3.0e-7, -0.0];
        let before = param.clone();
        let grad = vec![1.0, -2.0, 0.125, 9.0];
        opt.update("prefix", &mut param, &grad, 0.0, 1.0 / 24.0);
        opt.update("prefix", &mut param, &grad, 0.0, 1.0 / 24.0);
        let bits_before: Vec<u64> = before.iter().map(|v| v.to_bits()).collect();
        let bits_after: Vec<u64> = param.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_before, bits_after);
    }

    #[test]
    fn mixer_parameters_receive_updates() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::init(
            MixStrategy::Attention,
            bank.embed_dim,
            &crate::mixer::MixerHyper::default(),
            3,
        )
        .unwrap();
        let cfg = small_cfg(MixStrategy::Attention);
        let out =
            tune(&bank, &mixer, &data, &[], &backend, &cfg, &AssemblyOptions::default()).unwrap();
        assert_ne!(out.mixer, mixer);
    }

    #[test]
    fn strategy_mismatch_is_rejected() {
        let (bank, data, backend) = fixture();
        let cfg = small_cfg(MixStrategy::Attention);
        let err = tune(
            &bank,
            &MixerParams::Concat,
            &data,
            &[],
            &backend,
            &cfg,
            &AssemblyOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn invalid_batch_geometry_is_rejected() {
        let cfg = TuneConfig { micro_batch: 5, grad_accum_steps: 3, ..TuneConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Argument(_))));
    }

    /// Generates exactly the text after "1. " in its suffix, so a dev pool
    /// of one seed makes the generation an identical copy of that seed.
    struct EchoBackend {
        inner: MockBackend,
    }

    impl LmBackend for EchoBackend {
        fn descriptor(&self) -> BackendDescriptor {
            self.inner.descriptor()
        }
        fn embed_tokens(&self, text: &str) -> crate::error::Result<Array2<f64>> {
            self.inner.embed_tokens(text)
        }
        fn loss_and_input_grads(
            &self,
            soft_block: &Array2<f64>,
            text_suffix: &str,
            target: &str,
        ) -> crate::error::Result<(f64, Array2<f64>)> {
            self.inner.loss_and_input_grads(soft_block, text_suffix, target)
        }
        fn generate(
            &self,
            _soft_block: &Array2<f64>,
            text_suffix: &str,
            params: &DecodeParams,
        ) -> crate::error::Result<Vec<String>> {
            let echoed = text_suffix
                .lines()
                .find_map(|l| l.strip_prefix("1. "))
                .unwrap_or("")
                .to_string();
            Ok(vec![echoed; params.num_return_sequences])
        }
        fn param_checksum(&self) -> crate::error::Result<u64> {
            self.inner.param_checksum()
        }
    }

    #[test]
    fn proxy_is_exactly_one_on_identical_copies() {
        let (bank, data, _backend) = fixture();
        let backend = EchoBackend { inner: MockBackend::new(11) };
        let dev = vec![data[0].clone()];
        let proxy = bleu_proxy(
            &bank,
            &MixerParams::Pooling,
            &dev,
            &backend,
            &DecodeParams::default(),
            &AssemblyOptions::default(),
        )
        .unwrap();
        assert_eq!(proxy, 1.0);
    }

    #[test]
    fn proxy_is_zero_on_empty_generations() {
        struct SilentBackend {
            inner: MockBackend,
        }
        impl LmBackend for SilentBackend {
            fn descriptor(&self) -> BackendDescriptor {
                self.inner.descriptor()
            }
            fn embed_tokens(&self, text: &str) -> crate::error::Result<Array2<f64>> {
                self.inner.embed_tokens(text)
            }
            fn loss_and_input_grads(
                &self,
                soft_block: &Array2<f64>,
                text_suffix: &str,
                target: &str,
            ) -> crate::error::Result<(f64, Array2<f64>)> {
                self.inner.loss_and_input_grads(soft_block, text_suffix, target)
            }
            fn generate(
                &self,
                _soft_block: &Array2<f64>,
                _text_suffix: &str,
                params: &DecodeParams,
            ) -> crate::error::Result<Vec<String>> {
                Ok(vec![String::new(); params.num_return_sequences])
            }
            fn param_checksum(&self) -> crate::error::Result<u64> {
                self.inner.param_checksum()
            }
        }
        let (bank, data, _backend) = fixture();
        let backend = SilentBackend { inner: MockBackend::new(11) };
        let proxy = bleu_proxy(
            &bank,
            &MixerParams::Pooling,
            &data,
            &backend,
            &DecodeParams::default(),
            &AssemblyOptions::default(),
        )
        .unwrap();
        assert_eq!(proxy, 0.0);
    }

    #[test]
    fn proxy_mean_matches_per_seed_scores() {
        struct FixedBackend {
            inner: MockBackend,
            text: String,
        }
        impl LmBackend for FixedBackend {
            fn descriptor(&self) -> BackendDescriptor {
                self.inner.descriptor()
            }
            fn embed_tokens(&self, text: &str) -> crate::error::Result<Array2<f64>> {
                self.inner.embed_tokens(text)
            }
            fn loss_and_input_grads(
                &self,
                soft_block: &Array2<f64>,
                text_suffix: &str,
                target: &str,
            ) -> crate::error::Result<(f64, Array2<f64>)> {
                self.inner.loss_and_input_grads(soft_block, text_suffix, target)
            }
            fn generate(
                &self,
                _soft_block: &Array2<f64>,
                _text_suffix: &str,
                params: &DecodeParams,
            ) -> crate::error::Result<Vec<String>> {
                Ok(vec![self.text.clone(); params.num_return_sequences])
            }
            fn param_checksum(&self) -> crate::error::Result<u64> {
                self.inner.param_checksum()
            }
        }
        let (bank, data, _backend) = fixture();
        let text = "wake me at seven sharp";
        let backend = FixedBackend { inner: MockBackend::new(11), text: text.into() };
        let dev = vec![data[0].clone(), data[1].clone()];
        let proxy = bleu_proxy(
            &bank,
            &MixerParams::Pooling,
            &dev,
            &backend,
            &DecodeParams::default(),
            &AssemblyOptions::default(),
        )
        .unwrap();
        let want = (sentence_bleu(text, &dev[0].utterance)
            + sentence_bleu(text, &dev[1].utterance))
            / 2.0;
        assert!((proxy - want).abs() < 1e-12);
    }

    /// A backend whose checksum changes between calls, standing in for an
    /// implementation that mutates its weights.
    struct DriftingBackend {
        inner: MockBackend,
        calls: std::cell::Cell<u64>,
    }

    impl LmBackend for DriftingBackend {
        fn descriptor(&self) -> BackendDescriptor {
            self.inner.descriptor()
        }
        fn embed_tokens(&self, text: &str) -> crate::error::Result<Array2<f64>> {
            self.inner.embed_tokens(text)
        }
        fn loss_and_input_grads(
            &self,
            soft_block: &Array2<f64>,
            text_suffix: &str,
            target: &str,
        ) -> crate::error::Result<(f64, Array2<f64>)> {
            self.inner.loss_and_input_grads(soft_block, text_suffix, target)
        }
        fn generate(
            &self,
            soft_block: &Array2<f64>,
            text_suffix: &str,
            params: &DecodeParams,
        ) -> crate::error::Result<Vec<String>> {
            self.inner.generate(soft_block, text_suffix, params)
        }
        fn param_checksum(&self) -> crate::error::Result<u64> {
            let n = self.calls.get();
            self.calls.set(n + 1);
            Ok(n)
        }
    }

    #[test]
    fn weight_drift_fails_the_run() {
        let (bank, data, _backend) = fixture();
        let backend = DriftingBackend { inner: MockBackend::new(11), calls: Default::default() };
        let cfg = TuneConfig { max_steps: 1, ..small_cfg(MixStrategy::Pooling) };
        let err = tune(
            &bank,
            &MixerParams::Pooling,
            &data,
            &[],
            &backend,
            &cfg,
            &AssemblyOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
    }

    #[test]
    fn best_checkpoint_tracks_the_proxy_peak() {
        let (bank, data, backend) = fixture();
        let mixer = MixerParams::init(
            MixStrategy::Attention,
            bank.embed_dim,
            &crate::mixer::MixerHyper::default(),
            2,
        )
        .unwrap();
        let cfg = TuneConfig { max_steps: 12, eval_every: 3, ..small_cfg(MixStrategy::Attention) };
        let out =
            tune(&bank, &mixer, &data, &data, &backend, &cfg, &AssemblyOptions::default())
                .unwrap();
        assert!(!out.report.bleu_curve.is_empty());
        let peak = out
            .report
            .bleu_curve
            .iter()
            .cloned()
            .fold((0usize, f64::NEG_INFINITY), |acc, (s, b)| if b > acc.1 { (s, b) } else { acc });
        assert_eq!(out.report.best_step, peak.0);
    }
}
