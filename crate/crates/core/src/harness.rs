//! Experiment driver: expands a config into a grid of
//! (strategy, ordering, mask, seed, k) points, evaluates each one with the
//! constructed model and collects per-example results.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    load_records, restrict_labels, subsample_test, synth_task_with, Dataset, DatasetError, Example, SynthSpec,
    DEFAULT_TEST_SUBSAMPLE,
};
use crate::decoding::{
    build_trie, constrained_greedy, decoded_text, unconstrained_greedy, DecodeError, LabelTrie, ModelSource,
    DEFAULT_BOOST,
};
use crate::masks::{token_mask_from_spans, AttentionMask, ExampleSpans, MaskError, MaskSpec};
use crate::metrics::{flip_rate, ExampleRecord, MetricError, RunKey, RunResult};
use crate::model::{
    build_induction_model_with, decode_step_open, prefill, required_d_model, InductionParams, KVCache, ModelError,
    ModelWeights,
};
use crate::prompting::{order_examples, render_prompt, Ordering, PromptError, PromptTemplate, TemplateSpec, TokenId, Vocab};
use crate::selection::{
    random_prefix, Bm25Index, RecallIndex, SelectionError, SelectionStrategy, SimilarityMatrix,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Errors caused by the configuration rather than by running it.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Dataset(_)
                | HarnessError::Prompt(PromptError::UnknownPreset(_))
                | HarnessError::Prompt(PromptError::EmptyTemplateField { .. })
                | HarnessError::Json(_)
        )
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synth(SynthSpec),
    Path(PathBuf),
}

/// Demonstration ordering as configured; shuffles draw their seed from the grid seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingSpec {
    AsGiven,
    Shuffled,
    LabelSorted,
}

impl OrderingSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OrderingSpec::AsGiven => "as_given",
            OrderingSpec::Shuffled => "shuffled",
            OrderingSpec::LabelSorted => "label_sorted",
        }
    }

    fn resolve(&self, seed: u64) -> Ordering {
        match self {
            OrderingSpec::AsGiven => Ordering::AsGiven,
            OrderingSpec::Shuffled => Ordering::Shuffled(derive_seed(seed, ORDER_STREAM)),
            OrderingSpec::LabelSorted => Ordering::LabelSorted,
        }
    }
}

/// Overrides for the constructed model's constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub recency: f64,
    pub offset_sharpness: f64,
    pub match_gain: f64,
    pub bigram_gain: f64,
    pub bag_gain: f64,
    pub ignore_penalty: f64,
    pub logit_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let p = InductionParams::default();
        Self {
            recency: p.recency,
            offset_sharpness: p.offset_sharpness,
            match_gain: p.match_gain,
            bigram_gain: p.bigram_gain,
            bag_gain: p.bag_gain,
            ignore_penalty: p.ignore_penalty,
            logit_scale: p.logit_scale,
        }
    }
}

impl ModelSpec {
    fn params(&self, bag_ignore: Vec<TokenId>) -> InductionParams {
        InductionParams {
            recency: self.recency,
            offset_sharpness: self.offset_sharpness,
            match_gain: self.match_gain,
            bigram_gain: self.bigram_gain,
            bag_gain: self.bag_gain,
            ignore_penalty: self.ignore_penalty,
            logit_scale: self.logit_scale,
            bag_ignore,
        }
    }
}

fn default_template() -> TemplateSpec {
    TemplateSpec::Preset("generic".into())
}
fn default_orderings() -> Vec<OrderingSpec> {
    vec![OrderingSpec::AsGiven]
}
fn default_masks() -> Vec<MaskSpec> {
    vec![MaskSpec::Full]
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_true() -> bool {
    true
}
fn default_subsample() -> usize {
    DEFAULT_TEST_SUBSAMPLE
}
fn default_workers() -> usize {
    1
}
fn default_max_len() -> usize {
    8
}
fn default_boost() -> f64 {
    DEFAULT_BOOST
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_template")]
    pub template: TemplateSpec,
    pub strategies: Vec<SelectionStrategy>,
    #[serde(default = "default_orderings")]
    pub orderings: Vec<OrderingSpec>,
    pub k_list: Vec<usize>,
    #[serde(default = "default_masks")]
    pub masks: Vec<MaskSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub constrained: bool,
    #[serde(default = "default_subsample")]
    pub test_subsample_n: usize,
    #[serde(default)]
    pub subsample_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Reorderings per grid point used to measure the flip rate; 0 skips it.
    #[serde(default)]
    pub reshuffles: usize,
    /// Encode a shared demonstration prefix once and reuse it per test example.
    #[serde(default = "default_true")]
    pub cache_prefix: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Keep only this fraction of the label space (seeded by `subsample_seed`).
    #[serde(default)]
    pub label_fraction: Option<f64>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_boost")]
    pub boost: f64,
    /// Demonstration counts for the copying test; defaults to `k_list`.
    #[serde(default)]
    pub needle_k: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.strategies.is_empty() {
            return Err(config_err("strategies must not be empty"));
        }
        if self.orderings.is_empty() {
            return Err(config_err("orderings must not be empty"));
        }
        if self.masks.is_empty() {
            return Err(config_err("masks must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.k_list.is_empty() {
            return Err(config_err("k_list must not be empty"));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("k_list must be strictly ascending"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(config_err("max_len must be at least 1"));
        }
        if !(self.boost > 0.0) {
            return Err(config_err("boost must be positive"));
        }
        if self.test_subsample_n == 0 {
            return Err(config_err("test_subsample_n must be at least 1"));
        }
        if let Some(f) = self.label_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err(format!("label_fraction {f} outside (0, 1]")));
            }
        }
        for s in &self.strategies {
            s.validate().map_err(|e| config_err(e.to_string()))?;
        }
        self.template.resolve().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }
}

const ORDER_STREAM: u64 = 0x6f72_6465_72;
const FILL_STREAM: u64 = 0x66_696c_6c;
const RESHUFFLE_STREAM: u64 = 0x7265_7368;

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

enum StrategyState {
    RandomPrefix,
    Bm25(Bm25Index),
    Recall(RecallIndex),
    Precomputed(SimilarityMatrix),
}

/// Everything built once per experiment and shared read-only by the grid.
pub struct Prepared {
    pub dataset: Dataset,
    pub template: PromptTemplate,
    pub vocab: Vocab,
    pub weights: ModelWeights,
    pub trie: LabelTrie,
    newline: TokenId,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut dataset = match &cfg.dataset {
            DatasetSource::Synth(spec) => synth_task_with(spec)?,
            DatasetSource::Path(p) => load_records(p)?,
        };
        if let Some(f) = cfg.label_fraction {
            dataset = restrict_labels(&dataset, f, cfg.subsample_seed)?;
        }
        dataset = subsample_test(&dataset, cfg.test_subsample_n, cfg.subsample_seed);
        if dataset.test.is_empty() {
            return Err(config_err("dataset has no test examples"));
        }
        let template = cfg.template.resolve()?;
        let mut vocab = Vocab::new();
        for e in dataset.train.iter().chain(&dataset.test) {
            vocab.tokenize(&template.render_demo(e))?;
        }
        for l in &dataset.label_space {
            vocab.tokenize(l)?;
        }
        vocab.freeze();
        let ignore: Vec<TokenId> = template
            .formatting_tokens()
            .iter()
            .filter_map(|t| vocab.id(t))
            .collect();
        let v = vocab.len();
        let weights = build_induction_model_with(v, required_d_model(v), &cfg.model.params(ignore))?;
        let trie = build_trie(&dataset.label_space, &vocab)?;
        let newline = vocab.newline().expect("rendered demonstrations contain newlines");
        Ok(Self {
            dataset,
            template,
            vocab,
            weights,
            trie,
            newline,
        })
    }

    fn encode_demos(&self, demos: &[Example]) -> Result<(Vec<TokenId>, ExampleSpans), HarnessError> {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(demos.len());
        for d in demos {
            let piece = self.vocab.encode(&self.template.render_demo(d))?;
            spans.push(tokens.len()..tokens.len() + piece.len());
            tokens.extend(piece);
        }
        let end = tokens.len();
        Ok((tokens, ExampleSpans::new(spans, end..end)?))
    }

    /// Encodes the demonstrations under `mask` into a reusable cache.
    pub fn encode_prefix(&self, demos: &[Example], mask: &MaskSpec) -> Result<KVCache, HarnessError> {
        if demos.is_empty() {
            return Ok(KVCache::new(&self.weights));
        }
        let (tokens, spans) = self.encode_demos(demos)?;
        let tm = token_mask_from_spans(&mask.example_mask(demos.len())?, &spans)?;
        let (mut cache, _) = prefill(&self.weights, &tokens, &tm)?;
        cache.freeze();
        Ok(cache)
    }

    /// Predicts from a cache holding the demonstrations.
    pub fn predict_from_prefix(&self, prefix: &KVCache, input: &str, constrained: bool, cfg: &DecodeCfg) -> Result<String, HarnessError> {
        let scaffold = self.vocab.encode(&self.template.render_test(input))?;
        let mut cache = prefix.clone();
        let mut logits = Vec::new();
        for &t in &scaffold {
            logits = decode_step_open(&self.weights, &mut cache, t)?;
        }
        self.decode(cache, logits, constrained, cfg)
    }

    /// Predicts by encoding the whole prompt from scratch.
    pub fn predict_fresh(
        &self,
        demos: &[Example],
        input: &str,
        mask: &MaskSpec,
        constrained: bool,
        cfg: &DecodeCfg,
    ) -> Result<String, HarnessError> {
        let prompt = render_prompt(demos, input, &self.template);
        let tokens = self.vocab.encode(&prompt.text)?;
        let tm = if demos.is_empty() {
            AttentionMask::causal(tokens.len())
        } else {
            token_mask_from_spans(&mask.example_mask(demos.len())?, &prompt.spans)?
        };
        let (cache, logits) = prefill(&self.weights, &tokens, &tm)?;
        let last = logits.row(tokens.len() - 1).to_vec();
        self.decode(cache, last, constrained, cfg)
    }

    fn decode(&self, cache: KVCache, logits: Vec<f64>, constrained: bool, cfg: &DecodeCfg) -> Result<String, HarnessError> {
        let mut src = ModelSource::new(&self.weights, cache, logits);
        if constrained {
            Ok(constrained_greedy(&mut src, &self.trie, cfg.boost, self.newline)?)
        } else {
            let toks = unconstrained_greedy(&mut src, self.newline, cfg.max_len)?;
            Ok(decoded_text(&toks, &self.trie, &self.vocab)?)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeCfg {
    pub boost: f64,
    pub max_len: usize,
}

/// Results of a run plus the error that stopped it early, if any.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub failure: Option<String>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    prep: &'a Prepared,
    pool: rayon::ThreadPool,
    decode: DecodeCfg,
}

struct Point<'a> {
    strategy: &'a SelectionStrategy,
    state: &'a StrategyState,
    ordering: OrderingSpec,
    mask: MaskSpec,
    seed: u64,
    k: usize,
}

impl Runner<'_> {
    /// Demonstration set for test example `q` before ordering.
    fn select(&self, p: &Point, q: usize) -> Result<Vec<Example>, HarnessError> {
        let train = &self.prep.dataset.train;
        let query = &self.prep.dataset.test[q].input;
        let fill_seed = derive_seed(derive_seed(p.seed, FILL_STREAM), q as u64);
        let idx = match p.state {
            StrategyState::RandomPrefix => random_prefix(train.len(), p.k, p.seed)?,
            StrategyState::Bm25(index) => index.select(query, p.k, fill_seed)?.indices,
            StrategyState::Recall(index) => crate::selection::recall_overlap_select(index, query, p.k, fill_seed)?.indices,
            StrategyState::Precomputed(m) => m.select(q, p.k)?.indices,
        };
        Ok(idx.into_iter().map(|i| train[i].clone()).collect())
    }

    /// Predictions on the whole test set with demonstrations from `demos_for`.
    fn predict_all(
        &self,
        p: &Point,
        demos_for: &(dyn Fn(usize) -> Result<Vec<Example>, HarnessError> + Sync),
    ) -> Result<Vec<String>, HarnessError> {
        let test = &self.prep.dataset.test;
        let constrained = self.cfg.constrained;
        if p.strategy.is_shared() && self.cfg.cache_prefix {
            let demos = demos_for(0)?;
            let prefix = self.prep.encode_prefix(&demos, &p.mask)?;
            self.pool.install(|| {
                test.par_iter()
                    .map(|e| self.prep.predict_from_prefix(&prefix, &e.input, constrained, &self.decode))
                    .collect()
            })
        } else {
            self.pool.install(|| {
                test.par_iter()
                    .enumerate()
                    .map(|(q, e)| {
                        let demos = demos_for(q)?;
                        self.prep.predict_fresh(&demos, &e.input, &p.mask, constrained, &self.decode)
                    })
                    .collect()
            })
        }
    }

    fn run_point(&self, p: &Point) -> Result<RunResult, HarnessError> {
        let start = Instant::now();
        let ordering = p.ordering.resolve(p.seed);
        let base = |q: usize| -> Result<Vec<Example>, HarnessError> { Ok(order_examples(&self.select(p, q)?, ordering)) };
        let preds = self.predict_all(p, &base)?;
        let runtime_ms = start.elapsed().as_millis() as u64;
        let prep = self.prep;
        let records = prep
            .dataset
            .test
            .iter()
            .zip(&preds)
            .map(|(e, pred)| ExampleRecord {
                gold: e.label.clone(),
                prediction: pred.clone(),
                valid: prep.dataset.label_space.binary_search(pred).is_ok(),
            })
            .collect();
        let key = RunKey {
            dataset: prep.dataset.name.clone(),
            strategy: p.strategy.name().to_string(),
            ordering: p.ordering.name().to_string(),
            k: p.k,
            block: p.mask.block().map(|c| (c.block_size, c.sink_blocks, c.local_blocks)),
            seed: p.seed,
            constrained: self.cfg.constrained,
        };
        let mut result = RunResult::new(key, prep.dataset.label_space.clone(), records, runtime_ms)?;
        if self.cfg.reshuffles > 0 {
            let mut total = 0.0;
            for r in 0..self.cfg.reshuffles {
                let reshuffle = Ordering::Shuffled(derive_seed(derive_seed(p.seed, RESHUFFLE_STREAM), r as u64));
                let shuffled = |q: usize| -> Result<Vec<Example>, HarnessError> { Ok(order_examples(&base(q)?, reshuffle)) };
                let other = self.predict_all(p, &shuffled)?;
                total += flip_rate(&preds, &other)?;
            }
            result.flip_rate = Some(total / self.cfg.reshuffles as f64);
        }
        Ok(result)
    }
}

fn build_states(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<StrategyState>, HarnessError> {
    cfg.strategies
        .iter()
        .map(|s| {
            Ok(match s {
                SelectionStrategy::RandomPrefix => StrategyState::RandomPrefix,
                SelectionStrategy::Bm25 { params, field } => {
                    StrategyState::Bm25(Bm25Index::from_dataset(&prep.dataset, *field, *params)?)
                }
                SelectionStrategy::RecallOverlap => StrategyState::Recall(RecallIndex::from_dataset(&prep.dataset)),
                SelectionStrategy::Precomputed { path } => {
                    let m = SimilarityMatrix::load(path).map_err(|e| config_err(e.to_string()))?;
                    if m.n_queries != prep.dataset.test.len() || m.n_docs != prep.dataset.train.len() {
                        return Err(config_err(format!(
                            "similarity matrix is {}x{} but the test/train splits are {}x{}",
                            m.n_queries,
                            m.n_docs,
                            prep.dataset.test.len(),
                            prep.dataset.train.len()
                        )));
                    }
                    StrategyState::Precomputed(m)
                }
            })
        })
        .collect()
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("cannot start {workers} workers: {e}")))
}

/// Runs the whole grid. Configuration problems are returned as errors before
/// any evaluation; a failure mid-run keeps the finished grid points.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let prep = Prepared::new(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentOutcome, HarnessError> {
    let max_k = *cfg.k_list.last().expect("validated non-empty");
    if max_k > prep.dataset.train.len() {
        return Err(config_err(format!(
            "k = {max_k} exceeds the {} training examples",
            prep.dataset.train.len()
        )));
    }
    let states = build_states(cfg, prep)?;
    let runner = Runner {
        cfg,
        prep,
        pool: thread_pool(cfg.workers)?,
        decode: DecodeCfg {
            boost: cfg.boost,
            max_len: cfg.max_len,
        },
    };
    let mut results = Vec::new();
    for (strategy, state) in cfg.strategies.iter().zip(&states) {
        for &ordering in &cfg.orderings {
            for &mask in &cfg.masks {
                for &seed in &cfg.seeds {
                    for &k in &cfg.k_list {
                        let point = Point {
                            strategy,
                            state,
                            ordering,
                            mask,
                            seed,
                            k,
                        };
                        match runner.run_point(&point) {
                            Ok(r) => {
                                log::info!(
                                    "{} {} {} seed={} k={} acc={:.4}",
                                    strategy.name(),
                                    ordering.name(),
                                    mask,
                                    seed,
                                    k,
                                    r.accuracy
                                );
                                results.push(r);
                            }
                            Err(e) => {
                                let marker = format!(
                                    "failed at strategy={} ordering={} mask={} seed={} k={}: {e}",
                                    strategy.name(),
                                    ordering.name(),
                                    mask,
                                    seed,
                                    k
                                );
                                log::error!("{marker}");
                                return Ok(ExperimentOutcome {
                                    results,
                                    failure: Some(marker),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ExperimentOutcome { results, failure: None })
}

/// Copying test: the first `k` test examples are the demonstrations and
/// also the evaluation set. One result per (k, mask).
pub fn needle_test(cfg: &ExperimentConfig) -> Result<Vec<RunResult>, HarnessError> {
    let prep = Prepared::new(cfg)?;
    let ks = cfg.needle_k.clone().unwrap_or_else(|| cfg.k_list.clone());
    let test = &prep.dataset.test;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > test.len()) {
        return Err(config_err(format!("needle k = {k} must be in 1..={}", test.len())));
    }
    let pool = thread_pool(cfg.workers)?;
    let decode = DecodeCfg {
        boost: cfg.boost,
        max_len: cfg.max_len,
    };
    let mut out = Vec::new();
    for &mask in &cfg.masks {
        for &k in &ks {
            let start = Instant::now();
            let demos = &test[..k];
            let prefix = prep.encode_prefix(demos, &mask)?;
            let preds: Vec<String> = pool.install(|| {
                demos
                    .par_iter()
                    .map(|e| prep.predict_from_prefix(&prefix, &e.input, cfg.constrained, &decode))
                    .collect::<Result<_, _>>()
            })?;
            let records = demos
                .iter()
                .zip(preds)
                .map(|(e, p)| ExampleRecord {
                    gold: e.label.clone(),
                    valid: prep.dataset.label_space.binary_search(&p).is_ok(),
                    prediction: p,
                })
                .collect();
            let key = RunKey {
                dataset: prep.dataset.name.clone(),
                strategy: "needle".into(),
                ordering: OrderingSpec::AsGiven.name().into(),
                k,
                block: mask.block().map(|c| (c.block_size, c.sink_blocks, c.local_blocks)),
                seed: cfg.subsample_seed,
                constrained: cfg.constrained,
            };
            let runtime = start.elapsed().as_millis() as u64;
            out.push(RunResult::new(key, prep.dataset.label_space.clone(), records, runtime)?);
        }
    }
    Ok(out)
}

/// Mean flip rate per k over seeds, measured with `reshuffles` reorderings.
pub fn order_sensitivity(cfg: &ExperimentConfig, reshuffles: usize) -> Result<Vec<(usize, f64)>, HarnessError> {
    if reshuffles == 0 {
        return Err(config_err("reshuffles must be at least 1"));
    }
    let cfg = ExperimentConfig {
        reshuffles,
        ..cfg.clone()
    };
    let outcome = run_experiment(&cfg)?;
    if let Some(f) = outcome.failure {
        return Err(config_err(f));
    }
    Ok(cfg
        .k_list
        .iter()
        .map(|&k| {
            let flips: Vec<f64> = outcome
                .results
                .iter()
                .filter(|r| r.key.k == k)
                .filter_map(|r| r.flip_rate)
                .collect();
            (k, flips.iter().sum::<f64>() / flips.len().max(1) as f64)
        })
        .collect())
}

/// Seed-averaged accuracy (and flip rate, when present) of one curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub strategy: String,
    pub ordering: String,
    pub block: Option<(usize, usize, usize)>,
    pub k: usize,
    pub mean_accuracy: f64,
    pub mean_flip_rate: Option<f64>,
    pub seeds: usize,
}

pub fn summarize(results: &[RunResult]) -> Vec<CurvePoint> {
    let mut out: Vec<CurvePoint> = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for r in results {
        let pos = out.iter().position(|c| {
            c.strategy == r.key.strategy && c.ordering == r.key.ordering && c.block == r.key.block && c.k == r.key.k
        });
        let i = match pos {
            Some(i) => i,
            None => {
                out.push(CurvePoint {
                    strategy: r.key.strategy.clone(),
                    ordering: r.key.ordering.clone(),
                    block: r.key.block,
                    k: r.key.k,
                    mean_accuracy: 0.0,
                    mean_flip_rate: None,
                    seeds: 0,
                });
                sums.push((0.0, 0.0, 0));
                out.len() - 1
            }
        };
        out[i].seeds += 1;
        sums[i].0 += r.accuracy;
        if let Some(f) = r.flip_rate {
            sums[i].1 += f;
            sums[i].2 += 1;
        }
    }
    for (c, (acc, flip, nflip)) in out.iter_mut().zip(sums) {
        c.mean_accuracy = acc / c.seeds as f64;
        c.mean_flip_rate = (nflip > 0).then(|| flip / nflip as f64);
    }
    out
}

pub const CSV_COLUMNS: [&str; 15] = [
    "dataset",
    "strategy",
    "ordering",
    "k",
    "b",
    "sink",
    "local",
    "seed",
    "constrained",
    "accuracy",
    "macro_f1",
    "invalid_rate",
    "flip_rate",
    "n_test",
    "runtime_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    /// `.json` paths get JSON, everything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => OutputFormat::Json,
            _ => OutputFormat::Csv,
        }
    }
}

pub fn results_to_csv(results: &[RunResult]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in results {
        let (b, s, l) = match r.key.block {
            Some((b, s, l)) => (b.to_string(), s.to_string(), l.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            r.key.dataset.clone(),
            r.key.strategy.clone(),
            r.key.ordering.clone(),
            r.key.k.to_string(),
            b,
            s,
            l,
            r.key.seed.to_string(),
            r.key.constrained.to_string(),
            r.accuracy.to_string(),
            r.macro_f1.to_string(),
            r.invalid_rate.to_string(),
            r.flip_rate.map(|f| f.to_string()).unwrap_or_default(),
            r.records.len().to_string(),
            r.runtime_ms.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_results(results: &[RunResult], format: OutputFormat, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    if results.is_empty() {
        return Err(config_err("no results to write"));
    }
    let text = match format {
        OutputFormat::Csv => results_to_csv(results)?,
        OutputFormat::Json => serde_json::to_string_pretty(results)?,
    };
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// Reads JSON results and checks every stored aggregate against its records.
pub fn load_results_json(path: impl AsRef<Path>) -> Result<Vec<RunResult>, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let results: Vec<RunResult> = serde_json::from_str(&text)?;
    for r in &results {
        r.verify()?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "dataset": {"synth": {"num_labels": 4, "train_size": 40, "test_size": 12, "seed": 3}},
                "template": "trec",
                "strategies": [{"kind": "random_prefix"}],
                "k_list": [2, 6],
                "seeds": [0, 1]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = small_cfg();
        assert_eq!(c.masks, vec![MaskSpec::Full]);
        assert_eq!(c.orderings, vec![OrderingSpec::AsGiven]);
        assert!(c.constrained && c.cache_prefix);
        assert_eq!(c.test_subsample_n, 250);
    }

    #[test]
    fn config_violations() {
        let bad = [
            r#""k_list": [5, 2]"#,
            r#""k_list": [2], "seeds": []"#,
            r#""k_list": [2], "workers": 0"#,
            r#""k_list": [2], "template": "nope""#,
            r#""k_list": [2], "bogus": 1"#,
        ];
        for extra in bad {
            let text = format!(
                r#"{{"dataset": {{"synth": {{"num_labels": 4, "train_size": 40, "test_size": 12, "seed": 3}}}},
                   "strategies": [{{"kind": "random_prefix"}}], {extra}}}"#
            );
            let err = ExperimentConfig::from_json(&text).unwrap_err();
            assert!(err.is_config(), "{extra}: {err}");
        }
        let mut c = small_cfg();
        c.k_list = vec![41];
        let err = run_experiment(&c).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn grid_shape_and_csv() {
        let c = small_cfg();
        let out = run_experiment(&c).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.results.len(), 4);
        let csv = results_to_csv(&out.results[..1]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        // full mask leaves b, sink and local empty
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&fields[4..7], &["", "", ""]);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, ORDER_STREAM), derive_seed(1, FILL_STREAM));
        assert_ne!(derive_seed(1, ORDER_STREAM), derive_seed(2, ORDER_STREAM));
        assert_eq!(derive_seed(7, 9), derive_seed(7, 9));
    }

    #[test]
    fn summarize_averages_seeds() {
        let out = run_experiment(&small_cfg()).unwrap();
        let s = summarize(&out.results);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|c| c.seeds == 2));
        let k2: Vec<f64> = out.results.iter().filter(|r| r.key.k == 2).map(|r| r.accuracy).collect();
        assert_eq!(s[0].mean_accuracy, (k2[0] + k2[1]) / 2.0);
    }
}
