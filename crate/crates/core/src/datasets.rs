//! Labeled classification data: record-file loading, test subsampling,
//! label-space restriction, the synthetic signature task, and demo-length stats.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{split_tokens, PromptTemplate};

/// Default test subsample size.
pub const DEFAULT_TEST_SUBSAMPLE: usize = 250;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{0} contains no records")]
    Empty(String),
    #[error("example input and label must be non-empty")]
    EmptyField,
    #[error("keep fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("restricting {labels} labels by {fraction} leaves no labels")]
    EmptyLabelSpace { labels: usize, fraction: f64 },
    #[error("synthetic task needs at least 2 labels and split sizes of at least the label count")]
    BadSynthSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub label: String,
}

impl Example {
    pub fn new(input: impl Into<String>, label: impl Into<String>) -> Result<Self, DatasetError> {
        let (input, label) = (input.into(), label.into());
        if input.trim().is_empty() || label.trim().is_empty() {
            return Err(DatasetError::EmptyField);
        }
        Ok(Self { input, label })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Sorted, distinct.
    pub label_space: Vec<String>,
}

impl Dataset {
    /// Builds a dataset whose label space is every label in either split.
    pub fn new(name: impl Into<String>, train: Vec<Example>, test: Vec<Example>) -> Self {
        let label_space = train
            .iter()
            .chain(&test)
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            name: name.into(),
            train,
            test,
            label_space,
        }
    }
}

#[derive(Deserialize)]
struct RecordLine {
    input: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
}

/// Loads line-delimited JSON records `{"input", "label", "split"?}`; records
/// without a split go to train. Blank lines are ignored.
pub fn load_records(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_records(&name, &text)
}

pub fn parse_records(name: &str, text: &str) -> Result<Dataset, DatasetError> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(raw).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let ex = Example::new(rec.input, rec.label).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        match rec.split.as_deref() {
            None | Some("train") => train.push(ex),
            Some("test") => test.push(ex),
            Some(other) => {
                return Err(DatasetError::Malformed {
                    line,
                    message: format!("unknown split {other:?}"),
                })
            }
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(DatasetError::Empty(name.to_string()));
    }
    Ok(Dataset::new(name, train, test))
}

/// Keeps `n` test examples chosen by `seed`, in their original order.
pub fn subsample_test(d: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= d.test.len() {
        return d.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, d.test.len(), n).into_vec();
    picked.sort_unstable();
    Dataset {
        test: picked.into_iter().map(|i| d.test[i].clone()).collect(),
        ..d.clone()
    }
}

/// `round(fraction * labels)` with halves rounded up.
pub fn retained_label_count(labels: usize, fraction: f64) -> usize {
    (fraction * labels as f64 + 0.5).floor() as usize
}

/// Keeps a seeded random subset of the label space and drops every example
/// whose label was excluded.
pub fn restrict_labels(d: &Dataset, keep_fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(DatasetError::BadFraction(keep_fraction));
    }
    let total = d.label_space.len();
    let keep = retained_label_count(total, keep_fraction).min(total);
    if keep == total {
        return Ok(d.clone());
    }
    if keep == 0 {
        return Err(DatasetError::EmptyLabelSpace {
            labels: total,
            fraction: keep_fraction,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, total, keep).into_vec();
    picked.sort_unstable();
    let kept: Vec<String> = picked.into_iter().map(|i| d.label_space[i].clone()).collect();
    let keep_ex = |v: &[Example]| -> Vec<Example> {
        v.iter()
            .filter(|e| kept.binary_search(&e.label).is_ok())
            .cloned()
            .collect()
    };
    Ok(Dataset {
        name: d.name.clone(),
        train: keep_ex(&d.train),
        test: keep_ex(&d.test),
        label_space: kept,
    })
}

/// Parameters of the synthetic signature task.
///
/// Each label owns one signature word; an input is that signature plus
/// `distractors` words drawn without replacement from a shared pool, shuffled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_labels: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

fn default_distractors() -> usize {
    2
}

impl SynthSpec {
    pub fn new(num_labels: usize, train_size: usize, test_size: usize, seed: u64) -> Self {
        Self {
            num_labels,
            train_size,
            test_size,
            seed,
            pool_size: None,
            distractors: default_distractors(),
        }
    }

    /// Distractor pool size; four words per label unless set.
    pub fn pool(&self) -> usize {
        self.pool_size.unwrap_or(4 * self.num_labels)
    }
}

pub fn synth_label(i: usize) -> String {
    format!("class{i:02}")
}

pub fn synth_signature(i: usize) -> String {
    format!("sig{i:02}")
}

pub fn synth_distractor(i: usize) -> String {
    format!("w{i:03}")
}

pub fn synth_task(num_labels: usize, train_size: usize, test_size: usize, seed: u64) -> Result<Dataset, DatasetError> {
    synth_task_with(&SynthSpec::new(num_labels, train_size, test_size, seed))
}

pub fn synth_task_with(spec: &SynthSpec) -> Result<Dataset, DatasetError> {
    let l = spec.num_labels;
    if l < 2 || spec.train_size < l || spec.test_size < l || spec.pool() < spec.distractors {
        return Err(DatasetError::BadSynthSpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let make = |count: usize, offset: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        let mut out: Vec<Example> = (0..count)
            .map(|i| {
                let label = (offset + i) % l;
                let mut words = vec![synth_signature(label)];
                words.extend(
                    index::sample(rng, spec.pool(), spec.distractors)
                        .into_iter()
                        .map(synth_distractor),
                );
                words.shuffle(rng);
                Example {
                    input: words.join(" "),
                    label: synth_label(label),
                }
            })
            .collect();
        out.shuffle(rng);
        out
    };
    let train = make(spec.train_size, 0, &mut rng);
    // continue the label rotation so the combined splits stay balanced
    let test = make(spec.test_size, spec.train_size % l, &mut rng);
    let mut d = Dataset::new(format!("synth-{l}"), train, test);
    d.label_space = (0..l).map(synth_label).collect();
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub avg_demo_length: f64,
    pub size: usize,
    pub num_labels: usize,
}

/// Mean of `lengths` after discarding the `ceil(n / 100)` longest entries
/// (earlier indices go first among ties). At least one entry is always kept.
pub fn trimmed_mean_length(lengths: &[usize]) -> f64 {
    let n = lengths.len();
    if n == 0 {
        return 0.0;
    }
    let discard = n.div_ceil(100).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
    let kept = &order[discard..];
    kept.iter().map(|&i| lengths[i] as f64).sum::<f64>() / kept.len() as f64
}

/// Training-set statistics: rendered demonstration length in tokens (input,
/// label and template formatting), size and label count.
pub fn dataset_stats(d: &Dataset, template: &PromptTemplate) -> DatasetStats {
    let lengths: Vec<usize> = d
        .train
        .iter()
        .map(|e| split_tokens(&template.render_demo(e)).len())
        .collect();
    DatasetStats {
        avg_demo_length: trimmed_mean_length(&lengths),
        size: d.train.len(),
        num_labels: d.label_space.len(),
    }
}
