//! Example-block attention masks.
//!
//! Demonstrations are grouped into blocks of `b` consecutive examples. A block
//! always sees itself, optionally the first block (the attention sink) and the
//! `w` blocks immediately before it. The test scaffold that follows the
//! demonstrations sees every demonstration token. With `b >= k` the pattern
//! collapses to a plain causal mask.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensor::BoolMatrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("block size must be at least 1")]
    ZeroBlockSize,
    #[error("at least one demonstration is required, got k = 0")]
    NoExamples,
    #[error("span {index} ({start}..{end}) is not contiguous with the previous span ending at {expected}")]
    NonContiguous {
        index: usize,
        start: usize,
        end: usize,
        expected: usize,
    },
    #[error("span {index} is empty or reversed ({start}..{end})")]
    BadSpan { index: usize, start: usize, end: usize },
    #[error("test span starts at {start} but demonstrations end at {expected}")]
    TestSpanMisplaced { start: usize, expected: usize },
    #[error("block mask covers {mask} demonstrations but spans list {spans}")]
    ExampleCount { mask: usize, spans: usize },
}

/// `(b, sink, local)` parameterization of the example-block pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockMaskConfig {
    #[serde(rename = "b")]
    pub block_size: usize,
    #[serde(rename = "sink")]
    pub sink_blocks: usize,
    #[serde(rename = "local")]
    pub local_blocks: usize,
}

impl BlockMaskConfig {
    pub fn new(block_size: usize, sink_blocks: usize, local_blocks: usize) -> Result<Self, MaskError> {
        let cfg = Self {
            block_size,
            sink_blocks,
            local_blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sink block plus two local blocks.
    pub fn sink_and_two_local(block_size: usize) -> Result<Self, MaskError> {
        Self::new(block_size, 1, 2)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if self.block_size == 0 {
            return Err(MaskError::ZeroBlockSize);
        }
        if self.sink_blocks > 1 {
            log::warn!(
                "sink_blocks = {} has not been validated; only 0 or 1 sink block is studied",
                self.sink_blocks
            );
        }
        Ok(())
    }
}

/// A mask choice as written in experiment configs: `"full"` or `{"b", "sink", "local"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskSpec {
    Full,
    Block(BlockMaskConfig),
}

impl MaskSpec {
    pub fn block(&self) -> Option<&BlockMaskConfig> {
        match self {
            MaskSpec::Full => None,
            MaskSpec::Block(cfg) => Some(cfg),
        }
    }

    /// Block mask for `k` demonstrations; `Full` is a single block holding everything.
    pub fn example_mask(&self, k: usize) -> Result<ExampleBlockMask, MaskError> {
        match self {
            MaskSpec::Full => example_block_mask(k, &BlockMaskConfig::new(k.max(1), 0, 0)?),
            MaskSpec::Block(cfg) => example_block_mask(k, cfg),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Full => write!(f, "full"),
            MaskSpec::Block(c) => write!(f, "b{}-s{}-w{}", c.block_size, c.sink_blocks, c.local_blocks),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskSpecRepr {
    Name(String),
    Block(BlockMaskConfig),
}

impl Serialize for MaskSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MaskSpec::Full => MaskSpecRepr::Name("full".into()).serialize(s),
            MaskSpec::Block(cfg) => MaskSpecRepr::Block(*cfg).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match MaskSpecRepr::deserialize(d)? {
            MaskSpecRepr::Name(n) if n == "full" => Ok(MaskSpec::Full),
            MaskSpecRepr::Name(n) => Err(serde::de::Error::custom(format!(
                "unknown mask name {n:?}; expected \"full\" or {{\"b\", \"sink\", \"local\"}}"
            ))),
            MaskSpecRepr::Block(cfg) => {
                cfg.validate().map_err(serde::de::Error::custom)?;
                Ok(MaskSpec::Block(cfg))
            }
        }
    }
}

/// Block-level pattern over `ceil(k / b)` blocks, remembering how examples map to blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleBlockMask {
    pub block_size: usize,
    pub num_examples: usize,
    pub allowed: BoolMatrix,
}

impl ExampleBlockMask {
    pub fn num_blocks(&self) -> usize {
        self.allowed.rows()
    }

    pub fn block_of(&self, example: usize) -> usize {
        example / self.block_size
    }

    /// Whether example `i` may attend to example `j` (with `j <= i`).
    pub fn example_allows(&self, i: usize, j: usize) -> bool {
        j <= i && self.allowed.get(self.block_of(i), self.block_of(j))
    }
}

/// Builds the block pattern: block `i` sees block `j` iff `j == i`, or
/// `i - 1 - w < j < i`, or `j < s` (never a later block). The last block is
/// ragged when `b` does not divide `k`.
pub fn example_block_mask(k: usize, cfg: &BlockMaskConfig) -> Result<ExampleBlockMask, MaskError> {
    if k == 0 {
        return Err(MaskError::NoExamples);
    }
    cfg.validate()?;
    let b = cfg.block_size;
    let n = k.div_ceil(b);
    let mut allowed = BoolMatrix::filled(n, n, false);
    for i in 0..n {
        for j in 0..=i {
            let local = j + cfg.local_blocks >= i;
            let sink = j < cfg.sink_blocks;
            if local || sink {
                allowed.set(i, j, true);
            }
        }
    }
    Ok(ExampleBlockMask {
        block_size: b,
        num_examples: k,
        allowed,
    })
}

/// Number of earlier demonstrations the last demonstration of a late block can
/// reach: `s*b + w*b + (b - 1)`.
pub fn max_attendable(cfg: &BlockMaskConfig) -> usize {
    let b = cfg.block_size;
    cfg.sink_blocks * b + cfg.local_blocks * b + b.saturating_sub(1)
}

/// Token ranges of each demonstration plus the trailing test scaffold.
///
/// Tokens before the first demonstration (a shared preamble) are treated as
/// part of the sink block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleSpans {
    pub spans: Vec<Range<usize>>,
    pub test_span: Range<usize>,
}

impl ExampleSpans {
    pub fn new(spans: Vec<Range<usize>>, test_span: Range<usize>) -> Result<Self, MaskError> {
        let s = Self { spans, test_span };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let mut expected = self.spans.first().map_or(self.test_span.start, |s| s.start);
        for (index, s) in self.spans.iter().enumerate() {
            if s.start >= s.end {
                return Err(MaskError::BadSpan {
                    index,
                    start: s.start,
                    end: s.end,
                });
            }
            if s.start != expected {
                return Err(MaskError::NonContiguous {
                    index,
                    start: s.start,
                    end: s.end,
                    expected,
                });
            }
            expected = s.end;
        }
        if self.test_span.start != expected || self.test_span.end < self.test_span.start {
            return Err(MaskError::TestSpanMisplaced {
                start: self.test_span.start,
                expected,
            });
        }
        Ok(())
    }

    /// Total number of tokens covered, including any preamble.
    pub fn total_len(&self) -> usize {
        self.test_span.end
    }

    pub fn demo_end(&self) -> usize {
        self.test_span.start
    }

    /// Demonstration index owning `pos`, with preamble tokens mapped to 0.
    /// `None` for test-scaffold tokens.
    fn owner(&self, pos: usize) -> Option<usize> {
        if pos >= self.test_span.start {
            return None;
        }
        let idx = self.spans.partition_point(|s| s.end <= pos);
        Some(idx.min(self.spans.len().saturating_sub(1)))
    }
}

/// Token-level mask; `allows(i, j)` means position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask(BoolMatrix);

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let mut m = BoolMatrix::filled(n, n, false);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        Self(m)
    }

    /// Wraps an arbitrary boolean matrix, enforcing squareness, causality and a true diagonal.
    pub fn from_matrix(m: BoolMatrix) -> Option<Self> {
        let n = m.rows();
        if m.cols() != n {
            return None;
        }
        for i in 0..n {
            if !m.get(i, i) || (i + 1..n).any(|j| m.get(i, j)) {
                return None;
            }
        }
        Some(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j)
    }

    /// Row `i` truncated to the causal prefix `0..=i`.
    pub fn causal_row(&self, i: usize) -> &[bool] {
        &self.0.row(i)[..=i]
    }

    pub fn as_matrix(&self) -> &BoolMatrix {
        &self.0
    }
}

/// Expands a block pattern over token spans.
pub fn token_mask_from_spans(
    block_mask: &ExampleBlockMask,
    spans: &ExampleSpans,
) -> Result<AttentionMask, MaskError> {
    spans.validate()?;
    if spans.spans.len() != block_mask.num_examples {
        return Err(MaskError::ExampleCount {
            mask: block_mask.num_examples,
            spans: spans.spans.len(),
        });
    }
    let n = spans.total_len();
    let owners: Vec<Option<usize>> = (0..n).map(|p| spans.owner(p)).collect();
    let mut m = BoolMatrix::filled(n, n, false);
    for i in 0..n {
        match owners[i] {
            None => {
                for j in 0..=i {
                    m.set(i, j, true);
                }
            }
            Some(p) => {
                for j in 0..=i {
                    if let Some(q) = owners[j] {
                        if block_mask.example_allows(p, q) {
                            m.set(i, j, true);
                        }
                    }
                }
            }
        }
    }
    Ok(AttentionMask(m))
}
