//! A small attention-only decoder whose weights are written down analytically.
//!
//! The constructed model is a generalized induction circuit. Layer 1 has three
//! heads that copy token codes into dedicated residual channels: the previous
//! token, the token two back, and a recency-weighted bag of the preceding
//! content tokens. Layer 2 has one match head. Its query is the current token,
//! the previous token and the bag; its key at position `j` is the token before
//! `j`, the token two before `j` and the bag preceding `j`. Its value is the
//! token at `j`. A position following `x` therefore retrieves whatever followed
//! `x` earlier, preferring earlier occurrences whose bigram and surrounding
//! content also match. The unembedding reads the retrieved token code minus the
//! current token code, so a lone token (nothing to retrieve) yields all-zero,
//! uniform logits.
//!
//! Position enters only through per-head offset biases; there are no
//! positional embeddings and no normalization layers.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::masks::AttentionMask;
use crate::prompting::TokenId;
use crate::tensor::{masked_softmax_into, matmul_with, sparse_view, Matrix, SparseRows, TensorError};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ICLLABW\0";
pub const WEIGHTS_VERSION: u32 = 1;

/// Number of token-code channels in the constructed residual stream
/// (token, previous, two-back, bag, retrieved), plus one constant bias slot.
pub const CODE_CHANNELS: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("d_model {d_model} too small: need at least {required} for vocabulary {vocab}")]
    DModelTooSmall {
        d_model: usize,
        vocab: usize,
        required: usize,
    },
    #[error("vocabulary must not be empty")]
    EmptyVocab,
    #[error("token sequence is empty")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("mask covers {mask} positions but the sequence has {tokens}")]
    MaskShape { mask: usize, tokens: usize },
    #[error("allowed row has length {got}, expected {expected}")]
    RowLength { got: usize, expected: usize },
    #[error("allowed row must permit the current position")]
    SelfNotAllowed,
    #[error("{0}")]
    Shape(String),
    #[error("weights format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Additive score term depending only on the offset `i - j >= 0`:
/// `-slope * |offset - target| + self_bias * [offset == 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionBias {
    pub target_offset: f64,
    pub slope: f64,
    pub self_bias: f64,
}

impl PositionBias {
    pub const NONE: PositionBias = PositionBias {
        target_offset: 0.0,
        slope: 0.0,
        self_bias: 0.0,
    };

    #[inline]
    pub fn at(&self, offset: usize) -> f64 {
        let d = offset as f64 - self.target_offset;
        let mut b = -self.slope * d.abs();
        if offset == 0 {
            b += self.self_bias;
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub position_bias: PositionBias,
}

impl Head {
    fn check(&self, d_model: usize, name: &str) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::Shape(format!("{name}: {what}")));
        if self.wq.rows() != d_model || self.wk.rows() != d_model || self.wv.rows() != d_model {
            return bad("projection rows must equal d_model");
        }
        if self.wq.cols() != self.wk.cols() {
            return bad("query and key widths differ");
        }
        if self.wo.rows() != self.wv.cols() || self.wo.cols() != d_model {
            return bad("output projection shape");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub heads: Vec<Head>,
}

/// Nonzero views of every projection, built once so repeated one-row
/// products do not rescan the dense weights.
#[derive(Debug, Clone)]
struct Packed {
    heads: Vec<Vec<[Option<SparseRows>; 4]>>,
    unembedding: Option<SparseRows>,
}

impl Packed {
    fn new(layers: &[Layer], unembedding: &Matrix) -> Self {
        Self {
            heads: layers
                .iter()
                .map(|l| {
                    l.heads
                        .iter()
                        .map(|h| [sparse_view(&h.wq), sparse_view(&h.wk), sparse_view(&h.wv), sparse_view(&h.wo)])
                        .collect()
                })
                .collect(),
            unembedding: sparse_view(unembedding),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    vocab_size: usize,
    d_model: usize,
    embedding: Matrix,
    layers: Vec<Layer>,
    unembedding: Matrix,
    packed: Packed,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.embedding == other.embedding
            && self.layers == other.layers
            && self.unembedding == other.unembedding
    }
}

impl ModelWeights {
    /// `embedding` is `vocab_size x d_model`, `unembedding` is `d_model x vocab_size`.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        embedding: Matrix,
        layers: Vec<Layer>,
        unembedding: Matrix,
    ) -> Result<Self, ModelError> {
        let packed = Packed::new(&layers, &unembedding);
        let w = Self {
            vocab_size,
            d_model,
            embedding,
            layers,
            unembedding,
            packed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.embedding.shape() != (self.vocab_size, self.d_model) {
            return Err(ModelError::Shape("embedding".into()));
        }
        if self.unembedding.shape() != (self.d_model, self.vocab_size) {
            return Err(ModelError::Shape("unembedding".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                head.check(self.d_model, &format!("layer{l}.head{h}"))?;
            }
        }
        Ok(())
    }

    fn check_token(&self, id: TokenId) -> Result<(), ModelError> {
        if (id as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            })
        }
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
        let mut x = Matrix::zeros(tokens.len(), self.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            self.check_token(t)?;
            x.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(x)
    }
}

/// Tunable constants of the constructed circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct InductionParams {
    /// Per-token decay of the bag head.
    pub recency: f64,
    /// Offset-bias slope of the previous / two-back heads; also used to
    /// exclude the current position from the bag.
    pub offset_sharpness: f64,
    /// Weight of "my token equals the token before j".
    pub match_gain: f64,
    /// Weight of "my previous token equals the token two before j".
    pub bigram_gain: f64,
    /// Weight of bag-of-context similarity.
    pub bag_gain: f64,
    /// Key penalty that hides formatting tokens from the bag head.
    pub ignore_penalty: f64,
    pub logit_scale: f64,
    /// Token ids the bag head should not count (template words, separators).
    pub bag_ignore: Vec<TokenId>,
}

impl Default for InductionParams {
    fn default() -> Self {
        Self {
            recency: 0.09,
            offset_sharpness: 50.0,
            match_gain: 1000.0,
            bigram_gain: 500.0,
            bag_gain: 40.0,
            ignore_penalty: 50.0,
            logit_scale: 10.0,
            bag_ignore: Vec::new(),
        }
    }
}

/// Smallest residual width that fits the construction.
pub fn required_d_model(vocab_size: usize) -> usize {
    CODE_CHANNELS * vocab_size + 1
}

pub fn build_induction_model(vocab_size: usize, d_model: usize) -> Result<ModelWeights, ModelError> {
    build_induction_model_with(vocab_size, d_model, &InductionParams::default())
}

pub fn build_induction_model_with(
    vocab_size: usize,
    d_model: usize,
    p: &InductionParams,
) -> Result<ModelWeights, ModelError> {
    if vocab_size == 0 {
        return Err(ModelError::EmptyVocab);
    }
    let required = required_d_model(vocab_size);
    if d_model < required {
        return Err(ModelError::DModelTooSmall {
            d_model,
            vocab: vocab_size,
            required,
        });
    }
    for &t in &p.bag_ignore {
        if t as usize >= vocab_size {
            return Err(ModelError::TokenOutOfRange { id: t, vocab: vocab_size });
        }
    }
    let v = vocab_size;
    let (tok, prev, prev2, bag, out) = (0, v, 2 * v, 3 * v, 4 * v);
    let bias_slot = 5 * v;

    // channel block copy: rows [from..from+v) of a d_model-row matrix to cols [to..to+v)
    let copy = |m: &mut Matrix, from: usize, to: usize, scale: f64| {
        for t in 0..v {
            let cur = m.get(from + t, to + t);
            m.set(from + t, to + t, cur + scale);
        }
    };

    let mut embedding = Matrix::zeros(v, d_model);
    for t in 0..v {
        embedding.set(t, tok + t, 1.0);
        embedding.set(t, bias_slot, 1.0);
    }

    let reader = |scale: f64| {
        let mut wv = Matrix::zeros(d_model, v);
        copy(&mut wv, tok, 0, scale);
        wv
    };
    let writer = |channel: usize| {
        let mut wo = Matrix::zeros(v, d_model);
        for t in 0..v {
            wo.set(t, channel + t, 1.0);
        }
        wo
    };
    let positional = |target: f64, slope: f64, self_bias: f64| PositionBias {
        target_offset: target,
        slope,
        self_bias,
    };

    let previous = Head {
        wq: Matrix::zeros(d_model, 0),
        wk: Matrix::zeros(d_model, 0),
        wv: reader(1.0),
        wo: writer(prev),
        position_bias: positional(1.0, p.offset_sharpness, 0.0),
    };
    let two_back = Head {
        wq: Matrix::zeros(d_model, 0),
        wk: Matrix::zeros(d_model, 0),
        wv: reader(1.0),
        wo: writer(prev2),
        position_bias: positional(2.0, p.offset_sharpness, 0.0),
    };
    let mut bag_q = Matrix::zeros(d_model, 1);
    bag_q.set(bias_slot, 0, 1.0);
    let mut bag_k = Matrix::zeros(d_model, 1);
    for &t in &p.bag_ignore {
        bag_k.set(tok + t as usize, 0, -p.ignore_penalty);
    }
    let context = Head {
        wq: bag_q,
        wk: bag_k,
        wv: reader(1.0),
        wo: writer(bag),
        position_bias: positional(1.0, p.recency, -p.offset_sharpness),
    };

    // match head: query/key width 3v = [induction | bigram | bag]
    let mut wq = Matrix::zeros(d_model, 3 * v);
    let mut wk = Matrix::zeros(d_model, 3 * v);
    copy(&mut wq, tok, 0, p.match_gain);
    copy(&mut wk, prev, 0, 1.0);
    copy(&mut wk, tok, 0, -1.0);
    copy(&mut wq, prev, v, p.bigram_gain);
    copy(&mut wk, prev2, v, 1.0);
    copy(&mut wq, bag, 2 * v, p.bag_gain);
    copy(&mut wk, bag, 2 * v, 1.0);
    // the current token joins the query's bag at the weight it would have
    // one step later, unless it is ignored
    let own = p.bag_gain * (p.recency.exp() - 1.0);
    for t in 0..v {
        if !p.bag_ignore.contains(&(t as TokenId)) {
            wq.set(tok + t, 2 * v + t, own);
        }
    }
    let matcher = Head {
        wq,
        wk,
        wv: reader(1.0),
        wo: writer(out),
        position_bias: PositionBias::NONE,
    };

    let mut unembedding = Matrix::zeros(d_model, v);
    for t in 0..v {
        unembedding.set(out + t, t, p.logit_scale);
        unembedding.set(tok + t, t, -p.logit_scale);
    }

    ModelWeights::new(
        v,
        d_model,
        embedding,
        vec![
            Layer {
                heads: vec![previous, two_back, context],
            },
            Layer { heads: vec![matcher] },
        ],
        unembedding,
    )
}

#[derive(Debug, Clone, Default)]
struct KvRows {
    keys: SparseRows,
    values: SparseRows,
}

impl KvRows {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn append(&mut self, other: &KvRows) {
        for r in 0..other.len() {
            self.keys.push_sparse_row(other.keys.row(r));
            self.values.push_sparse_row(other.values.row(r));
        }
    }
}

#[derive(Debug, Clone, Default)]
struct HeadCache {
    shared: Arc<KvRows>,
    local: KvRows,
}

impl HeadCache {
    fn len(&self) -> usize {
        self.shared.len() + self.local.len()
    }

    fn push(&mut self, key: &[f64], value: &[f64]) {
        self.local.keys.push_row(key);
        self.local.values.push_row(value);
    }

    #[inline]
    fn key(&self, j: usize) -> &[(usize, f64)] {
        let s = self.shared.len();
        if j < s {
            self.shared.keys.row(j)
        } else {
            self.local.keys.row(j - s)
        }
    }

    #[inline]
    fn value(&self, j: usize) -> &[(usize, f64)] {
        let s = self.shared.len();
        if j < s {
            self.shared.values.row(j)
        } else {
            self.local.values.row(j - s)
        }
    }

    fn freeze(&mut self) {
        if self.local.len() == 0 {
            return;
        }
        let local = std::mem::take(&mut self.local);
        if self.shared.len() == 0 {
            self.shared = Arc::new(local);
        } else {
            let mut merged = (*self.shared).clone();
            merged.append(&local);
            self.shared = Arc::new(merged);
        }
    }
}

/// Per-layer, per-head key/value rows for every consumed position.
///
/// Cloning is cheap after [`KVCache::freeze`]: frozen rows are shared and
/// each clone appends into its own tail.
#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<Vec<HeadCache>>,
    len: usize,
}

impl KVCache {
    pub fn new(w: &ModelWeights) -> Self {
        Self {
            layers: w
                .layers
                .iter()
                .map(|l| vec![HeadCache::default(); l.heads.len()])
                .collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Moves the rows appended so far into shared storage.
    pub fn freeze(&mut self) {
        for layer in &mut self.layers {
            for h in layer {
                h.freeze();
            }
        }
    }

    fn consistent(&self) -> bool {
        self.layers.iter().flatten().all(|h| h.len() == self.len)
    }
}

/// Attention output for the query at position `pos`, over cached rows `0..=pos`.
fn attend(
    cache: &HeadCache,
    bias: &PositionBias,
    query: &[f64],
    pos: usize,
    allowed: &[bool],
    scratch: &mut Vec<f64>,
    weights: &mut Vec<f64>,
    out: &mut [f64],
) {
    let n = pos + 1;
    scratch.clear();
    scratch.resize(n, f64::NEG_INFINITY);
    weights.clear();
    weights.resize(n, 0.0);
    let has_query = query.iter().any(|q| *q != 0.0);
    for j in 0..n {
        if !allowed[j] {
            continue;
        }
        let mut s = bias.at(pos - j);
        if has_query {
            for &(c, k) in cache.key(j) {
                s += query[c] * k;
            }
        }
        scratch[j] = s;
    }
    masked_softmax_into(scratch, allowed, weights);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &a) in weights.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for &(c, v) in cache.value(j) {
            out[c] += a * v;
        }
    }
}

/// Runs every position through the model under `mask`, returning the cache
/// holding all positions and the logits (`positions x vocab`).
pub fn prefill(
    w: &ModelWeights,
    tokens: &[TokenId],
    mask: &AttentionMask,
) -> Result<(KVCache, Matrix), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if mask.len() != tokens.len() {
        return Err(ModelError::MaskShape {
            mask: mask.len(),
            tokens: tokens.len(),
        });
    }
    let n = tokens.len();
    let mut x = w.embed(tokens)?;
    let mut cache = KVCache::new(w);
    let (mut scratch, mut weights) = (Vec::new(), Vec::new());
    for ((layer, packed), layer_cache) in w.layers.iter().zip(&w.packed.heads).zip(&mut cache.layers) {
        let mut delta = Matrix::zeros(n, w.d_model);
        for ((head, [pq, pk, pv, po]), hc) in layer.heads.iter().zip(packed).zip(layer_cache.iter_mut()) {
            let q = matmul_with(&x, &head.wq, pq.as_ref())?;
            let k = matmul_with(&x, &head.wk, pk.as_ref())?;
            let v = matmul_with(&x, &head.wv, pv.as_ref())?;
            for i in 0..n {
                hc.push(k.row(i), v.row(i));
            }
            let mut o = Matrix::zeros(n, head.wv.cols());
            for i in 0..n {
                attend(
                    hc,
                    &head.position_bias,
                    q.row(i),
                    i,
                    mask.causal_row(i),
                    &mut scratch,
                    &mut weights,
                    o.row_mut(i),
                );
            }
            delta.add_assign(&matmul_with(&o, &head.wo, po.as_ref())?)?;
        }
        x.add_assign(&delta)?;
    }
    cache.len = n;
    let logits = matmul_with(&x, &w.unembedding, w.packed.unembedding.as_ref())?;
    Ok((cache, logits))
}

/// Full forward pass: logits for every position under `mask`.
pub fn forward_full(w: &ModelWeights, tokens: &[TokenId], mask: &AttentionMask) -> Result<Matrix, ModelError> {
    prefill(w, tokens, mask).map(|(_, logits)| logits)
}

/// Consumes one token at position `cache.len()`, attending to the positions
/// flagged in `allowed_row` (length `cache.len() + 1`, last entry true).
pub fn decode_step(
    w: &ModelWeights,
    cache: &mut KVCache,
    token: TokenId,
    allowed_row: &[bool],
) -> Result<Vec<f64>, ModelError> {
    let pos = cache.len;
    if allowed_row.len() != pos + 1 {
        return Err(ModelError::RowLength {
            got: allowed_row.len(),
            expected: pos + 1,
        });
    }
    if !allowed_row[pos] {
        return Err(ModelError::SelfNotAllowed);
    }
    debug_assert!(cache.consistent());
    let mut x = w.embed(&[token])?;
    let (mut scratch, mut weights) = (Vec::new(), Vec::new());
    for ((layer, packed), layer_cache) in w.layers.iter().zip(&w.packed.heads).zip(&mut cache.layers) {
        let mut delta = Matrix::zeros(1, w.d_model);
        for ((head, [pq, pk, pv, po]), hc) in layer.heads.iter().zip(packed).zip(layer_cache.iter_mut()) {
            let q = matmul_with(&x, &head.wq, pq.as_ref())?;
            let k = matmul_with(&x, &head.wk, pk.as_ref())?;
            let v = matmul_with(&x, &head.wv, pv.as_ref())?;
            hc.push(k.row(0), v.row(0));
            let mut o = Matrix::zeros(1, head.wv.cols());
            attend(
                hc,
                &head.position_bias,
                q.row(0),
                pos,
                allowed_row,
                &mut scratch,
                &mut weights,
                o.row_mut(0),
            );
            delta.add_assign(&matmul_with(&o, &head.wo, po.as_ref())?)?;
        }
        x.add_assign(&delta)?;
    }
    cache.len += 1;
    Ok(matmul_with(&x, &w.unembedding, w.packed.unembedding.as_ref())?.into_data())
}

/// [`decode_step`] attending to every cached position.
pub fn decode_step_open(w: &ModelWeights, cache: &mut KVCache, token: TokenId) -> Result<Vec<f64>, ModelError> {
    let row = vec![true; cache.len() + 1];
    decode_step(w, cache, token, &row)
}

fn tensor_names(w: &ModelWeights) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for (l, layer) in w.layers.iter().enumerate() {
        for h in 0..layer.heads.len() {
            for part in ["wq", "wk", "wv", "wo", "position_bias"] {
                names.push(format!("layer{l}.head{h}.{part}"));
            }
        }
    }
    names.push("unembedding".into());
    names
}

/// Serializes weights: magic, version, vocab_size, d_model, layer count and
/// per-layer head counts (all little-endian u32), then each tensor as
/// `rows u32, cols u32, rows*cols f64`.
pub fn encode_weights(w: &ModelWeights) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    for v in [WEIGHTS_VERSION, w.vocab_size as u32, w.d_model as u32, w.layers.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &w.layers {
        buf.extend_from_slice(&(layer.heads.len() as u32).to_le_bytes());
    }
    let mut put = |m: &Matrix| {
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&w.embedding);
    for layer in &w.layers {
        for h in &layer.heads {
            put(&h.wq);
            put(&h.wk);
            put(&h.wv);
            put(&h.wo);
            let b = h.position_bias;
            put(&Matrix::from_rows(&[vec![b.target_offset, b.slope, b.self_bias]]));
        }
    }
    put(&w.unembedding);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix, ModelError> {
        let rows = self.u32(name)? as usize;
        let cols = self.u32(name)? as usize;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| ModelError::Format(format!("tensor {name} has an absurd shape")))?;
        let bytes = self.take(count, &format!("tensor {name}"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Matrix::from_vec(rows, cols, data)?)
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ModelWeights, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != WEIGHTS_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let vocab_size = r.u32("vocab_size")? as usize;
    let d_model = r.u32("d_model")? as usize;
    let n_layers = r.u32("layer count")? as usize;
    let head_counts = (0..n_layers)
        .map(|l| r.u32(&format!("head count of layer {l}")).map(|h| h as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let embedding = r.matrix("embedding")?;
    let mut layers = Vec::with_capacity(n_layers);
    for (l, &n_heads) in head_counts.iter().enumerate() {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let name = |p: &str| format!("layer{l}.head{h}.{p}");
            let wq = r.matrix(&name("wq"))?;
            let wk = r.matrix(&name("wk"))?;
            let wv = r.matrix(&name("wv"))?;
            let wo = r.matrix(&name("wo"))?;
            let pb = r.matrix(&name("position_bias"))?;
            if pb.shape() != (1, 3) {
                return Err(ModelError::Format(format!("tensor {} must be 1x3", name("position_bias"))));
            }
            heads.push(Head {
                wq,
                wk,
                wv,
                wo,
                position_bias: PositionBias {
                    target_offset: pb.get(0, 0),
                    slope: pb.get(0, 1),
                    self_bias: pb.get(0, 2),
                },
            });
        }
        layers.push(Layer { heads });
    }
    let unembedding = r.matrix("unembedding")?;
    if r.pos != buf.len() {
        return Err(ModelError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    ModelWeights::new(vocab_size, d_model, embedding, layers, unembedding)
        .map_err(|e| ModelError::Format(format!("inconsistent tensors: {e}")))
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_weights(w))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, ModelError> {
    decode_weights(&fs::read(path)?)
}

/// Tensor names in file order; useful when reporting format errors.
pub fn weight_tensor_names(w: &ModelWeights) -> Vec<String> {
    tensor_names(w)
}
