//! Greedy label decoding, optionally restricted to a label trie by boosting
//! the logits of every token that can extend a valid label.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{decode_step_open, KVCache, ModelError, ModelWeights};
use crate::prompting::{PromptError, TokenId, Vocab};

pub const DEFAULT_BOOST: f64 = 1e4;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("label set is empty")]
    EmptyTrie,
    #[error("label {0:?} has no tokens")]
    EmptyLabel(String),
    #[error("labels {0:?} and {1:?} tokenize identically")]
    Ambiguous(String, String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("boost {boost} does not dominate the logit range")]
    BoostTooSmall { boost: f64 },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
}

/// Anything that yields next-token logits and accepts the chosen token.
pub trait LogitSource {
    fn logits(&self) -> &[f64];
    fn feed(&mut self, token: TokenId) -> Result<(), DecodeError>;
}

/// Decodes from a model whose cache already holds the prompt.
pub struct ModelSource<'a> {
    weights: &'a ModelWeights,
    cache: KVCache,
    logits: Vec<f64>,
}

impl<'a> ModelSource<'a> {
    /// `logits` are the model's outputs at the last prompt position.
    pub fn new(weights: &'a ModelWeights, cache: KVCache, logits: Vec<f64>) -> Self {
        Self { weights, cache, logits }
    }
}

impl LogitSource for ModelSource<'_> {
    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn feed(&mut self, token: TokenId) -> Result<(), DecodeError> {
        self.logits = decode_step_open(self.weights, &mut self.cache, token)?;
        Ok(())
    }
}

/// Independent uniform logits in `[-scale, scale)` at every step.
pub struct RandomLogits {
    rng: ChaCha8Rng,
    scale: f64,
    current: Vec<f64>,
}

impl RandomLogits {
    pub fn new(vocab_size: usize, scale: f64, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale,
            current: vec![0.0; vocab_size],
        };
        s.refresh();
        s
    }

    fn refresh(&mut self) {
        for v in &mut self.current {
            *v = self.rng.gen_range(-self.scale..self.scale);
        }
    }
}

impl LogitSource for RandomLogits {
    fn logits(&self) -> &[f64] {
        &self.current
    }

    fn feed(&mut self, _token: TokenId) -> Result<(), DecodeError> {
        self.refresh();
        Ok(())
    }
}

/// Replays a fixed table of logits, one row per step.
pub struct ScriptedLogits {
    steps: Vec<Vec<f64>>,
    at: usize,
}

impl ScriptedLogits {
    pub fn new(steps: Vec<Vec<f64>>) -> Self {
        Self { steps, at: 0 }
    }
}

impl LogitSource for ScriptedLogits {
    fn logits(&self) -> &[f64] {
        &self.steps[self.at.min(self.steps.len() - 1)]
    }

    fn feed(&mut self, _token: TokenId) -> Result<(), DecodeError> {
        self.at += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    label: Option<usize>,
}

/// Prefix tree over tokenized labels.
#[derive(Debug, Clone)]
pub struct LabelTrie {
    nodes: Vec<Node>,
    labels: Vec<String>,
}

impl LabelTrie {
    pub fn from_token_labels(labels: &[(String, Vec<TokenId>)]) -> Result<Self, DecodeError> {
        if labels.is_empty() {
            return Err(DecodeError::EmptyTrie);
        }
        let mut trie = Self {
            nodes: vec![Node::default()],
            labels: Vec::new(),
        };
        for (name, tokens) in labels {
            if tokens.is_empty() {
                return Err(DecodeError::EmptyLabel(name.clone()));
            }
            let mut at = 0;
            for &t in tokens {
                at = match trie.nodes[at].children.get(&t) {
                    Some(&c) => c,
                    None => {
                        trie.nodes.push(Node::default());
                        let c = trie.nodes.len() - 1;
                        trie.nodes[at].children.insert(t, c);
                        c
                    }
                };
            }
            if let Some(prev) = trie.nodes[at].label {
                return Err(DecodeError::Ambiguous(trie.labels[prev].clone(), name.clone()));
            }
            trie.nodes[at].label = Some(trie.labels.len());
            trie.labels.push(name.clone());
        }
        Ok(trie)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn complete_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.label.is_some()).count()
    }

    pub fn root_children(&self) -> usize {
        self.nodes[0].children.len()
    }

    /// Depths (token counts) of all complete nodes, in label order.
    pub fn label_depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.nodes.len()];
        let mut out = vec![0; self.labels.len()];
        // children always have larger indices than their parent
        for i in 0..self.nodes.len() {
            for &c in self.nodes[i].children.values() {
                depth[c] = depth[i] + 1;
            }
            if let Some(l) = self.nodes[i].label {
                out[l] = depth[i];
            }
        }
        out
    }

    /// The label spelled exactly by `tokens`, if any.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<&str> {
        let mut at = 0;
        for t in tokens {
            at = *self.nodes[at].children.get(t)?;
        }
        self.nodes[at].label.map(|l| self.labels[l].as_str())
    }
}

pub fn build_trie(labels: &[String], vocab: &Vocab) -> Result<LabelTrie, DecodeError> {
    let tokenized = labels
        .iter()
        .map(|l| Ok((l.clone(), vocab.encode(l)?)))
        .collect::<Result<Vec<_>, DecodeError>>()?;
    LabelTrie::from_token_labels(&tokenized)
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding with `boost` added to every token that extends the
/// current trie path, and to `end_token` (which then acts as end-of-label)
/// when the path already spells a label.
///
/// Adding the same constant preserves the order among boosted tokens, so the
/// winner is picked on raw logits (ties to the smallest id); the boost only
/// has to lift that winner above every unboosted token.
pub fn constrained_greedy(
    source: &mut dyn LogitSource,
    trie: &LabelTrie,
    boost: f64,
    end_token: TokenId,
) -> Result<String, DecodeError> {
    let mut at = 0;
    loop {
        let node = &trie.nodes[at];
        if node.children.is_empty() {
            let l = node.label.expect("leaf nodes always carry a label");
            return Ok(trie.labels[l].clone());
        }
        let logits = source.logits();
        let mut legal: Vec<TokenId> = node.children.keys().copied().collect();
        if node.label.is_some() {
            legal.push(end_token);
        }
        let mut best = legal[0];
        for &t in &legal[1..] {
            let (v, b) = (logits[t as usize], logits[best as usize]);
            if v > b || (v == b && t < best) {
                best = t;
            }
        }
        let rival = logits
            .iter()
            .enumerate()
            .filter(|(t, _)| !legal.contains(&(*t as TokenId)))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if logits[best as usize] + boost <= rival {
            return Err(DecodeError::BoostTooSmall { boost });
        }
        if node.label.is_some() && best == end_token && !node.children.contains_key(&end_token) {
            return Ok(trie.labels[node.label.unwrap()].clone());
        }
        at = node.children[&best];
        source.feed(best)?;
    }
}

/// Plain greedy decoding until `stop_token` wins or `max_len` tokens are out.
pub fn unconstrained_greedy(
    source: &mut dyn LogitSource,
    stop_token: TokenId,
    max_len: usize,
) -> Result<Vec<TokenId>, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let mut out = Vec::new();
    loop {
        let t = argmax(source.logits());
        if t == stop_token {
            break;
        }
        out.push(t);
        if out.len() == max_len {
            break;
        }
        source.feed(t)?;
    }
    Ok(out)
}

/// Maps decoded tokens to a label string, or to their plain text when they
/// spell no label.
pub fn decoded_text(tokens: &[TokenId], trie: &LabelTrie, vocab: &Vocab) -> Result<String, DecodeError> {
    match trie.lookup(tokens) {
        Some(l) => Ok(l.to_string()),
        None => Ok(vocab.detokenize(tokens)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::AttentionMask;
    use crate::model::{build_induction_model, prefill, required_d_model};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn trie(labels: &[(&str, &[TokenId])]) -> LabelTrie {
        let owned: Vec<(String, Vec<TokenId>)> = labels.iter().map(|(n, t)| (n.to_string(), t.to_vec())).collect();
        LabelTrie::from_token_labels(&owned).unwrap()
    }

    #[test]
    fn trie_shapes() {
        let t = trie(&[("location", &[1]), ("entity", &[2])]);
        assert_eq!(t.root_children(), 2);
        assert_eq!(t.complete_count(), 2);
        let t = trie(&[("location", &[1]), ("location city", &[1, 3])]);
        assert_eq!(t.label_depths(), vec![1, 2]);
        assert_eq!(t.node_count(), 3);
        let t = trie(&[("one", &[4, 5, 6])]);
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.complete_count(), 1);
    }

    #[test]
    fn trie_errors() {
        assert!(matches!(LabelTrie::from_token_labels(&[]), Err(DecodeError::EmptyTrie)));
        let dup = vec![("A".to_string(), vec![1]), ("a".to_string(), vec![1])];
        assert!(matches!(LabelTrie::from_token_labels(&dup), Err(DecodeError::Ambiguous(..))));
    }

    #[test]
    fn build_trie_from_vocab() {
        let mut v = Vocab::new();
        v.tokenize("location city entity").unwrap();
        let t = build_trie(&["location".into(), "Location City".into(), "entity".into()], &v).unwrap();
        assert_eq!(t.complete_count(), 3);
        assert_eq!(t.lookup(&[0, 1]), Some("Location City"));
        assert!(build_trie(&["unseen".into()], &v).is_err());
    }

    #[test]
    fn single_label_always_wins() {
        let t = trie(&[("entity", &[3])]);
        let mut s = ScriptedLogits::new(vec![vec![9.0, 8.0, 7.0, -5.0]]);
        assert_eq!(constrained_greedy(&mut s, &t, DEFAULT_BOOST, 0).unwrap(), "entity");
    }

    #[test]
    fn second_step_follows_raw_preference() {
        // tokens: a=0, b=1, c=2; newline=3
        let t = trie(&[("ab", &[0, 1]), ("ac", &[0, 2])]);
        let table = vec![vec![0.0, 5.0, 5.0, 9.0], vec![0.0, 1.0, 2.0, 9.0]];
        let mut s = ScriptedLogits::new(table);
        assert_eq!(constrained_greedy(&mut s, &t, DEFAULT_BOOST, 3).unwrap(), "ac");
    }

    #[test]
    fn end_of_label_arbitration() {
        // loc=0, city=1, newline=2
        let t = trie(&[("loc", &[0]), ("loc city", &[0, 1])]);
        let mut s = ScriptedLogits::new(vec![vec![4.0, 0.0, 0.0], vec![0.0, 1.0, 3.0]]);
        assert_eq!(constrained_greedy(&mut s, &t, DEFAULT_BOOST, 2).unwrap(), "loc");
        let mut s = ScriptedLogits::new(vec![vec![4.0, 0.0, 0.0], vec![0.0, 3.0, 1.0]]);
        assert_eq!(constrained_greedy(&mut s, &t, DEFAULT_BOOST, 2).unwrap(), "loc city");
    }

    #[test]
    fn weak_boost_reported() {
        let t = trie(&[("x", &[0])]);
        let mut s = ScriptedLogits::new(vec![vec![0.0, 100.0]]);
        assert!(matches!(
            constrained_greedy(&mut s, &t, 10.0, 1),
            Err(DecodeError::BoostTooSmall { .. })
        ));
    }

    #[test]
    fn unconstrained_cases() {
        let mut s = ScriptedLogits::new(vec![vec![0.0, 5.0, 1.0], vec![0.0, 0.0, 9.0]]);
        assert_eq!(unconstrained_greedy(&mut s, 2, 4).unwrap(), vec![1]);
        let mut s = ScriptedLogits::new(vec![vec![0.0, 5.0, 1.0]]);
        assert_eq!(unconstrained_greedy(&mut s, 2, 1).unwrap(), vec![1]);
        assert!(matches!(unconstrained_greedy(&mut s, 2, 0), Err(DecodeError::ZeroMaxLen)));
    }

    #[test]
    fn distractor_first_is_invalid() {
        let mut v = Vocab::new();
        v.tokenize("pos neg noise \n").unwrap();
        let t = build_trie(&["pos".into(), "neg".into()], &v).unwrap();
        let mut s = ScriptedLogits::new(vec![vec![1.0, 0.0, 3.0, 0.0], vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 5.0]]);
        let out = unconstrained_greedy(&mut s, v.newline().unwrap(), 8).unwrap();
        let text = decoded_text(&out, &t, &v).unwrap();
        assert_eq!(text, "noise pos");
        assert!(!t.labels().contains(&text));
    }

    #[test]
    fn model_emits_paired_label() {
        let mut v = Vocab::new();
        let toks = v.tokenize("q : red \n a : warm \n q : sky \n a : cool \n q : red \n a :").unwrap();
        let w = build_induction_model(v.len(), required_d_model(v.len())).unwrap();
        let (cache, logits) = prefill(&w, &toks, &AttentionMask::causal(toks.len())).unwrap();
        let last = logits.row(toks.len() - 1).to_vec();
        let t = build_trie(&["warm".into(), "cool".into()], &v).unwrap();
        let nl = v.newline().unwrap();
        let mut src = ModelSource::new(&w, cache.clone(), last.clone());
        let out = unconstrained_greedy(&mut src, nl, 4).unwrap();
        assert_eq!(decoded_text(&out, &t, &v).unwrap(), "warm");
        let mut src = ModelSource::new(&w, cache, last);
        assert_eq!(constrained_greedy(&mut src, &t, DEFAULT_BOOST, nl).unwrap(), "warm");
    }

    fn random_trie(seed: u64) -> LabelTrie {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let mut labels: Vec<(String, Vec<TokenId>)> = Vec::new();
        while labels.len() < n {
            let len = rng.gen_range(1..4);
            let toks: Vec<TokenId> = (0..len).map(|_| rng.gen_range(1..6)).collect();
            if labels.iter().all(|(_, t)| *t != toks) {
                labels.push((format!("l{}", labels.len()), toks));
            }
        }
        LabelTrie::from_token_labels(&labels).unwrap()
    }

    proptest! {
        #[test]
        fn constrained_output_is_a_label(seed in any::<u64>()) {
            let t = random_trie(seed);
            let mut s = RandomLogits::new(8, 10.0, seed ^ 7);
            let out = constrained_greedy(&mut s, &t, DEFAULT_BOOST, 0).unwrap();
            prop_assert!(t.labels().contains(&out));
        }

        #[test]
        fn boost_size_does_not_matter(seed in any::<u64>()) {
            let t = random_trie(seed);
            let a = constrained_greedy(&mut RandomLogits::new(8, 10.0, seed), &t, 1e4, 0).unwrap();
            let b = constrained_greedy(&mut RandomLogits::new(8, 10.0, seed), &t, 1e6, 0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn valid_unconstrained_output_is_kept(seed in any::<u64>(), pick in 0usize..8) {
            let t = random_trie(seed);
            let label = pick % t.labels().len();
            let mut toks: Vec<TokenId> = Vec::new();
            // recover the label's tokens by search over short sequences
            for a in 1..6u32 { for b in 0..6u32 { for c in 0..6u32 {
                for cand in [vec![a], vec![a, b], vec![a, b, c]] {
                    if toks.is_empty() && cand.iter().skip(1).all(|&x| x > 0)
                        && t.lookup(&cand) == Some(t.labels()[label].as_str()) {
                        toks = cand;
                    }
                }
            }}}
            // scripted stream that spells the label, then ends with token 0
            let mut steps: Vec<Vec<f64>> = toks.iter().map(|&x| {
                let mut row = vec![0.0; 8];
                row[x as usize] = 5.0;
                row
            }).collect();
            let mut end = vec![0.0; 8];
            end[0] = 5.0;
            steps.push(end);
            let free = unconstrained_greedy(&mut ScriptedLogits::new(steps.clone()), 0, 8).unwrap();
            prop_assert_eq!(&free, &toks);
            let forced = constrained_greedy(&mut ScriptedLogits::new(steps), &t, DEFAULT_BOOST, 0).unwrap();
            prop_assert_eq!(forced, t.labels()[label].clone());
        }
    }
}
