//! Prompt templates, the word-level tokenizer, and demonstration orderings.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Example;
use crate::masks::ExampleSpans;

pub type TokenId = u32;

/// Token emitted for every line break. Newlines are structural in the
/// templates (they end labels), so they survive tokenization as a token.
pub const NEWLINE: &str = "\n";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("token {0:?} is not in the frozen vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("unknown template preset {0:?}")]
    UnknownPreset(String),
    #[error("template {field} must not be empty")]
    EmptyTemplateField { field: &'static str },
}

/// Splits text into lowercase word tokens. Every ASCII punctuation character
/// is its own token, newlines become [`NEWLINE`], other whitespace separates.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for ch in text.chars() {
        if ch == '\n' {
            flush(&mut word, &mut out);
            out.push(NEWLINE.to_string());
        } else if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if ch.is_ascii_punctuation() {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Word-level vocabulary. Ids are assigned on first sight until [`Vocab::freeze`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, TokenId>,
    frozen: bool,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn newline(&self) -> Option<TokenId> {
        self.id(NEWLINE)
    }

    fn intern(&mut self, token: String) -> Result<TokenId, PromptError> {
        if let Some(id) = self.ids.get(&token) {
            return Ok(*id);
        }
        if self.frozen {
            return Err(PromptError::UnknownToken(token));
        }
        let id = self.tokens.len() as TokenId;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn tokenize(&mut self, text: &str) -> Result<Vec<TokenId>, PromptError> {
        split_tokens(text).into_iter().map(|t| self.intern(t)).collect()
    }

    /// Tokenizes against the vocabulary without adding anything.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, PromptError> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or(PromptError::UnknownToken(t)))
            .collect()
    }

    /// Joins tokens with single spaces; newline tokens are emitted bare.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, PromptError> {
        let mut out = String::new();
        let mut after_newline = true;
        for &id in ids {
            let tok = self.token(id).ok_or(PromptError::UnknownId(id))?;
            if tok == NEWLINE {
                out.push('\n');
                after_newline = true;
            } else {
                if !after_newline {
                    out.push(' ');
                }
                out.push_str(tok);
                after_newline = false;
            }
        }
        Ok(out)
    }

    /// Restores the id index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }
}

/// Prompt layout: `"{input_prefix} {input}\n{output_prefix} {label}\n{separator}\n"`
/// per demonstration, then `"{input_prefix} {test}\n{output_prefix}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub input_prefix: String,
    pub output_prefix: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    "==".to_string()
}

impl PromptTemplate {
    pub fn new(input_prefix: &str, output_prefix: &str, separator: &str) -> Result<Self, PromptError> {
        let t = Self {
            input_prefix: input_prefix.into(),
            output_prefix: output_prefix.into(),
            separator: separator.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.input_prefix.trim().is_empty() {
            return Err(PromptError::EmptyTemplateField { field: "input_prefix" });
        }
        if self.output_prefix.trim().is_empty() {
            return Err(PromptError::EmptyTemplateField { field: "output_prefix" });
        }
        Ok(())
    }

    /// Named layouts: `trec` (Question/Type), `intent` (utterance/intent),
    /// `banking` (query/intent) and `generic` (Input/Output).
    pub fn preset(name: &str) -> Result<Self, PromptError> {
        let (i, o) = match name {
            "trec" => ("Question:", "Type:"),
            "intent" => ("utterance:", "intent:"),
            "banking" => ("query:", "intent:"),
            "generic" => ("Input:", "Output:"),
            other => return Err(PromptError::UnknownPreset(other.to_string())),
        };
        Self::new(i, o, "==")
    }

    pub fn render_demo(&self, demo: &Example) -> String {
        format!(
            "{} {}\n{} {}\n{}\n",
            self.input_prefix, demo.input, self.output_prefix, demo.label, self.separator
        )
    }

    pub fn render_test(&self, input: &str) -> String {
        format!("{} {}\n{}", self.input_prefix, input, self.output_prefix)
    }

    /// Every token the template itself contributes, newline included.
    pub fn formatting_tokens(&self) -> Vec<String> {
        let mut toks = split_tokens(&self.input_prefix);
        toks.extend(split_tokens(&self.output_prefix));
        toks.extend(split_tokens(&self.separator));
        toks.push(NEWLINE.to_string());
        toks.sort();
        toks.dedup();
        toks
    }
}

/// Template reference in configs: a preset name or an inline template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateSpec {
    Preset(String),
    Custom(PromptTemplate),
}

impl TemplateSpec {
    pub fn resolve(&self) -> Result<PromptTemplate, PromptError> {
        match self {
            TemplateSpec::Preset(name) => PromptTemplate::preset(name),
            TemplateSpec::Custom(t) => {
                t.validate()?;
                Ok(t.clone())
            }
        }
    }
}

/// Rendered prompt text with token spans for each demonstration and the test scaffold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub spans: ExampleSpans,
}

pub fn render_prompt(demos: &[Example], test_input: &str, t: &PromptTemplate) -> RenderedPrompt {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(demos.len());
    let mut pos = 0;
    for d in demos {
        let piece = t.render_demo(d);
        let n = split_tokens(&piece).len();
        spans.push(pos..pos + n);
        pos += n;
        text.push_str(&piece);
    }
    let test = t.render_test(test_input);
    let test_span: Range<usize> = pos..pos + split_tokens(&test).len();
    text.push_str(&test);
    RenderedPrompt {
        text,
        spans: ExampleSpans { spans, test_span },
    }
}

/// Demonstration ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ordering {
    AsGiven,
    Shuffled(u64),
    LabelSorted,
}

impl Ordering {
    pub fn name(&self) -> String {
        match self {
            Ordering::AsGiven => "as_given".into(),
            Ordering::Shuffled(s) => format!("shuffled({s})"),
            Ordering::LabelSorted => "label_sorted".into(),
        }
    }
}

/// Applies an ordering. Label sorting groups equal labels lexicographically and
/// keeps the original relative order within a group.
pub fn order_examples(demos: &[Example], ordering: Ordering) -> Vec<Example> {
    let mut out = demos.to_vec();
    match ordering {
        Ordering::AsGiven => {}
        Ordering::Shuffled(seed) => out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        Ordering::LabelSorted => out.sort_by(|a, b| a.label.cmp(&b.label)),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(input: &str, label: &str) -> Example {
        Example::new(input, label).unwrap()
    }

    #[test]
    fn split_rules() {
        assert_eq!(split_tokens("How far?"), vec!["how", "far", "?"]);
        assert!(split_tokens("").is_empty());
        assert_eq!(split_tokens("Type: a\n=="), vec!["type", ":", "a", "\n", "=", "="]);
    }

    #[test]
    fn detokenize_normalizes_whitespace() {
        let mut v = Vocab::new();
        let ids = v.tokenize("how   far\tis  it").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "how far is it");
        let ids = v.tokenize("Type: x\nnext").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "type : x\nnext");
    }

    #[test]
    fn frozen_vocab_rejects_new_tokens() {
        let mut v = Vocab::new();
        v.tokenize("known words").unwrap();
        v.freeze();
        assert!(v.tokenize("known").is_ok());
        assert_eq!(v.tokenize("unknown"), Err(PromptError::UnknownToken("unknown".into())));
    }

    #[test]
    fn trec_layout() {
        let t = PromptTemplate::preset("trec").unwrap();
        let demo = ex("What cathedral was Thomas Becket murdered in ?", "location");
        let p = render_prompt(&[demo], "What are the rites ?", &t);
        assert_eq!(
            p.text,
            "Question: What cathedral was Thomas Becket murdered in ?\nType: location\n==\n\
             Question: What are the rites ?\nType:"
        );
    }

    #[test]
    fn empty_context_is_only_the_scaffold() {
        let t = PromptTemplate::preset("generic").unwrap();
        let p = render_prompt(&[], "hello", &t);
        assert_eq!(p.text, "Input: hello\nOutput:");
        assert!(p.spans.spans.is_empty());
        assert_eq!(p.spans.test_span, 0..split_tokens(&p.text).len());
    }

    #[test]
    fn span_slices_retokenize_to_their_demo() {
        let t = PromptTemplate::preset("intent").unwrap();
        let demos = vec![ex("oh it is nice one, olly.", "general praise"), ex("nope wrong.", "general negate")];
        let p = render_prompt(&demos, "play fishing podcasts", &t);
        let all = split_tokens(&p.text);
        for (d, span) in demos.iter().zip(&p.spans.spans) {
            assert_eq!(all[span.clone()].to_vec(), split_tokens(&t.render_demo(d)));
        }
        assert_eq!(all[p.spans.test_span.clone()].to_vec(), split_tokens(&t.render_test("play fishing podcasts")));
        assert_eq!(p.spans.total_len(), all.len());
    }

    #[test]
    fn custom_template_spec() {
        let spec: TemplateSpec =
            serde_json::from_str(r#"{"input_prefix": "Q:", "output_prefix": "A:"}"#).unwrap();
        assert_eq!(spec.resolve().unwrap().separator, "==");
        let spec: TemplateSpec = serde_json::from_str(r#""trec""#).unwrap();
        assert_eq!(spec.resolve().unwrap().input_prefix, "Question:");
        assert!(TemplateSpec::Preset("nope".into()).resolve().is_err());
        assert!(PromptTemplate::new("", "A:", "==").is_err());
    }

    #[test]
    fn label_sorted_groups() {
        let demos = vec![ex("x", "B"), ex("y", "A"), ex("z", "B")];
        let sorted = order_examples(&demos, Ordering::LabelSorted);
        let inputs: Vec<&str> = sorted.iter().map(|e| e.input.as_str()).collect();
        assert_eq!(inputs, vec!["y", "x", "z"]);
        assert_eq!(order_examples(&demos, Ordering::AsGiven), demos);
        assert_eq!(
            order_examples(&demos, Ordering::Shuffled(9)),
            order_examples(&demos, Ordering::Shuffled(9))
        );
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip(s in "[A-Za-z ,.?!\n\t]{0,40}") {
            let mut v = Vocab::new();
            let ids = v.tokenize(&s).unwrap();
            let text = v.detokenize(&ids).unwrap();
            prop_assert_eq!(v.tokenize(&text).unwrap(), ids);
        }

        #[test]
        fn orderings_are_permutations(labels in proptest::collection::vec(0u8..4, 0..20), seed in any::<u64>()) {
            let demos: Vec<Example> = labels.iter().enumerate()
                .map(|(i, l)| ex(&format!("in{i}"), &format!("l{l}"))).collect();
            for o in [Ordering::AsGiven, Ordering::Shuffled(seed), Ordering::LabelSorted] {
                let mut got: Vec<String> = order_examples(&demos, o).into_iter().map(|e| e.input).collect();
                let mut want: Vec<String> = demos.iter().map(|e| e.input.clone()).collect();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want);
            }
        }

        #[test]
        fn rendering_is_injective(a in proptest::collection::vec(("[a-z]{1,5}", "[a-z]{1,4}"), 0..4),
                                  b in proptest::collection::vec(("[a-z]{1,5}", "[a-z]{1,4}"), 0..4)) {
            let t = PromptTemplate::preset("trec").unwrap();
            let to = |v: &Vec<(String, String)>| v.iter().map(|(i, l)| ex(i, l)).collect::<Vec<_>>();
            let (da, db) = (to(&a), to(&b));
            if da != db {
                prop_assert_ne!(render_prompt(&da, "q", &t).text, render_prompt(&db, "q", &t).text);
            }
        }

        #[test]
        fn spans_tile_the_demo_region(n in 0usize..6) {
            let t = PromptTemplate::preset("trec").unwrap();
            let demos: Vec<Example> = (0..n).map(|i| ex(&format!("what is {i} ?"), "num")).collect();
            let p = render_prompt(&demos, "test ?", &t);
            prop_assert_eq!(p.spans.spans.len(), n);
            prop_assert!(p.spans.validate().is_ok());
        }
    }
}
