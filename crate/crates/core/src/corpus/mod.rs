//! Tokenization, corpus ingestion and assembly of encoder/decoder inputs.

mod bpe;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bpe::{Vocabulary, BYTE_TOKENS, MIN_VOCAB, SEPARATOR, SEPARATOR_TEXT};

use crate::error::{Error, Result};

/// One line of a JSON Lines corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub prompt: String,
    pub story: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<serde_json::Value>,
}

impl Record {
    pub fn label_text(&self) -> Option<String> {
        self.label.as_ref().map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1))))
        .collect()
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

/// Whitespace-delimited word count, used for word-level perplexity.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptStoryPair {
    pub prompt_text: String,
    pub story_text: String,
    pub label: Option<String>,
    pub prompt_tokens: Vec<u32>,
    pub story_tokens: Vec<u32>,
}

impl PromptStoryPair {
    /// Encodes a record. Prompts longer than `max_len / 2` tokens are
    /// rejected; the story tail is cut so that prompt, separator and story
    /// fit in `max_len` positions.
    pub fn encode(record: &Record, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let prompt_tokens = vocab.encode(&record.prompt);
        let mut story_tokens = vocab.encode(&record.story);
        if prompt_tokens.is_empty() || story_tokens.is_empty() {
            return Err(Error::Data("prompt and story must both be nonempty".into()));
        }
        if prompt_tokens.len() > max_len / 2 {
            return Err(Error::Data(format!(
                "prompt of {} tokens exceeds half the maximum length {max_len}",
                prompt_tokens.len()
            )));
        }
        story_tokens.truncate(max_len.saturating_sub(prompt_tokens.len() + 1));
        if story_tokens.is_empty() {
            return Err(Error::Data(format!(
                "maximum length {max_len} leaves no room for the story"
            )));
        }
        Ok(PromptStoryPair {
            prompt_text: record.prompt.clone(),
            story_text: record.story.clone(),
            label: record.label_text(),
            prompt_tokens,
            story_tokens,
        })
    }

    pub fn from_tokens(prompt_tokens: Vec<u32>, story_tokens: Vec<u32>) -> Self {
        PromptStoryPair {
            prompt_text: String::new(),
            story_text: String::new(),
            label: None,
            prompt_tokens,
            story_tokens,
        }
    }
}

/// Encodes every record, failing on the first rejected one.
pub fn encode_corpus(records: &[Record], vocab: &Vocabulary, max_len: usize) -> Result<Vec<PromptStoryPair>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| PromptStoryPair::encode(r, vocab, max_len).map_err(|e| Error::Data(format!("record {i}: {e}"))))
        .collect()
}

/// Model inputs for one pair.
///
/// `targets[i]` is the token predicted at decoder position `i`; the last
/// target is always the separator, which doubles as end-of-story.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prior_input: Vec<u32>,
    pub posterior_input: Vec<u32>,
    pub decoder_input: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    pub fn scored_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.targets.iter().map(|&t| t as usize).collect()
    }
}

/// Conditional example: prior sees the prompt, posterior and decoder see
/// `prompt ++ [SEP] ++ story`, and only story targets (plus the terminal
/// separator) are scored.
pub fn build_example(pair: &PromptStoryPair, separator: u32, max_len: usize) -> Result<Example> {
    let (x, y) = (&pair.prompt_tokens, &pair.story_tokens);
    if x.is_empty() || y.is_empty() {
        return Err(Error::Data("prompt and story must both be nonempty".into()));
    }
    if x.len() + 1 > max_len.saturating_sub(1) {
        return Err(Error::Data(format!(
            "prompt of {} tokens leaves no room for a story",
            x.len()
        )));
    }
    let keep = y.len().min(max_len - x.len() - 1);
    let y = &y[..keep];

    let mut joined = Vec::with_capacity(x.len() + 1 + y.len());
    joined.extend_from_slice(x);
    joined.push(separator);
    joined.extend_from_slice(y);

    let mut targets = joined[1..].to_vec();
    targets.push(separator);
    let loss_mask = (0..joined.len()).map(|i| i >= x.len()).collect();
    Ok(Example {
        prior_input: x.clone(),
        posterior_input: joined.clone(),
        decoder_input: joined,
        targets,
        loss_mask,
    })
}

/// Unconditional example: the posterior reads the text alone and the decoder
/// reconstructs all of it after a leading separator.
pub fn build_text_example(tokens: &[u32], separator: u32, max_len: usize) -> Result<Example> {
    if tokens.is_empty() {
        return Err(Error::Data("text must be nonempty".into()));
    }
    let y = &tokens[..tokens.len().min(max_len - 1)];
    let mut decoder_input = Vec::with_capacity(y.len() + 1);
    decoder_input.push(separator);
    decoder_input.extend_from_slice(y);
    let mut targets = y.to_vec();
    targets.push(separator);
    Ok(Example {
        prior_input: Vec::new(),
        posterior_input: y.to_vec(),
        loss_mask: vec![true; decoder_input.len()],
        decoder_input,
        targets,
    })
}
