use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
/// Id of the separator / end-of-story token.
pub const SEPARATOR: u32 = BYTE_TOKENS as u32;
pub const SEPARATOR_TEXT: &str = "<|endoftext|>";
pub const MIN_VOCAB: usize = BYTE_TOKENS + 1;

/// Byte-level BPE vocabulary.
///
/// Ids `0..256` are raw bytes, `256` is the separator, and merge `i`
/// produces id `257 + i`. Merges never cross pre-token boundaries, where a
/// pre-token is a whitespace run followed by a non-whitespace run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
}

/// Splits text into pre-tokens: `"a b  c"` → `["a", " b", "  c"]`.
pub(crate) fn pre_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws: Option<bool> = None;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && prev_ws == Some(false) {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn merge_pair(seq: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    /// The 257-token vocabulary: raw bytes plus the separator.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_bytes.push(SEPARATOR_TEXT.as_bytes().to_vec());
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = token_bytes.len() as u32;
            for id in [a, b] {
                if id == SEPARATOR || id >= next {
                    return Err(Error::Data(format!("merge {rank} references invalid id {id}")));
                }
            }
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Data(format!("duplicate merge ({a}, {b})")));
            }
        }
        Ok(Vocabulary {
            merges,
            ranks,
            token_bytes,
        })
    }

    /// Greedy byte-level BPE. The most frequent adjacent pair is merged
    /// until `target_size` is reached; equal counts go to the smallest
    /// `(left id, right id)` pair. Stops early when no pair remains.
    pub fn fit<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if target_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} below minimum {MIN_VOCAB}"
            )));
        }
        if corpus.iter().all(|t| t.as_ref().is_empty()) {
            return Err(Error::Data("cannot fit a vocabulary on an empty corpus".into()));
        }
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for text in corpus {
            for piece in pre_tokens(text.as_ref()) {
                let ids = piece.bytes().map(u32::from).collect();
                *counts.entry(ids).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts.into_iter().collect();
        let mut merges = Vec::new();
        while MIN_VOCAB + merges.len() < target_size {
            let mut pairs: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (seq, n) in &words {
                for w in seq.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += n;
                }
            }
            let mut best: Option<((u32, u32), usize)> = None;
            for (&pair, &n) in &pairs {
                if best.is_none_or(|(_, m)| n > m) {
                    best = Some((pair, n));
                }
            }
            let Some((pair, _)) = best else { break };
            let new_id = (MIN_VOCAB + merges.len()) as u32;
            for (seq, _) in &mut words {
                *seq = merge_pair(seq, pair, new_id);
            }
            merges.push(pair);
        }
        Self::from_merges(merges)
    }

    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn separator(&self) -> u32 {
        SEPARATOR
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    fn encode_piece(&self, piece: &str) -> Vec<u32> {
        let mut seq: Vec<u32> = piece.bytes().map(u32::from).collect();
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            seq = merge_pair(&seq, pair, MIN_VOCAB as u32 + rank);
        }
        seq
    }

    /// Encodes UTF-8 text. Never emits the separator.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokens(text)
            .into_iter()
            .flat_map(|p| self.encode_piece(p))
            .collect()
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(Error::Index {
                what: "vocabulary",
                index: id as usize,
                bound: self.size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decodes ids back to text. Byte sequences that are not valid UTF-8
    /// (possible for sampled ids) are replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Merge-list file: a header line holding the vocabulary size, then one
    /// `left right` id pair per line.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{}\n", self.size());
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty vocabulary file".into()))?;
        let size: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad vocabulary header {header:?}")))?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split_whitespace().map(str::parse::<u32>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => return Err(Error::Data(format!("bad merge on line {}: {line:?}", i + 2))),
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != size {
            return Err(Error::Data(format!(
                "header says {size} tokens but merge list yields {}",
                vocab.size()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text)
    }
}
