//! Perplexity at subword and word granularity, ROUGE-1/2/L, and latent
//! export for external visualization.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_example, build_text_example, word_count, PromptStoryPair, Vocabulary, SEPARATOR};
use crate::error::{Error, Result};
use crate::model::{Cvae, Mode};
use crate::sampler::{generate, LatentSource, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        if cand == 0 || reference == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / cand as f64;
        let recall = overlap as f64 / reference as f64;
        RougeScore {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Lowercased whitespace tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> RougeScore {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_counts(
        overlap,
        cand.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(cand: &[String], reference: &[String]) -> RougeScore {
    RougeScore::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

/// Scores `candidate` against `reference`. An empty side yields all zeros.
pub fn rouge_scores(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    match variant {
        RougeVariant::One => rouge_n(&c, &r, 1),
        RougeVariant::Two => rouge_n(&c, &r, 2),
        RougeVariant::L => rouge_l(&c, &r),
    }
}

/// Teacher-forced totals, additive over any partition of the corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NllTotals {
    pub nll: f64,
    pub subword_tokens: usize,
    pub words: usize,
}

impl NllTotals {
    pub fn merge(self, other: NllTotals) -> NllTotals {
        NllTotals {
            nll: self.nll + other.nll,
            subword_tokens: self.subword_tokens + other.subword_tokens,
            words: self.words + other.words,
        }
    }

    pub fn ppl_subword(&self) -> Result<f64> {
        ppl_from_totals(self.nll, self.subword_tokens)
    }

    pub fn ppl_word(&self) -> Result<f64> {
        ppl_from_totals(self.nll, self.words)
    }
}

pub fn ppl_from_totals(nll: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Data("perplexity over zero tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

/// NLL of every story target (the terminal separator included) with z set
/// to the prior mean. Word counts come from the story as the model sees
/// it, so truncated tails are excluded from both counts.
pub fn nll_totals(model: &Cvae<f32>, vocab: &Vocabulary, pairs: &[PromptStoryPair]) -> Result<NllTotals> {
    if pairs.is_empty() {
        return Err(Error::Data("perplexity needs a nonempty corpus".into()));
    }
    let mut total = NllTotals::default();
    for pair in pairs {
        let max_len = model.config.max_seq_len;
        let (ex, prior) = match model.mode {
            Mode::Cvae => (
                build_example(pair, SEPARATOR, max_len)?,
                model.encode_prior(&pair.prompt_tokens)?,
            ),
            Mode::Vae => (
                build_text_example(&pair.story_tokens, SEPARATOR, max_len)?,
                model.encode_prior(&[])?,
            ),
        };
        let z: Vec<f32> = prior.mu.iter().map(|&x| x as f32).collect();
        let nll = model.target_nll(&ex, Some(&z))?;
        let kept = ex.scored_tokens() - 1;
        let story_text = vocab.decode(&pair.story_tokens[..kept])?;
        total = total.merge(NllTotals {
            nll: nll.iter().sum(),
            subword_tokens: nll.len(),
            words: word_count(&story_text),
        });
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Subword,
    Word,
}

pub fn perplexity(
    model: &Cvae<f32>,
    vocab: &Vocabulary,
    pairs: &[PromptStoryPair],
    granularity: Granularity,
) -> Result<f64> {
    let t = nll_totals(model, vocab, pairs)?;
    match granularity {
        Granularity::Subword => t.ppl_subword(),
        Granularity::Word => t.ppl_word(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl_subword: f64,
    pub ppl_word: f64,
    pub total_nll: f64,
    pub subword_tokens: usize,
    pub words: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    pub examples: usize,
    /// Pairs where the generated story or the reference was empty.
    pub empty_rouge_pairs: usize,
}

/// Component-wise mean of per-example scores.
pub fn mean_score(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Perplexity plus ROUGE of one sampled story per test prompt. Example `i`
/// decodes with seed `sampler.seed + i`. Returns the report and the
/// generated story texts.
pub fn evaluate(
    model: &Cvae<f32>,
    vocab: &Vocabulary,
    pairs: &[PromptStoryPair],
    sampler: &SamplerConfig,
) -> Result<(EvalReport, Vec<String>)> {
    let totals = nll_totals(model, vocab, pairs)?;
    let mut stories = Vec::with_capacity(pairs.len());
    let (mut r1, mut r2, mut rl) = (Vec::new(), Vec::new(), Vec::new());
    let mut empty = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        let g = generate(model, &pair.prompt_tokens, &LatentSource::Prior, &cfg)?;
        let text = vocab.decode(&g.tokens)?;
        let reference = if pair.story_text.is_empty() {
            vocab.decode(&pair.story_tokens)?
        } else {
            pair.story_text.clone()
        };
        if rouge_tokens(&text).is_empty() || rouge_tokens(&reference).is_empty() {
            empty += 1;
        }
        r1.push(rouge_scores(&text, &reference, RougeVariant::One));
        r2.push(rouge_scores(&text, &reference, RougeVariant::Two));
        rl.push(rouge_scores(&text, &reference, RougeVariant::L));
        stories.push(text);
    }
    let report = EvalReport {
        ppl_subword: totals.ppl_subword()?,
        ppl_word: totals.ppl_word()?,
        total_nll: totals.nll,
        subword_tokens: totals.subword_tokens,
        words: totals.words,
        rouge1: mean_score(&r1),
        rouge2: mean_score(&r2),
        rouge_l: mean_score(&rl),
        examples: pairs.len(),
        empty_rouge_pairs: empty,
    };
    Ok((report, stories))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentExport {
    PriorMean,
    PosteriorMean,
}

/// Tab-separated rows: example index, label (empty when absent), then the
/// d′ mean coordinates.
pub fn export_latents(model: &Cvae<f32>, pairs: &[PromptStoryPair], which: LatentExport) -> Result<String> {
    let mut out = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let dist = match which {
            LatentExport::PriorMean => model.encode_prior(&pair.prompt_tokens)?,
            LatentExport::PosteriorMean => model.encode_posterior(&pair.prompt_tokens, &pair.story_tokens)?,
        };
        let label = pair.label.as_deref().unwrap_or("").replace(['\t', '\n', '\r'], " ");
        write!(out, "{i}\t{label}").unwrap();
        for x in &dist.mu {
            write!(out, "\t{x}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        rouge_tokens(s)
    }

    #[test]
    fn worked_rouge_example() {
        let s = rouge_scores("the cat sat", "the cat", RougeVariant::One);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            let s = rouge_scores("a b c d", "A b C d", v);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
            assert_eq!(rouge_scores("a b", "c d", v), RougeScore::default());
            assert_eq!(rouge_scores("", "c d", v), RougeScore::default());
        }
    }

    #[test]
    fn clipping_and_lcs() {
        // candidate repeats "the"; only one match is credited
        let s = rouge_n(&toks("the the the"), &toks("the cat"), 1);
        assert_eq!(s.precision, 1.0 / 3.0);
        assert_eq!(s.recall, 0.5);
        assert_eq!(lcs_len(&toks("a b c d e"), &toks("a c e b")), 3);
        assert_eq!(rouge_n(&toks("a"), &toks("a b"), 2), RougeScore::default());
    }

    #[test]
    fn normalization_arithmetic() {
        let t = NllTotals {
            nll: 10.0,
            subword_tokens: 5,
            words: 2,
        };
        assert_eq!(t.ppl_subword().unwrap(), 2f64.exp());
        assert_eq!(t.ppl_word().unwrap(), 5f64.exp());
        assert!(ppl_from_totals(1.0, 0).is_err());
    }

    #[test]
    fn f1_zero_when_both_zero() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!((f1(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }
}
