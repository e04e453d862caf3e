//! Autoregressive decoding with temperature, top-k and top-p filtering, and
//! the latent-swap control mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SEPARATOR;
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentOrigin};
use crate::model::Cvae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Use the distribution mean instead of a sample for the latent.
    pub latent_mean: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 100,
            top_p: 0.9,
            temperature: 0.9,
            max_new_tokens: 200,
            seed: 0,
            latent_mean: false,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        SamplerConfig {
            top_k: 1,
            top_p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
            latent_mean: true,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::Config(format!("top_k {} outside [1, {vocab_size}]", self.top_k)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Temperature → softmax → top-k → top-p → renormalize. Ties in
/// probability rank the lower token id first. Returns a full-length
/// probability vector with zeros outside the kept set.
pub fn filter_logits(logits: &[f64], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate(logits.len())?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "filter_logits" });
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / cfg.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);

    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= cfg.top_p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..kept] {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Inverse-CDF draw over token ids in ascending order.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Where the decoding latent comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentSource {
    /// Prior over the generation prompt.
    Prior,
    /// Prior over a different prompt (latent swap).
    PriorOf(Vec<u32>),
    /// Posterior over the prompt paired with this story.
    Posterior(Vec<u32>),
    External(Vec<f32>),
    None,
}

impl LatentSource {
    pub fn label(&self) -> &'static str {
        match self {
            LatentSource::Prior => "prior",
            LatentSource::PriorOf(_) => "prior-of-other-prompt",
            LatentSource::Posterior(_) => "posterior",
            LatentSource::External(_) => "external",
            LatentSource::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub latent: Option<LatentCode>,
}

/// Resolves the latent for one generation, drawing any noise from `rng`.
pub fn resolve_latent<R: Rng>(
    model: &Cvae<f32>,
    prompt: &[u32],
    source: &LatentSource,
    use_mean: bool,
    rng: &mut R,
) -> Result<Option<LatentCode>> {
    let (dist, mean_origin, sample_origin) = match source {
        LatentSource::None => return Ok(None),
        LatentSource::External(z) => {
            if z.len() != model.config.latent_dim {
                return Err(Error::Shape {
                    op: "external latent",
                    lhs: vec![z.len()],
                    rhs: vec![model.config.latent_dim],
                });
            }
            return LatentCode::new(z.clone(), LatentOrigin::External).map(Some);
        }
        LatentSource::Prior => (
            model.encode_prior(prompt)?,
            LatentOrigin::PriorMean,
            LatentOrigin::PriorSample,
        ),
        LatentSource::PriorOf(other) => (
            model.encode_prior(other)?,
            LatentOrigin::PriorMean,
            LatentOrigin::PriorSample,
        ),
        LatentSource::Posterior(story) => (
            model.encode_posterior(prompt, story)?,
            LatentOrigin::PosteriorMean,
            LatentOrigin::PosteriorSample,
        ),
    };
    let code = if use_mean {
        LatentCode::new(dist.mu.iter().map(|&x| x as f32).collect(), mean_origin)?
    } else {
        LatentCode::new(dist.sample(rng).into_iter().map(|x| x as f32).collect(), sample_origin)?
    };
    Ok(Some(code))
}

/// Decodes a story after `prompt ++ [SEP]` with the latent held fixed.
/// Stops on the separator, after `max_new_tokens`, or at the position limit.
pub fn generate(model: &Cvae<f32>, prompt: &[u32], source: &LatentSource, cfg: &SamplerConfig) -> Result<Generation> {
    let v = model.config.vocab_size;
    cfg.validate(v)?;
    if prompt.is_empty() {
        return Err(Error::Contract("prompt is empty".into()));
    }
    if prompt.len() + 1 > model.config.max_seq_len {
        return Err(Error::Data(format!(
            "prompt of {} tokens exceeds the maximum sequence length {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = resolve_latent(model, prompt, source, cfg.latent_mean, &mut rng)?;
    let mut seq: Vec<u32> = prompt.to_vec();
    seq.push(SEPARATOR);
    let mut story = Vec::new();
    while story.len() < cfg.max_new_tokens && seq.len() < model.config.max_seq_len {
        let logits = model.decoder_logits(&seq, latent.as_ref().map(|c| c.z.as_slice()))?;
        let last: Vec<f64> = logits.row(seq.len() - 1).iter().map(|&x| x as f64).collect();
        let probs = filter_logits(&last, cfg)?;
        let next = sample_index(&probs, &mut rng) as u32;
        if next == SEPARATOR {
            break;
        }
        story.push(next);
        seq.push(next);
    }
    Ok(Generation { tokens: story, latent })
}

/// Decodes with prompt `x1` as prefix and the latent drawn from the prior
/// over `x2`.
pub fn control_generate(model: &Cvae<f32>, x1: &[u32], x2: &[u32], cfg: &SamplerConfig) -> Result<Generation> {
    if x2.is_empty() {
        return Err(Error::Contract("second prompt is empty".into()));
    }
    generate(model, x1, &LatentSource::PriorOf(x2.to_vec()), cfg)
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub story: String,
    pub latent_source: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::transformer::{InjectionModes, ModelConfig};

    fn cfg(k: usize, p: f64, t: f64) -> SamplerConfig {
        SamplerConfig {
            top_k: k,
            top_p: p,
            temperature: t,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn nucleus_worked_example() {
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let out = filter_logits(&logits, &cfg(3, 0.7, 1.0)).unwrap();
        assert!((out[0] - 0.625).abs() < 1e-12);
        assert!((out[1] - 0.375).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn top_one_is_argmax_with_low_id_ties() {
        let out = filter_logits(&[1.0, 3.0, 3.0, 0.0], &cfg(1, 1.0, 1.0)).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn no_filtering_is_tempered_softmax() {
        let logits = [0.2, -1.0, 2.5, 0.0];
        let out = filter_logits(&logits, &cfg(4, 1.0, 0.5)).unwrap();
        let e: Vec<f64> = logits.iter().map(|x| (x / 0.5f64).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in out.iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn config_bounds() {
        assert!(filter_logits(&[0.0, 1.0], &cfg(3, 0.9, 1.0)).is_err());
        assert!(filter_logits(&[0.0, 1.0], &cfg(1, 0.0, 1.0)).is_err());
        assert!(filter_logits(&[0.0, 1.0], &cfg(1, 0.5, 0.0)).is_err());
        assert!(filter_logits(&[0.0, f64::NAN], &cfg(1, 0.5, 1.0)).is_err());
    }

    #[test]
    fn sampling_respects_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let i = sample_index(&[0.0, 0.4, 0.0, 0.6], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }

    fn model() -> Cvae<f32> {
        let c = ModelConfig {
            d_model: 8,
            layers: 2,
            encoder_layers: 1,
            heads: 2,
            latent_dim: 4,
            vocab_size: 260,
            max_seq_len: 12,
            injection: InjectionModes::PSA,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        Cvae::init(c, Mode::Cvae, 2).unwrap()
    }

    #[test]
    fn generation_contracts() {
        let m = model();
        let mut c = cfg(20, 0.95, 1.0);
        c.max_new_tokens = 5;
        c.seed = 4;
        let a = generate(&m, &[1, 2, 3], &LatentSource::Prior, &c).unwrap();
        let b = generate(&m, &[1, 2, 3], &LatentSource::Prior, &c).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 5);
        c.max_new_tokens = 0;
        assert!(generate(&m, &[1, 2, 3], &LatentSource::Prior, &c)
            .unwrap()
            .tokens
            .is_empty());
        assert!(generate(&m, &[7; 12], &LatentSource::None, &c).is_err());
        assert!(generate(&m, &[], &LatentSource::None, &c).is_err());
    }

    #[test]
    fn position_limit_caps_length() {
        let m = model();
        let mut c = SamplerConfig::greedy(100);
        c.top_k = 50;
        c.top_p = 1.0;
        let g = generate(&m, &[1, 2, 3], &LatentSource::None, &c).unwrap();
        assert!(g.tokens.len() <= 12 - 4);
    }

    #[test]
    fn swap_with_same_prompt_is_plain_prior() {
        let m = model();
        let mut c = cfg(30, 0.9, 0.9);
        c.max_new_tokens = 6;
        c.seed = 11;
        let a = control_generate(&m, &[4, 5], &[4, 5], &c).unwrap();
        let b = generate(&m, &[4, 5], &LatentSource::Prior, &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.latent.unwrap().z, b.latent.unwrap().z);
    }

    #[test]
    fn external_latent_checked() {
        let m = model();
        let c = SamplerConfig::greedy(2);
        assert!(generate(&m, &[1], &LatentSource::External(vec![0.0; 3]), &c).is_err());
        let g = generate(&m, &[1], &LatentSource::External(vec![0.5; 4]), &c).unwrap();
        assert_eq!(g.latent.unwrap().source, LatentOrigin::External);
    }
}
