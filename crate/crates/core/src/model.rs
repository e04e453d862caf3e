//! VAE and CVAE objectives assembled from the encoder, latent heads and
//! decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, SEPARATOR};
use crate::error::{Error, Result};
use crate::latent::{self, DiagonalGaussian, GaussianVars, HeadRole};
use crate::tensor::{Bindings, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::transformer::{self, attention_average, encoder_forward, ModelConfig, PoolVars, PsaHook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unconditional: fixed N(0, I) prior, posterior over the text alone.
    Vae,
    /// Conditional: learnable prior over the prompt.
    Cvae,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vae" => Ok(Mode::Vae),
            "cvae" => Ok(Mode::Cvae),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected vae or cvae)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vae => "vae",
            Mode::Cvae => "cvae",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Masked sum of token negative log-likelihoods.
    pub reconstruction_nats: f64,
    pub kl_nats: f64,
    pub beta: f64,
    /// −(reconstruction + β·kl)
    pub elbo_estimate: f64,
    pub token_count: usize,
}

impl LossBreakdown {
    pub fn training_loss(&self) -> f64 {
        self.reconstruction_nats + self.beta * self.kl_nats
    }
}

/// Graph handles for one example's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub token_count: usize,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, beta: f64) -> LossBreakdown {
        let reconstruction_nats = g.value(self.reconstruction).item().widen();
        let kl_nats = g.value(self.kl).item().widen();
        LossBreakdown {
            reconstruction_nats,
            kl_nats,
            beta,
            elbo_estimate: -(reconstruction_nats + beta * kl_nats),
            token_count: self.token_count,
        }
    }
}

/// Encoder trunk → attention-average pooling → the role's Gaussian head.
/// Prior and posterior share every trunk and pooling parameter.
pub fn encode_gaussian<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    tokens: &[u32],
    role: HeadRole,
) -> Result<GaussianVars> {
    if tokens.is_empty() {
        return Err(Error::Contract("encoder input is empty".into()));
    }
    let hidden = encoder_forward(g, b, cfg, tokens)?;
    let pooled = attention_average(g, hidden, &PoolVars::bind(b, "pool")?, cfg.heads)?;
    latent::to_gaussian(g, b, pooled, role)
}

fn decoder_nll<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    ex: &Example,
    z: Option<Var>,
) -> Result<(Var, Vec<T>)> {
    let out = transformer::decoder_forward(g, b, cfg, &ex.decoder_input, z, PsaHook::Normal)?;
    let logits = out.logits.expect("decoder produces logits");
    g.cross_entropy(logits, &ex.target_indices(), &ex.loss_mask)
}

/// Single-sample CVAE objective: z from the posterior over
/// `prompt ++ [SEP] ++ story`, KL against the prompt-only prior.
pub fn cvae_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    ex: &Example,
    noise: &[T],
    beta: f64,
) -> Result<LossVars> {
    let posterior = encode_gaussian(g, b, cfg, &ex.posterior_input, HeadRole::Posterior)?;
    let prior = encode_gaussian(g, b, cfg, &ex.prior_input, HeadRole::Prior)?;
    finish_loss(g, b, cfg, ex, noise, beta, posterior, prior)
}

/// Single-sample VAE objective against a fixed N(0, I) prior.
pub fn vae_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    ex: &Example,
    noise: &[T],
    beta: f64,
) -> Result<LossVars> {
    let posterior = encode_gaussian(g, b, cfg, &ex.posterior_input, HeadRole::Posterior)?;
    let prior = GaussianVars::standard(g, cfg.latent_dim)?;
    finish_loss(g, b, cfg, ex, noise, beta, posterior, prior)
}

#[allow(clippy::too_many_arguments)]
fn finish_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    ex: &Example,
    noise: &[T],
    beta: f64,
    posterior: GaussianVars,
    prior: GaussianVars,
) -> Result<LossVars> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("beta {beta} outside [0, 1]")));
    }
    if noise.len() != cfg.latent_dim {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: vec![noise.len()],
            rhs: vec![cfg.latent_dim],
        });
    }
    let z = latent::reparameterize(g, &posterior, noise)?;
    let (reconstruction, _) = decoder_nll(g, b, cfg, ex, Some(z))?;
    let kl = latent::kl_divergence(g, &posterior, &prior)?;
    let weighted = g.scale(kl, beta)?;
    let loss = g.add(reconstruction, weighted)?;
    Ok(LossVars {
        loss,
        reconstruction,
        kl,
        token_count: ex.scored_tokens(),
    })
}

pub fn loss_graph<T: Scalar>(
    mode: Mode,
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    ex: &Example,
    noise: &[T],
    beta: f64,
) -> Result<LossVars> {
    match mode {
        Mode::Cvae => cvae_loss_graph(g, b, cfg, ex, noise, beta),
        Mode::Vae => vae_loss_graph(g, b, cfg, ex, noise, beta),
    }
}

/// The full model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Cvae<T> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub params: ParameterSet<T>,
}

impl Cvae<f32> {
    /// GPT-2 style initialization: N(0, init_std) weights, zero biases,
    /// unit layer-norm gains, seeded.
    pub fn init(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        transformer::init_stack_params(&config, &mut params, &mut rng)?;
        latent::init_head_params(&config, &mut params, &mut rng)?;
        Ok(Cvae { config, mode, params })
    }
}

impl<T: Scalar> Cvae<T> {
    pub fn cast<U: Scalar>(&self) -> Cvae<U> {
        Cvae {
            config: self.config.clone(),
            mode: self.mode,
            params: self.params.cast(),
        }
    }

    /// Zeroes every latent-injection projection.
    pub fn zero_injection(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if transformer::is_injection_param(name) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    fn bound(&self) -> Result<(Graph<T>, Bindings)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g)?;
        Ok((g, b))
    }

    pub fn encode_prior(&self, prompt: &[u32]) -> Result<DiagonalGaussian> {
        match self.mode {
            Mode::Vae => Ok(DiagonalGaussian::standard(self.config.latent_dim)),
            Mode::Cvae => {
                if prompt.is_empty() {
                    return Err(Error::Contract("prompt is empty".into()));
                }
                let (mut g, b) = self.bound()?;
                let q = encode_gaussian(&mut g, &b, &self.config, prompt, HeadRole::Prior)?;
                Ok(q.value(&g))
            }
        }
    }

    /// Posterior over `prompt ++ [SEP] ++ story` (CVAE) or the story alone (VAE).
    pub fn encode_posterior(&self, prompt: &[u32], story: &[u32]) -> Result<DiagonalGaussian> {
        if story.is_empty() || (self.mode == Mode::Cvae && prompt.is_empty()) {
            return Err(Error::Contract("posterior needs a nonempty prompt and story".into()));
        }
        let input: Vec<u32> = match self.mode {
            Mode::Cvae => prompt
                .iter()
                .copied()
                .chain([SEPARATOR])
                .chain(story.iter().copied())
                .collect(),
            Mode::Vae => story.to_vec(),
        };
        let (mut g, b) = self.bound()?;
        let q = encode_gaussian(&mut g, &b, &self.config, &input, HeadRole::Posterior)?;
        Ok(q.value(&g))
    }

    pub fn cvae_loss(&self, ex: &Example, noise: &[f64], beta: f64) -> Result<LossBreakdown> {
        let (mut g, b) = self.bound()?;
        let noise: Vec<T> = noise.iter().map(|&x| T::lit(x)).collect();
        let vars = cvae_loss_graph(&mut g, &b, &self.config, ex, &noise, beta)?;
        Ok(vars.breakdown(&g, beta))
    }

    pub fn vae_loss(&self, ex: &Example, noise: &[f64], beta: f64) -> Result<LossBreakdown> {
        let (mut g, b) = self.bound()?;
        let noise: Vec<T> = noise.iter().map(|&x| T::lit(x)).collect();
        let vars = vae_loss_graph(&mut g, &b, &self.config, ex, &noise, beta)?;
        Ok(vars.breakdown(&g, beta))
    }

    pub fn loss(&self, ex: &Example, noise: &[f64], beta: f64) -> Result<LossBreakdown> {
        match self.mode {
            Mode::Cvae => self.cvae_loss(ex, noise, beta),
            Mode::Vae => self.vae_loss(ex, noise, beta),
        }
    }

    /// Decoder logits `[l×V]` for `tokens` with an optional injected latent.
    pub fn decoder_logits(&self, tokens: &[u32], latent: Option<&[f32]>) -> Result<Tensor<T>> {
        let (mut g, b) = self.bound()?;
        let z = match latent {
            Some(z) => {
                let data = z.iter().map(|&x| T::lit(x as f64)).collect();
                Some(g.constant(Tensor::new(vec![1, z.len()], data)?)?)
            }
            None => None,
        };
        let out = transformer::decoder_forward(&mut g, &b, &self.config, tokens, z, PsaHook::Normal)?;
        Ok(g.value(out.logits.expect("decoder logits")).clone())
    }

    /// Teacher-forced per-position negative log-likelihood (nats, computed in
    /// `f64` from the logits) of the scored targets of `ex` under latent `z`.
    pub fn target_nll(&self, ex: &Example, latent: Option<&[f32]>) -> Result<Vec<f64>> {
        let logits = self.decoder_logits(&ex.decoder_input, latent)?;
        let (_, v) = logits.matrix_dims();
        let mut out = Vec::with_capacity(ex.scored_tokens());
        for (i, (&t, &m)) in ex.targets.iter().zip(&ex.loss_mask).enumerate() {
            if !m {
                continue;
            }
            let row: Vec<f64> = logits.row(i).iter().map(|x| x.widen()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            if t as usize >= v {
                return Err(Error::Index {
                    what: "target",
                    index: t as usize,
                    bound: v,
                });
            }
            out.push(lse - row[t as usize]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_example, build_text_example, PromptStoryPair};
    use crate::transformer::InjectionModes;

    fn toy(modes: InjectionModes, mode: Mode) -> Cvae<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            layers: 2,
            encoder_layers: 1,
            heads: 2,
            latent_dim: 4,
            vocab_size: 260,
            max_seq_len: 16,
            injection: modes,
            init_std: 0.2,
            ..ModelConfig::default()
        };
        Cvae::init(cfg, mode, 5).unwrap()
    }

    fn example() -> Example {
        build_example(
            &PromptStoryPair::from_tokens(vec![3, 9, 4], vec![100, 7, 7, 22]),
            SEPARATOR,
            16,
        )
        .unwrap()
    }

    #[test]
    fn prior_shape_and_purity() {
        let m = toy(InjectionModes::PSA, Mode::Cvae);
        let a = m.encode_prior(&[1, 2, 3]).unwrap();
        let b = m.encode_prior(&[1, 2, 3]).unwrap();
        assert_eq!(a.dim(), 4);
        assert_eq!(a, b);
        assert!(m.encode_prior(&[]).is_err());
        let post = m.encode_posterior(&[1, 2, 3], &[5, 6]).unwrap();
        assert_eq!(post.dim(), 4);
        assert_ne!(post.mu, a.mu);
    }

    #[test]
    fn trunk_shared_heads_separate() {
        let m = toy(InjectionModes::PSA, Mode::Cvae);
        let prior = m.encode_prior(&[1, 2, 3]).unwrap();
        let post = m.encode_posterior(&[1, 2, 3], &[5, 6]).unwrap();

        let mut trunk = m.clone();
        trunk.params.get_mut("enc.0.attn.w_v").unwrap().data_mut().fill(0.0);
        assert_ne!(trunk.encode_prior(&[1, 2, 3]).unwrap(), prior);
        assert_ne!(trunk.encode_posterior(&[1, 2, 3], &[5, 6]).unwrap(), post);

        let mut head = m.clone();
        head.params.get_mut("posterior.mu.w").unwrap().data_mut().fill(0.0);
        assert_eq!(head.encode_prior(&[1, 2, 3]).unwrap(), prior);
        assert_ne!(head.encode_posterior(&[1, 2, 3], &[5, 6]).unwrap(), post);
    }

    #[test]
    fn beta_zero_is_reconstruction_only() {
        let m = toy(InjectionModes::INPUT, Mode::Cvae);
        let l = m.cvae_loss(&example(), &[0.1, -0.4, 1.0, 0.3], 0.0).unwrap();
        assert_eq!(l.training_loss(), l.reconstruction_nats);
        assert!(l.kl_nats > 0.0);
        assert_eq!(l.token_count, 5);
        let l1 = m.cvae_loss(&example(), &[0.1, -0.4, 1.0, 0.3], 1.0).unwrap();
        assert_eq!(l1.reconstruction_nats, l.reconstruction_nats);
        assert!(l1.training_loss() >= l1.reconstruction_nats);
        assert!((l1.elbo_estimate + l1.reconstruction_nats + l1.kl_nats).abs() < 1e-9);
        assert!(m.cvae_loss(&example(), &[0.0; 4], 1.5).is_err());
        assert!(m.cvae_loss(&example(), &[0.0; 3], 0.5).is_err());
    }

    #[test]
    fn copied_heads_give_zero_kl() {
        let mut m = toy(InjectionModes::SOFTMAX, Mode::Cvae);
        // identical heads on identical inputs
        for head in ["mu.w", "mu.b", "log_sigma.w", "log_sigma.b"] {
            let t = m.params.get(&format!("prior.{head}")).unwrap().clone();
            *m.params.get_mut(&format!("posterior.{head}")).unwrap() = t;
        }
        let mut ex = example();
        ex.posterior_input = ex.prior_input.clone();
        let l = m.cvae_loss(&ex, &[0.5; 4], 1.0).unwrap();
        assert!(l.kl_nats.abs() < 1e-6, "{}", l.kl_nats);
    }

    #[test]
    fn vae_kl_against_standard_normal() {
        let mut m = toy(InjectionModes::PSA, Mode::Vae);
        let ex = build_text_example(&[5, 6, 7], SEPARATOR, 16).unwrap();
        let l = m.vae_loss(&ex, &[0.2; 4], 1.0).unwrap();
        let post = m.encode_posterior(&[], &[5, 6, 7]).unwrap();
        let expected = latent::kl_closed_form(&post, &DiagonalGaussian::standard(4)).unwrap();
        assert!((l.kl_nats - expected).abs() < 1e-5);

        for head in ["mu.w", "mu.b", "log_sigma.w", "log_sigma.b"] {
            m.params
                .get_mut(&format!("posterior.{head}"))
                .unwrap()
                .data_mut()
                .fill(0.0);
        }
        let l = m.vae_loss(&ex, &[0.2; 4], 0.0).unwrap();
        assert_eq!(l.kl_nats, 0.0);
        assert_eq!(l.training_loss(), l.reconstruction_nats);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("CVAE".parse::<Mode>().unwrap(), Mode::Cvae);
        assert!("gan".parse::<Mode>().is_err());
    }
}
