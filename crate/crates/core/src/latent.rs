//! Diagonal Gaussian heads, reparameterized sampling and analytic KL.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::transformer::{linear, ModelConfig};

pub const LOG_SIGMA_MIN: f64 = -20.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Prior,
    Posterior,
}

impl HeadRole {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadRole::Prior => "prior",
            HeadRole::Posterior => "posterior",
        }
    }
}

/// A diagonal Gaussian recorded on a graph; both vars are `[1×d′]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussianVars {
    /// N(0, I) as graph constants.
    pub fn standard<T: Scalar>(g: &mut Graph<T>, dim: usize) -> Result<Self> {
        Ok(GaussianVars {
            mu: g.constant(Tensor::zeros(&[1, dim]))?,
            log_sigma: g.constant(Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn value<T: Scalar>(&self, g: &Graph<T>) -> DiagonalGaussian {
        DiagonalGaussian {
            mu: g.value(self.mu).data().iter().map(|x| x.widen()).collect(),
            log_sigma: g.value(self.log_sigma).data().iter().map(|x| x.widen()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(&m, &ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(z)
            .map(|((&m, &ls), &x)| {
                let u = (x - m) / ls.exp();
                -0.5 * (ln_2pi + u * u) - ls
            })
            .sum()
    }
}

/// Closed-form KL(q ‖ p) for diagonal Gaussians, in nats.
pub fn kl_closed_form(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![q.dim()],
            rhs: vec![p.dim()],
        });
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mu[i], q.log_sigma[i], p.mu[i], p.log_sigma[i]);
            0.5 * (2.0 * (lp - lq) + ((2.0 * lq).exp() + (mq - mp).powi(2)) / (2.0 * lp).exp() - 1.0)
        })
        .sum())
}

/// Projects a pooled `[1×d]` vector to a Gaussian with the role's own
/// mean and log-σ heads; log-σ is clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
pub fn to_gaussian<T: Scalar>(g: &mut Graph<T>, b: &Bindings, pooled: Var, role: HeadRole) -> Result<GaussianVars> {
    let p = role.prefix();
    let mu = linear(g, pooled, b.get(&format!("{p}.mu.w"))?, b.get(&format!("{p}.mu.b"))?)?;
    let raw = linear(
        g,
        pooled,
        b.get(&format!("{p}.log_sigma.w"))?,
        b.get(&format!("{p}.log_sigma.b"))?,
    )?;
    let log_sigma = g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    Ok(GaussianVars { mu, log_sigma })
}

/// `z = μ + exp(log σ) ⊙ noise`, differentiable in μ and log σ.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, q: &GaussianVars, noise: &[T]) -> Result<Var> {
    let shape = g.shape(q.mu).to_vec();
    let eps = g.constant(Tensor::new(shape, noise.to_vec())?)?;
    let sigma = g.exp(q.log_sigma)?;
    let scaled = g.mul(sigma, eps)?;
    g.add(q.mu, scaled)
}

/// Σᵢ ½·(2(log σ_p − log σ_q) + (σ_q² + (μ_q − μ_p)²)/σ_p² − 1).
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    if g.shape(q.mu) != g.shape(p.mu) {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: g.shape(q.mu).to_vec(),
            rhs: g.shape(p.mu).to_vec(),
        });
    }
    let log_ratio = g.sub(p.log_sigma, q.log_sigma)?;
    let log_term = g.scale(log_ratio, 2.0)?;
    let two_lq = g.scale(q.log_sigma, 2.0)?;
    let var_q = g.exp(two_lq)?;
    let diff = g.sub(q.mu, p.mu)?;
    let diff_sq = g.mul(diff, diff)?;
    let numer = g.add(var_q, diff_sq)?;
    let neg_two_lp = g.scale(p.log_sigma, -2.0)?;
    let inv_var_p = g.exp(neg_two_lp)?;
    let ratio = g.mul(numer, inv_var_p)?;
    let inner = g.add(log_term, ratio)?;
    let inner = g.add_scalar(inner, -1.0)?;
    let total = g.sum(inner)?;
    g.scale(total, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentOrigin {
    PriorSample,
    PosteriorSample,
    PriorMean,
    PosteriorMean,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f32>,
    pub source: LatentOrigin,
}

impl LatentCode {
    pub fn new(z: Vec<f32>, source: LatentOrigin) -> Result<Self> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "latent code" });
        }
        Ok(LatentCode { z, source })
    }

    pub fn to_var<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let data = self.z.iter().map(|&x| T::lit(x as f64)).collect();
        g.constant(Tensor::new(vec![1, self.z.len()], data)?)
    }
}

/// Standard-normal noise vector drawn from the caller's stream.
pub fn standard_noise<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Adds prior and posterior mean/log-σ heads (`[d×d′]` weights).
pub fn init_head_params<R: Rng>(cfg: &ModelConfig, p: &mut ParameterSet<f32>, rng: &mut R) -> Result<()> {
    let dist = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    for role in [HeadRole::Prior, HeadRole::Posterior] {
        for head in ["mu", "log_sigma"] {
            let w: Vec<f32> = (0..cfg.d_model * cfg.latent_dim)
                .map(|_| dist.sample(rng) as f32)
                .collect();
            p.insert(
                format!("{}.{head}.w", role.prefix()),
                Tensor::new(vec![cfg.d_model, cfg.latent_dim], w)?,
            )?;
            p.insert(format!("{}.{head}.b", role.prefix()), Tensor::zeros(&[cfg.latent_dim]))?;
        }
    }
    Ok(())
}
