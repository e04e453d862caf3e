//! Pre-layer-norm self-attention stacks: a bidirectional encoder, a causal
//! decoder with optional latent injection, pseudo self-attention and the
//! single-query attention-average pooling block.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, ParameterSet, Scalar, Tensor, Var};

/// Which latent injection sites are active in the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionModes {
    /// Projected z added to every input embedding.
    pub input: bool,
    /// Per-layer latent key/value row prepended in self-attention.
    pub psa: bool,
    /// Projected z added to the pre-softmax logits.
    pub softmax: bool,
}

impl InjectionModes {
    pub const INPUT: Self = InjectionModes {
        input: true,
        psa: false,
        softmax: false,
    };
    pub const PSA: Self = InjectionModes {
        input: false,
        psa: true,
        softmax: false,
    };
    pub const SOFTMAX: Self = InjectionModes {
        input: false,
        psa: false,
        softmax: true,
    };

    /// Parses a comma separated list such as `"input,psa"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut modes = InjectionModes::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "input" => modes.input = true,
                "psa" => modes.psa = true,
                "softmax" => modes.softmax = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown injection mode {other:?}"))),
            }
        }
        Ok(modes)
    }

    pub fn any(&self) -> bool {
        self.input || self.psa || self.softmax
    }
}

impl fmt::Display for InjectionModes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.input, "input"), (self.psa, "psa"), (self.softmax, "softmax")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub injection: InjectionModes,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 4,
            encoder_layers: 2,
            heads: 4,
            latent_dim: 64,
            vocab_size: 512,
            max_seq_len: 256,
            injection: InjectionModes::PSA,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.encoder_layers == 0 || self.encoder_layers > self.layers {
            return fail(format!(
                "need 1 <= encoder_layers ({}) <= layers ({})",
                self.encoder_layers, self.layers
            ));
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.max_seq_len < 4 {
            return fail("max_seq_len must be at least 4".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

/// Test hook for pseudo self-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PsaHook {
    #[default]
    Normal,
    /// Gives the latent row an attention score of −∞.
    BlockLatent,
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    /// Keys carry no bias: a shared key offset shifts every score of a
    /// query equally and cancels in the softmax.
    pub w_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let get = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(AttentionVars {
            w_q: get("w_q")?,
            b_q: get("b_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
        })
    }
}

/// Latent key/value projections for pseudo self-attention.
#[derive(Clone, Copy, Debug)]
pub struct PsaVars {
    pub w_zk: Var,
    pub b_zk: Var,
    pub w_zv: Var,
    pub b_zv: Var,
}

impl PsaVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let get = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(PsaVars {
            w_zk: get("w_zk")?,
            b_zk: get("b_zk")?,
            w_zv: get("w_zv")?,
            b_zv: get("b_zv")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionVars,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_proj: Var,
    pub b_proj: Var,
    pub psa: Option<PsaVars>,
}

impl BlockVars {
    pub fn bind(b: &Bindings, prefix: &str, with_psa: bool) -> Result<Self> {
        let get = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(BlockVars {
            ln1_g: get("ln1.g")?,
            ln1_b: get("ln1.b")?,
            attn: AttentionVars::bind(b, &format!("{prefix}.attn"))?,
            ln2_g: get("ln2.g")?,
            ln2_b: get("ln2.b")?,
            w_fc: get("mlp.w_fc")?,
            b_fc: get("mlp.b_fc")?,
            w_proj: get("mlp.w_proj")?,
            b_proj: get("mlp.b_proj")?,
            psa: if with_psa {
                Some(PsaVars::bind(b, &format!("{prefix}.psa"))?)
            } else {
                None
            },
        })
    }
}

/// Attention-average pooling: one learnable query against the sequence.
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub query: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl PoolVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let get = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(PoolVars {
            query: get("query")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
        })
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn as_row<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    if g.shape(v).len() == 2 {
        return Ok(v);
    }
    let n = g.value(v).len();
    g.reshape(v, &[1, n])
}

/// Scaled dot-product attention split over `heads`; `mask` is
/// `rows(q) × rows(k)` with `true` meaning "may attend".
fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, mask)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

fn causal_mask(l: usize) -> Vec<bool> {
    (0..l * l).map(|idx| idx % l <= idx / l).collect()
}

fn check_length(l: usize, max_seq_len: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    if l > max_seq_len {
        return Err(Error::Index {
            what: "sequence length",
            index: l,
            bound: max_seq_len,
        });
    }
    Ok(())
}

/// Multi-head self-attention over `x: [l×d]` with scale `1/√(d/heads)`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    attn: &AttentionVars,
    heads: usize,
    causal: bool,
    max_seq_len: usize,
) -> Result<Var> {
    let l = g.shape(x)[0];
    check_length(l, max_seq_len)?;
    let q = linear(g, x, attn.w_q, attn.b_q)?;
    let k = g.matmul(x, attn.w_k)?;
    let v = linear(g, x, attn.w_v, attn.b_v)?;
    let mask = causal.then(|| causal_mask(l));
    let out = attend(g, q, k, v, heads, mask.as_deref())?;
    linear(g, out, attn.w_o, attn.b_o)
}

/// Pseudo self-attention: keys and values gain one leading row projected
/// from the layer's latent slice `z_l: [1×d]`; queries come from `x` only,
/// so the output keeps `x`'s length. The latent row is never causally masked.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    z_l: Var,
    attn: &AttentionVars,
    psa: Option<&PsaVars>,
    heads: usize,
    causal: bool,
    hook: PsaHook,
) -> Result<Var> {
    let psa = psa.ok_or_else(|| Error::Contract("pseudo self-attention requires PSA projections".into()))?;
    let l = g.shape(x)[0];
    if l == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    let z_l = as_row(g, z_l)?;
    let z_k = linear(g, z_l, psa.w_zk, psa.b_zk)?;
    let z_v = linear(g, z_l, psa.w_zv, psa.b_zv)?;
    let q = linear(g, x, attn.w_q, attn.b_q)?;
    let k = g.matmul(x, attn.w_k)?;
    let v = linear(g, x, attn.w_v, attn.b_v)?;
    let k_aug = g.concat_rows(&[z_k, k])?;
    let v_aug = g.concat_rows(&[z_v, v])?;
    let width = l + 1;
    let mask: Vec<bool> = (0..l * width)
        .map(|idx| {
            let (i, j) = (idx / width, idx % width);
            if j == 0 {
                hook != PsaHook::BlockLatent
            } else {
                !causal || j - 1 <= i
            }
        })
        .collect();
    let out = attend(g, q, k_aug, v_aug, heads, Some(&mask))?;
    linear(g, out, attn.w_o, attn.b_o)
}

/// Pools `hseq: [l×d]` into a single `[1×d]` row by attending from the
/// learnable query to the projected sequence.
pub fn attention_average<T: Scalar>(g: &mut Graph<T>, hseq: Var, pool: &PoolVars, heads: usize) -> Result<Var> {
    if g.value(hseq).is_empty() || g.shape(hseq).len() != 2 {
        return Err(Error::Contract(
            "attention_average needs a nonempty [l×d] sequence".into(),
        ));
    }
    let q = as_row(g, pool.query)?;
    let k = g.matmul(hseq, pool.w_k)?;
    let v = linear(g, hseq, pool.w_v, pool.b_v)?;
    let out = attend(g, q, k, v, heads, None)?;
    linear(g, out, pool.w_o, pool.b_o)
}

fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &BlockVars,
    cfg: &ModelConfig,
    causal: bool,
    z_l: Option<Var>,
    hook: PsaHook,
) -> Result<Var> {
    let eps = cfg.layer_norm_eps;
    let a = g.layer_norm(x, block.ln1_g, block.ln1_b, eps)?;
    let attn = match z_l {
        Some(z) => pseudo_self_attention(g, a, z, &block.attn, block.psa.as_ref(), cfg.heads, causal, hook)?,
        None => multi_head_attention(g, a, &block.attn, cfg.heads, causal, cfg.max_seq_len)?,
    };
    let x = g.add(x, attn)?;
    let m = g.layer_norm(x, block.ln2_g, block.ln2_b, eps)?;
    let h = linear(g, m, block.w_fc, block.b_fc)?;
    let h = g.gelu(h)?;
    let f = linear(g, h, block.w_proj, block.b_proj)?;
    g.add(x, f)
}

#[derive(Clone, Copy, Debug)]
pub struct StackOutput {
    /// `[l×d]` after the final layer norm.
    pub hidden: Var,
    /// `[l×V]`, decoder role only.
    pub logits: Option<Var>,
}

fn embed<T: Scalar>(g: &mut Graph<T>, b: &Bindings, cfg: &ModelConfig, tokens: &[u32]) -> Result<Var> {
    check_length(tokens.len(), cfg.max_seq_len)?;
    let mut ids = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Index {
                what: "token id",
                index: t as usize,
                bound: cfg.vocab_size,
            });
        }
        ids.push(t as usize);
    }
    let words = g.gather_rows(b.get("wte")?, &ids)?;
    let positions = g.slice_rows(b.get("wpe")?, 0, tokens.len())?;
    g.add(words, positions)
}

/// Runs the encoder or decoder stack over `tokens`.
///
/// For the decoder, `latent` (`[1×d′]`) is injected through every mode
/// enabled in `cfg.injection`; `None` gives the latent-free forward.
pub fn stack_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    tokens: &[u32],
    role: Role,
    latent: Option<Var>,
) -> Result<StackOutput> {
    match role {
        Role::Encoder => Ok(StackOutput {
            hidden: encoder_forward(g, b, cfg, tokens)?,
            logits: None,
        }),
        Role::Decoder => decoder_forward(g, b, cfg, tokens, latent, PsaHook::Normal),
    }
}

pub fn encoder_forward<T: Scalar>(g: &mut Graph<T>, b: &Bindings, cfg: &ModelConfig, tokens: &[u32]) -> Result<Var> {
    let mut h = embed(g, b, cfg, tokens)?;
    for i in 0..cfg.encoder_layers {
        let block = BlockVars::bind(b, &format!("enc.{i}"), false)?;
        h = block_forward(g, h, &block, cfg, false, None, PsaHook::Normal)?;
    }
    g.layer_norm(h, b.get("enc.ln_f.g")?, b.get("enc.ln_f.b")?, cfg.layer_norm_eps)
}

pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    tokens: &[u32],
    latent: Option<Var>,
    hook: PsaHook,
) -> Result<StackOutput> {
    let modes = cfg.injection;
    let latent = match latent {
        Some(z) => {
            let z = as_row(g, z)?;
            if g.shape(z)[1] != cfg.latent_dim {
                return Err(Error::Shape {
                    op: "latent injection",
                    lhs: g.shape(z).to_vec(),
                    rhs: vec![1, cfg.latent_dim],
                });
            }
            Some(z)
        }
        None => None,
    };

    let mut h = embed(g, b, cfg, tokens)?;
    if let (Some(z), true) = (latent, modes.input) {
        let zi = linear(g, z, b.get("inject.input.w")?, b.get("inject.input.b")?)?;
        h = g.add_row(h, zi)?;
    }
    let per_layer = match (latent, modes.psa) {
        (Some(z), true) => Some(linear(g, z, b.get("inject.psa.w")?, b.get("inject.psa.b")?)?),
        _ => None,
    };
    for i in 0..cfg.layers {
        let block = BlockVars::bind(b, &format!("dec.{i}"), modes.psa)?;
        let z_l = match per_layer {
            Some(all) => Some(g.slice_cols(all, i * cfg.d_model, cfg.d_model)?),
            None => None,
        };
        h = block_forward(g, h, &block, cfg, true, z_l, hook)?;
    }
    let hidden = g.layer_norm(h, b.get("dec.ln_f.g")?, b.get("dec.ln_f.b")?, cfg.layer_norm_eps)?;
    let mut logits = g.matmul_nt(hidden, b.get("wte")?)?;
    if let (Some(z), true) = (latent, modes.softmax) {
        let pz = linear(g, z, b.get("inject.softmax.w")?, b.get("inject.softmax.b")?)?;
        logits = g.add_row(logits, pz)?;
    }
    Ok(StackOutput {
        hidden,
        logits: Some(logits),
    })
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn insert_block<R: Rng>(p: &mut ParameterSet<f32>, rng: &mut R, prefix: &str, d: usize, std: f64) -> Result<()> {
    p.insert(format!("{prefix}.ln1.g"), Tensor::full(&[d], 1.0))?;
    p.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.attn.w_{w}"), normal_tensor(rng, &[d, d], std))?;
        if w != "k" {
            p.insert(format!("{prefix}.attn.b_{w}"), Tensor::zeros(&[d]))?;
        }
    }
    p.insert(format!("{prefix}.ln2.g"), Tensor::full(&[d], 1.0))?;
    p.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
    p.insert(format!("{prefix}.mlp.w_fc"), normal_tensor(rng, &[d, 4 * d], std))?;
    p.insert(format!("{prefix}.mlp.b_fc"), Tensor::zeros(&[4 * d]))?;
    p.insert(format!("{prefix}.mlp.w_proj"), normal_tensor(rng, &[4 * d, d], std))?;
    p.insert(format!("{prefix}.mlp.b_proj"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Adds embeddings, decoder and encoder stacks, pooling and injection
/// projections to `p`. Encoder layer `i` starts as a copy of decoder layer
/// `i`; the copies are trained independently afterwards.
pub fn init_stack_params<R: Rng>(cfg: &ModelConfig, p: &mut ParameterSet<f32>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d, std) = (cfg.d_model, cfg.init_std);
    p.insert("wte", normal_tensor(rng, &[cfg.vocab_size, d], std))?;
    p.insert("wpe", normal_tensor(rng, &[cfg.max_seq_len, d], std))?;
    for i in 0..cfg.layers {
        insert_block(p, rng, &format!("dec.{i}"), d, std)?;
    }
    p.insert("dec.ln_f.g", Tensor::full(&[d], 1.0))?;
    p.insert("dec.ln_f.b", Tensor::zeros(&[d]))?;
    for i in 0..cfg.encoder_layers {
        let src = format!("dec.{i}.");
        let copies: Vec<(String, Tensor<f32>)> = p
            .iter()
            .filter(|(n, _)| n.starts_with(&src))
            .map(|(n, t)| (format!("enc.{i}.{}", &n[src.len()..]), t.clone()))
            .collect();
        for (n, t) in copies {
            p.insert(n, t)?;
        }
    }
    p.insert("enc.ln_f.g", Tensor::full(&[d], 1.0))?;
    p.insert("enc.ln_f.b", Tensor::zeros(&[d]))?;

    p.insert("pool.query", normal_tensor(rng, &[d], std))?;
    p.insert("pool.w_k", normal_tensor(rng, &[d, d], std))?;
    for w in ["v", "o"] {
        p.insert(format!("pool.w_{w}"), normal_tensor(rng, &[d, d], std))?;
        p.insert(format!("pool.b_{w}"), Tensor::zeros(&[d]))?;
    }

    let dz = cfg.latent_dim;
    let modes = cfg.injection;
    if modes.input {
        p.insert("inject.input.w", normal_tensor(rng, &[dz, d], std))?;
        p.insert("inject.input.b", Tensor::zeros(&[d]))?;
    }
    if modes.psa {
        p.insert("inject.psa.w", normal_tensor(rng, &[dz, d * cfg.layers], std))?;
        p.insert("inject.psa.b", Tensor::zeros(&[d * cfg.layers]))?;
        for i in 0..cfg.layers {
            for w in ["zk", "zv"] {
                p.insert(format!("dec.{i}.psa.w_{w}"), normal_tensor(rng, &[d, d], std))?;
                p.insert(format!("dec.{i}.psa.b_{w}"), Tensor::zeros(&[d]))?;
            }
        }
    }
    if modes.softmax {
        p.insert("inject.softmax.w", normal_tensor(rng, &[dz, cfg.vocab_size], std))?;
        p.insert("inject.softmax.b", Tensor::zeros(&[cfg.vocab_size]))?;
    }
    Ok(())
}

/// True for parameters that exist only to carry the latent into the decoder.
pub fn is_injection_param(name: &str) -> bool {
    name.starts_with("inject.") || name.contains(".psa.")
}
