//! Fast built-in checks run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode_tensors, encode_tensors};
use crate::corpus::{build_example, PromptStoryPair, Vocabulary};
use crate::error::Result;
use crate::eval::{lcs_len, ppl_from_totals, rouge_scores, RougeVariant};
use crate::latent::{kl_closed_form, DiagonalGaussian};
use crate::model::{loss_graph, Cvae, Mode};
use crate::sampler::{filter_logits, SamplerConfig};
use crate::tensor::{grad_check, GradCheckReport};
use crate::trainer::{beta_at, TrainingSchedule};
use crate::transformer::{InjectionModes, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The gradient-check configuration: d=8, two decoder layers, one encoder
/// layer, two heads, 16 tokens, d′=8. Token 15 acts as the separator.
pub fn gradcheck_config(injection: InjectionModes) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        encoder_layers: 1,
        heads: 2,
        latent_dim: 8,
        vocab_size: 16,
        max_seq_len: 12,
        injection,
        layer_norm_eps: 1e-5,
        init_std: 0.3,
    }
}

/// Central-difference check of the full CVAE loss (β = 1) in `f64`.
pub fn toy_gradient_check(injection: InjectionModes, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(injection);
    let model = Cvae::init(cfg.clone(), Mode::Cvae, seed)?.cast::<f64>();
    let pair = PromptStoryPair::from_tokens(vec![3, 7, 1], vec![9, 4, 12, 4]);
    let ex = build_example(&pair, 15, cfg.max_seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = crate::latent::standard_noise(&mut rng, cfg.latent_dim);
    grad_check(&model.params, eps, tol, |g, b| {
        Ok(loss_graph(Mode::Cvae, g, b, &cfg, &ex, &noise, 1.0)?.loss)
    })
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Nucleus selection by exhaustive search over subsets of the top-k set:
/// the smallest subset reaching mass `p` (or the whole set), preferring
/// higher mass and then lower ids.
fn nucleus_by_search(probs: &[f64], k: usize, p: f64) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..probs.len()).collect();
    ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let top = &ranked[..k];
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..(1 << k) {
        let set: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).map(|j| top[j]).collect();
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        if mass < p && set.len() < k {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let bm: f64 = b.iter().map(|&i| probs[i]).sum();
                set.len() < b.len() || (set.len() == b.len() && mass > bm)
            }
        };
        if better {
            best = Some(set);
        }
    }
    let mut out = best.unwrap_or_default();
    out.sort_unstable();
    out
}

fn rouge_by_counting(c: &[&str], r: &[&str], n: usize) -> (f64, f64) {
    let grams = |t: &[&str]| -> Vec<String> {
        if t.len() < n {
            Vec::new()
        } else {
            t.windows(n).map(|w| w.join(" ")).collect()
        }
    };
    let (cg, mut rg) = (grams(c), grams(r));
    let total_r = rg.len();
    let mut hit = 0;
    for g in &cg {
        if let Some(pos) = rg.iter().position(|x| x == g) {
            rg.swap_remove(pos);
            hit += 1;
        }
    }
    if cg.is_empty() || total_r == 0 {
        return (0.0, 0.0);
    }
    (hit as f64 / cg.len() as f64, hit as f64 / total_r as f64)
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();

    out.push(check("gradient integrity (toy CVAE, all injection modes)", || {
        let modes = InjectionModes {
            input: true,
            psa: true,
            softmax: true,
        };
        let r = toy_gradient_check(modes, 1, 1e-4, 1e-4)?;
        Ok((
            r.passed(),
            format!(
                "max rel error {:.3e} over {} elements",
                r.max_rel_error, r.elements_checked
            ),
        ))
    }));

    out.push(check("KL closed form", || {
        let p = DiagonalGaussian::standard(1);
        let a = kl_closed_form(
            &DiagonalGaussian {
                mu: vec![1.0],
                log_sigma: vec![0.0],
            },
            &p,
        )?;
        let b = kl_closed_form(
            &DiagonalGaussian {
                mu: vec![0.0],
                log_sigma: vec![0.5],
            },
            &p,
        )?;
        let c = kl_closed_form(&p, &p)?;
        let e = std::f64::consts::E;
        let ok = (a - 0.5).abs() < 1e-12 && (b - (e - 2.0) / 2.0).abs() < 1e-12 && c == 0.0;
        Ok((ok, format!("{a}, {b}, {c}")))
    }));

    out.push(check("KL Monte Carlo agreement", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = DiagonalGaussian {
            mu: vec![0.3, -0.5],
            log_sigma: vec![-0.2, 0.1],
        };
        let p = DiagonalGaussian {
            mu: vec![0.0, 0.4],
            log_sigma: vec![0.2, -0.3],
        };
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let z = q.sample(&mut rng);
                q.log_density(&z) - p.log_density(&z)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = kl_closed_form(&q, &p)?;
        Ok((
            (mean - exact).abs() < 4.0 * se,
            format!("exact {exact:.5}, estimate {mean:.5} ± {se:.1e}"),
        ))
    }));

    out.push(check("cyclic beta schedule", || {
        let s = TrainingSchedule {
            total_steps: 640,
            cycle_length: 160,
            ..TrainingSchedule::default()
        };
        let got = [0, 80, 100, 120, 159, 160].map(|t| beta_at(t, &s));
        Ok((got == [0.0, 0.0, 0.5, 1.0, 1.0, 0.0], format!("{got:?}")))
    }));

    out.push(check("top-k / top-p filtering", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..50 {
            let v = 10;
            let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
            let k = 1 + case % v;
            let p = [0.1, 0.5, 0.9, 1.0][case % 4];
            let cfg = SamplerConfig {
                top_k: k,
                top_p: p,
                temperature: 1.0,
                ..SamplerConfig::default()
            };
            let out = filter_logits(&logits, &cfg)?;
            let support: Vec<usize> = (0..v).filter(|&i| out[i] > 0.0).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|x| (x - max).exp() / z).collect();
            if support != nucleus_by_search(&probs, k, p) {
                return Ok((false, format!("case {case}: support {support:?}")));
            }
        }
        Ok((true, "50 cases".into()))
    }));

    out.push(check("ROUGE counting", || {
        let words = ["a", "b", "c", "d"];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut text = |n: usize| -> Vec<&str> { (0..n).map(|_| words[rng.random_range(0..4)]).collect() };
            let (c, r) = (text(1 + 6), text(5));
            for (n, v) in [(1, RougeVariant::One), (2, RougeVariant::Two)] {
                let s = rouge_scores(&c.join(" "), &r.join(" "), v);
                let (p, rec) = rouge_by_counting(&c, &r, n);
                if (s.precision - p).abs() > 1e-12 || (s.recall - rec).abs() > 1e-12 {
                    return Ok((false, format!("{c:?} vs {r:?}")));
                }
            }
            let l = rouge_scores(&c.join(" "), &r.join(" "), RougeVariant::L);
            if (l.recall - lcs_len(&c, &r) as f64 / r.len() as f64).abs() > 1e-12 {
                return Ok((false, "ROUGE-L".into()));
            }
        }
        let s = rouge_scores("the cat sat", "the cat", RougeVariant::One);
        Ok(((s.f1 - 0.8).abs() < 1e-12, "worked example".into()))
    }));

    out.push(check("perplexity normalization", || {
        let sub = ppl_from_totals(10.0, 5)?;
        let word = ppl_from_totals(10.0, 2)?;
        let uniform = ppl_from_totals(7.0 * 16f64.ln(), 7)?;
        let ok = sub == 2f64.exp() && word == 5f64.exp() && (uniform - 16.0).abs() < 1e-12;
        Ok((ok, format!("{sub}, {word}, {uniform}")))
    }));

    out.push(check("checkpoint payload round trip", || {
        let model = Cvae::init(gradcheck_config(InjectionModes::PSA), Mode::Cvae, 5)?;
        let back = decode_tensors(&encode_tensors(&model.params))?;
        let restored = Cvae {
            params: back,
            ..model.clone()
        };
        let tokens = [1, 2, 3, 4];
        let a = model.decoder_logits(&tokens, Some(&[0.5; 8]))?;
        let b = restored.decoder_logits(&tokens, Some(&[0.5; 8]))?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((same, String::new()))
    }));

    out.push(check("BPE encode/decode round trip", || {
        let vocab = Vocabulary::fit(&["the quick brown fox jumps over the lazy dog", "été café 🦊"], 300)?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let alphabet: Vec<char> = "ab cdé🦊\n\t".chars().collect();
        for _ in 0..200 {
            let s: String = (0..rng.random_range(0..20))
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            if vocab.decode(&vocab.encode(&s))? != s {
                return Ok((false, format!("{s:?}")));
            }
        }
        Ok((true, "200 strings".into()))
    }));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_oracle_matches_worked_example() {
        assert_eq!(nucleus_by_search(&[0.5, 0.3, 0.2], 3, 0.7), vec![0, 1]);
        assert_eq!(nucleus_by_search(&[0.2, 0.3, 0.5], 2, 1.0), vec![1, 2]);
    }

    #[test]
    fn every_selftest_check_passes() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
