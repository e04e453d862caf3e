//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use story_cvae::corpus::SEPARATOR;
use story_cvae::latent::DiagonalGaussian;
use story_cvae::model::Cvae;

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Exhaustive search over every vocabulary subset of size ≤ k. Prefers
/// subsets reaching mass `p` (smallest first, then heaviest); otherwise the
/// heaviest subset of size k.
pub fn brute_force_support(probs: &[f64], k: usize, p: f64) -> Vec<usize> {
    let v = probs.len();
    let mut best: Option<(bool, usize, f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << v) {
        let set: Vec<usize> = (0..v).filter(|i| mask >> i & 1 == 1).collect();
        if set.len() > k {
            continue;
        }
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        let reaches = mass >= p;
        let better = match &best {
            None => true,
            Some((br, bl, bm, _)) => match (reaches, *br) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => set.len() < *bl || (set.len() == *bl && mass > *bm),
                (false, false) => set.len() > *bl || (set.len() == *bl && mass > *bm),
            },
        };
        if better {
            best = Some((reaches, set.len(), mass, set));
        }
    }
    best.unwrap().3
}

/// Argmax decoding written directly against the decoder, latent at the
/// prior mean.
pub fn greedy_oracle(model: &Cvae<f32>, prompt: &[u32], max_new: usize) -> Vec<u32> {
    let z: Vec<f32> = model
        .encode_prior(prompt)
        .unwrap()
        .mu
        .iter()
        .map(|&x| x as f32)
        .collect();
    let mut seq = prompt.to_vec();
    seq.push(SEPARATOR);
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < model.config.max_seq_len {
        let logits = model.decoder_logits(&seq, Some(&z)).unwrap();
        let row = logits.row(seq.len() - 1);
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        if best as u32 == SEPARATOR {
            break;
        }
        out.push(best as u32);
        seq.push(best as u32);
    }
    out
}

/// Clipped n-gram overlap with candidate and reference n-gram totals.
pub fn counted_overlap(c: &[&str], r: &[&str], n: usize) -> (usize, usize, usize) {
    let grams = |t: &[&str]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if t.len() >= n {
            for w in t.windows(n) {
                *m.entry(w.iter().map(|s| s.to_lowercase()).collect()).or_insert(0) += 1;
            }
        }
        m
    };
    let (cg, rg) = (grams(c), grams(r));
    let overlap = cg.iter().map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0))).sum();
    (overlap, cg.values().sum(), rg.values().sum())
}

/// Longest common subsequence by enumerating every subsequence of `c`.
pub fn lcs_by_enumeration(c: &[&str], r: &[&str]) -> usize {
    let is_subsequence = |s: &[&str]| {
        let mut it = r.iter();
        s.iter().all(|w| it.any(|x| x == w))
    };
    (0u32..(1 << c.len()))
        .filter_map(|mask| {
            let s: Vec<&str> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| c[i]).collect();
            is_subsequence(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn prf(overlap: usize, cand: usize, reference: usize) -> (f64, f64, f64) {
    let p = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
    let r = if reference == 0 {
        0.0
    } else {
        overlap as f64 / reference as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Monte Carlo estimate of KL(q‖p) and its standard error.
pub fn kl_monte_carlo(q: &DiagonalGaussian, p: &DiagonalGaussian, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let z = q.sample(&mut rng);
        let d = q.log_density(&z) - p.log_density(&z);
        sum += d;
        sq += d * d;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
