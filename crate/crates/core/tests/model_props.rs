use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use story_cvae::corpus::{build_example, build_text_example, PromptStoryPair, SEPARATOR};
use story_cvae::latent::{kl_closed_form, DiagonalGaussian};
use story_cvae::model::{Cvae, Mode};
use story_cvae::selftest::gradcheck_config;
use story_cvae::transformer::InjectionModes;

const SEP: u32 = SEPARATOR;

fn single(mode: &str) -> InjectionModes {
    InjectionModes::parse(mode).unwrap()
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..SEP)).collect()
}

fn model(injection: InjectionModes, mode: Mode, seed: u64) -> Cvae<f32> {
    let mut cfg = gradcheck_config(injection);
    cfg.init_std = 0.1;
    cfg.vocab_size = 260;
    Cvae::init(cfg, mode, seed).unwrap()
}

#[test]
fn each_injection_mode_changes_logits() {
    for name in ["input", "psa", "softmax"] {
        let m = model(single(name), Mode::Cvae, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let toks = tokens(&mut rng, 7);
        let z: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let with = m.decoder_logits(&toks, Some(&z)).unwrap();
        let without = m.decoder_logits(&toks, None).unwrap();
        assert!(with.max_abs_diff(&without) > 1e-6, "{name}");
    }
}

#[test]
fn additive_modes_are_exact_no_ops_at_zero() {
    for name in ["input", "softmax", "input,softmax"] {
        let mut m = model(single(name), Mode::Cvae, 4);
        m.zero_injection();
        let toks = [1, 2, 3, 4, 5];
        let with = m.decoder_logits(&toks, Some(&[0.0; 8])).unwrap();
        let without = m.decoder_logits(&toks, None).unwrap();
        let same = with
            .data()
            .iter()
            .zip(without.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name}");
    }
}

#[test]
fn zeroed_psa_still_shifts_attention_mass() {
    // A zero latent key scores 0, so the latent slot keeps a share of the
    // softmax mass even with zero projections.
    let mut m = model(InjectionModes::PSA, Mode::Cvae, 4);
    m.zero_injection();
    let toks = [1, 2, 3, 4, 5];
    let with = m.decoder_logits(&toks, Some(&[0.0; 8])).unwrap();
    let without = m.decoder_logits(&toks, None).unwrap();
    assert!(with.max_abs_diff(&without) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decoder_is_causal(seed in any::<u64>(), len in 2usize..12, cut in 0usize..11) {
        let cut = cut % (len - 1);
        let m = model(single("input,psa,softmax"), Mode::Cvae, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tokens(&mut rng, len);
        let mut b = a.clone();
        for t in &mut b[cut + 1..] {
            *t = (*t + 1) % SEP;
        }
        let z = [0.3f32; 8];
        let la = m.decoder_logits(&a, Some(&z)).unwrap();
        let lb = m.decoder_logits(&b, Some(&z)).unwrap();
        for i in 0..=cut {
            prop_assert_eq!(la.row(i), lb.row(i));
        }
    }

    #[test]
    fn cvae_loss_matches_composed_oracle(seed in any::<u64>(), xl in 1usize..4, yl in 1usize..6) {
        let m = model(single("input,psa,softmax"), Mode::Cvae, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = PromptStoryPair::from_tokens(tokens(&mut rng, xl), tokens(&mut rng, yl));
        let ex = build_example(&pair, SEP, 12).unwrap();
        let noise: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let beta = rng.random_range(0.0..=1.0);
        let got = m.cvae_loss(&ex, &noise, beta).unwrap();

        let prior = m.encode_prior(&pair.prompt_tokens).unwrap();
        let post = m.encode_posterior(&pair.prompt_tokens, &pair.story_tokens).unwrap();
        let z: Vec<f32> = post.mu.iter().zip(&post.log_sigma).zip(&noise)
            .map(|((mu, ls), e)| (mu + ls.exp() * e) as f32)
            .collect();
        let recon: f64 = m.target_nll(&ex, Some(&z)).unwrap().iter().sum();
        let kl = kl_closed_form(&post, &prior).unwrap();

        prop_assert!((got.reconstruction_nats - recon).abs() < 1e-4 * recon.max(1.0), "{} vs {recon}", got.reconstruction_nats);
        prop_assert!((got.kl_nats - kl).abs() < 1e-4 * kl.max(1.0), "{} vs {kl}", got.kl_nats);
        prop_assert_eq!(got.token_count, yl + 1);
        prop_assert!((got.training_loss() - (got.reconstruction_nats + beta * got.kl_nats)).abs() < 1e-9);
    }

    #[test]
    fn vae_kl_is_against_the_standard_normal(seed in any::<u64>(), yl in 1usize..8) {
        let m = model(InjectionModes::PSA, Mode::Vae, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = tokens(&mut rng, yl);
        let ex = build_text_example(&y, SEP, 12).unwrap();
        let got = m.vae_loss(&ex, &[0.5; 8], 1.0).unwrap();
        let post = m.encode_posterior(&[], &y).unwrap();
        let kl = kl_closed_form(&post, &DiagonalGaussian::standard(8)).unwrap();
        prop_assert!((got.kl_nats - kl).abs() < 1e-4 * kl.max(1.0));
        prop_assert_eq!(m.encode_prior(&[1, 2]).unwrap(), DiagonalGaussian::standard(8));
    }

    #[test]
    fn posterior_log_sigma_is_clamped(seed in any::<u64>()) {
        let mut m = model(InjectionModes::PSA, Mode::Cvae, seed);
        for (name, t) in m.params.iter_mut() {
            if name.contains("log_sigma") {
                t.data_mut().iter_mut().for_each(|x| *x *= 1e4);
            }
        }
        let post = m.encode_posterior(&[1, 2], &[3, 4, 5]).unwrap();
        prop_assert!(post.log_sigma.iter().all(|&s| (-20.0..=2.0).contains(&s)));
    }
}

#[test]
fn rejects_out_of_range_tokens_and_lengths() {
    let m = model(InjectionModes::PSA, Mode::Cvae, 1);
    assert!(m.decoder_logits(&[260], None).is_err());
    assert!(m.decoder_logits(&[1; 13], None).is_err());
    assert!(m.encode_prior(&[]).is_err());
}
