mod common;

use common::kl_monte_carlo;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use story_cvae::latent::{kl_closed_form, kl_divergence, reparameterize, DiagonalGaussian, GaussianVars};
use story_cvae::tensor::{Graph, Tensor};

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DiagonalGaussian {
    DiagonalGaussian {
        mu: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        log_sigma: (0..dim).map(|_| rng.random_range(-1.0..0.7)).collect(),
    }
}

fn vars(g: &mut Graph<f64>, d: &DiagonalGaussian) -> GaussianVars {
    let n = d.dim();
    GaussianVars {
        mu: g.constant(Tensor::new(vec![1, n], d.mu.clone()).unwrap()).unwrap(),
        log_sigma: g
            .constant(Tensor::new(vec![1, n], d.log_sigma.clone()).unwrap())
            .unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kl_agrees_with_monte_carlo(seed in any::<u64>(), dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, p) = (gaussian(&mut rng, dim), gaussian(&mut rng, dim));
        let exact = kl_closed_form(&q, &p).unwrap();
        let (est, se) = kl_monte_carlo(&q, &p, 40_000, seed ^ 1);
        // 4 standard errors keeps the per-case false alarm rate below 1e-4.
        prop_assert!((est - exact).abs() < 4.0 * se, "exact {exact}, estimate {est} ± {se}");
    }

    #[test]
    fn graph_kl_matches_closed_form(seed in any::<u64>(), dim in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, p) = (gaussian(&mut rng, dim), gaussian(&mut rng, dim));
        let mut g = Graph::<f64>::new();
        let (qv, pv) = (vars(&mut g, &q), vars(&mut g, &p));
        let kl = kl_divergence(&mut g, &qv, &pv).unwrap();
        let exact = kl_closed_form(&q, &p).unwrap();
        prop_assert!((g.value(kl).item() - exact).abs() < 1e-12 * exact.max(1.0));
        prop_assert!(exact >= 0.0);
        prop_assert_eq!(kl_closed_form(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn reparameterization_is_affine_in_noise(seed in any::<u64>(), dim in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gaussian(&mut rng, dim);
        let noise: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let qv = vars(&mut g, &q);
        let z = reparameterize(&mut g, &qv, &noise).unwrap();
        for (i, e) in noise.iter().enumerate() {
            let want = q.mu[i] + q.log_sigma[i].exp() * e;
            prop_assert!((g.value(z).data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn closed_form_examples() {
    let std = DiagonalGaussian::standard(1);
    let shifted = DiagonalGaussian {
        mu: vec![1.0],
        log_sigma: vec![0.0],
    };
    let wide = DiagonalGaussian {
        mu: vec![0.0],
        log_sigma: vec![0.5],
    };
    assert!((kl_closed_form(&shifted, &std).unwrap() - 0.5).abs() < 1e-12);
    let e = std::f64::consts::E;
    assert!((kl_closed_form(&wide, &std).unwrap() - (e - 2.0) / 2.0).abs() < 1e-12);
    assert!(kl_closed_form(&std, &DiagonalGaussian::standard(2)).is_err());
}
