use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use story_cvae::checkpoint::{Checkpoint, MANIFEST_FILE, TENSOR_FILE};
use story_cvae::model::{Cvae, Mode};
use story_cvae::trainer::TrainingSchedule;
use story_cvae::transformer::{InjectionModes, ModelConfig};

fn model(mode: Mode) -> Cvae<f32> {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 2,
        encoder_layers: 1,
        heads: 4,
        latent_dim: 6,
        vocab_size: 270,
        max_seq_len: 20,
        injection: InjectionModes::parse("input,psa,softmax").unwrap(),
        layer_norm_eps: 1e-5,
        init_std: 0.1,
    };
    Cvae::init(cfg, mode, 21).unwrap()
}

#[test]
fn save_load_forward_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let original = model(Mode::Cvae);
    Checkpoint {
        model: original.clone(),
        step: 42,
        vocabulary: Some("vocab.txt".into()),
        schedule: Some(TrainingSchedule::default()),
        optimizer: Some(vec![1, 2, 3]),
    }
    .save(dir.path())
    .unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.optimizer.as_deref(), Some(&[1u8, 2, 3][..]));
    assert_eq!(back.model.config, original.config);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let len = rng.random_range(1..=20);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..270)).collect();
        let z: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = original.decoder_logits(&tokens, Some(&z)).unwrap();
        let b = back.model.decoder_logits(&tokens, Some(&z)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let pa = original.encode_prior(&tokens).unwrap();
        let pb = back.model.encode_prior(&tokens).unwrap();
        assert_eq!(pa, pb);
    }
}

#[test]
fn vae_mode_survives_the_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Mode::Vae);
    Checkpoint {
        model: m.clone(),
        step: 0,
        vocabulary: None,
        schedule: None,
        optimizer: None,
    }
    .save(dir.path())
    .unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.model.mode, Mode::Vae);
    assert!(back.optimizer.is_none());
}

#[test]
fn corrupted_payloads_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Mode::Cvae);
    Checkpoint {
        model: m,
        step: 1,
        vocabulary: None,
        schedule: None,
        optimizer: None,
    }
    .save(dir.path())
    .unwrap();
    let path = dir.path().join(TENSOR_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(dir.path()).is_ok());

    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    std::fs::write(
        dir.path().join(MANIFEST_FILE),
        manifest.replace("\"d_model\": 16", "\"d_model\": 32"),
    )
    .unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}
