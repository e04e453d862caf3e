//! Run configuration: a flat `key = value` file with dotted keys, overridden
//! by `--key value` flags. Dashes and underscores in keys are equivalent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::LatentExport;
use crate::model::Mode;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainingSchedule;
use crate::transformer::{InjectionModes, ModelConfig};

/// Overrides `paths.out_dir` when set; an explicit flag still wins.
pub const OUTPUT_DIR_ENV: &str = "STORY_CVAE_OUTPUT_DIR";

/// Every recognized key with its default value.
pub fn defaults() -> BTreeMap<String, String> {
    let m = ModelConfig::default();
    let t = TrainingSchedule::default();
    let s = SamplerConfig::default();
    let pairs: Vec<(&str, String)> = vec![
        ("mode", "cvae".into()),
        ("seed", String::new()),
        ("paths.corpus", "crates/core/data/toy_corpus.jsonl".into()),
        ("paths.eval_corpus", String::new()),
        ("paths.vocab", String::new()),
        ("paths.checkpoint", String::new()),
        ("paths.out_dir", "runs/default".into()),
        ("vocab.size", m.vocab_size.to_string()),
        ("model.d", m.d_model.to_string()),
        ("model.layers", m.layers.to_string()),
        ("model.encoder_layers", m.encoder_layers.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.latent_dim", m.latent_dim.to_string()),
        ("model.max_seq_len", m.max_seq_len.to_string()),
        ("model.injection", m.injection.to_string()),
        ("model.init_std", m.init_std.to_string()),
        ("model.layer_norm_eps", m.layer_norm_eps.to_string()),
        ("model.seed", "0".into()),
        ("train.steps", t.total_steps.to_string()),
        ("train.cycle", t.cycle_length.to_string()),
        ("train.beta_floor", t.beta_floor.to_string()),
        ("train.freeze_steps", t.freeze_steps.to_string()),
        ("train.lr", t.learning_rate.to_string()),
        ("train.adam_beta1", t.adam_beta1.to_string()),
        ("train.adam_beta2", t.adam_beta2.to_string()),
        ("train.adam_eps", t.adam_eps.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.clip_norm", t.clip_norm.to_string()),
        ("train.seed", t.seed.to_string()),
        ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ("train.resume", "false".into()),
        ("sampler.top_k", s.top_k.to_string()),
        ("sampler.top_p", s.top_p.to_string()),
        ("sampler.temperature", s.temperature.to_string()),
        ("sampler.max_new_tokens", s.max_new_tokens.to_string()),
        ("sampler.seed", s.seed.to_string()),
        ("sampler.latent_mean", s.latent_mean.to_string()),
        ("generate.latent", "prior".into()),
        ("generate.samples", "1".into()),
        ("encode.which", "posterior-mean".into()),
        ("prompt", String::new()),
        ("prompt_a", String::new()),
        ("prompt_b", String::new()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; values are taken verbatim after trimming.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(normalize_key(k), v.trim().to_string());
    }
    Ok(out)
}

/// Splits `--key value` pairs. `--config` is returned separately.
pub fn parse_flags(args: &[String]) -> Result<(Option<PathBuf>, BTreeMap<String, String>)> {
    let mut config = None;
    let mut out = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {a:?}")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        let key = normalize_key(&key);
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            out.insert(key, value);
        }
    }
    Ok((config, out))
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
    pub mode: Mode,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub vocab_size: usize,
    pub schedule: TrainingSchedule,
    pub sampler: SamplerConfig,
    pub corpus: PathBuf,
    pub eval_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub generate_latent: String,
    pub generate_samples: usize,
    pub encode_which: LatentExport,
    pub prompt: Option<String>,
    pub prompt_a: Option<String>,
    pub prompt_b: Option<String>,
}

fn get<T: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
    let v = &m[k];
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {k} = {v:?}")))
}

fn opt_path(m: &BTreeMap<String, String>, k: &str) -> Option<PathBuf> {
    Some(&m[k]).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn opt_text(m: &BTreeMap<String, String>, k: &str) -> Option<String> {
    Some(&m[k]).filter(|v| !v.is_empty()).cloned()
}

impl RunConfig {
    /// Layers defaults, the config file, the output-dir environment
    /// variable and flags, in increasing precedence.
    pub fn resolve(file: Option<&Path>, flags: &BTreeMap<String, String>, env_out_dir: Option<String>) -> Result<Self> {
        fn layer(values: &mut BTreeMap<String, String>, src: &BTreeMap<String, String>, origin: &str) -> Result<()> {
            for (k, v) in src {
                if !values.contains_key(k) {
                    return Err(Error::Config(format!("unknown key {k:?} in {origin}")));
                }
                values.insert(k.clone(), v.clone());
            }
            Ok(())
        }
        let mut values = defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            layer(&mut values, &parse_config_text(&text)?, "config file")?;
        }
        if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
            values.insert("paths.out_dir".into(), dir);
        }
        layer(&mut values, flags, "flags")?;

        // a bare seed fills the per-component seeds that were not set explicitly
        let seed = values["seed"].clone();
        if !seed.is_empty() {
            seed.parse::<u64>()
                .map_err(|_| Error::Config(format!("cannot parse seed = {seed:?}")))?;
            for k in ["train.seed", "sampler.seed"] {
                if !flags.contains_key(k) {
                    values.insert(k.into(), seed.clone());
                }
            }
        }
        Self::from_values(values)
    }

    pub fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let m = &values;
        let vocab_size: usize = get(m, "vocab.size")?;
        let model = ModelConfig {
            d_model: get(m, "model.d")?,
            layers: get(m, "model.layers")?,
            encoder_layers: get(m, "model.encoder_layers")?,
            heads: get(m, "model.heads")?,
            latent_dim: get(m, "model.latent_dim")?,
            vocab_size,
            max_seq_len: get(m, "model.max_seq_len")?,
            injection: InjectionModes::parse(&m["model.injection"])?,
            layer_norm_eps: get(m, "model.layer_norm_eps")?,
            init_std: get(m, "model.init_std")?,
        };
        let schedule = TrainingSchedule {
            total_steps: get(m, "train.steps")?,
            cycle_length: get(m, "train.cycle")?,
            beta_floor: get(m, "train.beta_floor")?,
            freeze_steps: get(m, "train.freeze_steps")?,
            learning_rate: get(m, "train.lr")?,
            adam_beta1: get(m, "train.adam_beta1")?,
            adam_beta2: get(m, "train.adam_beta2")?,
            adam_eps: get(m, "train.adam_eps")?,
            batch_size: get(m, "train.batch_size")?,
            clip_norm: get(m, "train.clip_norm")?,
            seed: get(m, "train.seed")?,
            checkpoint_every: get(m, "train.checkpoint_every")?,
        };
        let sampler = SamplerConfig {
            top_k: get(m, "sampler.top_k")?,
            top_p: get(m, "sampler.top_p")?,
            temperature: get(m, "sampler.temperature")?,
            max_new_tokens: get(m, "sampler.max_new_tokens")?,
            seed: get(m, "sampler.seed")?,
            latent_mean: get(m, "sampler.latent_mean")?,
        };
        let encode_which = match m["encode.which"].as_str() {
            "prior-mean" | "prior_mean" => LatentExport::PriorMean,
            "posterior-mean" | "posterior_mean" => LatentExport::PosteriorMean,
            other => {
                return Err(Error::Config(format!(
                    "encode.which {other:?} is not prior-mean or posterior-mean"
                )))
            }
        };
        let generate_latent = m["generate.latent"].clone();
        if !["prior", "posterior", "none"].contains(&generate_latent.as_str()) {
            return Err(Error::Config(format!(
                "generate.latent {generate_latent:?} is not prior, posterior or none"
            )));
        }
        Ok(RunConfig {
            mode: m["mode"].parse()?,
            model,
            model_seed: get(m, "model.seed")?,
            vocab_size,
            schedule,
            sampler,
            corpus: PathBuf::from(&m["paths.corpus"]),
            eval_corpus: opt_path(m, "paths.eval_corpus"),
            vocab: opt_path(m, "paths.vocab"),
            checkpoint: opt_path(m, "paths.checkpoint"),
            out_dir: PathBuf::from(&m["paths.out_dir"]),
            resume: get(m, "train.resume")?,
            generate_latent,
            generate_samples: get(m, "generate.samples")?,
            encode_which,
            prompt: opt_text(m, "prompt"),
            prompt_a: opt_text(m, "prompt_a"),
            prompt_b: opt_text(m, "prompt_b"),
            values,
        })
    }

    /// The resolved configuration in the same format the parser reads.
    pub fn to_config_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint"))
    }
}
