//! Command-line front end. Every command resolves its configuration, echoes
//! it to the output directory, then does its work.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_flags, RunConfig, OUTPUT_DIR_ENV};
use crate::corpus::{
    build_example, build_text_example, encode_corpus, load_jsonl, Example, PromptStoryPair, Record, Vocabulary,
    SEPARATOR,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_latents};
use crate::model::{Cvae, Mode};
use crate::sampler::{generate, GenerationRecord, LatentSource, SamplerConfig};
use crate::selftest;
use crate::trainer::Trainer;

pub const USAGE: &str = "\
usage: story-cvae <command> [--config FILE] [--key value ...]

commands:
  vocab     fit a byte-level BPE vocabulary on the corpus
  train     train a model and write metrics and a checkpoint
  generate  sample stories for --prompt or every corpus prompt
  control   decode --prompt-a with the latent from --prompt-b
  encode    export latent means as TSV
  eval      perplexity and ROUGE report
  selftest  run the built-in gradient and oracle checks

keys mirror the config file, e.g. --model.d 32 --sampler.top-p 0.9 --seed 7";

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Runs one command and returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some((command, rest)) = args.split_first() else {
        eprintln!("{USAGE}");
        return 1;
    };
    if matches!(command.as_str(), "-h" | "--help" | "help") {
        println!("{USAGE}");
        return 0;
    }
    match execute(command, rest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &str, rest: &[String]) -> Result<()> {
    const COMMANDS: [&str; 7] = ["vocab", "train", "generate", "control", "encode", "eval", "selftest"];
    if !COMMANDS.contains(&command) {
        return Err(Error::Config(format!("unknown command {command:?}\n{USAGE}")));
    }
    let (file, flags) = parse_flags(rest)?;
    let cfg = RunConfig::resolve(file.as_deref(), &flags, std::env::var(OUTPUT_DIR_ENV).ok())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_config_text().as_bytes())?;
    match command {
        "vocab" => cmd_vocab(&cfg),
        "train" => cmd_train(&cfg),
        "generate" => cmd_generate(&cfg),
        "control" => cmd_control(&cfg),
        "encode" => cmd_encode(&cfg),
        "eval" => cmd_eval(&cfg),
        _ => cmd_selftest(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corpus_texts(records: &[Record]) -> Vec<&str> {
    records
        .iter()
        .flat_map(|r| [r.prompt.as_str(), r.story.as_str()])
        .collect()
}

fn fit_vocab(cfg: &RunConfig, records: &[Record]) -> Result<Vocabulary> {
    Vocabulary::fit(&corpus_texts(records), cfg.vocab_size)
}

fn cmd_vocab(cfg: &RunConfig) -> Result<()> {
    let records = load_jsonl(&cfg.corpus)?;
    let vocab = fit_vocab(cfg, &records)?;
    let path = cfg.vocab.clone().unwrap_or_else(|| cfg.out_dir.join(VOCAB_FILE));
    vocab.save(&path)?;
    println!("wrote {} tokens to {}", vocab.size(), path.display());
    Ok(())
}

fn training_examples(mode: Mode, pairs: &[PromptStoryPair], max_len: usize) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| match mode {
            Mode::Cvae => build_example(p, SEPARATOR, max_len),
            Mode::Vae => build_text_example(&p.story_tokens, SEPARATOR, max_len),
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let records = load_jsonl(&cfg.corpus)?;
    let ckpt_dir = cfg.checkpoint_dir();
    let resuming = cfg.resume && ckpt_dir.join(crate::checkpoint::MANIFEST_FILE).exists();

    let vocab = match (&cfg.vocab, resuming) {
        (Some(p), _) => Vocabulary::load(p)?,
        (None, true) => Vocabulary::load(&ckpt_dir.join(VOCAB_FILE))?,
        (None, false) => fit_vocab(cfg, &records)?,
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    let pairs = encode_corpus(&records, &vocab, model_cfg.max_seq_len)?;
    let examples = training_examples(cfg.mode, &pairs, model_cfg.max_seq_len)?;

    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut trainer = if resuming {
        let ck = Checkpoint::load(&ckpt_dir)?;
        if ck.model.config != model_cfg || ck.model.mode != cfg.mode {
            return Err(Error::Config("checkpoint does not match the configured model".into()));
        }
        Trainer::resume(
            ck.model,
            cfg.schedule.clone(),
            examples,
            ck.optimizer.as_deref(),
            ck.step,
        )?
    } else {
        let model = Cvae::init(model_cfg, cfg.mode, cfg.model_seed)?;
        Trainer::new(model, cfg.schedule.clone(), examples)?
    };
    let log_file = if resuming {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(log_file);

    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    vocab.save(&ckpt_dir.join(VOCAB_FILE))?;
    let save = |t: &Trainer| -> Result<()> {
        Checkpoint {
            model: t.model.clone(),
            step: t.step,
            vocabulary: Some(VOCAB_FILE.into()),
            schedule: Some(t.schedule.clone()),
            optimizer: Some(t.optimizer.to_bytes()),
        }
        .save(&ckpt_dir)
    };
    let every = cfg.schedule.checkpoint_every;
    let total = cfg.schedule.total_steps;
    let report = (total / 10).max(1);
    let metrics = trainer.run(&mut log, |t, m| {
        if m.step % report == 0 || m.step + 1 == total {
            eprintln!(
                "step {:>6}  loss {:.4}  recon {:.4}  kl {:.4}  beta {:.3}",
                m.step, m.loss, m.reconstruction, m.kl, m.beta
            );
        }
        if every > 0 && t.step % every == 0 {
            save(t)?;
        }
        Ok(())
    })?;
    save(&trainer)?;
    if let Some(last) = metrics.last() {
        println!("trained to step {}; final loss {:.4}", trainer.step, last.loss);
    }
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(())
}

struct Loaded {
    model: Cvae<f32>,
    vocab: Vocabulary,
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let dir = cfg.checkpoint_dir();
    let ck = Checkpoint::load(&dir)?;
    let vocab_path: PathBuf = match (&cfg.vocab, &ck.vocabulary) {
        (Some(p), _) => p.clone(),
        (None, Some(name)) => dir.join(name),
        (None, None) => return Err(Error::Config("no vocabulary: set paths.vocab".into())),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.size() != ck.model.config.vocab_size {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            ck.model.config.vocab_size
        )));
    }
    Ok(Loaded { model: ck.model, vocab })
}

fn eval_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    load_jsonl(cfg.eval_corpus.as_ref().unwrap_or(&cfg.corpus))
}

fn encode_prompt(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    let t = vocab.encode(text);
    if t.is_empty() {
        return Err(Error::Config("prompt is empty".into()));
    }
    Ok(t)
}

fn write_jsonl(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let Loaded { model, vocab } = load_model(cfg)?;
    let inputs: Vec<(String, Option<String>)> = match &cfg.prompt {
        Some(p) => vec![(p.clone(), None)],
        None => eval_records(cfg)?
            .into_iter()
            .map(|r| (r.prompt, Some(r.story)))
            .collect(),
    };
    let mut out = Vec::new();
    for (prompt, story) in &inputs {
        let x = encode_prompt(&vocab, prompt)?;
        let source = match cfg.generate_latent.as_str() {
            "none" => LatentSource::None,
            "posterior" => {
                let story = story
                    .as_ref()
                    .ok_or_else(|| Error::Config("posterior latents need corpus stories, not --prompt".into()))?;
                LatentSource::Posterior(vocab.encode(story))
            }
            _ => LatentSource::Prior,
        };
        for _ in 0..cfg.generate_samples {
            let seed = cfg.sampler.seed.wrapping_add(out.len() as u64);
            let sc = SamplerConfig {
                seed,
                ..cfg.sampler.clone()
            };
            let g = generate(&model, &x, &source, &sc)?;
            out.push(GenerationRecord {
                prompt: prompt.clone(),
                story: vocab.decode(&g.tokens)?,
                latent_source: source.label().into(),
                seed,
            });
        }
    }
    let path = cfg.out_dir.join("generations.jsonl");
    write_jsonl(&path, &out)?;
    println!("wrote {} stories to {}", out.len(), path.display());
    Ok(())
}

fn cmd_control(cfg: &RunConfig) -> Result<()> {
    let (Some(a), Some(b)) = (&cfg.prompt_a, &cfg.prompt_b) else {
        return Err(Error::Config("control needs --prompt-a and --prompt-b".into()));
    };
    let Loaded { model, vocab } = load_model(cfg)?;
    let (x1, x2) = (encode_prompt(&vocab, a)?, encode_prompt(&vocab, b)?);
    let mut out = Vec::new();
    for i in 0..cfg.generate_samples {
        let seed = cfg.sampler.seed.wrapping_add(i as u64);
        let sc = SamplerConfig {
            seed,
            ..cfg.sampler.clone()
        };
        let g = crate::sampler::control_generate(&model, &x1, &x2, &sc)?;
        out.push(GenerationRecord {
            prompt: a.clone(),
            story: vocab.decode(&g.tokens)?,
            latent_source: format!("prior-of: {b}"),
            seed,
        });
    }
    let path = cfg.out_dir.join("control.jsonl");
    write_jsonl(&path, &out)?;
    println!("wrote {} stories to {}", out.len(), path.display());
    Ok(())
}

fn cmd_encode(cfg: &RunConfig) -> Result<()> {
    let Loaded { model, vocab } = load_model(cfg)?;
    let pairs = encode_corpus(&eval_records(cfg)?, &vocab, model.config.max_seq_len)?;
    let tsv = export_latents(&model, &pairs, cfg.encode_which)?;
    let path = cfg.out_dir.join("latents.tsv");
    write_file(&path, tsv.as_bytes())?;
    println!("wrote {} rows to {}", pairs.len(), path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let Loaded { model, vocab } = load_model(cfg)?;
    let pairs = encode_corpus(&eval_records(cfg)?, &vocab, model.config.max_seq_len)?;
    let (report, stories) = evaluate(&model, &vocab, &pairs, &cfg.sampler)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&cfg.out_dir.join("eval_report.json"), json.as_bytes())?;
    let records: Vec<GenerationRecord> = pairs
        .iter()
        .zip(stories)
        .enumerate()
        .map(|(i, (p, story))| GenerationRecord {
            prompt: p.prompt_text.clone(),
            story,
            latent_source: LatentSource::Prior.label().into(),
            seed: cfg.sampler.seed.wrapping_add(i as u64),
        })
        .collect();
    write_jsonl(&cfg.out_dir.join("eval_stories.jsonl"), &records)?;
    println!(
        "ppl subword {:.3}  word {:.3}  rouge-1 f1 {:.3}  rouge-2 f1 {:.3}  rouge-L f1 {:.3}",
        report.ppl_subword, report.ppl_word, report.rouge1.f1, report.rouge2.f1, report.rouge_l.f1
    );
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let results = selftest::run_all();
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        writeln!(stdout, "{tag} {}: {}", r.name, r.detail).map_err(|e| Error::io("stdout", e))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::SelfTestFailed { failed });
    }
    Ok(())
}
