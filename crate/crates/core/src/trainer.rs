//! Optimization loop: cyclic β annealing, parameter freezing, Adam with
//! global-norm clipping, seeded batching and CSV metric logging.

use std::io::Write;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::latent::standard_noise;
use crate::model::{loss_graph, Cvae};
use crate::tensor::{Graph, ParameterSet, Scalar, Tensor};
use crate::transformer::is_injection_param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub total_steps: u64,
    /// Annealing cycle length C. Zero means `total_steps / 4`.
    pub cycle_length: u64,
    /// β used during the first half of every cycle.
    pub beta_floor: f64,
    pub freeze_steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            total_steps: 5000,
            cycle_length: 0,
            beta_floor: 0.0,
            freeze_steps: 0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn cycle(&self) -> u64 {
        if self.cycle_length > 0 {
            self.cycle_length
        } else {
            (self.total_steps / 4).max(1)
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps == 0 {
            return fail("total_steps must be positive");
        }
        if self.cycle() > self.total_steps {
            return fail("cycle_length must not exceed total_steps");
        }
        if !(0.0..=1.0).contains(&self.beta_floor) {
            return fail("beta_floor must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return fail("learning_rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return fail("clip_norm must be nonnegative");
        }
        Ok(())
    }
}

/// Cyclic KL weight. With `r = (step mod C) / C`: the floor for `r < 1/2`,
/// a linear ramp `4(r − 1/2)` for `r < 3/4`, and 1 afterwards.
pub fn beta_at(step: u64, schedule: &TrainingSchedule) -> f64 {
    let c = schedule.cycle();
    let t = step % c;
    // compare in integers so the breakpoints are exact
    if 2 * t < c {
        schedule.beta_floor
    } else if 4 * t < 3 * c {
        (4.0 * (t as f64 / c as f64 - 0.5)).max(schedule.beta_floor)
    } else {
        1.0
    }
}

/// Parameters that would come from a pretrained language model: embeddings,
/// decoder blocks and the encoder copies of them.
pub fn is_pretrained_analog(name: &str) -> bool {
    if is_injection_param(name) {
        return false;
    }
    name == "wte"
        || name == "wpe"
        || name.starts_with("dec.")
        || (name.starts_with("enc.") && !name.starts_with("enc.ln_f"))
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter step counts, so a parameter thawed late starts
/// its own bias correction from one. Moments are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: IndexMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            slots: IndexMap::new(),
        }
    }

    pub fn from_schedule(s: &TrainingSchedule) -> Self {
        Self::new(s.learning_rate, s.adam_beta1, s.adam_beta2, s.adam_eps)
    }

    /// Applies one update to `name` with gradient `grad` (already clipped).
    pub fn update<T: Scalar>(&mut self, name: &str, param: &mut Tensor<T>, grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape {
                op: "adam",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            t: 0,
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t as i32);
        let c2 = 1.0 - self.beta2.powi(slot.t as i32);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let step = self.lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + self.eps);
            *p = T::lit(p.widen() - step);
        }
        Ok(())
    }

    /// Binary state: u32 slot count, then per slot u32 name length, name
    /// bytes, u64 step, u32 length, `m` and `v` as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for (name, s) in &self.slots {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&s.t.to_le_bytes());
            out.extend_from_slice(&(s.m.len() as u32).to_le_bytes());
            for x in s.m.iter().chain(&s.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = ByteReader { bytes, pos: 0 };
        let n = r.u32()?;
        let mut slots = IndexMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Data("optimizer state: bad name".into()))?;
            let t = r.u64()?;
            let len = r.u32()? as usize;
            let mut read = || (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
            let m = read()?;
            let v = read()?;
            slots.insert(name, AdamSlot { t, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("optimizer state: trailing bytes".into()));
        }
        self.slots = slots;
        Ok(())
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("binary payload truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Batch mean of reconstruction + β·kl.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scored target tokens in the batch.
    pub tokens: usize,
}

pub const METRICS_HEADER: &str = "step,loss,recon,kl,beta,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.reconstruction, self.kl, self.beta, self.grad_norm
        )
    }
}

/// Gradient of the batch-mean loss for one step, plus metrics.
pub fn batch_gradients<T: Scalar>(
    model: &Cvae<T>,
    batch: &[&Example],
    noises: &[Vec<f64>],
    beta: f64,
    step: u64,
) -> Result<(IndexMap<String, Tensor<T>>, StepMetrics)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut total: Option<IndexMap<String, Tensor<T>>> = None;
    let mut metrics = StepMetrics {
        step,
        loss: 0.0,
        reconstruction: 0.0,
        kl: 0.0,
        beta,
        grad_norm: 0.0,
        tokens: 0,
    };
    for (i, (ex, noise)) in batch.iter().zip(noises).enumerate() {
        let abort = |detail: String| Error::NumericalAbort {
            step,
            batch_index: i,
            detail,
        };
        let mut g = Graph::new();
        let b = model.params.bind(&mut g)?;
        let noise: Vec<T> = noise.iter().map(|&x| T::lit(x)).collect();
        let vars = loss_graph(model.mode, &mut g, &b, &model.config, ex, &noise, beta).map_err(|e| match e {
            Error::NonFinite { op } => abort(format!("non-finite value in {op}")),
            other => other,
        })?;
        let parts = vars.breakdown(&g, beta);
        let loss = parts.training_loss();
        if !loss.is_finite() {
            return Err(abort(format!("loss {loss}")));
        }
        metrics.loss += loss / n;
        metrics.reconstruction += parts.reconstruction_nats / n;
        metrics.kl += parts.kl_nats / n;
        metrics.tokens += parts.token_count;

        let scaled = g.scale(vars.loss, 1.0 / n)?;
        let grads = g.backward(scaled)?.for_params(&g);
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (name, gt) in grads {
                    let dst = acc.get_mut(&name).expect("same parameter set");
                    for (d, s) in dst.data_mut().iter_mut().zip(gt.data()) {
                        *d += *s;
                    }
                }
            }
        }
    }
    let grads = total.expect("nonempty batch");
    for (name, t) in &grads {
        if !t.all_finite() {
            return Err(Error::NumericalAbort {
                step,
                batch_index: 0,
                detail: format!("non-finite gradient for {name}"),
            });
        }
    }
    Ok((grads, metrics))
}

/// Owns the model, optimizer and step counter for one run.
pub struct Trainer {
    pub model: Cvae<f32>,
    pub schedule: TrainingSchedule,
    pub optimizer: Adam,
    pub step: u64,
    examples: Vec<Example>,
}

impl Trainer {
    pub fn new(mut model: Cvae<f32>, schedule: TrainingSchedule, examples: Vec<Example>) -> Result<Self> {
        schedule.validate()?;
        if examples.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        if schedule.freeze_steps > 0 {
            model.params.set_frozen(is_pretrained_analog, schedule.freeze_steps)?;
        }
        Ok(Trainer {
            optimizer: Adam::from_schedule(&schedule),
            model,
            schedule,
            step: 0,
            examples,
        })
    }

    /// Continues a run from a saved model, optimizer state and step.
    pub fn resume(
        model: Cvae<f32>,
        schedule: TrainingSchedule,
        examples: Vec<Example>,
        optimizer_state: Option<&[u8]>,
        step: u64,
    ) -> Result<Self> {
        let mut t = Self::new(model, schedule, examples)?;
        if let Some(bytes) = optimizer_state {
            t.optimizer.load_state(bytes)?;
        }
        t.step = step;
        Ok(t)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Example indices for `step`: consecutive slices of a per-epoch
    /// permutation seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.examples.len();
        let bs = self.schedule.batch_size;
        let start = step as usize * bs;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + bs)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed);
                    rng.set_stream(1 + epoch as u64);
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[pos % n]
            })
            .collect()
    }

    /// Posterior noise for each batch slot of `step`.
    pub fn step_noise(&self, step: u64, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed);
        rng.set_stream(u64::MAX - step);
        (0..count)
            .map(|_| standard_noise(&mut rng, self.model.config.latent_dim))
            .collect()
    }

    /// One step on the scheduled batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<Example> = idx.iter().map(|&i| self.examples[i].clone()).collect();
        self.train_on(&batch)
    }

    /// One forward/backward/update on `batch`. Frozen parameters are
    /// excluded from the gradient norm and left untouched.
    pub fn train_on(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let step = self.step;
        let beta = beta_at(step, &self.schedule);
        let noises = self.step_noise(step, batch.len());
        let refs: Vec<&Example> = batch.iter().collect();
        let (grads, mut metrics) = batch_gradients(&self.model, &refs, &noises, beta, step)?;

        let params: &ParameterSet<f32> = &self.model.params;
        let active: Vec<&String> = grads.keys().filter(|n| !params.is_frozen(n, step)).collect();
        let norm = active
            .iter()
            .flat_map(|n| grads[n.as_str()].data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        metrics.grad_norm = norm;
        let clip = self.schedule.clip_norm;
        let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        for name in active {
            let g: Vec<f64> = grads[name.as_str()].data().iter().map(|&x| x as f64 * factor).collect();
            let p = self.model.params.get_mut(name)?;
            self.optimizer.update(name, p, &g)?;
            if !p.all_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    batch_index: 0,
                    detail: format!("parameter {name} became non-finite"),
                });
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `total_steps`, writing one CSV row per step to `log`.
    /// `on_step` sees every step's metrics and the trainer, e.g. to write
    /// periodic checkpoints.
    pub fn run<W: Write>(
        &mut self,
        log: &mut W,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let io = |e| Error::io("metrics log", e);
        if self.step == 0 {
            writeln!(log, "{METRICS_HEADER}").map_err(io)?;
        }
        let mut all = Vec::new();
        while self.step < self.schedule.total_steps {
            let m = self.train_step()?;
            writeln!(log, "{}", m.csv_row()).map_err(io)?;
            on_step(self, &m)?;
            all.push(m);
        }
        log.flush().map_err(io)?;
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_example, PromptStoryPair, SEPARATOR};
    use crate::model::Mode;
    use crate::transformer::{InjectionModes, ModelConfig};

    fn schedule(c: u64) -> TrainingSchedule {
        TrainingSchedule {
            total_steps: 4 * c,
            cycle_length: c,
            ..TrainingSchedule::default()
        }
    }

    #[test]
    fn beta_breakpoints() {
        let s = schedule(80);
        assert_eq!(beta_at(0, &s), 0.0);
        assert_eq!(beta_at(40, &s), 0.0);
        assert_eq!(beta_at(50, &s), 0.5);
        assert_eq!(beta_at(60, &s), 1.0);
        assert_eq!(beta_at(79, &s), 1.0);
        assert_eq!(beta_at(80, &s), 0.0);
        assert_eq!(beta_at(130, &s), 0.5);
    }

    #[test]
    fn beta_floor_and_default_cycle() {
        let s = TrainingSchedule {
            total_steps: 400,
            beta_floor: 0.1,
            ..TrainingSchedule::default()
        };
        assert_eq!(s.cycle(), 100);
        assert_eq!(beta_at(10, &s), 0.1);
        assert_eq!(beta_at(51, &s), 0.1);
        assert_eq!(beta_at(75, &s), 1.0);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // minimize (w - 3)^2 from w = 0
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut w = Tensor::<f64>::scalar(0.0);
        let (mut rw, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (w.item() - 3.0);
            opt.update("w", &mut w, &[g]).unwrap();
            let rg = 2.0 * (rw - 3.0);
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w.item() - rw).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_state_round_trip() {
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8);
        let mut w = Tensor::<f32>::vector(vec![1.0, 2.0]).unwrap();
        opt.update("w", &mut w, &[0.5, -0.25]).unwrap();
        let bytes = opt.to_bytes();
        let mut back = Adam::new(0.01, 0.9, 0.999, 1e-8);
        back.load_state(&bytes).unwrap();
        assert_eq!(back, opt);
        assert!(back.load_state(&bytes[..bytes.len() - 1]).is_err());
    }

    fn toy_trainer(freeze: u64) -> Trainer {
        let cfg = ModelConfig {
            d_model: 8,
            layers: 2,
            encoder_layers: 1,
            heads: 2,
            latent_dim: 4,
            vocab_size: 260,
            max_seq_len: 16,
            injection: InjectionModes::PSA,
            ..ModelConfig::default()
        };
        let model = Cvae::init(cfg, Mode::Cvae, 1).unwrap();
        let examples = vec![
            build_example(&PromptStoryPair::from_tokens(vec![1, 2], vec![3, 4, 5]), SEPARATOR, 16).unwrap(),
            build_example(&PromptStoryPair::from_tokens(vec![6], vec![7, 8]), SEPARATOR, 16).unwrap(),
        ];
        let s = TrainingSchedule {
            total_steps: 8,
            batch_size: 2,
            freeze_steps: freeze,
            seed: 3,
            ..TrainingSchedule::default()
        };
        Trainer::new(model, s, examples).unwrap()
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut t = toy_trainer(2);
        let before = t.model.params.clone();
        t.train_step().unwrap();
        for (name, p) in t.model.params.iter() {
            if is_pretrained_analog(name) {
                assert_eq!(p.data(), before.get(name).unwrap().data(), "{name}");
            }
        }
        // β is 0 at step 0, so the prior head has no gradient yet
        for name in ["pool.query", "posterior.mu.w", "enc.ln_f.g", "inject.psa.w"] {
            assert_ne!(
                t.model.params.get(name).unwrap().data(),
                before.get(name).unwrap().data(),
                "{name}"
            );
        }
        t.train_step().unwrap();
        let mid = t.model.params.clone();
        t.train_step().unwrap();
        assert_ne!(
            t.model.params.get("wte").unwrap().data(),
            mid.get("wte").unwrap().data()
        );
    }

    #[test]
    fn same_seed_same_metrics() {
        let mut a = toy_trainer(0);
        let mut b = toy_trainer(0);
        let ma = a.train_step().unwrap();
        let mb = b.train_step().unwrap();
        assert_eq!(ma, mb);
        assert!(ma.grad_norm > 0.0);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let t = toy_trainer(0);
        let mut seen = t.batch_indices(0);
        seen.sort();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let mut t = toy_trainer(0);
        let mut log = Vec::new();
        let ms = t.run(&mut log, |_, _| Ok(())).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 9);
        assert_eq!(ms.len(), 8);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainingSchedule::default().validate().is_ok());
        let bad = TrainingSchedule {
            cycle_length: 10_000,
            total_steps: 10,
            ..TrainingSchedule::default()
        };
        assert!(bad.validate().is_err());
    }
}
