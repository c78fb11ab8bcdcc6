//! Training loops: supervised fine-tuning, standard distillation, on-policy
//! distillation on student-generated responses, and online distillation with
//! a co-trained teacher adapter.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterSet;
use crate::data::{BatchSampler, Example, TokenBatch};
use crate::error::{ensure, Error, Result};
use crate::model::{generate_batch, DecodeConfig, GradMode, TransformerLm};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::objectives::{self, DistillConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    StandardKd,
    OnPolicyKd,
    Okd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::StandardKd => "standard_kd",
            Method::OnPolicyKd => "on_policy_kd",
            Method::Okd => "okd",
        }
    }
}

fn default_warmup() -> f64 {
    0.03
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

fn default_sgo_tokens() -> usize {
    32
}

fn default_sgo_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Probability that a step trains on student-generated responses.
    #[serde(default)]
    pub sgo_fraction: f64,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Adapter learning rate for online distillation; defaults to
    /// `learning_rate`.
    #[serde(default)]
    pub teacher_learning_rate: Option<f64>,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_sgo_tokens")]
    pub sgo_max_new_tokens: usize,
    #[serde(default = "default_sgo_temperature")]
    pub sgo_temperature: f64,
}

impl TrainConfig {
    pub fn new(method: Method, steps: usize, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            method,
            steps,
            learning_rate,
            batch_size,
            warmup_fraction: default_warmup(),
            seed,
            sgo_fraction: 0.0,
            distill: DistillConfig::default(),
            teacher_learning_rate: None,
            grad_clip: default_clip(),
            sgo_max_new_tokens: default_sgo_tokens(),
            sgo_temperature: default_sgo_temperature(),
        }
    }

    /// All violated constraints, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.steps == 0 {
            p.push("steps must be positive".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            p.push(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if let Some(t) = self.teacher_learning_rate {
            if !(t.is_finite() && t >= 0.0) {
                p.push(format!("teacher_learning_rate must be non-negative, got {t}"));
            }
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            p.push(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.sgo_fraction) {
            p.push(format!("sgo_fraction must lie in [0, 1], got {}", self.sgo_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                p.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.sgo_temperature.is_finite() && self.sgo_temperature > 0.0) {
            p.push(format!("sgo_temperature must be positive, got {}", self.sgo_temperature));
        }
        if let Err(e) = self.distill.validate() {
            p.push(e.to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }
}

/// Seed for one named purpose (initialisation, shuffling, sampling, ...)
/// derived from a run seed, so streams never share state.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{purpose}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Number of warmup steps: `ceil(fraction * total)`, with products within
/// 1e-9 of an integer treated as that integer.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    let x = warmup_fraction * total_steps as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> Result<f64> {
    ensure!(
        step <= total_steps,
        "step {step} is past the schedule end {total_steps}"
    );
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        return Ok(peak_lr * step as f64 / w as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(peak_lr * (total_steps - step) as f64 / (total_steps - w) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one group of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}


impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }
}

/// One bias-corrected adaptive-moment update of `params` in place.
///
/// Moments are allocated on the first call; later calls must present the
/// same tensor sizes.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    ensure!(
        params.len() == grads.len(),
        "{} parameter tensors but {} gradients",
        params.len(),
        grads.len()
    );
    for (p, g) in params.iter().zip(grads) {
        ensure!(
            p.len() == g.len(),
            "gradient of length {} for a parameter of length {}",
            g.len(),
            p.len()
        );
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    ensure!(
        state.m.len() == params.len() && state.m.iter().zip(params.iter()).all(|(m, p)| m.len() == p.len()),
        "optimizer state does not match the parameter shapes"
    );
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.iter()).enumerate() {
            let gj = gj.to_f64();
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            if update != 0.0 {
                *x = T::from_f64(x.to_f64() - update);
            }
        }
    }
    Ok(())
}

/// Global L2 norm of `grads`; rescales them to `clip` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], clip: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt();
    if let Some(c) = clip {
        if norm > c {
            let f = T::from_f64(c / norm);
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= f);
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub method: Method,
    /// The loss that drives the student update.
    pub loss: f64,
    /// Online teacher loss, for online distillation only.
    pub teacher_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub teacher_grad_norm: Option<f64>,
    /// Whether the step trained on student-generated responses.
    pub sgo: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
}

impl StepLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn wall_ms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.wall_ms).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// Gradients of `vars` as owned buffers, in order.
fn collect_grads<T: Real>(grads: &crate::numcore::Gradients<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| grads.get(v).expect("leaf requested gradients").to_vec())
        .collect()
}

fn apply<T: Real>(
    tensors: Vec<&mut Tensor<T>>,
    mut grads: Vec<Vec<T>>,
    state: &mut OptimizerState,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let norm = clip_global_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Err(Error::NumericDomain("gradient norm is not finite".into()));
    }
    let mut tensors = tensors;
    let views: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(&mut tensors, &views, state, lr)?;
    Ok(norm)
}

fn check_data<T: Real>(models: &[&TransformerLm<T>], data: &[Example]) -> Result<()> {
    ensure!(!data.is_empty(), "no training examples");
    let vocab = models[0].config().vocab_size;
    for m in models {
        ensure!(
            m.config().vocab_size == vocab,
            "vocabulary mismatch: {} vs {}",
            m.config().vocab_size,
            vocab
        );
    }
    let longest = data.iter().map(Example::len).max().unwrap_or(0);
    let limit = models.iter().map(|m| m.config().max_seq_len).min().unwrap();
    ensure!(
        longest <= limit,
        "example of {longest} tokens exceeds the model context of {limit}"
    );
    ensure!(
        data.iter().flat_map(|e| e.prompt.iter().chain(&e.response)).all(|&t| t < vocab),
        "example token outside the vocabulary of {vocab}"
    );
    Ok(())
}

fn expect_method(cfg: &TrainConfig, method: Method) -> Result<()> {
    cfg.validate()?;
    ensure!(
        cfg.method == method,
        "config method {} used with the {} trainer",
        cfg.method.as_str(),
        method.as_str()
    );
    Ok(())
}

fn sampler(data: &[Example], cfg: &TrainConfig) -> Result<BatchSampler> {
    BatchSampler::new(data.to_vec(), derive_seed(cfg.seed, "shuffle"))
}

fn teacher_logits<T: Real>(
    teacher: &TransformerLm<T>,
    adapters: Option<&AdapterSet<T>>,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let fp = teacher.forward(&mut g, &batch.token_ids, batch.batch, batch.seq, adapters, GradMode::NONE)?;
    Ok(g.tensor(fp.logits))
}

/// Student update on one batch against fixed teacher logits (or the
/// reference tokens when `teacher` is `None`). Returns (loss, grad norm).
fn student_update<T: Real>(
    student: &mut TransformerLm<T>,
    teacher: Option<Tensor<T>>,
    batch: &TokenBatch,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(f64, f64)> {
    let (targets, weights) = batch.prediction_targets();
    let mut g = Graph::new();
    let fp = student.forward(&mut g, &batch.token_ids, batch.batch, batch.seq, None, GradMode::BASE)?;
    let loss = match teacher {
        None => objectives::mle(&mut g, fp.logits, &targets, &weights)?,
        Some(t) => {
            let t = g.constant(t);
            objectives::distill(&mut g, t, fp.logits, &cfg.distill, &weights)?
        }
    };
    let value = g.scalar(loss)?;
    let grads = g.backward(loss)?;
    let grads = collect_grads(&grads, &fp.params);
    let norm = apply(student.params_mut().tensors_mut().collect(), grads, state, lr, cfg.grad_clip)?;
    Ok((value, norm))
}

fn record(step: usize, method: Method, loss: f64, lr: f64, grad_norm: f64, sgo: bool, started: Instant) -> StepRecord {
    StepRecord {
        step,
        method,
        loss,
        teacher_loss: None,
        lr,
        grad_norm,
        teacher_grad_norm: None,
        sgo,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Maximum-likelihood training on the reference responses.
pub fn train_sft<T: Real>(model: &mut TransformerLm<T>, data: &[Example], cfg: &TrainConfig) -> Result<StepLog> {
    expect_method(cfg, Method::Sft)?;
    check_data(&[model], data)?;
    let mut sampler = sampler(data, cfg)?;
    let mut state = OptimizerState::default();
    let mut log = StepLog::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)?;
        let batch = sampler.next_batch(cfg.batch_size)?;
        let (loss, norm) = student_update(model, None, &batch, cfg, &mut state, lr)?;
        log.records.push(record(step, Method::Sft, loss, lr, norm, false, started));
    }
    Ok(log)
}

/// Distillation from a frozen teacher on the reference responses.
pub fn train_standard_kd<T: Real>(
    teacher: &TransformerLm<T>,
    student: &mut TransformerLm<T>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    expect_method(cfg, Method::StandardKd)?;
    check_data(&[teacher, student], data)?;
    let mut sampler = sampler(data, cfg)?;
    let mut state = OptimizerState::default();
    let mut log = StepLog::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)?;
        let batch = sampler.next_batch(cfg.batch_size)?;
        let t = teacher_logits(teacher, None, &batch)?;
        let (loss, norm) = student_update(student, Some(t), &batch, cfg, &mut state, lr)?;
        log.records.push(record(step, Method::StandardKd, loss, lr, norm, false, started));
    }
    Ok(log)
}

/// Replaces every response in `examples` with a sampled student
/// continuation of its prompt.
pub fn student_generated<T: Real, R: Rng>(
    student: &TransformerLm<T>,
    examples: &[&Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Example>> {
    let prompts: Vec<&[usize]> = examples.iter().map(|e| e.prompt.as_slice()).collect();
    let decode = DecodeConfig::sample(cfg.sgo_max_new_tokens.max(1), cfg.sgo_temperature);
    let outs = generate_batch(student, None, &prompts, &decode, rng)?;
    Ok(examples
        .iter()
        .zip(outs)
        .map(|(e, response)| Example {
            prompt: e.prompt.clone(),
            response,
        })
        .collect())
}

/// Distillation where, with probability `sgo_fraction` per step, the batch's
/// responses are sampled from the current student before the teacher scores
/// them.
pub fn train_on_policy_kd<T: Real>(
    teacher: &TransformerLm<T>,
    student: &mut TransformerLm<T>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    expect_method(cfg, Method::OnPolicyKd)?;
    check_data(&[teacher, student], data)?;
    let mut sampler = sampler(data, cfg)?;
    let mut coin = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sgo-coin"));
    let mut gen_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sgo-sample"));
    let mut state = OptimizerState::default();
    let mut log = StepLog::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)?;
        let examples = sampler.next_examples(cfg.batch_size);
        let sgo = cfg.sgo_fraction > 0.0 && coin.random::<f64>() < cfg.sgo_fraction;
        let batch = if sgo {
            let generated = student_generated(student, &examples, cfg, &mut gen_rng)?;
            TokenBatch::from_examples(&generated.iter().collect::<Vec<_>>())?
        } else {
            TokenBatch::from_examples(&examples)?
        };
        let t = teacher_logits(teacher, None, &batch)?;
        let (loss, norm) = student_update(student, Some(t), &batch, cfg, &mut state, lr)?;
        log.records.push(record(step, Method::OnPolicyKd, loss, lr, norm, sgo, started));
    }
    Ok(log)
}

/// Online distillation: per step one forward of the adapted teacher and the
/// student, then an adapter update from the teacher loss followed by a
/// student update from the student loss. Both losses use the distributions
/// of that single forward, each with the other side held constant. The
/// teacher's base weights are only ever read.
pub fn train_okd<T: Real>(
    teacher: &TransformerLm<T>,
    adapters: &mut AdapterSet<T>,
    student: &mut TransformerLm<T>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    expect_method(cfg, Method::Okd)?;
    ensure!(
        !adapters.is_empty() && adapters.enabled && !adapters.is_merged(),
        "online distillation needs an enabled, unmerged adapter set"
    );
    check_data(&[teacher, student], data)?;
    let mut sampler = sampler(data, cfg)?;
    let mut teacher_state = OptimizerState::default();
    let mut student_state = OptimizerState::default();
    let teacher_peak = cfg.teacher_learning_rate.unwrap_or(cfg.learning_rate);
    let (alpha, tau) = (cfg.distill.alpha, cfg.distill.temperature);
    let mut log = StepLog::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)?;
        let teacher_lr = lr_at(step, cfg.steps, teacher_peak, cfg.warmup_fraction)?;
        let batch = sampler.next_batch(cfg.batch_size)?;
        let (targets, weights) = batch.prediction_targets();
        let (ids, b, m) = (&batch.token_ids, batch.batch, batch.seq);

        let mut g = Graph::new();
        let tf = teacher.forward(&mut g, ids, b, m, Some(adapters), GradMode::ADAPTERS)?;
        let sf = student.forward(&mut g, ids, b, m, None, GradMode::BASE)?;
        let lt = objectives::teacher_loss(&mut g, tf.logits, sf.logits, &targets, &weights, alpha, tau)?;
        let ls = objectives::student_loss(&mut g, tf.logits, sf.logits, &weights, tau)?;
        let (lt_value, ls_value) = (g.scalar(lt)?, g.scalar(ls)?);
        let teacher_grads = collect_grads(&g.backward(lt)?, &tf.adapter_params);
        let student_grads = collect_grads(&g.backward(ls)?, &sf.params);
        drop(g);

        let tnorm = apply(adapters.tensors_mut(), teacher_grads, &mut teacher_state, teacher_lr, cfg.grad_clip)?;
        let snorm = apply(student.params_mut().tensors_mut().collect(), student_grads, &mut student_state, lr, cfg.grad_clip)?;
        let mut r = record(step, Method::Okd, ls_value, lr, snorm, false, started);
        r.teacher_loss = Some(lt_value);
        r.teacher_grad_norm = Some(tnorm);
        log.records.push(r);
    }
    Ok(log)
}
