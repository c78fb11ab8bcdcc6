use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agreement::sentence_agreements;
use super::buckets::{bucketed_analysis, BucketSpec, BucketStats};
use super::exposure::exposure_metrics;
use super::rouge::rouge_l;
use crate::data::{Example, TokenBatch, EOS_ID};
use crate::error::{ensure, Error, Result};
use crate::model::{generate_batch, AdaptedLm, DecodeConfig, TransformerLm};
use crate::numcore::{Real, Tensor};
use crate::objectives::kl_logits;

fn default_batch() -> usize {
    16
}

fn default_new_tokens() -> usize {
    24
}

fn default_mc() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Greedy generation budget for ROUGE-L.
    #[serde(default = "default_new_tokens")]
    pub max_new_tokens: usize,
    /// Exposure horizon; defaults to `max_new_tokens`.
    #[serde(default)]
    pub exposure_horizon: Option<usize>,
    /// Monte-Carlo paths for the exposure metrics; 0 skips them.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub buckets: BucketSpec,
    /// Evaluate only the first `n` examples.
    #[serde(default)]
    pub max_examples: Option<usize>,
    /// Skip greedy generation (and ROUGE-L).
    #[serde(default)]
    pub skip_generation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            max_new_tokens: default_new_tokens(),
            exposure_horizon: None,
            mc_samples: default_mc(),
            seed: 0,
            buckets: BucketSpec::default(),
            max_examples: None,
            skip_generation: false,
        }
    }
}

impl EvalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("eval batch_size must be positive".to_string());
        }
        if self.max_new_tokens == 0 {
            p.push("max_new_tokens must be positive".to_string());
        }
        if self.exposure_horizon == Some(0) {
            p.push("exposure_horizon must be positive".to_string());
        }
        if let Err(e) = self.buckets.validate() {
            p.push(e.to_string());
        }
        p
    }

    pub fn horizon(&self) -> usize {
        self.exposure_horizon.unwrap_or(self.max_new_tokens)
    }
}

/// Evaluation summary of a student against a teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean ROUGE-L F1 of greedy student outputs against the references.
    pub rouge_l: Option<f64>,
    /// Teacher-forced top-1 agreement, macro-averaged over sentences.
    pub top1_agreement: f64,
    /// Teacher-forced mean token-level `KL(p^t || p^s)` on response tokens.
    pub forward_kl: f64,
    pub exaccerr_percent: Option<f64>,
    pub regret: Option<f64>,
    pub epsilon: Option<f64>,
    pub per_bucket: BTreeMap<String, BucketStats>,
    pub counts: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plot-ready `bucket,metric,value` rows.
    pub fn write_bucket_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bucket", "metric", "value"])?;
        for (name, b) in &self.per_bucket {
            for (metric, value) in [
                ("tokens", b.tokens as f64),
                ("mean_unc", b.mean_unc),
                ("mean_kl", b.mean_kl),
                ("mean_logit_std", b.mean_logit_std),
                ("top1_agreement", b.top1_agreement),
            ] {
                w.write_record([name.as_str(), metric, &value.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn strip_eos(mut v: Vec<usize>) -> Vec<usize> {
    if v.last() == Some(&EOS_ID) {
        v.pop();
    }
    v
}

/// Teacher-forced quantities gathered over masked rows.
struct Forced {
    teacher_rows: Vec<f64>,
    student_rows: Vec<f64>,
    targets: Vec<usize>,
    sentence_ta: Vec<f64>,
    kl_sum: f64,
}

fn teacher_forced<T: Real>(
    teacher: AdaptedLm<'_, T>,
    student: &TransformerLm<T>,
    examples: &[Example],
    batch_size: usize,
) -> Result<Forced> {
    let mut f = Forced {
        teacher_rows: Vec::new(),
        student_rows: Vec::new(),
        targets: Vec::new(),
        sentence_ta: Vec::new(),
        kl_sum: 0.0,
    };
    for chunk in examples.chunks(batch_size) {
        let batch = TokenBatch::from_examples(&chunk.iter().collect::<Vec<_>>())?;
        let t: Tensor<f64> = teacher.model.forward_logits(&batch, teacher.adapters)?.cast();
        let s: Tensor<f64> = student.forward_logits(&batch, None)?.cast();
        let (targets, mask) = batch.prediction_targets();
        f.sentence_ta.extend(sentence_agreements(&t, &s, &mask)?);
        let c = t.shape()[2];
        for r in (0..mask.len()).filter(|&r| mask[r] != 0.0) {
            let (tr, sr) = (&t.data()[r * c..(r + 1) * c], &s.data()[r * c..(r + 1) * c]);
            f.kl_sum += kl_logits(tr, sr, 1.0)?;
            f.teacher_rows.extend_from_slice(tr);
            f.student_rows.extend_from_slice(sr);
            f.targets.push(targets[r]);
        }
    }
    Ok(f)
}

/// Full metric suite of `student` against `teacher` on held-out examples,
/// processed in their given order.
pub fn evaluate<T: Real>(
    teacher: AdaptedLm<'_, T>,
    student: &TransformerLm<T>,
    examples: &[Example],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let examples = &examples[..cfg.max_examples.unwrap_or(examples.len()).min(examples.len())];
    ensure!(!examples.is_empty(), "no evaluation examples");
    ensure!(
        teacher.model.config().vocab_size == student.config().vocab_size,
        "vocabulary mismatch between teacher and student"
    );

    let forced = teacher_forced(teacher, student, examples, cfg.batch_size)?;
    let n_tokens = forced.targets.len();
    ensure!(n_tokens > 0, "evaluation examples have no response tokens");
    let c = student.config().vocab_size;
    let tt = Tensor::new(vec![n_tokens, c], forced.teacher_rows)?;
    let st = Tensor::new(vec![n_tokens, c], forced.student_rows)?;
    let buckets = bucketed_analysis(&tt, &st, &forced.targets, &vec![1.0; n_tokens], &cfg.buckets)?;

    let mut counts = BTreeMap::new();
    counts.insert("examples".to_string(), examples.len());
    counts.insert("tokens".to_string(), n_tokens);
    counts.insert("sentences".to_string(), forced.sentence_ta.len());

    let rouge = if cfg.skip_generation {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let decode = DecodeConfig::greedy(cfg.max_new_tokens);
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch_size) {
            let prompts: Vec<&[usize]> = chunk.iter().map(|e| e.prompt.as_slice()).collect();
            let outs = generate_batch(student, None, &prompts, &decode, &mut rng)?;
            for (e, out) in chunk.iter().zip(outs) {
                let cand = strip_eos(out);
                let reference = strip_eos(e.response.clone());
                if !cand.is_empty() && !reference.is_empty() {
                    total += rouge_l(&cand, &reference)?.f1;
                }
            }
        }
        counts.insert("generations".to_string(), examples.len());
        Some(total / examples.len() as f64)
    };

    let (mut exaccerr, mut regret, mut epsilon) = (None, None, None);
    if cfg.mc_samples > 0 {
        let horizon = cfg.horizon();
        let limit = teacher.model.config().max_seq_len.min(student.config().max_seq_len);
        let prompts: Vec<Vec<usize>> = examples
            .iter()
            .filter(|e| e.prompt.len() + horizon - 1 <= limit)
            .map(|e| e.prompt.clone())
            .collect();
        ensure!(
            !prompts.is_empty(),
            "no prompt leaves room for an exposure horizon of {horizon}"
        );
        let r = exposure_metrics(&teacher, student, &prompts, horizon, cfg.mc_samples, cfg.seed)?;
        exaccerr = Some(r.exaccerr_percent);
        regret = Some(r.regret);
        epsilon = Some(r.epsilon);
        counts.insert("mc_samples".to_string(), cfg.mc_samples);
    }

    Ok(MetricReport {
        rouge_l: rouge,
        top1_agreement: forced.sentence_ta.iter().sum::<f64>() / forced.sentence_ta.len() as f64,
        forward_kl: forced.kl_sum / n_tokens as f64,
        exaccerr_percent: exaccerr,
        regret,
        epsilon,
        per_bucket: buckets
            .into_iter()
            .enumerate()
            .map(|(i, b)| (format!("{i}_{}", cfg.buckets.label(i)), b))
            .collect(),
        counts,
    })
}
