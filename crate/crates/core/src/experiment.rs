//! Config-driven experiment runner: data preparation, teacher preparation,
//! per-seed student training and evaluation, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{attach_lora, default_rank, AdapterSet, TargetSpec};
use crate::data::{
    encode_records, load_corpus, split_records, synthetic_corpus, ByteTokenizer, CorpusSplits, Example, SplitSpec,
    VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricReport};
use crate::model::{AdaptedLm, ModelConfig, TransformerLm};
use crate::trainers::{
    derive_seed, train_okd, train_on_policy_kd, train_sft, train_standard_kd, Method, StepLog, TrainConfig,
};

/// Environment variable that, when set, is the base for relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "OKDLAB_OUTPUT_ROOT";

fn default_records() -> usize {
    2400
}

fn default_split() -> SplitSpec {
    SplitSpec::Counts {
        train: 2000,
        valid: 200,
        test: 200,
    }
}

fn default_max_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL corpus; when absent a synthetic corpus is generated.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_records")]
    pub synthetic_records: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default = "default_max_len")]
    pub max_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic_records: default_records(),
            data_seed: 0,
            split: default_split(),
            max_seq_len: default_max_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    /// Pretrained teacher weights; when absent the teacher is trained with
    /// `sft` from its initialisation.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub sft: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// Shape of the student; its `seed` is replaced per run seed.
    pub model: ModelConfig,
    /// Starting weights instead of a fresh initialisation.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Defaults to `min(32, d_model / 2)` of the teacher.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub targets: TargetSpec,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: None,
            scale: default_scale(),
            targets: TargetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Excluded from the config hash.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub adapters: AdapterConfig,
    /// `seed` inside is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `method`: synthetic corpus, 4x128 teacher
    /// trained with SFT, 2x64 student.
    pub fn desk_scale(method: Method) -> Self {
        let max = default_max_len();
        let mut train = TrainConfig::new(method, 2000, 1e-3, 4, 0);
        if method == Method::OnPolicyKd {
            train.sgo_fraction = 0.5;
        }
        Self {
            name: format!("desk-{}", method.as_str()),
            output_dir: Some(PathBuf::from(format!("runs/desk-{}", method.as_str()))),
            data: DataConfig::default(),
            teacher: TeacherConfig {
                model: ModelConfig::teacher(VOCAB_SIZE, max, 17),
                checkpoint: None,
                sft: Some(TrainConfig::new(Method::Sft, 1500, 1e-3, 8, 17)),
            },
            student: StudentConfig {
                model: ModelConfig::student(VOCAB_SIZE, max, 0),
                checkpoint: None,
            },
            adapters: AdapterConfig::default(),
            train,
            eval: EvalConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }

    /// Every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.name.trim().is_empty() {
            p.push("name must not be empty".into());
        }
        if self.seeds.is_empty() {
            p.push("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            p.push("seeds must be distinct".into());
        }
        if let Some(c) = &self.data.corpus {
            if !c.exists() {
                p.push(format!("corpus {} does not exist", c.display()));
            }
        } else if self.data.synthetic_records == 0 {
            p.push("synthetic_records must be positive".into());
        }
        if self.data.max_seq_len < 4 {
            p.push("data.max_seq_len must be at least 4".into());
        }
        for (who, m) in [("teacher", &self.teacher.model), ("student", &self.student.model)] {
            if let Err(e) = m.validate() {
                p.push(format!("{who} model: {e}"));
            }
            if m.vocab_size != VOCAB_SIZE {
                p.push(format!("{who} vocab_size must be {VOCAB_SIZE} for the byte tokenizer"));
            }
            if m.max_seq_len < self.data.max_seq_len {
                p.push(format!("{who} max_seq_len is shorter than data.max_seq_len"));
            }
        }
        for (who, c) in [("teacher", &self.teacher.checkpoint), ("student", &self.student.checkpoint)] {
            if let Some(c) = c {
                if !c.exists() {
                    p.push(format!("{who} checkpoint {} does not exist", c.display()));
                }
            }
        }
        if self.teacher.checkpoint.is_none() && self.teacher.sft.is_none() {
            p.push("teacher needs a checkpoint or an sft config".into());
        }
        if let Some(s) = &self.teacher.sft {
            if s.method != Method::Sft {
                p.push("teacher.sft.method must be sft".into());
            }
            p.extend(s.problems().into_iter().map(|e| format!("teacher.sft: {e}")));
        }
        let mut train = self.train.clone();
        if train.steps == 0 {
            train.steps = 1; // zero steps means evaluation only
        }
        p.extend(train.problems().into_iter().map(|e| format!("train: {e}")));
        if self.train.method == Method::Okd {
            let d = self.teacher.model.d_model;
            let r = self.adapters.rank.unwrap_or_else(|| default_rank(d));
            if r == 0 || r >= d {
                p.push(format!("adapter rank {r} must lie in [1, {d})"));
            }
            if !(self.adapters.scale.is_finite() && self.adapters.scale >= 1.0) {
                p.push(format!("adapter scale must be >= 1, got {}", self.adapters.scale));
            }
            if self.adapters.targets.0.is_empty() {
                p.push("adapter targets must not be empty".into());
            }
        }
        p.extend(self.eval.problems().into_iter().map(|e| format!("eval: {e}")));
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no whitespace)
    /// without `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    /// Output directory resolved against the output-root variable.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

/// Encoded corpus splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Hash of the encoded test split, to check comparisons are fair.
    pub test_hash: String,
}

pub fn prepare_data(cfg: &DataConfig) -> Result<PreparedData> {
    let splits: CorpusSplits = match &cfg.corpus {
        Some(path) => load_corpus(path, &cfg.split, cfg.data_seed)?,
        None => split_records(synthetic_corpus(cfg.synthetic_records, cfg.data_seed), &cfg.split, cfg.data_seed)?,
    };
    let tok = ByteTokenizer;
    let enc = |r: &[_]| encode_records(r, &tok, cfg.max_seq_len);
    let data = PreparedData {
        train: enc(&splits.train),
        valid: enc(&splits.valid),
        test: enc(&splits.test),
        test_hash: String::new(),
    };
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("train and test splits must keep at least one example"));
    }
    let mut h = Sha256::new();
    for e in &data.test {
        h.update(serde_json::to_vec(&(&e.prompt, &e.response))?);
    }
    Ok(PreparedData {
        test_hash: hex::encode(h.finalize()),
        ..data
    })
}

/// Loads the teacher checkpoint or trains one with supervised fine-tuning.
pub fn prepare_teacher(cfg: &TeacherConfig, data: &PreparedData) -> Result<(TransformerLm<f32>, Option<StepLog>)> {
    if let Some(path) = &cfg.checkpoint {
        let t = TransformerLm::load(path)?;
        if t.config() != &cfg.model {
            return Err(Error::Checkpoint {
                path: path.clone(),
                message: "teacher checkpoint does not match teacher.model".into(),
            });
        }
        return Ok((t, None));
    }
    let sft = cfg
        .sft
        .as_ref()
        .ok_or_else(|| Error::invalid("teacher needs a checkpoint or an sft config"))?;
    let mut t = TransformerLm::init(cfg.model.clone())?;
    let log = train_sft(&mut t, &data.train, sft)?;
    Ok((t, Some(log)))
}

/// A trained student together with what produced it.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub initial_student: TransformerLm<f32>,
    pub student: TransformerLm<f32>,
    pub adapters: Option<AdapterSet<f32>>,
    pub log: StepLog,
    /// Against the frozen teacher.
    pub report: MetricReport,
    /// Online distillation only: against the adapted teacher it trained with.
    pub adapted_report: Option<MetricReport>,
    pub train_wall_ms: f64,
}

/// Initial student for `seed`: the checkpoint, or a fresh initialisation
/// whose seed is derived from the run seed.
pub fn initial_student(cfg: &StudentConfig, seed: u64) -> Result<TransformerLm<f32>> {
    match &cfg.checkpoint {
        Some(path) => TransformerLm::load(path),
        None => {
            let mut m = cfg.model.clone();
            m.seed = derive_seed(seed, "student-init");
            TransformerLm::init(m)
        }
    }
}

/// Trains one student with `train` (whose seed is already set) from `init`.
pub fn train_student(
    teacher: &TransformerLm<f32>,
    init: &TransformerLm<f32>,
    adapters: &AdapterConfig,
    data: &[Example],
    train: &TrainConfig,
) -> Result<(TransformerLm<f32>, Option<AdapterSet<f32>>, StepLog)> {
    let mut student = init.clone();
    if train.steps == 0 {
        let set = match train.method {
            Method::Okd => Some(make_adapters(teacher, adapters, train.seed)?),
            _ => None,
        };
        return Ok((student, set, StepLog::default()));
    }
    let (set, log) = match train.method {
        Method::Sft => (None, train_sft(&mut student, data, train)?),
        Method::StandardKd => (None, train_standard_kd(teacher, &mut student, data, train)?),
        Method::OnPolicyKd => (None, train_on_policy_kd(teacher, &mut student, data, train)?),
        Method::Okd => {
            let mut set = make_adapters(teacher, adapters, train.seed)?;
            let log = train_okd(teacher, &mut set, &mut student, data, train)?;
            (Some(set), log)
        }
    };
    Ok((student, set, log))
}

fn make_adapters(teacher: &TransformerLm<f32>, cfg: &AdapterConfig, seed: u64) -> Result<AdapterSet<f32>> {
    let d = teacher.config().d_model;
    attach_lora(
        teacher,
        cfg.rank.unwrap_or_else(|| default_rank(d)),
        cfg.scale,
        &cfg.targets.expand(teacher.config().n_layers),
        derive_seed(seed, "adapter-init"),
    )
}

/// Per-seed evaluation settings: the MC stream is derived from the seed.
pub fn eval_for_seed(eval: &EvalConfig, seed: u64) -> EvalConfig {
    EvalConfig {
        seed: derive_seed(seed ^ eval.seed, "eval"),
        ..eval.clone()
    }
}

/// Trains and evaluates one seed of `cfg`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    teacher: &TransformerLm<f32>,
    data: &PreparedData,
    seed: u64,
) -> Result<SeedOutcome> {
    let init = initial_student(&cfg.student, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let started = Instant::now();
    let (student, adapters, log) = train_student(teacher, &init, &cfg.adapters, &data.train, &train)?;
    let train_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let eval = eval_for_seed(&cfg.eval, seed);
    let frozen = AdaptedLm {
        model: teacher,
        adapters: None,
    };
    let report = evaluate(frozen, &student, &data.test, &eval)?;
    let adapted_report = match &adapters {
        Some(set) => Some(evaluate(
            AdaptedLm {
                model: teacher,
                adapters: Some(set),
            },
            &student,
            &data.test,
            &eval,
        )?),
        None => None,
    };
    Ok(SeedOutcome {
        seed,
        initial_student: init,
        student,
        adapters,
        log,
        report,
        adapted_report,
        train_wall_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub step_log: PathBuf,
    pub metrics: PathBuf,
    pub adapted_metrics: Option<PathBuf>,
    pub buckets: PathBuf,
    pub train_wall_ms: f64,
    pub mean_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub method: Method,
    pub config_hash: String,
    pub code_version: String,
    pub test_split_hash: String,
    /// False when the run stopped early; `error` then says why.
    pub complete: bool,
    pub error: Option<String>,
    pub config: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub seeds: Vec<SeedEntry>,
    /// Mean and sample standard deviation over seeds of each scalar metric.
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub total_wall_ms: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Every path a complete manifest lists, for existence checks.
    pub fn paths(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.config];
        v.extend(self.teacher_checkpoint.as_deref());
        for s in &self.seeds {
            v.extend([&*s.checkpoint, &s.step_log, &s.metrics, &s.buckets]);
            v.extend(s.adapters.as_deref());
            v.extend(s.adapted_metrics.as_deref());
        }
        v
    }
}

/// Scalar metrics of a report by name.
pub fn scalar_metrics(r: &MetricReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("top1_agreement".to_string(), r.top1_agreement);
    m.insert("forward_kl".to_string(), r.forward_kl);
    for (k, v) in [
        ("rouge_l", r.rouge_l),
        ("exaccerr_percent", r.exaccerr_percent),
        ("regret", r.regret),
        ("epsilon", r.epsilon),
    ] {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }
    m
}

/// Mean and sample standard deviation of each key present in every map.
pub fn mean_std(maps: &[BTreeMap<String, f64>]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let (mut mean, mut std) = (BTreeMap::new(), BTreeMap::new());
    let Some(first) = maps.first() else {
        return (mean, std);
    };
    for key in first.keys() {
        let xs: Vec<f64> = maps.iter().filter_map(|m| m.get(key).copied()).collect();
        if xs.len() != maps.len() {
            continue;
        }
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.insert(key.clone(), mu);
        std.insert(key.clone(), var.sqrt());
    }
    (mean, std)
}

/// Runs every seed of `cfg`, writing checkpoints, logs and reports under
/// `dir`. The manifest is written last; on failure a partial manifest with
/// `complete = false` is written and the error returned.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        method: cfg.train.method,
        config_hash: cfg.hash()?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        test_split_hash: String::new(),
        complete: false,
        error: None,
        config: config_path,
        teacher_checkpoint: None,
        seeds: Vec::new(),
        mean: BTreeMap::new(),
        std: BTreeMap::new(),
        total_wall_ms: 0.0,
    };
    let result = run_inner(cfg, dir, &mut manifest);
    manifest.total_wall_ms = started.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(()) => {
            manifest.complete = true;
            manifest.write(dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write(dir)?;
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let data = prepare_data(&cfg.data)?;
    manifest.test_split_hash = data.test_hash.clone();
    log::info!(
        "{}: {} train / {} valid / {} test examples",
        cfg.name,
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    let (teacher, teacher_log) = prepare_teacher(&cfg.teacher, &data)?;
    if let Some(log) = teacher_log {
        let path = dir.join("teacher.bin");
        teacher.save(&path)?;
        log.write_csv(&dir.join("teacher_step_log.csv"))?;
        manifest.teacher_checkpoint = Some(path);
    } else {
        manifest.teacher_checkpoint = cfg.teacher.checkpoint.clone();
    }
    let mut scalars = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("{}: seed {seed}", cfg.name);
        let out = run_seed(cfg, &teacher, &data, seed)?;
        let sd = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        let entry = SeedEntry {
            seed,
            checkpoint: sd.join("student.bin"),
            adapters: out.adapters.as_ref().map(|_| sd.join("adapters.bin")),
            step_log: sd.join("step_log.csv"),
            metrics: sd.join("metrics.json"),
            adapted_metrics: out.adapted_report.as_ref().map(|_| sd.join("metrics_adapted_teacher.json")),
            buckets: sd.join("buckets.csv"),
            train_wall_ms: out.train_wall_ms,
            mean_step_ms: if out.log.records.is_empty() {
                0.0
            } else {
                out.log.wall_ms().iter().sum::<f64>() / out.log.records.len() as f64
            },
        };
        out.student.save(&entry.checkpoint)?;
        if let (Some(set), Some(p)) = (&out.adapters, &entry.adapters) {
            set.save(p)?;
        }
        out.log.write_csv(&entry.step_log)?;
        out.report.write_json(&entry.metrics)?;
        out.report.write_bucket_csv(&entry.buckets)?;
        if let (Some(r), Some(p)) = (&out.adapted_report, &entry.adapted_metrics) {
            r.write_json(p)?;
        }
        scalars.push(scalar_metrics(&out.report));
        manifest.seeds.push(entry);
    }
    (manifest.mean, manifest.std) = mean_std(&scalars);
    Ok(())
}

/// One row per method of a comparison across manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub name: String,
    pub seeds: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub mean_step_ms: f64,
    /// Mean step time relative to the fastest row.
    pub relative_time: f64,
}

/// Per-run mean metrics, seed spread and relative wall-clock, sorted by
/// method then name. All manifests must share the test split.
pub fn compare(manifests: &[RunManifest]) -> Result<Vec<ComparisonRow>> {
    let first = manifests.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    if let Some(m) = manifests.iter().find(|m| m.test_split_hash != first.test_split_hash) {
        return Err(Error::invalid(format!(
            "run {} was evaluated on a different test split than {}",
            m.name, first.name
        )));
    }
    let mut rows: Vec<ComparisonRow> = manifests
        .iter()
        .map(|m| {
            let n = m.seeds.len().max(1) as f64;
            ComparisonRow {
                method: m.method.as_str().to_string(),
                name: m.name.clone(),
                seeds: m.seeds.len(),
                mean: m.mean.clone(),
                std: m.std.clone(),
                mean_step_ms: m.seeds.iter().map(|s| s.mean_step_ms).sum::<f64>() / n,
                relative_time: 0.0,
            }
        })
        .collect();
    let fastest = rows
        .iter()
        .map(|r| r.mean_step_ms)
        .filter(|&t| t > 0.0)
        .fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.relative_time = if fastest.is_finite() { r.mean_step_ms / fastest } else { 0.0 };
    }
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.name.cmp(&b.name)));
    Ok(rows)
}

const COMPARE_METRICS: [&str; 4] = ["rouge_l", "top1_agreement", "forward_kl", "exaccerr_percent"];

/// Fixed-width text rendering of a comparison.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<14} {:<24} {:>5}", "method", "name", "seeds");
    for m in COMPARE_METRICS {
        s += &format!(" {:>22}", m);
    }
    s += &format!(" {:>10} {:>8}\n", "step_ms", "time");
    for r in rows {
        s += &format!("{:<14} {:<24} {:>5}", r.method, r.name, r.seeds);
        for m in COMPARE_METRICS {
            let cell = match (r.mean.get(m), r.std.get(m)) {
                (Some(mu), Some(sd)) => format!("{mu:.4} ± {sd:.4}"),
                _ => "-".to_string(),
            };
            s += &format!(" {:>22}", cell);
        }
        s += &format!(" {:>10.2} {:>7.2}x\n", r.mean_step_ms, r.relative_time);
    }
    s
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "name".into(), "seeds".into()];
    for m in COMPARE_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    header.extend(["mean_step_ms".to_string(), "relative_time".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.name.clone(), r.seeds.to_string()];
        for m in COMPARE_METRICS {
            rec.push(r.mean.get(m).map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.std.get(m).map(|v| v.to_string()).unwrap_or_default());
        }
        rec.extend([r.mean_step_ms.to_string(), r.relative_time.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
