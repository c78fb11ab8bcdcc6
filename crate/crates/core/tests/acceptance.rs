//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test -p okdlab --test acceptance`, or a
//! subset by number: `cargo test -p okdlab --test acceptance -- 1 5 6`.
//! The process exits non-zero on failure only when `ACCEPTANCE_STRICT=1`.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use okdlab::adapters::{attach_lora, AdapterSet, TargetSpec};
use okdlab::data::{encode_records, synthetic_corpus, ByteTokenizer, Example, SplitSpec, TokenBatch, VOCAB_SIZE};
use okdlab::experiment::{
    eval_for_seed, initial_student, prepare_data, prepare_teacher, run, run_seed, ExperimentConfig, PreparedData,
};
use okdlab::metrics::{evaluate, exposure_metrics, lcs_len, rouge_l, BigramLm, EvalConfig, MetricReport};
use okdlab::model::{AdaptedLm, GradMode, ModelConfig, TransformerLm};
use okdlab::numcore::{Graph, Tensor, Var};
use okdlab::objectives::{self, kd_kl_loss, Direction, DistillConfig, Divergence, TokenDistributions};
use okdlab::trainers::{train_okd, train_on_policy_kd, train_standard_kd, Method, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Relative error below which an analytic gradient counts as correct.
const GRAD_TOL: f64 = 1e-4;
/// Central-difference step, relative to `1 + |theta|`.
const FD_STEP: f64 = 1e-5;
/// Coordinates whose analytic and numeric gradients are both below this are
/// structurally zero (an embedding row the batch never reads, or a key bias,
/// which softmax ignores) and count as agreeing.
const GRAD_ZERO: f64 = 1e-9;
/// Gradient magnitude above which central-difference round-off is negligible.
const GRAD_LARGE: f64 = 1e-6;

fn small_config(d: usize, layers: usize, heads: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        max_seq_len: 16,
        seed,
    }
}

/// Moves every parameter away from its structured initialisation so that
/// gradients are generic.
fn perturb(tensors: Vec<&mut Tensor<f64>>, std: f64, seed: u64) {
    let normal = Normal::new(0.0, std).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in tensors {
        for x in t.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
}

fn grad_batch() -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, seq) = (2, 8);
    let mut ids: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(3..VOCAB_SIZE)).collect();
    ids[0] = 1;
    ids[seq] = 1;
    let mut mask = vec![1u8; batch * seq];
    for m in 0..3 {
        mask[m] = 0;
        mask[seq + m] = 0;
    }
    // The second row is two tokens shorter and padded.
    for m in seq - 2..seq {
        ids[seq + m] = 0;
        mask[seq + m] = 0;
    }
    TokenBatch {
        token_ids: ids,
        loss_mask: mask,
        batch,
        seq,
        pad_id: 0,
        lengths: vec![seq, seq - 2],
    }
}

fn flatten(tensors: &[&Tensor<f64>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(tensors: Vec<&mut Tensor<f64>>, flat: &[f64]) {
    let mut off = 0;
    for t in tensors {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn collect(g: &Graph<f64>, loss: Var, vars: &[Var], sizes: &[usize]) -> Vec<f64> {
    let grads = g.backward(loss).unwrap();
    vars.iter()
        .zip(sizes)
        .flat_map(|(&v, &n)| grads.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]))
        .collect()
}

/// Tensor name and scalar count.
type Named = (String, usize);

/// `name[offset]` of flat coordinate `i` in tensors of the given names and sizes.
fn locate(names: &[Named], mut i: usize) -> String {
    for (n, len) in names {
        if i < *len {
            return format!("{n}[{i}]");
        }
        i -= len;
    }
    format!("?[{i}]")
}

#[derive(Default, Clone, Copy)]
struct GradResult {
    worst: f64,
    /// Coordinate, analytic and numeric gradient of the worst agreement.
    at: (usize, f64, f64),
    /// Diagnostics only: worst absolute error, and worst relative error over
    /// coordinates whose gradient is at least `GRAD_LARGE`.
    abs_worst: f64,
    large_worst: f64,
    checked: usize,
    zero: usize,
}

/// Central differences of every output of `value` at every coordinate,
/// compared against the matching analytic gradients.
fn check_all(params: &[f64], value: &mut dyn FnMut(&[f64]) -> Vec<f64>, analytic: &[Vec<f64>]) -> Vec<GradResult> {
    let mut work = params.to_vec();
    let mut out = vec![GradResult::default(); analytic.len()];
    for i in 0..params.len() {
        let step = FD_STEP * (1.0 + params[i].abs());
        work[i] = params[i] + step;
        let up = value(&work);
        work[i] = params[i] - step;
        let down = value(&work);
        work[i] = params[i];
        for (k, r) in out.iter_mut().enumerate() {
            let numeric = (up[k] - down[k]) / (2.0 * step);
            let a = analytic[k][i];
            r.checked += 1;
            if a.abs() < GRAD_ZERO && numeric.abs() < GRAD_ZERO {
                r.zero += 1;
            } else {
                let e = (a - numeric).abs() / (a.abs() + numeric.abs());
                r.abs_worst = r.abs_worst.max((a - numeric).abs());
                if a.abs().max(numeric.abs()) >= GRAD_LARGE {
                    r.large_worst = r.large_worst.max(e);
                }
                if e > r.worst {
                    r.worst = e;
                    r.at = (i, a, numeric);
                }
            }
        }
    }
    out
}

const STUDENT_OBJECTIVES: [&str; 5] = ["MLE", "FKD", "RKD", "JSD", "L_s"];

/// The student objectives, in `STUDENT_OBJECTIVES` order, on one graph.
fn student_objectives(
    g: &mut Graph<f64>,
    teacher: &Tensor<f64>,
    adapted: &Tensor<f64>,
    student: Var,
    targets: &[usize],
    w: &[f64],
) -> Vec<Var> {
    let distill = |divergence, temperature| DistillConfig {
        divergence,
        temperature,
        alpha: 0.5,
        jsd_beta: 0.3,
    };
    let t = g.constant(teacher.clone());
    let ta = g.constant(adapted.clone());
    vec![
        objectives::mle(g, student, targets, w).unwrap(),
        objectives::distill(g, t, student, &distill(Divergence::ForwardKl, 1.5), w).unwrap(),
        objectives::distill(g, t, student, &distill(Divergence::ReverseKl, 1.5), w).unwrap(),
        objectives::distill(g, t, student, &distill(Divergence::Jsd, 1.0), w).unwrap(),
        objectives::student_loss(g, ta, student, w, 1.0).unwrap(),
    ]
}

fn logits_of(m: &TransformerLm<f64>, adapters: Option<&AdapterSet<f64>>, b: &TokenBatch) -> Tensor<f64> {
    let mut g = Graph::new();
    let fp = m.forward(&mut g, &b.token_ids, b.batch, b.seq, adapters, GradMode::NONE).unwrap();
    g.tensor(fp.logits)
}

fn criterion_gradients() -> Verdict {
    let started = Instant::now();
    let batch = grad_batch();
    let (targets, w) = batch.prediction_targets();

    let mut student = TransformerLm::<f64>::init(small_config(32, 2, 2, 3)).unwrap();
    perturb(student.params_mut().tensors_mut().collect(), 0.1, 4);
    let mut teacher = TransformerLm::<f64>::init(small_config(32, 2, 2, 5)).unwrap();
    perturb(teacher.params_mut().tensors_mut().collect(), 0.3, 6);
    let mut adapters = attach_lora(&teacher, 16, 1.0, &TargetSpec::default().expand(2), 7).unwrap();
    perturb(adapters.tensors_mut(), 0.1, 8);

    let teacher_logits = logits_of(&teacher, None, &batch);
    let adapted_logits = logits_of(&teacher, Some(&adapters), &batch);
    let student_logits = logits_of(&student, None, &batch);

    // Student objectives: one forward per perturbation serves all five.
    let sizes: Vec<usize> = student.params().tensors().map(|t| t.len()).collect();
    let theta = flatten(&student.params().tensors().collect::<Vec<_>>());
    let analytic: Vec<Vec<f64>> = (0..STUDENT_OBJECTIVES.len())
        .map(|k| {
            let mut g = Graph::new();
            let fp = student
                .forward(&mut g, &batch.token_ids, batch.batch, batch.seq, None, GradMode::BASE)
                .unwrap();
            let losses = student_objectives(&mut g, &teacher_logits, &adapted_logits, fp.logits, &targets, &w);
            collect(&g, losses[k], &fp.params, &sizes)
        })
        .collect();
    let mut model = student.clone();
    let mut value = |p: &[f64]| {
        unflatten(model.params_mut().tensors_mut().collect(), p);
        let logits = logits_of(&model, None, &batch);
        let mut g = Graph::new();
        let s = g.constant(logits);
        let losses = student_objectives(&mut g, &teacher_logits, &adapted_logits, s, &targets, &w);
        losses.into_iter().map(|l| g.scalar(l).unwrap()).collect()
    };
    let names: Vec<(String, usize)> = student.params().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut results: Vec<(&str, GradResult, &[Named])> = STUDENT_OBJECTIVES
        .into_iter()
        .zip(check_all(&theta, &mut value, &analytic))
        .map(|(n, r)| (n, r, names.as_slice()))
        .collect();

    // Teacher loss: gradient with respect to the adapters only.
    let sizes: Vec<usize> = adapters.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let phi = flatten(&adapters.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let teacher_objective = |g: &mut Graph<f64>, set: &AdapterSet<f64>, mode| {
        let tf = teacher
            .forward(g, &batch.token_ids, batch.batch, batch.seq, Some(set), mode)
            .unwrap();
        let s = g.constant(student_logits.clone());
        let l = objectives::teacher_loss(g, tf.logits, s, &targets, &w, 0.5, 1.0).unwrap();
        (l, tf.adapter_params)
    };
    let analytic = {
        let mut g = Graph::new();
        let (l, vars) = teacher_objective(&mut g, &adapters, GradMode::ADAPTERS);
        vec![collect(&g, l, &vars, &sizes)]
    };
    let mut set = adapters.clone();
    let mut value = |p: &[f64]| {
        unflatten(set.tensors_mut(), p);
        let mut g = Graph::new();
        let (l, _) = teacher_objective(&mut g, &set, GradMode::NONE);
        vec![g.scalar(l).unwrap()]
    };
    let adapter_names: Vec<(String, usize)> =
        adapters.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    results.push(("L_t", check_all(&phi, &mut value, &analytic)[0], adapter_names.as_slice()));

    let worst = results.iter().map(|(_, r, _)| r.worst).fold(0.0, f64::max);
    let details: Vec<String> = results
        .iter()
        .map(|(n, r, names)| {
            format!(
                "{n} {:.1e} at {} ({:.3e} vs {:.3e}; abs {:.1e}, |g|>=1e-6 {:.1e}; {} params, {} zero)",
                r.worst,
                locate(names, r.at.0),
                r.at.1,
                r.at.2,
                r.abs_worst,
                r.large_worst,
                r.checked,
                r.zero
            )
        })
        .collect();
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        worst < GRAD_TOL && secs < 120.0,
        format!("max rel err {worst:.2e} < {GRAD_TOL:.0e}; {}; {secs:.1}s < 120s", details.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 2. KL properties
// ---------------------------------------------------------------------------

fn probs(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn one_row(t: &[f64], s: &[f64]) -> TokenDistributions {
    let c = t.len();
    TokenDistributions::new(
        Tensor::new(vec![1, c], t.to_vec()).unwrap(),
        Tensor::new(vec![1, c], s.to_vec()).unwrap(),
        vec![1.0],
    )
    .unwrap()
}

fn criterion_kl() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut failures = Vec::new();
    let mut max_dev = 0.0f64;
    let mut min_distinct = f64::INFINITY;
    for dir in [Direction::Forward, Direction::Reverse] {
        for _ in 0..1000 {
            let c = rng.random_range(2..=32);
            let scale = rng.random_range(0.1..5.0);
            let t: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let d = kd_kl_loss(&one_row(&t, &s), 1.0, dir).unwrap();
            if d < 0.0 {
                failures.push(format!("negative {d:e}"));
            }
            let (pt, ps) = (probs(&t), probs(&s));
            let expect = match dir {
                Direction::Forward => kl_oracle(&pt, &ps),
                Direction::Reverse => kl_oracle(&ps, &pt),
            };
            max_dev = max_dev.max((d - expect).abs() / expect.max(1e-300));
            if pt != ps {
                min_distinct = min_distinct.min(d);
            }
            // Equal distributions, including a shifted copy of the logits.
            let shift = rng.random_range(-3.0..3.0);
            let shifted: Vec<f64> = t.iter().map(|x| x + shift).collect();
            for same in [&t, &shifted] {
                let z = kd_kl_loss(&one_row(&t, same), 1.0, dir).unwrap();
                if !(0.0..=1e-9).contains(&z) {
                    failures.push(format!("KL of equal distributions {z:e}"));
                }
            }
        }
    }
    if min_distinct <= 1e-9 {
        failures.push(format!("distinct pair with KL {min_distinct:e}"));
    }
    if max_dev > 1e-9 {
        failures.push(format!("tau=1 value deviates from the oracle by {max_dev:e}"));
    }
    let worked = one_row(&[0.5f64.ln(), 0.5f64.ln()], &[0.9f64.ln(), 0.1f64.ln()]);
    let f = kd_kl_loss(&worked, 1.0, Direction::Forward).unwrap();
    let r = kd_kl_loss(&worked, 1.0, Direction::Reverse).unwrap();
    if (f - 0.5108).abs() >= 1e-3 || (r - 0.3681).abs() >= 1e-3 {
        failures.push(format!("worked values {f:.4} / {r:.4}"));
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "2x1000 pairs; min distinct KL {min_distinct:.1e}; oracle rel dev {max_dev:.1e} <= 1e-9; worked {f:.4} / {r:.4} (1e-3){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures[..failures.len().min(3)].join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. LoRA identity, isolation and rank
// ---------------------------------------------------------------------------

/// Singular values by one-sided Jacobi rotations, largest first.
fn singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = cols.split_at_mut(q);
                for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    (*x, *y) = (c * *x - s * *y, s * *x + c * *y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn bits<T: Copy + Into<f64>>(t: &[T]) -> Vec<u64> {
    t.iter().map(|&x| x.into().to_bits()).collect()
}

fn small_examples(n: usize, max_len: usize) -> Vec<Example> {
    encode_records(&synthetic_corpus(n, 3), &ByteTokenizer, max_len)
}

fn criterion_lora() -> Verdict {
    let cfg = |d, seed| ModelConfig {
        max_seq_len: 64,
        ..small_config(d, 2, 2, seed)
    };
    let teacher = TransformerLm::<f64>::init(cfg(16, 31)).unwrap();
    let mut student = TransformerLm::<f64>::init(cfg(8, 32)).unwrap();
    let rank = 4;
    let mut adapters = attach_lora(&teacher, rank, 1.0, &TargetSpec::default().expand(2), 33).unwrap();
    let data = small_examples(40, 64);

    let batch = TokenBatch::from_examples(&data.iter().take(4).collect::<Vec<_>>()).unwrap();
    let plain = teacher.forward_logits(&batch, None).unwrap();
    let attached = teacher.forward_logits(&batch, Some(&adapters)).unwrap();
    let identity = bits(plain.data()) == bits(attached.data());

    let before = teacher.clone();
    let before_bits: Vec<Vec<u64>> = before.params().tensors().map(|t| bits(t.data())).collect();
    let mut one = TrainConfig::new(Method::Okd, 1, 1e-2, 4, 1);
    one.warmup_fraction = 0.0;
    train_okd(&teacher, &mut adapters, &mut student, &data, &one).unwrap();
    let after_bits: Vec<Vec<u64>> = teacher.params().tensors().map(|t| bits(t.data())).collect();
    let isolated = before_bits == after_bits;
    let moved = adapters.iter().any(|a| a.up.data().iter().any(|&x| x != 0.0));

    let mut more = TrainConfig::new(Method::Okd, 30, 1e-2, 4, 2);
    more.warmup_fraction = 0.0;
    train_okd(&teacher, &mut adapters, &mut student, &data, &more).unwrap();
    let mut worst_tail = 0.0f64;
    let mut min_head = f64::INFINITY;
    for a in adapters.iter() {
        let sv = singular_values(&a.delta());
        min_head = min_head.min(sv[rank - 1]);
        worst_tail = worst_tail.max(sv[rank..].iter().cloned().fold(0.0, f64::max));
    }
    let rank_ok = worst_tail < 1e-6;
    Verdict::new(
        identity && isolated && moved && rank_ok,
        format!(
            "zero-init logits bit-identical: {identity}; base bit-identical after a step: {isolated} (adapters moved: {moved}); \
             16x16 deltas at r={rank}: max sigma past r {worst_tail:.1e} < 1e-6, min sigma within r {min_head:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. OKD with a frozen adapter reduces to FKD
// ---------------------------------------------------------------------------

fn criterion_okd_reduces_to_fkd() -> Verdict {
    let teacher = TransformerLm::<f32>::init(ModelConfig::teacher(VOCAB_SIZE, 64, 41)).unwrap();
    let init = TransformerLm::<f32>::init(ModelConfig::student(VOCAB_SIZE, 64, 42)).unwrap();
    let data = small_examples(200, 64);

    let mut fkd_cfg = TrainConfig::new(Method::StandardKd, 100, 1e-3, 4, 5);
    fkd_cfg.distill.divergence = Divergence::ForwardKl;
    let mut fkd_student = init.clone();
    let fkd = train_standard_kd(&teacher, &mut fkd_student, &data, &fkd_cfg).unwrap();

    let mut okd_cfg = TrainConfig {
        method: Method::Okd,
        ..fkd_cfg.clone()
    };
    okd_cfg.teacher_learning_rate = Some(0.0);
    let mut okd_student = init.clone();
    let mut adapters = attach_lora(&teacher, 32, 1.0, &TargetSpec::default().expand(4), 43).unwrap();
    let okd = train_okd(&teacher, &mut adapters, &mut okd_student, &data, &okd_cfg).unwrap();

    let dev = fkd
        .losses()
        .iter()
        .zip(okd.losses())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let n = fkd.records.len().min(okd.records.len());
    Verdict::new(
        n == 100 && dev <= 1e-6,
        format!("max |loss_OKD - loss_FKD| over {n} steps = {dev:.1e} <= 1e-6"),
    )
}

// ---------------------------------------------------------------------------
// 5. ROUGE-L against brute-force LCS
// ---------------------------------------------------------------------------

/// LCS length by enumerating every subsequence of `a`.
fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let is_subsequence = |sub: &[u8]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if is_subsequence(&sub) {
            best = k;
        }
    }
    best
}

fn criterion_rouge() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut mismatches = 0;
    for _ in 0..200 {
        let alphabet = rng.random_range(2..=5u8);
        let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.random_range(1..=12);
            (0..n).map(|_| rng.random_range(0..alphabet)).collect()
        };
        let (cand, reference) = (seq(&mut rng), seq(&mut rng));
        let l = lcs_brute(&cand, &reference);
        let (m, n) = (cand.len() as f64, reference.len() as f64);
        let (p, r) = (l as f64 / m, l as f64 / n);
        let f1 = 2.0 * l as f64 / (m + n);
        let got = rouge_l(&cand, &reference).unwrap();
        let same = lcs_len(&cand, &reference) == l
            && got.precision.to_bits() == p.to_bits()
            && got.recall.to_bits() == r.to_bits()
            && got.f1.to_bits() == f1.to_bits();
        mismatches += usize::from(!same);
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} of 200 pairs differ in (L, P, R, F1); {secs:.2}s < 30s"),
    )
}

// ---------------------------------------------------------------------------
// 6. Exposure metrics against exhaustive enumeration
// ---------------------------------------------------------------------------

fn kl2(p: &BigramLm, q: &BigramLm, state: usize) -> f64 {
    (0..2)
        .map(|k| p.prob(state, k) * (p.prob(state, k) / q.prob(state, k)).ln())
        .sum()
}

/// Expected summed per-step divergence over every path of `l - 1` sampled
/// tokens starting from `start`, with tokens drawn from `sampler`.
fn exhaustive(p: &BigramLm, q: &BigramLm, sampler: &BigramLm, start: usize, l: usize) -> f64 {
    let mut total = 0.0;
    for path in 0u32..(1 << (l - 1)) {
        let mut state = start;
        let mut prob = 1.0;
        let mut sum = kl2(p, q, state);
        for t in 0..l - 1 {
            let next = ((path >> t) & 1) as usize;
            prob *= sampler.prob(state, next);
            state = next;
            sum += kl2(p, q, state);
        }
        total += prob * sum;
    }
    total
}

fn criterion_exposure() -> Verdict {
    let started = Instant::now();
    let teacher = BigramLm::new(vec![vec![0.8, 0.2], vec![0.35, 0.65]]).unwrap();
    let student = BigramLm::new(vec![vec![0.55, 0.45], vec![0.1, 0.9]]).unwrap();
    let prompts = vec![vec![0], vec![1]];
    let samples = 10_000;
    let mut worst_z = 0.0f64;
    let mut ok = true;
    let mut cells = Vec::new();
    for l in 1..=6 {
        let rep = exposure_metrics(&teacher, &student, &prompts, l, samples, 61).unwrap();
        let r_exact = (0..2).map(|s| exhaustive(&teacher, &student, &student, s, l)).sum::<f64>() / 2.0;
        let e_exact = (0..2).map(|s| exhaustive(&teacher, &student, &teacher, s, l)).sum::<f64>() / (2.0 * l as f64);
        for (est, se, exact) in [(rep.regret, rep.regret_se, r_exact), (rep.epsilon, rep.epsilon_se, e_exact)] {
            let dev = (est - exact).abs();
            let within = dev <= 2.0 * se + 1e-12;
            ok &= within;
            if se > 0.0 {
                worst_z = worst_z.max(dev / se);
            }
        }
        cells.push(format!("l={l} R {:.4}/{r_exact:.4} eps {:.4}/{e_exact:.4}", rep.regret, rep.epsilon));
    }
    let same = exposure_metrics(&teacher, &teacher, &prompts, 6, 1000, 62).unwrap();
    let zero = same.regret == 0.0 && same.epsilon == 0.0 && same.exaccerr_percent == 0.0;
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        ok && zero && secs < 60.0,
        format!(
            "max |MC - exact| / SE = {worst_z:.2} <= 2 over l = 1..6 at {samples} samples; identical models give 0: {zero}; {secs:.1}s < 60s [{}]",
            cells.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-9. Desk-scale distillation
// ---------------------------------------------------------------------------

fn desk_config(method: Method, divergence: Divergence) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_scale(method);
    cfg.train.distill.divergence = divergence;
    cfg.eval = EvalConfig {
        mc_samples: 0,
        skip_generation: true,
        ..EvalConfig::default()
    };
    cfg
}

struct Desk {
    data: PreparedData,
    teacher: TransformerLm<f32>,
    prepare_secs: f64,
}

fn desk() -> Desk {
    let started = Instant::now();
    let cfg = desk_config(Method::StandardKd, Divergence::ForwardKl);
    let data = prepare_data(&cfg.data).unwrap();
    let (teacher, _) = prepare_teacher(&cfg.teacher, &data).unwrap();
    Desk {
        data,
        teacher,
        prepare_secs: started.elapsed().as_secs_f64(),
    }
}

fn hard_kl(r: &MetricReport) -> f64 {
    r.per_bucket.get("2_hard").expect("hard bucket").mean_kl
}

struct DeskRuns {
    step0: Vec<MetricReport>,
    fkd: Vec<MetricReport>,
    okd: Vec<MetricReport>,
    rkd: Vec<MetricReport>,
    seconds_to_okd_fkd: f64,
}

fn desk_runs(d: &Desk, seeds: &[u64]) -> DeskRuns {
    let started = Instant::now();
    let fkd_cfg = desk_config(Method::StandardKd, Divergence::ForwardKl);
    let okd_cfg = desk_config(Method::Okd, Divergence::ForwardKl);
    let mut runs = DeskRuns {
        step0: Vec::new(),
        fkd: Vec::new(),
        okd: Vec::new(),
        rkd: Vec::new(),
        seconds_to_okd_fkd: 0.0,
    };
    for &seed in seeds {
        runs.fkd.push(run_seed(&fkd_cfg, &d.teacher, &d.data, seed).unwrap().report);
        runs.okd.push(run_seed(&okd_cfg, &d.teacher, &d.data, seed).unwrap().report);
    }
    runs.seconds_to_okd_fkd = d.prepare_secs + started.elapsed().as_secs_f64();
    let rkd_cfg = desk_config(Method::StandardKd, Divergence::ReverseKl);
    for &seed in seeds {
        let init = initial_student(&fkd_cfg.student, seed).unwrap();
        let frozen = AdaptedLm {
            model: &d.teacher,
            adapters: None,
        };
        runs.step0
            .push(evaluate(frozen, &init, &d.data.test, &eval_for_seed(&fkd_cfg.eval, seed)).unwrap());
        runs.rkd.push(run_seed(&rkd_cfg, &d.teacher, &d.data, seed).unwrap().report);
    }
    runs
}

fn criterion_okd_vs_fkd(runs: &DeskRuns, seeds: &[u64]) -> Verdict {
    let mut wins = 0;
    let mut cells = Vec::new();
    for (i, seed) in seeds.iter().enumerate() {
        let (f, o) = (&runs.fkd[i], &runs.okd[i]);
        let win = o.forward_kl <= f.forward_kl && o.top1_agreement >= f.top1_agreement;
        wins += usize::from(win);
        cells.push(format!(
            "seed {seed}: KL {:.4} vs {:.4}, TA {:.4} vs {:.4}",
            o.forward_kl, f.forward_kl, o.top1_agreement, f.top1_agreement
        ));
    }
    let secs = runs.seconds_to_okd_fkd;
    Verdict::new(
        wins >= 2 && secs < 1200.0,
        format!(
            "OKD beats FKD (held-out KL <= and TA >=, vs frozen teacher) in {wins}/3 seeds; {secs:.0}s < 1200s [{}]",
            cells.join("; ")
        ),
    )
}

fn criterion_rkd_hard_focus(runs: &DeskRuns, seeds: &[u64]) -> Verdict {
    let mut wins = 0;
    let mut cells = Vec::new();
    for (i, seed) in seeds.iter().enumerate() {
        let k0 = hard_kl(&runs.step0[i]);
        let rel = |r: &MetricReport| (k0 - hard_kl(r)) / k0;
        let (rk, fk) = (rel(&runs.rkd[i]), rel(&runs.fkd[i]));
        wins += usize::from(rk > fk);
        cells.push(format!("seed {seed}: RKD {:.1}% vs FKD {:.1}%", rk * 100.0, fk * 100.0));
    }
    Verdict::new(
        wins >= 2,
        format!(
            "hard-tercile relative KL reduction larger under RKD in {wins}/3 seeds [{}]",
            cells.join("; ")
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_step_time(d: &Desk) -> Verdict {
    let student = initial_student(&desk_config(Method::Okd, Divergence::ForwardKl).student, 1).unwrap();
    let mut okd_cfg = TrainConfig::new(Method::Okd, 100, 1e-3, 4, 1);
    okd_cfg.distill.divergence = Divergence::ForwardKl;
    let mut s = student.clone();
    let mut adapters = attach_lora(&d.teacher, 32, 1.0, &TargetSpec::default().expand(4), 71).unwrap();
    let okd = train_okd(&d.teacher, &mut adapters, &mut s, &d.data.train, &okd_cfg).unwrap();

    let mut on_cfg = TrainConfig::new(Method::OnPolicyKd, 100, 1e-3, 4, 1);
    on_cfg.sgo_fraction = 1.0;
    let mut s = student.clone();
    let on = train_on_policy_kd(&d.teacher, &mut s, &d.data.train, &on_cfg).unwrap();

    let (mo, mp) = (median(okd.wall_ms()), median(on.wall_ms()));
    Verdict::new(
        mo < mp,
        format!("median step over 100 steps: OKD {mo:.1} ms < on-policy (lambda=1) {mp:.1} ms"),
    )
}

// ---------------------------------------------------------------------------
// 10. Reproducibility
// ---------------------------------------------------------------------------

fn criterion_reproducible() -> Verdict {
    let mut cfg = ExperimentConfig::desk_scale(Method::Okd);
    cfg.name = "repro".into();
    cfg.data.synthetic_records = 240;
    cfg.data.split = SplitSpec::Counts {
        train: 200,
        valid: 20,
        test: 20,
    };
    cfg.teacher.model = ModelConfig {
        max_seq_len: 64,
        ..small_config(32, 1, 2, 17)
    };
    cfg.teacher.sft = Some(TrainConfig::new(Method::Sft, 40, 1e-3, 8, 17));
    cfg.student.model = ModelConfig {
        max_seq_len: 64,
        ..small_config(16, 1, 2, 0)
    };
    cfg.train.steps = 30;
    cfg.eval = EvalConfig {
        max_examples: Some(12),
        max_new_tokens: 8,
        mc_samples: 4,
        ..EvalConfig::default()
    };
    cfg.seeds = vec![1, 2];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let manifests: Vec<_> = dirs.iter().map(|d| run(&cfg, d.path()).unwrap()).collect();
    let mut compared = 0;
    let mut identical = true;
    for (a, b) in manifests[0].seeds.iter().zip(&manifests[1].seeds) {
        let pairs = [Some((&a.metrics, &b.metrics)), a.adapted_metrics.as_ref().zip(b.adapted_metrics.as_ref())];
        for (x, y) in pairs.into_iter().flatten() {
            identical &= std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
            compared += 1;
        }
    }
    let full = MetricReport::read_json(&manifests[0].seeds[0].metrics).unwrap();
    let exercised = full.rouge_l.is_some() && full.exaccerr_percent.is_some();
    Verdict::new(
        identical && compared == 4 && exercised,
        format!("{compared} MetricReport JSON files byte-identical across two runs: {identical} (ROUGE-L and ExAccErr present: {exercised})"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut all_pass = true;
    let mut report = |k: usize, name: &str, started: Instant, v: Verdict| {
        all_pass &= v.pass;
        println!(
            "{} [{k:>2}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
    };

    type Check = fn() -> Verdict;
    let cheap: [(usize, &str, Check); 7] = [
        (1, "finite-difference gradients", criterion_gradients),
        (2, "KL properties", criterion_kl),
        (3, "LoRA identity, isolation and rank", criterion_lora),
        (4, "OKD with frozen adapters equals FKD", criterion_okd_reduces_to_fkd),
        (5, "ROUGE-L vs brute-force LCS", criterion_rouge),
        (6, "ExAccErr vs exhaustive enumeration", criterion_exposure),
        (10, "byte-identical reports", criterion_reproducible),
    ];
    for (k, name, check) in cheap {
        if on(k) {
            let t = Instant::now();
            report(k, name, t, check());
        }
    }

    if on(7) || on(8) || on(9) {
        let seeds = [1, 2, 3];
        let d = desk();
        if on(7) || on(8) {
            let t = Instant::now();
            let runs = desk_runs(&d, &seeds);
            if on(7) {
                report(7, "OKD vs FKD at desk scale", t, criterion_okd_vs_fkd(&runs, &seeds));
            }
            if on(8) {
                report(8, "RKD hard-tercile focus", t, criterion_rkd_hard_focus(&runs, &seeds));
            }
        }
        if on(9) {
            let t = Instant::now();
            report(9, "OKD step faster than on-policy", t, criterion_step_time(&d));
        }
    }

    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !all_pass {
        std::process::exit(1);
    }
}
