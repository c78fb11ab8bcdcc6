//! Low-rank online modules attached to the teacher's attention projections.
//!
//! Each adapter adds `scale * x * W_down * W_up` to a projection output.
//! `W_up` starts at zero, so a freshly attached set leaves the host model's
//! outputs unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::TransformerLm;
use crate::numcore::{gemm, MatRef, Real, Tensor};

/// Attention projection inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub(crate) fn weight_suffix(self) -> &'static str {
        match self {
            Proj::Q => "attn.wq",
            Proj::K => "attn.wk",
            Proj::V => "attn.wv",
            Proj::O => "attn.wo",
        }
    }
}

/// A projection in a specific layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub layer: usize,
    pub proj: Proj,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{:?}", self.layer, self.proj)
    }
}

/// Which projections receive adapters, in every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec(pub Vec<Proj>);

impl Default for TargetSpec {
    fn default() -> Self {
        Self(vec![Proj::Q, Proj::V])
    }
}

impl FromStr for TargetSpec {
    type Err = Error;

    /// Parses letters such as `"qv"` or `"qkvo"`.
    fn from_str(s: &str) -> Result<Self> {
        let projs = s
            .chars()
            .map(|c| match c {
                'q' => Ok(Proj::Q),
                'k' => Ok(Proj::K),
                'v' => Ok(Proj::V),
                'o' => Ok(Proj::O),
                other => Err(Error::invalid(format!("unknown projection '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(projs))
    }
}

impl TargetSpec {
    pub fn expand(&self, n_layers: usize) -> Vec<Target> {
        (0..n_layers)
            .flat_map(|layer| self.0.iter().map(move |&proj| Target { layer, proj }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: Target,
    /// `[d, r]`
    pub down: Tensor<T>,
    /// `[r, k]`
    pub up: Tensor<T>,
    pub scale: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    /// Dense `scale * W_down * W_up`, shape `[d, k]`.
    pub fn delta(&self) -> Tensor<T> {
        let (d, r) = (self.down.shape()[0], self.down.shape()[1]);
        let k = self.up.shape()[1];
        let mut out = vec![T::ZERO; d * k];
        gemm(
            T::from_f64(self.scale),
            MatRef::dense(self.down.data(), 0, d, r),
            MatRef::dense(self.up.data(), 0, r, k),
            T::ZERO,
            &mut out,
            0,
            k,
        );
        Tensor::from_parts(vec![d, k], out)
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// Adapters keyed by target, at most one per projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    adapters: BTreeMap<Target, LoraAdapter<T>>,
    pub enabled: bool,
    merged: bool,
}

/// Standard deviation of the `W_down` initialisation.
pub const DOWN_INIT_STD: f64 = 0.02;

/// Default rank: 32, capped at half the model width.
pub fn default_rank(d_model: usize) -> usize {
    32.min(d_model / 2).max(1)
}

/// Attaches zero-delta adapters to `targets` of `model`.
pub fn attach_lora<T: Real>(
    model: &TransformerLm<T>,
    rank: usize,
    scale: f64,
    targets: &[Target],
    seed: u64,
) -> Result<AdapterSet<T>> {
    let cfg = model.config();
    ensure!(rank >= 1, "adapter rank must be at least 1");
    ensure!(
        rank < cfg.d_model,
        "adapter rank {rank} must be below min(d, k) = {}",
        cfg.d_model
    );
    ensure!(scale.is_finite() && scale >= 1.0, "adapter scale must be >= 1, got {scale}");
    ensure!(!targets.is_empty(), "no adapter targets given");
    let normal = Normal::new(0.0, DOWN_INIT_STD).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for &target in targets {
        ensure!(
            target.layer < cfg.n_layers,
            "target {target} does not exist in a {}-layer model",
            cfg.n_layers
        );
        let (d, k) = (cfg.d_model, cfg.d_model);
        let down: Vec<f64> = (0..d * rank).map(|_| normal.sample(&mut rng)).collect();
        let adapter = LoraAdapter {
            target,
            down: Tensor::from_f64(vec![d, rank], &down)?,
            up: Tensor::zeros(vec![rank, k]),
            scale,
        };
        if adapters.insert(target, adapter).is_some() {
            return Err(Error::invalid(format!("duplicate adapter target {target}")));
        }
    }
    Ok(AdapterSet {
        adapters,
        enabled: true,
        merged: false,
    })
}

impl<T: Real> AdapterSet<T> {
    pub fn from_adapters(list: Vec<LoraAdapter<T>>) -> Result<Self> {
        let mut adapters = BTreeMap::new();
        for a in list {
            let t = a.target;
            ensure!(
                a.down.shape().len() == 2
                    && a.up.shape().len() == 2
                    && a.down.shape()[1] == a.up.shape()[0],
                "adapter {t} has inconsistent shapes {:?} / {:?}",
                a.down.shape(),
                a.up.shape()
            );
            if adapters.insert(t, a).is_some() {
                return Err(Error::invalid(format!("duplicate adapter target {t}")));
            }
        }
        Ok(Self {
            adapters,
            enabled: true,
            merged: false,
        })
    }

    pub fn get(&self, target: Target) -> Option<&LoraAdapter<T>> {
        if self.enabled {
            self.adapters.get(&target)
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(|a| a.param_count()).sum()
    }

    pub fn targets(&self) -> Vec<Target> {
        self.adapters.keys().copied().collect()
    }

    /// Adapter tensors in binding order: `down, up` per target.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.adapters
            .values()
            .flat_map(|a| {
                [
                    (format!("{}.lora_down", a.target), &a.down),
                    (format!("{}.lora_up", a.target), &a.up),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.down, &mut a.up])
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let first = self
            .adapters
            .values()
            .next()
            .ok_or_else(|| Error::invalid("cannot save an empty adapter set"))?;
        let meta = serde_json::json!({
            "rank": first.rank(),
            "scale": first.scale,
            "targets": self.targets(),
        });
        write_container(path, "adapters", &self.named_tensors(), meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, tensors, meta) = read_container::<T>(path)?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if kind != "adapters" {
            return Err(bad("not an adapter container"));
        }
        let targets: Vec<Target> = serde_json::from_value(meta["targets"].clone())?;
        let scale = meta["scale"].as_f64().ok_or_else(|| bad("missing scale"))?;
        if tensors.len() != 2 * targets.len() {
            return Err(bad("tensor count does not match targets"));
        }
        let mut it = tensors.into_iter();
        let list = targets
            .into_iter()
            .map(|target| {
                let (_, down) = it.next().unwrap();
                let (_, up) = it.next().unwrap();
                LoraAdapter { target, down, up, scale }
            })
            .collect();
        Self::from_adapters(list)
    }
}

/// Which model a trainable subset is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

/// Names and sizes of the tensors an optimizer may update.
///
/// The teacher side is exactly the adapter tensors; the student side is every
/// student parameter.
pub fn trainable_parameters<T: Real>(
    model: &TransformerLm<T>,
    adapters: Option<&AdapterSet<T>>,
    side: Side,
) -> Result<Vec<(String, usize)>> {
    match side {
        Side::Teacher => {
            let set = adapters
                .filter(|a| !a.is_empty())
                .ok_or_else(|| Error::invalid("teacher side has no adapters attached"))?;
            Ok(set
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.len()))
                .collect())
        }
        Side::Student => Ok(model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.len()))
            .collect()),
    }
}

/// Folds the adapter deltas into a copy of `model`, consuming the set.
pub fn merge_adapters<T: Real>(model: &TransformerLm<T>, adapters: &mut AdapterSet<T>) -> Result<TransformerLm<T>> {
    ensure!(!adapters.merged, "adapters were already merged");
    ensure!(!adapters.is_empty(), "no adapters to merge");
    let mut merged = model.clone();
    for a in adapters.adapters.values() {
        let name = format!("layers.{}.{}", a.target.layer, a.target.proj.weight_suffix());
        let delta = a.delta();
        let w = merged
            .params_mut()
            .get_mut(&name)
            .ok_or_else(|| Error::invalid(format!("host model has no {name}")))?;
        ensure!(
            w.shape() == delta.shape(),
            "adapter {} delta {:?} does not match {name} {:?}",
            a.target,
            delta.shape(),
            w.shape()
        );
        for (x, &y) in w.data_mut().iter_mut().zip(delta.data()) {
            *x += y;
        }
    }
    adapters.merged = true;
    adapters.enabled = false;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenBatch;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny() -> TransformerLm<f64> {
        TransformerLm::init(ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            seed: 3,
        })
        .unwrap()
    }

    fn batch(seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenBatch {
            token_ids: (0..12).map(|_| rng.random_range(0..11)).collect(),
            loss_mask: vec![1; 12],
            batch: 2,
            seq: 6,
            pad_id: 0,
            lengths: vec![6, 6],
        }
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let m = tiny();
        let set = attach_lora(&m, 2, 1.0, &TargetSpec::default().expand(2), 1).unwrap();
        let b = batch(0);
        assert_eq!(m.forward_logits(&b, None).unwrap(), m.forward_logits(&b, Some(&set)).unwrap());
    }

    #[test]
    fn rank_and_duplicate_preconditions() {
        let m = tiny();
        let t = TargetSpec::default().expand(2);
        assert!(attach_lora(&m, 8, 1.0, &t, 0).is_err());
        assert!(attach_lora(&m, 0, 1.0, &t, 0).is_err());
        let dup = vec![t[0], t[0]];
        assert!(matches!(attach_lora(&m, 2, 1.0, &dup, 0), Err(Error::InvalidArgument(_))));
        let missing = vec![Target { layer: 5, proj: Proj::Q }];
        assert!(attach_lora(&m, 2, 1.0, &missing, 0).is_err());
    }

    #[test]
    fn teacher_side_counts_adapter_scalars() {
        let m = tiny();
        let set = attach_lora(&m, 3, 1.0, &TargetSpec::default().expand(2), 0).unwrap();
        let total: usize = trainable_parameters(&m, Some(&set), Side::Teacher)
            .unwrap()
            .iter()
            .map(|p| p.1)
            .sum();
        // 4 targets, each r * (d + k) with r = 3, d = k = 8.
        assert_eq!(total, 4 * 3 * (8 + 8));
        let student: usize = trainable_parameters(&m, None, Side::Student)
            .unwrap()
            .iter()
            .map(|p| p.1)
            .sum();
        assert_eq!(student, m.config().param_count());
        assert!(trainable_parameters(&m, None, Side::Teacher).is_err());
    }

    fn randomize(set: &mut AdapterSet<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in set.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn merged_model_matches_adapter_forward() {
        let m = tiny();
        let mut set = attach_lora(&m, 2, 2.0, &TargetSpec::default().expand(2), 0).unwrap();
        randomize(&mut set, 9);
        let reference: Vec<_> = (0..10).map(|s| m.forward_logits(&batch(s), Some(&set)).unwrap()).collect();
        let merged = merge_adapters(&m, &mut set).unwrap();
        for (s, want) in reference.iter().enumerate() {
            let got = merged.forward_logits(&batch(s as u64), None).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert!(merge_adapters(&m, &mut set).is_err());
    }

    #[test]
    fn zero_up_merge_is_base() {
        let m = tiny();
        let mut set = attach_lora(&m, 2, 1.0, &TargetSpec::default().expand(2), 0).unwrap();
        assert_eq!(merge_adapters(&m, &mut set).unwrap(), m);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let m = tiny();
        let mut set = attach_lora(&m, 2, 1.5, &TargetSpec::default().expand(2), 4).unwrap();
        randomize(&mut set, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.okd");
        set.save(&p).unwrap();
        assert_eq!(AdapterSet::<f64>::load(&p).unwrap(), set);
    }

    #[test]
    fn target_spec_parses_letters() {
        assert_eq!("qv".parse::<TargetSpec>().unwrap(), TargetSpec::default());
        assert!("qx".parse::<TargetSpec>().is_err());
    }
}
