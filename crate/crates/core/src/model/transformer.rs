use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::adapters::{AdapterSet, Proj, Target};
use crate::data::TokenBatch;
use crate::error::{ensure, Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 16;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }
}

/// Which leaves of a forward pass should collect gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradMode {
    pub base: bool,
    pub adapters: bool,
}

impl GradMode {
    pub const NONE: Self = Self { base: false, adapters: false };
    pub const BASE: Self = Self { base: true, adapters: false };
    pub const ADAPTERS: Self = Self { base: false, adapters: true };
}

/// Graph handles produced by [`TransformerLm::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[batch * seq, vocab]`
    pub logits: Var,
    /// One leaf per model parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
    /// `down, up` leaves per adapter, in target order.
    pub adapter_params: Vec<Var>,
}

/// Pre-norm decoder-only transformer with learned positions and an untied
/// output head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

fn layer_names(i: usize) -> [String; PER_LAYER] {
    [
        "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
        "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ]
    .map(|s| format!("layers.{i}.{s}"))
}

impl<T: Real> TransformerLm<T> {
    /// Seeded initialisation. Values are drawn in `f64` and cast, so `f32`
    /// and `f64` models with the same config start from the same point.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid normal");
        let (c, d, s, f) = (config.vocab_size, config.d_model, config.max_seq_len, config.d_ff());
        let mut entries = Vec::with_capacity(5 + PER_LAYER * config.n_layers);
        let mut draw = |shape: Vec<usize>, dist: &Normal<f64>| -> Tensor<T> {
            let n = shape.iter().product();
            let v: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
            Tensor::from_parts(shape, v)
        };
        let ones = |n: usize| Tensor::from_parts(vec![n], vec![T::ONE; n]);
        let zeros = |n: usize| Tensor::<T>::zeros(vec![n]);

        entries.push(("tok_emb".to_string(), draw(vec![c, d], &normal)));
        entries.push(("pos_emb".to_string(), draw(vec![s, d], &normal)));
        for i in 0..config.n_layers {
            let n = layer_names(i);
            let tensors = [
                ones(d),
                zeros(d),
                draw(vec![d, d], &normal),
                zeros(d),
                draw(vec![d, d], &normal),
                zeros(d),
                draw(vec![d, d], &normal),
                zeros(d),
                draw(vec![d, d], &resid),
                zeros(d),
                ones(d),
                zeros(d),
                draw(vec![d, f], &normal),
                zeros(f),
                draw(vec![f, d], &resid),
                zeros(d),
            ];
            entries.extend(n.into_iter().zip(tensors));
        }
        entries.push(("ln_f.gamma".to_string(), ones(d)));
        entries.push(("ln_f.beta".to_string(), zeros(d)));
        entries.push(("head".to_string(), draw(vec![d, c], &normal)));
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// a fresh initialisation of `config`.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Self::init(config.clone())?;
        ensure!(
            template.params.len() == params.len(),
            "expected {} parameter tensors, got {}",
            template.params.len(),
            params.len()
        );
        for ((want_name, want), (name, got)) in template.params.iter().zip(&params) {
            ensure!(
                want_name == name && want.shape() == got.shape(),
                "parameter {name} {:?} does not match expected {want_name} {:?}",
                got.shape(),
                want.shape()
            );
        }
        Ok(Self {
            config,
            params: ParamSet::new(params),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Builds the forward pass for `batch` rows of `seq` tokens.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        adapters: Option<&AdapterSet<T>>,
        mode: GradMode,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        ensure!(batch >= 1 && seq >= 1, "empty input");
        ensure!(
            tokens.len() == batch * seq,
            "expected {batch}x{seq} tokens, got {}",
            tokens.len()
        );
        ensure!(
            seq <= cfg.max_seq_len,
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }

        let params: Vec<Var> = self.params.tensors().map(|t| g.param(t, mode.base)).collect();
        let mut adapter_params = Vec::new();
        let mut lora: Vec<(Target, Var, Var, f64)> = Vec::new();
        if let Some(set) = adapters {
            for a in set.iter() {
                if set.get(a.target).is_none() {
                    continue;
                }
                ensure!(
                    a.target.layer < cfg.n_layers,
                    "adapter {} targets a missing layer",
                    a.target
                );
                let down = g.param(&a.down, mode.adapters);
                let up = g.param(&a.up, mode.adapters);
                adapter_params.extend([down, up]);
                lora.push((a.target, down, up, a.scale));
            }
        }
        let p = |i: usize| params[i];
        let layer = |l: usize, j: usize| params[2 + PER_LAYER * l + j];

        let tok = g.embedding(p(0), tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.embedding(p(1), &positions)?;
        let mut x = g.add(tok, pos)?;

        for l in 0..cfg.n_layers {
            let h = g.layer_norm(x, layer(l, 0), layer(l, 1), LN_EPS)?;
            let proj = |g: &mut Graph<T>, input: Var, w: usize, b: usize, which: Proj| -> Result<Var> {
                let y = g.matmul(input, layer(l, w))?;
                let mut y = g.add_row(y, layer(l, b))?;
                if let Some(&(_, down, up, s)) = lora.iter().find(|a| a.0 == Target { layer: l, proj: which }) {
                    let delta = lora_delta(g, input, down, up, s)?;
                    y = g.add(y, delta)?;
                }
                Ok(y)
            };
            let q = proj(g, h, 2, 3, Proj::Q)?;
            let k = proj(g, h, 4, 5, Proj::K)?;
            let v = proj(g, h, 6, 7, Proj::V)?;
            let att = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let o = proj(g, att, 8, 9, Proj::O)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, layer(l, 10), layer(l, 11), LN_EPS)?;
            let u = g.matmul(h, layer(l, 12))?;
            let u = g.add_row(u, layer(l, 13))?;
            let u = g.gelu(u);
            let u = g.matmul(u, layer(l, 14))?;
            let u = g.add_row(u, layer(l, 15))?;
            x = g.add(x, u)?;
        }
        let n = params.len();
        let h = g.layer_norm(x, params[n - 3], params[n - 2], LN_EPS)?;
        let logits = g.matmul(h, params[n - 1])?;
        Ok(ForwardPass {
            logits,
            params,
            adapter_params,
        })
    }

    /// Inference-only logits `[batch, seq, vocab]` for a padded batch.
    pub fn forward_logits(&self, batch: &TokenBatch, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, &batch.token_ids, batch.batch, batch.seq, adapters, GradMode::NONE)?;
        g.tensor(fp.logits)
            .reshape(vec![batch.batch, batch.seq, self.config.vocab_size])
    }

    /// Logits `[tokens.len(), vocab]` for a single unpadded sequence.
    pub fn sequence_logits(&self, tokens: &[usize], adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, tokens, 1, tokens.len(), adapters, GradMode::NONE)?;
        Ok(g.tensor(fp.logits))
    }
}

/// `scale * (x * down) * up`.
pub(crate) fn lora_delta<T: Real>(g: &mut Graph<T>, x: Var, down: Var, up: Var, scale: f64) -> Result<Var> {
    let t = g.matmul(x, down)?;
    let t = g.matmul(t, up)?;
    Ok(g.scale(t, scale))
}
