//! Decoder-only transformer student with optional low-rank adapters.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{answer_logprob_from_state, mean_gold_logprob, BoundModel, ForwardTrace, ForwardVars, ParamGrads};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{matmul, NumericsError, Tensor};

/// Init scale for every base weight matrix and embedding.
pub const INIT_STD: f64 = 0.02;

/// Linear maps of a transformer block, each optionally adapted.
pub const LINEAR_MAPS: [&str; 6] = ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ff.w1", "ff.w2"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("gold answer is empty")]
    EmptyGold,
    #[error("state has dimension {got}, model expects d_model = {expected}")]
    StateDim { got: usize, expected: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint {field} mismatch: file has {found}, expected {expected}")]
    ConfigMismatch { field: &'static str, found: u64, expected: u64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// 0 trains every parameter; otherwise only adapter factors train.
    pub adapter_rank: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: crate::corpus::Vocabulary::standard().len(),
            max_seq_len: 256,
            adapter_rank: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_rank >= self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "adapter_rank {} must be below d_model {}",
                self.adapter_rank, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn adapters_enabled(&self) -> bool {
        self.adapter_rank > 0
    }

    /// Adapter output scale `2 / rank`.
    pub fn adapter_scale(&self) -> f64 {
        if self.adapter_rank == 0 {
            0.0
        } else {
            2.0 / self.adapter_rank as f64
        }
    }

    fn linear_dims(&self, map: &str) -> (usize, usize) {
        match map {
            "ff.w1" => (self.d_model, self.d_ff),
            "ff.w2" => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let (v, s, d, f, r) = (self.vocab_size, self.max_seq_len, self.d_model, self.d_ff, self.adapter_rank);
        let per_layer = 4 * d + 4 * d * d + d * f + f + f * d + d;
        let adapters = if r == 0 { 0 } else { 4 * (d * r + r * d) + (d * r + r * f) + (f * r + r * d) };
        v * d + s * d + self.n_layers * (per_layer + adapters) + 2 * d + d * v
    }
}

/// Student parameters θ, in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
}

pub(crate) fn layer_name(layer: usize, rest: &str) -> String {
    format!("layers.{layer}.{rest}")
}

impl StudentModel {
    /// Seeded initialisation: N(0, 0.02²) weights, unit LayerNorm gains,
    /// zero biases. Adapter `A` factors use N(0, 1/fan_in), `B` factors are
    /// zero, so a fresh adapted model computes exactly the base function.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, s, d, f) = (config.vocab_size, config.max_seq_len, config.d_model, config.d_ff);
        let mut params = IndexMap::new();
        params.insert("tok_emb".to_string(), Tensor::randn(&[v, d], INIT_STD, &mut rng));
        params.insert("pos_emb".to_string(), Tensor::randn(&[s, d], INIT_STD, &mut rng));
        for l in 0..config.n_layers {
            params.insert(layer_name(l, "ln1.gamma"), Tensor::filled(&[d], 1.0));
            params.insert(layer_name(l, "ln1.beta"), Tensor::zeros(&[d]));
            for map in LINEAR_MAPS {
                let (i, o) = config.linear_dims(map);
                params.insert(layer_name(l, map), Tensor::randn(&[i, o], INIT_STD, &mut rng));
                if map == "attn.w_o" {
                    params.insert(layer_name(l, "ln2.gamma"), Tensor::filled(&[d], 1.0));
                    params.insert(layer_name(l, "ln2.beta"), Tensor::zeros(&[d]));
                }
                if map == "ff.w1" {
                    params.insert(layer_name(l, "ff.b1"), Tensor::zeros(&[f]));
                }
                if map == "ff.w2" {
                    params.insert(layer_name(l, "ff.b2"), Tensor::zeros(&[d]));
                }
            }
        }
        params.insert("ln_f.gamma".to_string(), Tensor::filled(&[d], 1.0));
        params.insert("ln_f.beta".to_string(), Tensor::zeros(&[d]));
        params.insert("lm_head".to_string(), Tensor::randn(&[d, v], INIT_STD, &mut rng));
        if config.adapters_enabled() {
            let r = config.adapter_rank;
            for l in 0..config.n_layers {
                for map in LINEAR_MAPS {
                    let (i, o) = config.linear_dims(map);
                    let a_std = 1.0 / (i as f64).sqrt();
                    params.insert(layer_name(l, &format!("{map}.lora_a")), Tensor::randn(&[i, r], a_std, &mut rng));
                    params.insert(layer_name(l, &format!("{map}.lora_b")), Tensor::zeros(&[r, o]));
                }
            }
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: IndexMap<String, Tensor>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params.get(name).ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.params.get_mut(name).ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_adapter(name: &str) -> bool {
        name.ends_with(".lora_a") || name.ends_with(".lora_b")
    }

    /// With adapters active only adapter factors train; base weights are frozen.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.config.adapters_enabled() {
            Self::is_adapter(name)
        } else {
            true
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).filter(|n| self.is_trainable(n)).collect()
    }

    /// Sets every adapter factor to zero.
    pub fn zero_adapters(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if Self::is_adapter(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// A linear map with its adapter delta `scale · A · B` folded in.
    pub fn effective_weight(&self, layer: usize, map: &str) -> Result<Tensor, ModelError> {
        let base = self.param(&layer_name(layer, map))?.clone();
        if !self.config.adapters_enabled() {
            return Ok(base);
        }
        let a = self.param(&layer_name(layer, &format!("{map}.lora_a")))?;
        let b = self.param(&layer_name(layer, &format!("{map}.lora_b")))?;
        let delta = matmul(a, b)?;
        let scale = self.config.adapter_scale();
        let mut out = base;
        for (w, d) in out.data_mut().iter_mut().zip(delta.data()) {
            *w += scale * d;
        }
        Ok(out)
    }

    /// Read-only snapshot of the final layer's query/key projections.
    pub fn projection_pair(&self) -> Result<ProjectionPair, ModelError> {
        let last = self.config.n_layers - 1;
        Ok(ProjectionPair {
            w_q: self.effective_weight(last, "attn.w_q")?,
            w_k: self.effective_weight(last, "attn.w_k")?,
        })
    }

    /// Copy with every adapter folded into its base weight and adapters removed.
    pub fn merged(&self) -> Result<StudentModel, ModelError> {
        let mut config = self.config.clone();
        config.adapter_rank = 0;
        let mut params = IndexMap::new();
        for (name, t) in &self.params {
            if Self::is_adapter(name) {
                continue;
            }
            params.insert(name.clone(), t.clone());
        }
        for l in 0..config.n_layers {
            for map in LINEAR_MAPS {
                params.insert(layer_name(l, map), self.effective_weight(l, map)?);
            }
        }
        Ok(Self { config, params })
    }
}

/// Final-layer query/key maps, `[d_model × d_model]` each, applied as `v · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny(rank: usize) -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 11, max_seq_len: 12, adapter_rank: rank, seed: 5 }
    }

    #[test]
    fn parameter_count_matches_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let heads = rng.random_range(1..4);
            let d = heads * rng.random_range(2..6);
            let cfg = ModelConfig {
                n_layers: rng.random_range(1..4),
                n_heads: heads,
                d_model: d,
                d_ff: rng.random_range(1..20),
                vocab_size: rng.random_range(2..30),
                max_seq_len: rng.random_range(1..20),
                adapter_rank: rng.random_range(0..d),
                seed: rng.random(),
            };
            let m = StudentModel::new(cfg.clone()).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count(), "{cfg:?}");
        }
    }

    #[test]
    fn rejects_indivisible_heads_and_large_rank() {
        let mut c = tiny(0);
        c.n_heads = 3;
        assert!(StudentModel::new(c).is_err());
        let mut c = tiny(0);
        c.adapter_rank = 8;
        assert!(StudentModel::new(c).is_err());
    }

    #[test]
    fn adapters_freeze_base_weights() {
        let m = StudentModel::new(tiny(2)).unwrap();
        assert!(m.trainable_names().iter().all(|n| StudentModel::is_adapter(n)));
        assert!(!m.is_trainable("lm_head"));
        let full = StudentModel::new(tiny(0)).unwrap();
        assert_eq!(full.trainable_names().len(), full.params().len());
    }

    #[test]
    fn projection_pair_is_pure_and_square() {
        let m = StudentModel::new(tiny(2)).unwrap();
        let a = m.projection_pair().unwrap();
        let b = m.projection_pair().unwrap();
        assert!(a.w_q.bitwise_eq(&b.w_q) && a.w_k.bitwise_eq(&b.w_k));
        assert_eq!(a.w_q.shape(), &[8, 8]);
        assert_eq!(a.w_k.shape(), &[8, 8]);
    }
}
