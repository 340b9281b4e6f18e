use crate::numerics::{concat_cols, log_softmax_slice, matmul, Gradients, Tape, Tensor, Var};

use super::{layer_name, ModelError, StudentModel, LINEAR_MAPS};

/// Parameters recorded on a tape, index-aligned with [`StudentModel::params`].
pub struct BoundModel<'t, 'm> {
    model: &'m StudentModel,
    vars: Vec<Var<'t>>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars<'t> {
    /// Post-final-LayerNorm states `[T × d_model]`.
    pub hidden: Var<'t>,
    /// `[T × V]`.
    pub logits: Var<'t>,
    /// Residual stream after each block, `[T × d_model]` per layer.
    pub layer_states: Vec<Var<'t>>,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub token_ids: Vec<usize>,
    pub hidden_states: Tensor,
    pub logits: Tensor,
    pub all_layer_states: Option<Vec<Tensor>>,
}

impl StudentModel {
    /// Records every parameter as a leaf. With `with_grad`, trainable
    /// parameters receive gradients; otherwise all leaves are frozen.
    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape, with_grad: bool) -> BoundModel<'t, 'm> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_requires_grad(with_grad && self.is_trainable(name));
                tape.leaf(t)
            })
            .collect();
        BoundModel { model: self, vars }
    }

    /// Gradient-free forward pass over `ids`.
    pub fn forward(&self, ids: &[usize], capture_layers: bool) -> Result<ForwardTrace, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(ids)?;
        let all_layer_states =
            capture_layers.then(|| out.layer_states.iter().map(|v| v.value().clone()).collect());
        let hidden_states = out.hidden.value().clone();
        let logits = out.logits.value().clone();
        Ok(ForwardTrace { token_ids: ids.to_vec(), hidden_states, logits, all_layer_states })
    }

    /// Scores a gold answer from a single hidden state through the LM head.
    pub fn answer_logprob_from_state(&self, h: &[f64], gold: &[usize]) -> Result<f64, ModelError> {
        answer_logprob_from_state(self, h, gold)
    }
}

impl<'t, 'm> BoundModel<'t, 'm> {
    pub fn model(&self) -> &'m StudentModel {
        self.model
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>, ModelError> {
        self.model
            .params
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    fn linear(&self, x: Var<'t>, layer: usize, map: &str) -> Result<Var<'t>, ModelError> {
        let y = x.matmul(self.var(&layer_name(layer, map))?)?;
        if !self.model.config.adapters_enabled() {
            return Ok(y);
        }
        let a = self.var(&layer_name(layer, &format!("{map}.lora_a")))?;
        let b = self.var(&layer_name(layer, &format!("{map}.lora_b")))?;
        let delta = x.matmul(a)?.matmul(b)?.scale(self.model.config.adapter_scale());
        Ok(y.add(delta)?)
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardVars<'t>, ModelError> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = self.var("tok_emb")?.embedding(ids)?.add(self.var("pos_emb")?.embedding(&positions)?)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut layer_states = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let h = x.layer_norm(self.var(&layer_name(l, "ln1.gamma"))?, self.var(&layer_name(l, "ln1.beta"))?)?;
            let q = self.linear(h, l, LINEAR_MAPS[0])?;
            let k = self.linear(h, l, LINEAR_MAPS[1])?;
            let v = self.linear(h, l, LINEAR_MAPS[2])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = q.slice_cols(s, e)?;
                let kh = k.slice_cols(s, e)?;
                let vh = v.slice_cols(s, e)?;
                let attn = qh.matmul(kh.transpose()?)?.scale(inv_sqrt).causal_softmax()?;
                heads.push(attn.matmul(vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
            x = x.add(self.linear(merged, l, LINEAR_MAPS[3])?)?;
            let h = x.layer_norm(self.var(&layer_name(l, "ln2.gamma"))?, self.var(&layer_name(l, "ln2.beta"))?)?;
            let f = self.linear(h, l, LINEAR_MAPS[4])?.add_row(self.var(&layer_name(l, "ff.b1"))?)?.relu();
            let f = self.linear(f, l, LINEAR_MAPS[5])?.add_row(self.var(&layer_name(l, "ff.b2"))?)?;
            x = x.add(f)?;
            layer_states.push(x);
        }
        let hidden = x.layer_norm(self.var("ln_f.gamma")?, self.var("ln_f.beta")?)?;
        let logits = hidden.matmul(self.var("lm_head")?)?;
        Ok(ForwardVars { hidden, logits, layer_states })
    }

    /// Pulls per-parameter gradients out of a finished backward pass.
    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        ParamGrads(self.vars.iter().map(|&v| grads.take(v)).collect())
    }
}

/// Mean log-probability of `gold` under one row of logits.
pub fn mean_gold_logprob(logits_row: &[f64], gold: &[usize]) -> Result<f64, ModelError> {
    if gold.is_empty() {
        return Err(ModelError::EmptyGold);
    }
    let lp = log_softmax_slice(logits_row);
    let mut total = 0.0;
    for &g in gold {
        let v = *lp.get(g).ok_or(ModelError::TokenOutOfRange { id: g, vocab_size: lp.len() })?;
        total += v;
    }
    Ok(total / gold.len() as f64)
}

pub fn answer_logprob_from_state(model: &StudentModel, h: &[f64], gold: &[usize]) -> Result<f64, ModelError> {
    let d = model.config.d_model;
    if h.len() != d {
        return Err(ModelError::StateDim { got: h.len(), expected: d });
    }
    let state = Tensor::matrix(1, d, h.to_vec())?;
    let logits = matmul(&state, model.param("lm_head")?)?;
    mean_gold_logprob(logits.data(), gold)
}

/// Gradients aligned with the model's parameter order; `None` for frozen ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(model: &StudentModel) -> Self {
        ParamGrads(
            model
                .params
                .iter()
                .map(|(n, t)| model.is_trainable(n).then(|| vec![0.0; t.numel()]))
                .collect(),
        )
    }

    /// `self += c · other`, entry by entry in fixed order.
    pub fn add_scaled(&mut self, other: &ParamGrads, c: f64) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(t) = theirs {
                let m = mine.get_or_insert_with(|| vec![0.0; t.len()]);
                for (a, b) in m.iter_mut().zip(t) {
                    *a += c * b;
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn get<'a>(&'a self, model: &StudentModel, name: &str) -> Option<&'a [f64]> {
        let i = model.params.get_index_of(name)?;
        self.0[i].as_deref()
    }

    pub fn max_abs_diff(&self, other: &ParamGrads) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        worst = worst.max((x - y).abs());
                    }
                }
                (Some(g), None) | (None, Some(g)) => {
                    for x in g {
                        worst = worst.max(x.abs());
                    }
                }
                (None, None) => {}
            }
        }
        worst
    }
}
