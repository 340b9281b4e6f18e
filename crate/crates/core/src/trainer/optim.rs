use crate::model::{ParamGrads, StudentModel};

/// Adam with decoupled weight decay, over the model's trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(model: &StudentModel, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = ParamGrads::zeros_like(model).0;
        Self { lr, beta1, beta2, eps, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut StudentModel, grads: &ParamGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = model.params().keys().cloned().collect();
        for (i, name) in names.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads.0[i], &mut self.m[i], &mut self.v[i]) else {
                continue;
            };
            let w = model.param_mut(name).expect("parameter list is fixed").data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                w[j] -= self.lr * (update + self.weight_decay * w[j]);
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> StudentModel {
        StudentModel::new(ModelConfig { n_layers: 1, n_heads: 1, d_model: 4, d_ff: 4, vocab_size: 5, max_seq_len: 4, adapter_rank: 0, seed: 1 })
            .unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = model();
        let before = m.param("lm_head").unwrap().clone();
        let mut g = ParamGrads::zeros_like(&m);
        let idx = m.params().get_index_of("lm_head").unwrap();
        g.0[idx].as_mut().unwrap().iter_mut().for_each(|x| *x = 0.3);
        let mut opt = AdamW::new(&m, 0.01, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut m, &g);
        for (a, b) in before.data().iter().zip(m.param("lm_head").unwrap().data()) {
            assert!((a - b - 0.01).abs() < 1e-9);
        }
        assert_eq!(m.param("tok_emb").unwrap(), &model().params()["tok_emb"].clone());
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut m = model();
        let before = m.param("tok_emb").unwrap().clone();
        let g = ParamGrads::zeros_like(&m);
        let mut opt = AdamW::new(&m, 0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut m, &g);
        for (a, b) in before.data().iter().zip(m.param("tok_emb").unwrap().data()) {
            assert!((b - a * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let m = model();
        let mut g = ParamGrads::zeros_like(&m);
        g.0[0].as_mut().unwrap()[0] = 3.0;
        g.0[1].as_mut().unwrap()[0] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}
