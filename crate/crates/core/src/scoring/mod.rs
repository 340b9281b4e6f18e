//! Per-instance teacher scores (adaptability, consensus, difficulty) and
//! their fusion into simplex weights.

mod prepared;
mod trace;

pub use prepared::{PreparedBranch, PreparedInstance};
pub use trace::{read_trace_csv, trace_rows, write_trace_csv, MiTraceRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{mean_gold_logprob, ModelError, ProjectionPair, StudentModel};
use crate::numerics::{log_softmax_slice, matmul, softmax_slice, Tensor};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("invalid weighting config: {0}")]
    InvalidConfig(String),
    #[error("consensus needs at least 2 rationales, got {0}")]
    TooFewBranches(usize),
    #[error("score vectors have mismatched lengths {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("no teachers to weight")]
    Empty,
    #[error("branch index {index} out of range for {k} branches")]
    BranchIndex { index: usize, k: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How `I_proxy(t)` conditions on the rationale prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiProbe {
    /// LM head applied directly to the hidden state at `t`.
    #[default]
    SingleState,
    /// Gold answer appended after the prefix and teacher-forced.
    ForcedContinuation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub tau: f64,
    pub epsilon_mask: f64,
    pub zscore_floor: f64,
    pub mi_probe: MiProbe,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self { beta1: 1.0, beta2: 1.0, beta3: 1.0, tau: 0.5, epsilon_mask: 0.1, zscore_floor: 1e-9, mi_probe: MiProbe::SingleState }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(ScoringError::InvalidConfig(format!("{name} must be a non-negative real, got {b}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ScoringError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon_mask > 0.0 && self.epsilon_mask <= 1.0) {
            return Err(ScoringError::InvalidConfig(format!("epsilon_mask must lie in (0, 1], got {}", self.epsilon_mask)));
        }
        if !(self.zscore_floor.is_finite() && self.zscore_floor > 0.0) {
            return Err(ScoringError::InvalidConfig(format!("zscore_floor must be positive, got {}", self.zscore_floor)));
        }
        Ok(())
    }
}

/// Scores and weights of every teacher on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub instance_id: String,
    pub s_mi: Vec<f64>,
    pub s_cons: Vec<f64>,
    pub s_ppl: Vec<f64>,
    pub score: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Proxy gold-answer likelihood along one rationale.
#[derive(Debug, Clone, PartialEq)]
pub struct MiTrace {
    pub i_proxy: Vec<f64>,
    /// `delta_i[t] = i_proxy[t + 1] - i_proxy[t]`.
    pub delta_i: Vec<f64>,
    pub mask: Vec<f64>,
}

impl MiTrace {
    /// Positions `t ≥ 1` with a positive gain at full mask weight.
    pub fn peaks(&self) -> Vec<usize> {
        self.delta_i
            .iter()
            .enumerate()
            .filter(|&(t, &d)| d > 0.0 && self.mask[t + 1] == 1.0)
            .map(|(t, _)| t + 1)
            .collect()
    }
}

pub fn mask_weights(thinking: &[bool], epsilon: f64) -> Vec<f64> {
    thinking.iter().map(|&t| if t { 1.0 } else { epsilon }).collect()
}

/// `S_MI = Σ_t ReLU(I(t) − I(t−1)) · M_t` over `t ≥ 1`.
pub fn mi_from_proxy(i_proxy: Vec<f64>, mask: Vec<f64>) -> (f64, MiTrace) {
    let delta_i: Vec<f64> = i_proxy.windows(2).map(|w| w[1] - w[0]).collect();
    let s = delta_i.iter().zip(&mask[1.min(mask.len())..]).map(|(d, m)| d.max(0.0) * m).sum();
    (s, MiTrace { i_proxy, delta_i, mask })
}

/// `I_proxy(t)` for each rationale position from a forward pass over the branch.
pub fn i_proxy_from_logits(
    model: &StudentModel,
    branch: &PreparedBranch,
    gold: &[usize],
    logits: &Tensor,
    probe: MiProbe,
) -> Result<Vec<f64>, ScoringError> {
    let start = branch.rationale_start;
    (0..branch.rationale_len())
        .map(|t| match probe {
            MiProbe::SingleState => Ok(mean_gold_logprob(logits.row(start + t), gold)?),
            MiProbe::ForcedContinuation => {
                let mut seq = branch.sequence[..=start + t].to_vec();
                seq.extend_from_slice(gold);
                let tr = model.forward(&seq[..seq.len() - 1], false)?;
                let mut total = 0.0;
                for (j, &g) in gold.iter().enumerate() {
                    total += log_softmax_slice(tr.logits.row(start + t + j))[g];
                }
                Ok(total / gold.len() as f64)
            }
        })
        .collect()
}

pub fn mi_adaptability(
    model: &StudentModel,
    prepared: &PreparedInstance,
    k: usize,
    config: &WeightingConfig,
) -> Result<(f64, MiTrace), ScoringError> {
    let branch = branch(prepared, k)?;
    let tr = model.forward(&branch.sequence, false)?;
    let i_proxy = i_proxy_from_logits(model, branch, &prepared.gold, &tr.logits, config.mi_probe)?;
    Ok(mi_from_proxy(i_proxy, mask_weights(&branch.thinking, config.epsilon_mask)))
}

fn branch(prepared: &PreparedInstance, k: usize) -> Result<&PreparedBranch, ScoringError> {
    prepared.branches.get(k).ok_or(ScoringError::BranchIndex { index: k, k: prepared.k() })
}

/// Degree centrality in the student-projected rationale graph.
///
/// Rows of `A` are softmax over `(v_i W_Q)·(v_j W_K) / √d`; `S_cons,k` is the
/// off-diagonal column sum.
pub fn consensus_from_states(states: &[&[f64]], pair: &ProjectionPair) -> Result<(Vec<f64>, Tensor), ScoringError> {
    let k = states.len();
    if k < 2 {
        return Err(ScoringError::TooFewBranches(k));
    }
    let d = states[0].len();
    let v = Tensor::matrix(k, d, states.iter().flat_map(|s| s.iter().copied()).collect())?;
    let q = matmul(&v, &pair.w_q)?;
    let kg = matmul(&v, &pair.w_k)?;
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut a = Vec::with_capacity(k * k);
    for i in 0..k {
        let logits: Vec<f64> = (0..k)
            .map(|j| q.row(i).iter().zip(kg.row(j)).map(|(x, y)| x * y).sum::<f64>() * inv_sqrt)
            .collect();
        a.extend(softmax_slice(&logits));
    }
    let a = Tensor::matrix(k, k, a)?;
    let s_cons = (0..k).map(|c| (0..k).filter(|&r| r != c).map(|r| a.at(r, c)).sum()).collect();
    Ok((s_cons, a))
}

pub fn consensus(model: &StudentModel, prepared: &PreparedInstance) -> Result<(Vec<f64>, Tensor), ScoringError> {
    let mut states = Vec::with_capacity(prepared.k());
    for b in &prepared.branches {
        let tr = model.forward(&b.sequence, false)?;
        states.push(tr.hidden_states.row(b.sequence.len() - 1).to_vec());
    }
    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    consensus_from_states(&refs, &model.projection_pair()?)
}

/// Mean NLL of the rationale tokens under teacher forcing.
pub fn difficulty_from_logits(logits: &Tensor, branch: &PreparedBranch) -> f64 {
    let start = branch.rationale_start;
    let rationale = branch.rationale();
    let nll: f64 = rationale
        .iter()
        .enumerate()
        .map(|(t, &y)| -log_softmax_slice(logits.row(start + t - 1))[y])
        .sum();
    nll / rationale.len() as f64
}

pub fn difficulty(model: &StudentModel, prepared: &PreparedInstance, k: usize) -> Result<f64, ScoringError> {
    let b = branch(prepared, k)?;
    let tr = model.forward(&b.sequence, false)?;
    Ok(difficulty_from_logits(&tr.logits, b))
}

/// Population z-score; a spread below `floor` maps to all zeros.
pub fn zscore(x: &[f64], floor: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= floor) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// `Score = β1·N(S_MI) + β2·N(S_cons) − β3·N(S_PPL)` and `α = softmax(Score/τ)`.
pub fn fuse_weights(
    s_mi: &[f64],
    s_cons: &[f64],
    s_ppl: &[f64],
    config: &WeightingConfig,
) -> Result<(Vec<f64>, Vec<f64>), ScoringError> {
    if s_mi.len() != s_cons.len() || s_mi.len() != s_ppl.len() {
        return Err(ScoringError::LengthMismatch(vec![s_mi.len(), s_cons.len(), s_ppl.len()]));
    }
    if s_mi.is_empty() {
        return Err(ScoringError::Empty);
    }
    let (n_mi, n_cons, n_ppl) =
        (zscore(s_mi, config.zscore_floor), zscore(s_cons, config.zscore_floor), zscore(s_ppl, config.zscore_floor));
    let score: Vec<f64> = (0..s_mi.len())
        .map(|k| config.beta1 * n_mi[k] + config.beta2 * n_cons[k] - config.beta3 * n_ppl[k])
        .collect();
    let scaled: Vec<f64> = score.iter().map(|s| s / config.tau).collect();
    Ok((score, softmax_slice(&scaled)))
}

/// Forward-pass values for one branch, from a tape or a plain forward.
pub struct BranchOutputs<'a> {
    pub logits: &'a Tensor,
    pub hidden: &'a Tensor,
}

/// Scores an instance from already-computed branch forwards.
pub fn score_from_outputs(
    model: &StudentModel,
    prepared: &PreparedInstance,
    outputs: &[BranchOutputs<'_>],
    config: &WeightingConfig,
) -> Result<(ScoreBundle, Vec<MiTrace>), ScoringError> {
    let k = prepared.k();
    if outputs.len() != k {
        return Err(ScoringError::LengthMismatch(vec![k, outputs.len()]));
    }
    let mut s_mi = Vec::with_capacity(k);
    let mut s_ppl = Vec::with_capacity(k);
    let mut traces = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    for (b, out) in prepared.branches.iter().zip(outputs) {
        let i_proxy = i_proxy_from_logits(model, b, &prepared.gold, out.logits, config.mi_probe)?;
        let (s, trace) = mi_from_proxy(i_proxy, mask_weights(&b.thinking, config.epsilon_mask));
        s_mi.push(s);
        traces.push(trace);
        s_ppl.push(difficulty_from_logits(out.logits, b));
        states.push(out.hidden.row(b.sequence.len() - 1));
    }
    let (s_cons, _) = consensus_from_states(&states, &model.projection_pair()?)?;
    let (score, alpha) = fuse_weights(&s_mi, &s_cons, &s_ppl, config)?;
    let bundle = ScoreBundle { instance_id: prepared.instance_id.clone(), s_mi, s_cons, s_ppl, score, alpha };
    Ok((bundle, traces))
}

pub fn score_instance_with_traces(
    model: &StudentModel,
    prepared: &PreparedInstance,
    config: &WeightingConfig,
) -> Result<(ScoreBundle, Vec<MiTrace>), ScoringError> {
    let traces = prepared
        .branches
        .iter()
        .map(|b| model.forward(&b.sequence, false))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs: Vec<BranchOutputs> =
        traces.iter().map(|t| BranchOutputs { logits: &t.logits, hidden: &t.hidden_states }).collect();
    score_from_outputs(model, prepared, &outputs, config)
}

pub fn score_instance(
    model: &StudentModel,
    prepared: &PreparedInstance,
    config: &WeightingConfig,
) -> Result<ScoreBundle, ScoringError> {
    Ok(score_instance_with_traces(model, prepared, config)?.0)
}
