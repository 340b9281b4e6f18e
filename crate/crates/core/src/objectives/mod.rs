//! Branch losses (SFT + answer-consistency) and their weighted fusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundModel, ModelError, ParamGrads, StudentModel};
use crate::numerics::{softmax_slice, NumericsError, Tape, Tensor, Var};
use crate::scoring::{PreparedBranch, PreparedInstance};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("alpha has {got} entries for {k} branches")]
    AlphaLength { got: usize, k: usize },
    #[error("alpha is not on the simplex (sum {sum})")]
    NotSimplex { sum: f64 },
    #[error("branch index {index} out of range for {k} branches")]
    BranchIndex { index: usize, k: usize },
    #[error("answer spans differ in length: {0:?}")]
    AnswerLengthMismatch(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetrization {
    /// `½(KL(p‖q) + KL(q‖p))`.
    #[default]
    SymmetricMean,
    /// `KL(p_k ‖ p_j)` only.
    ForwardOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_mcon: f64,
    pub mcon_symmetrization: Symmetrization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_mcon: 0.1, mcon_symmetrization: Symmetrization::SymmetricMean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lambda_mcon.is_finite() && self.lambda_mcon >= 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "lambda_mcon must be a non-negative real, got {}",
                self.lambda_mcon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLossReport {
    pub teacher_id: String,
    pub l_sft: f64,
    pub l_mcon: f64,
    pub l_total: f64,
}

/// Tape handles for one branch.
pub struct BranchVars<'t> {
    pub logits: Var<'t>,
    pub hidden: Var<'t>,
    /// Logit rows predicting the gold answer, `[|gold| × V]`.
    pub answer_logits: Var<'t>,
}

pub fn branch_forward<'t>(bound: &BoundModel<'t, '_>, branch: &PreparedBranch) -> Result<BranchVars<'t>, ObjectiveError> {
    let out = bound.forward(&branch.sequence)?;
    let answer_source = match &branch.answer_sequence {
        Some(seq) => bound.forward(seq)?.logits,
        None => out.logits,
    };
    let answer_logits = answer_source.slice_rows(branch.answer_rows.start, branch.answer_rows.end)?;
    Ok(BranchVars { logits: out.logits, hidden: out.hidden, answer_logits })
}

/// Token-summed NLL of the rationale given the question.
pub fn sft_loss_var<'t>(vars: &BranchVars<'t>, branch: &PreparedBranch) -> Result<Var<'t>, ObjectiveError> {
    let start = branch.rationale_start;
    let rows = vars.logits.slice_rows(start - 1, branch.sequence.len() - 1)?;
    Ok(rows.cross_entropy(branch.rationale())?)
}

fn check_alpha(alpha: &[f64], k: usize) -> Result<(), ObjectiveError> {
    if alpha.len() != k {
        return Err(ObjectiveError::AlphaLength { got: alpha.len(), k });
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::NotSimplex { sum });
    }
    Ok(())
}

/// Pairwise divergences between answer distributions, built lazily.
struct Divergences<'a, 't> {
    vars: &'a [BranchVars<'t>],
    kl: Vec<Vec<Option<Var<'t>>>>,
    mode: Symmetrization,
    n_answer: f64,
}

impl<'a, 't> Divergences<'a, 't> {
    fn new(vars: &'a [BranchVars<'t>], mode: Symmetrization) -> Result<Self, ObjectiveError> {
        let lens: Vec<usize> = vars.iter().map(|v| v.answer_logits.shape()[0]).collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(ObjectiveError::AnswerLengthMismatch(lens));
        }
        let k = vars.len();
        Ok(Self { vars, kl: vec![vec![None; k]; k], mode, n_answer: lens.first().copied().unwrap_or(1) as f64 })
    }

    fn kl(&mut self, p: usize, q: usize) -> Result<Var<'t>, ObjectiveError> {
        if let Some(v) = self.kl[p][q] {
            return Ok(v);
        }
        let v = self.vars[p].answer_logits.kl_div(self.vars[q].answer_logits)?;
        self.kl[p][q] = Some(v);
        Ok(v)
    }

    /// `D(P_k, P_j)` averaged over answer positions.
    fn divergence(&mut self, k: usize, j: usize) -> Result<Var<'t>, ObjectiveError> {
        let summed = match self.mode {
            Symmetrization::SymmetricMean => self.kl(k, j)?.add(self.kl(j, k)?)?.scale(0.5),
            Symmetrization::ForwardOnly => self.kl(k, j)?,
        };
        Ok(summed.scale(1.0 / self.n_answer))
    }

    /// `Σ_{j≠k} α_j · D(P_k, P_j)`, with `α` as constants.
    fn mcon(&mut self, k: usize, alpha: &[f64], tape: &'t Tape) -> Result<Var<'t>, ObjectiveError> {
        let mut total: Option<Var<'t>> = None;
        for (j, &a) in alpha.iter().enumerate() {
            if j == k || a == 0.0 {
                continue;
            }
            let term = self.divergence(k, j)?.scale(a);
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
    }
}

fn tape_of<'t>(vars: &[BranchVars<'t>]) -> &'t Tape {
    vars[0].logits.tape()
}

/// `L_MCon,k` on the tape; gradients reach every branch it touches.
pub fn mcon_loss_var<'t>(
    vars: &[BranchVars<'t>],
    k: usize,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<Var<'t>, ObjectiveError> {
    check_alpha(alpha, vars.len())?;
    if k >= vars.len() {
        return Err(ObjectiveError::BranchIndex { index: k, k: vars.len() });
    }
    Divergences::new(vars, config.mcon_symmetrization)?.mcon(k, alpha, tape_of(vars))
}

pub fn mcon_loss(
    model: &StudentModel,
    prepared: &PreparedInstance,
    k: usize,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<f64, ObjectiveError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let vars = forward_all(&bound, prepared)?;
    Ok(mcon_loss_var(&vars, k, alpha, config)?.item())
}

pub fn sft_loss(model: &StudentModel, prepared: &PreparedInstance, k: usize) -> Result<f64, ObjectiveError> {
    let b = prepared.branches.get(k).ok_or(ObjectiveError::BranchIndex { index: k, k: prepared.k() })?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let out = bound.forward(&b.sequence)?;
    let vars = BranchVars { logits: out.logits, hidden: out.hidden, answer_logits: out.logits };
    Ok(sft_loss_var(&vars, b)?.item())
}

/// `ℒ_k = L_SFT,k + λ·L_MCon,k` on the tape, plus its report.
pub fn branch_loss_var<'t>(
    prepared: &PreparedInstance,
    vars: &[BranchVars<'t>],
    k: usize,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(Var<'t>, BranchLossReport), ObjectiveError> {
    check_alpha(alpha, prepared.k())?;
    if k >= prepared.k() {
        return Err(ObjectiveError::BranchIndex { index: k, k: prepared.k() });
    }
    let mut div = Divergences::new(vars, config.mcon_symmetrization)?;
    branch_loss_inner(prepared, vars, &mut div, k, alpha, config)
}

fn branch_loss_inner<'t>(
    prepared: &PreparedInstance,
    vars: &[BranchVars<'t>],
    div: &mut Divergences<'_, 't>,
    k: usize,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(Var<'t>, BranchLossReport), ObjectiveError> {
    let sft = sft_loss_var(&vars[k], &prepared.branches[k])?;
    let mcon = div.mcon(k, alpha, tape_of(vars))?;
    let total = if config.lambda_mcon == 0.0 { sft } else { sft.add(mcon.scale(config.lambda_mcon))? };
    let report = BranchLossReport {
        teacher_id: prepared.branches[k].teacher_id.clone(),
        l_sft: sft.item(),
        l_mcon: mcon.item(),
        l_total: total.item(),
    };
    Ok((total, report))
}

/// `ℒ_Final = Σ_k α_k·ℒ_k` on one tape.
pub fn fused_loss_var<'t>(
    prepared: &PreparedInstance,
    vars: &[BranchVars<'t>],
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(Var<'t>, Vec<BranchLossReport>), ObjectiveError> {
    check_alpha(alpha, prepared.k())?;
    let mut div = Divergences::new(vars, config.mcon_symmetrization)?;
    let mut total: Option<Var<'t>> = None;
    let mut reports = Vec::with_capacity(prepared.k());
    for k in 0..prepared.k() {
        let (lk, report) = branch_loss_inner(prepared, vars, &mut div, k, alpha, config)?;
        reports.push(report);
        if alpha[k] == 0.0 {
            continue;
        }
        let term = lk.scale(alpha[k]);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| tape_of(vars).constant(Tensor::scalar(0.0)));
    Ok((total, reports))
}

fn forward_all<'t>(bound: &BoundModel<'t, '_>, prepared: &PreparedInstance) -> Result<Vec<BranchVars<'t>>, ObjectiveError> {
    prepared.branches.iter().map(|b| branch_forward(bound, b)).collect()
}

/// Next-token probabilities over the gold answer for branch `k`.
pub fn answer_distribution(model: &StudentModel, prepared: &PreparedInstance, k: usize) -> Result<Tensor, ObjectiveError> {
    let b = prepared.branches.get(k).ok_or(ObjectiveError::BranchIndex { index: k, k: prepared.k() })?;
    let tr = model.forward(b.answer_input(), false)?;
    let v = tr.logits.cols();
    let mut data = Vec::with_capacity(b.answer_rows.len() * v);
    for row in b.answer_rows.clone() {
        data.extend(softmax_slice(tr.logits.row(row)));
    }
    Ok(Tensor::matrix(b.answer_rows.len(), v, data)?)
}

/// Per-branch loss values on a frozen snapshot.
pub fn branch_losses(
    model: &StudentModel,
    prepared: &PreparedInstance,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<Vec<BranchLossReport>, ObjectiveError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let vars = forward_all(&bound, prepared)?;
    Ok(fused_loss_var(prepared, &vars, alpha, config)?.1)
}

/// `ℒ_Final` and its gradient from a single tape.
pub fn fused_loss_with_grads(
    model: &StudentModel,
    prepared: &PreparedInstance,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(f64, ParamGrads, Vec<BranchLossReport>), ObjectiveError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let vars = forward_all(&bound, prepared)?;
    let (loss, reports) = fused_loss_var(prepared, &vars, alpha, config)?;
    let value = loss.item();
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&mut grads), reports))
}

/// `ℒ_k` alone and its gradient, on a fresh tape.
pub fn branch_loss_with_grads(
    model: &StudentModel,
    prepared: &PreparedInstance,
    k: usize,
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(f64, ParamGrads, BranchLossReport), ObjectiveError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let vars = forward_all(&bound, prepared)?;
    let (loss, report) = branch_loss_var(prepared, &vars, k, alpha, config)?;
    let value = loss.item();
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&mut grads), report))
}
