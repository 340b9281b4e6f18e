//! Distillation loop: score every teacher branch, fuse the branch losses,
//! step the optimizer.

mod eval;
mod ledger;
mod optim;

pub use eval::{evaluate, extract_answer, greedy_decode, predict, DECODE_CAP};
pub use ledger::{LedgerRow, MetricLedger};
pub use optim::{clip_global_norm, AdamW};

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::{ModelError, ParamGrads, StudentModel};
use crate::numerics::{NumericsError, Tape};
use crate::objectives::{
    branch_forward, branch_loss_with_grads, fused_loss_var, fused_loss_with_grads, BranchLossReport, LossConfig,
    ObjectiveError,
};
use crate::scoring::{
    score_from_outputs, score_instance, BranchOutputs, PreparedInstance, ScoreBundle, ScoringError, WeightingConfig,
};
use crate::seeds::derive_seed;

/// Number of finite batch losses kept for divergence reports.
const LOSS_HISTORY: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("teacher {teacher:?} has no rationale in instance {instance:?}")]
    UnknownTeacher { teacher: String, instance: String },
    #[error("training diverged at step {step}: non-finite loss (last finite losses {last_finite:?})")]
    Divergence { step: u64, last_finite: Vec<f64> },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How teacher weights are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Compact,
    DirectAverage,
    SingleTeacher(String),
    AblateMi,
    AblateCons,
    AblatePpl,
}

/// When teacher scores are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRefresh {
    /// Against live parameters at every visit.
    #[default]
    PerVisit,
    /// Once per epoch, against the parameters at its start.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub score_refresh: ScoreRefresh,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 4,
            mode: TrainMode::Compact,
            seed: 0,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            score_refresh: ScoreRefresh::PerVisit,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Weighting config with the mode's ablation applied.
    pub fn effective_weighting(&self, base: &WeightingConfig) -> WeightingConfig {
        let mut w = base.clone();
        match self.mode {
            TrainMode::AblateMi => w.beta1 = 0.0,
            TrainMode::AblateCons => w.beta2 = 0.0,
            TrainMode::AblatePpl => w.beta3 = 0.0,
            _ => {}
        }
        w
    }
}

/// Replaces score-derived weights when the mode fixes them.
pub fn mode_alpha(mode: &TrainMode, prepared: &PreparedInstance, scored: &[f64]) -> Result<Vec<f64>, TrainError> {
    let k = prepared.k();
    match mode {
        TrainMode::DirectAverage => Ok(vec![1.0 / k as f64; k]),
        TrainMode::SingleTeacher(id) => {
            let pos = prepared.branches.iter().position(|b| &b.teacher_id == id).ok_or_else(|| {
                TrainError::UnknownTeacher { teacher: id.clone(), instance: prepared.instance_id.clone() }
            })?;
            Ok((0..k).map(|i| if i == pos { 1.0 } else { 0.0 }).collect())
        }
        _ => Ok(scored.to_vec()),
    }
}

/// Result of one instance's forward/score/backward.
#[derive(Debug, Clone)]
pub struct InstanceStep {
    pub bundle: ScoreBundle,
    pub reports: Vec<BranchLossReport>,
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Scores the instance from the same forward passes that build the fused
/// loss, then back-propagates. `cached` replaces freshly computed scores.
pub fn instance_step(
    model: &StudentModel,
    prepared: &PreparedInstance,
    mode: &TrainMode,
    weighting: &WeightingConfig,
    loss: &LossConfig,
    cached: Option<&ScoreBundle>,
) -> Result<InstanceStep, TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let vars = prepared.branches.iter().map(|b| branch_forward(&bound, b)).collect::<Result<Vec<_>, _>>()?;
    let mut bundle = match cached {
        Some(b) => b.clone(),
        None => {
            let values: Vec<_> = vars.iter().map(|v| (v.logits.value().clone(), v.hidden.value().clone())).collect();
            let outputs: Vec<BranchOutputs> =
                values.iter().map(|(l, h)| BranchOutputs { logits: l, hidden: h }).collect();
            score_from_outputs(model, prepared, &outputs, weighting)?.0
        }
    };
    bundle.alpha = mode_alpha(mode, prepared, &bundle.alpha)?;
    let (fused, reports) = fused_loss_var(prepared, &vars, &bundle.alpha, loss)?;
    let value = fused.item();
    let mut grads = tape.backward(fused)?;
    Ok(InstanceStep { bundle, reports, loss: value, grads: bound.collect(&mut grads) })
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub ledger: MetricLedger,
    /// Mean fused loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch{epoch}.bin"))
}

/// Runs the distillation loop. With `checkpoint_dir`, writes the initial
/// parameters as epoch 0 and a checkpoint after every epoch.
pub fn train(
    mut model: StudentModel,
    dataset: &[PreparedInstance],
    trainer: &TrainerConfig,
    weighting: &WeightingConfig,
    loss: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    trainer.validate()?;
    weighting.validate()?;
    loss.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let weighting = trainer.effective_weighting(weighting);
    let mut opt = AdamW::new(
        &model,
        trainer.learning_rate,
        trainer.adam_beta1,
        trainer.adam_beta2,
        trainer.adam_eps,
        trainer.weight_decay,
    );
    let mut ledger = MetricLedger::new();
    let mut epoch_losses = Vec::with_capacity(trainer.epochs);
    let mut checkpoints = Vec::new();
    let mut history: VecDeque<f64> = VecDeque::with_capacity(LOSS_HISTORY);
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let p = checkpoint_path(dir, 0);
        model.save(&p)?;
        checkpoints.push(p);
    }
    let mut step: u64 = 0;
    for epoch in 1..=trainer.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(trainer.seed, "epoch", epoch as u64)));
        let cache: Option<HashMap<usize, ScoreBundle>> = match trainer.score_refresh {
            ScoreRefresh::PerVisit => None,
            ScoreRefresh::PerEpoch => Some(
                dataset
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| Ok((i, score_instance(&model, p, &weighting)?)))
                    .collect::<Result<_, TrainError>>()?,
            ),
        };
        let mut epoch_total = 0.0;
        for batch in order.chunks(trainer.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let cached = cache.as_ref().map(|c| &c[&i]);
                    instance_step(&model, &dataset[i], &trainer.mode, &weighting, loss, cached)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let batch_loss = results.iter().map(|r| r.loss).sum::<f64>() / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { step, last_finite: history.into_iter().collect() });
            }
            if history.len() == LOSS_HISTORY {
                history.pop_front();
            }
            history.push_back(batch_loss);
            let mut grads = ParamGrads::zeros_like(&model);
            for r in &results {
                grads.add_scaled(&r.grads, 1.0 / batch.len() as f64);
            }
            if !grads.is_finite() {
                return Err(TrainError::Divergence { step, last_finite: history.into_iter().collect() });
            }
            clip_global_norm(&mut grads, trainer.grad_clip);
            opt.step(&mut model, &grads);
            for r in &results {
                epoch_total += r.loss;
                let b = &r.bundle;
                for (k, rep) in r.reports.iter().enumerate() {
                    ledger.push(LedgerRow {
                        step,
                        epoch: epoch as u64,
                        instance_id: b.instance_id.clone(),
                        teacher_id: rep.teacher_id.clone(),
                        s_mi: b.s_mi[k],
                        s_cons: b.s_cons[k],
                        s_ppl: b.s_ppl[k],
                        score: b.score[k],
                        alpha: b.alpha[k],
                        l_sft: rep.l_sft,
                        l_mcon: rep.l_mcon,
                        l_total: rep.l_total,
                        l_final: r.loss,
                    });
                }
            }
        }
        epoch_losses.push(epoch_total / dataset.len() as f64);
        log::info!("epoch {epoch}: mean loss {:.6}", epoch_losses[epoch - 1]);
        if let Some(dir) = checkpoint_dir {
            let p = checkpoint_path(dir, epoch);
            model.save(&p)?;
            checkpoints.push(p);
        }
    }
    Ok(TrainOutcome { model, ledger, epoch_losses, checkpoints })
}

/// Largest per-parameter relative L2 gap between the fused-loss gradient and
/// the α-weighted sum of separately computed branch gradients.
pub fn verify_gradient_equivalence(
    model: &StudentModel,
    prepared: &PreparedInstance,
    alpha: &[f64],
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    let (_, fused, _) = fused_loss_with_grads(model, prepared, alpha, loss)?;
    let mut summed = ParamGrads::zeros_like(model);
    for k in 0..prepared.k() {
        let (_, g, _) = branch_loss_with_grads(model, prepared, k, alpha, loss)?;
        summed.add_scaled(&g, alpha[k]);
    }
    let mut worst: f64 = 0.0;
    for (a, b) in fused.0.iter().zip(&summed.0) {
        let (Some(a), Some(b)) = (a, b) else { continue };
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
