use rayon::prelude::*;

use crate::corpus::{Instance, Vocabulary};
use crate::model::StudentModel;

use super::TrainError;

/// Hard cap on decoded sequence length.
pub const DECODE_CAP: usize = 256;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` until EOS or the length cap.
pub fn greedy_decode(model: &StudentModel, prompt: &[usize], eos: usize) -> Result<Vec<usize>, TrainError> {
    let cap = DECODE_CAP.min(model.config().max_seq_len);
    let mut seq = prompt.to_vec();
    let mut generated = Vec::new();
    while seq.len() < cap {
        let tr = model.forward(&seq, false)?;
        let next = argmax(tr.logits.row(seq.len() - 1));
        if next == eos {
            break;
        }
        seq.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Text after the first answer marker, or `None` when no marker was produced.
pub fn extract_answer(generated: &[usize], vocab: &Vocabulary) -> Option<String> {
    let pos = generated.iter().position(|&t| t == vocab.ans_id())?;
    Some(vocab.detokenize(&generated[pos + 1..]))
}

/// Greedy prediction for one instance's question.
pub fn predict(model: &StudentModel, instance: &Instance, vocab: &Vocabulary) -> Result<Option<String>, TrainError> {
    let mut prompt = vec![vocab.bos_id()];
    prompt.extend(vocab.tokenize(&instance.question)?);
    let generated = greedy_decode(model, &prompt, vocab.eos_id())?;
    Ok(extract_answer(&generated, vocab))
}

/// Exact-match accuracy of greedy predictions against gold answers.
pub fn evaluate(model: &StudentModel, dataset: &[Instance], vocab: &Vocabulary) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let hits = dataset
        .par_iter()
        .map(|inst| {
            let gold = vocab.detokenize(&vocab.tokenize(&inst.gold_answer)?);
            Ok(predict(model, inst, vocab)?.is_some_and(|p| p == gold))
        })
        .collect::<Result<Vec<bool>, TrainError>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len() as f64)
}
