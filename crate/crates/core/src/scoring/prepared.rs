use std::ops::Range;

use crate::corpus::{CorpusError, Instance, Vocabulary};

/// One teacher branch laid out as student input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBranch {
    pub teacher_id: String,
    /// `[BOS] ++ question ++ rationale ++ [EOS]`.
    pub sequence: Vec<usize>,
    /// Index of the first rationale token within `sequence`.
    pub rationale_start: usize,
    /// Thinking-token flag per rationale position (EOS included).
    pub thinking: Vec<bool>,
    /// Sequence that teacher-forces the gold answer after the answer marker.
    /// `None` when `sequence` already does.
    pub answer_sequence: Option<Vec<usize>>,
    /// Rows of the answer sequence whose logits predict the gold tokens.
    pub answer_rows: Range<usize>,
}

impl PreparedBranch {
    pub fn rationale(&self) -> &[usize] {
        &self.sequence[self.rationale_start..]
    }

    pub fn rationale_len(&self) -> usize {
        self.sequence.len() - self.rationale_start
    }

    pub fn answer_input(&self) -> &[usize] {
        self.answer_sequence.as_deref().unwrap_or(&self.sequence)
    }
}

/// An instance tokenized once for scoring, losses and traces.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub instance_id: String,
    pub gold: Vec<usize>,
    pub branches: Vec<PreparedBranch>,
}

impl PreparedInstance {
    pub fn new(instance: &Instance, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        let gold = vocab.tokenize(&instance.gold_answer)?;
        if gold.is_empty() {
            return Err(CorpusError::EmptyGold);
        }
        let mut prefix = vec![vocab.bos_id()];
        prefix.extend(vocab.tokenize(&instance.question)?);
        let start = prefix.len();
        let branches = instance
            .rationales
            .iter()
            .map(|r| {
                let mut sequence = prefix.clone();
                sequence.extend_from_slice(&r.token_ids);
                let thinking = r.token_ids.iter().map(|&t| vocab.is_thinking(t)).collect();
                let marker = start + r.marker_position();
                let mut forced = sequence[..=marker].to_vec();
                forced.extend_from_slice(&gold);
                forced.push(vocab.eos_id());
                let answer_sequence = (forced != sequence).then_some(forced);
                PreparedBranch {
                    teacher_id: r.teacher_id.clone(),
                    sequence,
                    rationale_start: start,
                    thinking,
                    answer_sequence,
                    answer_rows: marker..marker + gold.len(),
                }
            })
            .collect();
        Ok(Self { instance_id: instance.id.clone(), gold, branches })
    }

    pub fn k(&self) -> usize {
        self.branches.len()
    }

    /// Longest input any branch feeds the model.
    pub fn max_len(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.sequence.len().max(b.answer_input().len()))
            .max()
            .unwrap_or(0)
    }
}
