//! Synthetic reasoning corpora: vocabulary, scripted teachers and JSONL IO.

mod dataset;
mod generate;
mod vocab;

pub use dataset::{answer_span, load_jsonl, read_jsonl, save_jsonl, write_jsonl, Instance, Rationale};
pub use generate::{
    generate_dataset, reversal_probe_corpus, script_rationale, task_probe_corpus, Operator, Problem,
    ScriptedRationale, StepOrder, Style, TaskConfig, TeacherProfile, SELF_CORRECTION_RATE,
};
pub use vocab::{Vocabulary, ANS_MARKER, BOS, EOS, PAD, THINKING_TOKENS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("answer marker #### is absent")]
    MissingMarker,
    #[error("answer marker #### appears more than once, at token positions {0:?}")]
    MultipleMarkers(Vec<usize>),
    #[error("answer span after #### is empty")]
    EmptyAnswer,
    #[error("gold_answer is empty")]
    EmptyGold,
    #[error("an instance needs at least 2 rationales, got {0}")]
    TooFewRationales(usize),
    #[error("duplicate teacher id {0:?}")]
    DuplicateTeacher(String),
    #[error("no teacher profiles given")]
    NoTeachers,
    #[error("dataset size must be positive")]
    EmptyDataset,
    #[error("invalid task configuration: {0}")]
    InvalidTask(String),
    #[error("row {row}: {source}")]
    Row { row: usize, source: Box<CorpusError> },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
