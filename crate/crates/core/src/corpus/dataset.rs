use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::CorpusError;

/// One teacher's chain of thought for an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Rationale {
    pub teacher_id: String,
    pub text: String,
    /// `tokenize(text) ++ [EOS]`.
    pub token_ids: Vec<usize>,
    /// Tokens after the answer marker, up to (excluding) the trailing EOS.
    pub answer_span: Range<usize>,
}

impl Rationale {
    pub fn new(teacher_id: &str, text: &str, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        let mut token_ids = vocab.tokenize(text)?;
        token_ids.push(vocab.eos_id());
        let answer_span = answer_span(&token_ids, vocab)?;
        Ok(Self { teacher_id: teacher_id.to_string(), text: text.to_string(), token_ids, answer_span })
    }

    /// Text after the answer marker.
    pub fn stated_answer(&self, vocab: &Vocabulary) -> String {
        vocab.detokenize(&self.token_ids[self.answer_span.clone()])
    }

    /// Position of the answer marker within `token_ids`.
    pub fn marker_position(&self) -> usize {
        self.answer_span.start - 1
    }
}

/// Locates the answer following the single `####` marker.
///
/// The range is half-open, starts right after the marker and ends at the
/// first EOS (or the end of the sequence).
pub fn answer_span(ids: &[usize], vocab: &Vocabulary) -> Result<Range<usize>, CorpusError> {
    let markers: Vec<usize> =
        ids.iter().enumerate().filter(|(_, &t)| t == vocab.ans_id()).map(|(i, _)| i).collect();
    match markers.as_slice() {
        [] => Err(CorpusError::MissingMarker),
        [pos] => {
            let start = pos + 1;
            let end = ids[start..]
                .iter()
                .position(|&t| t == vocab.eos_id())
                .map_or(ids.len(), |p| start + p);
            if end == start {
                return Err(CorpusError::EmptyAnswer);
            }
            Ok(start..end)
        }
        many => Err(CorpusError::MultipleMarkers(many.to_vec())),
    }
}

/// A question, its gold answer and one rationale per teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub rationales: Vec<Rationale>,
}

impl Instance {
    /// Builds and validates an instance from raw teacher texts.
    pub fn new(
        id: &str,
        question: &str,
        gold_answer: &str,
        rationales: &[(String, String)],
        vocab: &Vocabulary,
    ) -> Result<Self, CorpusError> {
        if gold_answer.trim().is_empty() {
            return Err(CorpusError::EmptyGold);
        }
        vocab.tokenize(question)?;
        if vocab.tokenize(gold_answer)?.is_empty() {
            return Err(CorpusError::EmptyGold);
        }
        if rationales.len() < 2 {
            return Err(CorpusError::TooFewRationales(rationales.len()));
        }
        let mut seen = HashSet::new();
        let mut built = Vec::with_capacity(rationales.len());
        for (teacher, text) in rationales {
            if !seen.insert(teacher.as_str()) {
                return Err(CorpusError::DuplicateTeacher(teacher.clone()));
            }
            built.push(Rationale::new(teacher, text, vocab)?);
        }
        Ok(Self {
            id: id.to_string(),
            question: question.to_string(),
            gold_answer: gold_answer.to_string(),
            rationales: built,
        })
    }

    pub fn k(&self) -> usize {
        self.rationales.len()
    }

    pub fn teacher_ids(&self) -> Vec<&str> {
        self.rationales.iter().map(|r| r.teacher_id.as_str()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RationaleRow {
    teacher: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRow {
    id: String,
    question: String,
    gold_answer: String,
    rationales: Vec<RationaleRow>,
}

fn to_row(inst: &Instance) -> InstanceRow {
    InstanceRow {
        id: inst.id.clone(),
        question: inst.question.clone(),
        gold_answer: inst.gold_answer.clone(),
        rationales: inst
            .rationales
            .iter()
            .map(|r| RationaleRow { teacher: r.teacher_id.clone(), text: r.text.clone() })
            .collect(),
    }
}

/// Serialises instances as JSONL, one object per line.
pub fn write_jsonl<W: Write>(instances: &[Instance], mut out: W) -> Result<(), CorpusError> {
    for inst in instances {
        serde_json::to_writer(&mut out, &to_row(inst))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_jsonl(instances: &[Instance], path: &Path) -> Result<(), CorpusError> {
    write_jsonl(instances, BufWriter::new(File::create(path)?))
}

/// Parses and validates JSONL rows; errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R, vocab: &Vocabulary) -> Result<Vec<Instance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let row_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at_row = |source: CorpusError| CorpusError::Row { row: row_no, source: Box::new(source) };
        let row: InstanceRow = serde_json::from_str(&line).map_err(|e| at_row(e.into()))?;
        let pairs: Vec<(String, String)> =
            row.rationales.into_iter().map(|r| (r.teacher, r.text)).collect();
        let inst = Instance::new(&row.id, &row.question, &row.gold_answer, &pairs, vocab)
            .map_err(at_row)?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<Instance>, CorpusError> {
    read_jsonl(BufReader::new(File::open(path)?), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn span_covers_answer_digits() {
        let v = v();
        let mut ids = v.tokenize("So 4 + 38 = 42 . #### 42").unwrap();
        ids.push(v.eos_id());
        let span = answer_span(&ids, &v).unwrap();
        assert_eq!(v.detokenize(&ids[span.clone()]), "42");
        assert_eq!(span.end, ids.len() - 1);
    }

    #[test]
    fn missing_marker_rejected() {
        let v = v();
        let ids = v.tokenize("So 4").unwrap();
        assert!(matches!(answer_span(&ids, &v), Err(CorpusError::MissingMarker)));
    }

    #[test]
    fn two_markers_named_by_position() {
        let v = v();
        let ids = v.tokenize("#### 4 #### 2").unwrap();
        let err = answer_span(&ids, &v).unwrap_err();
        assert!(matches!(&err, CorpusError::MultipleMarkers(p) if p == &vec![0, 2]));
        assert!(err.to_string().contains("[0, 2]"));
    }

    fn row(gold: Option<&str>, teachers: &[(&str, &str)], extra: bool) -> String {
        let mut obj = serde_json::json!({
            "id": "r",
            "question": "What is 9 + 9 ?",
            "rationales": teachers
                .iter()
                .map(|(t, x)| serde_json::json!({"teacher": t, "text": x}))
                .collect::<Vec<_>>(),
        });
        if let Some(g) = gold {
            obj["gold_answer"] = g.into();
        }
        if extra {
            obj["extra"] = 3.into();
        }
        obj.to_string()
    }

    #[test]
    fn gsm8k_style_row_parses() {
        let v = v();
        let line = row(
            Some("18"),
            &[("a", "9 + 9 = 18 . Therefore the answer is 18 . #### 18"), ("b", "So 18 #### 18")],
            false,
        );
        let insts = read_jsonl(line.as_bytes(), &v).unwrap();
        let r = &insts[0].rationales[0];
        assert_eq!(r.stated_answer(&v), "18");
        assert_eq!(r.answer_span.len(), 2);
    }

    #[test]
    fn missing_gold_reports_row() {
        let v = v();
        let ok = row(Some("1"), &[("a", "#### 1"), ("b", "#### 1")], false);
        let bad = row(None, &[("a", "#### 1"), ("b", "#### 1")], false);
        let input = format!("{ok}\n{bad}\n");
        let msg = read_jsonl(input.as_bytes(), &v).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("gold_answer"), "{msg}");
    }

    #[test]
    fn duplicate_teacher_rejected() {
        let v = v();
        let line = row(Some("1"), &[("a", "#### 1"), ("a", "#### 1")], false);
        let msg = read_jsonl(line.as_bytes(), &v).unwrap_err().to_string();
        assert!(msg.contains("row 1") && msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        let v = v();
        let line = row(Some("1"), &[("a", "#### 1"), ("b", "#### 1")], true);
        assert!(read_jsonl(line.as_bytes(), &v).is_err());
    }

    #[test]
    fn absent_marker_reports_row() {
        let v = v();
        let line = row(Some("1"), &[("a", "So 1"), ("b", "#### 1")], false);
        let msg = read_jsonl(line.as_bytes(), &v).unwrap_err().to_string();
        assert!(msg.contains("row 1") && msg.contains("marker"), "{msg}");
    }
}
