//! Scripted teacher pool over chained modular arithmetic.
//!
//! A problem is `((a0 op a1) op a2) ... mod m`. Each teacher writes the chain
//! step by step in its own template style and may corrupt one intermediate
//! result, after which the chain continues consistently from the wrong value.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Instance;
use super::vocab::{Vocabulary, ANS_MARKER};
use super::CorpusError;
use crate::seeds::derive_seed;

/// Probability that the stylized teacher emits a slip followed by a
/// "Wait" self-correction.
pub const SELF_CORRECTION_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Concise,
    Verbose,
    Stylized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    Forward,
    /// Commutative steps are written operand-first.
    Regrouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherProfile {
    pub id: String,
    pub style: Style,
    pub hallucination_rate: f64,
    #[serde(default = "default_step_order")]
    pub step_order: StepOrder,
    #[serde(default)]
    pub seed: u64,
}

fn default_step_order() -> StepOrder {
    StepOrder::Forward
}

impl TeacherProfile {
    pub fn new(id: &str, style: Style, hallucination_rate: f64) -> Self {
        Self { id: id.to_string(), style, hallucination_rate, step_order: StepOrder::Forward, seed: 0 }
    }

    pub fn regrouped(mut self) -> Self {
        self.step_order = StepOrder::Regrouped;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Operator {
    fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
        }
    }

    fn apply(self, a: i64, b: i64, modulus: i64) -> i64 {
        let v = match self {
            Operator::Add => a + b,
            Operator::Sub => a - b,
            Operator::Mul => a * b,
        };
        v.rem_euclid(modulus)
    }

    fn commutative(self) -> bool {
        !matches!(self, Operator::Sub)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub min_steps: usize,
    pub max_steps: usize,
    /// Operands are drawn from `0..operand_max`.
    pub operand_max: u32,
    pub modulus: u32,
    pub ops: Vec<Operator>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            min_steps: 2,
            max_steps: 5,
            operand_max: 100,
            modulus: 100,
            ops: vec![Operator::Add, Operator::Sub, Operator::Mul],
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::InvalidTask(msg));
        if self.min_steps < 2 || self.max_steps > 5 || self.min_steps > self.max_steps {
            return bad(format!("steps must satisfy 2 <= min <= max <= 5, got {}..={}", self.min_steps, self.max_steps));
        }
        if self.operand_max == 0 || self.operand_max > 100 {
            return bad(format!("operand_max must be in 1..=100, got {}", self.operand_max));
        }
        if self.modulus < 2 {
            return bad(format!("modulus must be at least 2, got {}", self.modulus));
        }
        if self.ops.is_empty() {
            return bad("ops must not be empty".into());
        }
        Ok(())
    }
}

/// A sampled arithmetic chain.
#[derive(Debug, Clone)]
pub struct Problem {
    pub first: i64,
    pub steps: Vec<(Operator, i64)>,
    pub modulus: i64,
}

impl Problem {
    fn sample(task: &TaskConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(task.min_steps..=task.max_steps);
        let first = rng.random_range(0..task.operand_max) as i64;
        let steps = (0..n)
            .map(|_| {
                let op = task.ops[rng.random_range(0..task.ops.len())];
                (op, rng.random_range(0..task.operand_max) as i64)
            })
            .collect();
        Self { first, steps, modulus: task.modulus as i64 }
    }

    /// Intermediate results; `results[i]` is the value after step `i`.
    fn results_from(&self, override_at: Option<(usize, i64)>) -> Vec<i64> {
        let mut acc = self.first;
        let mut out = Vec::with_capacity(self.steps.len());
        for (i, &(op, x)) in self.steps.iter().enumerate() {
            acc = op.apply(acc, x, self.modulus);
            if let Some((at, v)) = override_at {
                if at == i {
                    acc = v;
                }
            }
            out.push(acc);
        }
        out
    }

    pub fn answer(&self) -> i64 {
        *self.results_from(None).last().expect("at least one step")
    }

    pub fn question(&self) -> String {
        let n = self.steps.len();
        let mut s = String::from("What is");
        for _ in 0..n - 1 {
            s.push_str(" (");
        }
        s.push_str(&format!(" {}", self.first));
        for (i, (op, x)) in self.steps.iter().enumerate() {
            s.push_str(&format!(" {} {}", op.symbol(), x));
            if i + 1 < n {
                s.push_str(" )");
            }
        }
        s.push_str(&format!(" mod {} ?", self.modulus));
        s
    }
}

/// What a teacher wrote, with the ground truth about its corruption.
#[derive(Debug, Clone)]
pub struct ScriptedRationale {
    pub text: String,
    pub corrupted: bool,
    pub self_corrected: bool,
}

fn step_expr(order: StepOrder, lhs: i64, op: Operator, rhs: i64) -> String {
    if order == StepOrder::Regrouped && op.commutative() {
        format!("{rhs} {} {lhs}", op.symbol())
    } else {
        format!("{lhs} {} {rhs}", op.symbol())
    }
}

/// Writes one rationale for `problem` in the style of `profile`.
pub fn script_rationale(problem: &Problem, profile: &TeacherProfile, rng: &mut ChaCha8Rng) -> ScriptedRationale {
    let m = problem.modulus;
    let n = problem.steps.len();
    let gold = problem.answer();
    let corrupted = rng.random::<f64>() < profile.hallucination_rate;

    let mut corruption = None;
    if corrupted {
        let at = rng.random_range(0..n);
        let correct = problem.results_from(None)[at];
        let mut candidates: Vec<i64> = (0..m).filter(|&v| v != correct).collect();
        candidates.shuffle(rng);
        corruption = candidates
            .into_iter()
            .map(|v| (at, v))
            .find(|&c| *problem.results_from(Some(c)).last().unwrap() != gold);
        if corruption.is_none() {
            // Later steps absorb every wrong value here; corrupt the last step instead.
            let wrong = loop {
                let v = rng.random_range(0..m);
                if v != gold {
                    break v;
                }
            };
            corruption = Some((n - 1, wrong));
        }
    }
    let results = problem.results_from(corruption);

    let slip_at = (!corrupted
        && profile.style == Style::Stylized
        && rng.random::<f64>() < SELF_CORRECTION_RATE)
        .then(|| rng.random_range(0..n));

    let mut parts: Vec<String> = Vec::new();
    let mut prev = problem.first;
    for (i, &(op, x)) in problem.steps.iter().enumerate() {
        let expr = step_expr(profile.step_order, prev, op, x);
        let r = results[i];
        match profile.style {
            Style::Concise => {
                if i == 0 {
                    parts.push(format!("{expr} = {r} ."));
                } else {
                    parts.push(format!("So {expr} = {r} ."));
                }
            }
            Style::Verbose => {
                if i == 0 {
                    parts.push(format!("First we compute {expr} mod {m} = {r} ."));
                } else {
                    parts.push(format!("Then we take {expr} mod {m} = {r} ."));
                }
            }
            Style::Stylized => {
                if slip_at == Some(i) {
                    let wrong = (r + 1 + rng.random_range(0..m - 1)).rem_euclid(m);
                    parts.push(format!("Behold {expr} yieldeth {wrong} . Wait , {expr} = {r} ."));
                }
                parts.push(format!("Behold {expr} yieldeth {r} , Thus verily {expr} = {r} ."));
            }
        }
        prev = r;
    }
    let last = results[n - 1];
    match profile.style {
        Style::Concise => parts.push(format!("{ANS_MARKER} {last}")),
        Style::Verbose => parts.push(format!("Therefore the answer is {last} . {ANS_MARKER} {last}")),
        Style::Stylized => {
            parts.push(format!("Forsooth the aforesaid quantity doth reckon {last} . {ANS_MARKER} {last}"))
        }
    }
    ScriptedRationale { text: parts.join(" "), corrupted, self_corrected: slip_at.is_some() }
}

/// Generates `n` instances, one rationale per profile. Pure in its arguments.
pub fn generate_dataset(
    n: usize,
    profiles: &[TeacherProfile],
    task: &TaskConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<Instance>, CorpusError> {
    if profiles.is_empty() {
        return Err(CorpusError::NoTeachers);
    }
    if profiles.len() < 2 {
        return Err(CorpusError::TooFewRationales(profiles.len()));
    }
    if n == 0 {
        return Err(CorpusError::EmptyDataset);
    }
    task.validate()?;
    for p in profiles {
        if !(0.0..=1.0).contains(&p.hallucination_rate) {
            return Err(CorpusError::InvalidTask(format!(
                "teacher {} hallucination_rate {} outside [0, 1]",
                p.id, p.hallucination_rate
            )));
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "problem", i as u64));
            let problem = Problem::sample(task, &mut rng);
            let texts: Vec<(String, String)> = profiles
                .iter()
                .map(|p| {
                    let stream = derive_seed(seed ^ p.seed.rotate_left(17), &format!("teacher/{}", p.id), i as u64);
                    let mut trng = ChaCha8Rng::seed_from_u64(stream);
                    (p.id.clone(), script_rationale(&problem, p, &mut trng).text)
                })
                .collect();
            Instance::new(
                &format!("s{seed}-{i:05}"),
                &problem.question(),
                &problem.answer().to_string(),
                &texts,
                vocab,
            )
        })
        .collect()
}

/// Out-of-distribution probe sentences: string-reversal descriptions that
/// share the vocabulary but not the task.
pub fn reversal_probe_corpus(n: usize, seed: u64, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, CorpusError> {
    const LETTERS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reversal-probe", i as u64));
            let len = rng.random_range(3..=6);
            let word: Vec<&str> = (0..len).map(|_| LETTERS[rng.random_range(0..LETTERS.len())]).collect();
            let reversed: Vec<&str> = word.iter().rev().copied().collect();
            let text = format!(
                "reverse the letters of the word {} : the reversed word is {} .",
                word.join(" "),
                reversed.join(" ")
            );
            Ok(vocab.frame(&vocab.tokenize(&text)?))
        })
        .collect()
}

/// In-distribution probe sequences: question plus first rationale, framed.
pub fn task_probe_corpus(instances: &[Instance], vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, CorpusError> {
    instances
        .iter()
        .map(|inst| {
            let mut ids = vocab.tokenize(&inst.question)?;
            ids.extend(vocab.tokenize(&inst.rationales[0].text)?);
            Ok(vocab.frame(&ids))
        })
        .collect()
}
