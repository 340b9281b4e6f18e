use std::collections::HashMap;

use super::CorpusError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Marks the start of the final answer in every rationale.
pub const ANS_MARKER: &str = "####";

/// Connectives that receive full weight in the adaptability mask.
pub const THINKING_TOKENS: [&str; 5] = ["Therefore", "So", "Because", "Thus", "Wait"];

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, ANS_MARKER];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const SYMBOLS: [&str; 11] = ["+", "-", "*", "(", ")", "=", "mod", "?", ".", ",", ":"];
const WORDS: [&str; 20] = [
    "What", "is", "First", "we", "compute", "Then", "the", "answer", "result", "value", "take",
    "step", "by", "gives", "final", "of", "in", "Next", "now", "apply",
];
/// Rare phrasing used by the stylized teacher.
const STYLIZED: [&str; 10] = [
    "Behold", "verily", "yieldeth", "lo", "whence", "doth", "reckon", "Forsooth", "aforesaid",
    "quantity",
];
/// Disjoint task family used for out-of-distribution probes.
const PROBE_WORDS: [&str; 13] =
    ["reverse", "reversed", "letters", "word", "order", "a", "b", "c", "d", "e", "f", "g", "h"];

/// Word-level vocabulary with digits as atoms.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    thinking: Vec<usize>,
    digit_ids: [usize; 10],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The built-in vocabulary shared by every generated corpus.
    pub fn standard() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .chain(&DIGITS)
            .chain(&SYMBOLS)
            .chain(&THINKING_TOKENS)
            .chain(&WORDS)
            .chain(&STYLIZED)
            .chain(&PROBE_WORDS)
            .map(|s| s.to_string())
            .collect();
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        assert_eq!(index.len(), tokens.len(), "duplicate vocabulary entry");
        let thinking = THINKING_TOKENS.iter().map(|t| index[*t]).collect();
        let digit_ids = std::array::from_fn(|d| index[DIGITS[d]]);
        Self { tokens, index, thinking, digit_ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos_id(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos_id(&self) -> usize {
        self.index[EOS]
    }

    pub fn ans_id(&self) -> usize {
        self.index[ANS_MARKER]
    }

    pub fn thinking_token_ids(&self) -> &[usize] {
        &self.thinking
    }

    pub fn is_thinking(&self, id: usize) -> bool {
        self.thinking.contains(&id)
    }

    fn is_digit_id(&self, id: usize) -> bool {
        self.digit_ids.contains(&id)
    }

    /// Whitespace-split lookup; numbers are emitted digit by digit.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
            } else if word.bytes().all(|b| b.is_ascii_digit()) {
                ids.extend(word.bytes().map(|b| self.digit_ids[(b - b'0') as usize]));
            } else {
                return Err(CorpusError::OutOfVocabulary(word.to_string()));
            }
        }
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace normalisation:
    /// adjacent digits are joined back into one number.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            let tok = self.token(id).unwrap_or("<unk>");
            let digit = self.is_digit_id(id);
            if !out.is_empty() && !(digit && prev_digit) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_digit = digit;
        }
        out
    }

    /// `BOS ++ ids ++ EOS`.
    pub fn frame(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(self.bos_id());
        out.extend_from_slice(ids);
        out.push(self.eos_id());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn so_seven_is_direct_lookup() {
        let v = Vocabulary::standard();
        assert_eq!(v.tokenize("So 7").unwrap(), vec![v.id("So").unwrap(), v.id("7").unwrap()]);
    }

    #[test]
    fn therefore_is_a_thinking_token() {
        let v = Vocabulary::standard();
        for t in THINKING_TOKENS {
            assert!(v.is_thinking(v.id(t).unwrap()), "{t}");
        }
    }

    #[test]
    fn marker_present_exactly_once() {
        let v = Vocabulary::standard();
        assert_eq!(v.tokens().iter().filter(|t| *t == ANS_MARKER).count(), 1);
    }

    #[test]
    fn numbers_split_into_digits_and_rejoin() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("#### 18").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids), "#### 18");
    }

    #[test]
    fn out_of_vocabulary_word_is_named() {
        let v = Vocabulary::standard();
        let err = v.tokenize("So banana").unwrap_err();
        assert!(err.to_string().contains("banana"));
    }

    #[test]
    fn frame_adds_bos_and_eos() {
        let v = Vocabulary::standard();
        let f = v.frame(&[v.id("So").unwrap()]);
        assert_eq!(f.first(), Some(&v.bos_id()));
        assert_eq!(f.last(), Some(&v.eos_id()));
    }
}
