//! Corpus ingestion: vocabulary with frequency filtering, sentence
//! tokenization, and train/validation splits.
//!
//! Lines are lowercased and split on whitespace. There is no unknown-word
//! token: a sentence containing any filtered word is dropped instead.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIAL: usize = 3;
const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>"];

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_VALIDATION_SIZE: usize = 10_000;

const VOCAB_HEADER: &str = "vocab-v1";

/// Splits one corpus line into normalized tokens.
pub fn tokens(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_count` times. Ids after the
    /// specials go by descending frequency, ties broken lexicographically.
    pub fn build<'s>(lines: impl IntoIterator<Item = &'s str>, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in tokens(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens, min_count }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Retained non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL..]
    }

    pub fn is_word(&self, id: usize) -> bool {
        (NUM_SPECIAL..self.len()).contains(&id)
    }

    /// Space-joined tokens for `ids`. Special ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| self.is_word(id)) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&self.tokens[id]);
        }
        out
    }

    /// Encodes one line; `None` when any token is out of vocabulary.
    pub fn encode_line(&self, line: &str) -> Option<Vec<usize>> {
        tokens(line)
            .map(|t| self.id(&t).filter(|&id| self.is_word(id)))
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{VOCAB_HEADER} {} {}\n", self.len(), self.min_count);
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [magic, size, min_count] = fields[..] else {
            return Err(Error::Format(format!("bad vocabulary header `{header}`")));
        };
        if magic != VOCAB_HEADER {
            return Err(Error::Format(format!("unknown vocabulary version `{magic}`")));
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Format(format!("bad number `{s}` in vocabulary header")))
        };
        let (size, min_count) = (parse(size)?, parse(min_count)?);
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() != size {
            return Err(Error::Format(format!(
                "vocabulary header says {size} tokens, file has {}",
                tokens.len()
            )));
        }
        if size < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        let vocab = Self::from_tokens(tokens, min_count);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Format("duplicate token in vocabulary".into()));
        }
        Ok(vocab)
    }
}

/// A sentence as vocabulary ids, without SOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
    /// Zero-based line number in the source corpus.
    pub source_line: usize,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Keeps the lines whose tokens are all in `vocab` and whose length is in
/// `1..=max_len`.
pub fn tokenize_corpus<'s>(
    lines: impl IntoIterator<Item = &'s str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<TokenizedSentence> {
    lines
        .into_iter()
        .enumerate()
        .filter_map(|(source_line, line)| {
            let ids = vocab.encode_line(line)?;
            (!ids.is_empty() && ids.len() <= max_len).then_some(TokenizedSentence { ids, source_line })
        })
        .collect()
}

/// Seeded disjoint split; each side keeps corpus order.
pub fn split(
    sentences: &[TokenizedSentence],
    validation_size: usize,
    seed: u64,
) -> Result<(Vec<TokenizedSentence>, Vec<TokenizedSentence>)> {
    if validation_size >= sentences.len() {
        return Err(Error::InvalidArgument(format!(
            "validation size {validation_size} must be smaller than the corpus ({} sentences)",
            sentences.len()
        )));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; sentences.len()];
    for &i in &order[..validation_size] {
        is_valid[i] = true;
    }
    let (valid, train): (Vec<_>, Vec<_>) =
        sentences.iter().cloned().zip(is_valid).partition(|(_, v)| *v);
    Ok((train.into_iter().map(|(s, _)| s).collect(), valid.into_iter().map(|(s, _)| s).collect()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn min_count_filters_rare_words() {
        let corpus = ["a b", "a b", "a b", "a b", "a c"];
        let v = Vocabulary::build(corpus, 5).unwrap();
        assert_eq!(v.words(), ["a"]);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = Vocabulary::build(["z y", "x z"], 1).unwrap();
        // z twice, then x and y lexicographically
        assert_eq!(v.words(), ["z", "x", "y"]);
    }

    #[test]
    fn single_repeated_word() {
        let v = Vocabulary::build(["x x x x x"], 5).unwrap();
        assert_eq!(v.words(), ["x"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(["", "  "], 1), Err(Error::Empty(_))));
        assert!(Vocabulary::build(["a"], 0).is_err());
    }

    #[test]
    fn tokenize_filters_long_and_rare() {
        let long = vec!["a"; 21].join(" ");
        let ok20 = vec!["a"; 20].join(" ");
        let lines = [long.as_str(), "a b a", "a rare a", ok20.as_str(), ""];
        let v = Vocabulary::build(["a a a a a b b b b b rare"], 5).unwrap();
        let out = tokenize_corpus(lines, &v, 20);
        assert_eq!(out.len(), 2);
        assert_eq!(v.detokenize(&out[0].ids), "a b a");
        assert_eq!(out[0].source_line, 1);
        assert_eq!(out[1].len(), 20);
    }

    #[test]
    fn lowercases_input() {
        let v = Vocabulary::build(["He lifted his hand ."], 1).unwrap();
        let s = tokenize_corpus(["HE lifted HIS hand ."], &v, 20);
        assert_eq!(v.detokenize(&s[0].ids), "he lifted his hand .");
    }

    fn sentences(n: usize) -> Vec<TokenizedSentence> {
        (0..n).map(|i| TokenizedSentence { ids: vec![3 + i % 7], source_line: i }).collect()
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let s = sentences(100);
        let (tr, va) = split(&s, 10, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let mut lines: Vec<usize> = tr.iter().chain(&va).map(|s| s.source_line).collect();
        lines.sort();
        assert_eq!(lines, (0..100).collect::<Vec<_>>());
        assert_eq!(split(&s, 10, 7).unwrap(), (tr, va));
        let (tr0, va0) = split(&s, 0, 7).unwrap();
        assert_eq!((tr0.len(), va0.len()), (100, 0));
        assert!(split(&s, 100, 7).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(["a b b c c c"], 1).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("vocab-v1 6 1\n<pad>\n<s>\n</s>\nc\nb\na\n"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("vocab-v2 3 1\n<pad>\n<s>\n</s>\n").is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in prop::collection::vec("[a-z]{1,6}", 1..20)) {
            let line = words.join(" ");
            let v = Vocabulary::build([line.as_str()], 1).unwrap();
            let s = tokenize_corpus([line.as_str()], &v, 20);
            prop_assert_eq!(s.len(), 1);
            prop_assert!(s[0].ids.iter().all(|&id| v.is_word(id)));
            prop_assert_eq!(v.detokenize(&s[0].ids), line);
        }

        #[test]
        fn vocabulary_is_pure(words in prop::collection::vec("[a-c]{1,2}", 1..60), min in 1usize..4) {
            let line = words.join(" ");
            let a = Vocabulary::build([line.as_str()], min);
            let b = Vocabulary::build([line.as_str()], min);
            prop_assert_eq!(a.ok(), b.ok());
        }
    }
}
