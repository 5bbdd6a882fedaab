//! Scoring generated text: BLEU against a held-out reference pool and the
//! paired real-versus-generated rating protocol.

mod bleu;
mod pairs;

pub use bleu::{bleu_corpus, bleu_sentence, BleuConfig, BleuScorer, Smoothing};
pub use pairs::{
    assemble_pairs, key_csv, parse_key, parse_verdicts, rater_csv, tally, tally_csv, EvalPair, KeyEntry,
    TallyRow, Verdict,
};
