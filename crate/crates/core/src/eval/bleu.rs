use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Any zero precision makes the score zero.
    #[default]
    None,
    /// Precisions are floored at `1e-9`.
    Epsilon,
}

const EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    /// BLEU-4 with uniform weights.
    fn default() -> Self {
        Self { max_n: 4, weights: vec![0.25; 4], smoothing: Smoothing::None }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(Error::Config(format!("need {} BLEU weights, got {}", self.max_n, self.weights.len())));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("BLEU weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Multi-reference BLEU against a fixed pool. Every candidate is scored
/// against the whole pool, so per-n-gram maximum counts and the sorted
/// reference lengths are computed once.
#[derive(Clone, Debug)]
pub struct BleuScorer<W> {
    config: BleuConfig,
    /// For each order, the largest count of each n-gram in any one reference.
    max_counts: Vec<HashMap<Vec<W>, usize>>,
    lengths: Vec<usize>,
}

fn ngram_counts<W: Hash + Eq + Clone>(tokens: &[W], n: usize) -> HashMap<Vec<W>, usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g.to_vec()).or_insert(0) += 1;
    }
    counts
}

impl<W: Hash + Eq + Clone> BleuScorer<W> {
    pub fn new<R: AsRef<[W]>>(references: &[R], config: BleuConfig) -> Result<Self> {
        config.validate()?;
        if references.is_empty() {
            return Err(Error::Empty("reference pool"));
        }
        let mut max_counts = vec![HashMap::new(); config.max_n];
        let mut lengths = Vec::with_capacity(references.len());
        for r in references {
            let r = r.as_ref();
            lengths.push(r.len());
            for (n, table) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r, n + 1) {
                    let e = table.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        lengths.sort_unstable();
        lengths.dedup();
        Ok(Self { config, max_counts, lengths })
    }

    /// Reference length closest to `len`, the shorter one on a tie.
    pub fn closest_length(&self, len: usize) -> usize {
        let i = self.lengths.partition_point(|&l| l < len);
        let above = self.lengths.get(i).copied();
        let below = i.checked_sub(1).map(|j| self.lengths[j]);
        match (below, above) {
            (Some(b), Some(a)) => {
                if len - b <= a - len {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => unreachable!("pool is nonempty"),
        }
    }

    /// Clipped n-gram precision `(matches, total)` for order `n`.
    pub fn precision(&self, candidate: &[W], n: usize) -> (usize, usize) {
        let counts = ngram_counts(candidate, n);
        let table = &self.max_counts[n - 1];
        let matched = counts.iter().map(|(g, &c)| c.min(table.get(g).copied().unwrap_or(0))).sum();
        (matched, candidate.len().saturating_sub(n - 1))
    }

    pub fn score(&self, candidate: &[W]) -> Result<f64> {
        if candidate.is_empty() {
            return Err(Error::Empty("BLEU candidate"));
        }
        let mut log_sum = 0.0;
        for n in 1..=self.config.max_n {
            let w = self.config.weights[n - 1];
            let (m, t) = self.precision(candidate, n);
            let mut p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
            if p == 0.0 {
                match self.config.smoothing {
                    Smoothing::None if w > 0.0 => return Ok(0.0),
                    Smoothing::None => continue,
                    Smoothing::Epsilon => p = EPSILON,
                }
            }
            log_sum += w * p.ln();
        }
        let c = candidate.len() as f64;
        let r = self.closest_length(candidate.len()) as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        Ok((bp * log_sum.exp()).clamp(0.0, 1.0))
    }

    /// Mean sentence score.
    pub fn corpus<C: AsRef<[W]>>(&self, candidates: &[C]) -> Result<f64> {
        if candidates.is_empty() {
            return Err(Error::Empty("BLEU candidate list"));
        }
        let mut total = 0.0;
        for c in candidates {
            total += self.score(c.as_ref())?;
        }
        Ok(total / candidates.len() as f64)
    }

    /// Mean sentence score with empty candidates scored 0 instead of
    /// rejected. Model samples can be empty; reference text cannot.
    pub fn corpus_lenient<C: AsRef<[W]>>(&self, candidates: &[C]) -> Result<f64> {
        if candidates.is_empty() {
            return Err(Error::Empty("BLEU candidate list"));
        }
        let mut total = 0.0;
        for c in candidates.iter().map(AsRef::as_ref).filter(|c| !c.is_empty()) {
            total += self.score(c)?;
        }
        Ok(total / candidates.len() as f64)
    }
}

pub fn bleu_sentence<W: Hash + Eq + Clone, R: AsRef<[W]>>(candidate: &[W], references: &[R], config: &BleuConfig) -> Result<f64> {
    BleuScorer::new(references, config.clone())?.score(candidate)
}

pub fn bleu_corpus<W: Hash + Eq + Clone, C: AsRef<[W]>, R: AsRef<[W]>>(
    candidates: &[C],
    references: &[R],
    config: &BleuConfig,
) -> Result<f64> {
    BleuScorer::new(references, config.clone())?.corpus(candidates)
}
