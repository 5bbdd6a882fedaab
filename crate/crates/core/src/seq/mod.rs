//! Sequence models over tokenized sentences: the LSTM autoencoder that
//! defines the latent space, plus the language-model and variational
//! autoencoder baselines.

mod autoencoder;
mod decoder;
mod lstm;
mod nlm;
mod vae;

pub use autoencoder::{AeDims, Autoencoder};
pub use decoder::Decoder;
pub use lstm::LstmCell;
pub use nlm::{NlmDims, Nlm};
pub use vae::{gaussian_kl, kl_term, reparameterize, Vae, VaeDims};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::{TokenizedSentence, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Output of free-running decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Emitted word ids, EOS excluded.
    pub ids: Vec<usize>,
    /// Whether the decoder emitted EOS within `max_len + 1` steps.
    pub terminated: bool,
}

impl Decoded {
    pub fn into_sentence(self) -> TokenizedSentence {
        TokenizedSentence { ids: self.ids, source_line: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn autoencoder() -> Self {
        Self { lr: 5e-4, epochs: 5, batch_size: 64, seed: 0 }
    }

    pub fn nlm() -> Self {
        Self { lr: 1e-3, epochs: 5, batch_size: 64, seed: 0 }
    }

    pub fn vae() -> Self {
        Self { lr: 5e-4, epochs: 5, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean reconstruction/next-token cross-entropy, nats per token.
    pub loss: f64,
    /// Mean KL divergence per sentence (VAE only).
    pub kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with header `epoch,loss[,kl]`.
    pub fn to_csv(&self) -> String {
        let with_kl = self.epochs.iter().any(|e| e.kl.is_some());
        let mut out = String::from(if with_kl { "epoch,loss,kl\n" } else { "epoch,loss\n" });
        for e in &self.epochs {
            out += &match e.kl {
                Some(kl) if with_kl => format!("{},{},{}\n", e.epoch, e.loss, kl),
                _ => format!("{},{}\n", e.epoch, e.loss),
            };
        }
        out
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Padded, time-major view of a batch of sentences.
pub struct SeqBatch<'s> {
    sents: Vec<&'s [usize]>,
    max_len: usize,
}

impl<'s> SeqBatch<'s> {
    pub fn new(sents: Vec<&'s [usize]>) -> Result<Self> {
        if sents.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if sents.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("sentence"));
        }
        let max_len = sents.iter().map(|s| s.len()).max().unwrap_or(0);
        Ok(Self { sents, max_len })
    }

    pub fn len(&self) -> usize {
        self.sents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sents.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Tokens scored by teacher forcing: every word plus EOS.
    pub fn target_tokens(&self) -> usize {
        self.sents.iter().map(|s| s.len() + 1).sum()
    }

    fn token_at(&self, t: usize) -> Vec<usize> {
        self.sents.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect()
    }

    fn all_active(&self, t: usize) -> bool {
        self.sents.iter().all(|s| t < s.len())
    }

    /// `[n, width]` mask of rows still inside their sentence at step `t`.
    fn active_mask<T: Real>(&self, t: usize, width: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.len() * width);
        for s in &self.sents {
            let m = if t < s.len() { T::one() } else { T::zero() };
            data.extend(std::iter::repeat_n(m, width));
        }
        Tensor::from_raw(vec![self.len(), width], data)
    }

    /// Decoder input at step `t`: SOS, then the previous gold token.
    fn decoder_input(&self, t: usize) -> Vec<usize> {
        if t == 0 {
            vec![SOS; self.len()]
        } else {
            self.token_at(t - 1)
        }
    }

    /// Decoder target at step `t` and its loss weight.
    fn decoder_target<T: Real>(&self, t: usize) -> (Vec<usize>, Vec<T>) {
        self.sents
            .iter()
            .map(|s| match t.cmp(&s.len()) {
                std::cmp::Ordering::Less => (s[t], T::one()),
                std::cmp::Ordering::Equal => (EOS, T::one()),
                std::cmp::Ordering::Greater => (PAD, T::zero()),
            })
            .unzip()
    }
}

/// Runs `cell` over a padded batch and returns each row's hidden state at
/// its own last token.
pub(crate) fn encode_sequence<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    embedding: ParamId,
    cell: &LstmCell,
    batch: &SeqBatch<'_>,
) -> Result<Var> {
    let (n, hd) = (batch.len(), cell.hidden_dim);
    let mut h = tape.constant(Tensor::zeros(&[n, hd]));
    let mut c = tape.constant(Tensor::zeros(&[n, hd]));
    for t in 0..batch.max_len() {
        let x = tape.gather_rows(p[embedding], &batch.token_at(t))?;
        let (h2, c2) = cell.step(tape, p, x, h, c)?;
        if batch.all_active(t) {
            (h, c) = (h2, c2);
        } else {
            let m = tape.constant(batch.active_mask(t, hd));
            h = masked_update(tape, m, h, h2)?;
            c = masked_update(tape, m, c, c2)?;
        }
    }
    Ok(h)
}

/// `old + mask ∘ (new − old)`.
fn masked_update<T: Real>(tape: &mut Tape<'_, T>, mask: Var, old: Var, new: Var) -> Result<Var> {
    let d = tape.sub(new, old)?;
    let d = tape.mul(mask, d)?;
    tape.add(old, d)
}

/// Index of the largest logit among EOS and the words; ties go to the
/// lowest id. PAD and SOS are never emitted.
pub fn argmax_token<T: Real>(logits: &[T]) -> usize {
    let mut best = EOS;
    for (id, &v) in logits.iter().enumerate().skip(EOS + 1) {
        if v > logits[best] {
            best = id;
        }
    }
    best
}

/// Probabilities over the emittable ids (EOS and words); PAD and SOS get 0.
pub fn emission_probs<T: Real>(logits: &[T]) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    let tail: Vec<f64> = logits[EOS..].iter().map(|v| v.as_f64()).collect();
    let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = tail.iter().map(|v| (v - max).exp()).sum();
    for (p, v) in probs[EOS..].iter_mut().zip(&tail) {
        *p = (v - max).exp() / total;
    }
    probs
}

/// Draws from the emission distribution of `logits`.
pub fn sample_token<T: Real, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> usize {
    let probs = emission_probs(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (id, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return id;
        }
    }
    // rounding left u above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(EOS)
}

pub(crate) struct BatchLoss {
    pub objective: Var,
    pub nll_sum: f64,
    pub tokens: usize,
    pub kl_sum: Option<f64>,
}

pub(crate) struct StepCtx<'r> {
    pub training: bool,
    pub kl_weight: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub(crate) trait SeqTrainable<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        batch: &SeqBatch<'_>,
        ctx: &mut StepCtx<'_>,
    ) -> Result<BatchLoss>;
}

/// Mini-batch Adam loop shared by the three sequence models. On a
/// non-finite loss the parameters roll back to the end of the last good
/// epoch and [`Error::Diverged`] is returned.
pub(crate) fn train_loop<T: Real, M: SeqTrainable<T>>(
    model: &mut M,
    data: &[TokenizedSentence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut last_good = model.params().clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens, mut kl, mut sentences) = (0.0, 0usize, 0.0, 0usize);
        let mut has_kl = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = SeqBatch::new(chunk.iter().map(|&i| data[i].ids.as_slice()).collect())?;
            let kl_weight = (step as f64 / steps_per_epoch as f64).min(1.0);
            let (out, grads) = {
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape);
                let mut ctx = StepCtx { training: true, kl_weight, rng: &mut rng };
                let out = model.batch_loss(&mut tape, &p, &batch, &mut ctx)?;
                let objective = tape.value(out.objective).item();
                if !objective.is_finite() {
                    *model.params_mut() = last_good;
                    return Err(Error::Diverged { epoch });
                }
                let mut g = tape.backward(out.objective)?;
                (out, p.gradients(&mut g, model.params()))
            };
            opt.step(model.params_mut(), &grads);
            nll += out.nll_sum;
            tokens += out.tokens;
            sentences += batch.len();
            if let Some(k) = out.kl_sum {
                kl += k;
                has_kl = true;
            }
            step += 1;
        }
        if !model.params().is_finite() {
            *model.params_mut() = last_good;
            return Err(Error::Diverged { epoch });
        }
        last_good = model.params().clone();
        let entry = EpochLog {
            epoch,
            loss: nll / tokens as f64,
            kl: has_kl.then(|| kl / sentences as f64),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Teacher-forced cross-entropy in nats per token, without dropout.
pub(crate) fn eval_loop<T: Real, M: SeqTrainable<T>>(
    model: &M,
    data: &[TokenizedSentence],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    // eval mode never draws from the rng except for the VAE's posterior mean path
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = SeqBatch::new(chunk.iter().map(|s| s.ids.as_slice()).collect())?;
        let mut tape = Tape::inference();
        let p = model.params().bind(&mut tape);
        let mut ctx = StepCtx { training: false, kl_weight: 1.0, rng: &mut rng };
        let out = model.batch_loss(&mut tape, &p, &batch, &mut ctx)?;
        nll += out.nll_sum;
        tokens += out.tokens;
    }
    Ok(nll / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_id_and_skips_specials() {
        let logits = [9.0f32, 9.0, 1.0, 3.0, 3.0, 2.0];
        assert_eq!(argmax_token(&logits), 3);
        let eos = [0.0f32, 0.0, 5.0, 5.0];
        assert_eq!(argmax_token(&eos), EOS);
    }

    #[test]
    fn emission_probs_exclude_pad_and_sos() {
        let p = emission_probs(&[10.0f64, 10.0, 0.0, 0.0]);
        assert_eq!(&p[..2], &[0.0, 0.0]);
        assert!((p[2] - 0.5).abs() < 1e-12 && (p[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_targets_end_with_eos_then_padding() {
        let a = [3usize, 4];
        let b = [5usize];
        let batch = SeqBatch::new(vec![&a, &b]).unwrap();
        assert_eq!(batch.decoder_input(0), vec![SOS, SOS]);
        assert_eq!(batch.decoder_input(1), vec![3, 5]);
        let (t1, w1) = batch.decoder_target::<f32>(1);
        assert_eq!((t1, w1), (vec![4, EOS], vec![1.0, 1.0]));
        let (t2, w2) = batch.decoder_target::<f32>(2);
        assert_eq!((t2, w2), (vec![EOS, PAD], vec![1.0, 0.0]));
        assert_eq!(batch.target_tokens(), 5);
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            epochs: vec![EpochLog { epoch: 1, loss: 2.5, kl: Some(0.25) }],
        };
        assert_eq!(log.to_csv(), "epoch,loss,kl\n1,2.5,0.25\n");
    }
}
