use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    eval_loop, train_loop, BatchLoss, Decoded, Decoder, EpochLog, SeqBatch, SeqTrainable, StepCtx,
    TrainConfig, TrainLog,
};
use crate::autodiff::Tape;
use crate::corpus::TokenizedSentence;
use crate::error::Result;
use crate::nn::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NlmDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl NlmDims {
    pub fn paper(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 200, hidden_dim: 600 }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 64, hidden_dim: 128 }
    }
}

/// LSTM language model, same shape as the autoencoder's decoder but
/// unconditioned. Sentences are drawn token by token from its softmax.
#[derive(Clone, Debug)]
pub struct Nlm<T: Real> {
    pub store: ParamStore<T>,
    pub dims: NlmDims,
    embedding: ParamId,
    decoder: Decoder,
}

impl<T: Real> Nlm<T> {
    pub fn new(dims: NlmDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", uniform(&[dims.vocab_size, dims.embed_dim], 0.1, &mut rng));
        let decoder =
            Decoder::new(&mut store, "decoder", dims.embed_dim, 0, dims.hidden_dim, dims.vocab_size, &mut rng);
        Self { store, dims, embedding, decoder }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, max_len: usize, rng: &mut R) -> Result<Vec<Decoded>> {
        self.decoder.sample(&self.store, self.embedding, None, count, max_len, rng)
    }

    /// Logits for the first word after SOS.
    pub fn first_step_logits(&self) -> Result<Tensor<T>> {
        let mut logits = None;
        self.decoder.run(&self.store, self.embedding, None, 1, 0, |_, l| {
            logits = Some(Tensor::vector(l.to_vec()));
            crate::corpus::EOS
        })?;
        Ok(logits.expect("one decoding step"))
    }

    pub fn train(&mut self, data: &[TokenizedSentence], cfg: &TrainConfig) -> Result<TrainLog> {
        self.train_with(data, cfg, |_| {})
    }

    pub fn train_with(
        &mut self,
        data: &[TokenizedSentence],
        cfg: &TrainConfig,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainLog> {
        train_loop(self, data, cfg, on_epoch)
    }

    pub fn eval_loss(&self, data: &[TokenizedSentence], batch_size: usize) -> Result<f64> {
        eval_loop(self, data, batch_size)
    }
}

impl<T: Real> SeqTrainable<T> for Nlm<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        batch: &SeqBatch<'_>,
        _ctx: &mut StepCtx<'_>,
    ) -> Result<BatchLoss> {
        let nll = self.decoder.teacher_forced(tape, p, self.embedding, None, batch)?;
        let tokens = batch.target_tokens();
        let nll_sum = tape.value(nll).item().as_f64();
        let objective = tape.scale(nll, T::c(1.0 / tokens as f64));
        Ok(BatchLoss { objective, nll_sum, tokens, kl_sum: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::emission_probs;

    fn tiny() -> Nlm<f64> {
        Nlm::new(NlmDims { vocab_size: 8, embed_dim: 4, hidden_dim: 6 }, 5)
    }

    #[test]
    fn seeded_sampling_is_reproducible_and_bounded() {
        let m = tiny();
        let a = m.sample(20, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.sample(20, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.ids.len() <= 6 && d.ids.iter().all(|&i| (3..8).contains(&i))));
    }

    #[test]
    fn first_token_frequencies_follow_softmax() {
        let m = tiny();
        let probs = emission_probs(m.first_step_logits().unwrap().data());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000;
        let mut counts = [0usize; 8];
        for d in m.sample(draws, 1, &mut rng).unwrap() {
            counts[d.ids.first().copied().unwrap_or(crate::corpus::EOS)] += 1;
        }
        let tv: f64 =
            counts.iter().zip(&probs).map(|(&c, &p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn paper_defaults() {
        let cfg = TrainConfig::nlm();
        assert_eq!((cfg.lr, cfg.epochs), (1e-3, 5));
        assert_eq!(NlmDims::paper(10).hidden_dim, 600);
    }

    #[test]
    fn memorizes_tiny_corpus() {
        let data: Vec<TokenizedSentence> =
            vec![TokenizedSentence { ids: vec![3, 4, 5, 6], source_line: 0 }];
        let mut m = Nlm::<f32>::new(NlmDims { vocab_size: 8, embed_dim: 8, hidden_dim: 16 }, 2);
        let cfg = TrainConfig { lr: 1e-2, epochs: 200, batch_size: 4, seed: 0 };
        let log = m.train(&data, &cfg).unwrap();
        assert!(log.last_loss().unwrap() < 0.1, "{:?}", log.last_loss());
    }
}
