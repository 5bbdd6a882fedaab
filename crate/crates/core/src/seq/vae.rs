use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    encode_sequence, eval_loop, train_loop, BatchLoss, Decoded, Decoder, EpochLog, LstmCell,
    SeqBatch, SeqTrainable, StepCtx, TrainConfig, TrainLog,
};
use crate::autodiff::{Tape, Var};
use crate::corpus::TokenizedSentence;
use crate::error::Result;
use crate::nn::{standard_normal, uniform, Bound, Dense, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_dim: usize,
    pub latent_dim: usize,
    pub decoder_dim: usize,
}

impl VaeDims {
    pub fn paper(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 200, encoder_dim: 600, latent_dim: 100, decoder_dim: 600 }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 64, encoder_dim: 128, latent_dim: 64, decoder_dim: 128 }
    }
}

/// `½ Σ (μ² + σ² − 1 − log σ²)`, the KL divergence of `N(μ, σ²)` from
/// the standard normal.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// `μ + exp(½ log σ²) ∘ ε`.
pub fn reparameterize<T: Real>(tape: &mut Tape<'_, T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, T::c(0.5));
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// Taped KL term summed over a batch.
pub fn kl_term<T: Real>(tape: &mut Tape<'_, T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -T::one());
    let total = tape.sum(s);
    Ok(tape.scale(total, T::c(0.5)))
}

/// Variational sentence autoencoder with KL annealing.
#[derive(Clone, Debug)]
pub struct Vae<T: Real> {
    pub store: ParamStore<T>,
    pub dims: VaeDims,
    embedding: ParamId,
    encoder: LstmCell,
    mean: Dense,
    logvar: Dense,
    decoder: Decoder,
}

impl<T: Real> Vae<T> {
    pub fn new(dims: VaeDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", uniform(&[dims.vocab_size, dims.embed_dim], 0.1, &mut rng));
        let encoder = LstmCell::new(&mut store, "encoder", dims.embed_dim, dims.encoder_dim, &mut rng);
        let mean = Dense::new(&mut store, "mean", dims.encoder_dim, dims.latent_dim, &mut rng);
        let logvar = Dense::new(&mut store, "logvar", dims.encoder_dim, dims.latent_dim, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            dims.embed_dim,
            dims.latent_dim,
            dims.decoder_dim,
            dims.vocab_size,
            &mut rng,
        );
        Self { store, dims, embedding, encoder, mean, logvar, decoder }
    }

    /// Posterior mean and log-variance, each `[n, latent]`.
    pub fn posterior(&self, sentences: &[&[usize]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let batch = SeqBatch::new(sentences.to_vec())?;
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let h = encode_sequence(&mut tape, &p, self.embedding, &self.encoder, &batch)?;
        let mu = self.mean.forward(&mut tape, &p, h)?;
        let lv = self.logvar.forward(&mut tape, &p, h)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Decodes `z ~ N(0, I)` with per-step categorical sampling.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, max_len: usize, rng: &mut R) -> Result<Vec<Decoded>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let z: Tensor<T> = standard_normal(&[count, self.dims.latent_dim], rng);
        self.decoder.sample(&self.store, self.embedding, Some(&z), count, max_len, rng)
    }

    pub fn train(&mut self, data: &[TokenizedSentence], cfg: &TrainConfig) -> Result<TrainLog> {
        self.train_with(data, cfg, |_| {})
    }

    /// Maximizes the ELBO; the KL weight ramps linearly from 0 to 1 over
    /// the first epoch and stays at 1.
    pub fn train_with(
        &mut self,
        data: &[TokenizedSentence],
        cfg: &TrainConfig,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainLog> {
        train_loop(self, data, cfg, on_epoch)
    }

    /// Reconstruction loss from the posterior mean, nats per token.
    pub fn eval_loss(&self, data: &[TokenizedSentence], batch_size: usize) -> Result<f64> {
        eval_loop(self, data, batch_size)
    }
}

impl<T: Real> SeqTrainable<T> for Vae<T> {
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
        ctx: &mut StepCtx<'_>,
    ) -> Result<BatchLoss> {
        let h = encode_sequence(tape, p, self.embedding, &self.encoder, batch)?;
        let mu = self.mean.forward(tape, p, h)?;
        let lv = self.logvar.forward(tape, p, h)?;
        let z = if ctx.training {
            let eps = tape.constant(standard_normal(&[batch.len(), self.dims.latent_dim], ctx.rng));
            reparameterize(tape, mu, lv, eps)?
        } else {
            mu
        };
        let nll = self.decoder.teacher_forced(tape, p, self.embedding, Some(z), batch)?;
        let kl = kl_term(tape, mu, lv)?;
        let tokens = batch.target_tokens();
        let nll_sum = tape.value(nll).item().as_f64();
        let kl_sum = tape.value(kl).item().as_f64();
        let weighted = tape.scale(kl, T::c(ctx.kl_weight));
        let total = tape.add(nll, weighted)?;
        let objective = tape.scale(total, T::c(1.0 / tokens as f64));
        Ok(BatchLoss { objective, nll_sum, tokens, kl_sum: Some(kl_sum) })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(gaussian_kl(&[0.0], &[0.0]), 0.0);
        assert_eq!(gaussian_kl(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn taped_kl_matches_closed_form() {
        let mu = vec![0.3, -1.2, 0.5, 2.0];
        let lv = vec![0.1, -0.7, 1.3, 0.0];
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::matrix(2, 2, mu.clone()).unwrap());
        let l = tape.constant(Tensor::matrix(2, 2, lv.clone()).unwrap());
        let kl = kl_term(&mut tape, m, l).unwrap();
        assert!((tape.value(kl).item() - gaussian_kl(&mu, &lv)).abs() < 1e-12);
    }

    #[test]
    fn samples_are_reproducible() {
        let vae = Vae::<f32>::new(
            VaeDims { vocab_size: 9, embed_dim: 4, encoder_dim: 6, latent_dim: 3, decoder_dim: 6 },
            1,
        );
        let a = vae.sample(10, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, vae.sample(10, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        assert!(a.iter().all(|d| d.ids.len() <= 5 && d.ids.iter().all(|&i| (3..9).contains(&i))));
    }

    #[test]
    fn training_logs_both_terms_and_reduces_loss() {
        let data: Vec<TokenizedSentence> = (0..12)
            .map(|i| TokenizedSentence { ids: vec![3 + i % 4, 4 + i % 3], source_line: i })
            .collect();
        let mut vae = Vae::<f32>::new(
            VaeDims { vocab_size: 9, embed_dim: 8, encoder_dim: 8, latent_dim: 4, decoder_dim: 12 },
            1,
        );
        let before = vae.eval_loss(&data, 6).unwrap();
        let cfg = TrainConfig { lr: 5e-3, epochs: 20, batch_size: 4, seed: 2 };
        let log = vae.train(&data, &cfg).unwrap();
        assert!(log.epochs.iter().all(|e| e.kl.is_some_and(|k| k >= 0.0)));
        assert!(vae.eval_loss(&data, 6).unwrap() < before);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
            prop_assert!(gaussian_kl(&mu, &lv) >= 0.0);
        }
    }
}
