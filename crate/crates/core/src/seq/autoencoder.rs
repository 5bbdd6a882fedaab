use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    encode_sequence, eval_loop, train_loop, BatchLoss, Decoded, Decoder, EpochLog, LstmCell,
    SeqBatch, SeqTrainable, StepCtx, TrainConfig, TrainLog,
};
use crate::autodiff::Tape;
use crate::corpus::TokenizedSentence;
use crate::error::{Error, Result};
use crate::nn::{dropout_mask, uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Encoder LSTM width, which is also the latent dimension.
    pub latent_dim: usize,
    pub decoder_dim: usize,
}

impl AeDims {
    pub fn paper(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 200, latent_dim: 100, decoder_dim: 600 }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 64, latent_dim: 64, decoder_dim: 128 }
    }
}

/// LSTM sentence autoencoder. The encoder's final hidden state is the
/// sentence vector.
#[derive(Clone, Debug)]
pub struct Autoencoder<T: Real> {
    pub store: ParamStore<T>,
    pub dims: AeDims,
    /// Dropout rate on the encoder output during training.
    pub dropout: f64,
    embedding: ParamId,
    encoder: LstmCell,
    decoder: Decoder,
}

impl<T: Real> Autoencoder<T> {
    pub fn new(dims: AeDims, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", uniform(&[dims.vocab_size, dims.embed_dim], 0.1, &mut rng));
        let encoder = LstmCell::new(&mut store, "encoder", dims.embed_dim, dims.latent_dim, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            dims.embed_dim,
            dims.latent_dim,
            dims.decoder_dim,
            dims.vocab_size,
            &mut rng,
        );
        Self { store, dims, dropout, embedding, encoder, decoder }
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent_dim
    }

    pub fn encoder(&self) -> &LstmCell {
        &self.encoder
    }

    /// Deterministic sentence vectors `[n, latent]` for a batch.
    pub fn encode_batch(&self, sentences: &[&[usize]]) -> Result<Tensor<T>> {
        let batch = SeqBatch::new(sentences.to_vec())?;
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let h = encode_sequence(&mut tape, &p, self.embedding, &self.encoder, &batch)?;
        Ok(tape.value(h).clone())
    }

    /// Sentence vector `[latent]`, without dropout.
    pub fn encode(&self, sentence: &[usize]) -> Result<Tensor<T>> {
        let v = self.encode_batch(&[sentence])?;
        Ok(Tensor::vector(v.into_data()))
    }

    /// Sentence vector as seen by the decoder during training: dropout at
    /// `self.dropout`, inverted scaling.
    pub fn encode_training<R: Rng + ?Sized>(&self, sentence: &[usize], rng: &mut R) -> Result<Tensor<T>> {
        let v = self.encode(sentence)?;
        let mask: Tensor<T> = dropout_mask(v.shape(), self.dropout, rng);
        Ok(v.zip_map(&mask, |a, m| a * m))
    }

    /// Encodes many sentences in chunks of `batch_size`.
    pub fn encode_all(&self, sentences: &[TokenizedSentence], batch_size: usize) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let refs: Vec<&[usize]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
            let m = self.encode_batch(&refs)?;
            out.extend((0..m.rows()).map(|r| Tensor::vector(m.row(r).to_vec())));
        }
        Ok(out)
    }

    /// Greedy decoding of each row of `latents: [n, latent]`.
    pub fn decode_greedy_batch(&self, latents: &Tensor<T>, max_len: usize) -> Result<Vec<Decoded>> {
        let n = if latents.rank() == 2 { latents.rows() } else { 0 };
        self.decoder.greedy(&self.store, self.embedding, Some(latents), n, max_len)
    }

    pub fn decode_greedy(&self, latent: &Tensor<T>, max_len: usize) -> Result<Decoded> {
        if latent.len() != self.dims.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode_greedy",
                lhs: latent.shape().to_vec(),
                rhs: vec![self.dims.latent_dim],
            });
        }
        let z = latent.clone().reshape(vec![1, self.dims.latent_dim])?;
        Ok(self.decode_greedy_batch(&z, max_len)?.remove(0))
    }

    /// Minimizes teacher-forced reconstruction cross-entropy with Adam.
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

    /// Teacher-forced reconstruction loss in nats per token, no dropout.
    pub fn eval_loss(&self, data: &[TokenizedSentence], batch_size: usize) -> Result<f64> {
        eval_loop(self, data, batch_size)
    }
}

impl<T: Real> SeqTrainable<T> for Autoencoder<T> {
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
        let mut z = encode_sequence(tape, p, self.embedding, &self.encoder, batch)?;
        if ctx.training && self.dropout > 0.0 {
            let mask = tape.constant(dropout_mask(&[batch.len(), self.dims.latent_dim], self.dropout, ctx.rng));
            z = tape.mul(z, mask)?;
        }
        let nll = self.decoder.teacher_forced(tape, p, self.embedding, Some(z), batch)?;
        let tokens = batch.target_tokens();
        let nll_sum = tape.value(nll).item().as_f64();
        let objective = tape.scale(nll, T::c(1.0 / tokens as f64));
        Ok(BatchLoss { objective, nll_sum, tokens, kl_sum: None })
    }
}
