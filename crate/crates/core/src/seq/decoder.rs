use rand::Rng;

use super::{argmax_token, sample_token, Decoded, LstmCell, SeqBatch};
use crate::autodiff::{Tape, Var};
use crate::corpus::{EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::{Bound, Dense, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// LSTM decoder, optionally conditioned on a latent vector.
///
/// When conditioned, an affine map of the latent initializes `(h, c)` and
/// the latent is concatenated to the word embedding at every step. Without
/// a latent (the language-model baseline) the state starts at zero.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub init: Option<Dense>,
    pub cell: LstmCell,
    pub out: Dense,
    pub latent_dim: usize,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        embed_dim: usize,
        latent_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let init = (latent_dim > 0)
            .then(|| Dense::new(store, &format!("{name}.init"), latent_dim, 2 * hidden_dim, rng));
        let cell = LstmCell::new(store, &format!("{name}.lstm"), embed_dim + latent_dim, hidden_dim, rng);
        let out = Dense::new(store, &format!("{name}.out"), hidden_dim, vocab_size, rng);
        Self { init, cell, out, latent_dim }
    }

    fn initial_state<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        latent: Option<Var>,
        n: usize,
    ) -> Result<(Var, Var)> {
        let hd = self.cell.hidden_dim;
        match (self.init, latent) {
            (Some(init), Some(z)) => {
                let s = init.forward(tape, p, z)?;
                Ok((tape.slice_cols(s, 0, hd)?, tape.slice_cols(s, hd, 2 * hd)?))
            }
            (None, None) => {
                Ok((tape.constant(Tensor::zeros(&[n, hd])), tape.constant(Tensor::zeros(&[n, hd]))))
            }
            _ => Err(Error::InvalidArgument("decoder latent conditioning mismatch".into())),
        }
    }

    fn step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        embedding: ParamId,
        ids: &[usize],
        latent: Option<Var>,
        state: (Var, Var),
    ) -> Result<(Var, Var, Var)> {
        let emb = tape.gather_rows(p[embedding], ids)?;
        let x = match latent {
            Some(z) => tape.concat_cols(&[emb, z])?,
            None => emb,
        };
        let (h, c) = self.cell.step(tape, p, x, state.0, state.1)?;
        let logits = self.out.forward(tape, p, h)?;
        Ok((h, c, logits))
    }

    /// Summed teacher-forced cross-entropy over every target token.
    pub(crate) fn teacher_forced<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        embedding: ParamId,
        latent: Option<Var>,
        batch: &SeqBatch<'_>,
    ) -> Result<Var> {
        let mut state = self.initial_state(tape, p, latent, batch.len())?;
        let mut total: Option<Var> = None;
        for t in 0..=batch.max_len() {
            let (h, c, logits) = self.step(tape, p, embedding, &batch.decoder_input(t), latent, state)?;
            state = (h, c);
            let (targets, weights) = batch.decoder_target::<T>(t);
            let nll = tape.softmax_cross_entropy(logits, &targets, &weights)?;
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        Ok(total.expect("at least one decoding step"))
    }

    /// Free-running decoding of `n` rows; `choose` picks each row's next
    /// token from its logits. Emits at most `max_len` words per row.
    pub(crate) fn run<T: Real>(
        &self,
        store: &ParamStore<T>,
        embedding: ParamId,
        latent: Option<&Tensor<T>>,
        n: usize,
        max_len: usize,
        mut choose: impl FnMut(usize, &[T]) -> usize,
    ) -> Result<Vec<Decoded>> {
        if let Some(z) = latent {
            if z.rank() != 2 || z.shape() != [n, self.latent_dim] {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    lhs: z.shape().to_vec(),
                    rhs: vec![n, self.latent_dim],
                });
            }
        }
        let mut out = vec![Decoded { ids: Vec::new(), terminated: false }; n];
        if n == 0 {
            return Ok(out);
        }
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let z = latent.map(|z| tape.constant_ref(z));
        let mut state = self.initial_state(&mut tape, &p, z, n)?;
        let mut prev = vec![SOS; n];
        let mut done = vec![false; n];
        for t in 0..=max_len {
            let (h, c, logits) = self.step(&mut tape, &p, embedding, &prev, z, state)?;
            state = (h, c);
            let lv = tape.value(logits);
            for r in 0..n {
                if done[r] {
                    continue;
                }
                let tok = choose(r, lv.row(r));
                if tok == EOS {
                    out[r].terminated = true;
                    done[r] = true;
                } else if t == max_len {
                    done[r] = true;
                } else {
                    out[r].ids.push(tok);
                }
                prev[r] = tok;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub(crate) fn greedy<T: Real>(
        &self,
        store: &ParamStore<T>,
        embedding: ParamId,
        latent: Option<&Tensor<T>>,
        n: usize,
        max_len: usize,
    ) -> Result<Vec<Decoded>> {
        self.run(store, embedding, latent, n, max_len, |_, logits| argmax_token(logits))
    }

    pub(crate) fn sample<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        embedding: ParamId,
        latent: Option<&Tensor<T>>,
        n: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Decoded>> {
        self.run(store, embedding, latent, n, max_len, |_, logits| sample_token(logits, rng))
    }
}
