use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// LSTM cell with the four gate matrices fused column-wise into one
/// `[(input + hidden), 4 * hidden]` weight, gate order input, forget,
/// output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    /// Uniform ±1/√fan_in weights; forget-gate bias starts at 1.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[fan_in, 4 * hidden_dim], bound, rng));
        let mut bias: Tensor<T> = uniform(&[4 * hidden_dim], bound, rng);
        bias.data_mut()[hidden_dim..2 * hidden_dim].iter_mut().for_each(|v| *v = T::one());
        let b = store.add(format!("{name}.b"), bias);
        Self { w, b, input_dim, hidden_dim }
    }

    /// Shape of each gate's weight block.
    pub fn gate_shape(&self) -> (usize, usize) {
        (self.input_dim + self.hidden_dim, self.hidden_dim)
    }

    /// One step over a batch: `x: [n, input]`, `h, c: [n, hidden]`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        let xh = tape.concat_cols(&[x, h])?;
        let z = tape.affine(xh, p[self.w], p[self.b])?;
        let i = tape.slice_cols(z, 0, hd)?;
        let f = tape.slice_cols(z, hd, 2 * hd)?;
        let o = tape.slice_cols(z, 2 * hd, 3 * hd)?;
        let g = tape.slice_cols(z, 3 * hd, 4 * hd)?;
        let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zero_cell(store: &mut ParamStore<f64>) -> LstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(store, "cell", 1, 1, &mut rng);
        store.get_mut(cell.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(cell.b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        cell
    }

    fn run(c0: f64) -> (f64, f64) {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        let h = tape.constant(Tensor::zeros(&[1, 1]));
        let c = tape.constant(Tensor::full(&[1, 1], c0));
        let (h, c) = cell.step(&mut tape, &p, x, h, c).unwrap();
        (tape.value(h).item(), tape.value(c).item())
    }

    #[test]
    fn zero_weights_zero_state() {
        assert_eq!(run(0.0), (0.0, 0.0));
    }

    #[test]
    fn zero_weights_carry_half_the_cell() {
        let (h, c) = run(2.0);
        assert_eq!(c, 1.0);
        assert!((h - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((h - 0.3808).abs() < 1e-4);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng);
        assert_eq!(&store.get(cell.b).data()[4..8], &[1.0; 4]);
        assert_eq!(store.get(cell.w).shape(), &[7, 16]);
        assert_eq!(cell.gate_shape(), (7, 4));
    }
}
