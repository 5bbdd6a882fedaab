use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, Dense, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNetDims {
    pub in_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl ResNetDims {
    /// Generator: `z_dim → latent_dim`.
    pub fn generator(z_dim: usize, width: usize, depth: usize, latent_dim: usize) -> Self {
        Self { in_dim: z_dim, width, depth, out_dim: latent_dim }
    }

    /// Critic: `latent_dim → 1`.
    pub fn critic(latent_dim: usize, width: usize, depth: usize) -> Self {
        Self { in_dim: latent_dim, width, depth, out_dim: 1 }
    }
}

/// One residual layer `F(x) = H(x) + x` with
/// `H(x) = relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualLayer {
    pub inner: Dense,
    pub outer: Dense,
}

impl ResidualLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let a = self.inner.forward(tape, p, x)?;
        let a = tape.relu(a);
        let h = self.outer.forward(tape, p, a)?;
        tape.add(h, x)
    }
}

/// Residual MLP: an optional affine stem when `in_dim != width`, `depth`
/// residual layers of constant width, and an affine head with no output
/// nonlinearity.
#[derive(Clone, Debug)]
pub struct ResNet<T: Real> {
    pub store: ParamStore<T>,
    pub dims: ResNetDims,
    stem: Option<Dense>,
    layers: Vec<ResidualLayer>,
    head: Dense,
}

impl<T: Real> ResNet<T> {
    /// `W₁, b₁` uniform ±1/√width; `W₂, b₂` zero, so every residual branch
    /// starts as the identity.
    pub fn new(dims: ResNetDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(dims, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(dims: ResNetDims, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let stem = (dims.in_dim != dims.width).then(|| Dense::new(&mut store, "stem", dims.in_dim, dims.width, rng));
        let bound = 1.0 / (dims.width as f64).sqrt();
        let layers = (0..dims.depth)
            .map(|i| {
                let w1 = store.add(format!("layer{i}.inner.w"), uniform(&[dims.width, dims.width], bound, rng));
                let b1 = store.add(format!("layer{i}.inner.b"), uniform(&[dims.width], bound, rng));
                let inner = Dense { w: w1, b: b1, in_dim: dims.width, out_dim: dims.width };
                let outer = Dense::zeros(&mut store, &format!("layer{i}.outer"), dims.width, dims.width);
                ResidualLayer { inner, outer }
            })
            .collect();
        let head = Dense::new(&mut store, "head", dims.width, dims.out_dim, rng);
        Self { store, dims, stem, layers, head }
    }

    pub fn layers(&self) -> &[ResidualLayer] {
        &self.layers
    }

    pub fn head(&self) -> Dense {
        self.head
    }

    pub fn stem(&self) -> Option<Dense> {
        self.stem
    }

    /// Sets every residual branch to zero.
    pub fn zero_residual_branches(&mut self) {
        for l in self.layers.clone() {
            for id in [l.inner.w, l.inner.b, l.outer.w, l.outer.b] {
                self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Makes the head the identity map (requires `width == out_dim`).
    pub fn set_identity_head(&mut self) -> Result<()> {
        if self.dims.width != self.dims.out_dim {
            return Err(Error::InvalidArgument("identity head needs width == out_dim".into()));
        }
        *self.store.get_mut(self.head.w) = Tensor::identity(self.dims.width);
        *self.store.get_mut(self.head.b) = Tensor::zeros(&[self.dims.out_dim]);
        Ok(())
    }

    /// Taped forward pass over `x: [n, in_dim]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let xv = tape.value(x);
        if xv.rank() != 2 || xv.shape()[1] != self.dims.in_dim {
            return Err(Error::ShapeMismatch {
                op: "resnet",
                lhs: xv.shape().to_vec(),
                rhs: vec![xv.rows(), self.dims.in_dim],
            });
        }
        let mut h = match self.stem {
            Some(stem) => stem.forward(tape, p, x)?,
            None => x,
        };
        for layer in &self.layers {
            h = layer.forward(tape, p, h)?;
        }
        self.head.forward(tape, p, h)
    }

    /// Untaped forward pass, `[n, in_dim] → [n, out_dim]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let xv = tape.constant_ref(x);
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass for a single vector.
    pub fn apply_one(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.len() != self.dims.in_dim {
            return Err(Error::ShapeMismatch {
                op: "resnet",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dims.in_dim],
            });
        }
        let x = x.clone().reshape(vec![1, self.dims.in_dim])?;
        Ok(Tensor::vector(self.apply(&x)?.into_data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal;

    #[test]
    fn fresh_residual_branches_are_zero() {
        let net = ResNet::<f32>::new(ResNetDims::generator(8, 8, 3, 8), 1);
        assert!(net.stem().is_none());
        let x: Tensor<f32> = standard_normal(&[5, 8], &mut ChaCha8Rng::seed_from_u64(2));
        // residual branches start at zero, so the net is just its head
        let mut tape = Tape::inference();
        let p = net.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let direct = net.head().forward(&mut tape, &p, xv).unwrap();
        let direct = tape.value(direct).clone();
        assert_eq!(net.apply(&x).unwrap(), direct);
    }

    #[test]
    fn identity_generator_returns_input() {
        let mut net = ResNet::<f32>::new(ResNetDims::generator(6, 6, 4, 6), 3);
        net.zero_residual_branches();
        net.set_identity_head().unwrap();
        let z: Tensor<f32> = standard_normal(&[10, 6], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(net.apply(&z).unwrap(), z);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = ResNet::<f32>::new(ResNetDims::critic(4, 8, 2), 1);
        assert!(net.stem().is_some());
        assert!(net.apply(&Tensor::zeros(&[2, 5])).is_err());
        assert!(net.apply_one(&Tensor::zeros(&[3])).is_err());
        assert_eq!(net.apply_one(&Tensor::zeros(&[4])).unwrap().shape(), &[1]);
    }
}
