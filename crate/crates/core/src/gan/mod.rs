//! Generator and critic over the autoencoder's latent space, trained with
//! the Wasserstein objective plus a gradient penalty on interpolates.
//!
//! The critic minimizes `E[f(fake)] − E[f(real)] + λ·E[(‖∇f(x̂)‖₂ − 1)²]`
//! with `x̂ = ε·real + (1 − ε)·fake`, one `ε ~ U[0, 1]` per row. The
//! generator minimizes `−E[f(g(z))]` with `z ~ N(0, I)`.

mod resnet;
pub mod toy;

pub use resnet::{ResNet, ResNetDims, ResidualLayer};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{standard_normal, Bound};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanTrainConfig {
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Gradient-penalty coefficient λ.
    pub penalty: f64,
    pub lr_gen: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub seed: u64,
    /// Overrides the epoch-derived number of generator updates.
    pub generator_steps: Option<usize>,
    /// Clamp critic weights to `[-c, c]` after each update (plain WGAN).
    pub clip: Option<f64>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            critic_steps: 10,
            penalty: 10.0,
            lr_gen: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 15,
            batch_size: 64,
            z_dim: 100,
            seed: 0,
            generator_steps: None,
            clip: None,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critic_steps == 0 {
            return Err(Error::InvalidArgument("critic steps per generator step must be ≥ 1".into()));
        }
        if self.penalty.is_nan() || self.penalty < 0.0 {
            return Err(Error::InvalidArgument("penalty coefficient must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.z_dim == 0 {
            return Err(Error::InvalidArgument("batch size and z_dim must be positive".into()));
        }
        Ok(())
    }

    /// Generator updates for a dataset of `n` vectors: one critic step per
    /// real batch, `epochs` passes, `critic_steps` critic steps per update.
    pub fn total_generator_steps(&self, n: usize) -> usize {
        self.generator_steps.unwrap_or_else(|| {
            let batches = n.div_ceil(self.batch_size);
            (self.epochs * batches / self.critic_steps).max(1)
        })
    }
}

/// Critic score per row, `[n, 1]`.
pub fn critic_scores<T: Real>(critic: &ResNet<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    critic.apply(v)
}

/// `mean_i (‖∇ₓ critic(x̂ᵢ)‖₂ − 1)²` at `x̂ᵢ = εᵢ·realᵢ + (1 − εᵢ)·fakeᵢ`.
/// The result stays differentiable with respect to the critic weights.
pub fn gradient_penalty<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    critic: &ResNet<T>,
    p: &Bound,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradient_penalty",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    if real.rank() != 2 || real.is_empty() {
        return Err(Error::Empty("gradient penalty batch"));
    }
    let (n, d) = (real.rows(), real.cols());
    if eps.len() != n {
        return Err(Error::InvalidArgument(format!("need {n} interpolation weights, got {}", eps.len())));
    }
    let mut mixed = Vec::with_capacity(n * d);
    for (r, &e) in eps.iter().enumerate() {
        let one_minus = T::one() - e;
        mixed.extend(real.row(r).iter().zip(fake.row(r)).map(|(&a, &b)| e * a + one_minus * b));
    }
    let x_hat = tape.param_owned(Tensor::from_raw(vec![n, d], mixed));
    let scores = critic.forward(tape, p, x_hat)?;
    let total = tape.sum(scores);
    let [grad] = tape.grad(total, &[x_hat], true)?[..] else { unreachable!() };
    let norms = tape.row_norm(grad)?;
    let dev = tape.add_scalar(norms, -T::one());
    let sq = tape.mul(dev, dev)?;
    Ok(tape.mean(sq))
}

/// Uniform interpolation weights, one per row.
pub fn interpolation_weights<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::c(rng.random::<f64>())).collect()
}

/// Terms of one critic evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub loss: Var,
    pub real_mean: Var,
    pub fake_mean: Var,
    pub penalty: Var,
}

/// `E[f(fake)] − E[f(real)] + λ·penalty`. `fake` is a plain tensor, so no
/// gradient reaches the generator.
pub fn critic_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    critic: &ResNet<T>,
    p: &Bound,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
    lambda: T,
) -> Result<CriticLoss> {
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let sr = critic.forward(tape, p, r)?;
    let sf = critic.forward(tape, p, f)?;
    let real_mean = tape.mean(sr);
    let fake_mean = tape.mean(sf);
    let diff = tape.sub(fake_mean, real_mean)?;
    let penalty = if lambda == T::zero() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        gradient_penalty(tape, critic, p, real, fake, eps)?
    };
    let weighted = tape.scale(penalty, lambda);
    let loss = tape.add(diff, weighted)?;
    Ok(CriticLoss { loss, real_mean, fake_mean, penalty })
}

/// `−E[critic(gen(z))]`; `critic_p` should be bound frozen.
pub fn generator_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    gen: &ResNet<T>,
    gen_p: &Bound,
    critic: &ResNet<T>,
    critic_p: &Bound,
    z: &Tensor<T>,
) -> Result<Var> {
    if z.rank() != 2 || z.is_empty() {
        return Err(Error::Empty("generator batch"));
    }
    let zv = tape.constant(z.clone());
    let fake = gen.forward(tape, gen_p, zv)?;
    let scores = critic.forward(tape, critic_p, fake)?;
    let m = tape.mean(scores);
    Ok(tape.neg(m))
}

/// One logged generator iteration: critic terms averaged over its critic
/// steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLogEntry {
    pub iteration: usize,
    pub critic_loss: f64,
    /// `E[f(real)] − E[f(fake)]`.
    pub wasserstein: f64,
    pub penalty: f64,
    pub generator_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanLog {
    pub entries: Vec<GanLogEntry>,
}

impl GanLog {
    /// CSV with header `iteration,critic_loss,wasserstein_estimate,penalty`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,critic_loss,wasserstein_estimate,penalty\n");
        for e in &self.entries {
            out += &format!("{},{},{},{}\n", e.iteration, e.critic_loss, e.wasserstein, e.penalty);
        }
        out
    }
}

/// Stateful WGAN-GP trainer: optimizers, rng and the real-data cursor.
pub struct WganTrainer<T: Real> {
    cfg: GanTrainConfig,
    rng: ChaCha8Rng,
    gen_opt: Adam<T>,
    critic_opt: Adam<T>,
    order: Vec<usize>,
    cursor: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticStep {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

impl<T: Real> WganTrainer<T> {
    pub fn new(cfg: GanTrainConfig, gen: &ResNet<T>, critic: &ResNet<T>) -> Result<Self> {
        cfg.validate()?;
        if gen.dims.in_dim != cfg.z_dim {
            return Err(Error::InvalidArgument(format!(
                "generator input {} != z_dim {}",
                gen.dims.in_dim, cfg.z_dim
            )));
        }
        if gen.dims.out_dim != critic.dims.in_dim || critic.dims.out_dim != 1 {
            return Err(Error::InvalidArgument("generator output must feed a scalar critic".into()));
        }
        let adam = |lr| AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8 };
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            gen_opt: Adam::new(adam(cfg.lr_gen), &gen.store),
            critic_opt: Adam::new(adam(cfg.lr_critic), &critic.store),
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_real(&mut self, data: &Tensor<T>) -> Tensor<T> {
        let (n, d) = (data.rows(), data.cols());
        let bs = self.cfg.batch_size.min(n);
        if self.order.len() != n || self.cursor + bs > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut out = Vec::with_capacity(bs * d);
        for &i in &self.order[self.cursor..self.cursor + bs] {
            out.extend_from_slice(data.row(i));
        }
        self.cursor += bs;
        Tensor::from_raw(vec![bs, d], out)
    }

    fn noise(&mut self, n: usize) -> Tensor<T> {
        standard_normal(&[n, self.cfg.z_dim], &mut self.rng)
    }

    /// One critic update on the next real batch. Only `critic` changes.
    pub fn critic_step(&mut self, gen: &ResNet<T>, critic: &mut ResNet<T>, data: &Tensor<T>) -> Result<CriticStep> {
        let real = self.next_real(data);
        let z = self.noise(real.rows());
        let fake = gen.apply(&z)?;
        let eps = interpolation_weights(real.rows(), &mut self.rng);
        let (step, grads) = {
            let mut tape = Tape::new();
            let p = critic.store.bind(&mut tape);
            let cl = critic_loss(&mut tape, critic, &p, &real, &fake, &eps, T::c(self.cfg.penalty))?;
            let step = CriticStep {
                loss: tape.value(cl.loss).item().as_f64(),
                wasserstein: (tape.value(cl.real_mean).item() - tape.value(cl.fake_mean).item()).as_f64(),
                penalty: tape.value(cl.penalty).item().as_f64(),
            };
            if !step.loss.is_finite() {
                return Ok(step);
            }
            let mut g = tape.backward(cl.loss)?;
            (step, p.gradients(&mut g, &critic.store))
        };
        self.critic_opt.step(&mut critic.store, &grads);
        if let Some(c) = self.cfg.clip {
            let c = T::c(c);
            for t in critic.store.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = v.max(-c).min(c));
            }
        }
        Ok(step)
    }

    /// One generator update through a frozen critic. Only `gen` changes.
    pub fn generator_step(&mut self, gen: &mut ResNet<T>, critic: &ResNet<T>) -> Result<f64> {
        let z = self.noise(self.cfg.batch_size);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let gp = gen.store.bind(&mut tape);
            let cp = critic.store.bind_frozen(&mut tape);
            let loss = generator_loss(&mut tape, gen, &gp, critic, &cp, &z)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Ok(value);
            }
            let mut g = tape.backward(loss)?;
            (value, gp.gradients(&mut g, &gen.store))
        };
        self.gen_opt.step(&mut gen.store, &grads);
        Ok(loss)
    }
}

/// Alternates `critic_steps` critic updates with one generator update.
/// `data` holds one real latent vector per row. On a non-finite loss both
/// networks roll back to the last good epoch boundary.
pub fn train_gan<T: Real>(
    gen: &mut ResNet<T>,
    critic: &mut ResNet<T>,
    data: &Tensor<T>,
    cfg: &GanTrainConfig,
    mut on_iteration: impl FnMut(&GanLogEntry),
) -> Result<GanLog> {
    if data.rank() != 2 || data.is_empty() {
        return Err(Error::Empty("latent dataset"));
    }
    if data.cols() != critic.dims.in_dim {
        return Err(Error::ShapeMismatch {
            op: "train_gan",
            lhs: data.shape().to_vec(),
            rhs: vec![data.rows(), critic.dims.in_dim],
        });
    }
    let mut trainer = WganTrainer::new(*cfg, gen, critic)?;
    let total = cfg.total_generator_steps(data.rows());
    let per_epoch = (total / cfg.epochs.max(1)).max(1);
    let mut good = (gen.store.clone(), critic.store.clone());
    let mut log = GanLog::default();
    for iteration in 1..=total {
        let (mut loss, mut w, mut pen) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.critic_steps {
            let s = trainer.critic_step(gen, critic, data)?;
            loss += s.loss;
            w += s.wasserstein;
            pen += s.penalty;
        }
        let g = trainer.generator_step(gen, critic)?;
        let k = cfg.critic_steps as f64;
        let entry = GanLogEntry {
            iteration,
            critic_loss: loss / k,
            wasserstein: w / k,
            penalty: pen / k,
            generator_loss: g,
        };
        let finite = [entry.critic_loss, entry.wasserstein, entry.penalty, g].iter().all(|v| v.is_finite());
        if !finite || !gen.store.is_finite() || !critic.store.is_finite() {
            gen.store = good.0;
            critic.store = good.1;
            return Err(Error::Diverged { epoch: iteration / per_epoch + 1 });
        }
        if iteration % per_epoch == 0 {
            good = (gen.store.clone(), critic.store.clone());
        }
        on_iteration(&entry);
        log.entries.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_critic(w: &[f64]) -> ResNet<f64> {
        let mut c = ResNet::new(ResNetDims::critic(w.len(), w.len(), 0), 0);
        let head = c.head();
        *c.store.get_mut(head.w) = Tensor::matrix(w.len(), 1, w.to_vec()).unwrap();
        *c.store.get_mut(head.b) = Tensor::zeros(&[1]);
        c
    }

    fn batch(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        standard_normal(&[rows, d], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn penalty_of(critic: &ResNet<f64>, real: &Tensor<f64>, fake: &Tensor<f64>) -> f64 {
        let eps = interpolation_weights(real.rows(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let p = critic.store.bind(&mut tape);
        let gp = gradient_penalty(&mut tape, critic, &p, real, fake, &eps).unwrap();
        tape.value(gp).item()
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let c = linear_critic(&[0.6, 0.8]);
        assert!(penalty_of(&c, &batch(5, 2, 1), &batch(5, 2, 2)).abs() < 1e-12);
    }

    #[test]
    fn norm_three_linear_critic_has_penalty_four() {
        let c = linear_critic(&[1.0, 2.0, 2.0]);
        assert!((penalty_of(&c, &batch(5, 3, 1), &batch(5, 3, 2)) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_symmetric_for_identical_batches() {
        let c = ResNet::<f64>::new(ResNetDims::critic(3, 5, 2), 4);
        let b = batch(4, 3, 9);
        assert_eq!(penalty_of(&c, &b, &b), penalty_of(&c, &b, &b.clone()));
        assert!(gradient_penalty(
            &mut Tape::new(),
            &c,
            &c.store.bind(&mut Tape::new()),
            &b,
            &batch(3, 3, 1),
            &[0.5; 4]
        )
        .is_err());
    }

    fn loss_value(critic: &ResNet<f64>, real: &Tensor<f64>, fake: &Tensor<f64>, lambda: f64) -> f64 {
        let eps = vec![0.3; real.rows()];
        let mut tape = Tape::new();
        let p = critic.store.bind(&mut tape);
        let cl = critic_loss(&mut tape, critic, &p, real, fake, &eps, lambda).unwrap();
        tape.value(cl.loss).item()
    }

    #[test]
    fn critic_loss_cases() {
        let b = batch(6, 3, 3);
        let deep = ResNet::<f64>::new(ResNetDims::critic(3, 4, 2), 1);
        assert_eq!(loss_value(&deep, &b, &b, 0.0), 0.0);
        let zero = linear_critic(&[0.0, 0.0, 0.0]);
        assert_eq!(loss_value(&zero, &b, &batch(6, 3, 4), 0.0), 0.0);
        let c = linear_critic(&[1.0, 2.0, 2.0]);
        assert!((loss_value(&c, &b, &b, 10.0) - 40.0).abs() < 1e-10);
    }

    #[test]
    fn generator_loss_cases() {
        let z = batch(7, 3, 5);
        let mut gen = ResNet::<f64>::new(ResNetDims::generator(3, 3, 2, 3), 2);
        gen.zero_residual_branches();
        gen.set_identity_head().unwrap();
        let w = [0.5, -1.0, 2.0];
        let c = linear_critic(&w);
        let mut tape = Tape::new();
        let gp = gen.store.bind(&mut tape);
        let cp = c.store.bind_frozen(&mut tape);
        let loss = generator_loss(&mut tape, &gen, &gp, &c, &cp, &z).unwrap();
        let expected = -(0..7).map(|r| z.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() / 7.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);

        let zero = linear_critic(&[0.0; 3]);
        let mut tape = Tape::new();
        let gp = gen.store.bind(&mut tape);
        let cp = zero.store.bind_frozen(&mut tape);
        let loss = generator_loss(&mut tape, &gen, &gp, &zero, &cp, &z).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let cfg = GanTrainConfig { z_dim: 4, batch_size: 8, ..Default::default() };
        let mut gen = ResNet::<f32>::new(ResNetDims::generator(4, 6, 2, 3), 1);
        let mut critic = ResNet::<f32>::new(ResNetDims::critic(3, 6, 2), 2);
        let data: Tensor<f32> = standard_normal(&[20, 3], &mut ChaCha8Rng::seed_from_u64(0));
        let mut tr = WganTrainer::new(cfg, &gen, &critic).unwrap();
        for _ in 0..3 {
            let (g0, c0) = (gen.store.checksum(), critic.store.checksum());
            tr.critic_step(&gen, &mut critic, &data).unwrap();
            assert_eq!(gen.store.checksum(), g0);
            assert_ne!(critic.store.checksum(), c0);
            let c1 = critic.store.checksum();
            tr.generator_step(&mut gen, &critic).unwrap();
            assert_eq!(critic.store.checksum(), c1);
            assert_ne!(gen.store.checksum(), g0);
        }
    }

    #[test]
    fn clipped_critic_without_penalty_still_trains() {
        let cfg = GanTrainConfig {
            z_dim: 2,
            batch_size: 16,
            penalty: 0.0,
            clip: Some(0.01),
            generator_steps: Some(5),
            critic_steps: 2,
            ..Default::default()
        };
        let mut gen = ResNet::<f32>::new(ResNetDims::generator(2, 8, 1, 2), 1);
        let mut critic = ResNet::<f32>::new(ResNetDims::critic(2, 8, 1), 2);
        let data: Tensor<f32> = standard_normal(&[64, 2], &mut ChaCha8Rng::seed_from_u64(0));
        let log = train_gan(&mut gen, &mut critic, &data, &cfg, |_| {}).unwrap();
        assert_eq!(log.entries.len(), 5);
        assert!(critic.store.iter().all(|(_, t)| t.data().iter().all(|v| v.abs() <= 0.01)));
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = GanTrainConfig::default();
        assert_eq!((cfg.critic_steps, cfg.lr_gen, cfg.lr_critic, cfg.epochs), (10, 1e-4, 1e-4, 15));
        assert_eq!(cfg.penalty, 10.0);
        assert!(GanTrainConfig { critic_steps: 0, ..cfg }.validate().is_err());
        assert!(GanTrainConfig { penalty: -1.0, ..cfg }.validate().is_err());
        assert_eq!(cfg.total_generator_steps(640), 15);
    }
}
