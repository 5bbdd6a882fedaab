//! Eight Gaussians on a ring, the usual 2-D sanity check for GAN training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

pub const MODES: usize = 8;
pub const RADIUS: f64 = 2.0;
pub const STD: f64 = 0.02;
/// A sample counts toward a mode when it lies this close to the centre.
pub const HIT_RADIUS: f64 = 0.3;

pub fn centers() -> [[f64; 2]; MODES] {
    std::array::from_fn(|k| {
        let a = std::f64::consts::TAU * k as f64 / MODES as f64;
        [RADIUS * a.cos(), RADIUS * a.sin()]
    })
}

/// `n` points `[n, 2]` and the mode each was drawn from.
pub fn eight_gaussians<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Tensor<T>, Vec<usize>) {
    let c = centers();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..MODES);
        for &centre in &c[k] {
            let e: f64 = StandardNormal.sample(rng);
            data.push(T::c(centre + STD * e));
        }
        labels.push(k);
    }
    (Tensor::from_raw(vec![n, 2], data), labels)
}

/// Nearest mode within [`HIT_RADIUS`], if any.
pub fn assign(point: &[f64]) -> Option<usize> {
    centers()
        .iter()
        .enumerate()
        .map(|(k, c)| (k, (point[0] - c[0]).hypot(point[1] - c[1])))
        .filter(|&(_, d)| d <= HIT_RADIUS)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Fraction of the rows of `samples: [n, 2]` landing on each mode.
pub fn mode_fractions<T: Real>(samples: &Tensor<T>) -> [f64; MODES] {
    let mut counts = [0usize; MODES];
    let n = samples.rows();
    for r in 0..n {
        let p: Vec<f64> = samples.row(r).iter().map(|v| v.as_f64()).collect();
        if let Some(k) = assign(&p) {
            counts[k] += 1;
        }
    }
    counts.map(|c| c as f64 / n.max(1) as f64)
}

/// Number of modes holding at least `min_fraction` of the samples.
pub fn modes_covered<T: Real>(samples: &Tensor<T>, min_fraction: f64) -> usize {
    mode_fractions(samples).iter().filter(|&&f| f >= min_fraction).count()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn real_samples_land_on_their_modes() {
        let (x, labels) = eight_gaussians::<f64, _>(4000, &mut ChaCha8Rng::seed_from_u64(0));
        for (r, &k) in labels.iter().enumerate() {
            assert_eq!(assign(x.row(r)), Some(k));
        }
        assert_eq!(modes_covered(&x, 0.1), 8);
    }

    #[test]
    fn collapsed_samples_cover_one_mode() {
        let x = Tensor::matrix(3, 2, vec![2.0, 0.0, 2.01, 0.0, 0.0, 0.0]).unwrap();
        let f = mode_fractions::<f64>(&x);
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(modes_covered(&x, 0.02), 1);
    }
}
