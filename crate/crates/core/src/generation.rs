//! Sentence sampling through the generator and the autoencoder's decoder,
//! and straight-line walks between two generator inputs.

use rand::Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::gan::ResNet;
use crate::nn::standard_normal;
use crate::seq::{Autoencoder, Decoded};
use crate::tensor::{Real, Tensor};

/// Maps generator inputs `z: [n, z_dim]` to sentences: generator, then
/// greedy decoding.
pub fn decode_inputs<T: Real>(gen: &ResNet<T>, ae: &Autoencoder<T>, z: &Tensor<T>, max_len: usize) -> Result<Vec<Decoded>> {
    if gen.dims.out_dim != ae.latent_dim() {
        return Err(Error::ShapeMismatch {
            op: "decode_inputs",
            lhs: vec![gen.dims.out_dim],
            rhs: vec![ae.latent_dim()],
        });
    }
    if z.rank() == 2 && z.rows() == 0 {
        return Ok(Vec::new());
    }
    let latents = gen.apply(z)?;
    ae.decode_greedy_batch(&latents, max_len)
}

/// `count` sentences, each from an independent `z ~ N(0, I)`.
pub fn sample_sentences<T: Real, R: Rng + ?Sized>(
    gen: &ResNet<T>,
    ae: &Autoencoder<T>,
    count: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Decoded>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let z: Tensor<T> = standard_normal(&[count, gen.dims.in_dim], rng);
    decode_inputs(gen, ae, &z, max_len)
}

/// Points `v₁ + (v₂ − v₁)/N · i` for `i = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationPath<T: Real> {
    pub v1: Tensor<T>,
    pub v2: Tensor<T>,
    pub n: usize,
    pub points: Vec<Tensor<T>>,
}

impl<T: Real> InterpolationPath<T> {
    /// Points stacked as `[N + 1, dim]`.
    pub fn matrix(&self) -> Tensor<T> {
        let d = self.v1.len();
        let data = self.points.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::new(vec![self.points.len(), d], data).expect("points share a dimension")
    }
}

pub fn interpolate_inputs<T: Real>(v1: &Tensor<T>, v2: &Tensor<T>, n: usize) -> Result<InterpolationPath<T>> {
    if v1.len() != v2.len() || v1.rank() != 1 || v2.rank() != 1 {
        return Err(Error::ShapeMismatch { op: "interpolate", lhs: v1.shape().to_vec(), rhs: v2.shape().to_vec() });
    }
    if n < 1 {
        return Err(Error::InvalidArgument("interpolation needs N ≥ 1".into()));
    }
    let steps = T::c(n as f64);
    let delta: Vec<T> = v1.data().iter().zip(v2.data()).map(|(&a, &b)| (b - a) / steps).collect();
    let mut points: Vec<Tensor<T>> = (0..=n)
        .map(|i| {
            let i = T::c(i as f64);
            Tensor::vector(v1.data().iter().zip(&delta).map(|(&a, &d)| a + d * i).collect())
        })
        .collect();
    // the formula can miss v₂ by an ulp; the endpoint is v₂ by definition
    points[n] = v2.clone();
    Ok(InterpolationPath { v1: v1.clone(), v2: v2.clone(), n, points })
}

/// `N + 1` sentences along the path from `v1` to `v2` in generator input
/// space.
pub fn interpolate_sentences<T: Real>(
    gen: &ResNet<T>,
    ae: &Autoencoder<T>,
    v1: &Tensor<T>,
    v2: &Tensor<T>,
    n: usize,
    max_len: usize,
) -> Result<Vec<Decoded>> {
    if v1.len() != gen.dims.in_dim {
        return Err(Error::ShapeMismatch { op: "interpolate", lhs: v1.shape().to_vec(), rhs: vec![gen.dims.in_dim] });
    }
    let path = interpolate_inputs(v1, v2, n)?;
    decode_inputs(gen, ae, &path.matrix(), max_len)
}

/// One sentence per line.
pub fn format_sentences(vocab: &Vocabulary, sentences: &[Decoded]) -> String {
    sentences.iter().map(|d| vocab.detokenize(&d.ids) + "\n").collect()
}

/// One `i=<k>\t<sentence>` line per path point.
pub fn format_interpolation(vocab: &Vocabulary, sentences: &[Decoded]) -> String {
    sentences
        .iter()
        .enumerate()
        .map(|(i, d)| format!("i={i}\t{}\n", vocab.detokenize(&d.ids)))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gan::ResNetDims;
    use crate::seq::AeDims;

    fn models() -> (ResNet<f32>, Autoencoder<f32>) {
        let ae = Autoencoder::new(AeDims { vocab_size: 15, embed_dim: 6, latent_dim: 5, decoder_dim: 8 }, 0.5, 1);
        let gen = ResNet::new(ResNetDims::generator(4, 6, 2, 5), 2);
        (gen, ae)
    }

    #[test]
    fn eq_fixtures() {
        let p = interpolate_inputs(&Tensor::vector(vec![0.0, 0.0]), &Tensor::vector(vec![2.0, 4.0]), 2).unwrap();
        let pts: Vec<Vec<f64>> = p.points.iter().map(|t| t.data().to_vec()).collect();
        assert_eq!(pts, vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 4.0]]);
        let v1 = Tensor::vector(vec![0.3, -1.0]);
        let v2 = Tensor::vector(vec![1.7, 0.25]);
        assert_eq!(interpolate_inputs(&v1, &v2, 1).unwrap().points, vec![v1.clone(), v2.clone()]);
        let same = interpolate_inputs(&v1, &v1, 7).unwrap();
        assert!(same.points.iter().all(|p| *p == v1));
        assert_eq!(same.points.len(), 8);
    }

    #[test]
    fn bad_paths_rejected() {
        let v = Tensor::vector(vec![1.0f32, 2.0]);
        assert!(interpolate_inputs(&v, &Tensor::vector(vec![1.0]), 3).is_err());
        assert!(interpolate_inputs(&v, &v, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_valid() {
        let (gen, ae) = models();
        assert!(sample_sentences(&gen, &ae, 0, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_empty());
        let a = sample_sentences(&gen, &ae, 1000, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_sentences(&gen, &ae, 1000, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.iter().all(|d| d.ids.len() <= 20 && d.ids.iter().all(|&i| (3..15).contains(&i))));
    }

    #[test]
    fn interpolation_endpoints_match_direct_decodes() {
        let (gen, ae) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v1: Tensor<f32> = standard_normal(&[4], &mut rng);
        let v2: Tensor<f32> = standard_normal(&[4], &mut rng);
        let path = interpolate_sentences(&gen, &ae, &v1, &v2, 5, 20).unwrap();
        assert_eq!(path.len(), 6);
        let direct = decode_inputs(&gen, &ae, &Tensor::matrix(1, 4, v1.data().to_vec()).unwrap(), 20).unwrap();
        assert_eq!(path[0], direct[0]);
        let direct = decode_inputs(&gen, &ae, &Tensor::matrix(1, 4, v2.data().to_vec()).unwrap(), 20).unwrap();
        assert_eq!(path[5], direct[0]);
        let flat = interpolate_sentences(&gen, &ae, &v1, &v1, 4, 20).unwrap();
        assert!(flat.iter().all(|d| *d == flat[0]));
        assert_eq!(path, interpolate_sentences(&gen, &ae, &v1, &v2, 5, 20).unwrap());
    }

    #[test]
    fn interpolation_lines_are_prefixed() {
        let vocab = Vocabulary::parse("vocab-v1 5 1\n<pad>\n<s>\n</s>\nhello\nworld\n").unwrap();
        let s = vec![Decoded { ids: vec![3, 4], terminated: true }, Decoded { ids: vec![4], terminated: true }];
        assert_eq!(format_interpolation(&vocab, &s), "i=0\thello world\ni=1\tworld\n");
        assert_eq!(format_sentences(&vocab, &s), "hello world\nworld\n");
    }

    proptest! {
        #[test]
        fn reversal_symmetry(
            v1 in prop::collection::vec(-10.0f64..10.0, 3),
            v2 in prop::collection::vec(-10.0f64..10.0, 3),
            n in 1usize..20,
        ) {
            let a = Tensor::vector(v1.clone());
            let b = Tensor::vector(v2.clone());
            let fwd = interpolate_inputs(&a, &b, n).unwrap();
            let back = interpolate_inputs(&b, &a, n).unwrap();
            for i in 0..=n {
                for k in 0..3 {
                    let lhs = fwd.points[i].data()[k] + back.points[i].data()[k];
                    let rhs = v1[k] + v2[k];
                    prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs().max(v1[k].abs()).max(v2[k].abs())));
                }
            }
        }
    }
}
