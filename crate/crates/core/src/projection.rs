//! Exact t-SNE for looking at real and generated sentence vectors side by
//! side, plus a neighbourhood-overlap score for the resulting map.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Generated,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Generated => "generated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Larger inputs are uniformly subsampled to this many points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            max_points: 5000,
            seed: 0,
        }
    }
}

/// Entropy tolerance for the per-point bandwidth search.
/// Neighbourhood size for [`overlap_score`].
pub const OVERLAP_K: usize = 10;

const ENTROPY_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Label>,
    /// Input rows kept, in output order.
    pub kept: Vec<usize>,
    /// KL(P‖Q) after every iteration, exaggeration excluded.
    pub kl_trace: Vec<f64>,
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities `p(j|i)`, row-major, each row summing to 1, with
/// bandwidths chosen by bisection so each row's perplexity matches.
pub fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        let min_d = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
        let out = &mut p[i * n..(i + 1) * n];
        for _ in 0..200 {
            // shifting by the nearest distance keeps exp() away from underflow
            let mut sum = 0.0;
            for j in 0..n {
                out[j] = if j == i { 0.0 } else { (-(row[j] - min_d) * beta).exp() };
                sum += out[j];
            }
            let mut weighted = 0.0;
            for j in 0..n {
                weighted += out[j] * (row[j] - min_d);
            }
            let h = sum.ln() + beta * weighted / sum;
            out.iter_mut().for_each(|v| *v /= sum);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    p
}

/// `(P + Pᵀ) / 2n`, summing to 1.
pub fn symmetrize(p: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (p[i * n + j] + p[j * n + i]) / (2.0 * n as f64);
        }
    }
    out
}

/// Top-two principal component scores, scaled to standard deviation 1e-4
/// along the first axis. Each component's sign is fixed so its largest
/// loading is positive.
fn pca_init(x: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let (n, d) = (x.len(), x[0].len());
    let mut m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = m.transpose() * &m;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        if big < 0.0 {
            v = -v;
        }
        comps.push(&m * v);
    }
    while comps.len() < 2 {
        comps.push(nalgebra::DVector::zeros(n));
    }
    let std = (comps[0].iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if std > 0.0 { 1e-4 / std } else { 1.0 };
    (0..n).map(|i| [comps[0][i] * scale, comps[1][i] * scale]).collect()
}

/// Student-t kernel `1 / (1 + ‖yᵢ − yⱼ‖²)` and its off-diagonal sum.
fn kernel(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    total
}

fn kl_divergence(p: &[f64], num: &[f64], total: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / total).max(1e-300)).ln())
        .sum()
}

/// Gradient of `KL(αP‖Q)` with respect to the embedding, into `grad`.
fn kl_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64, num: &mut [f64], grad: &mut [[f64; 2]]) {
    let n = y.len();
    let total = kernel(y, num);
    for i in 0..n {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (exaggeration * p[i * n + j] - num[i * n + j] / total) * num[i * n + j];
            g[0] += w * (y[i][0] - y[j][0]);
            g[1] += w * (y[i][1] - y[j][1]);
        }
        grad[i] = [4.0 * g[0], 4.0 * g[1]];
    }
}

pub fn tsne(points: &[Vec<f64>], labels: &[Label], cfg: &ProjectionConfig) -> Result<Embedding> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let kept: Vec<usize> = if points.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, points.len(), cfg.max_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..points.len()).collect()
    };
    let x: Vec<Vec<f64>> = kept.iter().map(|&i| points[i].clone()).collect();
    let labels: Vec<Label> = kept.iter().map(|&i| labels[i]).collect();
    let n = x.len();
    if cfg.perplexity <= 1.0 || (n as f64) < 3.0 * cfg.perplexity || (n as f64 - 1.0) / 3.0 <= cfg.perplexity {
        return Err(Error::InvalidArgument(format!(
            "{n} points is too few for perplexity {}",
            cfg.perplexity
        )));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidArgument("points must share a nonzero dimension".into()));
    }
    if x.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("points must be finite".into()));
    }
    let dist = sq_distances(&x);
    if dist.iter().all(|&d| d == 0.0) {
        return Err(Error::InvalidArgument("all points are identical".into()));
    }
    let p = symmetrize(&conditional_affinities(&dist, n, cfg.perplexity), n);
    let mut y = pca_init(&x);
    let mut update = vec![[0.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };
        kl_gradient(&p, &y, exaggeration, &mut num, &mut grad);
        for i in 0..n {
            for k in 0..2 {
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        for k in 0..2 {
            let mean = y.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[k] -= mean);
        }
        let total = kernel(&y, &mut num);
        kl_trace.push(kl_divergence(&p, &num, total));
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Diverged { epoch: cfg.iterations });
    }
    Ok(Embedding { points: y, labels, kept, kl_trace })
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Fraction of real points whose `k` nearest other points include a
/// generated one. Distance ties are broken by index.
pub fn overlap_score(points: &[[f64; 2]], labels: &[Label], k: usize) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::InvalidArgument("one label per point".into()));
    }
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument(format!("need more than k = {k} points, got {n}")));
    }
    let real: Vec<usize> = (0..n).filter(|&i| labels[i] == Label::Real).collect();
    if real.is_empty() || real.len() == n {
        return Err(Error::InvalidArgument("need both real and generated points".into()));
    }
    let mut hits = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &i in &real {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let d: Vec<f64> = (0..n).map(|j| dist2(points[i], points[j])).collect();
        order.select_nth_unstable_by(k - 1, |&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        if order[..k].iter().any(|&j| labels[j] == Label::Generated) {
            hits += 1;
        }
    }
    Ok(hits as f64 / real.len() as f64)
}

/// `x,y,label` rows.
pub fn to_csv(e: &Embedding) -> String {
    let mut out = String::from("x,y,label\n");
    for (p, l) in e.points.iter().zip(&e.labels) {
        let _ = writeln!(out, "{},{},{}", p[0], p[1], l.as_str());
    }
    out
}

/// Scatter plot, real points blue and generated points red.
pub fn to_svg(e: &Embedding) -> String {
    let (w, pad) = (600.0, 20.0);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &e.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\">\n");
    for (p, l) in e.points.iter().zip(&e.labels) {
        let cx = pad + (p[0] - lo[0]) / span * (w - 2.0 * pad);
        let cy = w - pad - (p[1] - lo[1]) / span * (w - 2.0 * pad);
        let colour = if *l == Label::Real { "blue" } else { "red" };
        let _ = writeln!(out, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{colour}\" fill-opacity=\"0.6\"/>");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn clusters(per: usize, dim: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut truth = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                x.push(
                    (0..dim)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            e + if c == 0 { 0.0 } else { sep }
                        })
                        .collect(),
                );
                truth.push(c);
            }
        }
        (x, truth)
    }

    fn small_cfg() -> ProjectionConfig {
        ProjectionConfig { perplexity: 10.0, ..Default::default() }
    }

    #[test]
    fn affinity_rows_normalized_and_symmetric_sum_one() {
        let (x, _) = clusters(20, 5, 3.0, 1);
        let n = x.len();
        let p = conditional_affinities(&sq_distances(&x), n, 10.0);
        for i in 0..n {
            assert!((p[i * n..(i + 1) * n].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let s = symmetrize(&p, n);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_matches_target() {
        let (x, _) = clusters(20, 5, 3.0, 2);
        let n = x.len();
        let p = conditional_affinities(&sq_distances(&x), n, 10.0);
        for i in 0..n {
            let h: f64 = -p[i * n..(i + 1) * n].iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            assert!((h - 10f64.ln()).abs() < 1e-4, "row {i}: {}", h.exp());
        }
    }

    #[test]
    fn recovers_two_clusters() {
        let (x, truth) = clusters(20, 100, 10.0, 3);
        let labels = vec![Label::Real; x.len()];
        let e = tsne(&x, &labels, &small_cfg()).unwrap();
        let mut centroid = [[0.0; 2]; 2];
        for (p, &c) in e.points.iter().zip(&truth) {
            centroid[c][0] += p[0] / 20.0;
            centroid[c][1] += p[1] / 20.0;
        }
        let correct = e
            .points
            .iter()
            .zip(&truth)
            .filter(|(p, &c)| dist2(**p, centroid[c]) < dist2(**p, centroid[1 - c]))
            .count();
        assert!(correct as f64 / 40.0 >= 0.95);
    }

    #[test]
    fn duplicates_stay_together() {
        let (x, _) = clusters(15, 10, 4.0, 4);
        let doubled: Vec<Vec<f64>> = x.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let labels = vec![Label::Real; doubled.len()];
        let e = tsne(&doubled, &labels, &small_cfg()).unwrap();
        for i in (0..doubled.len()).step_by(2) {
            assert!(dist2(e.points[i], e.points[i + 1]).sqrt() < 1e-3);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (x, _) = clusters(8, 4, 2.0, 7);
        let n = x.len();
        let p = symmetrize(&conditional_affinities(&sq_distances(&x), n, 4.0), n);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut y: Vec<[f64; 2]> = (0..n).map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]).collect();
        let mut num = vec![0.0; n * n];
        let mut grad = vec![[0.0; 2]; n];
        kl_gradient(&p, &y, 1.0, &mut num, &mut grad);
        let h = 1e-6;
        for i in 0..n {
            for k in 0..2 {
                let orig = y[i][k];
                y[i][k] = orig + h;
                let t = kernel(&y, &mut num);
                let plus = kl_divergence(&p, &num, t);
                y[i][k] = orig - h;
                let t = kernel(&y, &mut num);
                let minus = kl_divergence(&p, &num, t);
                y[i][k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - grad[i][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[i][k]);
            }
        }
    }

    #[test]
    fn kl_settles_after_exaggeration() {
        for seed in 0..10 {
            let (x, _) = clusters(20, 100, 10.0, seed);
            let e = tsne(&x, &[Label::Real; 40], &small_cfg()).unwrap();
            let half = e.kl_trace.len() / 2;
            for w in e.kl_trace[half..].windows(2) {
                assert!(w[1] <= w[0] * 1.01, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn reproducible_under_seed() {
        let (x, _) = clusters(20, 8, 3.0, 6);
        let labels = vec![Label::Real; 40];
        assert_eq!(tsne(&x, &labels, &small_cfg()).unwrap(), tsne(&x, &labels, &small_cfg()).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let labels = vec![Label::Real; 40];
        assert!(tsne(&vec![vec![1.0, 2.0]; 40], &labels, &small_cfg()).is_err());
        let (x, _) = clusters(5, 3, 1.0, 0);
        assert!(tsne(&x, &labels[..10], &small_cfg()).is_err());
    }

    #[test]
    fn overlap_fixtures() {
        let real: Vec<[f64; 2]> = (0..15).map(|i| [i as f64, (i * 7 % 5) as f64]).collect();
        let mut pts = real.clone();
        pts.extend(real.iter().copied());
        let mut labels = vec![Label::Real; 15];
        labels.extend(vec![Label::Generated; 15]);
        assert_eq!(overlap_score(&pts, &labels, 10).unwrap(), 1.0);

        let mut far = real.clone();
        far.extend(real.iter().map(|p| [p[0] + 1e6, p[1]]));
        assert_eq!(overlap_score(&far, &labels, 10).unwrap(), 0.0);
        assert!(overlap_score(&far[..5], &labels[..5], 10).is_err());
        assert!(overlap_score(&real, &[Label::Real; 15], 10).is_err());
    }

    #[test]
    fn planted_overlap() {
        // twelve real points on a line, one generated point at each end
        let mut pts: Vec<[f64; 2]> = (0..12).map(|i| [i as f64 * 10.0, 0.0]).collect();
        pts.push([-1.0, 0.0]);
        pts.push([111.0, 0.0]);
        let mut labels = vec![Label::Real; 12];
        labels.extend([Label::Generated; 2]);
        // k = 2 reaches a generated point only from the outermost real points,
        // k = 3 also from their neighbours
        assert_eq!(overlap_score(&pts, &labels, 2).unwrap(), 2.0 / 12.0);
        assert_eq!(overlap_score(&pts, &labels, 3).unwrap(), 4.0 / 12.0);
        let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * 3.0 + 5.0, p[1] - 2.0]).collect();
        assert_eq!(overlap_score(&scaled, &labels, 3).unwrap(), 4.0 / 12.0);
    }

    #[test]
    fn csv_and_svg_output() {
        let e = Embedding {
            points: vec![[0.0, 1.0], [2.0, 3.5]],
            labels: vec![Label::Real, Label::Generated],
            kept: vec![0, 1],
            kl_trace: vec![],
        };
        assert_eq!(to_csv(&e), "x,y,label\n0,1,real\n2,3.5,generated\n");
        let svg = to_svg(&e);
        assert!(svg.contains("fill=\"blue\"") && svg.contains("fill=\"red\""));
    }
}
