//! Finite-difference checks of the tape's gradients, in `f64`.
//!
//! Each check draws random inputs, projects the output onto a fixed random
//! direction to get a scalar, and compares the taped gradient of that
//! scalar against central differences. Elementwise primitives are also
//! checked one order up: the taped gradient of `⟨∇f, r⟩` against central
//! differences of the first-order gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gan::{gradient_penalty, generator_loss, ResNet, ResNetDims, ResidualLayer};
use crate::nn::{standard_normal, uniform, Bound, Dense, ParamStore};
use crate::seq::{kl_term, reparameterize};
use crate::seq::LstmCell;
use crate::tensor::Tensor;

/// Graph under test: receives one leaf per input tensor.
pub type Build = Box<dyn for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, cases: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_rel_err < self.tolerance
    }
}

/// Denominator floor for coordinates whose gradient is essentially zero.
const FLOOR: f64 = 1e-6;
/// Inputs to relu and similar kinks are kept at least this far from zero,
/// well outside the finite-difference step.
const KINK_MARGIN: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn projected<'t>(tape: &mut Tape<'t, f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(proj.clone());
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn output_shape(case: &Case) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).shape().to_vec())
}

fn scalar_value(case: &Case, proj: &Tensor<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let s = projected(&mut tape, out, proj)?;
    Ok(tape.value(s).item())
}

fn taped_gradient(case: &Case, proj: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let s = projected(&mut tape, out, proj)?;
    let g = tape.grad(s, &vars, false)?;
    Ok(g.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Largest coordinate-wise relative error between the taped gradient and
/// central differences, for a random projection of the output.
pub fn check_case<R: Rng + ?Sized>(case: &Case, step: f64, rng: &mut R) -> Result<f64> {
    let proj = standard_normal(&output_shape(case)?, rng);
    let analytic = taped_gradient(case, &proj)?;
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + step;
            let plus = scalar_value(case, &proj, &inputs)?;
            inputs[k].data_mut()[i] = orig - step;
            let minus = scalar_value(case, &proj, &inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    if worst.is_nan() {
        return Err(Error::InvalidArgument("gradient check produced NaN".into()));
    }
    Ok(worst)
}

/// Wraps `case` as `x ↦ ⟨∇ₓ⟨f(x), p⟩, r⟩`, whose taped gradient needs the
/// second-order graph.
pub fn second_order<R: Rng + ?Sized>(case: Case, rng: &mut R) -> Result<Case> {
    let proj = standard_normal(&output_shape(&case)?, rng);
    let dirs: Vec<Tensor<f64>> = case.inputs.iter().map(|t| standard_normal(t.shape(), rng)).collect();
    let inner = case.build;
    let build: Build = Box::new(move |tape, vars| {
        let out = inner(tape, vars)?;
        let s = projected(tape, out, &proj)?;
        let grads = tape.grad(s, vars, true)?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for (g, d) in grads.into_iter().zip(&dirs) {
            let term = projected(tape, g, d)?;
            total = tape.add(total, term)?;
        }
        Ok(total)
    });
    Ok(Case { inputs: case.inputs, build })
}

fn run(name: &str, cfg: &GradCheckConfig, offset: u64, second: bool, make: impl Fn(&mut ChaCha8Rng) -> Case) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(offset));
    let mut worst = 0.0f64;
    for _ in 0..cfg.cases {
        let mut case = make(&mut rng);
        if second {
            case = second_order(case, &mut rng)?;
        }
        worst = worst.max(check_case(&case, cfg.step, &mut rng)?);
    }
    Ok(CheckReport { name: name.to_string(), cases: cfg.cases, max_rel_err: worst, tolerance: cfg.tolerance })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    standard_normal(shape, rng)
}

/// Normal entries pushed at least [`KINK_MARGIN`] away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v.abs() < KINK_MARGIN { v.signum() * KINK_MARGIN * 10.0 + v } else { v })
}

/// Magnitudes in `[0.5, 2]` with random sign.
fn bounded_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.5..2.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn case(inputs: Vec<Tensor<f64>>, build: impl for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

fn binary(f: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>) -> Maker {
    Box::new(move |rng| {
        let s = [dim(rng), dim(rng)];
        case(vec![randn(rng, &s), randn(rng, &s)], move |t, v| f(t, v[0], v[1]))
    })
}

fn unary(f: fn(&mut Tape<'_, f64>, Var) -> Var, kink: bool) -> Maker {
    Box::new(move |rng| {
        let s = [dim(rng), dim(rng)];
        let x = if kink { away_from_zero(rng, &s) } else { randn(rng, &s) };
        case(vec![x], move |t, v| Ok(f(t, v[0])))
    })
}

/// Every tape primitive, with whether its second-order rule is checked.
fn primitives() -> Vec<(&'static str, bool, Maker)> {
    vec![
        ("add", true, binary(|t, a, b| t.add(a, b))),
        ("sub", true, binary(|t, a, b| t.sub(a, b))),
        ("mul", true, binary(|t, a, b| t.mul(a, b))),
        (
            "div",
            true,
            Box::new(|rng| {
                let s = [dim(rng), dim(rng)];
                case(vec![randn(rng, &s), bounded_away(rng, &s)], |t, v| t.div(v[0], v[1]))
            }),
        ),
        (
            "scale",
            true,
            Box::new(|rng| {
                let c: f64 = rng.random_range(-3.0..3.0);
                let s = [dim(rng), dim(rng)];
                case(vec![randn(rng, &s)], move |t, v| Ok(t.scale(v[0], c)))
            }),
        ),
        ("neg", true, unary(|t, a| t.neg(a), false)),
        (
            "add_scalar",
            true,
            Box::new(|rng| {
                let c: f64 = rng.random_range(-3.0..3.0);
                let s = [dim(rng), dim(rng)];
                case(vec![randn(rng, &s)], move |t, v| Ok(t.add_scalar(v[0], c)))
            }),
        ),
        ("relu", true, unary(|t, a| t.relu(a), true)),
        ("sigmoid", true, unary(|t, a| t.sigmoid(a), false)),
        ("tanh", true, unary(|t, a| t.tanh(a), false)),
        ("exp", true, unary(|t, a| t.exp(a), false)),
        (
            "matmul",
            true,
            Box::new(|rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
                let a = randn(rng, &if ta { [k, m] } else { [m, k] });
                let b = randn(rng, &if tb { [n, k] } else { [k, n] });
                case(vec![a, b], move |t, v| t.matmul_t(v[0], v[1], ta, tb))
            }),
        ),
        (
            "add_bias",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng));
                case(vec![randn(rng, &[n, d]), randn(rng, &[d])], |t, v| t.add_bias(v[0], v[1]))
            }),
        ),
        (
            "affine",
            true,
            Box::new(|rng| {
                let (n, i, o) = (dim(rng), dim(rng), dim(rng));
                case(vec![randn(rng, &[n, i]), randn(rng, &[i, o]), randn(rng, &[o])], |t, v| {
                    t.affine(v[0], v[1], v[2])
                })
            }),
        ),
        ("col_sum", true, unary_r(|t, a| t.col_sum(a))),
        (
            "expand_rows",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng));
                case(vec![randn(rng, &[d])], move |t, v| t.expand_rows(v[0], n))
            }),
        ),
        ("row_sum", true, unary_r(|t, a| t.row_sum(a))),
        (
            "expand_cols",
            true,
            Box::new(|rng| {
                let (n, m) = (dim(rng), dim(rng));
                case(vec![randn(rng, &[n])], move |t, v| t.expand_cols(v[0], m))
            }),
        ),
        (
            "mul_col",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng));
                case(vec![randn(rng, &[n, d]), randn(rng, &[n])], |t, v| t.mul_col(v[0], v[1]))
            }),
        ),
        (
            "row_norm",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng));
                // keep rows well away from the origin, where the norm has a kink
                let x = bounded_away(rng, &[n, d]);
                case(vec![x], |t, v| t.row_norm(v[0]))
            }),
        ),
        ("sum", true, unary(|t, a| t.sum(a), false)),
        ("mean", true, unary(|t, a| t.mean(a), false)),
        (
            "expand_scalar",
            true,
            Box::new(|rng| {
                let s = [dim(rng), dim(rng)];
                case(vec![randn(rng, &[])], move |t, v| t.expand_scalar(v[0], &s))
            }),
        ),
        (
            "reshape",
            true,
            Box::new(|rng| {
                let (a, b) = (dim(rng), dim(rng));
                case(vec![randn(rng, &[a, b])], move |t, v| t.reshape(v[0], &[b, a]))
            }),
        ),
        (
            "concat_cols",
            true,
            Box::new(|rng| {
                let n = dim(rng);
                let parts: Vec<Tensor<f64>> = (0..rng.random_range(1..=3))
                    .map(|_| {
                        let d = dim(rng);
                        randn(rng, &[n, d])
                    })
                    .collect();
                case(parts, |t, v| t.concat_cols(v))
            }),
        ),
        (
            "slice_cols",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng) + 1);
                let start = rng.random_range(0..d);
                let end = rng.random_range(start + 1..=d);
                case(vec![randn(rng, &[n, d])], move |t, v| t.slice_cols(v[0], start, end))
            }),
        ),
        (
            "pad_cols",
            true,
            Box::new(|rng| {
                let (n, d) = (dim(rng), dim(rng));
                let total = d + rng.random_range(0..3);
                let start = rng.random_range(0..=total - d);
                case(vec![randn(rng, &[n, d])], move |t, v| t.pad_cols(v[0], start, total))
            }),
        ),
        (
            "gather_rows",
            true,
            Box::new(|rng| {
                let (rows, d) = (dim(rng), dim(rng));
                let ids: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
                case(vec![randn(rng, &[rows, d])], move |t, v| t.gather_rows(v[0], &ids))
            }),
        ),
        (
            "scatter_add_rows",
            true,
            Box::new(|rng| {
                let (rows, d, n) = (dim(rng), dim(rng), dim(rng));
                let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
                case(vec![randn(rng, &[n, d])], move |t, v| t.scatter_add_rows(v[0], &ids, rows))
            }),
        ),
        (
            "softmax_cross_entropy",
            false,
            Box::new(|rng| {
                let (n, c) = (dim(rng), dim(rng) + 1);
                let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                let weights: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() }).collect();
                let logits = randn(rng, &[n, c]).map(|v| 3.0 * v);
                case(vec![logits], move |t, v| t.softmax_cross_entropy(v[0], &targets, &weights))
            }),
        ),
    ]
}

fn unary_r(f: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Maker {
    Box::new(move |rng| {
        let s = [dim(rng), dim(rng)];
        case(vec![randn(rng, &s)], move |t, v| f(t, v[0]))
    })
}

/// First-order checks of every primitive, then second-order checks of
/// those that support it.
pub fn check_primitives(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let prims = primitives();
    let mut out = Vec::new();
    for (i, (name, _, make)) in prims.iter().enumerate() {
        out.push(run(name, cfg, i as u64, false, make)?);
    }
    for (i, (name, second, make)) in prims.iter().enumerate() {
        if *second {
            out.push(run(&format!("{name} (second order)"), cfg, 1000 + i as u64, true, make)?);
        }
    }
    Ok(out)
}

/// Vars bound as constants, for a network that takes part in a graph but
/// is not under test.
fn frozen<'t>(tape: &mut Tape<'t, f64>, store: &ParamStore<f64>) -> Bound {
    Bound::from_vars(store.iter().map(|(_, t)| tape.constant(t.clone())).collect())
}

/// Smallest |pre-activation| of any relu in `net` over the rows of `x`.
pub fn relu_margin(net: &ResNet<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = net.store.bind(&mut tape);
    let mut h = tape.constant(x.clone());
    if let Some(stem) = net.stem() {
        h = stem.forward(&mut tape, &p, h)?;
    }
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        let pre = layer.inner.forward(&mut tape, &p, h)?;
        margin = tape.value(pre).data().iter().fold(margin, |m, v| m.min(v.abs()));
        h = layer.forward(&mut tape, &p, h)?;
    }
    Ok(margin)
}

/// ResNet with every weight random, residual branches included.
fn random_resnet(dims: ResNetDims, rng: &mut ChaCha8Rng) -> ResNet<f64> {
    let mut net = ResNet::with_rng(dims, rng);
    for t in net.store.tensors_mut() {
        *t = uniform(t.shape(), 0.8, rng);
    }
    net
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, input, hidden) = (dim(rng).min(3), dim(rng).min(3), dim(rng).min(3));
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", input, hidden, rng);
    let mut inputs = vec![randn(rng, &[n, input]), randn(rng, &[n, hidden]), randn(rng, &[n, hidden])];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    case(inputs, move |t, v| {
        let p = Bound::from_vars(v[3..].to_vec());
        let (h, c) = cell.step(t, &p, v[0], v[1], v[2])?;
        t.concat_cols(&[h, c])
    })
}

fn residual_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let (n, w) = (dim(rng), dim(rng));
        let mut store = ParamStore::new();
        let inner = Dense::new(&mut store, "inner", w, w, rng);
        let outer = Dense::new(&mut store, "outer", w, w, rng);
        let layer = ResidualLayer { inner, outer };
        let x = randn(rng, &[n, w]);
        let margin = {
            let mut tape = Tape::inference();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let pre = inner.forward(&mut tape, &p, xv).expect("shapes agree");
            tape.value(pre).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
        };
        if margin < KINK_MARGIN {
            continue;
        }
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        return case(inputs, move |t, v| layer.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]));
    }
}

fn generator_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let dims = ResNetDims::generator(dim(rng), dim(rng) + 1, 3, dim(rng));
        let net = random_resnet(dims, rng);
        let rows = dim(rng);
        let z = randn(rng, &[rows, dims.in_dim]);
        if relu_margin(&net, &z).expect("shapes agree") < KINK_MARGIN {
            continue;
        }
        let mut inputs = vec![z];
        inputs.extend(net.store.iter().map(|(_, t)| t.clone()));
        return case(inputs, move |t, v| net.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]));
    }
}

fn generator_loss_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let latent = dim(rng);
        let gen = random_resnet(ResNetDims::generator(dim(rng), 3, 2, latent), rng);
        let critic = random_resnet(ResNetDims::critic(latent, 3, 2), rng);
        let rows = dim(rng);
        let z = randn(rng, &[rows, gen.dims.in_dim]);
        let fake = gen.apply(&z).expect("shapes agree");
        let margin = relu_margin(&gen, &z).and_then(|a| Ok(a.min(relu_margin(&critic, &fake)?))).expect("shapes agree");
        if margin < KINK_MARGIN {
            continue;
        }
        let inputs: Vec<Tensor<f64>> = gen.store.iter().map(|(_, t)| t.clone()).collect();
        return case(inputs, move |t, v| {
            let gp = Bound::from_vars(v.to_vec());
            let cp = frozen(t, &critic.store);
            generator_loss(t, &gen, &gp, &critic, &cp, &z)
        });
    }
}

fn reparam_case(rng: &mut ChaCha8Rng) -> Case {
    let n = dim(rng);
    let eps = randn(rng, &[n, 2]);
    case(vec![randn(rng, &[n, 2]), randn(rng, &[n, 2])], move |t, v| {
        let e = t.constant(eps.clone());
        let z = reparameterize(t, v[0], v[1], e)?;
        let kl = kl_term(t, v[0], v[1])?;
        let s = t.sum(z);
        t.add(s, kl)
    })
}

/// LSTM step, residual layer, depth-3 generator (weights and input),
/// generator loss through a frozen critic, and the VAE sample path.
pub fn check_composites(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    Ok(vec![
        run("lstm_step", cfg, 2000, false, lstm_case)?,
        run("residual_layer", cfg, 2001, false, residual_case)?,
        run("generator_depth3", cfg, 2002, false, generator_case)?,
        run("generator_loss", cfg, 2003, false, generator_loss_case)?,
        run("vae_reparameterize", cfg, 2004, false, reparam_case)?,
    ])
}

/// Gradient of the penalty with respect to the weights of a depth-2
/// critic, against central differences. Tolerance is `tolerance`.
pub fn check_penalty(cfg: &GradCheckConfig, tolerance: f64) -> Result<CheckReport> {
    let make = |rng: &mut ChaCha8Rng| loop {
        let d = dim(rng) + 1;
        let critic = random_resnet(ResNetDims::critic(d, 4, 2), rng);
        let n = dim(rng);
        let real = randn(rng, &[n, d]);
        let fake = randn(rng, &[n, d]);
        let eps: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mixed = Tensor::new(
            vec![n, d],
            (0..n)
                .flat_map(|r| {
                    let e = eps[r];
                    real.row(r).iter().zip(fake.row(r)).map(move |(a, b)| e * a + (1.0 - e) * b).collect::<Vec<_>>()
                })
                .collect(),
        )
        .expect("valid shape");
        if relu_margin(&critic, &mixed).expect("shapes agree") < KINK_MARGIN {
            continue;
        }
        let inputs: Vec<Tensor<f64>> = critic.store.iter().map(|(_, t)| t.clone()).collect();
        return case(inputs, move |t, v| {
            gradient_penalty(t, &critic, &Bound::from_vars(v.to_vec()), &real, &fake, &eps)
        });
    };
    let cfg = GradCheckConfig { tolerance, ..*cfg };
    run("penalty_double_backprop", &cfg, 3000, false, make)
}

/// Largest deviation of the penalty's weight gradient for a linear critic
/// `f(v) = w·v` from `2(‖w‖ − 1)·w/‖w‖`.
pub fn linear_penalty_closed_form(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.random_range(1..=6);
        let mut critic = ResNet::<f64>::with_rng(ResNetDims::critic(d, d, 0), &mut rng);
        let w: Vec<f64> = standard_normal::<f64, _>(&[d], &mut rng).into_data().iter().map(|v| v * 2.0).collect();
        let head = critic.head();
        *critic.store.get_mut(head.w) = Tensor::matrix(d, 1, w.clone())?;
        let n = rng.random_range(1..=5);
        let real = randn(&mut rng, &[n, d]);
        let fake = randn(&mut rng, &[n, d]);
        let eps: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let p = critic.store.bind(&mut tape);
        let gp = gradient_penalty(&mut tape, &critic, &p, &real, &fake, &eps)?;
        let mut grads = tape.backward(gp)?;
        let g = p.gradients(&mut grads, &critic.store);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, wi) in g[head.w.index()].data().iter().zip(&w) {
            worst = worst.max((a - 2.0 * (norm - 1.0) * wi / norm).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // relu's mask applied to the wrong side flips the gradient
        let c = case(vec![Tensor::vector(vec![1.0, -2.0])], |t, v| {
            let y = t.relu(v[0]);
            let y = t.value(y).clone();
            Ok(t.constant(y))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(check_case(&c, 1e-4, &mut rng).unwrap() > 0.5);
    }

    #[test]
    fn quadratic_passes() {
        let c = case(vec![Tensor::vector(vec![0.3, -1.7, 2.0])], |t, v| t.mul(v[0], v[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(check_case(&c, 1e-4, &mut rng).unwrap() < 1e-8);
        let c2 = second_order(c, &mut rng).unwrap();
        assert!(check_case(&c2, 1e-4, &mut rng).unwrap() < 1e-8);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
