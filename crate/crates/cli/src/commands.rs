use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentgan_core::checkpoint::{config_diff, write_atomic, Checkpoint, Critic, Generator, ModelKind, Persist};
use sentgan_core::config::RunConfig;
use sentgan_core::corpus::{self, TokenizedSentence, Vocabulary};
use sentgan_core::eval::{self, BleuScorer};
use sentgan_core::gan::{self, ResNet};
use sentgan_core::generation;
use sentgan_core::gradcheck::{self, GradCheckConfig};
use sentgan_core::nn::standard_normal;
use sentgan_core::projection::{self, Label, OVERLAP_K};
use sentgan_core::seq::{Autoencoder, Decoded, Nlm, Vae};
use sentgan_core::tensor::Tensor;

use crate::{Command, GlobalArgs};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_FILE: &str = "train.txt";
pub const VALID_FILE: &str = "valid.txt";

pub fn run(global: &GlobalArgs, command: Command) -> Result<ExitCode> {
    let cfg = resolve_config(global)?;
    match command {
        Command::PrepCorpus { input, out_dir } => prep_corpus(&cfg, &input, &out_dir)?,
        Command::TrainAe { data, out, log } => train_ae(&cfg, &data, &out, log.as_deref())?,
        Command::TrainGan { data, ae, out_generator, out_critic, log } => {
            train_gan(&cfg, &data, &ae, &out_generator, out_critic.as_deref(), log.as_deref())?
        }
        Command::TrainNlm { data, out, log } => train_nlm(&cfg, &data, &out, log.as_deref())?,
        Command::TrainVae { data, out, log } => train_vae(&cfg, &data, &out, log.as_deref())?,
        Command::Sample { model, ae, vocab, out, count } => {
            sample(&cfg, &model, ae.as_deref(), &vocab, &out, count.unwrap_or(cfg.sample_count))?
        }
        Command::Interpolate { generator, ae, vocab, out, steps } => {
            interpolate(&cfg, &generator, &ae, &vocab, &out, steps.unwrap_or(cfg.interp_steps))?
        }
        Command::EvalBleu { candidates, references } => eval_bleu(&cfg, &candidates, &references)?,
        Command::MakePairs { real, models, per_model, rater_out, key_out } => {
            make_pairs(&cfg, &real, &models, per_model, &rater_out, &key_out)?
        }
        Command::TallyPairs { key, verdicts, bleu, out } => tally_pairs(&key, &verdicts, &bleu, &out)?,
        Command::Project { data, ae, generator, out, svg, count, noise } => {
            project(&cfg, &data, &ae, &generator, &out, svg.as_deref(), count, noise)?
        }
        Command::Gradcheck => return gradcheck(&cfg),
    }
    Ok(ExitCode::SUCCESS)
}

/// Profile (flag, else the file's `profile` key, else paper), then the
/// config file, then `--set`, then `--seed`.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let text = match &global.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let mut cfg = match global.profile {
        Some(p) => {
            let mut c = RunConfig::for_profile(p);
            c.apply_text(&text)?;
            c.profile = p;
            c
        }
        None => RunConfig::parse(&text)?,
    };
    for kv in &global.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

fn rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::parse(&read(path)?).with_context(|| format!("bad vocabulary file {}", path.display()))
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<TokenizedSentence>,
    valid: Vec<TokenizedSentence>,
}

fn load_prepared(cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    let tok = |name: &str| -> Result<Vec<TokenizedSentence>> {
        let text = read(&dir.join(name))?;
        Ok(corpus::tokenize_corpus(text.lines(), &vocab, cfg.max_len))
    };
    let train = tok(TRAIN_FILE)?;
    let valid = tok(VALID_FILE)?;
    if train.is_empty() {
        bail!("no usable training sentences in {}", dir.display());
    }
    Ok(Prepared { vocab, train, valid })
}

fn load_model<M: Persist>(cfg: &RunConfig, path: &Path) -> Result<M> {
    let (model, snapshot) = M::load(path).with_context(|| format!("cannot load {}", path.display()))?;
    let diff = config_diff(&snapshot, cfg);
    if !diff.is_empty() {
        warn!("{} was trained with different values for: {}", path.display(), diff.join(", "));
    }
    Ok(model)
}

fn save_model<M: Persist>(model: &M, cfg: &RunConfig, path: &Path) -> Result<()> {
    model.save(cfg, path).with_context(|| format!("cannot write {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn prep_corpus(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<()> {
    let text = read(input)?;
    let vocab = Vocabulary::build(text.lines(), cfg.min_count)?;
    let sentences = corpus::tokenize_corpus(text.lines(), &vocab, cfg.max_len);
    let (train, valid) = corpus::split(&sentences, cfg.validation_size, cfg.seed)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let lines = |s: &[TokenizedSentence]| -> String { s.iter().map(|s| vocab.detokenize(&s.ids) + "\n").collect() };
    write(&out_dir.join(VOCAB_FILE), &vocab.to_file_string())?;
    write(&out_dir.join(TRAIN_FILE), &lines(&train))?;
    write(&out_dir.join(VALID_FILE), &lines(&valid))?;
    info!(
        "{} lines, {} kept; vocabulary {} ({} words); {} train / {} validation",
        text.lines().count(),
        sentences.len(),
        vocab.len(),
        vocab.words().len(),
        train.len(),
        valid.len()
    );
    Ok(())
}

fn log_epoch(e: &sentgan_core::seq::EpochLog) {
    match e.kl {
        Some(kl) => info!("epoch {} loss {:.4} kl {:.4}", e.epoch, e.loss, kl),
        None => info!("epoch {} loss {:.4}", e.epoch, e.loss),
    }
}

fn report_validation(loss: Result<f64, sentgan_core::error::Error>, valid: &[TokenizedSentence]) -> Result<()> {
    if !valid.is_empty() {
        info!("validation loss {:.4} over {} sentences", loss?, valid.len());
    }
    Ok(())
}

fn train_ae(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let d = load_prepared(cfg, data)?;
    let mut ae = Autoencoder::<f32>::new(cfg.ae_dims(d.vocab.len()), cfg.dropout, cfg.seed);
    let train_log = ae.train_with(&d.train, &cfg.ae_train(), log_epoch)?;
    report_validation(ae.eval_loss(&d.valid, cfg.ae_batch), &d.valid)?;
    if let Some(p) = log {
        write(p, &train_log.to_csv())?;
    }
    save_model(&ae, cfg, out)
}

fn train_nlm(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let d = load_prepared(cfg, data)?;
    let mut nlm = Nlm::<f32>::new(cfg.nlm_dims(d.vocab.len()), cfg.seed);
    let train_log = nlm.train_with(&d.train, &cfg.nlm_train(), log_epoch)?;
    report_validation(nlm.eval_loss(&d.valid, cfg.nlm_batch), &d.valid)?;
    if let Some(p) = log {
        write(p, &train_log.to_csv())?;
    }
    save_model(&nlm, cfg, out)
}

fn train_vae(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let d = load_prepared(cfg, data)?;
    let mut vae = Vae::<f32>::new(cfg.vae_dims(d.vocab.len()), cfg.seed);
    let train_log = vae.train_with(&d.train, &cfg.vae_train(), log_epoch)?;
    report_validation(vae.eval_loss(&d.valid, cfg.vae_batch), &d.valid)?;
    if let Some(p) = log {
        write(p, &train_log.to_csv())?;
    }
    save_model(&vae, cfg, out)
}

/// Sentence vectors `[n, latent]` of `sentences` under the autoencoder.
fn encode_matrix(ae: &Autoencoder<f32>, sentences: &[TokenizedSentence], batch: usize) -> Result<Tensor<f32>> {
    let rows = ae.encode_all(sentences, batch)?;
    let data: Vec<f32> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Ok(Tensor::matrix(rows.len(), ae.latent_dim(), data)?)
}

fn train_gan(
    cfg: &RunConfig,
    data: &Path,
    ae_path: &Path,
    out_generator: &Path,
    out_critic: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let d = load_prepared(cfg, data)?;
    let ae: Autoencoder<f32> = load_model(cfg, ae_path)?;
    if ae.latent_dim() != cfg.latent_dim {
        bail!("autoencoder latent size {} does not match latent_dim = {}", ae.latent_dim(), cfg.latent_dim);
    }
    let latents = encode_matrix(&ae, &d.train, cfg.ae_batch)?;
    let mut init = rng(cfg);
    let mut gen = ResNet::<f32>::with_rng(cfg.generator_dims(), &mut init);
    let mut critic = ResNet::<f32>::with_rng(cfg.critic_dims(), &mut init);
    let gan_cfg = cfg.gan_train();
    info!(
        "{} sentence vectors, {} generator steps",
        latents.rows(),
        gan_cfg.total_generator_steps(latents.rows())
    );
    let gan_log = gan::train_gan(&mut gen, &mut critic, &latents, &gan_cfg, |e| {
        if e.iteration % 100 == 0 {
            info!(
                "iteration {} critic {:.4} wasserstein {:.4} penalty {:.4}",
                e.iteration, e.critic_loss, e.wasserstein, e.penalty
            );
        }
    })?;
    if let Some(p) = log {
        write(p, &gan_log.to_csv())?;
    }
    save_model(&Generator(gen), cfg, out_generator)?;
    if let Some(p) = out_critic {
        save_model(&Critic(critic), cfg, p)?;
    }
    Ok(())
}

fn sample(cfg: &RunConfig, model: &Path, ae: Option<&Path>, vocab: &Path, out: &Path, count: usize) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let mut rng = rng(cfg);
    let kind = Checkpoint::load(model).with_context(|| format!("cannot load {}", model.display()))?.kind;
    let sentences = match kind {
        ModelKind::Generator => {
            let ae_path = ae.ok_or_else(|| anyhow!("sampling from a generator needs --ae"))?;
            let ae: Autoencoder<f32> = load_model(cfg, ae_path)?;
            let Generator(gen) = load_model(cfg, model)?;
            generation::sample_sentences(&gen, &ae, count, cfg.max_len, &mut rng)?
        }
        ModelKind::Nlm => load_model::<Nlm<f32>>(cfg, model)?.sample(count, cfg.max_len, &mut rng)?,
        ModelKind::Vae => load_model::<Vae<f32>>(cfg, model)?.sample(count, cfg.max_len, &mut rng)?,
        other => bail!("{} holds a {other:?} model, which cannot be sampled", model.display()),
    };
    check_vocab(&vocab, &sentences)?;
    write(out, &generation::format_sentences(&vocab, &sentences))?;
    let done = sentences.iter().filter(|d| d.terminated).count();
    info!("wrote {} sentences ({} terminated) to {}", sentences.len(), done, out.display());
    Ok(())
}

fn check_vocab(vocab: &Vocabulary, sentences: &[Decoded]) -> Result<()> {
    if sentences.iter().flat_map(|d| &d.ids).any(|&id| !vocab.is_word(id)) {
        bail!("model emits ids outside the given vocabulary ({} entries)", vocab.len());
    }
    Ok(())
}

fn interpolate(cfg: &RunConfig, generator: &Path, ae: &Path, vocab: &Path, out: &Path, steps: usize) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let ae: Autoencoder<f32> = load_model(cfg, ae)?;
    let Generator(gen) = load_model(cfg, generator)?;
    let mut rng = rng(cfg);
    let z: Tensor<f32> = standard_normal(&[2, gen.dims.in_dim], &mut rng);
    let v1 = Tensor::vector(z.row(0).to_vec());
    let v2 = Tensor::vector(z.row(1).to_vec());
    let sentences = generation::interpolate_sentences(&gen, &ae, &v1, &v2, steps, cfg.max_len)?;
    check_vocab(&vocab, &sentences)?;
    write(out, &generation::format_interpolation(&vocab, &sentences))
}

fn token_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| corpus::tokens(l).collect()).collect()
}

fn eval_bleu(cfg: &RunConfig, candidates: &Path, references: &Path) -> Result<()> {
    let cands = token_lines(&read(candidates)?);
    let refs: Vec<Vec<String>> = token_lines(&read(references)?).into_iter().filter(|r| !r.is_empty()).collect();
    let scorer = BleuScorer::new(&refs, cfg.bleu())?;
    let score = scorer.corpus_lenient(&cands)?;
    let empty = cands.iter().filter(|c| c.is_empty()).count();
    if empty > 0 {
        warn!("{empty} empty candidate lines scored 0");
    }
    println!("{score:.6}");
    Ok(())
}

fn split_named(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| anyhow!("expected name=value, got `{s}`"))
}

fn nonempty_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn make_pairs(
    cfg: &RunConfig,
    real: &Path,
    models: &[String],
    per_model: usize,
    rater_out: &Path,
    key_out: &Path,
) -> Result<()> {
    let real = nonempty_lines(real)?;
    let models = models
        .iter()
        .map(|m| {
            let (name, path) = split_named(m)?;
            Ok((name.to_string(), nonempty_lines(&PathBuf::from(path))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = eval::assemble_pairs(&real, &models, per_model, &mut rng(cfg))?;
    write(rater_out, &eval::rater_csv(&pairs)?)?;
    write(key_out, &eval::key_csv(&pairs)?)?;
    info!("wrote {} pairs", pairs.len());
    Ok(())
}

fn tally_pairs(key: &Path, verdicts: &Path, bleu: &[String], out: &Path) -> Result<()> {
    let key = eval::parse_key(&read(key)?)?;
    let verdicts = eval::parse_verdicts(&read(verdicts)?)?;
    let mut scores = HashMap::new();
    for b in bleu {
        let (name, v) = split_named(b)?;
        scores.insert(name.to_string(), v.parse::<f64>().with_context(|| format!("bad BLEU value `{v}`"))?);
    }
    let rows = eval::tally(&key, &verdicts)?;
    let csv = eval::tally_csv(&rows, &scores)?;
    write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn project(
    cfg: &RunConfig,
    data: &Path,
    ae: &Path,
    generator: &Path,
    out: &Path,
    svg: Option<&Path>,
    count: usize,
    noise: bool,
) -> Result<()> {
    let d = load_prepared(cfg, data)?;
    let ae: Autoencoder<f32> = load_model(cfg, ae)?;
    let Generator(gen) = load_model(cfg, generator)?;
    let mut rng = rng(cfg);
    let real_n = count.min(d.train.len());
    let real = encode_matrix(&ae, &d.train[..real_n], cfg.ae_batch)?;
    let other: Tensor<f32> = if noise {
        standard_normal(&[count, ae.latent_dim()], &mut rng)
    } else {
        gen.apply(&standard_normal(&[count, gen.dims.in_dim], &mut rng))?
    };
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
    };
    let mut points = rows(&real);
    points.extend(rows(&other));
    let mut labels = vec![Label::Real; real.rows()];
    labels.extend(vec![Label::Generated; other.rows()]);
    let emb = projection::tsne(&points, &labels, &cfg.projection())?;
    let overlap = projection::overlap_score(&emb.points, &emb.labels, OVERLAP_K)?;
    write(out, &projection::to_csv(&emb))?;
    if let Some(p) = svg {
        write(p, &projection::to_svg(&emb))?;
    }
    println!("overlap {overlap:.6}");
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<ExitCode> {
    let gc = GradCheckConfig { seed: cfg.seed, ..GradCheckConfig::default() };
    let mut reports = gradcheck::check_primitives(&gc)?;
    reports.extend(gradcheck::check_composites(&gc)?);
    reports.push(gradcheck::check_penalty(&gc, 1e-3)?);
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{} {:<28} cases {:>4} max rel err {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance
        );
    }
    let closed = gradcheck::linear_penalty_closed_form(100, cfg.seed)?;
    let closed_ok = closed < 1e-10;
    ok &= closed_ok;
    println!("{} linear penalty closed form  max abs err {closed:.3e} (tol 1e-10)", if closed_ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
