//! Small in-process run of the whole pipeline through checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentgan_core::checkpoint::{Checkpoint, Critic, Generator, ModelKind, Persist};
use sentgan_core::config::RunConfig;
use sentgan_core::corpus::{split, tokenize_corpus, Vocabulary};
use sentgan_core::gan::{train_gan, ResNet};
use sentgan_core::generation::{format_sentences, sample_sentences};
use sentgan_core::seq::Autoencoder;
use sentgan_core::tensor::Tensor;

fn corpus() -> Vec<String> {
    let subjects = ["the dog", "a cat", "my friend", "the old man"];
    let verbs = ["runs", "sleeps", "eats", "waits"];
    let places = ["here", "outside", "at home"];
    let mut out = Vec::new();
    for s in subjects {
        for v in verbs {
            for p in places {
                out.push(format!("{s} {v} {p} ."));
            }
        }
    }
    out
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.min_count = 1;
    c.validation_size = 8;
    c.embed_dim = 8;
    c.latent_dim = 8;
    c.decoder_dim = 16;
    c.ae_epochs = 3;
    c.gan_depth = 2;
    c.gan_width = 8;
    c.z_dim = 8;
    c.gan_batch = 8;
    c.gan_generator_steps = Some(5);
    c
}

#[test]
fn train_save_load_sample() {
    let cfg = tiny_config();
    let lines = corpus();
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), cfg.min_count).unwrap();
    let sents = tokenize_corpus(lines.iter().map(String::as_str), &vocab, cfg.max_len);
    let (train, valid) = split(&sents, cfg.validation_size, cfg.seed).unwrap();
    assert_eq!(train.len() + valid.len(), 48);

    let mut ae = Autoencoder::<f32>::new(cfg.ae_dims(vocab.len()), cfg.dropout, cfg.seed);
    let log = ae.train(&train, &cfg.ae_train()).unwrap();
    assert_eq!(log.epochs.len(), 3);

    let vecs = ae.encode_all(&train, 16).unwrap();
    let data = Tensor::matrix(vecs.len(), cfg.latent_dim, vecs.iter().flat_map(|v| v.data().to_vec()).collect()).unwrap();
    let mut gen = ResNet::<f32>::new(cfg.generator_dims(), 1);
    let mut critic = ResNet::<f32>::new(cfg.critic_dims(), 2);
    let gan_log = train_gan(&mut gen, &mut critic, &data, &cfg.gan_train(), |_| {}).unwrap();
    assert_eq!(gan_log.entries.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let (ae_path, gen_path, critic_path) = (dir.path().join("ae"), dir.path().join("gen"), dir.path().join("critic"));
    ae.save(&cfg, &ae_path).unwrap();
    let gen = Generator(gen);
    gen.save(&cfg, &gen_path).unwrap();
    Critic(critic).save(&cfg, &critic_path).unwrap();

    assert_eq!(Checkpoint::load(&critic_path).unwrap().kind, ModelKind::Critic);
    assert!(Generator::load(&critic_path).is_err());
    let (ae2, cfg2) = Autoencoder::<f32>::load(&ae_path).unwrap();
    let (Generator(gen2), _) = Generator::load(&gen_path).unwrap();
    assert_eq!(cfg2.to_text(), cfg.to_text());

    let a = sample_sentences(&gen.0, &ae, 20, cfg.max_len, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = sample_sentences(&gen2, &ae2, 20, cfg.max_len, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    let text = format_sentences(&vocab, &b);
    assert_eq!(text.lines().count(), 20);
    assert!(b.iter().all(|d| d.ids.len() <= cfg.max_len && d.ids.iter().all(|&i| vocab.is_word(i))));
}

#[test]
fn checkpoint_bytes_depend_only_on_inputs() {
    let cfg = tiny_config();
    let build = || {
        let ae = Autoencoder::<f32>::new(cfg.ae_dims(12), cfg.dropout, 9);
        ae.to_checkpoint(&cfg).to_bytes()
    };
    assert_eq!(build(), build());
}
