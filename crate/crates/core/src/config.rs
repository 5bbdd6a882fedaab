//! Flat `key = value` run configuration covering every tunable in the
//! pipeline, with a full-size and a desk-size profile.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{BleuConfig, Smoothing};
use crate::gan::{GanTrainConfig, ResNetDims};
use crate::projection::ProjectionConfig;
use crate::seq::{AeDims, NlmDims, TrainConfig, VaeDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        })
    }
}

/// Values that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, f64, Profile);

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

impl ConfigValue for Smoothing {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Smoothing::None),
            "epsilon" => Some(Smoothing::Epsilon),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Smoothing::None => "none".into(),
            Smoothing::Epsilon => "epsilon".into(),
        }
    }
}

macro_rules! run_config {
    ($($(#[$doc:meta])* $name:ident: $ty:ty = $paper:expr, $desk:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl RunConfig {
            pub fn paper() -> Self {
                Self { $($name: $paper,)* }
            }

            pub fn desk() -> Self {
                Self { $($name: $desk,)* }
            }

            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("bad value `{value}` for `{key}`"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.render())),*]
            }
        }
    };
}

run_config! {
    profile: Profile = Profile::Paper, Profile::Desk;
    seed: u64 = 0, 0;

    min_count: usize = 5, 2;
    max_len: usize = 20, 20;
    validation_size: usize = 10_000, 200;

    embed_dim: usize = 200, 64;
    /// Encoder width, which is the sentence-vector size.
    latent_dim: usize = 100, 64;
    decoder_dim: usize = 600, 128;
    dropout: f64 = 0.5, 0.5;
    ae_lr: f64 = 5e-4, 2e-3;
    ae_epochs: usize = 5, 60;
    ae_batch: usize = 64, 64;

    gan_depth: usize = 40, 10;
    gan_width: usize = 100, 64;
    z_dim: usize = 100, 64;
    critic_steps: usize = 10, 10;
    penalty: f64 = 10.0, 10.0;
    gan_lr_gen: f64 = 1e-4, 1e-4;
    gan_lr_critic: f64 = 1e-4, 1e-4;
    gan_epochs: usize = 15, 15;
    gan_batch: usize = 64, 64;
    /// Overrides the epoch-derived number of generator updates.
    gan_generator_steps: Option<usize> = None, Some(2000);

    nlm_embed_dim: usize = 200, 64;
    nlm_hidden_dim: usize = 600, 128;
    nlm_lr: f64 = 1e-3, 1e-3;
    nlm_epochs: usize = 5, 5;
    nlm_batch: usize = 64, 64;

    vae_embed_dim: usize = 200, 64;
    vae_encoder_dim: usize = 600, 128;
    vae_latent_dim: usize = 100, 64;
    vae_decoder_dim: usize = 600, 128;
    vae_lr: f64 = 5e-4, 5e-4;
    vae_epochs: usize = 5, 5;
    vae_batch: usize = 64, 64;

    sample_count: usize = 1000, 1000;
    interp_steps: usize = 8, 8;

    bleu_smoothing: Smoothing = Smoothing::None, Smoothing::None;

    tsne_perplexity: f64 = 30.0, 30.0;
    tsne_iterations: usize = 1000, 1000;
    tsne_lr: f64 = 200.0, 200.0;
    tsne_max_points: usize = 5000, 5000;
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses a full file: the `profile` key, if present, selects the base
    /// values before the rest are applied.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = Self::paper();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "profile" {
                    base = Self::for_profile(v.trim().parse()?);
                }
            }
        }
        base.apply_text(text)?;
        Ok(base)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("decoder_dim", self.decoder_dim),
            ("ae_batch", self.ae_batch),
            ("gan_width", self.gan_width),
            ("z_dim", self.z_dim),
            ("critic_steps", self.critic_steps),
            ("gan_batch", self.gan_batch),
            ("nlm_batch", self.nlm_batch),
            ("vae_batch", self.vae_batch),
            ("interp_steps", self.interp_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("`dropout` must be in [0, 1)".into()));
        }
        if self.penalty < 0.0 {
            return Err(Error::Config("`penalty` must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn ae_dims(&self, vocab_size: usize) -> AeDims {
        AeDims { vocab_size, embed_dim: self.embed_dim, latent_dim: self.latent_dim, decoder_dim: self.decoder_dim }
    }

    pub fn ae_train(&self) -> TrainConfig {
        TrainConfig { lr: self.ae_lr, epochs: self.ae_epochs, batch_size: self.ae_batch, seed: self.seed }
    }

    pub fn generator_dims(&self) -> ResNetDims {
        ResNetDims::generator(self.z_dim, self.gan_width, self.gan_depth, self.latent_dim)
    }

    pub fn critic_dims(&self) -> ResNetDims {
        ResNetDims::critic(self.latent_dim, self.gan_width, self.gan_depth)
    }

    pub fn gan_train(&self) -> GanTrainConfig {
        GanTrainConfig {
            critic_steps: self.critic_steps,
            penalty: self.penalty,
            lr_gen: self.gan_lr_gen,
            lr_critic: self.gan_lr_critic,
            epochs: self.gan_epochs,
            batch_size: self.gan_batch,
            z_dim: self.z_dim,
            seed: self.seed,
            generator_steps: self.gan_generator_steps,
            ..GanTrainConfig::default()
        }
    }

    pub fn nlm_dims(&self, vocab_size: usize) -> NlmDims {
        NlmDims { vocab_size, embed_dim: self.nlm_embed_dim, hidden_dim: self.nlm_hidden_dim }
    }

    pub fn nlm_train(&self) -> TrainConfig {
        TrainConfig { lr: self.nlm_lr, epochs: self.nlm_epochs, batch_size: self.nlm_batch, seed: self.seed }
    }

    pub fn vae_dims(&self, vocab_size: usize) -> VaeDims {
        VaeDims {
            vocab_size,
            embed_dim: self.vae_embed_dim,
            encoder_dim: self.vae_encoder_dim,
            latent_dim: self.vae_latent_dim,
            decoder_dim: self.vae_decoder_dim,
        }
    }

    pub fn vae_train(&self) -> TrainConfig {
        TrainConfig { lr: self.vae_lr, epochs: self.vae_epochs, batch_size: self.vae_batch, seed: self.seed }
    }

    pub fn bleu(&self) -> BleuConfig {
        BleuConfig { smoothing: self.bleu_smoothing, ..BleuConfig::default() }
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            learning_rate: self.tsne_lr,
            max_points: self.tsne_max_points,
            seed: self.seed,
            ..ProjectionConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper();
        assert_eq!((c.ae_lr, c.ae_epochs), (5e-4, 5));
        assert_eq!((c.critic_steps, c.gan_epochs, c.gan_lr_gen, c.gan_lr_critic), (10, 15, 1e-4, 1e-4));
        assert_eq!((c.gan_depth, c.gan_width, c.latent_dim), (40, 100, 100));
        assert_eq!((c.embed_dim, c.decoder_dim, c.nlm_lr), (200, 600, 1e-3));
        assert_eq!((c.min_count, c.max_len, c.validation_size), (5, 20, 10_000));
    }

    #[test]
    fn desk_profile() {
        let c = RunConfig::desk();
        assert_eq!((c.gan_depth, c.gan_width, c.z_dim), (10, 64, 64));
        assert_eq!((c.embed_dim, c.latent_dim, c.decoder_dim), (64, 64, 128));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.seed = 42;
        c.gan_generator_steps = Some(300);
        c.ae_lr = 0.1 + 0.2;
        c.bleu_smoothing = Smoothing::Epsilon;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::KEYS.len(), c.entries().len());
    }

    #[test]
    fn profile_key_selects_base() {
        let c = RunConfig::parse("# comment\nprofile = desk\nseed=3\n").unwrap();
        assert_eq!(c.gan_depth, 10);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        assert!(RunConfig::parse("learning_rate = 1").is_err());
        assert!(RunConfig::parse("ae_epochs = many").is_err());
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("profile = huge").is_err());
        let mut c = RunConfig::paper();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
