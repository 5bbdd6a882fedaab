use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sentgan_core::config::Profile;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sentgan", version, about = "Sentence generation with a GAN in autoencoder latent space")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base values before the config file and `--set` are applied.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// Override one config key, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the vocabulary and the train/validation split from a raw corpus.
    PrepCorpus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the sentence autoencoder.
    TrainAe {
        /// Directory written by prep-corpus.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train generator and critic on sentence vectors from a frozen autoencoder.
    TrainGan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out_generator: PathBuf,
        #[arg(long)]
        out_critic: Option<PathBuf>,
        /// Per-iteration critic CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the LSTM language model baseline.
    TrainNlm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the variational autoencoder baseline.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write sampled sentences, one per line.
    Sample {
        /// Generator, language model or VAE checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Autoencoder checkpoint; required with a generator.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `sample_count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Decode a straight line between two random generator inputs.
    Interpolate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `interp_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Corpus BLEU of candidate sentences against a reference pool.
    EvalBleu {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Assemble blind real/generated pairs for raters.
    MakePairs {
        /// Real sentences, one per line.
        #[arg(long)]
        real: PathBuf,
        /// `name=path` of a model's samples. Repeatable.
        #[arg(long = "model", value_name = "NAME=PATH", required = true)]
        models: Vec<String>,
        #[arg(long, default_value_t = 333)]
        per_model: usize,
        #[arg(long)]
        rater_out: PathBuf,
        #[arg(long)]
        key_out: PathBuf,
    },
    /// Join rater verdicts with the key and report per-model percentages.
    TallyPairs {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        /// `name=score` BLEU column entries. Repeatable.
        #[arg(long = "bleu", value_name = "NAME=SCORE")]
        bleu: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// t-SNE of real sentence vectors against generator outputs.
    Project {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Points per class.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Project N(0, I) vectors instead of generator outputs.
        #[arg(long)]
        noise: bool,
    },
    /// Finite-difference gradient checks; exits 0 only if all pass.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
