use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hscrf::data::{read_conll, ColumnConfig, Split};
use hscrf::synth::{self, SynthConfig};
use hscrf::train::{self, decode_conll, DecodeMode, GradcheckOptions, Model, TrainConfig};

#[derive(Parser)]
#[command(name = "hscrf", version, about = "Hybrid semi-Markov CRF named entity recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a gold CoNLL file.
    Eval(EvalArgs),
    /// Append predicted BIOES tags to a CoNLL file.
    Decode(DecodeArgs),
    /// Finite-difference check of every parameter block.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic train/dev/test corpus.
    Synth(SynthArgs),
}

/// Overrides for training configuration fields.
#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    gradient_clip: Option<String>,
    #[arg(long)]
    decay_rate: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// crf, hscrf, scrf-baseline or joint.
    #[arg(long)]
    variant: Option<String>,
    /// crf, hscrf or joint.
    #[arg(long)]
    decode_mode: Option<String>,
    #[arg(long)]
    max_segment_len: Option<String>,
    #[arg(long)]
    embedding_dim: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    #[arg(long)]
    use_recurrent_layer: Option<String>,
    #[arg(long)]
    dropout_rate: Option<String>,
    #[arg(long)]
    position_dim: Option<String>,
    #[arg(long)]
    init_scale: Option<String>,
    #[arg(long)]
    min_count: Option<String>,
    /// Chance of swapping a training singleton for the unknown word.
    #[arg(long)]
    unk_rate: Option<String>,
    /// Pretrained word vectors, one `word v1 ... vd` per line.
    #[arg(long)]
    embeddings: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        let flags = [
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("gradient_clip", &self.gradient_clip),
            ("decay_rate", &self.decay_rate),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("variant", &self.variant),
            ("decode_mode", &self.decode_mode),
            ("max_segment_len", &self.max_segment_len),
            ("embedding_dim", &self.embedding_dim),
            ("hidden_dim", &self.hidden_dim),
            ("use_recurrent_layer", &self.use_recurrent_layer),
            ("dropout_rate", &self.dropout_rate),
            ("position_dim", &self.position_dim),
            ("init_scale", &self.init_scale),
            ("min_count", &self.min_count),
            ("unk_rate", &self.unk_rate),
            ("embeddings", &self.embeddings),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON records go here instead of standard output.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the model's own mode.
    #[arg(long)]
    mode: Option<DecodeMode>,
    /// Print one JSON record per metric instead of a table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mode: Option<DecodeMode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Joint-decoding trace records, one JSON object per sentence.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    instance_seed: u64,
    #[arg(long)]
    zero_init: bool,
    /// Corrupt this block's analytic gradient (self-test of the checker).
    #[arg(long)]
    corrupt_block: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    dev: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
}

fn output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_corpus(path: &Path, split: Split, labels: Option<&hscrf::EntityLabelSet>) -> Result<hscrf::data::Corpus> {
    let config = ColumnConfig {
        labels: labels.cloned(),
        ..Default::default()
    };
    read_conll(path, split, &config).with_context(|| format!("reading {}", path.display()))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let train_set = load_corpus(&args.train, Split::Train, None)?;
    let dev = args
        .dev
        .as_deref()
        .map(|p| load_corpus(p, Split::Dev, Some(&train_set.labels)))
        .transpose()?;
    log::info!("{} training sentences, variant {}", train_set.len(), config.variant);
    let outcome = train::train(&config, &train_set, dev.as_ref())?;
    outcome.model.save(&args.out)?;
    log::info!("best epoch {}; checkpoint written to {}", outcome.best_epoch, args.out.display());
    let records: String = outcome.log.iter().map(|r| r.to_json() + "\n").collect();
    output(args.log.as_deref(), &records)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let mode = args.mode.unwrap_or_else(|| model.config.decode_mode());
    let gold = load_corpus(&args.data, Split::Test, Some(&model.labels))?;
    let report = model.evaluate(&gold, mode)?;
    let text = if args.json {
        report.to_records().join("\n") + "\n"
    } else {
        report.to_table()
    };
    output(args.out.as_deref(), &text)
}

fn run_decode(args: &DecodeArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let mode = args.mode.unwrap_or_else(|| model.config.decode_mode());
    let decoded = decode_conll(&model, &args.input, mode)?;
    output(args.out.as_deref(), &decoded.conll)?;
    if let Some(p) = &args.trace {
        if mode != DecodeMode::Joint {
            bail!("traces are only produced in joint mode");
        }
        let records: String = decoded
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| t.to_record(i + 1) + "\n")
            .collect();
        fs::write(p, records)?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let config = args.config.resolve()?;
    let options = GradcheckOptions {
        seed: args.instance_seed,
        zero_init: args.zero_init,
        corrupt_block: args.corrupt_block.clone(),
    };
    let reports = train::gradcheck(&config, &options)?;
    let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
    output(args.out.as_deref(), &text)?;
    Ok(reports.iter().all(|r| r.passed))
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        train: args.train,
        dev: args.dev,
        test: args.test,
        seed: args.seed,
        ..Default::default()
    };
    synth::write(&synth::generate(&config), &args.out)?;
    log::info!("wrote synthetic corpus to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Decode(a) => run_decode(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
