//! `sigspp`: stage-by-stage driver for the signature verification pipeline.
//!
//! Every stage works on one run directory (`--out`, or `SIGSPP_OUT`). The
//! `preprocess` and `run` stages create it from a configuration; later
//! stages reopen it from its `config.toml` and refuse artifacts written
//! under a different configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sigspp::experiment::{run_experiment, with_threads, DataSource, ExperimentConfig, Run};
use sigspp::synth::{generate_synthetic_dataset, SynthConfig};
use sigspp::trainer::Protocol;
use sigspp::wd::NegativePolicy;
use sigspp::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "sigspp", version, about = "Offline signature verification with multi-size CNN features")]
struct Cli {
    /// Run directory.
    #[arg(long, short, global = true, env = "SIGSPP_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SIGSPP_THREADS")]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNGs plus manifest.jsonl) to a directory.
    Synth(SynthArgs),
    /// Create the run directory, clean the images and compute the canvases.
    Preprocess(ConfigArgs),
    /// Train the network on the development writers.
    Train {
        /// Continue from model.bin and optimizer.bin up to the configured epochs.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt a trained run's network to the development writers of a new run.
    Finetune {
        /// Run directory holding the source network.
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Extract features of the exploitation (and negative) images.
    Extract,
    /// Train the writer-dependent classifiers.
    TrainWd,
    /// Score the held-out exploitation signatures.
    Evaluate,
    /// Compute and print the metrics.
    Report {
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// All stages in one go.
    Run(ConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    dev_writers: usize,
    #[arg(long, default_value_t = 10)]
    exploit_writers: usize,
    #[arg(long, default_value_t = 8)]
    genuine: usize,
    #[arg(long, default_value_t = 8)]
    forgeries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Multi,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Architecture name, e.g. SigNet-SPP-desk or SigNet-desk.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    forgery_head: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reference signatures per exploitation writer.
    #[arg(long)]
    reference: Option<usize>,
    /// Negative pool: `dev:N` or `peer:N` signatures per writer.
    #[arg(long, value_parser = parse_negatives)]
    negatives: Option<NegativePolicy>,
    /// Dataset manifest; replaces the synthetic source.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Synthetic source: development writers.
    #[arg(long)]
    dev_writers: Option<usize>,
    /// Synthetic source: exploitation writers.
    #[arg(long)]
    exploit_writers: Option<usize>,
    /// Synthetic source: genuine signatures per writer.
    #[arg(long)]
    genuine: Option<usize>,
    /// Synthetic source: forgeries per writer.
    #[arg(long)]
    forgeries: Option<usize>,
    /// Synthetic source: generator seed.
    #[arg(long)]
    synth_seed: Option<u64>,
}

fn parse_negatives(s: &str) -> Result<NegativePolicy, String> {
    let (kind, n) = s.split_once(':').ok_or("expected dev:N or peer:N")?;
    let per_writer = n.parse().map_err(|e| format!("{n}: {e}"))?;
    match kind {
        "dev" => Ok(NegativePolicy::Dev { per_writer }),
        "peer" => Ok(NegativePolicy::Peer { per_writer }),
        _ => Err(format!("unknown negative pool {kind:?}")),
    }
}

impl ConfigArgs {
    fn build(&self, out: &Path, threads: Option<usize>) -> sigspp::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.desk) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, true) => ExperimentConfig::desk(),
            (None, false) => ExperimentConfig::default(),
        };
        cfg.output = out.to_path_buf();
        cfg.threads = threads.or(cfg.threads);
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(p) = self.protocol {
            cfg.protocol = match p {
                ProtocolArg::Fixed => Protocol::Fixed,
                ProtocolArg::Multi => Protocol::Multi,
            };
        }
        if let Some(a) = &self.arch {
            cfg.architecture.name = a.clone();
        }
        cfg.architecture.forgery_head |= self.forgery_head;
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.reference {
            cfg.wd.reference = v;
        }
        if let Some(v) = &self.negatives {
            cfg.wd.negatives = *v;
        }
        if let Some(p) = &self.manifest {
            cfg.data = DataSource::Manifest { path: p.clone() };
        }
        let synth_flags = [self.dev_writers, self.exploit_writers, self.genuine, self.forgeries];
        if synth_flags.iter().any(Option::is_some) || self.synth_seed.is_some() {
            let DataSource::Synthetic(s) = &mut cfg.data else {
                return Err(Error::Config("synthetic dataset flags given with a manifest source".into()));
            };
            let fields = [&mut s.dev_writers, &mut s.exploit_writers, &mut s.genuine, &mut s.forgeries];
            for (field, flag) in fields.into_iter().zip(synth_flags) {
                if let Some(v) = flag {
                    *field = v;
                }
            }
            if let Some(v) = self.synth_seed {
                s.seed = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

fn dispatch(cli: &Cli) -> sigspp::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(args) => {
            let cfg = args.build(&cli.out, cli.threads)?;
            let outcome = run_experiment(&cfg)?;
            for w in &outcome.summary.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", outcome.report.table());
            Ok(())
        }
        Command::Preprocess(args) => {
            let cfg = args.build(&cli.out, cli.threads)?;
            let run = Run::create(cfg)?;
            staged(&run, cli.threads, |run| {
                let prepared = run.prepare()?;
                let manifest = run.write_preprocessed(&prepared)?;
                let set = run.canvas(&prepared)?;
                for w in &set.warnings {
                    eprintln!("warning: {w}");
                }
                println!("{} images -> {}", prepared.images.len(), manifest.display());
                println!("canvases {:?}", set.canvases);
                Ok(())
            })
        }
        Command::Finetune { source, config } => {
            let source = Run::open(source)?;
            let cfg = config.build(&cli.out, cli.threads)?;
            let run = Run::create(cfg)?;
            staged(&run, cli.threads, |run| {
                let prepared = run.prepare()?;
                let set = run.canvas(&prepared)?;
                let trained = run.finetune(&source, &prepared, &set)?;
                print_training(&trained);
                Ok(())
            })
        }
        command => {
            let run = Run::open(&cli.out)?;
            staged(&run, cli.threads, |run| stage(run, command))
        }
    }
}

/// Runs `f` on the configured pool and records a failure in the run directory.
fn staged(run: &Run, threads: Option<usize>, f: impl FnOnce(&Run) -> sigspp::Result<()> + Send) -> sigspp::Result<()> {
    let result = with_threads(threads.or(run.config.threads), || f(run)).and_then(|r| r);
    if let Err(e) = &result {
        run.record_error(e);
    }
    result
}

fn stage(run: &Run, command: &Command) -> sigspp::Result<()> {
    match command {
        Command::Train { resume } => {
            let prepared = run.prepare()?;
            let set = run.load_canvas()?;
            let trained = if *resume { run.resume(&prepared, &set)? } else { run.train(&prepared, &set)? };
            print_training(&trained);
        }
        Command::Extract => {
            let (model, _) = run.load_model()?;
            let prepared = run.prepare()?;
            let set = run.load_canvas()?;
            let f = run.extract(&model, &prepared, &set)?;
            println!("{} exploitation feature rows of dimension {}", f.exploit.len(), f.exploit.dim);
        }
        Command::TrainWd => {
            let bundle = run.train_wd(&run.load_features()?)?;
            println!("{} writer classifiers", bundle.classifiers.len());
        }
        Command::Evaluate => {
            let scores = run.score(&run.load_features()?, &run.load_classifiers()?)?;
            println!("{} scores -> {}", scores.len(), run.path("scores.jsonl").display());
        }
        Command::Report { json } => {
            let report = run.report(&run.load_scores()?)?;
            if *json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Synth(_) | Command::Run(_) | Command::Preprocess(_) | Command::Finetune { .. } => unreachable!(),
    }
    Ok(())
}

fn print_training(t: &sigspp::experiment::Trained) {
    if let Some(last) = t.history.last() {
        println!("epoch {} loss {:.4}", last.epoch, last.loss);
    }
    println!("training accuracy {:.2}% over {} samples", 100.0 * t.eval.accuracy, t.eval.samples);
}

fn synth(a: &SynthArgs) -> sigspp::Result<()> {
    let cfg = SynthConfig {
        dev_writers: a.dev_writers,
        exploit_writers: a.exploit_writers,
        genuine: a.genuine,
        forgeries: a.forgeries,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic_dataset(&cfg)?;
    let manifest = data.write(&a.dir)?;
    println!("{} images -> {}", data.images.len(), manifest.display());
    Ok(())
}
