use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lipger::pipeline::{selftest, Outcome, Pipeline, PipelineConfig, Stage};
use lipger::train::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "lipger", version, about = "Lip-conditioned generative error correction pipeline")]
struct Cli {
    /// TOML pipeline config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Rerun stages and accept upstream artifacts from another config.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.grad_clip {
            t.grad_clip = v;
        }
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise utterances, corrupt the audio, and write crops.
    Simulate {
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Decode each utterance into an n-best hypothesis list.
    Decode {
        #[arg(long)]
        beam_width: Option<usize>,
        /// List size N+1.
        #[arg(long)]
        nbest: Option<usize>,
    },
    /// Assemble train/test records and the tokenizer.
    Build {
        /// Keep at most this many hypotheses per record.
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Train the base language model.
    PretrainLm(TrainArgs),
    /// Train adapters and the lip encoder on the frozen base model.
    Train(TrainArgs),
    /// Score the test split.
    Eval {
        /// Comma-separated subset of onebest,lm,ger,lipger.
        #[arg(long, value_delimiter = ',')]
        systems: Option<Vec<String>>,
    },
    /// Summarise the evaluation as markdown.
    Report,
    /// Every stage in order.
    Run,
    /// Oracle suites: beam search, WER and gradients.
    Selftest,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Simulate { utterances } => {
            if let Some(n) = utterances {
                cfg.toy.utterances = *n;
            }
        }
        Command::Decode { beam_width, nbest } => {
            if let Some(b) = beam_width {
                cfg.decode.beam_width = *b;
            }
            if let Some(n) = nbest {
                cfg.decode.n_plus_1 = *n;
            }
        }
        Command::Build { nbest, split_ratio } => {
            if nbest.is_some() {
                cfg.corpus.nbest = *nbest;
            }
            if let Some(r) = split_ratio {
                cfg.corpus.split_ratio = *r;
            }
        }
        Command::PretrainLm(a) => a.apply(&mut cfg.pretrain),
        Command::Train(a) => a.apply(&mut cfg.train),
        Command::Eval { systems } => {
            if let Some(s) = systems {
                cfg.eval.systems = s.clone();
            }
        }
        Command::Report | Command::Run | Command::Selftest | Command::ShowConfig => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = resolve(&cli)?;
    let stage = match cli.command {
        Command::Simulate { .. } => Stage::Simulate,
        Command::Decode { .. } => Stage::Decode,
        Command::Build { .. } => Stage::Build,
        Command::PretrainLm(_) => Stage::PretrainLm,
        Command::Train(_) => Stage::Train,
        Command::Eval { .. } => Stage::Eval,
        Command::Report => Stage::Report,
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(true);
        }
        Command::Selftest => {
            let mut ok = true;
            for r in selftest::run_all() {
                println!(
                    "{} {} ({:.1}s): {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
                ok &= r.passed;
            }
            return Ok(ok);
        }
        Command::Run => {
            let p = pipeline(cfg, &cli.root, cli.force)?;
            for s in Stage::ALL {
                announce(s, p.run(s)?);
            }
            return Ok(true);
        }
    };
    let p = pipeline(cfg, &cli.root, cli.force)?;
    announce(stage, p.run(stage)?);
    Ok(true)
}

fn pipeline(cfg: PipelineConfig, root: &std::path::Path, force: bool) -> Result<Pipeline> {
    Ok(Pipeline::new(cfg, root)?.force(force).on_progress(|m| eprintln!("{m}")))
}

fn announce(stage: Stage, outcome: Outcome) {
    match outcome {
        Outcome::Ran => println!("{}: done", stage.name()),
        Outcome::UpToDate => println!("{}: up to date, nothing to do", stage.name()),
    }
}

/// 1 usage/config, 2 data, 3 numeric.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<lipger::Error>()) {
        Some(lipger::Error::Numeric(_)) => 3,
        Some(lipger::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
