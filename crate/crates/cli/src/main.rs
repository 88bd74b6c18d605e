//! `protoparts`: data preparation, synthetic corpora, training, evaluation
//! and attention reports for part-aware prototypical graph networks.

mod commands;
mod config;
mod error;
mod svg;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protoparts::fusion::FusionStrategy;
use protoparts::model::ModelConfig;
use serde_json::json;

use commands::{DatasetKind, EvalMode};
use config::{ProtocolKind, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "protoparts", version, about)]
struct Cli {
    /// JSON run configuration (lowest-precedence layer).
    #[arg(long, global = true, env = "PROTOPARTS_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "PROTOPARTS_SEED")]
    seed: Option<u64>,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, env = "PROTOPARTS_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "PROTOPARTS_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert raw NTU or NW-UCLA files into the canonical format.
    PrepareData {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long)]
        target_frames: Option<usize>,
        /// Keep absolute coordinates instead of centering on frame 0.
        #[arg(long)]
        no_center: bool,
    },
    /// Generate a synthetic dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Episodic meta-training.
    Train(TrainArgs),
    /// One-shot or episodic evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, value_enum, default_value = "one-shot")]
        mode: EvalMode,
        /// Episode width for `--mode episodic` (default: min(5, eval classes)).
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Print the part-graph partition of a topology.
    DumpPartitions {
        #[arg(long, default_value = "ntu25")]
        topology: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Per-sample part attention with the top-3 parts.
    AttentionReport {
        #[command(flatten)]
        source: SourceArgs,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
        /// File with one sample id per line.
        #[arg(long)]
        sample_list: Option<PathBuf>,
        /// Also write one SVG bar chart per sample.
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Debug, Args)]
struct SourceArgs {
    #[arg(long, env = "PROTOPARTS_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "PROTOPARTS_DATA")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    #[arg(long, value_enum, env = "PROTOPARTS_PROTOCOL")]
    protocol: Option<ProtocolKind>,
    /// NTU-120 training classes: 20, 40, 60, 80 or 100.
    #[arg(long)]
    train_classes: Option<usize>,
    /// Number of held-out classes for `--protocol holdout`.
    #[arg(long)]
    holdout: Option<usize>,
    /// Exemplar map: lines of `<class_id> <sample_id>`.
    #[arg(long)]
    exemplars: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size encoder.
    Full,
    /// Small encoder for CPU experiments.
    Toy,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, env = "PROTOPARTS_DATA")]
    data: Option<PathBuf>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, env = "PROTOPARTS_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "PROTOPARTS_EPISODES_PER_EPOCH")]
    episodes_per_epoch: Option<usize>,
    #[arg(long, env = "PROTOPARTS_LR")]
    lr: Option<f64>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Number of part graphs.
    #[arg(long)]
    k: Option<usize>,
    /// Plain concatenation instead of part attention.
    #[arg(long, conflicts_with = "strategy")]
    no_attention: bool,
    /// mlp_attention, self_attention_pool or no_attention.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<FusionStrategy>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Record per-epoch wall time (logs then differ between runs).
    #[arg(long)]
    wall_time: bool,
}

fn parse_strategy(s: &str) -> Result<FusionStrategy, String> {
    serde_json::from_value(json!(s.replace('-', "_")))
        .map_err(|_| format!("unknown strategy {s:?}"))
}

impl ProtocolArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(k) = self.protocol {
            cfg.protocol.kind = k;
        }
        if let Some(n) = self.train_classes {
            cfg.protocol.training_class_count = n;
        }
        if let Some(n) = self.holdout {
            cfg.protocol.holdout_classes = n;
        }
        if let Some(p) = &self.exemplars {
            cfg.paths.exemplar_map = Some(p.clone());
        }
    }
}

impl SourceArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.checkpoint {
            cfg.paths.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.data {
            cfg.paths.data_dir = Some(p.clone());
        }
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.data {
            cfg.paths.data_dir = Some(p.clone());
        }
        self.protocol.apply(cfg);
        match self.preset {
            Some(Preset::Full) => cfg.model = ModelConfig::default(),
            Some(Preset::Toy) => cfg.model = ModelConfig::toy(),
            None => {}
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.episodes_per_epoch {
            t.episodes_per_epoch = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.ways {
            t.ways = v;
        }
        if let Some(v) = self.queries {
            t.queries_per_episode = Some(v);
        }
        if let Some(v) = self.checkpoint_every {
            t.checkpoint_every = Some(v);
        }
        if self.wall_time {
            t.record_wall_time = true;
        }
        if let Some(k) = self.k {
            cfg.model.parts = k;
        }
        if self.no_attention {
            cfg.model.fusion.strategy = FusionStrategy::NoAttention;
        }
        if let Some(s) = self.strategy {
            cfg.model.fusion.strategy = s;
        }
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROTOPARTS_LOG", "warn"))
        .format(|buf, record| {
            let line = json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn print_json<T: serde::Serialize>(value: &T) {
    print!("{}", commands::pretty(value));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    let config_given = cli.config.is_some();
    let out_required = || {
        cfg.paths
            .out_dir
            .clone()
            .ok_or_else(|| CliError::user("--out is required"))
    };
    match cli.command {
        Command::PrepareData {
            raw,
            kind,
            target_frames,
            no_center,
        } => {
            let out = out_required()?;
            if let Some(t) = target_frames {
                cfg.preprocess.target_frames = t;
            }
            if no_center {
                cfg.preprocess.center = false;
            }
            cfg.finish();
            cfg.validate()?;
            print_json(&commands::prepare_data(&cfg, &raw, kind, &out)?);
        }
        Command::Synth { spec } => {
            let out = out_required()?;
            print_json(&commands::synth(&spec, cfg.seed, &out)?);
        }
        Command::Train(args) => {
            args.apply(&mut cfg);
            cfg.finish();
            cfg.validate()?;
            print_json(&commands::train_cmd(&cfg)?);
        }
        Command::Eval {
            source,
            protocol,
            mode,
            ways,
            episodes,
        } => {
            source.apply(&mut cfg);
            protocol.apply(&mut cfg);
            cfg.finish();
            print_json(&commands::eval_cmd(&cfg, config_given, mode, ways, episodes)?);
        }
        Command::DumpPartitions { topology, k } => {
            let dump = commands::dump_partitions(&topology, k)?;
            if let Some(out) = &cfg.paths.out_dir {
                std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
                let path = out.join("partitions.json");
                std::fs::write(&path, commands::pretty(&dump)).map_err(|e| CliError::io(&path, e))?;
            }
            print_json(&dump);
        }
        Command::AttentionReport {
            source,
            mut samples,
            sample_list,
            plot,
        } => {
            source.apply(&mut cfg);
            if let Some(p) = sample_list {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                samples.extend(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(String::from),
                );
            }
            cfg.finish();
            print_json(&commands::attention_report(&cfg, config_given, &samples, plot)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"level": "ERROR", "target": "protoparts", "message": e.message, "exit_code": e.code()}));
            ExitCode::from(e.code())
        }
    }
}
