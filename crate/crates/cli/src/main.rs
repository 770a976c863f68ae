use std::fs::OpenOptions;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use permsplit::attack::{self, AttackConfig, Matching};
use permsplit::config::{RunConfig, TransportSection};
use permsplit::edgemodel::EdgeWeights;
use permsplit::error::{Error, Result};
use permsplit::proto::{run_cloud, CloudServer, LoopbackTransport, TcpTransport, Transport};
use permsplit::shuffle::{
    self, cloud_weights_for_mode, initial_models, EdgeTrainer, EpochMetrics, ShuffleMode, TrainConfig,
};
use permsplit::store;
use permsplit::{info, verify, ShuffleKey};

#[derive(Parser)]
#[command(name = "permsplit", version, about = "Split learning over shuffled Transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suite and print a JSON summary.
    Verify {
        /// Only run properties whose name contains this text (repeatable).
        #[arg(long)]
        only: Vec<String>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        grad_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_conjugation: bool,
    },
    /// Generate a shuffle key for the model in a config.
    Keygen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Conjugate cloud weights with a key's column permutation.
    Authorize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the inverse permutation (de-authorise).
        #[arg(long)]
        inverse: bool,
    },
    /// Write initial edge.bin and cloud.bin; the cloud file is conjugated in
    /// row_column_shuffle mode.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train in one process over the loopback transport.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Append per-step metrics here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Serve the cloud half over TCP.
    ServeCloud {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to transport.address.
        #[arg(long)]
        listen: Option<String>,
        /// Initial cloud weights; required in row_column_shuffle mode.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Stop after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
        /// Where to save the cloud weights after the last session.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the edge half against a remote cloud.
    RunEdge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Initial edge weights; defaults to the seeded initialisation.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Dump every frame sent to the cloud.
        #[arg(long)]
        capture: Option<PathBuf>,
    },
    /// Run a reconstruction attack and print a JSON report.
    Attack {
        /// Takes the image geometry, d, position embedding and seed from here.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AttackKind::Blackbox)]
        kind: AttackKind,
        #[arg(long, value_enum, default_value_t = ModeArg::RowColumnShuffle)]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Observations per sample.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, value_enum, default_value_t = MatchingArg::Naive)]
        matching: MatchingArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print multiply-accumulate counts and permutation space size.
    Info {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Blackbox,
    Whitebox,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    RowShuffle,
    RowColumnShuffle,
}

impl From<ModeArg> for ShuffleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => ShuffleMode::Vanilla,
            ModeArg::RowShuffle => ShuffleMode::RowShuffle,
            ModeArg::RowColumnShuffle => ShuffleMode::RowColumnShuffle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchingArg {
    Naive,
    GreedyRow,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Writes a line to stdout. A reader that has gone away is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// The key for a run: the given file, or one derived from the config seed.
fn resolve_key(cfg: &RunConfig, key: Option<&Path>) -> Result<ShuffleKey> {
    let key = match key {
        Some(p) => ShuffleKey::load(p)?,
        None => ShuffleKey::generate(cfg.p(), cfg.model.d, cfg.train.seed)?,
    };
    if key.p() != cfg.p() || key.d() != cfg.model.d {
        return Err(Error::config("key", format!("key is {}x{}, model is {}x{}", key.p(), key.d(), cfg.p(), cfg.model.d)));
    }
    Ok(key)
}

struct MetricsSink(Box<dyn Write>);

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Box::new(OpenOptions::new().create(true).append(true).open(p)?),
            None => Box::new(std::io::stdout()),
        }))
    }

    fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        self.0.write_all(m.to_json_lines().as_bytes())?;
        self.0.flush()?;
        Ok(())
    }
}

fn train_with<T: Transport>(
    tc: &TrainConfig,
    trainer: &mut EdgeTrainer<T>,
    train: &[permsplit::edgemodel::Sample],
    test: &[permsplit::edgemodel::Sample],
    sink: &mut MetricsSink,
) -> Result<()> {
    for _ in 0..tc.epochs {
        match trainer.train_epoch(train) {
            Ok(m) => {
                sink.write(&m)?;
                eprintln!("epoch {}: loss {:.6} accuracy {:.4}", m.epoch, m.mean_loss, m.accuracy);
            }
            Err(e) => {
                if let Some(partial) = trainer.partial_metrics() {
                    sink.write(partial)?;
                }
                return Err(e);
            }
        }
    }
    if !test.is_empty() {
        let r = trainer.evaluate(test)?;
        eprintln!("test accuracy {:.4}", r.accuracy);
    }
    Ok(())
}

fn save_edge(out_dir: Option<&Path>, edge: &EdgeWeights) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        store::save_edge(dir.join("edge.bin"), edge)?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Verify { only, trials, grad_trials, seed, corrupt_conjugation } => {
            let summary = verify::run(&verify::VerifyOptions {
                seed,
                trials,
                grad_trials,
                only: (!only.is_empty()).then_some(only),
                corrupt_conjugation,
            })?;
            emit(&serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
            for p in summary.properties.iter().filter(|p| !p.passed) {
                eprintln!("FAILED {}: max error {:e} exceeds {:e}", p.name, p.max_error, p.tolerance);
            }
            Ok(if summary.passed { 0 } else { 1 })
        }
        Command::Keygen { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let key = ShuffleKey::generate(cfg.p(), cfg.model.d, seed.unwrap_or(cfg.train.seed))?;
            key.save(&out)?;
            eprintln!("wrote {}x{} key to {}", key.p(), key.d(), out.display());
            Ok(0)
        }
        Command::Authorize { weights, key, out, inverse } => {
            let blocks = store::load_cloud(&weights)?;
            let key = ShuffleKey::load(&key)?;
            if key.d() != blocks[0].d() {
                return Err(Error::config("key", format!("key width {} does not match weights width {}", key.d(), blocks[0].d())));
            }
            let bc = permsplit::encoder::BlockConfig::default();
            let result = if inverse {
                shuffle::deauthorize(&blocks, &bc, &key)?
            } else {
                shuffle::authorize(&blocks, &bc, key.p_col())?
            };
            store::save_cloud(&out, &result)?;
            Ok(0)
        }
        Command::InitWeights { config, key, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let tc = cfg.train_config();
            let key = resolve_key(&cfg, key.as_deref())?;
            let (edge, plain) = initial_models(&tc)?;
            std::fs::create_dir_all(&out_dir)?;
            store::save_edge(out_dir.join("edge.bin"), &edge)?;
            store::save_cloud(out_dir.join("cloud.bin"), &cloud_weights_for_mode(&tc, &plain, &key)?)?;
            Ok(0)
        }
        Command::Train { config, key, metrics, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let tc = cfg.train_config();
            let key = resolve_key(&cfg, key.as_deref())?;
            let (train, test) = cfg.datasets(&config_dir(&config))?;
            let (edge, plain) = initial_models(&tc)?;
            let server = CloudServer::new(cloud_weights_for_mode(&tc, &plain, &key)?, tc.block_config(), tc.lr)?;
            let mut trainer = EdgeTrainer::connect(tc.clone(), edge, &key, LoopbackTransport::new(server))?;
            let mut sink = MetricsSink::open(metrics.as_deref())?;
            train_with(&tc, &mut trainer, &train, &test, &mut sink)?;
            let (edge, transport) = trainer.into_parts();
            save_edge(out_dir.as_deref(), &edge)?;
            if let Some(dir) = &out_dir {
                store::save_cloud(dir.join("cloud.bin"), transport.server().blocks())?;
            }
            Ok(0)
        }
        Command::ServeCloud { config, listen, weights, sessions, out } => {
            let cfg = RunConfig::load(&config)?;
            let tc = cfg.train_config();
            let blocks = match weights {
                Some(p) => store::load_cloud(p)?,
                None if tc.mode == ShuffleMode::RowColumnShuffle => {
                    return Err(Error::config(
                        "weights",
                        "row_column_shuffle needs conjugated weights from init-weights",
                    ))
                }
                None => initial_models(&tc)?.1,
            };
            let addr = match (listen, &cfg.transport) {
                (Some(a), _) => a,
                (None, TransportSection::Tcp { address }) => address.clone(),
                (None, TransportSection::Loopback) => {
                    return Err(Error::config("transport.address", "serve-cloud needs a tcp address or --listen"))
                }
            };
            let mut server = CloudServer::new(blocks, tc.block_config(), tc.lr)?;
            let listener = TcpListener::bind(&addr)?;
            eprintln!("cloud listening on {}", listener.local_addr()?);
            run_cloud(&listener, &mut server, sessions)?;
            if let Some(p) = out {
                store::save_cloud(p, server.blocks())?;
            }
            Ok(0)
        }
        Command::RunEdge { config, key, weights, metrics, out_dir, capture } => {
            let cfg = RunConfig::load(&config)?;
            let tc = cfg.train_config();
            let TransportSection::Tcp { address } = &cfg.transport else {
                return Err(Error::config("transport.kind", "run-edge needs a tcp transport"));
            };
            let key = resolve_key(&cfg, key.as_deref())?;
            let (train, test) = cfg.datasets(&config_dir(&config))?;
            let edge = match weights {
                Some(p) => store::load_edge(p)?,
                None => initial_models(&tc)?.0,
            };
            let mut transport = TcpTransport::connect(address.as_str())?;
            if let Some(c) = capture {
                transport = transport.with_capture(c)?;
            }
            let mut trainer = EdgeTrainer::connect(tc.clone(), edge, &key, transport)?;
            let mut sink = MetricsSink::open(metrics.as_deref())?;
            let outcome = train_with(&tc, &mut trainer, &train, &test, &mut sink);
            let shutdown = trainer.shutdown();
            outcome?;
            shutdown?;
            save_edge(out_dir.as_deref(), trainer.edge())?;
            Ok(0)
        }
        Command::Attack { config, kind, mode, seed, rounds, matching, epochs, out } => {
            let mut ac = AttackConfig::desk(0);
            if let Some(p) = &config {
                let cfg = RunConfig::load(p)?;
                ac.geometry = cfg.geometry();
                ac.seed = cfg.train.seed;
            }
            if let Some(s) = seed {
                ac.seed = s;
            }
            ac.blackbox.seed = ac.seed;
            ac.rounds = rounds;
            if rounds == 0 {
                return Err(Error::config("rounds", "must be at least 1"));
            }
            if let Some(e) = epochs {
                ac.blackbox.epochs = e;
            }
            ac.matching = match matching {
                MatchingArg::Naive => Matching::Naive,
                MatchingArg::GreedyRow => Matching::GreedyRow,
            };
            let report = match kind {
                AttackKind::Blackbox => attack::run_blackbox(&ac, mode.into())?,
                AttackKind::Whitebox => attack::run_whitebox(&ac, mode.into())?,
            };
            let line = serde_json::to_string(&report).expect("report serialises");
            match out {
                Some(p) => writeln!(OpenOptions::new().create(true).append(true).open(p)?, "{line}")?,
                None => emit(&line)?,
            }
            Ok(0)
        }
        Command::Info { config } => {
            let cfg = RunConfig::load(&config)?;
            let r = info::report(&cfg.geometry(), cfg.model.n_layers, cfg.train.batch_size);
            emit(&serde_json::to_string_pretty(&r).expect("info serialises"))?;
            Ok(0)
        }
    }
}
