use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graft::history;
use graft::{read_snapshot, write_snapshot, ConfigFile, Error, Result};
use graft_core::diagnostics::{analyze, DEFAULT_THRESHOLDS};
use graft_core::grafting::graft_external_pair;

/// Filter grafting experiments on small CNNs.
#[derive(Parser)]
#[command(name = "graft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; write final snapshots, history CSVs and the alpha log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Graft one snapshot file with a peer (layer blend, self keeps alpha).
    GraftCheckpoints {
        #[arg(long = "self")]
        self_path: PathBuf,
        #[arg(long)]
        peer: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a diagnostics report for a snapshot as JSON.
    Analyze {
        #[arg(long)]
        snapshot: PathBuf,
        /// Adds invalid-filter location IoU against this snapshot.
        #[arg(long)]
        peer: Option<PathBuf>,
        /// Takes binning settings from this config and records its hash.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of filters counted as invalid for IoU.
        #[arg(long, default_value_t = 0.2)]
        iou_fraction: f64,
        /// Invalid-ratio thresholds, ascending.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Aggregate a training history directory into per-epoch curves (CSV).
    Report {
        #[arg(long)]
        history: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the toy experiment config as a starting point.
    InitConfig {
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let (cfg, warnings) = ConfigFile::load(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out_dir } => {
            let cfg = load_config(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let (train, test) = cfg.data.load(base)?;
            let out = graft::run(&cfg, &train, &test)?;
            fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
                path: out_dir.clone(),
                source,
            })?;
            let tag = cfg.hash()[..16].to_string();
            for mut model in out.models {
                model.tag = tag.clone();
                write_snapshot(&model, out_dir.join(format!("worker{}.snap", model.worker_id)))?;
            }
            history::write_history(&out_dir, &out.history)?;
            let rendered = out_dir.join("config.toml");
            fs::write(&rendered, cfg.render()).map_err(|source| Error::Io { path: rendered, source })?;
            if let Some(last) = out.history.last() {
                for w in &last.workers {
                    println!(
                        "worker {}: epoch {} loss {:.4} test accuracy {:.4}",
                        w.worker, last.epoch, w.loss, w.test_accuracy
                    );
                }
            }
            Ok(())
        }
        Command::GraftCheckpoints {
            self_path,
            peer,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let me = read_snapshot(&self_path)?;
            let other = read_snapshot(&peer)?;
            let (grafted, decisions) =
                graft_external_pair(&me, &other, &cfg.experiment.graft, &cfg.experiment.binning)?;
            write_snapshot(&grafted, &out)?;
            println!("{}", serde_json::to_string_pretty(&decisions)?);
            Ok(())
        }
        Command::Analyze {
            snapshot,
            peer,
            config,
            iou_fraction,
            thresholds,
        } => {
            let model = read_snapshot(&snapshot)?;
            let peer = peer.map(read_snapshot).transpose()?;
            let cfg = config.as_deref().map(load_config).transpose()?;
            let bins = cfg.as_ref().map(|c| c.experiment.binning).unwrap_or_default();
            let thresholds = thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
            let mut report = analyze(&model, peer.as_ref(), &bins, &thresholds, iou_fraction)?;
            report.metadata.config_hash = cfg.map(|c| c.hash());
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Report { history, out } => match out {
            Some(path) => {
                let file = fs::File::create(&path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                history::aggregate(&history, file)
            }
            None => history::aggregate(&history, io::stdout().lock()),
        },
        Command::InitConfig { workers, seed } => {
            let mut cfg = ConfigFile::toy(workers, seed);
            if workers < 2 {
                cfg.experiment.grafting_enabled = false;
            }
            cfg.experiment.validate()?;
            io::stdout()
                .write_all(cfg.render().as_bytes())
                .map_err(|source| Error::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}
