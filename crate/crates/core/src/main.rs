use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use augseg::ablate::{ablate, Sweep};
use augseg::config::RunConfig;
use augseg::harness::Mode;
use augseg::metrics::Metric;
use augseg::pipeline::{self, BaseStatus};
use augseg::report::Report;
use augseg::Error;

#[derive(Parser)]
#[command(name = "augseg", version, about = "Continual promptable segmentation with per-task low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output location (defaults to $AUGSEG_OUT, then the config, then ./runs).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the base model; skipped when an up-to-date checkpoint exists.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run one continual stream and write a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "samcl", value_name = "MODE")]
        mode: Mode,
        /// Base checkpoint (defaults to <out root>/base/base.ckpt).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Dump predicted masks for the first N test images of every task.
        #[arg(long, default_value_t = 0, value_name = "N")]
        dump_masks: usize,
    },
    /// Sweep one setting, one run directory per grid cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// variant[=..], block[=..], buffer[=..] or order[=N].
        #[arg(long, value_name = "SPEC")]
        sweep: String,
        /// Comma-separated modes to run per cell.
        #[arg(long, default_value = "samcl", value_delimiter = ',', value_name = "MODE")]
        mode: Vec<Mode>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Print consolidated tables for run directories.
    Report {
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
    /// Write the synthetic domains as PPM/PGM datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> augseg::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint(cfg: &RunConfig, root: &Path, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.checkpoint_path(root), Path::to_path_buf)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn execute(cmd: Command) -> augseg::Result<u8> {
    match cmd {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let root = cfg.out_root(None);
            let path = match &common.out {
                Some(dir) => dir.join("base.ckpt"),
                None => cfg.checkpoint_path(&root),
            };
            let (_, status) = pipeline::ensure_base(&cfg, &path)?;
            match status {
                BaseStatus::UpToDate(r) => {
                    println!("up-to-date: {} (held-out mIoU {:.4})", path.display(), r.heldout.iou)
                }
                BaseStatus::Trained(r) => println!(
                    "pretrained {} params, held-out mIoU {:.4}, wrote {}",
                    r.param_count,
                    r.heldout.iou,
                    path.display()
                ),
            }
            Ok(0)
        }
        Command::Run {
            common,
            mode,
            checkpoint: ckpt,
            dump_masks,
        } => {
            let cfg = load_config(&common)?;
            let root = cfg.out_root(None);
            let model = pipeline::load_base(&cfg, &checkpoint(&cfg, &root, ckpt.as_deref()))?;
            let dir = common.out.clone().unwrap_or_else(|| {
                root.join(format!("{}-seed{}-p{}", mode.name(), cfg.seed, cfg.stream.permutation))
            });
            let out = pipeline::run_to_dir(&model, &cfg, mode, &dir, dump_masks)?;
            for m in Metric::ALL {
                let s = out.record.summary(m);
                println!("{:<5} AA {}  FM {}  FT {}", m.name(), cell(s.aa), cell(s.fm), cell(s.ft));
            }
            println!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Ablate {
            common,
            sweep,
            mode,
            checkpoint: ckpt,
        } => {
            let cfg = load_config(&common)?;
            let root = cfg.out_root(common.out.as_deref());
            let sweep = Sweep::parse(&sweep, cfg.stream.domains.len())?;
            let model = pipeline::load_base(&cfg, &checkpoint(&cfg, &cfg.out_root(None), ckpt.as_deref()))?;
            let report = ablate(&model, &cfg, &sweep, &mode, &root)?;
            print!("{}", report.table());
            Ok(0)
        }
        Command::Report { runs } => {
            let r = Report::load(&runs)?;
            print!("{}", r.render());
            if r.skipped.is_empty() {
                Ok(0)
            } else {
                Ok(r.skipped.iter().map(|(_, e)| e.exit_code() as u8).max().unwrap_or(1))
            }
        }
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let dir = cfg.out_root(common.out.as_deref()).join("data");
            let dir = common.out.clone().unwrap_or(dir);
            for d in pipeline::gen_data(&cfg, &dir)? {
                println!("{}", d.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Io { .. } | Error::Validation(_)) {
                eprintln!("usage: augseg <pretrain|run|ablate|report|gen-data> [--config PATH] [--seed N] [--mode MODE] [--out DIR] [--sweep SPEC]");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
