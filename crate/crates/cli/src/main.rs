use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nfvs::config::Config;
use nfvs::datagen::{build_dataset, read_dataset, write_dataset, DatagenConfig, DatasetHeader, Split, MAGIC};
use nfvs::evaluation::{
    ablate, benchmark, default_ablations, quantile_bands, summary_csv, write_report, ControlMode, Controller, EpisodeConfig,
};
use nfvs::nn::{load_weights, save_weights, WEIGHTS_MAGIC};
use nfvs::sim::Rig;
use nfvs::training::{train, train_e2e, EpochLosses, LossWeights, TrainConfig, TrainOutcome};
use nfvs::Error;

#[derive(Parser, Debug)]
#[command(name = "nfvs", version, about = "Neural-feedback visual servoing workbench", after_long_help = Config::help_table())]
struct Cli {
    /// Configuration file; defaults are used for keys it omits.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Ours,
    E2e,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ControllerArg {
    Vs,
    Nullspace,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect oracle demonstrations into a dataset file.
    Collect {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the perception model or the end-to-end baseline.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Output weights file; checkpoints and losses.csv go to `<out>.run/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ours")]
        variant: ModelKind,
        /// Loss weights `ci,ae,sc,r`.
        #[arg(long)]
        loss_weights: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop benchmark of trained models against the oracle.
    Eval {
        /// Perception model weights.
        #[arg(long)]
        weights: PathBuf,
        /// End-to-end baseline weights.
        #[arg(long)]
        e2e: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "vs")]
        controller: ControllerArg,
        /// Report directory (summary.csv and traces/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile bands of per-episode traces.
    Report {
        /// Directory of trace files.
        traces: PathBuf,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header of a dataset or weights file, or the effective config.
    Inspect {
        /// Dataset or weights file; omit to dump the configuration.
        path: Option<PathBuf>,
    },
    /// Train and benchmark the loss-ablation variants.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output table.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit codes: validation, runtime and I/O failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::FingerprintMismatch { .. } => 1,
        Error::Io { .. } | Error::Format(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> nfvs::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars())?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> nfvs::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn print_epoch(e: &EpochLosses) {
    println!(
        "epoch {:>4}  train {:.6} (ci {:.5} ae {:.5} sc {:.5} r {:.5})  val {:.6} (ci {:.5})",
        e.epoch, e.train.total, e.train.ci, e.train.ae, e.train.sc, e.train.r, e.val.total, e.val.ci
    );
}

fn run(cli: Cli) -> nfvs::Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Collect { out, demos, seed } => {
            if let Some(d) = demos {
                cfg.set("data.demos", &d.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("data.seed", &s.to_string())?;
            }
            cfg.validate()?;
            let rig = Rig::from_config(&cfg)?;
            let dc = DatagenConfig::from_config(&cfg)?;
            let ds = build_dataset(&rig, &dc)?;
            write_dataset(&ds, &out)?;
            println!(
                "{} of {} demonstrations succeeded; {} records ({} train / {} val demo blocks) -> {}",
                dc.demos - ds.discarded.len(),
                dc.demos,
                ds.record_count(),
                ds.partition(Split::Train).len(),
                ds.partition(Split::Val).len(),
                out.display()
            );
            for (task, why) in &ds.discarded {
                println!("  discarded task {task}: {why}");
            }
        }
        Command::Train {
            dataset,
            out,
            variant,
            loss_weights,
            epochs,
            seed,
        } => {
            if let Some(e) = epochs {
                cfg.set("train.epochs", &e.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
            cfg.validate()?;
            let weights = match loss_weights {
                Some(text) => LossWeights::parse(&text)?,
                None => LossWeights::new(cfg.f64("train.w_ci"), cfg.f64("train.w_ae"), cfg.f64("train.w_sc"), cfg.f64("train.w_r"))?,
            };
            let tc = TrainConfig::from_config(&cfg)?;
            let ds = read_dataset(&dataset)?;
            let run_dir = PathBuf::from(format!("{}.run", out.display()));
            let outcome: TrainOutcome = match variant {
                ModelKind::Ours => train(&ds, &tc, &weights, Some(&run_dir), &mut print_epoch)?,
                ModelKind::E2e => train_e2e(&ds, &tc, Some(&run_dir), &mut print_epoch)?,
            };
            save_weights(&outcome.best, &out)?;
            println!(
                "best epoch {} (val {:.6}) -> {}; log in {}",
                outcome.best_epoch,
                outcome.best_losses().val.total,
                out.display(),
                run_dir.join("losses.csv").display()
            );
        }
        Command::Eval {
            weights,
            e2e,
            episodes,
            seed,
            controller,
            out,
        } => {
            let ec = EpisodeConfig::from_config(&cfg)?;
            let rig = Rig::from_config(&cfg)?;
            let episodes = episodes.unwrap_or(cfg.usize("eval.episodes"));
            let seed = seed.unwrap_or(cfg.u64("eval.seed"));
            let header = DatasetHeader::for_rig(&rig, ec.control.period);
            let tc = TrainConfig::from_config(&cfg)?;
            let ours = load_weights(&weights, Some(&tc.perception_arch(&header)))?;
            let e2e_weights = e2e.as_deref().map(|p| load_weights(p, Some(&tc.e2e_arch(&header)))).transpose()?;
            let mode = match controller {
                ControllerArg::Vs => ControlMode::Vs,
                ControllerArg::Nullspace => ControlMode::Nullspace,
            };
            let mut controllers = vec![("ours".to_string(), Controller::Neural(&ours, mode))];
            if let Some(w) = &e2e_weights {
                controllers.push(("end_to_end".to_string(), Controller::EndToEnd(w)));
            }
            controllers.push(("oracle".to_string(), Controller::Oracle(mode)));
            let results = benchmark(&rig, &controllers, episodes, seed, &ec)?;
            write_report(&out, &results, ec.control.period)?;
            let rows: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
            print!("{}", summary_csv(&rows));
        }
        Command::Report { traces, out } => {
            let table = quantile_bands(&traces)?;
            match out {
                Some(p) => write_text(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Inspect { path } => match path {
            None => print!("{}", cfg.to_text()),
            Some(p) => print!("{}", inspect(&p)?),
        },
        Command::Ablate {
            dataset,
            episodes,
            seed,
            epochs,
            out,
        } => {
            if let Some(e) = epochs {
                cfg.set("train.epochs", &e.to_string())?;
            }
            cfg.validate()?;
            let tc = TrainConfig::from_config(&cfg)?;
            let ec = EpisodeConfig::from_config(&cfg)?;
            let rig = Rig::from_config(&cfg)?;
            let ds = read_dataset(&dataset)?;
            let rows = ablate(
                &ds,
                &tc,
                &default_ablations(),
                &rig,
                episodes.unwrap_or(cfg.usize("eval.episodes")),
                seed.unwrap_or(cfg.u64("eval.seed")),
                &ec,
                &mut |name| println!("variant {name}"),
            )?;
            write_text(&out, &summary_csv(&rows))?;
            print!("{}", summary_csv(&rows));
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> nfvs::Result<String> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: e,
        })?;
    if &magic == MAGIC {
        let ds = read_dataset(path)?;
        let h = &ds.header;
        let tasks = ds.demos.iter().map(|d| d.meta.demo_id).collect::<std::collections::BTreeSet<_>>().len();
        Ok(format!(
            "dataset {}\n  image {}x{}x{}  joints {}  features {}  period {}\n  records {}  demo blocks {} ({} tasks)  train blocks {}  val blocks {}\n",
            path.display(),
            h.width,
            h.height,
            h.channels,
            h.n,
            h.f,
            h.period,
            ds.record_count(),
            ds.demos.len(),
            tasks,
            ds.partition(Split::Train).len(),
            ds.partition(Split::Val).len()
        ))
    } else if &magic == WEIGHTS_MAGIC {
        let w = load_weights(path, None)?;
        let mut s = format!(
            "weights {}\n  fingerprint {}\n  architecture {}\n  parameters {}\n",
            path.display(),
            w.arch.fingerprint(),
            w.arch.describe(),
            w.param_count()
        );
        for t in &w.tensors {
            s.push_str(&format!("  {:<16} {:?}\n", t.name, t.shape));
        }
        Ok(s)
    } else {
        Err(Error::Format(format!("{}: neither a dataset nor a weights file", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
