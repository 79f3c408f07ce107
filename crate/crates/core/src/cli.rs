//! The `negmine` command line.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running. Log verbosity comes from `NEGMINE_LOG`
//! (`error`, `warn`, `info`, `debug`, `trace`; default `warn`).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::batcher::SamplingPolicySpec;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalbench::{self, fn_probability_of};
use crate::manifest::RunManifest;
use crate::runlog;
use crate::synthworld::{generate_universe, relation_stats, SemanticUniverse};
use crate::trainloop::{run_training, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "negmine", version, about = "Learned hard-negative batch scheduling on a toy image-text world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set scheduler.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        if let Some(s) = self.seed {
            all.push(format!("seed={s}"));
        }
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and print its relation statistics.
    GenWorld {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the world (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Batching policy: falcon, fixed:<q>, hardening, softening, uniform.
        #[arg(long)]
        policy: Option<SamplingPolicySpec>,
        /// Existing world file; generated from the configuration when absent.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Also save the generated world here.
        #[arg(long)]
        world_out: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long, alias = "ckpt-in")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs (the checkpoint allows resuming).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Save every search space's similarity matrix under `<out>/sim/`.
        #[arg(long)]
        dump_sim: bool,
    },
    /// Compute recall and false-negative curves for a finished run.
    Eval {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// World file; defaults to the one recorded in the run manifest.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Tabulate evaluated runs side by side.
    Compare {
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the built-in defaults instead of the effective configuration.
        #[arg(long)]
        defaults: bool,
    },
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn print_stats(out: &mut dyn Write, label: &str, world: &SemanticUniverse, train_only: bool) -> Result<()> {
    let stats = if train_only {
        world.pair_stats(&world.train_pairs())?
    } else {
        relation_stats(world)?
    };
    let p_fn = fn_probability_of(&stats)?;
    writeln!(
        out,
        "{label}: images={} texts={} |R|={} |P|={} rho={:.6} kappa={:.6} p_fn={:.6}",
        stats.n_images, stats.n_texts, stats.relation, stats.positives, stats.rho, stats.kappa, p_fn
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn load_world(path: &Path) -> Result<SemanticUniverse> {
    SemanticUniverse::read_jsonl(path)
}

fn dispatch(cmd: Command, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let stdout_err = |e: std::io::Error| Error::io("<stdout>", e);
    match cmd {
        Command::GenWorld { cfg, out: path } => {
            let cfg = cfg.load(&[])?;
            let world = generate_universe(&cfg.world, cfg.seed)?;
            world.write_jsonl(&path)?;
            writeln!(out, "wrote {} (sha256 {})", path.display(), world.content_hash()?).map_err(stdout_err)?;
            print_stats(out, "all", &world, false)?;
            print_stats(out, "train", &world, true)
        }
        Command::Train {
            cfg,
            policy,
            world,
            world_out,
            out: dir,
            resume,
            stop_after,
            dump_sim,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = policy {
                extra.push(format!("policy={p}"));
            }
            if dump_sim {
                extra.push("log.dump_sim=true".into());
            }
            let cfg = cfg.load(&extra)?;
            let universe = match &world {
                Some(p) => load_world(p)?,
                None => generate_universe(&cfg.world, cfg.seed)?,
            };
            if let Some(p) = &world_out {
                universe.write_jsonl(p)?;
            }
            let opts = RunOptions {
                resume,
                stop_after,
                world_path: world.or(world_out),
                args: argv.to_vec(),
            };
            let summary = run_training(&cfg, &universe, &dir, &opts)?;
            if let Some(last) = summary.epochs.last() {
                writeln!(
                    out,
                    "epoch {} loss {:.4} fn-rate {:.4} eval R@1 {:.4}",
                    last.epoch, last.loss_total, last.fn_selected_rate, last.eval_r1_mean
                )
                .map_err(stdout_err)?;
            }
            writeln!(
                out,
                "{} {}",
                if summary.finished { "finished" } else { "paused" },
                summary.checkpoint.display()
            )
            .map_err(stdout_err)
        }
        Command::Eval { run, world } => {
            let mut manifest = RunManifest::read(&run)?;
            let world_path = match world {
                Some(p) => p,
                None => PathBuf::from(manifest.world_path.clone().ok_or_else(|| {
                    Error::Config("the run did not record a world file; pass --world".into())
                })?),
            };
            let universe = load_world(&world_path)?;
            let cfg = manifest.run_config()?;
            let (report, _) = evalbench::evaluate_run(&run, &universe, cfg.fn_bucket)?;
            manifest.add_output(runlog::RECALL_FILE);
            manifest.add_output(runlog::FN_CURVE_FILE);
            manifest.write(&run)?;
            for r in &report.rows {
                writeln!(out, "{} {} R@{} = {:.4}", r.direction, r.variant, r.k, r.recall).map_err(stdout_err)?;
            }
            Ok(())
        }
        Command::Compare { out: path, runs } => {
            let cmp = evalbench::compare_policies(&runs)?;
            evalbench::write_comparison(&path, &cmp)?;
            for s in evalbench::summarize_by_policy(&cmp.rows) {
                writeln!(
                    out,
                    "{:<12} runs={} R@1={:.4}±{:.4} fn-rate={:.4}",
                    s.policy, s.runs, s.r1_mean, s.r1_std, s.final_fn_rate
                )
                .map_err(stdout_err)?;
            }
            Ok(())
        }
        Command::Config { cfg, defaults } => {
            let c = if defaults { RunConfig::default() } else { cfg.load(&[])? };
            write!(out, "{}", c.to_toml_string()).map_err(stdout_err)
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let env = env_logger::Env::new().filter_or("NEGMINE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
