use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contextnet::runs::{self, Mode};
use contextnet::{Error, Result, RunConfig};

/// Real-time two-branch semantic segmentation: train, evaluate, prune,
/// profile and run ContextNet models on the CPU.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and metrics.csv.
    Train(Common),
    /// Score a checkpoint on the validation split.
    Eval(Common),
    /// Progressively prune a wide checkpoint down to 1.0x.
    Prune(Common),
    /// Per-layer parameters, MACs and single-thread latency.
    Profile(Common),
    /// Segment one PPM image; writes mask.pgm and mask.ppm.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input image (binary PPM).
        image: PathBuf,
    },
    /// Write the configured synthetic dataset to disk.
    Generate(Common),
}

#[derive(Args)]
struct Common {
    /// key = value config file (default: the checkpoint's config.txt if present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (images/, labels/, optional train/ val/ and palette.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Second checkpoint for ensemble evaluation.
    #[arg(long)]
    checkpoint2: Option<PathBuf>,
    /// normal, zero_context, zero_detail, ensemble or aux.
    #[arg(long, default_value = "normal")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Input size as HxW (profile only).
    #[arg(long, value_parser = parse_size)]
    input_size: Option<(usize, usize)>,
    /// Timed repetitions (profile only).
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size `{s}`"));
    Ok((p(h)?, p(w)?))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let sibling = self.checkpoint.as_deref().and_then(Path::parent).map(|d| d.join("config.txt"));
        let mut cfg = match (&self.config, sibling) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.is_file() => RunConfig::load(&p)?,
            _ => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| Error::Usage("--checkpoint is required".into()))
    }
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            runs::run_train(&cfg, c.data.as_deref(), c.checkpoint.as_deref(), &c.out, &mut progress)?;
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let mode: Mode = c.mode.parse()?;
            let report = runs::run_eval(&cfg, c.data.as_deref(), c.checkpoint()?, c.checkpoint2.as_deref(), mode, &c.out)?;
            print!("{}", runs::report_text(mode, &report));
        }
        Command::Prune(c) => {
            let cfg = c.resolve()?;
            let outcome = runs::run_prune(&cfg, c.data.as_deref(), c.checkpoint()?, &c.out, &mut progress)?;
            print!("{}", runs::prune_report_text(outcome.initial_miou, &outcome.report, &cfg.prune_schedule));
        }
        Command::Profile(c) => {
            let cfg = c.resolve()?;
            if c.reps == 0 {
                return Err(Error::Usage("--reps must be positive".into()));
            }
            let p = runs::run_profile(&cfg, c.checkpoint.as_deref(), c.input_size, c.reps, &c.out)?;
            print!("{}", p.to_table());
        }
        Command::Infer { common: c, image } => {
            let cfg = c.resolve()?;
            let out = runs::run_infer(&cfg, c.checkpoint()?, &image, c.data.as_deref(), &c.out)?;
            println!("{}\n{}", out.mask.display(), out.color.display());
        }
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            runs::run_generate(&cfg, &c.out)?;
        }
    }
    Ok(())
}

/// Failures are reported as a single `error[kind]: message` line.
fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{kind}]: {message}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
