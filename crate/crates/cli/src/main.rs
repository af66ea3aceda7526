//! `easier`: train, linearize, fold and measure rectifier networks.

mod experiment;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use easier_core::config::ExperimentConfig;
use easier_core::cost::{count_flops, timing_harness, TimingReport};
use easier_core::degeneration::{density_csv, density_grid, parse_grid, sweep, sweep_csv, ProductDistribution};
use easier_core::engine::{checkpoint, parse_shape, train_with};
use easier_core::entropy::{profile_with, StateRule};
use easier_core::fold::{fold_network, FusionPolicy};
use easier_core::io::{write_atomic, write_json};
use easier_core::{evaluate, Error, Result};
use serde::Serialize;

use crate::svg::{line_chart, Series};

#[derive(Parser)]
#[command(name = "easier", version, about = "Entropy-guided depth reduction for rectifier networks")]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set easier.delta=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Always,
    OnlyIfCheaper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    PreActivation,
    Output,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model and save a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path; defaults to `<output_dir>/dense.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full EASIER loop and write a run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replaces `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Fold activation-free affine chains of a checkpoint.
    Fold {
        /// Checkpoint to fold.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folded checkpoint; fold_report.json is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "always")]
        policy: Policy,
    },
    /// Count FLOPs and parameters, optionally timing inference.
    Cost {
        /// Checkpoint to measure.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample shape such as `1x1x28x28`; a leading batch dimension of 1 is allowed.
        #[arg(long)]
        input_shape: String,
        /// Directory for cost.json and cost.csv; defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Time inference with this many repeats (at least 30).
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Tabulate p[Z>0] for a product of correlated Gaussians over a rho grid.
    Degeneration {
        /// `start:stop:step`, inclusive.
        #[arg(long, allow_hyphen_values = true)]
        rho_grid: String,
        #[arg(long, default_value_t = 1.0)]
        sigma_x: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_w: f64,
        /// CSV path; an SVG chart is written next to it. Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the product density on a z grid.
    Density {
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        /// `lo:hi`.
        #[arg(long, allow_hyphen_values = true, default_value = "-4:4")]
        z_range: String,
        #[arg(long, default_value_t = 401)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma_x: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_w: f64,
        /// CSV path; an SVG chart is written next to it. Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer and per-neuron activation-state entropy of a checkpoint.
    ProfileEntropy {
        /// Checkpoint to profile.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON path; a `layer_id,H,rank` CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long, value_enum, default_value = "pre-activation")]
        state_rule: Rule,
    },
    /// Regenerate summary.json and the history chart of a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
}

#[derive(Serialize)]
struct CostOutput {
    #[serde(flatten)]
    cost: easier_core::cost::CostReport,
    timing: Option<TimingReport>,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let data = experiment::load_data(&cfg)?;
            let net = cfg.build_network(&data)?;
            let augment = (cfg.augment.hflip || cfg.augment.shift_px > 0).then_some(&cfg.augment);
            let net = train_with(net, &data.train, &cfg.policy, augment)?;
            let path = out.unwrap_or_else(|| Path::new(&cfg.output_dir).join("dense.ckpt"));
            checkpoint::save(&net, &path)?;
            let acc = |s: &easier_core::data::DatasetSplit| if s.is_empty() { Ok(None) } else { evaluate(&net, s).map(Some) };
            let summary = TrainSummary {
                checkpoint: path.display().to_string(),
                val_acc: acc(&data.val)?,
                test_acc: acc(&data.test)?,
            };
            write_json(&sibling(&path, "json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Run { cfg, output_dir } => {
            let cfg = cfg.load()?;
            let dir = experiment::run_dir(&cfg, output_dir);
            let summary = experiment::run_experiment(&cfg, &dir, cli.quiet)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Fold { checkpoint: input, out, policy } => {
            let net = checkpoint::load(&input)?;
            let policy = match policy {
                Policy::Always => FusionPolicy::Always,
                Policy::OnlyIfCheaper => FusionPolicy::OnlyIfCheaper,
            };
            let folded = fold_network(&net, policy)?;
            checkpoint::save(&folded.network, &out)?;
            let report = out.with_file_name("fold_report.json");
            write_json(&report, &folded.report)?;
            for w in &folded.report.warnings {
                if !cli.quiet {
                    eprintln!("warning: {w}");
                }
            }
            println!("{}", serde_json::to_string_pretty(&folded.report)?);
        }
        Command::Cost { checkpoint: input, input_shape, out_dir, repeats } => {
            let net = checkpoint::load(&input)?;
            let shape = parse_shape(&input_shape)
                .ok_or_else(|| Error::Config(format!("bad input shape `{input_shape}`")))?;
            let cost = count_flops(&net, &shape)?;
            let timing = repeats.map(|r| timing_harness(&net, &shape, r)).transpose()?;
            let dir = out_dir.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            write_atomic(&dir.join("cost.csv"), cost.to_csv().as_bytes())?;
            let out = CostOutput { cost, timing };
            write_json(&dir.join("cost.json"), &out)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Degeneration { rho_grid, sigma_x, sigma_w, out } => {
            let rhos = parse_grid(&rho_grid)?;
            let template = ProductDistribution::new(sigma_x, sigma_w, 0.0)?;
            let rows = sweep(&template, &rhos)?;
            emit(out.as_deref(), &sweep_csv(&rows))?;
            if let Some(out) = &out {
                let svg = line_chart(
                    "p[Z > 0] against correlation",
                    "rho",
                    "p[Z > 0]",
                    &[Series { name: "quadrature", points: rows.iter().map(|r| (r.rho, r.p_on)).collect(), dashed: false }],
                );
                write_atomic(&sibling(out, "svg"), svg.as_bytes())?;
            }
        }
        Command::Density { rho, z_range, points, sigma_x, sigma_w, out } => {
            let bad = || Error::Config(format!("z range must look like lo:hi, got `{z_range}`"));
            let (lo, hi) = z_range.split_once(':').ok_or_else(bad)?;
            let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
            let d = ProductDistribution::new(sigma_x, sigma_w, rho)?;
            let rows = density_grid(&d, lo, hi, points)?;
            emit(out.as_deref(), &density_csv(&rows))?;
            if let Some(out) = &out {
                let svg = line_chart(
                    &format!("product density, rho = {rho}"),
                    "z",
                    "f(z)",
                    &[Series { name: "density", points: rows.iter().map(|r| (r.z, r.f)).collect(), dashed: false }],
                );
                write_atomic(&sibling(out, "svg"), svg.as_bytes())?;
            }
        }
        Command::ProfileEntropy { checkpoint: input, cfg, out, split, state_rule } => {
            let cfg = cfg.load()?;
            let net = checkpoint::load(&input)?;
            let data = experiment::load_data(&cfg)?;
            let part = match split {
                Split::Train => &data.train,
                Split::Val => &data.val,
                Split::Test => &data.test,
            };
            let rule = match state_rule {
                Rule::PreActivation => StateRule::PreActivation,
                Rule::Output => StateRule::Output,
            };
            let report = profile_with(&net, part, &cfg.dataset.id(), rule)?;
            write_json(&out, &report)?;
            write_atomic(&sibling(&out, "csv"), report.to_csv().as_bytes())?;
            print!("{}", report.to_csv());
        }
        Command::Report { dir } => {
            let state = experiment::read_state(&dir)?;
            let summary = experiment::summarize(&dir)?;
            experiment::write_report(&dir, &summary, &state)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
