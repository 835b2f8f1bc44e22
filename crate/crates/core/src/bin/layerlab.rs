use clap::{Parser, Subcommand, ValueEnum};
use layerlab_core::cli;
use layerlab_core::config::{ConfigOverrides, RunConfig};
use layerlab_core::degrade::DegradationKind;
use std::path::PathBuf;
use std::process::ExitCode;

/// Layered-image dataset curation, objective checks, and evaluation.
#[derive(Parser)]
#[command(name = "layerlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curate layered samples from a directory of flat PNG images.
    Curate {
        /// Directory of input .png images.
        input_dir: PathBuf,
        /// Output dataset root (samples, audit logs, run summary).
        out_dir: PathBuf,
        /// TOML run configuration; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seed (mandatory in mock mode).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads over independent images.
        #[arg(long)]
        workers: Option<usize>,
        /// Force deterministic in-process mock services.
        #[arg(long)]
        mock: bool,
        /// Longest image side after loading.
        #[arg(long)]
        max_side: Option<usize>,
        /// Inter-FG / FG-BG similarity ceiling.
        #[arg(long)]
        tau_local: Option<f64>,
        /// Composite-vs-source similarity floor.
        #[arg(long)]
        tau_global: Option<f64>,
        /// De-duplication similarity ceiling.
        #[arg(long)]
        tau_dup: Option<f64>,
        /// Background-curation step cap.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Recompose a stored sample's layer stack into a PNG.
    Compose {
        manifest: PathBuf,
        out: PathBuf,
        /// Add the stored shadow residual back (reproduces the source).
        #[arg(long)]
        with_shadow: bool,
    },
    /// Recompute and store a sample's shadow residual.
    Shadow { manifest: PathBuf, out: PathBuf },
    /// Apply a boundary degradation to one stored layer.
    Degrade {
        manifest: PathBuf,
        /// Layer order index (1 is frontmost).
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 2)]
        radius: usize,
        /// Gaussian sigma (blur only).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes <prefix>.rgb.png and <prefix>.alpha.png.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Check flow-path endpoints, velocities, and losses for a sample.
    ObjectiveCheck {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Also write the JSON report to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate predicted decompositions against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_edits: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition a dataset into aspect-ratio and layer-count buckets.
    Bucket {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Erode,
    Dilate,
    Blur,
    ExpandThenErode,
}

impl From<KindArg> for DegradationKind {
    fn from(value: KindArg) -> Self {
        match value {
            KindArg::Erode => DegradationKind::Erode,
            KindArg::Dilate => DegradationKind::Dilate,
            KindArg::Blur => DegradationKind::Blur,
            KindArg::ExpandThenErode => DegradationKind::ExpandThenErode,
        }
    }
}

fn run(command: Command) -> layerlab_core::Result<()> {
    match command {
        Command::Curate {
            input_dir,
            out_dir,
            config,
            seed,
            workers,
            mock,
            max_side,
            tau_local,
            tau_global,
            tau_dup,
            max_steps,
        } => {
            let mut run_config = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            run_config.apply_env();
            run_config.apply_overrides(&ConfigOverrides {
                seed,
                worker_count: workers,
                max_side,
                tau_local,
                tau_global,
                tau_dup,
                max_steps,
                mock,
            });
            cli::cmd_curate(&input_dir, &out_dir, &run_config)?;
            Ok(())
        }
        Command::Compose {
            manifest,
            out,
            with_shadow,
        } => cli::cmd_compose(&manifest, &out, with_shadow),
        Command::Shadow { manifest, out } => cli::cmd_shadow(&manifest, &out),
        Command::Degrade {
            manifest,
            layer,
            kind,
            radius,
            sigma,
            seed,
            out_prefix,
        } => cli::cmd_degrade(
            &manifest,
            layer,
            kind.into(),
            radius,
            sigma,
            seed,
            &out_prefix,
        ),
        Command::ObjectiveCheck {
            manifest,
            t,
            seed,
            lambda,
            out,
        } => {
            let report = cli::cmd_objective_check(&manifest, t, seed, lambda)?;
            let json = serde_json::to_string_pretty(&report).map_err(layerlab_core::Error::Json)?;
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n")).map_err(|e| {
                    layerlab_core::Error::Io {
                        path: path.display().to_string(),
                        source: e,
                    }
                })?;
            }
            Ok(())
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            max_edits,
            out,
        } => {
            cli::cmd_eval(&pred_dir, &gt_dir, max_edits, out.as_deref())?;
            Ok(())
        }
        Command::Bucket { dir, out } => {
            cli::cmd_bucket(&dir, out.as_deref())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
