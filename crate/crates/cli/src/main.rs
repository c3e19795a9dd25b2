//! `fnfm` command-line entry point: simulate datasets, train the expert /
//! VAE / flow-matching stack, evaluate zero-shot generation and export
//! diagnostics. Exit codes: 0 success, 2 configuration error, 3 stale or
//! missing artifacts, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fnfm_core::pipeline::{
    cmd_ablate, cmd_evaluate, cmd_export_latents, cmd_robustness, cmd_simulate, cmd_train_cfm,
    cmd_train_experts, cmd_train_vae, Ablation, ExperimentConfig, RobustnessMode,
};
use fnfm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fnfm", version, about = "Zero-shot forecasting of network dynamics through weight flow matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the base seed for simulation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the evaluation seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the environment grid into a dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one expert forecaster per train-split environment.
    TrainExperts {
        #[command(flatten)]
        common: Common,
        /// Worker threads for environment-parallel training.
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Keep going when individual experts diverge.
        #[arg(long)]
        allow_failures: bool,
    },
    /// Train the weight VAE on the expert corpus.
    TrainVae {
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional flow-matching model in latent space.
    TrainCfm {
        #[command(flatten)]
        common: Common,
    },
    /// Generate forecasters for test environments and tabulate RMSE.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Rerun generation with an ablated component.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Which component to ablate: tokenizer | condition.
        which: String,
    },
    /// Robustness sweeps over training data ratio or coefficient noise.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Sweep mode: data_ratio | coeff_noise.
        mode: String,
        /// Sweep levels (comma-separated).
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
    },
    /// Export PCA-projected latent flow paths.
    ExportLatents {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { common, force } => {
            let cfg = common.load()?;
            let ds = cmd_simulate(&cfg, force)?;
            println!(
                "simulated {} environments into {}",
                ds.envs.len(),
                cfg.dataset_dir().display()
            );
        }
        Cmd::TrainExperts { common, parallelism, allow_failures } => {
            let cfg = common.load()?;
            let outcome = cmd_train_experts(&cfg, parallelism, allow_failures)?;
            println!(
                "trained {} experts into {}",
                outcome.rows.len(),
                cfg.experts_dir().display()
            );
            for (env, msg) in &outcome.failures {
                eprintln!("expert {env} failed: {msg}");
            }
        }
        Cmd::TrainVae { common } => {
            let cfg = common.load()?;
            cmd_train_vae(&cfg)?;
            println!("wrote {}", cfg.vae_path().display());
        }
        Cmd::TrainCfm { common } => {
            let cfg = common.load()?;
            cmd_train_cfm(&cfg)?;
            println!("wrote {}", cfg.cfm_path().display());
        }
        Cmd::Evaluate { common } => {
            let cfg = common.load()?;
            let table = cmd_evaluate(&cfg)?;
            println!("wrote {} rows to {}", table.rows.len(), cfg.metrics_path().display());
            for method in ["fnfm", "one_per_env"] {
                for split in ["in_domain", "out_domain"] {
                    if let Some((mean, std)) = table.mean_std(method, split) {
                        println!("{method} {split}: rmse {mean:.6} ± {std:.6}");
                    }
                }
            }
        }
        Cmd::Ablate { common, which } => {
            let cfg = common.load()?;
            let which = Ablation::parse(&which)?;
            let table = cmd_ablate(&cfg, which)?;
            println!("wrote {} ablation rows under {}", table.rows.len(), cfg.out_dir.display());
        }
        Cmd::Robustness { common, mode, levels } => {
            let cfg = common.load()?;
            let mode = RobustnessMode::parse(&mode)?;
            let rows = cmd_robustness(&cfg, mode, &levels)?;
            println!(
                "wrote {} rows to {}",
                rows.len(),
                cfg.out_dir.join(format!("robustness_{}.csv", mode.as_str())).display()
            );
        }
        Cmd::ExportLatents { common } => {
            let cfg = common.load()?;
            let (rows, pca) = cmd_export_latents(&cfg)?;
            println!(
                "wrote {} rows to {} (pc1 {:.4}, pc2 {:.4} explained variance)",
                rows.len(),
                cfg.out_dir.join("latents.csv").display(),
                pca.explained[0],
                pca.explained[1]
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
