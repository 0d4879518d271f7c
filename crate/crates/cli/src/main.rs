use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use fpdiff_cli::commands;
use fpdiff_cli::config::{resolve_output, RunConfig};

#[derive(Parser)]
#[command(name = "fpdiff", version, about = "Score diffusion on frames with a Fokker-Planck residual")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to `<output_dir>/<command>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write ground-truth samples of the configured dataset.
    Dataset(Common),
    /// Train the denoiser and evaluate it on held-out samples.
    Train(Common),
    /// Run the joint reverse sampler.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Residual suite on exact scores.
    VerifyFpe(Common),
    /// Time training steps with and without the residual term.
    Bench(Common),
}

fn setup(name: &str, c: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(c.seed)?;
    let out = match &c.out {
        Some(p) => resolve_output(p),
        None => resolve_output(&cfg.output_dir).join(format!("{name}-seed{}", cfg.seed)),
    };
    Ok((cfg, out))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Dataset(c) => {
            let (cfg, out) = setup("dataset", c)?;
            let s = commands::dataset(&cfg, &out)?;
            println!("wrote {} samples of {} to {}", s.len(), cfg.dataset.kind, out.display());
        }
        Command::Train(c) => {
            let (cfg, out) = setup("train", c)?;
            let r = commands::train(&cfg, &out)?;
            let last = r.reports.last();
            println!(
                "{} steps, final total {}, held-out mse {} fpe {} (rel_x {}, rel_r {})",
                r.reports.len(),
                last.map_or(f64::NAN, |s| s.total),
                r.eval.denoise_mse,
                r.eval.fpe_loss,
                r.eval.rel_x,
                r.eval.rel_r
            );
            println!("run directory {}", out.display());
        }
        Command::Sample { common, checkpoint } => {
            let (cfg, out) = setup("sample", common)?;
            let (_, m) = commands::sample(&cfg, checkpoint.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            println!("run directory {}", out.display());
        }
        Command::VerifyFpe(c) => {
            let (cfg, out) = setup("verify-fpe", c)?;
            let r = commands::verify_fpe(&cfg, &out)?;
            println!("{:<18} {:<4} {:>5} {:>12} {:>8}  result", "case", "", "t", "relative", "budget");
            for c in &r.cases {
                let cmp = if c.expect_consistent { "<" } else { ">" };
                let verdict = if c.pass { "pass" } else { "FAIL" };
                println!(
                    "{:<18} {:<4} {:>5} {:>12.3e} {cmp}{:>7.1e}  {verdict}",
                    c.case, c.manifold, c.t, c.relative_residual, c.budget
                );
            }
            for row in &r.fd_order {
                match row.order {
                    Some(o) => println!("fd dt={:e} error={:.3e} order={o:.3}", row.dt, row.error),
                    None => println!("fd dt={:e} error={:.3e}", row.dt, row.error),
                }
            }
            println!("run directory {}", out.display());
            if !r.all_pass {
                bail!("verification failed");
            }
        }
        Command::Bench(c) => {
            let (cfg, out) = setup("bench", c)?;
            let (n, t) = commands::bench(&cfg, &out)?;
            println!(
                "forward passes {} vs {} (ratio {}); wall-clock ratio {:.3} ± {:.3} over {} reps",
                n.forward_passes_on,
                n.forward_passes_off,
                n.forward_pass_ratio,
                t.ratio_mean,
                t.ratio_var.sqrt(),
                n.reps
            );
            println!("run directory {}", out.display());
        }
    }
    Ok(())
}
