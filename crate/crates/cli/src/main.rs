use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use moemamba::arch::{enumerate_variants, param_report, plan_ratio};
use moemamba::train::{
    evaluate, model_from_checkpoint, read_manifest, speedup_at, tokenize_bytes, train, Checkpoint,
    LossCurve, RunLog, TrainConfig, TrainOptions,
};
use moemamba::{DType, Element};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "moemamba",
    version,
    about = "Train, evaluate and account MoE-Mamba language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write 0 in the wallclock column so the run log is reproducible byte for byte.
        #[arg(long)]
        no_wallclock: bool,
    },
    /// Mean log perplexity of a checkpoint on a byte corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Windows per forward pass; defaults to the training batch size.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Print the parameter report of a config's model as JSON.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Widths for a Mamba:MoE active-parameter ratio of r : 6-r.
    PlanRatio {
        #[arg(long)]
        ratio: usize,
        #[arg(long)]
        d_model: usize,
        /// N_experts * d_expert; defaults to 96 * d_model.
        #[arg(long)]
        expert_product: Option<usize>,
    },
    /// List the 19 architecture variants.
    Variants {
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        n_blocks: usize,
        #[arg(long, default_value_t = 4)]
        n_experts: usize,
    },
    /// Token-count speedup of run B over run A at a loss level.
    Speedup {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        /// Loss level; without it a sweep over the levels both runs reach is printed.
        #[arg(long)]
        level: Option<f64>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            no_wallclock,
        } => {
            let cfg = TrainConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let opts = TrainOptions {
                record_wallclock: !no_wallclock,
            };
            let summary = train(&cfg, &out, &opts)?;
            print(&summary)
        }
        Command::Eval { ckpt, data, batch } => {
            let manifest =
                read_manifest(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let tokens = tokenize_bytes(&data)?;
            let ctx = manifest.config.context_length;
            let batch = batch.unwrap_or(manifest.config.batch_size);
            let loss = match manifest.config.dtype {
                DType::F32 => eval_typed::<f32>(&ckpt, &tokens, ctx, batch)?,
                DType::F64 => eval_typed::<f64>(&ckpt, &tokens, ctx, batch)?,
            };
            print(&json!({
                "mean_log_perplexity": loss,
                "perplexity": loss.exp(),
                "tokens": tokens.len(),
                "context_length": ctx,
            }))
        }
        Command::Params { config } => {
            let cfg = TrainConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            print(&param_report(&cfg.model)?)
        }
        Command::PlanRatio {
            ratio,
            d_model,
            expert_product,
        } => {
            let plan = plan_ratio(ratio, d_model, expert_product)?;
            print(&json!({
                "ratio": format!("{}:{}", plan.mamba_parts, plan.moe_parts),
                "expansion": format!("{}/{}", plan.expansion_num, plan.expansion_den),
                "expansion_num": plan.expansion_num,
                "expansion_den": plan.expansion_den,
                "d_expert": plan.d_expert,
                "n_experts": plan.n_experts,
            }))
        }
        Command::Variants {
            d_model,
            n_blocks,
            n_experts,
        } => {
            for spec in enumerate_variants(d_model, n_blocks, n_experts) {
                let report = param_report(&spec)?;
                println!(
                    "{}",
                    json!({
                        "name": spec.name(),
                        "label": spec.projection_label(),
                        "spec": spec,
                        "total_params": report.total_params,
                        "active_params_per_token": report.active_params_per_token,
                    })
                );
            }
            Ok(())
        }
        Command::Speedup {
            run_a,
            run_b,
            level,
        } => {
            let a = LossCurve::from_runlog(&RunLog::read_csv(&run_a)?)?;
            let b = LossCurve::from_runlog(&RunLog::read_csv(&run_b)?)?;
            match level {
                Some(l) => print(&json!({ "level": l, "speedup": speedup_at(&a, &b, l)? })),
                None => {
                    let hi = a.loss()[0].min(b.loss()[0]);
                    let lo = a.min_loss().max(b.min_loss());
                    if lo > hi {
                        bail!("the runs share no attained loss level");
                    }
                    let rows: Vec<_> = (0..=10)
                        .map(|i| {
                            let l = hi + (lo - hi) * i as f64 / 10.0;
                            speedup_at(&a, &b, l).map(|s| json!({ "level": l, "speedup": s }))
                        })
                        .collect::<Result<_, _>>()?;
                    print(&rows)
                }
            }
        }
    }
}

fn eval_typed<T: Element>(
    ckpt: &PathBuf,
    tokens: &[usize],
    ctx: usize,
    batch: usize,
) -> Result<f64> {
    let model = model_from_checkpoint(&Checkpoint::<T>::load(ckpt)?)?;
    Ok(evaluate(&model, tokens, ctx, batch)?)
}
