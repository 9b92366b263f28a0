use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use apnet::harness::config::{DataFormat, ExperimentConfig};
use apnet::harness::data::{ingest, Dataset};
use apnet::harness::{checkpoint, evaluate, report, train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "apnet",
    version,
    about = "Train, evaluate and account augmentation-pathway networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed of an experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.apnet` when it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1/top-5 of a checkpoint's main head on a validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or `synthetic` for the generated set.
        #[arg(long)]
        data: String,
        /// Experiment config supplying the data format and eval protocol.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Table of params, MACs and accuracy over finished runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Parameter and MAC counts of a config's model without training.
    Account {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_eval_data(data: &str, cfg: Option<&ExperimentConfig>) -> Result<Dataset> {
    let mut dc = match cfg {
        Some(c) => c.data.clone(),
        None => toml::from_str("format = \"packed\"").expect("static config"),
    };
    if data == "synthetic" {
        dc.format = DataFormat::Synthetic;
    } else {
        dc.path = Some(PathBuf::from(data));
        if cfg.is_none() && PathBuf::from(data).join("train").is_dir() {
            dc.format = DataFormat::ImageTree;
        }
    }
    dc.per_class = None;
    Ok(ingest(&dc, 0)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            epochs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let data = ingest(&cfg.data, seed).context("loading data")?;
            log::info!(
                "{}: {} train / {} val images, {} classes",
                cfg.name,
                data.train.len(),
                data.val.len(),
                data.classes
            );
            let summary = train(
                &cfg,
                &data,
                &TrainOptions {
                    seed,
                    out_dir: out,
                    resume,
                    epochs,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint: path,
            data,
            config,
        } => {
            let ck = checkpoint::load(&path)?;
            let cfg = config.map(|c| ExperimentConfig::load(&c)).transpose()?;
            let ds = load_eval_data(&data, cfg.as_ref())?;
            if ds.classes != ck.network.num_classes() {
                bail!(
                    "dataset has {} classes but the checkpoint head has {}",
                    ds.classes,
                    ck.network.num_classes()
                );
            }
            let protocol = cfg.map(|c| c.eval).unwrap_or_default();
            let acc = evaluate(&ck.network, &ds.val, &protocol)?;
            println!("top1 {:.2}  top5 {:.2}  ({} images)", acc.top1, acc.top5, acc.count);
        }
        Command::Report { runs, csv } => {
            let rows = report::summarize(&report::load_runs(&runs)?);
            if csv {
                print!("{}", report::render_csv(&rows));
            } else {
                print!("{}", report::render_text(&rows));
            }
        }
        Command::Account { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let input = (cfg.eval.crop, cfg.eval.crop);
            let model = cfg.model()?;
            let a = model.account(input)?;
            println!("params (inference) {}", a.params_infer);
            println!("params (training)  {}", a.params_train);
            match a.macs {
                Some(m) => println!("MACs at {}x{}     {m}", input.0, input.1),
                None => println!("MACs               n/a"),
            }
            if let apnet::harness::ModelSpec::Plan(plan) = &model {
                if plan.k > 1 {
                    let b = plan.baseline().account(input)?;
                    println!("baseline params    {}", b.params_infer());
                    println!("baseline MACs      {}", b.macs_infer());
                }
            }
        }
    }
    Ok(())
}
