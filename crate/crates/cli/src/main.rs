//! Command-line experiment driver: generate networks, simulate epidemics,
//! train the inference models, evaluate reconstructions, run sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epitopo::experiments::{
    emit_outputs, emit_sweep_outputs, run_experiment, ExperimentConfig, SweepAxis,
};
use epitopo::io::{load_adjacency, load_dataset, save_adjacency, save_dataset, KvDoc};
use epitopo::metrics::{
    is_weighted_truth, jaccard, pearson, pr_auc, sparsity_index, spectral_similarity,
};
use epitopo::Result;

#[derive(Parser)]
#[command(name = "epitopo", version, about = "Metapopulation epidemic simulation and mobility-network inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Base preset: `desk` (n=50, 3 replicates) or `full` (n=100, 5 replicates).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Experiment config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set n=100 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ground-truth mobility network and write it to a file.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Replicate index selecting the graph seed.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Simulate the multi-pathogen dataset and write it to a file.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Train the configured model over all replicates; write results,
    /// epoch traces, inferred adjacencies and checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Train on a previously saved dataset instead of generating one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare an inferred adjacency file against ground truth.
    Evaluate {
        /// Inferred adjacency (schema=1 adjacency file).
        #[arg(long)]
        inferred: PathBuf,
        /// Ground-truth adjacency file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Dataset file whose embedded network serves as ground truth.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the experiment across one swept parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Swept parameter: pathogens, mobility_rate, density or nodes.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let base = match common.preset.as_str() {
        "desk" => ExperimentConfig::default(),
        "full" => ExperimentConfig::full_scale(),
        other => {
            return Err(epitopo::Error::InvalidConfig(format!(
                "unknown preset {other:?}; use desk or full"
            )))
        }
    };
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| epitopo::Error::io(format!("reading config {}", path.display()), e))?;
            ExperimentConfig::parse_with_base(base, &text)?
        }
        None => base,
    };
    for pair in &common.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            epitopo::Error::InvalidConfig(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out(dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| epitopo::Error::io(format!("creating {}", dir.display()), e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, replicate } => {
            let cfg = load_config(&common)?;
            ensure_out(&common.out)?;
            let seeds = epitopo::experiments::ReplicateSeeds::derive(cfg.random_seed, replicate);
            let net = cfg.build_network(seeds.graph)?;
            let path = common.out.join("network.txt");
            save_adjacency(&net.a, &net.labels, &path)?;
            println!(
                "network: {} nodes, {} links -> {}",
                net.n(),
                net.link_count(),
                path.display()
            );
        }
        Command::Simulate { common, replicate } => {
            let cfg = load_config(&common)?;
            ensure_out(&common.out)?;
            let dataset = cfg.build_dataset(replicate)?;
            let path = common.out.join("dataset.txt");
            save_dataset(&dataset, &path)?;
            let remaining: Vec<String> = (0..dataset.k)
                .map(|l| format!("{:.4}", dataset.remaining_susceptible(l)))
                .collect();
            println!(
                "dataset: n={} k={} T={} remaining_susceptible=[{}] -> {}",
                dataset.n,
                dataset.k,
                dataset.t_days,
                remaining.join(", "),
                path.display()
            );
        }
        Command::Train { common, dataset } => {
            let cfg = load_config(&common)?;
            ensure_out(&common.out)?;
            let mut records = match dataset {
                Some(path) => {
                    let ds = load_dataset(&path)?;
                    let record = epitopo::experiments::run_on_dataset(&cfg, &ds)?;
                    vec![record]
                }
                None => run_experiment(&cfg)?.records,
            };
            let written = emit_outputs(&mut records, &common.out)?;
            for record in &records {
                match &record.final_report {
                    Some(report) => {
                        let pr = report
                            .pr_auc
                            .map(|v| format!("{v:.4}"))
                            .unwrap_or_else(|| "-".into());
                        println!(
                            "{}: epochs={} loss={:.3e} pearson={:.4} jaccard={:.4} pr_auc={pr}",
                            record.run_id,
                            record.epochs_run,
                            record.loss_history.last().copied().unwrap_or(f64::NAN),
                            report.pearson,
                            report.jaccard,
                        );
                    }
                    None => println!(
                        "{}: epochs={} loss={:.3e} (no ground truth; metrics skipped)",
                        record.run_id,
                        record.epochs_run,
                        record.loss_history.last().copied().unwrap_or(f64::NAN),
                    ),
                }
            }
            println!("wrote {} files to {}", written.len(), common.out.display());
        }
        Command::Evaluate {
            inferred,
            truth,
            dataset,
            out,
        } => {
            let (a_hat, _) = load_adjacency(&inferred)?;
            let a_true = match (truth, dataset) {
                (Some(path), _) => load_adjacency(&path)?.0,
                (None, Some(path)) => {
                    let ds = load_dataset(&path)?;
                    ds.network_truth
                        .ok_or_else(|| {
                            epitopo::Error::InvalidConfig(
                                "dataset carries no ground-truth network".into(),
                            )
                        })?
                        .a
                }
                (None, None) => {
                    return Err(epitopo::Error::InvalidConfig(
                        "evaluate needs --truth or --dataset".into(),
                    ))
                }
            };
            ensure_out(&out)?;
            let weighted = is_weighted_truth(&a_true);
            let spectral = spectral_similarity(&a_true, &a_hat)?;
            let pearson_r = pearson(&a_true, &a_hat)?;
            let jac = jaccard(&a_true, &a_hat)?;
            let pr = if weighted {
                None
            } else {
                let mut binary = a_true.clone();
                for v in binary.data.iter_mut() {
                    *v = (*v != 0.0) as u8 as f64;
                }
                Some(pr_auc(&binary, &a_hat)?)
            };
            let sparsity = sparsity_index(&a_hat);
            let mut doc = KvDoc::new("metrics");
            doc.push("spectral_similarity", format!("{spectral}"));
            doc.push("pearson", format!("{pearson_r}"));
            doc.push("jaccard", format!("{jac}"));
            doc.push("pr_auc", pr.map(|v| format!("{v}")).unwrap_or_default());
            doc.push("sparsity_index", format!("{sparsity}"));
            let path = out.join("metrics.txt");
            doc.write_to(&path)?;
            println!(
                "spectral={spectral:.4} pearson={pearson_r:.4} jaccard={jac:.4} pr_auc={} sparsity={sparsity:.4}",
                pr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = load_config(&common)?;
            ensure_out(&common.out)?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        epitopo::Error::InvalidConfig(format!("bad sweep value {s:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sweep = epitopo::experiments::run_sweep(&cfg, axis, &values);
            let written = emit_sweep_outputs(&mut sweep, &common.out)?;
            for cell in &sweep.cells {
                match &cell.outcome {
                    Ok(result) => match &result.mean_report {
                        Some(mean) => println!(
                            "{}={}: pearson={:.4} jaccard={:.4}",
                            axis.as_str(),
                            cell.value,
                            mean.pearson,
                            mean.jaccard
                        ),
                        None => println!("{}={}: done (no ground truth)", axis.as_str(), cell.value),
                    },
                    Err(e) => println!("{}={}: failed: {e}", axis.as_str(), cell.value),
                }
            }
            println!("wrote {} files to {}", written.len(), common.out.display());
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
            ExitCode::FAILURE
        }
    }
}
