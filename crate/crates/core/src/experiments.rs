//! Experiment orchestration: configuration, dataset generation, training
//! runs, sweeps, and plot-ready result files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::datasets::load_bundled;
use crate::epidemic::{sample_pathogens, simulate, EpidemicDataset};
use crate::error::{Error, Result};
use crate::graphgen::{assign_mobility, generate, load_edge_list, GraphModel, GraphSpec, MobilityNetwork};
use crate::inference::{train, EpochMetrics, ModelKind, ModelState, TrainConfig, TrainResult};
use crate::io::KvDoc;
use crate::linalg::Mat;
use crate::metrics::{pr_curve, MetricsReport};

/// Every tunable of a benchmark run; one key per line in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub graph: GraphModel,
    pub random_seed: u64,
    pub n: usize,
    pub pathogens: usize,
    pub dl_model: ModelKind,
    pub dense: f64,
    pub mobility_rate: f64,
    /// Path for graph=FILE; the prefix `bundled:` selects a shipped graph.
    pub graph_file: Option<String>,
    pub weighted: bool,
    pub rewire_prob: f64,
    pub t_days: usize,
    /// Zero means the default of ten index cases at the seed node.
    pub seed_fraction: f64,
    pub population: f64,
    pub use_exact_rates: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub embedding_dim: usize,
    pub channels: usize,
    pub use_ground_truth_params: bool,
    pub symmetrize: bool,
    pub early_stop_window: usize,
    pub early_stop_tolerance: f64,
    pub metrics_every: usize,
    pub replicates: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: half the benchmark node count, three replicates.
    fn default() -> Self {
        ExperimentConfig {
            graph: GraphModel::Rgg,
            random_seed: 1,
            n: 50,
            pathogens: 4,
            dl_model: ModelKind::Dtef,
            dense: 4.0,
            mobility_rate: 0.01,
            graph_file: None,
            weighted: false,
            rewire_prob: 0.1,
            t_days: 150,
            seed_fraction: 0.0,
            population: 1e6,
            use_exact_rates: false,
            epochs: 15_000,
            learning_rate: 1e-2,
            embedding_dim: 30,
            channels: 5,
            use_ground_truth_params: false,
            symmetrize: true,
            early_stop_window: 1000,
            early_stop_tolerance: 1e-4,
            metrics_every: 100,
            replicates: 3,
        }
    }
}

impl ExperimentConfig {
    /// Full-scale benchmark preset: twice the desk-scale node count and
    /// five replicates.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            n: 100,
            replicates: 5,
            ..ExperimentConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            Error::InvalidConfig(format!("key {key:?}: cannot parse {value:?}"))
        };
        match key {
            "graph" => self.graph = GraphModel::parse(value)?,
            "random_seed" => self.random_seed = value.parse().map_err(|_| bad(key, value))?,
            "n" => self.n = value.parse().map_err(|_| bad(key, value))?,
            "pathogens" => self.pathogens = value.parse().map_err(|_| bad(key, value))?,
            "dl_model" => self.dl_model = ModelKind::parse(value)?,
            "dense" => self.dense = value.parse().map_err(|_| bad(key, value))?,
            "mobility_rate" => self.mobility_rate = value.parse().map_err(|_| bad(key, value))?,
            "graph_file" => {
                self.graph_file = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "weighted" => self.weighted = value.parse().map_err(|_| bad(key, value))?,
            "rewire_prob" => self.rewire_prob = value.parse().map_err(|_| bad(key, value))?,
            "t_days" => self.t_days = value.parse().map_err(|_| bad(key, value))?,
            "seed_fraction" => self.seed_fraction = value.parse().map_err(|_| bad(key, value))?,
            "population" => self.population = value.parse().map_err(|_| bad(key, value))?,
            "use_exact_rates" => {
                self.use_exact_rates = value.parse().map_err(|_| bad(key, value))?
            }
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key, value))?,
            "embedding_dim" => self.embedding_dim = value.parse().map_err(|_| bad(key, value))?,
            "channels" => self.channels = value.parse().map_err(|_| bad(key, value))?,
            "use_ground_truth_params" => {
                self.use_ground_truth_params = value.parse().map_err(|_| bad(key, value))?
            }
            "symmetrize" => self.symmetrize = value.parse().map_err(|_| bad(key, value))?,
            "early_stop_window" => {
                self.early_stop_window = value.parse().map_err(|_| bad(key, value))?
            }
            "early_stop_tolerance" => {
                self.early_stop_tolerance = value.parse().map_err(|_| bad(key, value))?
            }
            "metrics_every" => self.metrics_every = value.parse().map_err(|_| bad(key, value))?,
            "replicates" => self.replicates = value.parse().map_err(|_| bad(key, value))?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parse a config file: defaults plus `key=value` lines, `#` comments.
    /// Unknown keys are hard errors.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(ExperimentConfig::default(), text)
    }

    /// Parse on top of an explicit base preset.
    pub fn parse_with_base(base: ExperimentConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseError {
                line: idx + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Render as a config file; parsing the output reproduces self.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("graph", self.graph.as_str().to_string());
        kv("random_seed", self.random_seed.to_string());
        kv("n", self.n.to_string());
        kv("pathogens", self.pathogens.to_string());
        kv("dl_model", self.dl_model.as_str().to_string());
        kv("dense", format!("{}", self.dense));
        kv("mobility_rate", format!("{}", self.mobility_rate));
        kv("graph_file", self.graph_file.clone().unwrap_or_default());
        kv("weighted", self.weighted.to_string());
        kv("rewire_prob", format!("{}", self.rewire_prob));
        kv("t_days", self.t_days.to_string());
        kv("seed_fraction", format!("{}", self.seed_fraction));
        kv("population", format!("{}", self.population));
        kv("use_exact_rates", self.use_exact_rates.to_string());
        kv("epochs", self.epochs.to_string());
        kv("learning_rate", format!("{}", self.learning_rate));
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("channels", self.channels.to_string());
        kv("use_ground_truth_params", self.use_ground_truth_params.to_string());
        kv("symmetrize", self.symmetrize.to_string());
        kv("early_stop_window", self.early_stop_window.to_string());
        kv("early_stop_tolerance", format!("{}", self.early_stop_tolerance));
        kv("metrics_every", self.metrics_every.to_string());
        kv("replicates", self.replicates.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph == GraphModel::File {
            if self.graph_file.is_none() {
                return Err(Error::InvalidConfig("graph=FILE needs graph_file".into()));
            }
        } else if self.n < 2 || self.dense <= 0.0 || self.dense >= self.n as f64 {
            return Err(Error::InvalidConfig(format!(
                "n = {} and dense = {} are inconsistent",
                self.n, self.dense
            )));
        }
        if self.pathogens == 0 || self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "pathogens and replicates must be positive".into(),
            ));
        }
        if self.t_days < 2 {
            return Err(Error::InvalidConfig("t_days must be at least 2".into()));
        }
        if self.population <= 0.0 {
            return Err(Error::InvalidConfig("population must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.seed_fraction) {
            return Err(Error::InvalidConfig(
                "seed_fraction must be in [0, 1)".into(),
            ));
        }
        self.train_config(0).validate()
    }

    fn train_config(&self, train_seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.dl_model,
            embedding_dim: self.embedding_dim,
            channels: self.channels,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            rng_seed: train_seed,
            use_ground_truth_params: self.use_ground_truth_params,
            fixed_params: None,
            symmetrize: self.symmetrize,
            early_stop_window: self.early_stop_window,
            early_stop_tolerance: self.early_stop_tolerance,
            metrics_every: self.metrics_every,
        }
    }

    /// Build the ground-truth network for one replicate.
    pub fn build_network(&self, graph_seed: u64) -> Result<MobilityNetwork> {
        let mut net = match self.graph {
            GraphModel::File => {
                let file = self.graph_file.as_ref().unwrap();
                let loaded = match file.strip_prefix("bundled:") {
                    Some(name) => load_bundled(name)?,
                    None => load_edge_list(file.as_str(), self.weighted)?,
                };
                if loaded.binary {
                    assign_mobility(&loaded, self.mobility_rate)?
                } else {
                    loaded
                }
            }
            model => {
                let spec = GraphSpec {
                    model,
                    n: self.n,
                    avg_degree: self.dense,
                    rewire_prob: self.rewire_prob,
                    rng_seed: graph_seed,
                    file_path: None,
                    weighted: false,
                };
                assign_mobility(&generate(&spec)?, self.mobility_rate)?
            }
        };
        for p in net.p.iter_mut() {
            *p = self.population;
        }
        Ok(net)
    }

    /// Generate one replicate's dataset.
    pub fn build_dataset(&self, replicate: usize) -> Result<EpidemicDataset> {
        let seeds = ReplicateSeeds::derive(self.random_seed, replicate);
        let net = self.build_network(seeds.graph)?;
        let mut pathogens = sample_pathogens(&net, self.pathogens, seeds.pathogen);
        if self.seed_fraction > 0.0 {
            for p in pathogens.iter_mut() {
                p.seed_fraction = self.seed_fraction;
            }
        }
        simulate(&net, &pathogens, self.t_days, !self.use_exact_rates, false)
    }
}

/// Deterministic per-replicate seed derivation from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub graph: u64,
    pub pathogen: u64,
    pub train: u64,
}

impl ReplicateSeeds {
    pub fn derive(random_seed: u64, replicate: usize) -> Self {
        let base = random_seed.wrapping_add(10_000u64.wrapping_mul(replicate as u64));
        ReplicateSeeds {
            graph: base,
            pathogen: base.wrapping_add(104_729),
            train: base.wrapping_add(1_299_709),
        }
    }
}

/// Everything observed about one training run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub replicate: usize,
    pub seeds: ReplicateSeeds,
    /// Absent when the dataset carries no ground truth to compare against.
    pub final_report: Option<MetricsReport>,
    pub loss_history: Vec<f64>,
    pub metric_history: Vec<EpochMetrics>,
    pub a_hat: Mat,
    pub a_true: Option<Mat>,
    pub labels: Vec<String>,
    pub beta_mean: Vec<f64>,
    pub gamma_mean: Vec<f64>,
    pub remaining_susceptible: Vec<f64>,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    pub model_state: ModelState,
    pub artifacts: Vec<PathBuf>,
}

/// One experiment: all replicates plus their metric means.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    pub mean_report: Option<MetricsReport>,
}

fn mean_reports(reports: &[&MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let pr: Vec<f64> = reports.iter().filter_map(|r| r.pr_auc).collect();
    Some(MetricsReport {
        spectral_similarity: mean(|r| r.spectral_similarity),
        pearson: mean(|r| r.pearson),
        jaccard: mean(|r| r.jaccard),
        pr_auc: (!pr.is_empty()).then(|| pr.iter().sum::<f64>() / pr.len() as f64),
        rmse_beta: mean(|r| r.rmse_beta),
        rmse_inv_gamma: mean(|r| r.rmse_inv_gamma),
        sparsity_index: mean(|r| r.sparsity_index),
    })
}

/// Run one replicate end to end: generate, simulate, train, evaluate.
pub fn run_single(config: &ExperimentConfig, replicate: usize, tag: &str) -> Result<RunRecord> {
    config.validate()?;
    let dataset = config.build_dataset(replicate)?;
    let run_id = format!(
        "{tag}{}_{}_n{}_k{}_rep{replicate}",
        config.graph.as_str().to_lowercase(),
        config.dl_model.as_str().to_lowercase(),
        dataset.n,
        config.pathogens,
    );
    record_run(config, &dataset, replicate, run_id)
}

/// Train on a previously saved dataset; replicate 0 seed conventions apply.
pub fn run_on_dataset(config: &ExperimentConfig, dataset: &EpidemicDataset) -> Result<RunRecord> {
    let run_id = format!(
        "dataset_{}_n{}_k{}",
        config.dl_model.as_str().to_lowercase(),
        dataset.n,
        dataset.k,
    );
    record_run(config, dataset, 0, run_id)
}

fn record_run(
    config: &ExperimentConfig,
    dataset: &EpidemicDataset,
    replicate: usize,
    run_id: String,
) -> Result<RunRecord> {
    let started = Instant::now();
    let seeds = ReplicateSeeds::derive(config.random_seed, replicate);
    let train_config = config.train_config(seeds.train);
    let result: TrainResult = train(dataset, &train_config)?;
    let final_report = result.metric_history.last().map(|m| m.report.clone());
    let (a_true, labels) = match &dataset.network_truth {
        Some(net) => (Some(net.a.clone()), net.labels.clone()),
        None => (None, (0..dataset.n).map(|i| i.to_string()).collect()),
    };
    let remaining = (0..dataset.k)
        .map(|l| dataset.remaining_susceptible(l))
        .collect();
    Ok(RunRecord {
        run_id,
        config: config.clone(),
        replicate,
        seeds,
        final_report,
        loss_history: result.loss_history,
        metric_history: result.metric_history,
        a_hat: result.a_hat,
        a_true,
        labels,
        beta_mean: result.beta_mean,
        gamma_mean: result.gamma_mean,
        remaining_susceptible: remaining,
        epochs_run: result.epochs_run,
        wall_seconds: started.elapsed().as_secs_f64(),
        model_state: result.state,
        artifacts: Vec::new(),
    })
}

/// Run all replicates (in parallel) and average their metrics.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_tagged(config, "")
}

pub fn run_experiment_tagged(config: &ExperimentConfig, tag: &str) -> Result<ExperimentResult> {
    config.validate()?;
    let records: Vec<RunRecord> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_single(config, r, tag))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<&MetricsReport> = records.iter().filter_map(|r| r.final_report.as_ref()).collect();
    let mean_report = mean_reports(&reports);
    Ok(ExperimentResult {
        records,
        mean_report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Pathogens,
    MobilityRate,
    Density,
    Nodes,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Pathogens => "pathogens",
            SweepAxis::MobilityRate => "mobility_rate",
            SweepAxis::Density => "density",
            SweepAxis::Nodes => "nodes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pathogens" => Ok(SweepAxis::Pathogens),
            "mobility_rate" => Ok(SweepAxis::MobilityRate),
            "density" => Ok(SweepAxis::Density),
            "nodes" => Ok(SweepAxis::Nodes),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn apply(&self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Pathogens => config.pathogens = value as usize,
            SweepAxis::MobilityRate => config.mobility_rate = value,
            SweepAxis::Density => config.dense = value,
            SweepAxis::Nodes => config.n = value as usize,
        }
        config.validate()
    }
}

/// One sweep cell: the axis value and either its result or the failure.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: f64,
    pub outcome: std::result::Result<ExperimentResult, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

/// Run the experiment at every axis value. A failing cell is recorded and
/// the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> SweepResult {
    let cells = values
        .iter()
        .map(|&value| {
            let mut config = base.clone();
            let tag = format!("{}{value}_", axis.as_str());
            let outcome = axis
                .apply(&mut config, value)
                .and_then(|()| run_experiment_tagged(&config, &tag))
                .map_err(|e| e.to_string());
            SweepCell { value, outcome }
        })
        .collect();
    SweepResult { axis, cells }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

const RESULTS_HEADER: &str = "run_id,graph,dl_model,n,pathogens,dense,mobility_rate,t_days,\
replicate,graph_seed,pathogen_seed,train_seed,epochs_run,wall_seconds,final_loss,\
spectral_similarity,pearson,jaccard,pr_auc,rmse_beta,rmse_inv_gamma,sparsity_index,\
mean_remaining_susceptible";

fn results_row(r: &RunRecord) -> String {
    let remaining_mean = if r.remaining_susceptible.is_empty() {
        0.0
    } else {
        r.remaining_susceptible.iter().sum::<f64>() / r.remaining_susceptible.len() as f64
    };
    let report = |f: fn(&MetricsReport) -> f64| {
        r.final_report
            .as_ref()
            .map(|m| format!("{}", f(m)))
            .unwrap_or_default()
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.config.graph.as_str(),
        r.config.dl_model.as_str(),
        r.a_hat.rows,
        r.config.pathogens,
        r.config.dense,
        r.config.mobility_rate,
        r.config.t_days,
        r.replicate,
        r.seeds.graph,
        r.seeds.pathogen,
        r.seeds.train,
        r.epochs_run,
        r.wall_seconds,
        r.loss_history.last().copied().unwrap_or(f64::NAN),
        report(|m| m.spectral_similarity),
        report(|m| m.pearson),
        report(|m| m.jaccard),
        fmt_opt(r.final_report.as_ref().and_then(|m| m.pr_auc)),
        report(|m| m.rmse_beta),
        report(|m| m.rmse_inv_gamma),
        report(|m| m.sparsity_index),
        remaining_mean,
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Persist everything about a set of runs: a results CSV, per-run epoch
/// traces, inferred adjacency dumps, PR-curve points, the reproducible
/// config snapshot, and a machine-readable summary of the means.
pub fn emit_outputs(records: &mut [RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();

    let mut results_csv = String::from(RESULTS_HEADER);
    results_csv.push('\n');
    for record in records.iter() {
        results_csv.push_str(&results_row(record));
        results_csv.push('\n');
    }
    let results_path = out_dir.join("results.csv");
    write_text(&results_path, &results_csv)?;
    written.push(results_path);

    for record in records.iter_mut() {
        let mut artifacts = Vec::new();

        let trace_path = out_dir.join(format!("{}_trace.csv", record.run_id));
        let mut trace = String::from(
            "epoch,loss,spectral_similarity,pearson,jaccard,pr_auc,rmse_beta,rmse_inv_gamma,sparsity_index\n",
        );
        for m in &record.metric_history {
            trace.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m.epoch,
                m.loss,
                m.report.spectral_similarity,
                m.report.pearson,
                m.report.jaccard,
                fmt_opt(m.report.pr_auc),
                m.report.rmse_beta,
                m.report.rmse_inv_gamma,
                m.report.sparsity_index,
            ));
        }
        write_text(&trace_path, &trace)?;
        artifacts.push(trace_path);

        let adj_path = out_dir.join(format!("{}_a_hat.txt", record.run_id));
        crate::io::save_adjacency(&record.a_hat, &record.labels, &adj_path)?;
        artifacts.push(adj_path);

        let cfg_path = out_dir.join(format!("{}_config.txt", record.run_id));
        let mut snapshot = record.config.render();
        snapshot.push_str(&format!("# replicate={}\n", record.replicate));
        write_text(&cfg_path, &snapshot)?;
        artifacts.push(cfg_path);

        let ckpt_path = out_dir.join(format!("{}_checkpoint.txt", record.run_id));
        crate::io::save_checkpoint(&record.model_state, &ckpt_path)?;
        artifacts.push(ckpt_path);

        if let Some(a_true) = &record.a_true {
            let mut binary = a_true.clone();
            let weighted = crate::metrics::is_weighted_truth(a_true);
            if !weighted {
                for v in binary.data.iter_mut() {
                    *v = (*v != 0.0) as u8 as f64;
                }
                let pr_path = out_dir.join(format!("{}_pr_curve.csv", record.run_id));
                let mut text = String::from("recall,precision\n");
                for (recall, precision) in pr_curve(&binary, &record.a_hat)? {
                    text.push_str(&format!("{recall},{precision}\n"));
                }
                write_text(&pr_path, &text)?;
                artifacts.push(pr_path);
            }
        }

        record.artifacts = artifacts.clone();
        written.extend(artifacts);
    }

    let mut summary = KvDoc::new("summary");
    summary.push("runs", records.len().to_string());
    let reports: Vec<&MetricsReport> = records
        .iter()
        .filter_map(|r| r.final_report.as_ref())
        .collect();
    if let Some(mean) = mean_reports(&reports) {
        summary.push("mean.spectral_similarity", format!("{}", mean.spectral_similarity));
        summary.push("mean.pearson", format!("{}", mean.pearson));
        summary.push("mean.jaccard", format!("{}", mean.jaccard));
        summary.push("mean.pr_auc", fmt_opt(mean.pr_auc));
        summary.push("mean.rmse_beta", format!("{}", mean.rmse_beta));
        summary.push("mean.rmse_inv_gamma", format!("{}", mean.rmse_inv_gamma));
        summary.push("mean.sparsity_index", format!("{}", mean.sparsity_index));
    }
    for record in records.iter() {
        if let Some(report) = &record.final_report {
            summary.push(
                format!("run.{}.pearson", record.run_id),
                format!("{}", report.pearson),
            );
        }
    }
    let summary_path = out_dir.join("summary.txt");
    summary.write_to(&summary_path)?;
    written.push(summary_path);

    Ok(written)
}

/// Persist a sweep: everything per cell plus an aggregate table.
pub fn emit_sweep_outputs(sweep: &mut SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    let mut table = String::from(
        "axis,value,ok_replicates,spectral_similarity,pearson,jaccard,pr_auc,rmse_beta,rmse_inv_gamma,sparsity_index,error\n",
    );
    for cell in sweep.cells.iter_mut() {
        match &mut cell.outcome {
            Ok(result) => {
                let mean = result.mean_report.clone().unwrap_or(MetricsReport {
                    spectral_similarity: f64::NAN,
                    pearson: f64::NAN,
                    jaccard: f64::NAN,
                    pr_auc: None,
                    rmse_beta: f64::NAN,
                    rmse_inv_gamma: f64::NAN,
                    sparsity_index: f64::NAN,
                });
                table.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},\n",
                    sweep.axis.as_str(),
                    cell.value,
                    result.records.len(),
                    mean.spectral_similarity,
                    mean.pearson,
                    mean.jaccard,
                    fmt_opt(mean.pr_auc),
                    mean.rmse_beta,
                    mean.rmse_inv_gamma,
                    mean.sparsity_index,
                ));
                written.extend(emit_outputs(&mut result.records, out_dir)?);
            }
            Err(message) => {
                table.push_str(&format!(
                    "{},{},0,,,,,,,,{}\n",
                    sweep.axis.as_str(),
                    cell.value,
                    message.replace([',', '\n'], ";"),
                ));
            }
        }
    }
    let path = out_dir.join(format!("sweep_{}.csv", sweep.axis.as_str()));
    write_text(&path, &table)?;
    written.push(path);
    Ok(written)
}
