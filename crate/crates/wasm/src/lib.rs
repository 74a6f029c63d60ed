//! Browser bindings for the interactive demo: simulate a multi-pathogen
//! epidemic on a hidden mobility network, then train the inference model in
//! small chunks while the page draws the reconstruction converging.
//!
//! The page speaks the same `key=value` config dialect as the CLI.

use wasm_bindgen::prelude::*;

use epitopo::epidemic::EpidemicDataset;
use epitopo::experiments::ExperimentConfig;
use epitopo::inference::Trainer;

fn js_err(e: epitopo::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One demo session: a generated ground-truth network, its simulated
/// dataset, and a training session reconstructing the network.
#[wasm_bindgen]
pub struct Demo {
    dataset: EpidemicDataset,
    trainer: Trainer,
}

#[wasm_bindgen]
impl Demo {
    /// Build a session from `key=value` config text (one pair per line).
    #[wasm_bindgen(constructor)]
    pub fn new(config_text: &str) -> Result<Demo, JsValue> {
        Demo::try_new(config_text).map_err(js_err)
    }

    /// The default config text shown in the page's editor.
    pub fn default_config() -> String {
        let cfg = ExperimentConfig {
            n: 30,
            pathogens: 4,
            t_days: 120,
            epochs: 40_000,
            early_stop_tolerance: 0.0,
            ..ExperimentConfig::default()
        };
        cfg.render()
    }

    pub fn n(&self) -> usize {
        self.dataset.n
    }

    pub fn pathogens(&self) -> usize {
        self.dataset.k
    }

    pub fn t_days(&self) -> usize {
        self.dataset.t_days
    }

    /// Ground-truth mobility matrix, row-major n*n.
    pub fn truth_adjacency(&self) -> Vec<f64> {
        self.dataset
            .network_truth
            .as_ref()
            .map(|net| net.a.data.clone())
            .unwrap_or_default()
    }

    /// Daily new-case fractions of one pathogen, node-major n*T.
    pub fn series(&self, pathogen: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dataset.n * self.dataset.t_days);
        for node in 0..self.dataset.n {
            out.extend_from_slice(self.dataset.series(node, pathogen));
        }
        out
    }

    pub fn seed_nodes(&self) -> Vec<u32> {
        self.dataset
            .params_truth
            .iter()
            .map(|p| p.seed_node as u32)
            .collect()
    }

    /// Mean fraction still susceptible at the end, per pathogen.
    pub fn remaining_susceptible(&self) -> Vec<f64> {
        (0..self.dataset.k)
            .map(|l| self.dataset.remaining_susceptible(l))
            .collect()
    }

    /// Run up to `epochs` more training epochs; returns progress as JSON.
    pub fn train_epochs(&mut self, epochs: usize) -> Result<String, JsValue> {
        let ran = self.trainer.step(epochs).map_err(js_err)?;
        let loss = self
            .trainer
            .loss_history()
            .last()
            .copied()
            .unwrap_or(f64::NAN);
        Ok(format!(
            "{{\"ran\":{ran},\"epochs_run\":{},\"loss\":{loss},\"finished\":{}}}",
            self.trainer.epochs_run(),
            self.trainer.finished(),
        ))
    }

    /// Currently inferred mobility matrix, row-major n*n; zeros before the
    /// first training step.
    pub fn inferred_adjacency(&self) -> Result<Vec<f64>, JsValue> {
        Ok(self
            .trainer
            .current_a_hat()
            .map_err(js_err)?
            .map(|a| a.data)
            .unwrap_or_else(|| vec![0.0; self.dataset.n * self.dataset.n]))
    }

    /// Current evaluation metrics against the hidden truth, as JSON.
    pub fn metrics_json(&self) -> Result<String, JsValue> {
        let report = self.trainer.current_report().map_err(js_err)?;
        let Some(report) = report else {
            return Ok("null".into());
        };
        let pr = report
            .pr_auc
            .map(|v| v.to_string())
            .unwrap_or_else(|| "null".into());
        Ok(format!(
            "{{\"spectral\":{},\"pearson\":{},\"jaccard\":{},\"pr_auc\":{pr},\
             \"rmse_beta\":{},\"rmse_inv_gamma\":{},\"sparsity\":{},\"epochs\":{}}}",
            report.spectral_similarity,
            report.pearson,
            report.jaccard,
            report.rmse_beta,
            report.rmse_inv_gamma,
            report.sparsity_index,
            self.trainer.epochs_run(),
        ))
    }

    /// Full loss history for the chart.
    pub fn loss_history(&self) -> Vec<f64> {
        self.trainer.loss_history().to_vec()
    }
}

impl Demo {
    fn try_new(config_text: &str) -> epitopo::Result<Demo> {
        let config = ExperimentConfig::parse(config_text)?;
        config.validate()?;
        let dataset = config.build_dataset(0)?;
        let seeds = epitopo::experiments::ReplicateSeeds::derive(config.random_seed, 0);
        let mut train_config = epitopo::inference::TrainConfig {
            rng_seed: seeds.train,
            ..config_to_train(&config)
        };
        // The page polls metrics after every chunk anyway.
        train_config.metrics_every = usize::MAX;
        let trainer = Trainer::new(&dataset, &train_config)?;
        Ok(Demo { dataset, trainer })
    }
}

fn config_to_train(config: &ExperimentConfig) -> epitopo::inference::TrainConfig {
    epitopo::inference::TrainConfig {
        model: config.dl_model,
        embedding_dim: config.embedding_dim,
        channels: config.channels,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        rng_seed: 0,
        use_ground_truth_params: config.use_ground_truth_params,
        fixed_params: None,
        symmetrize: config.symmetrize,
        early_stop_window: config.early_stop_window,
        early_stop_tolerance: config.early_stop_tolerance,
        metrics_every: config.metrics_every,
    }
}
