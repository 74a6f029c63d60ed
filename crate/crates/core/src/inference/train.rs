//! Training loop joining an encoder, the fast decoder and the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, AdamConfig, OptimizerState, Tape, Var};
use crate::epidemic::{mobility_from_infection, EpidemicDataset, InfectionMatrix};
use crate::error::{Error, Result};
use crate::graphgen::DEFAULT_POPULATION;
use crate::linalg::Mat;
use crate::metrics::{
    is_weighted_truth, jaccard, pearson, pr_auc, rmse_params, sparsity_index,
    spectral_similarity, MetricsReport,
};

use super::decoder::{efb_forward, series_time_major};
use super::encoder::{dti_forward, fti_forward, DtiParams, FtiParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Deep topology encoder with the fast decoder.
    Dtef,
    /// Direct entry-logit encoder with the fast decoder.
    Ftef,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Dtef => "DTEF",
            ModelKind::Ftef => "FTEF",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s.to_ascii_uppercase().as_str() {
            "DTEF" => Ok(ModelKind::Dtef),
            "FTEF" => Ok(ModelKind::Ftef),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

/// Everything a training run needs beyond the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Embedding dimension per channel.
    pub embedding_dim: usize,
    /// Feature channels.
    pub channels: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Freeze the epidemic parameters at their true values.
    pub use_ground_truth_params: bool,
    /// Override for the frozen (beta, gamma) per pathogen.
    pub fixed_params: Option<Vec<(f64, f64)>>,
    /// Blend the inferred matrix with its transpose.
    pub symmetrize: bool,
    /// Patience: stop when the best loss has not improved for this many
    /// epochs. The raw loss oscillates under Adam near convergence, so the
    /// rule tracks the best value seen rather than a trailing difference.
    pub early_stop_window: usize,
    /// Relative improvement of the best loss that counts as progress;
    /// non-positive disables early stopping.
    pub early_stop_tolerance: f64,
    /// Evaluate metrics against ground truth every this many epochs.
    pub metrics_every: usize,
}

impl TrainConfig {
    pub fn new(model: ModelKind, rng_seed: u64) -> Self {
        TrainConfig {
            model,
            embedding_dim: 30,
            channels: 5,
            learning_rate: 1e-2,
            epochs: 15_000,
            rng_seed,
            use_ground_truth_params: false,
            fixed_params: None,
            symmetrize: true,
            early_stop_window: 1000,
            early_stop_tolerance: 1e-4,
            metrics_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.channels == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "embedding_dim, channels and epochs must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.metrics_every == 0 {
            return Err(Error::InvalidConfig("metrics_every must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable epidemic parameters, reparameterized so beta stays positive and
/// gamma stays inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EpiParams {
    /// k x n; beta = exp(raw).
    pub beta_raw: Mat,
    /// k x n; gamma = sigmoid(raw).
    pub gamma_raw: Mat,
}

impl EpiParams {
    pub fn init(k: usize, n: usize) -> Self {
        // Start near the plausible epidemiological regime: beta 1, gamma 1/7.
        let gamma0: f64 = 1.0 / 7.0;
        let logit = (gamma0 / (1.0 - gamma0)).ln();
        EpiParams {
            beta_raw: Mat::zeros(k, n),
            gamma_raw: Mat::filled(k, n, logit),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    Dti(DtiParams),
    Fti(FtiParams),
}

/// All learnable quantities plus optimizer moments; the checkpointable unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: ModelKind,
    pub n: usize,
    pub k: usize,
    pub t_days: usize,
    pub embedding_dim: usize,
    pub channels: usize,
    pub encoder: EncoderParams,
    pub epi: Option<EpiParams>,
    pub moments: Vec<OptimizerState>,
}

impl ModelState {
    pub fn init(dataset: &EpidemicDataset, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let (n, k, t_days) = (dataset.n, dataset.k, dataset.t_days);
        let encoder = match config.model {
            ModelKind::Dtef => EncoderParams::Dti(DtiParams::init(
                n,
                t_days,
                config.embedding_dim,
                config.channels,
                &mut rng,
            )),
            ModelKind::Ftef => EncoderParams::Fti(FtiParams::init(n, &mut rng)),
        };
        let epi = (!config.use_ground_truth_params).then(|| EpiParams::init(k, n));
        let mut state = ModelState {
            model: config.model,
            n,
            k,
            t_days,
            embedding_dim: config.embedding_dim,
            channels: config.channels,
            encoder,
            epi,
            moments: Vec::new(),
        };
        state.moments = state
            .param_refs()
            .iter()
            .map(|(_, m)| OptimizerState::new(m.data.len()))
            .collect();
        state
    }

    /// Named parameter arrays in a fixed order; the optimizer moments align
    /// with this order.
    pub fn param_refs(&self) -> Vec<(&'static str, &Mat)> {
        let mut out: Vec<(&'static str, &Mat)> = match &self.encoder {
            EncoderParams::Dti(p) => vec![
                ("w_u", &p.w_u),
                ("b_u", &p.b_u),
                ("w_v", &p.w_v),
                ("b_v", &p.b_v),
                ("w_f", &p.w_f),
                ("z_b", &p.z_b),
                ("zeta", &p.zeta),
            ],
            EncoderParams::Fti(p) => vec![("w_z", &p.w_z)],
        };
        if let Some(epi) = &self.epi {
            out.push(("beta_raw", &epi.beta_raw));
            out.push(("gamma_raw", &epi.gamma_raw));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = match &mut self.encoder {
            EncoderParams::Dti(p) => vec![
                &mut p.w_u,
                &mut p.b_u,
                &mut p.w_v,
                &mut p.b_v,
                &mut p.w_f,
                &mut p.z_b,
                &mut p.zeta,
            ],
            EncoderParams::Fti(p) => vec![&mut p.w_z],
        };
        if let Some(epi) = &mut self.epi {
            out.push(&mut epi.beta_raw);
            out.push(&mut epi.gamma_raw);
        }
        out
    }
}

/// Loss: global L2 prediction error plus per-pathogen node variances of the
/// epidemic parameters, normalized by the time span.
pub fn loss(
    tape: &mut Tape,
    preds: &[Var],
    series: &[Var],
    beta: Var,
    gamma: Var,
    t_days: usize,
) -> Result<Var> {
    let mut total_sq: Option<Var> = None;
    for (&pred, &x) in preds.iter().zip(series) {
        let r = tape.sub(pred, x)?;
        let sq = tape.mul(r, r)?;
        let s = tape.sum_all(sq);
        total_sq = Some(match total_sq {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total_sq = total_sq.ok_or_else(|| Error::InvalidSpec("no pathogen series".into()))?;
    let norm = tape.sqrt(total_sq)?;

    let var_beta = tape.variance_axis(beta, 1)?;
    let var_beta = tape.sum_all(var_beta);
    let var_gamma = tape.variance_axis(gamma, 1)?;
    let var_gamma = tape.sum_all(var_gamma);

    let partial = tape.add(norm, var_gamma)?;
    let full = tape.add(partial, var_beta)?;
    let inv_t = tape.scalar_constant(1.0 / t_days as f64);
    tape.mul(full, inv_t)
}

/// Metrics snapshot at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub report: MetricsReport,
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub z_hat: Mat,
    pub a_hat: Mat,
    pub beta_hat: Mat,
    pub gamma_hat: Mat,
    /// Node-mean transmission rate per pathogen.
    pub beta_mean: Vec<f64>,
    /// Node-mean recovery rate per pathogen.
    pub gamma_mean: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub metric_history: Vec<EpochMetrics>,
    pub epochs_run: usize,
    pub state: ModelState,
}

struct EpochForward {
    z_hat: Var,
    beta: Var,
    gamma: Var,
    leaves: Vec<Var>,
    loss: Var,
}

fn forward_epoch(
    tape: &mut Tape,
    state: &ModelState,
    config: &TrainConfig,
    dti_input: Option<Var>,
    series: &[Var],
    frozen: Option<(&Mat, &Mat)>,
) -> Result<EpochForward> {
    let mut leaves = Vec::new();
    let z_hat = match &state.encoder {
        EncoderParams::Dti(p) => {
            let vars = p.leaves(tape);
            leaves.extend([
                vars.w_u, vars.b_u, vars.w_v, vars.b_v, vars.w_f, vars.z_b, vars.zeta,
            ]);
            dti_forward(
                tape,
                dti_input.expect("DTI needs the stacked series"),
                &vars,
                state.n,
                state.k,
                state.embedding_dim,
                state.channels,
                config.symmetrize,
            )?
        }
        EncoderParams::Fti(p) => {
            let w_z = tape.leaf(&p.w_z);
            leaves.push(w_z);
            fti_forward(tape, w_z)?
        }
    };
    let (beta, gamma) = match (&state.epi, frozen) {
        (Some(epi), _) => {
            let b_raw = tape.leaf(&epi.beta_raw);
            let g_raw = tape.leaf(&epi.gamma_raw);
            leaves.push(b_raw);
            leaves.push(g_raw);
            (tape.exp(b_raw), tape.sigmoid(g_raw))
        }
        (None, Some((beta, gamma))) => (tape.constant(beta), tape.constant(gamma)),
        (None, None) => {
            return Err(Error::InvalidConfig(
                "ground-truth mode without frozen parameters".into(),
            ))
        }
    };
    let decoded = efb_forward(tape, series, z_hat, beta, gamma)?;
    let loss_var = loss(tape, &decoded.preds, series, beta, gamma, state.t_days)?;
    Ok(EpochForward {
        z_hat,
        beta,
        gamma,
        leaves,
        loss: loss_var,
    })
}

/// Recover the mobility matrix from an inferred infection matrix: drop the
/// forced unit diagonal, clamp stray negatives, invert with the known
/// populations. Rows without mass stay zero.
pub fn mobility_estimate(z_hat: &Mat, populations: &[f64]) -> Result<Mat> {
    let n = z_hat.rows;
    let mut z = z_hat.clone();
    for i in 0..n {
        z[(i, i)] = 1.0;
        for j in 0..n {
            if i != j && z[(i, j)] < 0.0 {
                z[(i, j)] = 0.0;
            }
        }
    }
    mobility_from_infection(&InfectionMatrix { z }, populations)
}

fn frozen_params(dataset: &EpidemicDataset, config: &TrainConfig) -> Result<(Mat, Mat)> {
    let (k, n) = (dataset.k, dataset.n);
    let mut beta = Mat::zeros(k, n);
    let mut gamma = Mat::zeros(k, n);
    let pairs: Vec<(f64, f64)> = match &config.fixed_params {
        Some(pairs) => {
            if pairs.len() != k {
                return Err(Error::InvalidConfig(format!(
                    "fixed_params has {} entries for {k} pathogens",
                    pairs.len()
                )));
            }
            pairs.clone()
        }
        None => dataset
            .params_truth
            .iter()
            .map(|p| (p.beta, p.gamma))
            .collect(),
    };
    for (l, (b, g)) in pairs.iter().enumerate() {
        for j in 0..n {
            beta[(l, j)] = *b;
            gamma[(l, j)] = *g;
        }
    }
    Ok((beta, gamma))
}

/// An in-progress training session. Epochs run in chunks via
/// [`Trainer::step`]; chunk boundaries never change the arithmetic, so any
/// stepping schedule reproduces [`train`] exactly.
pub struct Trainer {
    config: TrainConfig,
    state: ModelState,
    adam: AdamConfig,
    frozen: Option<(Mat, Mat)>,
    series_mats: Vec<Mat>,
    dti_input_mat: Option<Mat>,
    populations: Vec<f64>,
    truth: Option<(Mat, Mat, bool)>,
    params_truth: Vec<crate::epidemic::PathogenParams>,
    loss_history: Vec<f64>,
    metric_history: Vec<EpochMetrics>,
    epochs_run: usize,
    best_loss: f64,
    best_epoch: usize,
    stopped: bool,
    last_outputs: Option<(Mat, Mat, Mat)>,
}

impl Trainer {
    pub fn new(dataset: &EpidemicDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let state = ModelState::init(dataset, config);
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        let frozen = config
            .use_ground_truth_params
            .then(|| frozen_params(dataset, config))
            .transpose()?;
        let series_mats: Vec<Mat> = (0..dataset.k)
            .map(|l| series_time_major(dataset, l))
            .collect();
        let dti_input_mat = match config.model {
            ModelKind::Dtef => {
                let mut m = Mat::zeros(dataset.k * dataset.n, dataset.t_days);
                for l in 0..dataset.k {
                    for i in 0..dataset.n {
                        m.row_mut(l * dataset.n + i)
                            .copy_from_slice(dataset.series(i, l));
                    }
                }
                Some(m)
            }
            ModelKind::Ftef => None,
        };
        let populations: Vec<f64> = dataset
            .network_truth
            .as_ref()
            .map(|net| net.p.clone())
            .unwrap_or_else(|| vec![DEFAULT_POPULATION; dataset.n]);
        let truth = dataset.network_truth.as_ref().map(|net| {
            let weighted = is_weighted_truth(&net.a);
            let mut binary = net.a.clone();
            for v in binary.data.iter_mut() {
                *v = (*v != 0.0) as u8 as f64;
            }
            (net.a.clone(), binary, weighted)
        });
        Ok(Trainer {
            config: config.clone(),
            state,
            adam,
            frozen,
            series_mats,
            dti_input_mat,
            populations,
            truth,
            params_truth: dataset.params_truth.clone(),
            loss_history: Vec::with_capacity(config.epochs),
            metric_history: Vec::new(),
            epochs_run: 0,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stopped: false,
            last_outputs: None,
        })
    }

    /// True once the epoch budget is spent or early stopping fired.
    pub fn finished(&self) -> bool {
        self.stopped || self.epochs_run >= self.config.epochs
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn metric_history(&self) -> &[EpochMetrics] {
        &self.metric_history
    }

    fn evaluate(&self, z_hat: &Mat, beta: &Mat, gamma: &Mat) -> Result<Option<MetricsReport>> {
        let Some((a_true, a_binary, weighted)) = &self.truth else {
            return Ok(None);
        };
        let a_hat = mobility_estimate(z_hat, &self.populations)?;
        let (rmse_beta, rmse_inv_gamma) = rmse_params(beta, gamma, &self.params_truth)?;
        Ok(Some(MetricsReport {
            spectral_similarity: spectral_similarity(a_true, &a_hat)?,
            pearson: pearson(a_true, &a_hat)?,
            jaccard: jaccard(a_true, &a_hat)?,
            pr_auc: if *weighted {
                None
            } else {
                Some(pr_auc(a_binary, &a_hat)?)
            },
            rmse_beta,
            rmse_inv_gamma,
            sparsity_index: sparsity_index(&a_hat),
        }))
    }

    /// Run up to `max_epochs` further epochs; returns how many actually ran.
    pub fn step(&mut self, max_epochs: usize) -> Result<usize> {
        let mut ran = 0;
        while ran < max_epochs && !self.finished() {
            let epoch = self.epochs_run;
            let mut tape = Tape::new();
            let dti_input = self.dti_input_mat.as_ref().map(|m| tape.constant(m));
            let series: Vec<Var> = self.series_mats.iter().map(|m| tape.constant(m)).collect();
            let fw = forward_epoch(
                &mut tape,
                &self.state,
                &self.config,
                dti_input,
                &series,
                self.frozen.as_ref().map(|(b, g)| (b, g)),
            )?;
            let loss_value = tape.scalar_value(fw.loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            self.loss_history.push(loss_value);
            self.epochs_run = epoch + 1;
            ran += 1;

            let z_hat_mat = tape.value_mat(fw.z_hat);
            let beta_mat = tape.value_mat(fw.beta);
            let gamma_mat = tape.value_mat(fw.gamma);

            if epoch.is_multiple_of(self.config.metrics_every) || epoch + 1 == self.config.epochs {
                if let Some(report) = self.evaluate(&z_hat_mat, &beta_mat, &gamma_mat)? {
                    self.metric_history.push(EpochMetrics {
                        epoch,
                        loss: loss_value,
                        report,
                    });
                }
            }

            tape.backward(fw.loss)?;
            let grads: Vec<Vec<f64>> =
                fw.leaves.iter().map(|&v| tape.grad(v).to_vec()).collect();
            drop(tape);
            let mut moments = std::mem::take(&mut self.state.moments);
            let mut params = self.state.params_mut();
            debug_assert_eq!(params.len(), grads.len());
            for ((param, grad), m) in params.iter_mut().zip(&grads).zip(&mut moments) {
                adam_step(&self.adam, &mut param.data, grad, m);
            }
            drop(params);
            self.state.moments = moments;

            self.last_outputs = Some((z_hat_mat, beta_mat, gamma_mat));

            if self.config.early_stop_tolerance > 0.0 {
                if loss_value < self.best_loss * (1.0 - self.config.early_stop_tolerance) {
                    self.best_loss = loss_value;
                    self.best_epoch = epoch;
                } else if epoch - self.best_epoch >= self.config.early_stop_window {
                    self.stopped = true;
                }
            }
        }
        Ok(ran)
    }

    /// The inferred infection matrix as of the last completed epoch.
    pub fn current_z_hat(&self) -> Option<&Mat> {
        self.last_outputs.as_ref().map(|(z, _, _)| z)
    }

    /// The inferred mobility matrix as of the last completed epoch.
    pub fn current_a_hat(&self) -> Result<Option<Mat>> {
        match &self.last_outputs {
            Some((z, _, _)) => Ok(Some(mobility_estimate(z, &self.populations)?)),
            None => Ok(None),
        }
    }

    /// Metrics for the current state, evaluated on demand.
    pub fn current_report(&self) -> Result<Option<MetricsReport>> {
        match &self.last_outputs {
            Some((z, b, g)) => self.evaluate(z, b, g),
            None => Ok(None),
        }
    }

    /// Finalize: ensure the last epoch carries a metrics snapshot, then
    /// assemble the result.
    pub fn finish(mut self) -> Result<TrainResult> {
        let (z_hat, beta_hat, gamma_hat) = self.last_outputs.take().ok_or_else(|| {
            Error::InvalidConfig("training ran no epochs".into())
        })?;
        let last_epoch = self.epochs_run - 1;
        let needs_final = self
            .metric_history
            .last()
            .map(|m| m.epoch != last_epoch)
            .unwrap_or(true);
        if needs_final {
            if let Some(report) = self.evaluate(&z_hat, &beta_hat, &gamma_hat)? {
                self.metric_history.push(EpochMetrics {
                    epoch: last_epoch,
                    loss: *self.loss_history.last().unwrap(),
                    report,
                });
            }
        }
        let a_hat = mobility_estimate(&z_hat, &self.populations)?;
        let node_mean = |m: &Mat| -> Vec<f64> {
            (0..m.rows)
                .map(|l| m.row(l).iter().sum::<f64>() / m.cols as f64)
                .collect()
        };
        Ok(TrainResult {
            beta_mean: node_mean(&beta_hat),
            gamma_mean: node_mean(&gamma_hat),
            z_hat,
            a_hat,
            beta_hat,
            gamma_hat,
            loss_history: self.loss_history,
            metric_history: self.metric_history,
            epochs_run: self.epochs_run,
            state: self.state,
        })
    }
}

/// Train the configured model on a dataset. Ground-truth metrics are traced
/// whenever the dataset carries its generating network.
pub fn train(dataset: &EpidemicDataset, config: &TrainConfig) -> Result<TrainResult> {
    let mut trainer = Trainer::new(dataset, config)?;
    while !trainer.finished() {
        trainer.step(usize::MAX)?;
    }
    trainer.finish()
}
