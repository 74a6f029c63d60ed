//! Deterministic multi-pathogen metapopulation SIR simulation, the infection
//! matrix transform and its exact inverse.
//!
//! # Time and seeding convention
//!
//! A simulation starts fully susceptible: S(0) = 1, I(0) = 0, R(0) = 0
//! everywhere. Day 0 of the recorded series is the exogenous seeding event:
//! `delta_s[seed][l][0] = seed_fraction`, i.e. the first documented cases are
//! part of the observed data. From day 1 on the recorded new cases are the
//! model's own transmission:
//!
//! ```text
//! new(t)  = S(t) * (alpha(I(t)) . Z)     (row vector times infection matrix)
//! S(t+1)  = S(t) - new(t)
//! I(t+1)  = (1 - gamma) * I(t) + new(t)
//! R(t+1)  = R(t) + gamma * I(t)
//! ```
//!
//! Under this convention the decoder-side accumulations S = 1 - cumsum and
//! the geometric recovery sum reconstruct the exact S and I traces from the
//! observed series alone, with no hidden initial state.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graphgen::MobilityNetwork;
use crate::linalg::Mat;

/// Paper benchmark defaults for pathogen parameter draws.
pub const BETA_MEAN: f64 = 1.1;
pub const BETA_STD: f64 = 0.1;
pub const INV_GAMMA_MEAN: f64 = 7.5;
pub const INV_GAMMA_STD: f64 = 0.75;
/// Default epidemic length in days.
pub const DEFAULT_T: usize = 150;
/// Default number of index cases at the seed node.
pub const DEFAULT_INDEX_CASES: f64 = 10.0;

/// SIR parameters and seeding of one pathogen.
#[derive(Debug, Clone, PartialEq)]
pub struct PathogenParams {
    /// Transmission rate per day.
    pub beta: f64,
    /// Recovery rate per day, in (0, 1).
    pub gamma: f64,
    pub seed_node: usize,
    /// Initial infected fraction at the seed node, in (0, 1).
    pub seed_fraction: f64,
}

impl PathogenParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidSpec(format!("beta {} must be > 0", self.beta)));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "gamma {} must be in (0, 1)",
                self.gamma
            )));
        }
        if self.seed_node >= n {
            return Err(Error::SeedOutOfRange {
                node: self.seed_node,
                n,
            });
        }
        if !(0.0 < self.seed_fraction && self.seed_fraction < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "seed_fraction {} must be in (0, 1)",
                self.seed_fraction
            )));
        }
        Ok(())
    }
}

/// Full S, I, R state tensors, n x k x (T+1) each, flattened `[node][pathogen][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    pub s: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
    pub steps: usize,
}

/// The observable output of a simulation: daily new-case fractions plus the
/// generating ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicDataset {
    pub n: usize,
    pub k: usize,
    pub t_days: usize,
    /// n x k x T tensor, flattened `[node][pathogen][day]`.
    pub delta_s: Vec<f64>,
    pub traces: Option<Traces>,
    pub params_truth: Vec<PathogenParams>,
    pub network_truth: Option<MobilityNetwork>,
}

impl EpidemicDataset {
    #[inline]
    pub fn idx(&self, node: usize, pathogen: usize, day: usize) -> usize {
        (node * self.k + pathogen) * self.t_days + day
    }

    pub fn delta(&self, node: usize, pathogen: usize, day: usize) -> f64 {
        self.delta_s[self.idx(node, pathogen, day)]
    }

    /// The length-T series of one node-pathogen pair.
    pub fn series(&self, node: usize, pathogen: usize) -> &[f64] {
        let base = (node * self.k + pathogen) * self.t_days;
        &self.delta_s[base..base + self.t_days]
    }

    /// Mean over nodes of the fraction still susceptible after the last day.
    pub fn remaining_susceptible(&self, pathogen: usize) -> f64 {
        let total: f64 = (0..self.n)
            .map(|i| 1.0 - self.series(i, pathogen).iter().sum::<f64>())
            .sum();
        total / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_s.len() != self.n * self.k * self.t_days {
            return Err(Error::InvalidSpec("delta_s length mismatch".into()));
        }
        if self.params_truth.len() != self.k {
            return Err(Error::InvalidSpec("params_truth length mismatch".into()));
        }
        for &v in &self.delta_s {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!("delta_s entry {v} outside [0, 1]")));
            }
        }
        for i in 0..self.n {
            for l in 0..self.k {
                let total: f64 = self.series(i, l).iter().sum();
                if total > 1.0 + 1e-9 {
                    return Err(Error::InvalidSpec(format!(
                        "cumulative cases {total} > 1 at node {i}, pathogen {l}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The fixed matrix coupling node infection rates; unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct InfectionMatrix {
    pub z: Mat,
}

impl InfectionMatrix {
    pub fn n(&self) -> usize {
        self.z.rows
    }
}

/// Z[i][j] = (row sum of A at i) * A[i][j] * P[j] / (A[i,:] . P) off the
/// diagonal, 1 on it. A node with no incoming travel keeps an identity row.
pub fn infection_matrix(net: &MobilityNetwork) -> InfectionMatrix {
    let n = net.n();
    let mut z = Mat::identity(n);
    for i in 0..n {
        let row = net.a.row(i);
        let degree_mass: f64 = row.iter().sum();
        let pop_mass: f64 = row.iter().zip(&net.p).map(|(a, p)| a * p).sum();
        if pop_mass <= 0.0 {
            if degree_mass > 0.0 {
                log::warn!("node {i} has travel fractions but zero population mass");
            } else {
                log::warn!("node {i} is isolated; its infection-matrix row stays identity");
            }
            continue;
        }
        for j in 0..n {
            if i != j {
                z[(i, j)] = degree_mass * row[j] * net.p[j] / pop_mass;
            }
        }
    }
    InfectionMatrix { z }
}

/// Invert [`infection_matrix`]: recover the mobility matrix from Z and the
/// population vector. Identity rows map to zero rows.
pub fn mobility_from_infection(zm: &InfectionMatrix, p: &[f64]) -> Result<Mat> {
    let n = zm.n();
    if p.len() != n {
        return Err(Error::ShapeMismatch {
            op: "mobility_from_infection",
            lhs: (n, n),
            rhs: (p.len(), 1),
        });
    }
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && zm.z[(i, j)] < 0.0 {
                return Err(Error::NegativeEntry { row: i, col: j });
            }
        }
    }
    for i in 0..n {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let z2 = zm.z[(i, j)];
            sum += z2;
            weighted += z2 / p[j];
        }
        if sum <= 0.0 || weighted <= 0.0 {
            continue; // identity row -> no incoming travel
        }
        for j in 0..n {
            if i != j {
                a[(i, j)] = zm.z[(i, j)] * sum / (p[j] * weighted);
            }
        }
    }
    Ok(a)
}

/// Exact per-day infection rate: alpha_i = 1 - (1 - beta/P_i)^(I_i * P_i).
pub fn infection_rate_exact(infected: &[f64], p: &[f64], beta: f64) -> Result<Vec<f64>> {
    let min_pop = p.iter().copied().fold(f64::INFINITY, f64::min);
    if beta >= min_pop {
        return Err(Error::BetaExceedsPopulation { beta, min_pop });
    }
    Ok(infected
        .iter()
        .zip(p)
        .map(|(&i_frac, &pop)| 1.0 - ((i_frac * pop) * (-beta / pop).ln_1p()).exp())
        .collect())
}

/// Large-population approximation: alpha_i = 1 - exp(-beta * I_i).
pub fn infection_rate_approx(infected: &[f64], beta: f64) -> Vec<f64> {
    infected.iter().map(|&i| 1.0 - (-beta * i).exp()).collect()
}

const STABILITY_SLACK: f64 = 1e-9;

fn check_unit_interval(x: &mut [f64], t: usize) -> Result<()> {
    for v in x.iter_mut() {
        if *v < -STABILITY_SLACK || *v > 1.0 + STABILITY_SLACK {
            return Err(Error::UnstableStep { t, value: *v });
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(())
}

/// Simulate every pathogen independently on the shared network for `t_days`
/// days, recording daily new-case fractions (day 0 is the seeding event).
pub fn simulate(
    net: &MobilityNetwork,
    pathogens: &[PathogenParams],
    t_days: usize,
    use_approx: bool,
    with_traces: bool,
) -> Result<EpidemicDataset> {
    net.validate()?;
    if pathogens.is_empty() {
        return Err(Error::InvalidSpec("at least one pathogen required".into()));
    }
    if t_days < 2 {
        return Err(Error::InvalidSpec(format!("T = {t_days} must be >= 2")));
    }
    let n = net.n();
    let k = pathogens.len();
    for params in pathogens {
        params.validate(n)?;
    }
    let zm = infection_matrix(net);

    let mut delta_s = vec![0.0; n * k * t_days];
    let steps = t_days + 1;
    let mut traces = with_traces.then(|| Traces {
        s: vec![0.0; n * k * steps],
        i: vec![0.0; n * k * steps],
        r: vec![0.0; n * k * steps],
        steps,
    });

    for (l, params) in pathogens.iter().enumerate() {
        let mut s = vec![1.0; n];
        let mut i_frac = vec![0.0; n];
        let mut r = vec![0.0; n];
        let record = |s: &[f64], i_frac: &[f64], r: &[f64], step: usize,
                          traces: &mut Option<Traces>| {
            if let Some(tr) = traces {
                for node in 0..n {
                    let idx = (node * k + l) * steps + step;
                    tr.s[idx] = s[node];
                    tr.i[idx] = i_frac[node];
                    tr.r[idx] = r[node];
                }
            }
        };
        record(&s, &i_frac, &r, 0, &mut traces);

        for t in 0..t_days {
            let new_cases: Vec<f64> = if t == 0 {
                // Exogenous seeding: the first documented cases.
                let mut x = vec![0.0; n];
                x[params.seed_node] = params.seed_fraction;
                x
            } else {
                let alpha = if use_approx {
                    infection_rate_approx(&i_frac, params.beta)
                } else {
                    infection_rate_exact(&i_frac, &net.p, params.beta)?
                };
                // Row vector times Z: coupled rate at j is sum_i alpha_i * Z[i][j].
                let mut coupled = vec![0.0; n];
                for (i, &a) in alpha.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (j, c) in coupled.iter_mut().enumerate() {
                        *c += a * zm.z[(i, j)];
                    }
                }
                s.iter().zip(&coupled).map(|(&sv, &cv)| sv * cv).collect()
            };
            for node in 0..n {
                let x = new_cases[node];
                delta_s[(node * k + l) * t_days + t] = x;
                let gamma_flow = params.gamma * i_frac[node];
                s[node] -= x;
                i_frac[node] = i_frac[node] - gamma_flow + x;
                r[node] += gamma_flow;
            }
            check_unit_interval(&mut s, t)?;
            check_unit_interval(&mut i_frac, t)?;
            check_unit_interval(&mut r, t)?;
            record(&s, &i_frac, &r, t + 1, &mut traces);
        }
    }

    let dataset = EpidemicDataset {
        n,
        k,
        t_days,
        delta_s,
        traces,
        params_truth: pathogens.to_vec(),
        network_truth: Some(net.clone()),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Draw k seed nodes with probability proportional to degree; repeats allowed.
pub fn sample_seed_nodes(net: &MobilityNetwork, k: usize, rng_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_seed_nodes_with(net, k, &mut rng)
}

fn sample_seed_nodes_with(net: &MobilityNetwork, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let degrees = net.degrees();
    let total: usize = degrees.iter().sum();
    (0..k)
        .map(|_| {
            if total == 0 {
                return rng.random_range(0..net.n());
            }
            let mut target = rng.random_range(0..total);
            for (i, &d) in degrees.iter().enumerate() {
                if target < d {
                    return i;
                }
                target -= d;
            }
            unreachable!()
        })
        .collect()
}

/// Draw pathogen parameter sets for a benchmark run: beta ~ Normal(1.1, 0.1)
/// truncated positive, 1/gamma ~ Normal(7.5, 0.75) truncated so gamma lands
/// in (0, 1), seed nodes degree-proportional, ten index cases at the seed.
pub fn sample_pathogens(net: &MobilityNetwork, k: usize, rng_seed: u64) -> Vec<PathogenParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let beta_dist = Normal::new(BETA_MEAN, BETA_STD).unwrap();
    let inv_gamma_dist = Normal::new(INV_GAMMA_MEAN, INV_GAMMA_STD).unwrap();
    let seeds = sample_seed_nodes_with(net, k, &mut rng);
    seeds
        .into_iter()
        .map(|seed_node| {
            let beta = loop {
                let b = beta_dist.sample(&mut rng);
                if b > 0.0 {
                    break b;
                }
            };
            let gamma = loop {
                let inv = inv_gamma_dist.sample(&mut rng);
                if inv > 1.0 {
                    break 1.0 / inv;
                }
            };
            PathogenParams {
                beta,
                gamma,
                seed_node,
                seed_fraction: DEFAULT_INDEX_CASES / net.p[seed_node],
            }
        })
        .collect()
}
