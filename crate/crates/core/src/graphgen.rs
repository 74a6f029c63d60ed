//! Synthetic random mobility networks and real edge-list loading.
//!
//! Generation is a pure function of the graph spec: the RNG is seeded per call and
//! disconnected draws are retried with an incremented seed, so the same spec
//! always yields the same network.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Default uniform subpopulation size when none is configured.
pub const DEFAULT_POPULATION: f64 = 1e6;

const CONNECTIVITY_RETRIES: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphModel {
    /// Erdos-Renyi G(n, p) with p = avg_degree / (n - 1).
    Er,
    /// Barabasi-Albert preferential attachment with m0 = round(avg_degree / 2).
    Ba,
    /// Watts-Strogatz ring lattice with rewiring.
    Ws,
    /// Random geometric graph on the unit square.
    Rgg,
    /// Load from an edge-list file.
    File,
}

impl GraphModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphModel::Er => "ER",
            GraphModel::Ba => "BA",
            GraphModel::Ws => "WS",
            GraphModel::Rgg => "RGG",
            GraphModel::File => "FILE",
        }
    }

    pub fn parse(s: &str) -> Result<GraphModel> {
        match s.to_ascii_uppercase().as_str() {
            "ER" => Ok(GraphModel::Er),
            "BA" => Ok(GraphModel::Ba),
            "WS" => Ok(GraphModel::Ws),
            "RGG" => Ok(GraphModel::Rgg),
            "FILE" => Ok(GraphModel::File),
            other => Err(Error::InvalidSpec(format!("unknown graph model {other:?}"))),
        }
    }
}

/// What to generate and how.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub model: GraphModel,
    pub n: usize,
    pub avg_degree: f64,
    /// WS rewiring probability; ignored by the other models.
    pub rewire_prob: f64,
    pub rng_seed: u64,
    pub file_path: Option<PathBuf>,
    pub weighted: bool,
}

impl GraphSpec {
    pub fn synthetic(model: GraphModel, n: usize, avg_degree: f64, rng_seed: u64) -> Self {
        GraphSpec {
            model,
            n,
            avg_degree,
            rewire_prob: 0.1,
            rng_seed,
            file_path: None,
            weighted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == GraphModel::File {
            if self.file_path.is_none() {
                return Err(Error::InvalidSpec("model=FILE requires file_path".into()));
            }
            return Ok(());
        }
        if self.file_path.is_some() {
            return Err(Error::InvalidSpec(
                "file_path is only valid with model=FILE".into(),
            ));
        }
        if self.n < 2 {
            return Err(Error::InvalidSpec(format!("n = {} must be >= 2", self.n)));
        }
        if self.avg_degree <= 0.0 || self.avg_degree >= self.n as f64 {
            return Err(Error::InvalidSpec(format!(
                "avg_degree = {} must be in (0, n)",
                self.avg_degree
            )));
        }
        if !(0.0..=1.0).contains(&self.rewire_prob) {
            return Err(Error::InvalidSpec(format!(
                "rewire_prob = {} outside [0, 1]",
                self.rewire_prob
            )));
        }
        Ok(())
    }
}

/// A metapopulation mobility network. `a[(i, j)]` is the fraction of
/// subpopulation j traveling to subpopulation i per day.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityNetwork {
    pub a: Mat,
    /// Population sizes, strictly positive.
    pub p: Vec<f64>,
    pub labels: Vec<String>,
    pub directed: bool,
    /// True while `a` holds a 0/1 adjacency placeholder awaiting
    /// [`assign_mobility`]; weighted loads and assigned networks are false.
    pub binary: bool,
}

impl MobilityNetwork {
    pub fn n(&self) -> usize {
        self.a.rows
    }

    /// Number of undirected links (nonzero unordered pairs).
    pub fn link_count(&self) -> usize {
        let n = self.n();
        let mut m = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.a[(i, j)] != 0.0 || self.a[(j, i)] != 0.0 {
                    m += 1;
                }
            }
        }
        m
    }

    /// Unweighted degree: number of neighbors in either direction.
    pub fn degree(&self, i: usize) -> usize {
        let n = self.n();
        (0..n)
            .filter(|&j| j != i && (self.a[(i, j)] != 0.0 || self.a[(j, i)] != 0.0))
            .count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.degree(i)).collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && (self.a[(i, j)] != 0.0 || self.a[(j, i)] != 0.0) {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == n
    }

    /// Check the structural invariants. Column-sum bounds only apply once
    /// mobility rates are assigned.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.a.cols != n || self.p.len() != n || self.labels.len() != n {
            return Err(Error::InvalidSpec("inconsistent network dimensions".into()));
        }
        for i in 0..n {
            if self.a[(i, i)] != 0.0 {
                return Err(Error::InvalidSpec(format!("nonzero diagonal at {i}")));
            }
            if self.p[i] <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "population {} at node {i} must be positive",
                    self.p[i]
                )));
            }
        }
        if self.a.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidSpec("negative or non-finite A entry".into()));
        }
        if !self.directed && !self.a.is_symmetric(1e-12) {
            return Err(Error::InvalidSpec("undirected network with asymmetric A".into()));
        }
        if !self.binary {
            for (j, s) in self.a.col_sums().iter().enumerate() {
                if *s >= 1.0 {
                    return Err(Error::InvalidSpec(format!(
                        "column {j} sums to {s} >= 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn network_from_edges(n: usize, edges: &[(usize, usize)], p: f64) -> MobilityNetwork {
    let mut a = Mat::zeros(n, n);
    for &(u, v) in edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    MobilityNetwork {
        a,
        p: vec![p; n],
        labels: (0..n).map(|i| i.to_string()).collect(),
        directed: false,
        binary: true,
    }
}

/// Generate a connected simple graph for the requested model, with binary A awaiting
/// [`assign_mobility`]. Disconnected draws are regenerated with seed+1, up
/// to 100 attempts.
pub fn generate(spec: &GraphSpec) -> Result<MobilityNetwork> {
    spec.validate()?;
    if spec.model == GraphModel::File {
        return load_edge_list(spec.file_path.as_ref().unwrap(), spec.weighted);
    }
    for attempt in 0..CONNECTIVITY_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.wrapping_add(attempt as u64));
        let edges = match spec.model {
            GraphModel::Er => erdos_renyi(spec.n, spec.avg_degree, &mut rng),
            GraphModel::Ba => barabasi_albert(spec.n, spec.avg_degree, &mut rng)?,
            GraphModel::Ws => watts_strogatz(spec.n, spec.avg_degree, spec.rewire_prob, &mut rng)?,
            GraphModel::Rgg => random_geometric(spec.n, spec.avg_degree, attempt, &mut rng),
            GraphModel::File => unreachable!(),
        };
        let net = network_from_edges(spec.n, &edges, DEFAULT_POPULATION);
        if net.is_connected() {
            return Ok(net);
        }
    }
    Err(Error::DisconnectedAfterRetries(CONNECTIVITY_RETRIES))
}

fn erdos_renyi(n: usize, avg_degree: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let p = avg_degree / (n as f64 - 1.0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn barabasi_albert(n: usize, avg_degree: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let m0 = (avg_degree / 2.0).round().max(1.0) as usize;
    if m0 >= n {
        return Err(Error::InvalidSpec(format!(
            "BA attachment parameter {m0} must be < n = {n}"
        )));
    }
    // First arrival links to the m0 founder nodes; afterwards targets are
    // drawn uniformly from the edge-endpoint list, i.e. degree-proportionally.
    let mut edges = Vec::with_capacity((n - m0) * m0);
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * (n - m0) * m0);
    let mut targets: Vec<usize> = (0..m0).collect();
    for v in m0..n {
        for &t in &targets {
            edges.push((t, v));
        }
        endpoints.extend_from_slice(&targets);
        endpoints.extend(std::iter::repeat_n(v, targets.len()));
        if v + 1 < n {
            targets.clear();
            while targets.len() < m0 {
                let t = endpoints[rng.random_range(0..endpoints.len())];
                if !targets.contains(&t) {
                    targets.push(t);
                }
            }
        }
    }
    Ok(edges)
}

fn watts_strogatz(
    n: usize,
    avg_degree: f64,
    rewire_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    // The ring lattice needs an even degree; ties round to the even lattice.
    let half = (avg_degree / 2.0).round_ties_even().max(1.0) as usize;
    if 2 * half >= n {
        return Err(Error::InvalidSpec(format!(
            "WS lattice degree {} must be < n = {n}",
            2 * half
        )));
    }
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 1..=half {
            let v = (i + j) % n;
            adj[i][v] = true;
            adj[v][i] = true;
        }
    }
    for j in 1..=half {
        for i in 0..n {
            let v = (i + j) % n;
            if rng.random::<f64>() < rewire_prob && adj[i][v] {
                // Skip saturated nodes; nothing left to rewire to.
                if (0..n).filter(|&w| adj[i][w]).count() >= n - 1 {
                    continue;
                }
                let mut w = rng.random_range(0..n);
                while w == i || adj[i][w] {
                    w = rng.random_range(0..n);
                }
                adj[i][v] = false;
                adj[v][i] = false;
                adj[i][w] = true;
                adj[w][i] = true;
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for v in (i + 1)..n {
            if adj[i][v] {
                edges.push((i, v));
            }
        }
    }
    Ok(edges)
}

fn random_geometric(
    n: usize,
    avg_degree: f64,
    attempt: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    // Radius chosen so the expected degree n*pi*r^2 matches avg_degree. At
    // benchmark sizes that radius sits below the connectivity threshold, so
    // each regeneration inflates it slightly; retries terminate instead of
    // looping through 100 disconnected draws.
    let inflate = 1.04f64.powi(attempt as i32);
    let r2 = inflate * avg_degree / (std::f64::consts::PI * n as f64);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            if dx * dx + dy * dy < r2 {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Load an undirected edge list: one `src,dst` or `src,dst,weight` per line,
/// `#` comments ignored. Node IDs are remapped to dense indices in
/// first-appearance order; original IDs are kept as labels. Duplicate edges
/// are merged by summing weights, with a warning.
pub fn load_edge_list(path: impl Into<PathBuf>, weighted: bool) -> Result<MobilityNetwork> {
    let path = path.into();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading edge list {}", path.display()), e))?;
    parse_edge_list(&text, weighted)
}

/// Parse edge-list text; see [`load_edge_list`].
pub fn parse_edge_list(text: &str, weighted: bool) -> Result<MobilityNetwork> {
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels: Vec<String> = Vec::new();
    let intern = |name: &str, labels: &mut Vec<String>, ids: &mut BTreeMap<String, usize>| {
        if let Some(&i) = ids.get(name) {
            i
        } else {
            let i = labels.len();
            ids.insert(name.to_string(), i);
            labels.push(name.to_string());
            i
        }
    };
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut duplicates = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(Error::ParseError {
                line: lineno,
                msg: format!("expected `src,dst` or `src,dst,weight`, got {line:?}"),
            });
        }
        if parts[0] == parts[1] {
            return Err(Error::SelfLoop {
                line: lineno,
                node: parts[0].to_string(),
            });
        }
        let w = if parts.len() == 3 {
            let w: f64 = parts[2].parse().map_err(|_| Error::ParseError {
                line: lineno,
                msg: format!("bad weight {:?}", parts[2]),
            })?;
            if w < 0.0 || !w.is_finite() {
                return Err(Error::ParseError {
                    line: lineno,
                    msg: format!("weight {w} must be a nonnegative finite number"),
                });
            }
            w
        } else {
            1.0
        };
        let u = intern(parts[0], &mut labels, &mut ids);
        let v = intern(parts[1], &mut labels, &mut ids);
        let key = (u.min(v), u.max(v));
        match edges.get_mut(&key) {
            Some(existing) => {
                *existing += w;
                duplicates += 1;
            }
            None => {
                edges.insert(key, w);
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::ParseError {
            line: 0,
            msg: "no edges in file".into(),
        });
    }
    if duplicates > 0 {
        log::warn!("merged {duplicates} duplicate edges by summing weights");
    }
    let n = labels.len();
    let mut a = Mat::zeros(n, n);
    for (&(u, v), &w) in &edges {
        let w = if weighted { w } else { 1.0 };
        a[(u, v)] = w;
        a[(v, u)] = w;
    }
    let net = MobilityNetwork {
        a,
        p: vec![DEFAULT_POPULATION; n],
        labels,
        directed: false,
        binary: !weighted,
    };
    if weighted {
        net.validate()?;
    }
    Ok(net)
}

/// Replace every unit entry of a binary adjacency with the given mobility
/// rate. Weighted networks pass through unchanged with a warning.
pub fn assign_mobility(net: &MobilityNetwork, rate: f64) -> Result<MobilityNetwork> {
    if !net.binary {
        log::warn!("assign_mobility on a weighted network is a no-op");
        return Ok(net.clone());
    }
    if rate <= 0.0 || !rate.is_finite() {
        return Err(Error::InvalidSpec(format!("rate {rate} must be positive")));
    }
    let mut out = net.clone();
    for v in out.a.data.iter_mut() {
        if *v != 0.0 {
            *v = rate;
        }
    }
    for (j, s) in out.a.col_sums().iter().enumerate() {
        if *s >= 1.0 {
            return Err(Error::RateTooLarge {
                rate,
                node: j,
                sum: *s,
            });
        }
    }
    out.binary = false;
    Ok(out)
}
