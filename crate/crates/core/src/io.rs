//! Plain-text file formats: datasets, adjacency dumps, model checkpoints.
//!
//! Every file starts with `schema=1` and a `kind=...` line, then flat
//! `key=value` pairs. Floats are written with Rust's shortest round-trip
//! formatting, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::OptimizerState;
use crate::epidemic::{EpidemicDataset, PathogenParams, Traces};
use crate::error::{Error, Result};
use crate::graphgen::MobilityNetwork;
use crate::inference::{EncoderParams, EpiParams, ModelKind, ModelState};
use crate::inference::{DtiParams, FtiParams};
use crate::linalg::Mat;

pub const SCHEMA_VERSION: u32 = 1;

/// Ordered key=value document with `#` comments.
#[derive(Debug, Default)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    index: BTreeMap<String, usize>,
}

impl KvDoc {
    pub fn new(kind: &str) -> Self {
        let mut doc = KvDoc::default();
        doc.push("schema", SCHEMA_VERSION.to_string());
        doc.push("kind", kind.to_string());
        doc
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'));
        debug_assert!(!value.contains('\n'));
        self.index.insert(key.clone(), self.entries.len());
        self.entries.push((key, value));
    }

    pub fn push_floats(&mut self, key: impl Into<String>, values: &[f64]) {
        let joined = values
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        self.push(key, joined);
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseError {
                line: idx + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            if doc.index.contains_key(key) {
                return Err(Error::ParseError {
                    line: idx + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            doc.push(key, value.trim().to_string());
        }
        Ok(doc)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let schema: u32 = self.get_parsed("schema")?;
        if schema != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema version {schema}"
            )));
        }
        let actual = self.get("kind")?;
        if actual != kind {
            return Err(Error::InvalidConfig(format!(
                "expected kind={kind}, found kind={actual}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.index
            .get(key)
            .map(|&i| self.entries[i].1.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("missing key {key:?}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "key {key:?}: cannot parse {raw:?} as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn get_floats(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidConfig(format!("key {key:?}: bad float {s:?}"))
                })
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

fn push_network(doc: &mut KvDoc, prefix: &str, net: &MobilityNetwork) {
    doc.push(format!("{prefix}.n"), net.n().to_string());
    doc.push(format!("{prefix}.directed"), net.directed.to_string());
    doc.push(format!("{prefix}.binary"), net.binary.to_string());
    doc.push(format!("{prefix}.labels"), net.labels.join(","));
    doc.push_floats(format!("{prefix}.populations"), &net.p);
    for i in 0..net.n() {
        doc.push_floats(format!("{prefix}.A.{i}"), net.a.row(i));
    }
}

fn read_network(doc: &KvDoc, prefix: &str) -> Result<MobilityNetwork> {
    let n: usize = doc.get_parsed(&format!("{prefix}.n"))?;
    let directed: bool = doc.get_parsed(&format!("{prefix}.directed"))?;
    let binary: bool = doc.get_parsed(&format!("{prefix}.binary"))?;
    let labels: Vec<String> = doc
        .get(&format!("{prefix}.labels"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let p = doc.get_floats(&format!("{prefix}.populations"))?;
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        let row = doc.get_floats(&format!("{prefix}.A.{i}"))?;
        if row.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{prefix}.A.{i} has {} entries, expected {n}",
                row.len()
            )));
        }
        a.row_mut(i).copy_from_slice(&row);
    }
    if labels.len() != n || p.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{prefix}: inconsistent label or population count"
        )));
    }
    Ok(MobilityNetwork {
        a,
        p,
        labels,
        directed,
        binary,
    })
}

/// Write a dataset, including the generating truth when present.
pub fn save_dataset(dataset: &EpidemicDataset, path: &Path) -> Result<()> {
    let mut doc = KvDoc::new("dataset");
    doc.push("n", dataset.n.to_string());
    doc.push("k", dataset.k.to_string());
    doc.push("T", dataset.t_days.to_string());
    for (l, p) in dataset.params_truth.iter().enumerate() {
        doc.push_floats(
            format!("pathogen.{l}"),
            &[p.beta, p.gamma, p.seed_node as f64, p.seed_fraction],
        );
    }
    for i in 0..dataset.n {
        for l in 0..dataset.k {
            doc.push_floats(format!("delta_S.{i}.{l}"), dataset.series(i, l));
        }
    }
    if let Some(net) = &dataset.network_truth {
        doc.push("has_network", "true".to_string());
        push_network(&mut doc, "network", net);
    } else {
        doc.push("has_network", "false".to_string());
    }
    if let Some(tr) = &dataset.traces {
        doc.push("has_traces", "true".to_string());
        for i in 0..dataset.n {
            for l in 0..dataset.k {
                let base = (i * dataset.k + l) * tr.steps;
                doc.push_floats(format!("trace_S.{i}.{l}"), &tr.s[base..base + tr.steps]);
                doc.push_floats(format!("trace_I.{i}.{l}"), &tr.i[base..base + tr.steps]);
                doc.push_floats(format!("trace_R.{i}.{l}"), &tr.r[base..base + tr.steps]);
            }
        }
    } else {
        doc.push("has_traces", "false".to_string());
    }
    doc.write_to(path)
}

pub fn load_dataset(path: &Path) -> Result<EpidemicDataset> {
    let doc = KvDoc::read_from(path)?;
    doc.expect_kind("dataset")?;
    let n: usize = doc.get_parsed("n")?;
    let k: usize = doc.get_parsed("k")?;
    let t_days: usize = doc.get_parsed("T")?;
    let mut params = Vec::with_capacity(k);
    for l in 0..k {
        let vals = doc.get_floats(&format!("pathogen.{l}"))?;
        if vals.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "pathogen.{l} must have 4 fields"
            )));
        }
        params.push(PathogenParams {
            beta: vals[0],
            gamma: vals[1],
            seed_node: vals[2] as usize,
            seed_fraction: vals[3],
        });
    }
    let mut delta_s = vec![0.0; n * k * t_days];
    for i in 0..n {
        for l in 0..k {
            let row = doc.get_floats(&format!("delta_S.{i}.{l}"))?;
            if row.len() != t_days {
                return Err(Error::InvalidConfig(format!(
                    "delta_S.{i}.{l} has {} entries, expected {t_days}",
                    row.len()
                )));
            }
            delta_s[(i * k + l) * t_days..(i * k + l + 1) * t_days].copy_from_slice(&row);
        }
    }
    let network_truth = if doc.get_parsed::<bool>("has_network")? {
        Some(read_network(&doc, "network")?)
    } else {
        None
    };
    let traces = if doc.get_parsed::<bool>("has_traces")? {
        let steps = t_days + 1;
        let mut s = vec![0.0; n * k * steps];
        let mut i_t = vec![0.0; n * k * steps];
        let mut r = vec![0.0; n * k * steps];
        for i in 0..n {
            for l in 0..k {
                let base = (i * k + l) * steps;
                for (buf, tag) in [(&mut s, "S"), (&mut i_t, "I"), (&mut r, "R")] {
                    let row = doc.get_floats(&format!("trace_{tag}.{i}.{l}"))?;
                    if row.len() != steps {
                        return Err(Error::InvalidConfig(format!(
                            "trace_{tag}.{i}.{l} has {} entries, expected {steps}",
                            row.len()
                        )));
                    }
                    buf[base..base + steps].copy_from_slice(&row);
                }
            }
        }
        Some(Traces {
            s,
            i: i_t,
            r,
            steps,
        })
    } else {
        None
    };
    let dataset = EpidemicDataset {
        n,
        k,
        t_days,
        delta_s,
        traces,
        params_truth: params,
        network_truth,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a square matrix with labels as an adjacency document.
pub fn save_adjacency(a: &Mat, labels: &[String], path: &Path) -> Result<()> {
    let mut doc = KvDoc::new("adjacency");
    doc.push("n", a.rows.to_string());
    doc.push("labels", labels.join(","));
    for i in 0..a.rows {
        doc.push_floats(format!("A.{i}"), a.row(i));
    }
    doc.write_to(path)
}

pub fn load_adjacency(path: &Path) -> Result<(Mat, Vec<String>)> {
    let doc = KvDoc::read_from(path)?;
    doc.expect_kind("adjacency")?;
    let n: usize = doc.get_parsed("n")?;
    let labels: Vec<String> = doc.get("labels")?.split(',').map(str::to_string).collect();
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        let row = doc.get_floats(&format!("A.{i}"))?;
        if row.len() != n {
            return Err(Error::InvalidConfig(format!(
                "A.{i} has {} entries, expected {n}",
                row.len()
            )));
        }
        a.row_mut(i).copy_from_slice(&row);
    }
    Ok((a, labels))
}

fn push_mat(doc: &mut KvDoc, key: &str, m: &Mat) {
    doc.push(format!("{key}.shape"), format!("{},{}", m.rows, m.cols));
    doc.push_floats(key, &m.data);
}

fn read_mat(doc: &KvDoc, key: &str) -> Result<Mat> {
    let shape = doc.get(&format!("{key}.shape"))?;
    let (r, c) = shape.split_once(',').ok_or_else(|| {
        Error::InvalidConfig(format!("{key}.shape must be rows,cols"))
    })?;
    let rows: usize = r.trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("{key}.shape: bad rows {r:?}"))
    })?;
    let cols: usize = c.trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("{key}.shape: bad cols {c:?}"))
    })?;
    let data = doc.get_floats(key)?;
    if data.len() != rows * cols {
        return Err(Error::InvalidConfig(format!(
            "{key}: {} values for shape {rows}x{cols}",
            data.len()
        )));
    }
    Ok(Mat::from_vec(rows, cols, data))
}

/// Write all learnable parameters and optimizer moments.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut doc = KvDoc::new("checkpoint");
    doc.push("model", state.model.as_str().to_string());
    doc.push("n", state.n.to_string());
    doc.push("k", state.k.to_string());
    doc.push("T", state.t_days.to_string());
    doc.push("embedding_dim", state.embedding_dim.to_string());
    doc.push("channels", state.channels.to_string());
    doc.push("has_epi", state.epi.is_some().to_string());
    for (name, mat) in state.param_refs() {
        push_mat(&mut doc, &format!("param.{name}"), mat);
    }
    for ((name, _), moments) in state.param_refs().iter().zip(&state.moments) {
        doc.push_floats(format!("moment.{name}.m"), &moments.m);
        doc.push_floats(format!("moment.{name}.v"), &moments.v);
        doc.push(format!("moment.{name}.step"), moments.step.to_string());
    }
    doc.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let doc = KvDoc::read_from(path)?;
    doc.expect_kind("checkpoint")?;
    let model = ModelKind::parse(doc.get("model")?)?;
    let n: usize = doc.get_parsed("n")?;
    let k: usize = doc.get_parsed("k")?;
    let t_days: usize = doc.get_parsed("T")?;
    let embedding_dim: usize = doc.get_parsed("embedding_dim")?;
    let channels: usize = doc.get_parsed("channels")?;
    let has_epi: bool = doc.get_parsed("has_epi")?;
    let encoder = match model {
        ModelKind::Dtef => EncoderParams::Dti(DtiParams {
            w_u: read_mat(&doc, "param.w_u")?,
            b_u: read_mat(&doc, "param.b_u")?,
            w_v: read_mat(&doc, "param.w_v")?,
            b_v: read_mat(&doc, "param.b_v")?,
            w_f: read_mat(&doc, "param.w_f")?,
            z_b: read_mat(&doc, "param.z_b")?,
            zeta: read_mat(&doc, "param.zeta")?,
        }),
        ModelKind::Ftef => EncoderParams::Fti(FtiParams {
            w_z: read_mat(&doc, "param.w_z")?,
        }),
    };
    let epi = if has_epi {
        Some(EpiParams {
            beta_raw: read_mat(&doc, "param.beta_raw")?,
            gamma_raw: read_mat(&doc, "param.gamma_raw")?,
        })
    } else {
        None
    };
    let mut state = ModelState {
        model,
        n,
        k,
        t_days,
        embedding_dim,
        channels,
        encoder,
        epi,
        moments: Vec::new(),
    };
    let mut moments = Vec::new();
    for (name, mat) in state.param_refs() {
        let m = doc.get_floats(&format!("moment.{name}.m"))?;
        let v = doc.get_floats(&format!("moment.{name}.v"))?;
        let step: u64 = doc.get_parsed(&format!("moment.{name}.step"))?;
        if m.len() != mat.data.len() || v.len() != mat.data.len() {
            return Err(Error::InvalidConfig(format!(
                "moment.{name}: length mismatch with parameter"
            )));
        }
        moments.push(OptimizerState { m, v, step });
    }
    state.moments = moments;
    Ok(state)
}
