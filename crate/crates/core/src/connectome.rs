//! ROI time series → Fisher-z functional connectivity → sparsified brain graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-subject ROI signals, one ROI per row.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    subject_id: String,
    data: Tensor,
}

impl TimeSeries {
    /// Validates shape (≥ 2 ROIs, ≥ 3 samples), finiteness and non-constant rows.
    pub fn new(subject_id: impl Into<String>, data: Tensor) -> Result<Self> {
        let subject_id = subject_id.into();
        if data.rows() < 2 {
            return Err(Error::invalid(format!(
                "subject {subject_id}: need at least 2 ROIs, got {}",
                data.rows()
            )));
        }
        if data.cols() < 3 {
            return Err(Error::invalid(format!(
                "subject {subject_id}: need at least 3 samples, got {}",
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid(format!("subject {subject_id}: non-finite sample")));
        }
        for r in 0..data.rows() {
            let row = data.row(r);
            if row.iter().all(|&v| v == row[0]) {
                return Err(Error::ZeroVariance {
                    subject: Some(subject_id),
                    roi: r,
                });
            }
        }
        Ok(Self { subject_id, data })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn roi_count(&self) -> usize {
        self.data.rows()
    }

    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Symmetric Fisher-z matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    values: Tensor,
}

impl ConnectivityMatrix {
    /// Checks squareness, symmetry (1e-12), zero diagonal and finiteness.
    pub fn new(values: Tensor) -> Result<Self> {
        let n = values.rows();
        if values.cols() != n {
            return Err(Error::invalid(format!(
                "connectivity matrix must be square, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("connectivity matrix has non-finite entries"));
        }
        for i in 0..n {
            if values.get(i, i) != 0.0 {
                return Err(Error::invalid(format!("connectivity diagonal entry {i} is not 0")));
            }
            for j in 0..i {
                if (values.get(i, j) - values.get(j, i)).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "connectivity matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

/// Node-feature source fed to the individual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Rows of the Fisher-z matrix.
    FcProfile,
    /// Raw time-series rows.
    Timeseries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectomeConfig {
    pub keep_fraction: f64,
    pub clamp_eps: f64,
    pub feature_mode: FeatureMode,
}

impl Default for ConnectomeConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.2,
            clamp_eps: 1e-5,
            feature_mode: FeatureMode::FcProfile,
        }
    }
}

impl ConnectomeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 1e-3) {
            return Err(Error::invalid(format!("clamp_eps {} outside (0, 1e-3]", self.clamp_eps)));
        }
        Ok(())
    }
}

/// Subject-level graph: ROIs as nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainGraph {
    pub adjacency: Tensor,
    pub node_features: Tensor,
    pub roi_names: Vec<String>,
}

impl BrainGraph {
    pub fn roi_count(&self) -> usize {
        self.adjacency.rows()
    }
}

pub fn default_roi_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("roi_{i}")).collect()
}

/// Pearson correlation between every pair of ROI rows; diagonal exactly 1.
pub fn pearson_fc(ts: &TimeSeries) -> Result<Tensor> {
    let x = ts.data();
    let (n, t) = (x.rows(), x.cols());
    let mut centered = Tensor::zeros(n, t);
    let mut norms = vec![0.0; n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / t as f64;
        let out = centered.row_mut(r);
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - mean;
        }
        norms[r] = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[r] == 0.0 {
            return Err(Error::ZeroVariance {
                subject: Some(ts.subject_id().to_string()),
                roi: r,
            });
        }
    }
    let mut corr = centered.matmul_nt(&centered)?;
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                1.0
            } else {
                (corr.get(i, j) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            corr.set(i, j, v);
        }
    }
    // enforce exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = corr.get(i, j);
            corr.set(j, i, v);
        }
    }
    Ok(corr)
}

/// `arctanh(clamp(r, −1+ε, 1−ε))` off the diagonal, 0 on it.
pub fn fisher_z(corr: &Tensor, clamp_eps: f64) -> Result<ConnectivityMatrix> {
    if !(clamp_eps > 0.0 && clamp_eps <= 1e-3) {
        return Err(Error::invalid(format!("clamp_eps {clamp_eps} outside (0, 1e-3]")));
    }
    if corr.rows() != corr.cols() {
        return Err(Error::invalid("correlation matrix must be square"));
    }
    if corr.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::invalid("correlation entries must lie in [-1, 1]"));
    }
    let n = corr.rows();
    let z = Tensor::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            fisher_z_scalar(corr.get(i, j), clamp_eps)
        }
    });
    ConnectivityMatrix::new(z)
}

pub fn fisher_z_scalar(r: f64, clamp_eps: f64) -> f64 {
    r.clamp(-1.0 + clamp_eps, 1.0 - clamp_eps).atanh()
}

/// Keeps the strongest `⌈keep_fraction·|E⁺|⌉` positive edges; drops the rest
/// and every negative edge.
pub fn sparsify_topk_positive(cm: &ConnectivityMatrix, keep_fraction: f64) -> Result<Tensor> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let v = cm.values();
    let n = cm.size();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = v.get(i, j);
            if w > 0.0 {
                edges.push((w, i, j));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let keep = ((keep_fraction * edges.len() as f64).ceil() as usize).clamp(1, edges.len());
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut adj = Tensor::zeros(n, n);
    for &(w, i, j) in &edges[..keep] {
        adj.set(i, j, w);
        adj.set(j, i, w);
    }
    Ok(adj)
}

/// `pearson_fc → fisher_z → sparsify`, plus node features per the configured mode.
pub fn build_brain_graph(ts: &TimeSeries, config: &ConnectomeConfig) -> Result<BrainGraph> {
    config.validate()?;
    let corr = pearson_fc(ts)?;
    let cm = fisher_z(&corr, config.clamp_eps)?;
    let adjacency = sparsify_topk_positive(&cm, config.keep_fraction)?;
    let node_features = match config.feature_mode {
        FeatureMode::FcProfile => cm.values().clone(),
        FeatureMode::Timeseries => ts.data().clone(),
    };
    Ok(BrainGraph {
        adjacency,
        node_features,
        roi_names: default_roi_names(ts.roi_count()),
    })
}
