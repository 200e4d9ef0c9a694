use serde::{Deserialize, Serialize};

use crate::connectome::{build_brain_graph, BrainGraph, ConnectomeConfig, TimeSeries};
use crate::error::{Error, Result};
use crate::popgraph::Demographics;

/// One subject ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub label: usize,
    pub demographics: Demographics,
    pub graph: BrainGraph,
}

/// Raw subject record before connectivity is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: usize,
    pub demographics: Demographics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
}

impl Cohort {
    /// Builds every subject's brain graph; all subjects must share one ROI count.
    pub fn from_timeseries(
        records: &[SubjectRecord],
        series: &[TimeSeries],
        config: &ConnectomeConfig,
    ) -> Result<Self> {
        if records.len() != series.len() {
            return Err(Error::invalid("records and time series differ in length"));
        }
        let mut subjects = Vec::with_capacity(records.len());
        for (r, ts) in records.iter().zip(series) {
            if r.label > 1 {
                return Err(Error::invalid(format!(
                    "subject {}: label must be 0 or 1, got {}",
                    r.subject_id, r.label
                )));
            }
            r.demographics.validate()?;
            let graph = build_brain_graph(ts, config).map_err(|e| match e {
                Error::ZeroVariance { roi, .. } => Error::ZeroVariance {
                    subject: Some(r.subject_id.clone()),
                    roi,
                },
                Error::EmptyGraph => Error::invalid(format!("subject {}: no positive connectivity", r.subject_id)),
                other => other,
            })?;
            subjects.push(Subject {
                id: r.subject_id.clone(),
                label: r.label,
                demographics: r.demographics.clone(),
                graph,
            });
        }
        let cohort = Self { subjects };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate subject id `{}`", w[0])));
        }
        if let Some(first) = self.subjects.first() {
            let (n, f) = (first.graph.roi_count(), first.graph.node_features.cols());
            for s in &self.subjects {
                if s.graph.roi_count() != n || s.graph.node_features.cols() != f {
                    return Err(Error::invalid(format!(
                        "subject {}: graph shape differs from subject {}",
                        s.id, first.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn demographics(&self) -> Vec<Demographics> {
        self.subjects.iter().map(|s| s.demographics.clone()).collect()
    }

    pub fn roi_count(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.graph.roi_count())
    }

    pub fn feature_dim(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.graph.node_features.cols())
    }

    pub fn roi_names(&self) -> Vec<String> {
        self.subjects.first().map(|s| s.graph.roi_names.clone()).unwrap_or_default()
    }

    /// Same subjects with labels replaced.
    pub fn with_labels(&self, labels: &[usize]) -> Self {
        let mut c = self.clone();
        for (s, &l) in c.subjects.iter_mut().zip(labels) {
            s.label = l;
        }
        c
    }
}
