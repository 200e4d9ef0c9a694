//! File formats: cohort manifest, time-series and matrix CSVs, model files and
//! the results bundle.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! and writing it again reproduces it byte for byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{ParamRecord, Tensor};
use crate::connectome::{default_roi_names, ConnectivityMatrix, TimeSeries};
use crate::error::{Error, Result};
use crate::hgan::DemographicEncoder;
use crate::popgraph::{Demographics, DistanceMetric, MetaPathGraphSet, Relation};
use crate::training::config::{RunConfig, SCHEMA_VERSION};
use crate::training::cv::Fold;
use crate::training::explain::{explain_attention, AttentionReport, RoiScore};
use crate::training::model::{Model, Population};
use crate::training::train::{infer_all, CvResult, HistoryRow, TrainOutcome};
use crate::training::{Cohort, SubjectRecord, SyntheticCohort, SyntheticCohortSpec};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "{} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: usize,
    pub site: Option<u32>,
    pub sex: Option<u32>,
    pub age: Option<f64>,
    pub handedness: Option<u32>,
    /// Relative paths resolve against the manifest's directory.
    pub timeseries_path: String,
}

impl ManifestEntry {
    pub fn demographics(&self) -> Demographics {
        Demographics {
            site: self.site,
            sex: self.sex,
            age: self.age,
            handedness: self.handedness,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub subjects: Vec<ManifestEntry>,
}

const MANIFEST_FIELDS: [&str; 7] = [
    "subject_id",
    "label",
    "site",
    "sex",
    "age",
    "handedness",
    "timeseries_path",
];

impl Manifest {
    pub fn new(subjects: Vec<ManifestEntry>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            subjects,
        }
    }

    /// Accepts `{schema_version, subjects: [...]}` or a bare array of
    /// subjects. Every field must be present; demographics may be `null`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let (version, list) = match &v {
            Value::Array(items) => (SCHEMA_VERSION, items),
            Value::Object(map) => {
                let version = map
                    .get("schema_version")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::parse(origin, "manifest lacks schema_version"))?;
                let items = map
                    .get("subjects")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::parse(origin, "manifest lacks a `subjects` array"))?;
                (version as u32, items)
            }
            _ => return Err(Error::parse(origin, "manifest must be an object or an array")),
        };
        if version != SCHEMA_VERSION {
            return Err(Error::parse(
                origin,
                format!("unsupported manifest schema_version {version}"),
            ));
        }
        let mut subjects = Vec::with_capacity(list.len());
        for (i, item) in list.iter().enumerate() {
            let obj = item
                .as_object()
                .ok_or_else(|| Error::parse(origin, format!("subject #{i} is not an object")))?;
            let subject = obj
                .get("subject_id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{i}"));
            for field in MANIFEST_FIELDS {
                if !obj.contains_key(field) {
                    return Err(Error::MissingData {
                        subject,
                        field: field.to_string(),
                    });
                }
            }
            for field in ["subject_id", "label", "timeseries_path"] {
                if obj[field].is_null() {
                    return Err(Error::MissingData {
                        subject,
                        field: field.to_string(),
                    });
                }
            }
            let entry: ManifestEntry = serde_json::from_value(item.clone())
                .map_err(|e| Error::parse(origin, format!("subject {subject}: {e}")))?;
            if entry.label > 1 {
                return Err(Error::invalid(format!(
                    "subject {subject}: label must be 0 or 1, got {}",
                    entry.label
                )));
            }
            entry.demographics().validate()?;
            subjects.push(entry);
        }
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::invalid(format!("duplicate subject id `{}`", s.subject_id)));
            }
        }
        Ok(Self {
            schema_version: version,
            subjects,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn records(&self) -> Vec<SubjectRecord> {
        self.subjects
            .iter()
            .map(|s| SubjectRecord {
                subject_id: s.subject_id.clone(),
                label: s.label,
                demographics: s.demographics(),
            })
            .collect()
    }
}

/// Directory that relative `timeseries_path`s resolve against.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every subject's time series and builds the cohort.
pub fn load_cohort(manifest_path: &Path, run: &RunConfig) -> Result<Cohort> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let mut series = Vec::with_capacity(manifest.subjects.len());
    let mut names: Option<Vec<String>> = None;
    for s in &manifest.subjects {
        let path = base.join(&s.timeseries_path);
        let (roi_names, ts) = read_timeseries_csv(&path, &s.subject_id)?;
        match &names {
            None => names = Some(roi_names),
            Some(n) if *n != roi_names => {
                return Err(Error::parse(&path, "ROI names differ from the first subject"));
            }
            Some(_) => {}
        }
        series.push(ts);
    }
    let mut cohort = Cohort::from_timeseries(&manifest.records(), &series, &run.connectome)?;
    if let Some(names) = names {
        for s in &mut cohort.subjects {
            s.graph.roi_names = names.clone();
        }
    }
    Ok(cohort)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFile {
    pub schema_version: u32,
    /// 0-based ROI indices.
    pub planted: Vec<usize>,
    pub roi_names: Vec<String>,
    pub spec: SyntheticCohortSpec,
}

/// `manifest.json`, `planted.json` and one CSV per subject under `timeseries/`.
pub fn write_synthetic_cohort(dir: &Path, spec: &SyntheticCohortSpec, cohort: &SyntheticCohort) -> Result<Manifest> {
    let names = default_roi_names(spec.n_rois);
    let mut entries = Vec::with_capacity(cohort.records.len());
    for (r, ts) in cohort.records.iter().zip(&cohort.series) {
        let rel = format!("timeseries/{}.csv", r.subject_id);
        write_file(&dir.join(&rel), timeseries_csv(&names, ts))?;
        let d = &r.demographics;
        entries.push(ManifestEntry {
            subject_id: r.subject_id.clone(),
            label: r.label,
            site: d.site,
            sex: d.sex,
            age: d.age,
            handedness: d.handedness,
            timeseries_path: rel,
        });
    }
    let manifest = Manifest::new(entries);
    write_file(&dir.join("manifest.json"), manifest.to_json())?;
    let planted = PlantedFile {
        schema_version: SCHEMA_VERSION,
        planted: cohort.planted.clone(),
        roi_names: cohort.planted.iter().map(|&i| names[i].clone()).collect(),
        spec: spec.clone(),
    };
    write_file(&dir.join("planted.json"), to_json(&planted))?;
    Ok(manifest)
}

pub fn load_planted(path: &Path) -> Result<PlantedFile> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e))
}

// ---------------------------------------------------------------------------
// CSV matrices

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Rows labeled by `row_names`, columns by `header` (first cell `corner`).
fn write_labeled_matrix(corner: &str, header: &[String], row_names: &[String], m: &Tensor) -> String {
    let mut w = csv_writer();
    let mut head = vec![corner.to_string()];
    head.extend(header.iter().cloned());
    w.write_record(&head).expect("in-memory write");
    for (i, name) in row_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    finish(w)
}

/// Returns the header after the corner cell, the row names and the values.
fn read_labeled_matrix(text: &str, path: &Path) -> Result<(Vec<String>, Vec<String>, Tensor)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?
        .map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut names = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        if rec.len() != header.len() + 1 {
            return Err(Error::parse(
                path,
                format!("row {} has {} values, expected {}", line + 1, rec.len() - 1, header.len()),
            ));
        }
        names.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: `{cell}` is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("row {}: non-finite value", line + 1)));
            }
            data.push(v);
        }
    }
    let m = Tensor::from_vec(names.len(), header.len(), data)?;
    Ok((header, names, m))
}

/// One row per ROI: `roi,0,1,…` header, then the name and samples.
pub fn timeseries_csv(roi_names: &[String], ts: &TimeSeries) -> String {
    let header: Vec<String> = (0..ts.len()).map(|t| t.to_string()).collect();
    write_labeled_matrix("roi", &header, roi_names, ts.data())
}

pub fn parse_timeseries_csv(text: &str, path: &Path, subject_id: &str) -> Result<(Vec<String>, TimeSeries)> {
    let (_, names, m) = read_labeled_matrix(text, path)?;
    let ts = TimeSeries::new(subject_id, m).map_err(|e| match e {
        Error::ZeroVariance { roi, .. } => Error::ZeroVariance {
            subject: Some(subject_id.to_string()),
            roi,
        },
        other => other,
    })?;
    Ok((names, ts))
}

pub fn read_timeseries_csv(path: &Path, subject_id: &str) -> Result<(Vec<String>, TimeSeries)> {
    parse_timeseries_csv(&read_to_string(path)?, path, subject_id)
}

/// Square matrix with ROI names as both header and row labels.
pub fn connectivity_csv(roi_names: &[String], m: &ConnectivityMatrix) -> String {
    write_labeled_matrix("roi", roi_names, roi_names, m.values())
}

pub fn parse_connectivity_csv(text: &str, path: &Path) -> Result<(Vec<String>, ConnectivityMatrix)> {
    let (header, names, m) = read_labeled_matrix(text, path)?;
    if header != names {
        return Err(Error::parse(path, "row and column ROI names differ"));
    }
    Ok((names, ConnectivityMatrix::new(m)?))
}

/// One relation's population adjacency, labeled by subject id.
pub fn adjacency_csv(subject_ids: &[String], adjacency: &Tensor) -> String {
    write_labeled_matrix("subject_id", subject_ids, subject_ids, adjacency)
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRecord {
    pub adjacencies: Vec<Tensor>,
    pub sigma_sim: f64,
    pub metric: DistanceMetric,
    pub equivalence: Vec<Vec<u8>>,
    pub mi: Vec<f64>,
}

/// Everything needed to rerun inference for one trained fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub config: RunConfig,
    pub feature_dim: usize,
    pub roi_names: Vec<String>,
    /// Subject order of the population graph.
    pub subject_ids: Vec<String>,
    pub fold_index: Option<usize>,
    pub fold: Option<Fold>,
    pub trained: bool,
    pub demographics: DemographicEncoder,
    pub params: Vec<ParamRecord>,
    pub population: Option<PopulationRecord>,
}

impl ModelBundle {
    pub fn new(
        run: &RunConfig,
        cohort: &Cohort,
        fold: Option<(usize, &Fold)>,
        model: &Model,
        population: Option<&Population>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: run.clone(),
            feature_dim: model.feature_dim,
            roi_names: cohort.roi_names(),
            subject_ids: cohort.subjects.iter().map(|s| s.id.clone()).collect(),
            fold_index: fold.map(|f| f.0),
            fold: fold.map(|f| f.1.clone()),
            trained: model.trained,
            demographics: model.demographics.clone(),
            params: model.store.to_records(),
            population: population.map(|p| PopulationRecord {
                adjacencies: p.graphs.adjacencies.clone(),
                sigma_sim: p.graphs.sigma_sim,
                metric: p.graphs.metric,
                equivalence: p.equivalence.rows().to_vec(),
                mi: p.mi.clone(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let b: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if b.schema_version != SCHEMA_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported model schema_version {}", b.schema_version),
            ));
        }
        b.config.validate()?;
        Ok(b)
    }

    /// Rebuilds the model and population against `cohort`, which must list
    /// the same subjects in the same order as at training time.
    pub fn restore(&self, cohort: &Cohort) -> Result<(Model, Option<Population>)> {
        let ids: Vec<&str> = cohort.subjects.iter().map(|s| s.id.as_str()).collect();
        if ids != self.subject_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::invalid("cohort subjects differ from the ones the model was trained with"));
        }
        if cohort.feature_dim() != self.feature_dim {
            return Err(Error::invalid(format!(
                "cohort has {} node features, model expects {}",
                cohort.feature_dim(),
                self.feature_dim
            )));
        }
        // every value is overwritten below
        let mut rng = crate::training::train::stream(0, 0);
        let mut model = Model::new(&self.config.model, self.feature_dim, self.demographics.clone(), &mut rng)?;
        model.store.load_records(&self.params)?;
        model.trained = self.trained;
        let population = match &self.population {
            None => None,
            Some(p) => {
                if p.adjacencies.len() != Relation::ALL.len()
                    || p.adjacencies.iter().any(|a| a.shape() != [cohort.len(), cohort.len()])
                {
                    return Err(Error::invalid("stored population graph does not match the cohort"));
                }
                let graphs = MetaPathGraphSet {
                    adjacencies: p.adjacencies.clone(),
                    sigma_sim: p.sigma_sim,
                    metric: p.metric,
                    warnings: Vec::new(),
                };
                let mut pop = Population::new(graphs, &model, cohort)?;
                if pop.equivalence.rows() != p.equivalence.as_slice() {
                    return Err(Error::invalid("stored equivalence matrix disagrees with its graphs"));
                }
                pop.mi = p.mi.clone();
                Some(pop)
            }
        };
        Ok((model, population))
    }
}

// ---------------------------------------------------------------------------
// Results bundle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetricsRecord {
    pub fold: usize,
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub n_test: usize,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub folds: Vec<FoldMetricsRecord>,
    pub mean: crate::training::Metrics,
    pub std: crate::training::Metrics,
}

impl MetricsFile {
    pub fn from_cv(cv: &CvResult) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            folds: cv
                .folds
                .iter()
                .map(|f| FoldMetricsRecord {
                    fold: f.index,
                    acc: f.metrics.acc,
                    auc: f.metrics.auc,
                    f1: f.metrics.f1,
                    n_test: f.fold.test.len(),
                    best_epoch: f.outcome.best_epoch,
                    epochs_run: f.outcome.epochs_run,
                })
                .collect(),
            mean: cv.report.mean,
            std: cv.report.std,
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEpoch {
    pub epoch: usize,
    pub alpha: Vec<f64>,
    pub mi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAttention {
    pub fold: usize,
    /// Ablations are scored on the fold's test subjects.
    pub report: Option<AttentionReport>,
    pub timeline: Vec<AttentionEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFile {
    pub schema_version: u32,
    pub relations: Vec<Relation>,
    pub folds: Vec<FoldAttention>,
}

impl AttentionFile {
    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

pub fn attention_timeline(history: &[HistoryRow]) -> Vec<AttentionEpoch> {
    history
        .iter()
        .filter_map(|h| {
            let alpha = [h.alpha_site?, h.alpha_sex?, h.alpha_age?, h.alpha_hand?];
            let mi = [h.mi_site?, h.mi_sex?, h.mi_age?, h.mi_hand?];
            Some(AttentionEpoch {
                epoch: h.epoch,
                alpha: alpha.to_vec(),
                mi: mi.to_vec(),
            })
        })
        .collect()
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    if rows.is_empty() {
        return String::new();
    }
    finish(w)
}

pub fn parse_history_csv(text: &str, path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| Error::parse(path, e))).collect()
}

pub fn biomarkers_csv(scores: &[RoiScore]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["roi", "name", "score", "rank"]).expect("in-memory write");
    for s in scores {
        w.write_record([s.roi.to_string(), s.name.clone(), s.score.to_string(), s.rank.to_string()])
            .expect("in-memory write");
    }
    finish(w)
}

pub fn parse_biomarkers_csv(text: &str, path: &Path) -> Result<Vec<RoiScore>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| Error::parse(path, e))).collect()
}

/// Combines per-fold rankings by averaging normalized scores.
pub fn average_rankings(per_fold: &[Vec<RoiScore>]) -> Vec<RoiScore> {
    let Some(first) = per_fold.first() else {
        return Vec::new();
    };
    let n = first.len();
    let mut names = vec![String::new(); n];
    let mut scores = vec![0.0; n];
    for ranking in per_fold {
        for s in ranking {
            scores[s.roi] += s.score / per_fold.len() as f64;
            names[s.roi] = s.name.clone();
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        for s in &mut scores {
            *s /= total;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .iter()
        .enumerate()
        .map(|(rank, &roi)| RoiScore {
            roi,
            name: names[roi].clone(),
            score: scores[roi],
            rank: rank + 1,
        })
        .collect()
}

/// Subject, label, the fold that tested it, then one column per entry of `rows`.
fn per_subject_csv(cohort: &Cohort, test_fold: &[usize], prefixes: &[&str], rows: &[Vec<Vec<f64>>]) -> String {
    let mut w = csv_writer();
    let mut head = vec!["subject_id".to_string(), "label".into(), "fold".into()];
    for (p, block) in prefixes.iter().zip(rows) {
        let width = block.first().map_or(0, Vec::len);
        head.extend((0..width).map(|j| format!("{p}{j}")));
    }
    w.write_record(&head).expect("in-memory write");
    for (i, s) in cohort.subjects.iter().enumerate() {
        let mut rec = vec![s.id.clone(), s.label.to_string(), test_fold[i].to_string()];
        for block in rows {
            rec.extend(block[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    finish(w)
}

/// Writes `metrics.json`, `history.csv`, `biomarkers.csv`, `attention.json`,
/// `embeddings.csv`, `representations.csv`, `config.json` and one model file
/// per fold under `models/`.
pub fn write_results_bundle(
    dir: &Path,
    run: &RunConfig,
    cohort: &Cohort,
    cv: &CvResult,
    biomarkers: &[RoiScore],
) -> Result<()> {
    write_file(&dir.join("config.json"), to_json(run))?;
    write_file(&dir.join("metrics.json"), MetricsFile::from_cv(cv).to_json())?;
    let history: Vec<HistoryRow> = cv.folds.iter().flat_map(|f| f.outcome.history.iter().cloned()).collect();
    write_file(&dir.join("history.csv"), history_csv(&history))?;
    write_file(&dir.join("biomarkers.csv"), biomarkers_csv(biomarkers))?;

    let mut attention = Vec::with_capacity(cv.folds.len());
    for f in &cv.folds {
        let out = &f.outcome;
        let report = match &out.population {
            Some(pop) => Some(explain_attention(&out.model, Some(pop), cohort, &f.fold.test, run)?),
            None => None,
        };
        attention.push(FoldAttention {
            fold: f.index,
            report,
            timeline: attention_timeline(&out.history),
        });
    }
    let attention = AttentionFile {
        schema_version: SCHEMA_VERSION,
        relations: Relation::ALL.to_vec(),
        folds: attention,
    };
    write_file(&dir.join("attention.json"), attention.to_json())?;

    let n = cohort.len();
    let mut test_fold = vec![0; n];
    let mut embeddings = vec![Vec::new(); n];
    let mut mu = vec![Vec::new(); n];
    let mut sigma = vec![Vec::new(); n];
    for f in &cv.folds {
        let inf = infer_all(&f.outcome.model, f.outcome.population.as_ref(), cohort, run)?;
        let emb = inf.z_h.as_ref().unwrap_or(&inf.mu);
        for &i in &f.fold.test {
            test_fold[i] = f.index;
            embeddings[i] = emb.row(i).to_vec();
            mu[i] = inf.mu.row(i).to_vec();
            sigma[i] = inf.sigma.row(i).to_vec();
        }
        let bundle = ModelBundle::new(run, cohort, Some((f.index, &f.fold)), &f.outcome.model, f.outcome.population.as_ref());
        write_file(
            &dir.join("models").join(format!("fold_{:02}.json", f.index)),
            bundle.to_json(),
        )?;
    }
    write_file(
        &dir.join("embeddings.csv"),
        per_subject_csv(cohort, &test_fold, &["z"], &[embeddings]),
    )?;
    write_file(
        &dir.join("representations.csv"),
        per_subject_csv(cohort, &test_fold, &["mu", "sigma"], &[mu, sigma]),
    )?;
    Ok(())
}

/// Model file for a single training run outside cross-validation.
pub fn write_model(path: &Path, run: &RunConfig, cohort: &Cohort, outcome: &TrainOutcome) -> Result<()> {
    let bundle = ModelBundle::new(run, cohort, None, &outcome.model, outcome.population.as_ref());
    write_file(path, bundle.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_manifest_field_names_subject_and_field() {
        let text = r#"[{"subject_id": "s1", "label": 0, "site": 1, "sex": null, "age": 10.5,
                        "timeseries_path": "s1.csv"}]"#;
        match Manifest::parse(text, Path::new("m.json")) {
            Err(Error::MissingData { subject, field }) => {
                assert_eq!((subject.as_str(), field.as_str()), ("s1", "handedness"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn null_demographics_are_missing_values() {
        let text = r#"{"schema_version": 1, "subjects": [{"subject_id": "s1", "label": 1, "site": null,
                        "sex": null, "age": null, "handedness": null, "timeseries_path": "a.csv"}]}"#;
        let m = Manifest::parse(text, Path::new("m.json")).unwrap();
        assert_eq!(m.subjects[0].demographics(), Demographics::default());
        let again = Manifest::parse(&m.to_json(), Path::new("m.json")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let e = r#"{"subject_id": "s", "label": 0, "site": 0, "sex": 0, "age": 9.0, "handedness": 0, "timeseries_path": "a"}"#;
        let text = format!("[{e}, {e}]");
        assert!(Manifest::parse(&text, Path::new("m.json")).is_err());
    }

    #[test]
    fn timeseries_csv_round_trips_bytes() {
        let data = Tensor::from_rows(&[vec![0.1, -2.5, 3.0], vec![1e-9, 7.25, -0.3333333333333333]]).unwrap();
        let ts = TimeSeries::new("s", data).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let text = timeseries_csv(&names, &ts);
        let (n2, ts2) = parse_timeseries_csv(&text, Path::new("x.csv"), "s").unwrap();
        assert_eq!(n2, names);
        assert_eq!(ts2.data(), ts.data());
        assert_eq!(timeseries_csv(&n2, &ts2), text);
    }

    #[test]
    fn malformed_csv_is_a_parse_error() {
        let text = "roi,0,1\na,1.0,x\n";
        assert!(matches!(
            parse_timeseries_csv(text, Path::new("x.csv"), "s"),
            Err(Error::Parse { .. })
        ));
        let ragged = "roi,0,1\na,1.0\n";
        assert!(parse_timeseries_csv(ragged, Path::new("x.csv"), "s").is_err());
    }

    #[test]
    fn constant_roi_names_subject() {
        let text = "roi,0,1,2\na,1,2,3\nb,4,4,4\n";
        match parse_timeseries_csv(text, Path::new("x.csv"), "sub-7") {
            Err(Error::ZeroVariance { subject, roi }) => {
                assert_eq!((subject.as_deref(), roi), (Some("sub-7"), 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn connectivity_csv_round_trips() {
        let m = ConnectivityMatrix::new(Tensor::from_rows(&[vec![0.0, 0.25], vec![0.25, 0.0]]).unwrap()).unwrap();
        let names = vec!["x".to_string(), "y".to_string()];
        let text = connectivity_csv(&names, &m);
        let (n2, m2) = parse_connectivity_csv(&text, Path::new("c.csv")).unwrap();
        assert_eq!((n2, m2.values()), (names.clone(), m.values()));
        assert_eq!(connectivity_csv(&names, &m2), text);
    }

    #[test]
    fn rankings_average() {
        let r = |scores: [f64; 2]| -> Vec<RoiScore> {
            (0..2)
                .map(|i| RoiScore {
                    roi: i,
                    name: format!("r{i}"),
                    score: scores[i],
                    rank: 0,
                })
                .collect()
        };
        let avg = average_rankings(&[r([0.75, 0.25]), r([0.25, 0.75]), r([0.0, 1.0])]);
        assert_eq!(avg[0].roi, 1);
        assert!((avg.iter().map(|s| s.score).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
