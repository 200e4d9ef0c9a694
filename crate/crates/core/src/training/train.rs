//! Two-phase training loop, prediction and cross-validation.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::hgan::{DemographicEncoder, DvEstimator, RELATION_COUNT};
use crate::optim::{Adam, AdamConfig};
use crate::training::cohort::Cohort;
use crate::training::config::RunConfig;
use crate::training::cv::{stratified_kfold, Fold};
use crate::training::metrics::{evaluate_scores, Metrics, MetricsReport};
use crate::training::model::{forward, loss_terms, MiSource, Model, Pass, Population};

/// Smallest class size `train` accepts.
pub const MIN_PER_CLASS: usize = 8;

/// One line of `history.csv`. Second-phase columns are empty during warm-up.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub fold: usize,
    pub epoch: usize,
    pub phase: u8,
    pub total: f64,
    pub cls: f64,
    pub bib: f64,
    pub bib_nll: f64,
    pub bib_kl: f64,
    pub hg: Option<f64>,
    pub hib: Option<f64>,
    pub hib_nll: Option<f64>,
    pub hib_kl: Option<f64>,
    pub l_struct: Option<f64>,
    pub l_sparse: Option<f64>,
    pub l_mi: Option<f64>,
    /// Weighted contributions to `total`.
    pub zeta_bib: f64,
    pub omega_hg: Option<f64>,
    pub val_total: Option<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha_site: Option<f64>,
    pub alpha_sex: Option<f64>,
    pub alpha_age: Option<f64>,
    pub alpha_hand: Option<f64>,
    pub mi_site: Option<f64>,
    pub mi_sex: Option<f64>,
    pub mi_age: Option<f64>,
    pub mi_hand: Option<f64>,
    /// Largest `|∂‖α‖₁/∂score|` through the softmax.
    pub sparse_score_grad: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub population: Option<Population>,
    pub history: Vec<HistoryRow>,
    /// Epoch whose parameters were restored, if early stopping tracked one.
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub warnings: Vec<String>,
}

/// Independent generator streams for one run.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn rc_rows(cohort: &Cohort, rows: &[usize]) -> (Rc<[usize]>, Rc<[usize]>) {
    let labels: Vec<usize> = rows.iter().map(|&i| cohort.subjects[i].label).collect();
    (Rc::from(rows.to_vec()), Rc::from(labels))
}

fn check_cohort(cohort: &Cohort, train_rows: &[usize]) -> Result<()> {
    let labels = cohort.labels();
    for class in 0..2 {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < MIN_PER_CLASS {
            return Err(Error::TooFewSamples {
                needed: MIN_PER_CLASS,
                got: count,
            });
        }
    }
    if train_rows.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if let Some(&bad) = train_rows.iter().find(|&&i| i >= cohort.len()) {
        return Err(Error::invalid(format!("training row {bad} out of range")));
    }
    Ok(())
}

/// Model with freshly initialized parameters for `cohort`.
pub fn init_model(cohort: &Cohort, run: &RunConfig, seed: u64) -> Result<Model> {
    let encoder = DemographicEncoder::fit(&cohort.demographics(), run.model.demographic_encoding);
    Model::new(&run.model, cohort.feature_dim(), encoder, &mut stream(seed, 0))
}

/// Trains on `train_rows`, early-stopping on `val_rows` during the second phase.
pub fn train(
    cohort: &Cohort,
    train_rows: &[usize],
    val_rows: &[usize],
    run: &RunConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    run.validate()?;
    check_cohort(cohort, train_rows)?;
    let cfg = &run.train;
    let mut model = init_model(cohort, run, seed)?;
    let mut noise_rng = stream(seed, 1);
    let mut dv_rng = stream(seed, 2);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let (rows, labels) = rc_rows(cohort, train_rows);
    let (v_rows, v_labels) = rc_rows(cohort, val_rows);

    let mut population: Option<Population> = None;
    let mut critics: Vec<DvEstimator> = Vec::new();
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>, Population)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let phase2 = epoch >= cfg.warmup_epochs;
        if phase2 && (epoch - cfg.warmup_epochs) % cfg.refresh_every == 0 {
            let mut pop = Population::build(&model, cohort, &run.popgraph)?;
            for w in &pop.graphs.warnings {
                warnings.push(format!("epoch {epoch}: {w}"));
            }
            if let Some(old) = &population {
                pop.mi = old.mi.clone();
            }
            population = Some(pop);
            if critics.is_empty() {
                critics = (0..RELATION_COUNT)
                    .map(|_| DvEstimator::new(run.model.d_t, run.model.d, run.model.dv, &mut dv_rng))
                    .collect::<Result<_>>()?;
            }
        }

        let mut tape = Tape::new();
        let mut estimate = |t: &Tensor, zs: &[Tensor]| -> Result<Vec<f64>> {
            critics
                .iter_mut()
                .zip(zs)
                .map(|(c, z)| c.fit_and_estimate(t, z, &mut dv_rng))
                .collect()
        };
        let mi = if phase2 {
            MiSource::Estimate(&mut estimate)
        } else {
            MiSource::Fixed(&[])
        };
        let pop_ref = if phase2 { population.as_ref() } else { None };
        let fwd = forward(&mut tape, &model, cohort, pop_ref, mi, Pass::train(cfg), &mut noise_rng)?;
        let terms = loss_terms(&mut tape, &fwd, &rows, &labels, cfg)?;
        let values = terms.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "L_total".into(),
            });
        }
        tape.check_finite().map_err(|e| Error::Divergence {
            epoch,
            what: e.to_string(),
        })?;
        model.store.zero_grad();
        tape.backward(terms.total, &mut model.store)?;
        opt.step(&mut model.store);

        let mut row = HistoryRow {
            epoch,
            phase: if phase2 { 2 } else { 1 },
            total: values.total,
            cls: values.cls,
            bib: values.bib,
            bib_nll: values.bib_nll,
            bib_kl: values.bib_kl,
            hg: values.hg,
            hib: values.hib,
            hib_nll: values.hib_nll,
            hib_kl: values.hib_kl,
            l_struct: values.structure,
            l_sparse: values.sparsity,
            l_mi: values.mi,
            zeta_bib: cfg.zeta * values.bib,
            omega_hg: values.hg.map(|v| cfg.omega * v),
            lambda: model.encoder.lambda(&model.store),
            gamma: model.encoder.gamma(&model.store),
            ..HistoryRow::default()
        };

        if let (Some(h), Some(pop)) = (&fwd.hetero, population.as_mut()) {
            pop.mi = h.mi.clone();
            let alpha = tape.value(h.alpha).data().to_vec();
            let total: f64 = alpha.iter().sum();
            row.sparse_score_grad = Some(alpha.iter().map(|a| (a * (1.0 - total)).abs()).fold(0.0, f64::max));
            row.alpha_site = Some(alpha[0]);
            row.alpha_sex = Some(alpha[1]);
            row.alpha_age = Some(alpha[2]);
            row.alpha_hand = Some(alpha[3]);
            row.mi_site = Some(h.mi[0]);
            row.mi_sex = Some(h.mi[1]);
            row.mi_age = Some(h.mi[2]);
            row.mi_hand = Some(h.mi[3]);
        }
        drop(tape);

        if phase2 && !val_rows.is_empty() {
            let pop = population.as_ref().expect("built at phase start");
            let val = validation_loss(&model, cohort, pop, &v_rows, &v_labels, run)?;
            if !val.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "validation L_total".into(),
                });
            }
            row.val_total = Some(val);
            if best.as_ref().is_none_or(|b| val < b.0) {
                best = Some((val, epoch, model.store.values(), pop.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        history.push(row);
        if since_best >= cfg.patience && best.is_some() {
            break;
        }
    }

    model.trained = true;
    let mut best_epoch = None;
    if let Some((_, epoch, params, pop)) = best {
        model.store.set_values(&params);
        population = Some(pop);
        best_epoch = Some(epoch);
    }
    Ok(TrainOutcome {
        model,
        population,
        history,
        best_epoch,
        epochs_run,
        warnings,
    })
}

fn validation_loss(
    model: &Model,
    cohort: &Cohort,
    pop: &Population,
    rows: &Rc<[usize]>,
    labels: &Rc<[usize]>,
    run: &RunConfig,
) -> Result<f64> {
    let mut tape = Tape::untraced();
    let mut rng = stream(0, 0);
    let fwd = forward(
        &mut tape,
        model,
        cohort,
        Some(pop),
        MiSource::Fixed(&pop.mi),
        Pass::infer(&run.train),
        &mut rng,
    )?;
    let terms = loss_terms(&mut tape, &fwd, rows, labels, &run.train)?;
    Ok(tape.item(terms.total))
}

/// Inference outputs for every subject.
#[derive(Clone, Debug)]
pub struct Inference {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Absent for a model without a population graph.
    pub z_h: Option<Tensor>,
    /// Class-1 probability.
    pub prob: Vec<f64>,
}

pub fn infer_all(model: &Model, population: Option<&Population>, cohort: &Cohort, run: &RunConfig) -> Result<Inference> {
    let mut tape = Tape::untraced();
    let mut rng = stream(0, 0);
    let mi = population.map(|p| p.mi.clone()).unwrap_or_default();
    let fwd = forward(
        &mut tape,
        model,
        cohort,
        population,
        MiSource::Fixed(&mi),
        Pass::infer(&run.train),
        &mut rng,
    )?;
    let probs = tape.value(fwd.prediction_logits()).row_softmax();
    Ok(Inference {
        mu: tape.value(fwd.biomarker.mu).clone(),
        sigma: tape.value(fwd.biomarker.logvar).map(|v| (0.5 * v).exp()),
        z_h: fwd.hetero.as_ref().map(|h| tape.value(h.z_h).clone()),
        prob: (0..probs.rows()).map(|i| probs.get(i, 1)).collect(),
    })
}

/// Class-1 probability of every subject at inference.
pub fn predict(model: &Model, population: Option<&Population>, cohort: &Cohort, run: &RunConfig) -> Result<Vec<f64>> {
    Ok(infer_all(model, population, cohort, run)?.prob)
}

/// Metrics over `rows`.
pub fn evaluate(
    model: &Model,
    population: Option<&Population>,
    cohort: &Cohort,
    rows: &[usize],
    run: &RunConfig,
) -> Result<Metrics> {
    let probs = predict(model, population, cohort, run)?;
    let labels: Vec<usize> = rows.iter().map(|&i| cohort.subjects[i].label).collect();
    let scores: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
    evaluate_scores(&labels, &scores)
}

pub struct FoldResult {
    pub index: usize,
    pub fold: Fold,
    pub metrics: Metrics,
    /// Class-1 probability of every subject.
    pub scores: Vec<f64>,
    pub outcome: TrainOutcome,
}

pub struct CvResult {
    pub report: MetricsReport,
    pub folds: Vec<FoldResult>,
}

pub fn run_fold(cohort: &Cohort, fold: &Fold, index: usize, run: &RunConfig) -> Result<FoldResult> {
    let mut outcome = train(cohort, &fold.train, &fold.val, run, fold_seed(run.train.seed, index))?;
    for row in &mut outcome.history {
        row.fold = index;
    }
    let scores = predict(&outcome.model, outcome.population.as_ref(), cohort, run)?;
    let labels: Vec<usize> = fold.test.iter().map(|&i| cohort.subjects[i].label).collect();
    let test_scores: Vec<f64> = fold.test.iter().map(|&i| scores[i]).collect();
    let metrics = evaluate_scores(&labels, &test_scores)?;
    Ok(FoldResult {
        index,
        fold: fold.clone(),
        metrics,
        scores,
        outcome,
    })
}

/// Stratified k-fold training; `jobs` worker threads, results in fold order.
pub fn cross_validate(cohort: &Cohort, run: &RunConfig, jobs: usize) -> Result<CvResult> {
    run.validate()?;
    let folds = stratified_kfold(&cohort.labels(), run.train.folds, run.train.seed)?;
    let jobs = jobs.clamp(1, folds.len());
    let results: Vec<Mutex<Option<Result<FoldResult>>>> = folds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= folds.len() {
                    break;
                }
                let r = run_fold(cohort, &folds[i], i, run);
                let failed = r.is_err();
                *results[i].lock().expect("no poisoned lock") = Some(r);
                if failed {
                    // let the remaining workers drain quickly
                    next.store(folds.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(folds.len());
    for slot in results {
        if let Some(r) = slot.into_inner().expect("no poisoned lock") {
            out.push(r?);
        }
    }
    if out.len() != folds.len() {
        return Err(Error::invalid("cross-validation stopped early"));
    }
    let report = MetricsReport::from_folds(out.iter().map(|f| f.metrics).collect());
    Ok(CvResult { report, folds: out })
}
