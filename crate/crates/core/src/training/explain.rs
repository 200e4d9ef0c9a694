//! Post-hoc attributions: ROI occlusion ranking and meta-path ablation.

use serde::{Deserialize, Serialize};

use crate::autodiff::variational::symmetric_kl_diag;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphformer::{Dropout, Mode};
use crate::popgraph::Relation;
use crate::training::cohort::{Cohort, Subject};
use crate::training::config::RunConfig;
use crate::training::metrics::accuracy;
use crate::training::model::{forward, MiSource, Model, Pass, Population};
use crate::training::train::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScore {
    pub roi: usize,
    pub name: String,
    pub score: f64,
    /// 1-based position in the descending ranking.
    pub rank: usize,
}

/// Symmetric KL between the subject's biomarker distribution and the one
/// obtained with each ROI's node embedding zeroed before pooling.
pub fn occlusion_shifts(model: &Model, subject: &Subject) -> Result<Vec<f64>> {
    let mut tape = Tape::untraced();
    let mut rng = stream(0, 0);
    let g = &subject.graph;
    let z_o = model.encoder.encode(
        &mut tape,
        &model.store,
        &g.node_features,
        &g.adjacency,
        Mode::Infer,
        Dropout::NONE,
        &mut rng,
    )?;
    let z = tape.value(z_o).clone();
    let (n, d) = (z.rows(), z.cols());
    let mut sum = vec![0.0; d];
    for i in 0..n {
        for (s, v) in sum.iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    let pooled = Tensor::from_fn(n + 1, d, |r, c| {
        if r == 0 {
            sum[c] / n as f64
        } else {
            (sum[c] - z.get(r - 1, c)) / n as f64
        }
    });
    let p = tape.constant(pooled);
    let enc = model.bib.encode(&mut tape, &model.store, p, Mode::Infer, &mut rng)?;
    let mu = tape.value(enc.mu).clone();
    let sigma = tape.value(enc.logvar).map(|v| (0.5 * v).exp());
    (1..=n)
        .map(|r| symmetric_kl_diag(mu.row(0), sigma.row(0), mu.row(r), sigma.row(r)))
        .collect()
}

/// Mean occlusion shift per ROI over the cohort, normalized to sum to 1 and
/// ranked in descending order (ties by ROI index).
pub fn explain_biomarkers(model: &Model, cohort: &Cohort) -> Result<Vec<RoiScore>> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    if cohort.is_empty() {
        return Err(Error::invalid("explain needs at least one subject"));
    }
    let n = cohort.roi_count();
    let mut scores = vec![0.0; n];
    for s in &cohort.subjects {
        for (acc, v) in scores.iter_mut().zip(occlusion_shifts(model, s)?) {
            *acc += v / cohort.len() as f64;
        }
    }
    let total: f64 = scores.iter().sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("explain_biomarkers".into()));
    }
    for s in &mut scores {
        *s = if total > 0.0 { *s / total } else { 1.0 / n as f64 };
    }
    let names = cohort.roi_names();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .iter()
        .enumerate()
        .map(|(rank, &roi)| RoiScore {
            roi,
            name: names.get(roi).cloned().unwrap_or_else(|| format!("roi_{roi}")),
            score: scores[roi],
            rank: rank + 1,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationAttribution {
    pub relation: Relation,
    pub alpha: f64,
    pub mi: f64,
    /// Drop in mean log-likelihood of the true labels when the relation's
    /// adjacency is zeroed at inference.
    pub loglik_drop: f64,
    pub acc_drop: f64,
    /// Largest absolute change of any `Z_H` entry under the ablation.
    pub z_h_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub alpha: Vec<f64>,
    pub mi: Vec<f64>,
    pub equivalence: Vec<Vec<u8>>,
    pub sigma_sim: f64,
    pub relations: Vec<RelationAttribution>,
}

struct Inference {
    alpha: Vec<f64>,
    z_h: Tensor,
    prob_pos: Vec<f64>,
}

fn infer(model: &Model, pop: &Population, cohort: &Cohort, run: &RunConfig) -> Result<Inference> {
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
    let h = fwd.hetero.as_ref().expect("population supplied");
    let probs = tape.value(h.logits_mu).row_softmax();
    Ok(Inference {
        alpha: tape.value(h.alpha).data().to_vec(),
        z_h: tape.value(h.z_h).clone(),
        prob_pos: (0..probs.rows()).map(|i| probs.get(i, 1)).collect(),
    })
}

fn label_fit(cohort: &Cohort, rows: &[usize], prob_pos: &[f64]) -> (f64, f64) {
    let labels: Vec<usize> = rows.iter().map(|&i| cohort.subjects[i].label).collect();
    let pred: Vec<usize> = rows.iter().map(|&i| usize::from(prob_pos[i] > 0.5)).collect();
    let loglik = rows
        .iter()
        .zip(&labels)
        .map(|(&i, &y)| {
            let p = if y == 1 { prob_pos[i] } else { 1.0 - prob_pos[i] };
            p.max(1e-300).ln()
        })
        .sum::<f64>()
        / rows.len().max(1) as f64;
    (loglik, accuracy(&labels, &pred))
}

/// Final attention, MI, `S` and a per-relation ablation over `rows`.
pub fn explain_attention(
    model: &Model,
    population: Option<&Population>,
    cohort: &Cohort,
    rows: &[usize],
    run: &RunConfig,
) -> Result<AttentionReport> {
    let pop = population.ok_or_else(|| Error::invalid("model has no population graph (warm-up only)"))?;
    if pop.graphs.node_count() != cohort.len() {
        return Err(Error::invalid("population graph and cohort differ in size"));
    }
    let base = infer(model, pop, cohort, run)?;
    let (base_ll, base_acc) = label_fit(cohort, rows, &base.prob_pos);
    let mut relations = Vec::with_capacity(Relation::ALL.len());
    for r in Relation::ALL {
        let ablated = infer(model, &pop.without(r, model), cohort, run)?;
        let (ll, acc) = label_fit(cohort, rows, &ablated.prob_pos);
        relations.push(RelationAttribution {
            relation: r,
            alpha: base.alpha[r.index()],
            mi: pop.mi[r.index()],
            loglik_drop: base_ll - ll,
            acc_drop: base_acc - acc,
            z_h_change: base.z_h.max_abs_diff(&ablated.z_h),
        });
    }
    Ok(AttentionReport {
        alpha: base.alpha,
        mi: pop.mi.clone(),
        equivalence: pop.equivalence.rows().to_vec(),
        sigma_sim: pop.graphs.sigma_sim,
        relations,
    })
}
