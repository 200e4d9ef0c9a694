//! The end-to-end model: individual encoder, population graph and both heads.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::graphformer::{
    ib_loss, masked_nll, BibParams, Dropout, EncoderDims, GaussianEncoding, GraphFormerParams, IbLoss, Mode,
};
use crate::hgan::{
    aggregate, hg_loss, metapath_attention, regularizers, DemographicEncoder, GatGraph, GatParams, HgWeights,
    HibParams, MetaPathAttentionParams, Regularizers, RELATION_COUNT,
};
use crate::popgraph::{build_metapath_graphs, MetaPathGraphSet, PopGraphConfig, Relation};
use crate::training::cohort::Cohort;
use crate::training::config::{ModelConfig, TrainConfig};
use crate::wl::{build_equivalence_matrix, EquivalenceMatrix};

/// `L_cls + ζ·L_BIB + ω·L_HG`.
pub fn total_loss(l_cls: f64, l_bib: f64, l_hg: f64, zeta: f64, omega: f64) -> f64 {
    l_cls + zeta * l_bib + omega * l_hg
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub store: ParamStore,
    pub encoder: GraphFormerParams,
    pub bib: BibParams,
    pub gats: Vec<GatParams>,
    pub attention: MetaPathAttentionParams,
    pub hib: HibParams,
    pub demographics: DemographicEncoder,
    /// Set once training has finished.
    pub trained: bool,
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        feature_dim: usize,
        demographics: DemographicEncoder,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            in_dim: feature_dim,
            d: config.d,
            d_t: config.d_t,
        };
        let encoder = GraphFormerParams::new(&mut store, dims, config.global_attention, rng)?;
        let bib = BibParams::new(&mut store, dims, rng)?;
        let gats = Relation::ALL
            .iter()
            .map(|&r| GatParams::new(&mut store, r, config.d_t, config.d, rng))
            .collect::<Result<Vec<_>>>()?;
        let attention = MetaPathAttentionParams::new(&mut store, config.d, config.d_att, rng)?;
        let hib = HibParams::new(&mut store, config.d + demographics.width(), config.d_h, rng)?;
        Ok(Self {
            config: config.clone(),
            feature_dim,
            store,
            encoder,
            bib,
            gats,
            attention,
            hib,
            demographics,
            trained: false,
        })
    }
}

/// Population graph state used by the second phase.
#[derive(Clone, Debug)]
pub struct Population {
    pub graphs: MetaPathGraphSet,
    pub equivalence: EquivalenceMatrix,
    /// Clamped MI estimate per relation from the latest training step.
    pub mi: Vec<f64>,
    pub gat_graphs: Vec<GatGraph>,
    pub demo_features: Tensor,
}

impl Population {
    pub fn new(graphs: MetaPathGraphSet, model: &Model, cohort: &Cohort) -> Result<Self> {
        let equivalence = build_equivalence_matrix(&graphs.adjacencies)?;
        let gat_graphs = graphs
            .adjacencies
            .iter()
            .map(|a| GatGraph::new(a, model.config.gat_edges))
            .collect();
        Ok(Self {
            graphs,
            equivalence,
            mi: vec![0.0; RELATION_COUNT],
            gat_graphs,
            demo_features: model.demographics.encode(&cohort.demographics()),
        })
    }

    /// Builds graphs from inference-mode biomarker means.
    pub fn build(model: &Model, cohort: &Cohort, config: &PopGraphConfig) -> Result<Self> {
        let mu = biomarker_means(model, cohort)?;
        let graphs = build_metapath_graphs(&mu, &cohort.demographics(), config)?;
        Self::new(graphs, model, cohort)
    }

    /// Copy with one relation's adjacency removed (self-loops only).
    pub fn without(&self, relation: Relation, model: &Model) -> Self {
        let mut p = self.clone();
        let n = self.graphs.node_count();
        let k = relation.index();
        p.graphs.adjacencies[k] = Tensor::zeros(n, n);
        p.gat_graphs[k] = GatGraph::new(&p.graphs.adjacencies[k], model.config.gat_edges);
        p
    }
}

/// Where the attention path gets `I(T; Z_k)` from.
pub enum MiSource<'a> {
    Fixed(&'a [f64]),
    /// Called with the biomarker values and each relation's `Z_k` values.
    Estimate(&'a mut dyn FnMut(&Tensor, &[Tensor]) -> Result<Vec<f64>>),
}

#[derive(Clone, Debug)]
pub struct HeteroForward {
    pub z_set: Vec<Var>,
    pub alpha: Var,
    pub z_h: Var,
    pub enc: GaussianEncoding,
    pub logits_mu: Var,
    pub logits_sample: Var,
    pub mi: Vec<f64>,
    pub equivalence: EquivalenceMatrix,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub biomarker: GaussianEncoding,
    pub bib_logits_mu: Var,
    pub bib_logits_sample: Var,
    pub hetero: Option<HeteroForward>,
}

impl Forward {
    /// Classifier used for prediction: the heterogeneous head when present.
    pub fn prediction_logits(&self) -> Var {
        self.hetero.as_ref().map_or(self.bib_logits_mu, |h| h.logits_mu)
    }
}

/// Pooled `N x d` embeddings of every subject.
pub fn encode_subjects(
    tape: &mut Tape,
    model: &Model,
    cohort: &Cohort,
    mode: Mode,
    dropout: Dropout,
    rng: &mut impl Rng,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(cohort.len());
    for s in &cohort.subjects {
        let z_o = model.encoder.encode(
            tape,
            &model.store,
            &s.graph.node_features,
            &s.graph.adjacency,
            mode,
            dropout,
            rng,
        )?;
        rows.push(model.bib.pool(tape, z_o, mode, 0.0, rng)?);
    }
    tape.concat_rows(&rows)
}

/// Inference-mode biomarker means, `N x d_T`.
pub fn biomarker_means(model: &Model, cohort: &Cohort) -> Result<Tensor> {
    let mut tape = Tape::untraced();
    // inference never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pooled = encode_subjects(&mut tape, model, cohort, Mode::Infer, Dropout::NONE, &mut rng)?;
    let enc = model.bib.encode(&mut tape, &model.store, pooled, Mode::Infer, &mut rng)?;
    Ok(tape.value(enc.mu).clone())
}

/// Settings of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub mode: Mode,
    pub dropout: Dropout,
    /// MI damping strength in the meta-path attention.
    pub beta_h: f64,
}

impl Pass {
    pub fn train(config: &TrainConfig) -> Self {
        Self {
            mode: Mode::Train,
            dropout: Dropout {
                features: config.dropout,
                edges: config.edge_dropout,
            },
            beta_h: config.beta_h,
        }
    }

    pub fn infer(config: &TrainConfig) -> Self {
        Self {
            mode: Mode::Infer,
            dropout: Dropout::NONE,
            beta_h: config.beta_h,
        }
    }
}

pub fn forward(
    tape: &mut Tape,
    model: &Model,
    cohort: &Cohort,
    population: Option<&Population>,
    mi: MiSource<'_>,
    pass: Pass,
    rng: &mut impl Rng,
) -> Result<Forward> {
    let store = &model.store;
    let mode = pass.mode;
    let pooled = encode_subjects(tape, model, cohort, mode, pass.dropout, rng)?;
    let biomarker = model.bib.encode(tape, store, pooled, mode, rng)?;
    let bib_logits_mu = model.bib.logits(tape, store, biomarker.mu)?;
    let bib_logits_sample = if mode == Mode::Train {
        model.bib.logits(tape, store, biomarker.sample)?
    } else {
        bib_logits_mu
    };
    let hetero = match population {
        None => None,
        Some(pop) => Some(hetero_forward(tape, model, pop, biomarker.sample, mi, pass, rng)?),
    };
    Ok(Forward {
        biomarker,
        bib_logits_mu,
        bib_logits_sample,
        hetero,
    })
}

fn hetero_forward(
    tape: &mut Tape,
    model: &Model,
    pop: &Population,
    t: Var,
    mi: MiSource<'_>,
    pass: Pass,
    rng: &mut impl Rng,
) -> Result<HeteroForward> {
    let store = &model.store;
    let mode = pass.mode;
    let z_set = model
        .gats
        .iter()
        .zip(&pop.gat_graphs)
        .map(|(g, graph)| g.forward(tape, store, t, graph))
        .collect::<Result<Vec<_>>>()?;
    let mi = match mi {
        MiSource::Fixed(v) => v.to_vec(),
        MiSource::Estimate(f) => {
            let t_val = tape.value(t).clone();
            let z_vals: Vec<Tensor> = z_set.iter().map(|&z| tape.value(z).clone()).collect();
            f(&t_val, &z_vals)?
        }
    };
    let alpha = metapath_attention(
        tape,
        store,
        &model.attention,
        &z_set,
        &pop.equivalence,
        &mi,
        pass.beta_h,
    )?;
    let z_h = aggregate(tape, &z_set, alpha)?;
    let demo = tape.constant(pop.demo_features.clone());
    let enc = model.hib.encode(tape, store, z_h, demo, mode, rng)?;
    let logits_mu = model.hib.logits(tape, store, enc.mu)?;
    let logits_sample = if mode == Mode::Train {
        model.hib.logits(tape, store, enc.sample)?
    } else {
        logits_mu
    };
    Ok(HeteroForward {
        z_set,
        alpha,
        z_h,
        enc,
        logits_mu,
        logits_sample,
        mi,
        equivalence: pop.equivalence.clone(),
    })
}

/// Traced loss terms of one forward pass over the labeled `rows`.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub bib: IbLoss,
    pub hetero: Option<HeteroLoss>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeteroLoss {
    pub hg: Var,
    pub hib: IbLoss,
    pub reg: Regularizers,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub bib: f64,
    pub bib_nll: f64,
    pub bib_kl: f64,
    pub hg: Option<f64>,
    pub hib: Option<f64>,
    pub hib_nll: Option<f64>,
    pub hib_kl: Option<f64>,
    pub structure: Option<f64>,
    pub sparsity: Option<f64>,
    pub mi: Option<f64>,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.item(x);
        let h = self.hetero.as_ref();
        LossValues {
            total: v(self.total),
            cls: v(self.cls),
            bib: v(self.bib.total),
            bib_nll: v(self.bib.nll),
            bib_kl: v(self.bib.kl),
            hg: h.map(|h| v(h.hg)),
            hib: h.map(|h| v(h.hib.total)),
            hib_nll: h.map(|h| v(h.hib.nll)),
            hib_kl: h.map(|h| v(h.hib.kl)),
            structure: h.map(|h| v(h.reg.structure)),
            sparsity: h.map(|h| v(h.reg.sparsity)),
            mi: h.map(|h| v(h.reg.mi)),
        }
    }
}

/// Without the heterogeneous branch: `CE(T-head on μ) + ζ·L_BIB`.
/// With it: `CE(H-head on μ_H) + ζ·L_BIB + ω·L_HG`.
pub fn loss_terms(
    tape: &mut Tape,
    fwd: &Forward,
    rows: &Rc<[usize]>,
    labels: &Rc<[usize]>,
    config: &TrainConfig,
) -> Result<LossTerms> {
    let bib = ib_loss(tape, fwd.bib_logits_sample, &fwd.biomarker, rows, labels, config.beta)?;
    let weighted_bib = tape.scale(bib.total, config.zeta);
    match &fwd.hetero {
        None => {
            let cls = masked_nll(tape, fwd.bib_logits_mu, rows, labels)?;
            let total = tape.add(cls, weighted_bib)?;
            Ok(LossTerms {
                total,
                cls,
                bib,
                hetero: None,
            })
        }
        Some(h) => {
            let cls = masked_nll(tape, h.logits_mu, rows, labels)?;
            let hib = ib_loss(tape, h.logits_sample, &h.enc, rows, labels, config.beta_h)?;
            let reg = regularizers(tape, &h.z_set, &h.equivalence, h.alpha, &h.mi)?;
            let weights = HgWeights {
                mu: config.mu,
                kappa: config.kappa,
                eta: config.eta,
            };
            let hg = hg_loss(tape, hib.total, &reg, &weights)?;
            let weighted_hg = tape.scale(hg, config.omega);
            let total = tape.add(cls, weighted_bib)?;
            let total = tape.add(total, weighted_hg)?;
            Ok(LossTerms {
                total,
                cls,
                bib,
                hetero: Some(HeteroLoss { hg, hib, reg }),
            })
        }
    }
}
