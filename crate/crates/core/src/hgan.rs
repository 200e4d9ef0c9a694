//! Population-level encoder over the four meta-path graphs.
//!
//! Each relation gets its own single-head graph attention layer. A
//! Donsker-Varadhan critic per relation measures `I(T; Z_k)`, which damps the
//! relation's attention score. Scores of WL-equivalent relations are replaced
//! by their class mean before the softmax, so tied relations receive
//! bitwise-identical weights. The fused `Z_H` is concatenated with encoded
//! demographics and passed through a second Gaussian bottleneck.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::variational::{sigma_from_logvar, standard_normal};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphformer::{affine, mlp2, GaussianEncoding, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::popgraph::{Demographics, Relation};
use crate::wl::EquivalenceMatrix;

pub const RELATION_COUNT: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Smallest cohort the MI critic accepts.
pub const MIN_MI_SAMPLES: usize = 8;

// ---------------------------------------------------------------------------
// Demographic features

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemographicEncoding {
    /// One column per field: category rank scaled to [0, 1], min-max age.
    Ordinal,
    /// One-hot site, sex and handedness plus min-max age.
    OneHot,
}

/// Value used for a missing field in every encoding.
pub const MISSING_FEATURE: f64 = -1.0;

/// Category vocabularies and age range fitted on a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicEncoder {
    pub mode: DemographicEncoding,
    pub sites: Vec<u32>,
    pub sexes: Vec<u32>,
    pub hands: Vec<u32>,
    pub age_min: f64,
    pub age_max: f64,
}

fn vocabulary(values: impl Iterator<Item = Option<u32>>) -> Vec<u32> {
    let mut v: Vec<u32> = values.flatten().collect();
    v.sort_unstable();
    v.dedup();
    v
}

impl DemographicEncoder {
    pub fn fit(demos: &[Demographics], mode: DemographicEncoding) -> Self {
        let ages = demos.iter().filter_map(|d| d.age);
        let (age_min, age_max) = ages.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
            (lo.min(a), hi.max(a))
        });
        let (age_min, age_max) = if age_min.is_finite() { (age_min, age_max) } else { (0.0, 0.0) };
        Self {
            mode,
            sites: vocabulary(demos.iter().map(|d| d.site)),
            sexes: vocabulary(demos.iter().map(|d| d.sex)),
            hands: vocabulary(demos.iter().map(|d| d.handedness)),
            age_min,
            age_max,
        }
    }

    pub fn width(&self) -> usize {
        match self.mode {
            DemographicEncoding::Ordinal => 4,
            DemographicEncoding::OneHot => self.sites.len() + self.sexes.len() + self.hands.len() + 1,
        }
    }

    fn scaled_age(&self, age: Option<f64>) -> f64 {
        match age {
            None => MISSING_FEATURE,
            Some(_) if self.age_max <= self.age_min => 0.0,
            Some(a) => ((a - self.age_min) / (self.age_max - self.age_min)).clamp(0.0, 1.0),
        }
    }

    fn push_categorical(&self, out: &mut Vec<f64>, vocab: &[u32], value: Option<u32>) {
        let rank = value.and_then(|v| vocab.binary_search(&v).ok());
        match self.mode {
            DemographicEncoding::Ordinal => out.push(match rank {
                None => MISSING_FEATURE,
                Some(_) if vocab.len() < 2 => 0.0,
                Some(r) => r as f64 / (vocab.len() - 1) as f64,
            }),
            DemographicEncoding::OneHot => {
                let start = out.len();
                out.extend(std::iter::repeat_n(0.0, vocab.len()));
                match (value, rank) {
                    (Some(_), Some(r)) => out[start + r] = 1.0,
                    (None, _) => out[start..].fill(MISSING_FEATURE),
                    // unseen category: all zeros
                    (Some(_), None) => {}
                }
            }
        }
    }

    /// `N x width` feature matrix.
    pub fn encode(&self, demos: &[Demographics]) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(demos.len() * w);
        for d in demos {
            self.push_categorical(&mut data, &self.sites, d.site);
            self.push_categorical(&mut data, &self.sexes, d.sex);
            self.push_categorical(&mut data, &self.hands, d.handedness);
            data.push(self.scaled_age(d.age));
        }
        Tensor::from_vec(demos.len(), w, data).expect("row width fixed by encoder")
    }
}

// ---------------------------------------------------------------------------
// Graph attention

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatEdges {
    /// Adjacency only decides which logits are open.
    Mask,
    /// Open logits also get `ln A_ij` added (self-loops count as weight 1).
    Weighted,
}

/// Constant inputs a GAT layer needs from one adjacency.
#[derive(Clone, Debug)]
pub struct GatGraph {
    pub mask: Tensor,
    pub bias: Option<Tensor>,
}

impl GatGraph {
    pub fn new(adj: &Tensor, edges: GatEdges) -> Self {
        let n = adj.rows();
        let open = |i: usize, j: usize| i == j || adj.get(i, j) > 0.0;
        let mask = Tensor::from_fn(n, n, |i, j| if open(i, j) { 1.0 } else { 0.0 });
        let bias = match edges {
            GatEdges::Mask => None,
            GatEdges::Weighted => Some(Tensor::from_fn(n, n, |i, j| {
                if i != j && adj.get(i, j) > 0.0 {
                    adj.get(i, j).ln()
                } else {
                    0.0
                }
            })),
        };
        Self { mask, bias }
    }
}

#[derive(Clone, Debug)]
pub struct GatParams {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

impl GatParams {
    pub fn new(store: &mut ParamStore, relation: Relation, d_t: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let p = format!("gat.{}", relation.name());
        Ok(Self {
            w: store.add_glorot(format!("{p}.w"), d_t, d, rng)?,
            a_src: store.add_glorot(format!("{p}.a_src"), d, 1, rng)?,
            a_dst: store.add_glorot(format!("{p}.a_dst"), d, 1, rng)?,
        })
    }

    /// `tanh(softmax_masked(leaky(a_srcᵀWt_i + a_dstᵀWt_j)) · TW)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, t: Var, graph: &GatGraph) -> Result<Var> {
        let w = tape.param(store, self.w);
        let h = tape.matmul(t, w)?;
        let a_src = tape.param(store, self.a_src);
        let a_dst = tape.param(store, self.a_dst);
        let s = tape.matmul(h, a_src)?;
        let r = tape.matmul(h, a_dst)?;
        let e = tape.outer_sum(s, r)?;
        let mut e = tape.leaky_relu(e, LEAKY_SLOPE);
        if let Some(bias) = &graph.bias {
            let b = tape.constant(bias.clone());
            e = tape.add(e, b)?;
        }
        let att = tape.masked_row_softmax(e, &graph.mask)?;
        let mixed = tape.matmul(att, h)?;
        Ok(tape.tanh(mixed))
    }
}

// ---------------------------------------------------------------------------
// Donsker-Varadhan mutual information

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvConfig {
    pub hidden: usize,
    /// Critic updates per outer training step.
    pub inner_steps: usize,
    pub lr: f64,
}

impl Default for DvConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            inner_steps: 5,
            lr: 1e-3,
        }
    }
}

/// Uniform random cyclic permutation (Sattolo); no index maps to itself.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// `max + ln(mean(exp(x − max)))` over all entries.
pub fn log_mean_exp(tape: &mut Tape, x: Var) -> Var {
    let m = tape
        .value(x)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.shift(x, -m);
    let e = tape.exp(shifted);
    let mean = tape.mean(e);
    let l = tape.ln(mean);
    tape.shift(l, m)
}

/// Critic `ψ(t, z)` with its own parameters and optimizer.
#[derive(Clone, Debug)]
pub struct DvEstimator {
    pub store: ParamStore,
    layers: (ParamId, ParamId, ParamId, ParamId),
    opt: Adam,
    config: DvConfig,
}

impl DvEstimator {
    pub fn new(t_dim: usize, z_dim: usize, config: DvConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let h = config.hidden;
        let layers = (
            store.add_glorot("dv.w1", t_dim + z_dim, h, rng)?,
            store.add_zeros("dv.b1", 1, h)?,
            store.add_glorot("dv.w2", h, 1, rng)?,
            store.add_zeros("dv.b2", 1, 1)?,
        );
        let opt = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        Ok(Self {
            store,
            layers,
            opt,
            config,
        })
    }

    pub fn config(&self) -> DvConfig {
        self.config
    }

    fn check(t: &Tensor, z: &Tensor) -> Result<()> {
        if t.rows() != z.rows() {
            return Err(Error::ShapeMismatch {
                op: "dv_mi_estimate",
                left: t.shape(),
                right: z.shape(),
            });
        }
        if t.rows() < MIN_MI_SAMPLES {
            return Err(Error::TooFewSamples {
                needed: MIN_MI_SAMPLES,
                got: t.rows(),
            });
        }
        Ok(())
    }

    /// `mean ψ(t_i, z_i) − log mean exp ψ(t_i, z_π(i))`.
    fn bound(&self, tape: &mut Tape, t: &Tensor, z: &Tensor, perm: &[usize]) -> Result<Var> {
        let tv = tape.constant(t.clone());
        let zv = tape.constant(z.clone());
        let zs = tape.constant(z.select_rows(perm));
        let joint_in = tape.concat_cols(&[tv, zv])?;
        let marg_in = tape.concat_cols(&[tv, zs])?;
        let joint = mlp2(tape, &self.store, joint_in, self.layers)?;
        let marg = mlp2(tape, &self.store, marg_in, self.layers)?;
        let first = tape.mean(joint);
        let second = log_mean_exp(tape, marg);
        tape.sub(first, second)
    }

    /// Unclamped estimate with a fresh shuffle.
    pub fn raw_estimate(&self, t: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        Self::check(t, z)?;
        let perm = derangement(t.rows(), rng);
        let mut tape = Tape::untraced();
        let b = self.bound(&mut tape, t, z, &perm)?;
        let v = tape.item(b);
        if !v.is_finite() {
            return Err(Error::NonFinite("dv_mi_estimate".into()));
        }
        Ok(v)
    }

    /// Estimate in nats, clamped to be nonnegative.
    pub fn estimate(&self, t: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        Ok(self.raw_estimate(t, z, rng)?.max(0.0))
    }

    /// One ascent step on the bound; returns the bound before the step.
    pub fn train_step(&mut self, t: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        Self::check(t, z)?;
        let perm = derangement(t.rows(), rng);
        let mut tape = Tape::new();
        let b = self.bound(&mut tape, t, z, &perm)?;
        let loss = tape.scale(b, -1.0);
        tape.check_finite()?;
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)?;
        self.opt.step(&mut self.store);
        Ok(tape.item(b))
    }

    /// `inner_steps` updates followed by a clamped estimate.
    pub fn fit_and_estimate(&mut self, t: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        for _ in 0..self.config.inner_steps {
            self.train_step(t, z, rng)?;
        }
        self.estimate(t, z, rng)
    }
}

// ---------------------------------------------------------------------------
// Meta-path attention and fusion

#[derive(Clone, Debug)]
pub struct MetaPathAttentionParams {
    /// `1 x d_att`.
    pub u: ParamId,
    /// `d x d_att`.
    pub w_att: ParamId,
    /// `1 x d_att`.
    pub b_att: ParamId,
}

impl MetaPathAttentionParams {
    pub fn new(store: &mut ParamStore, d: usize, d_att: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_att < 2 {
            return Err(Error::invalid(format!("d_att must be at least 2, got {d_att}")));
        }
        Ok(Self {
            u: store.add_glorot("att.u", 1, d_att, rng)?,
            w_att: store.add_glorot("att.w", d, d_att, rng)?,
            b_att: store.add_zeros("att.b", 1, d_att)?,
        })
    }
}

/// Row-stochastic matrix averaging each entry over its equivalence class.
pub fn class_mean_matrix(s: &EquivalenceMatrix) -> Tensor {
    let n = s.size();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        let size = (0..n).filter(|&j| s.get(i, j)).count() as f64;
        for j in 0..n {
            if s.get(i, j) {
                m.set(i, j, 1.0 / size);
            }
        }
    }
    m
}

/// Attention weights `1 x K` over the relations.
///
/// Scores are `uᵀ tanh(W z̄_k + b) · exp(−β_H · max(I_k, 0))`, averaged within
/// each `S` class and softmaxed. `mi` enters as a constant.
pub fn metapath_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MetaPathAttentionParams,
    z_set: &[Var],
    s: &EquivalenceMatrix,
    mi: &[f64],
    beta_h: f64,
) -> Result<Var> {
    let k = z_set.len();
    if s.size() != k || mi.len() != k {
        return Err(Error::invalid(format!(
            "{k} relations but S is {}x{} and {} MI values",
            s.size(),
            s.size(),
            mi.len()
        )));
    }
    let means: Vec<Var> = z_set.iter().map(|&z| tape.mean_rows(z)).collect();
    let zbar = tape.concat_rows(&means)?;
    let w = tape.param(store, params.w_att);
    let b = tape.param(store, params.b_att);
    let pre = tape.matmul(zbar, w)?;
    let pre = tape.add_row(pre, b)?;
    let h = tape.tanh(pre);
    let u = tape.param(store, params.u);
    let scores = tape.matmul_nt(u, h)?;
    let damp = Tensor::from_fn(1, k, |_, j| (-beta_h * mi[j].max(0.0)).exp());
    let damped = tape.mul_const(scores, Rc::new(damp))?;
    let m = tape.constant(class_mean_matrix(s));
    let tied = tape.matmul_nt(damped, m)?;
    Ok(tape.row_softmax(tied))
}

/// `Z_H = Σ_k α_k Z_k`.
pub fn aggregate(tape: &mut Tape, z_set: &[Var], alpha: Var) -> Result<Var> {
    let [r, c] = tape.shape(alpha);
    if r != 1 || c != z_set.len() || z_set.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            left: [1, z_set.len()],
            right: [r, c],
        });
    }
    let mut acc: Option<Var> = None;
    for (j, &z) in z_set.iter().enumerate() {
        let a = tape.element(alpha, 0, j)?;
        let term = tape.scale_by(z, a)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

// ---------------------------------------------------------------------------
// Heterogeneous bottleneck head

#[derive(Clone, Debug)]
pub struct HibParams {
    pub mu: (ParamId, ParamId, ParamId, ParamId),
    pub logvar: (ParamId, ParamId, ParamId, ParamId),
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl HibParams {
    pub fn new(store: &mut ParamStore, in_dim: usize, d_h: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_h < 2 {
            return Err(Error::invalid(format!("d_H must be at least 2, got {d_h}")));
        }
        let mut mlp = |name: &str, rng: &mut _| -> Result<(ParamId, ParamId, ParamId, ParamId)> {
            Ok((
                store.add_glorot(format!("hib.{name}_w1"), in_dim, d_h, rng)?,
                store.add_zeros(format!("hib.{name}_b1"), 1, d_h)?,
                store.add_glorot(format!("hib.{name}_w2"), d_h, d_h, rng)?,
                store.add_zeros(format!("hib.{name}_b2"), 1, d_h)?,
            ))
        };
        let mu = mlp("mu", rng)?;
        let logvar = mlp("logvar", rng)?;
        Ok(Self {
            mu,
            logvar,
            cls_w: store.add_glorot("hib.cls_w", d_h, 2, rng)?,
            cls_b: store.add_zeros("hib.cls_b", 1, 2)?,
        })
    }

    /// Gaussian encoding of `[Z_H ‖ D]` rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_h: Var,
        demographics: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<GaussianEncoding> {
        let x = tape.concat_cols(&[z_h, demographics])?;
        let mu = mlp2(tape, store, x, self.mu)?;
        let logvar = mlp2(tape, store, x, self.logvar)?;
        let sample = match mode {
            Mode::Infer => mu,
            Mode::Train => {
                let [r, c] = tape.shape(mu);
                let sigma = sigma_from_logvar(tape, logvar);
                let eps = tape.constant(standard_normal(r, c, rng));
                let noise = tape.mul(sigma, eps)?;
                tape.add(mu, noise)?
            }
        };
        Ok(GaussianEncoding { mu, logvar, sample })
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        affine(tape, store, z, self.cls_w, self.cls_b)
    }
}

// ---------------------------------------------------------------------------
// Regularizers and the heterogeneous objective

#[derive(Clone, Copy, Debug)]
pub struct Regularizers {
    pub structure: Var,
    pub sparsity: Var,
    pub mi: Var,
}

/// `Σ_{i≠j} S_ij ‖Z_i − Z_j‖²_F`, `‖α‖₁` and `Σ_k α_k I_k`.
pub fn regularizers(
    tape: &mut Tape,
    z_set: &[Var],
    s: &EquivalenceMatrix,
    alpha: Var,
    mi: &[f64],
) -> Result<Regularizers> {
    let k = z_set.len();
    let mut structure: Option<Var> = None;
    for i in 0..k {
        for j in 0..k {
            if i != j && s.get(i, j) {
                let diff = tape.sub(z_set[i], z_set[j])?;
                let sq = tape.sum_squares(diff);
                structure = Some(match structure {
                    None => sq,
                    Some(prev) => tape.add(prev, sq)?,
                });
            }
        }
    }
    let structure = structure.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let abs = tape.abs(alpha);
    let sparsity = tape.sum(abs);
    let weighted = tape.mul_const(alpha, Rc::new(Tensor::row_vector(mi)))?;
    let mi = tape.sum(weighted);
    Ok(Regularizers {
        structure,
        sparsity,
        mi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgWeights {
    pub mu: f64,
    pub kappa: f64,
    pub eta: f64,
}

impl HgWeights {
    /// `L_HIB + μ·L_struct + κ·L_sparse + η·L_MI` on plain numbers.
    pub fn combine(&self, hib: f64, structure: f64, sparsity: f64, mi: f64) -> f64 {
        hib + self.mu * structure + self.kappa * sparsity + self.eta * mi
    }
}

/// Traced `L_HG`.
pub fn hg_loss(tape: &mut Tape, hib: Var, reg: &Regularizers, weights: &HgWeights) -> Result<Var> {
    let a = tape.scale(reg.structure, weights.mu);
    let b = tape.scale(reg.sparsity, weights.kappa);
    let c = tape.scale(reg.mi, weights.eta);
    let sum = tape.add(hib, a)?;
    let sum = tape.add(sum, b)?;
    tape.add(sum, c)
}
