//! Individual-level encoder.
//!
//! Node features are projected to `Z0`, mixed by a single kernelized global
//! attention layer and a residual GCN, blended, mean-pooled and compressed by
//! a variational bottleneck into a per-subject biomarker `T`.
//!
//! Learnable blend weights `λ` and `γ` are stored unconstrained and squashed
//! by a sigmoid, so the effective values always lie in (0, 1).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::variational::{kl_rows_to_standard, sigma_from_logvar, standard_normal};
use crate::autodiff::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on `|N_ii|` before inversion.
pub const NORMALIZER_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dropout settings applied in [`Mode::Train`] only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub features: f64,
    pub edges: f64,
}

impl Dropout {
    pub const NONE: Dropout = Dropout {
        features: 0.0,
        edges: 0.0,
    };
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Drops each undirected edge independently with probability `p`.
pub fn edge_dropout(adj: &Tensor, p: f64, rng: &mut impl Rng) -> Tensor {
    let n = adj.rows();
    let mut out = adj.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            if adj.get(i, j) != 0.0 && rng.random::<f64>() < p {
                out.set(i, j, 0.0);
                out.set(j, i, 0.0);
            }
        }
    }
    out
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalized_adjacency(adj: &Tensor) -> Tensor {
    let n = adj.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / (adj.row(i).iter().sum::<f64>() + 1.0).sqrt())
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let a = adj.get(i, j) + if i == j { 1.0 } else { 0.0 };
        inv_sqrt[i] * a * inv_sqrt[j]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Node-feature width `F`.
    pub in_dim: usize,
    /// Embedding width `d`.
    pub d: usize,
    /// Biomarker width `d_T`.
    pub d_t: usize,
}

/// Parameter handles of the attention/GNN encoder.
#[derive(Clone, Debug)]
pub struct GraphFormerParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub lambda_raw: ParamId,
    pub gnn_w: ParamId,
    pub gamma_raw: ParamId,
    /// When false, `λ` is forced to 0 and the attention branch is skipped.
    pub global_attention: bool,
}

/// Parameter handles of the bottleneck pooling head.
#[derive(Clone, Debug)]
pub struct BibParams {
    pub mu_w1: ParamId,
    pub mu_b1: ParamId,
    pub mu_w2: ParamId,
    pub mu_b2: ParamId,
    pub logvar_w1: ParamId,
    pub logvar_b1: ParamId,
    pub logvar_w2: ParamId,
    pub logvar_b2: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

pub(crate) fn affine(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// `relu(x W1 + b1) W2 + b2`.
pub(crate) fn mlp2(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    (w1, b1, w2, b2): (ParamId, ParamId, ParamId, ParamId),
) -> Result<Var> {
    let h = affine(tape, store, x, w1, b1)?;
    let h = tape.relu(h);
    affine(tape, store, h, w2, b2)
}

impl GraphFormerParams {
    pub fn new(
        store: &mut ParamStore,
        dims: EncoderDims,
        global_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = dims.d;
        Ok(Self {
            proj_w: store.add_glorot("gf.proj_w", dims.in_dim, d, rng)?,
            proj_b: store.add_zeros("gf.proj_b", 1, d)?,
            query_w: store.add_glorot("gf.query_w", d, d, rng)?,
            query_b: store.add_zeros("gf.query_b", 1, d)?,
            key_w: store.add_glorot("gf.key_w", d, d, rng)?,
            key_b: store.add_zeros("gf.key_b", 1, d)?,
            value_w: store.add_glorot("gf.value_w", d, d, rng)?,
            value_b: store.add_zeros("gf.value_b", 1, d)?,
            // raw 0 → effective 0.5
            lambda_raw: store.add_zeros("gf.lambda_raw", 1, 1)?,
            gnn_w: store.add_glorot("gf.gnn_w", d, d, rng)?,
            gamma_raw: store.add_zeros("gf.gamma_raw", 1, 1)?,
            global_attention,
        })
    }

    /// Effective `λ`; 0 when global attention is disabled.
    pub fn lambda(&self, store: &ParamStore) -> f64 {
        if self.global_attention {
            sigmoid(store.value(self.lambda_raw).item())
        } else {
            0.0
        }
    }

    pub fn gamma(&self, store: &ParamStore) -> f64 {
        sigmoid(store.value(self.gamma_raw).item())
    }

    /// `Z0 = X W_I + b_I`.
    pub fn project_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        affine(tape, store, x, self.proj_w, self.proj_b)
    }

    /// Kernelized global attention blended with `Z0` by `λ`.
    pub fn global_attention(&self, tape: &mut Tape, store: &ParamStore, z0: Var) -> Result<Var> {
        if !self.global_attention {
            return Ok(z0);
        }
        let n = tape.shape(z0)[0];
        let inv_n = 1.0 / n as f64;
        let q = affine(tape, store, z0, self.query_w, self.query_b)?;
        let k = affine(tape, store, z0, self.key_w, self.key_b)?;
        let v = affine(tape, store, z0, self.value_w, self.value_b)?;
        let q_norm = tape.frobenius_norm(q);
        if tape.item(q_norm) == 0.0 {
            return Err(Error::DegenerateProjection("Q"));
        }
        let k_norm = tape.frobenius_norm(k);
        if tape.item(k_norm) == 0.0 {
            return Err(Error::DegenerateProjection("K"));
        }
        let qn = tape.div_by(q, q_norm)?;
        let kn = tape.div_by(k, k_norm)?;

        // N = diag(1 + (1/n)·Q̃(K̃ᵀe)), evaluated as Q̃ · (column sums of K̃)ᵀ
        let k_colsum = tape.sum_rows(kn);
        let qk_e = tape.matmul_nt(qn, k_colsum)?;
        let qk_e = tape.scale(qk_e, inv_n);
        let normalizer = tape.shift(qk_e, 1.0);
        let normalizer = tape.clamp_magnitude(normalizer, NORMALIZER_FLOOR);

        // V + (1/n)·Q̃(K̃ᵀV): two n×d by d×d products
        let ktv = tape.matmul_tn(kn, v)?;
        let mixed = tape.matmul(qn, ktv)?;
        let mixed = tape.scale(mixed, inv_n);
        let numerator = tape.add(v, mixed)?;
        let attended = tape.div_col(numerator, normalizer)?;

        let lambda_raw = tape.param(store, self.lambda_raw);
        let lambda = tape.sigmoid(lambda_raw);
        let neg = tape.scale(lambda, -1.0);
        let one_minus = tape.shift(neg, 1.0);
        let a = tape.scale_by(attended, lambda)?;
        let b = tape.scale_by(z0, one_minus)?;
        tape.add(a, b)
    }

    /// `ReLU(Â Z0 W_gnn)` for a pre-normalized adjacency `Â`.
    pub fn residual_gnn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: Var,
        norm_adj: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.gnn_w);
        let zw = tape.matmul(z0, w)?;
        let prop = tape.matmul(norm_adj, zw)?;
        Ok(tape.relu(prop))
    }

    /// `Z_O = (1 − γ)·Z + γ·gnn`.
    pub fn integrate(&self, tape: &mut Tape, store: &ParamStore, z: Var, gnn: Var) -> Result<Var> {
        let gamma_raw = tape.param(store, self.gamma_raw);
        let gamma = tape.sigmoid(gamma_raw);
        let neg = tape.scale(gamma, -1.0);
        let one_minus = tape.shift(neg, 1.0);
        let a = tape.scale_by(z, one_minus)?;
        let b = tape.scale_by(gnn, gamma)?;
        tape.add(a, b)
    }

    /// Full encoder for one subject, returning `Z_O`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        node_features: &Tensor,
        adjacency: &Tensor,
        mode: Mode,
        dropout: Dropout,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let x = tape.constant(node_features.clone());
        let mut z0 = self.project_features(tape, store, x)?;
        let adj = if mode == Mode::Train && dropout.edges > 0.0 {
            edge_dropout(adjacency, dropout.edges, rng)
        } else {
            adjacency.clone()
        };
        if mode == Mode::Train && dropout.features > 0.0 {
            let [r, c] = tape.shape(z0);
            z0 = tape.mul_const(z0, Rc::new(dropout_mask(r, c, dropout.features, rng)))?;
        }
        let z = self.global_attention(tape, store, z0)?;
        let norm_adj = tape.constant(normalized_adjacency(&adj));
        let gnn = self.residual_gnn(tape, store, z0, norm_adj)?;
        self.integrate(tape, store, z, gnn)
    }
}

/// Traced Gaussian encoding of a batch of pooled vectors.
#[derive(Clone, Copy, Debug)]
pub struct GaussianEncoding {
    pub mu: Var,
    pub logvar: Var,
    /// Reparameterized sample in training mode, `mu` at inference.
    pub sample: Var,
}

/// Traced loss with both components kept separately.
#[derive(Clone, Copy, Debug)]
pub struct IbLoss {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
}

/// Compressed per-subject representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerRep {
    pub subject_id: String,
    pub t: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BibParams {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, rng: &mut impl Rng) -> Result<Self> {
        let (d, dt) = (dims.d, dims.d_t);
        if dt < 2 {
            return Err(Error::invalid(format!("d_T must be at least 2, got {dt}")));
        }
        Ok(Self {
            mu_w1: store.add_glorot("bib.mu_w1", d, d, rng)?,
            mu_b1: store.add_zeros("bib.mu_b1", 1, d)?,
            mu_w2: store.add_glorot("bib.mu_w2", d, dt, rng)?,
            mu_b2: store.add_zeros("bib.mu_b2", 1, dt)?,
            logvar_w1: store.add_glorot("bib.logvar_w1", d, d, rng)?,
            logvar_b1: store.add_zeros("bib.logvar_b1", 1, d)?,
            logvar_w2: store.add_glorot("bib.logvar_w2", d, dt, rng)?,
            logvar_b2: store.add_zeros("bib.logvar_b2", 1, dt)?,
            cls_w: store.add_glorot("bib.cls_w", dt, 2, rng)?,
            cls_b: store.add_zeros("bib.cls_b", 1, 2)?,
        })
    }

    /// Node-mean pooling with optional feature dropout, giving `1 x d`.
    pub fn pool(
        &self,
        tape: &mut Tape,
        z_o: Var,
        mode: Mode,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let pooled = tape.mean_rows(z_o);
        if mode == Mode::Train && dropout > 0.0 {
            let d = tape.shape(pooled)[1];
            return tape.mul_const(pooled, Rc::new(dropout_mask(1, d, dropout, rng)));
        }
        Ok(pooled)
    }

    /// Gaussian encoding of pooled rows (`n x d`, one subject per row).
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<GaussianEncoding> {
        let mu = mlp2(tape, store, pooled, (self.mu_w1, self.mu_b1, self.mu_w2, self.mu_b2))?;
        let logvar = mlp2(
            tape,
            store,
            pooled,
            (self.logvar_w1, self.logvar_b1, self.logvar_w2, self.logvar_b2),
        )?;
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

    /// Classifier logits `n x 2` for biomarker rows.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, t: Var) -> Result<Var> {
        affine(tape, store, t, self.cls_w, self.cls_b)
    }

    /// Mean NLL of the sampled biomarker plus `β`·mean KL, over `rows`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &GaussianEncoding,
        rows: &Rc<[usize]>,
        labels: &Rc<[usize]>,
        beta: f64,
    ) -> Result<IbLoss> {
        let logits = self.logits(tape, store, enc.sample)?;
        ib_loss(tape, logits, enc, rows, labels, beta)
    }
}

/// Mean cross-entropy of `logits` rows selected by `rows` against `labels`.
pub fn masked_nll(tape: &mut Tape, logits: Var, rows: &Rc<[usize]>, labels: &Rc<[usize]>) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let sel = tape.select_rows(logits, rows.clone())?;
    let logp = tape.log_softmax(sel);
    let picked = tape.pick_per_row(logp, labels.clone())?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// `mean NLL + β · mean KL` with both parts reported.
pub fn ib_loss(
    tape: &mut Tape,
    logits: Var,
    enc: &GaussianEncoding,
    rows: &Rc<[usize]>,
    labels: &Rc<[usize]>,
    beta: f64,
) -> Result<IbLoss> {
    let nll = masked_nll(tape, logits, rows, labels)?;
    let kl_rows = kl_rows_to_standard(tape, enc.mu, enc.logvar)?;
    let kl_sel = tape.select_rows(kl_rows, rows.clone())?;
    let kl = tape.mean(kl_sel);
    let weighted = tape.scale(kl, beta);
    let total = tape.add(nll, weighted)?;
    Ok(IbLoss { total, nll, kl })
}
