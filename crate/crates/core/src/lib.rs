//! Brain-connectome classification with information-bottleneck pooling and a
//! heterogeneous population graph.
//!
//! The pipeline runs in two stages. Each subject's ROI time series becomes a
//! Fisher-z connectivity graph, which an attention/GNN encoder compresses into
//! a Gaussian biomarker vector ([`graphformer`]). Subjects then become nodes
//! of four demographic meta-path graphs ([`popgraph`]); WL structural
//! equivalence ([`wl`]) ties attention weights of look-alike meta-paths, and a
//! second bottleneck head classifies the fused representation ([`hgan`]).
//!
//! Everything is differentiated by the small tape in [`autodiff`].

pub mod autodiff;
pub mod connectome;
pub mod error;
pub mod graphformer;
pub mod hgan;
pub mod io;
pub mod optim;
pub mod popgraph;
pub mod training;
pub mod wl;

pub use error::{Error, Result};
