//! Spectral embedding of entropic optimal transport plans for multi-source
//! unsupervised domain adaptation.
//!
//! Sources are summarized by a labeled free-support Wasserstein barycenter;
//! entropic plans from the barycenter to every domain form a star-shaped
//! cross-domain graph whose normalized-Laplacian eigenvectors give each
//! sample a domain-invariant representation. Target samples are then
//! classified from the barycenter rows of that embedding.

pub mod barycenter;
pub mod classify;
pub mod error;
pub mod graph;
pub mod measures;
pub mod ot;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use barycenter::{Barycenter, BarycenterConfig, BarycenterInit};
pub use classify::{ClassifierConfig, EvalReport};
pub use error::{Result, SeotError};
pub use graph::{CrossDomainGraph, DomainTag, NodeRange};
pub use measures::{CostMatrix, DataMatrix, DiscreteMeasure, LabeledDomain};
pub use ot::{SinkhornConfig, TransportPlan};
pub use pipeline::{run_seot, run_two_domain, Diagnostics, KMode, SeotConfig, SeotRun};
pub use spectral::{IsolatedPolicy, SpectralEmbedding};
pub use synth::{Shift, SynthData, SynthSpec};
