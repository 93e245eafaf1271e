//! Multi-encoder embedding analysis: similarity between embedding spaces,
//! redundancy-pruned feature fusion, gated-attention MIL heads and the
//! evaluation/interpretability tooling around them.
//!
//! Module map:
//!
//! * [`store`]: embedding matrices, slide bags, file formats.
//! * [`simgauge`]: CKA, SVCCA, Procrustes, k-NN Jaccard and ridge cross-prediction.
//! * [`prune`]: class-separation ranking, correlation pruning and the fusion schemes.
//! * [`heads`]: gated-attention MIL and slide MLP with hand-written backprop and Adam.
//! * [`evalkit`]: patient-stratified splits, classification metrics, paired bootstrap.
//! * [`lens`]: attention masks, Dice, region coverage, silhouette, compactness, t-SNE.
//! * [`synthgen`]: synthetic multi-encoder data with known ground truth.
//! * [`cli`]: the `embfuse` command-line front-end.

pub mod cli;
pub mod evalkit;
pub mod heads;
pub mod lens;
pub mod linalg;
pub mod prune;
pub mod rng;
pub mod simgauge;
pub mod stats;
pub mod store;
pub mod synthgen;

pub use store::{BagDataset, ColumnOrigin, EmbeddingMatrix, SlideBag, SlideVectorDataset};
