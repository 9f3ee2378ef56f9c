//! Reverse-mode autodiff, network architectures and the tensor archive format.

pub mod archive;
pub mod array;
pub mod check;
pub mod conv;
pub mod eegnet;
pub mod graph;
pub mod network;
pub mod params;
pub mod resnet;
pub mod shallow;
pub mod transfer;

pub use archive::{load_archive, save_archive, ArchiveError, ArchiveTensor, Dtype, TensorArchive};
pub use array::{Array, Scalar};
pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamKind, ParamStore};
pub use network::{install_pca, Architecture, FreezePolicy, HeadKind, Init, ModelSpec, ProjectionKind, StandardizeOrder};
