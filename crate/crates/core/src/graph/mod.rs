//! Road-network graph, normalized Laplacian and its spectrum, and the
//! binary attention masks derived from the network and its history.

mod eigen;
mod masks;
mod network;

pub use eigen::{laplacian_embedding, symmetric_eigen, LaplacianDecomposition, TRIVIAL_EIGENVALUE};
pub use masks::{geo_mask, sem_mask, AttentionMasks};
pub use network::{normalized_laplacian, Edge, Layout, RoadNetwork};
