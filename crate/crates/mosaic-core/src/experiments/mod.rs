//! Synthetic attribute-conditioned retrieval benchmark, the mAP / rank-1
//! metrics with the cross-camera filter, and the attribute-inclusion grid
//! protocol.

pub mod grid;
pub mod metrics;
pub mod synthetic;

pub use grid::{run_grid, ExperimentConfig, GridRunner, ResultsRow, ResultsTable};
pub use metrics::{average_precision, evaluate, EvalResult};
pub use synthetic::{gen_synthetic, SyntheticDataset, SyntheticImage, SyntheticSpec};
