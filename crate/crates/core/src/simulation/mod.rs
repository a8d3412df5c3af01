//! Simulation designs, ground-truth LATE and the Monte Carlo harness.

mod design;
mod export;
mod mc;
mod oracle;

pub use design::{generate, replication_seed, Design, DesignName, Latent};
pub use export::{export, export_to_path, Export, Format, SHARE_COLUMNS};
pub use mc::{run_mc, EstimatorSummary, McConfig, McSummary, RepEstimate, RepRecord, Shares, Z_95};
pub use oracle::{
    adaptive_simpson, oracle_method, oracle_record, read_cache, simulated_late, true_late, write_cache, OracleRecord,
    DEFAULT_ORACLE_DRAWS, DEFAULT_ORACLE_SEED, QUAD_TOL,
};

pub(crate) use export::{Cell, Frame};
