//! Bundle files, the synthetic generator and attention dumps.

mod bundle;
mod dump;
mod synthetic;

pub use bundle::{read_bundle, write_bundle, Bundle, EDGES_FILE, FLOW_FILE, META_FILE, NODES_FILE, TIME_FORMAT};
pub use dump::{parse_pgm, AttentionDump};
pub use synthetic::{daily_profile, gen_synthetic, SyntheticSpec, Topology};
