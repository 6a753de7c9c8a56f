//! Bundled example data: the default operation taxonomy and a pair of small
//! cells used for golden distance values.

use crate::arch::Architecture;

pub const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy_nb.txt");
pub const GOLDEN_X_JSON: &str = include_str!("../data/golden_x.json");
pub const GOLDEN_Z_JSON: &str = include_str!("../data/golden_z.json");

/// `in, cv1, cv3, cv3, cv3, out` with 7 edges.
pub fn golden_x() -> Architecture {
    serde_json::from_str(GOLDEN_X_JSON).expect("bundled architecture parses")
}

/// `in, cv3, cv1, mp3, mp3, out` with 7 edges.
pub fn golden_z() -> Architecture {
    serde_json::from_str(GOLDEN_Z_JSON).expect("bundled architecture parses")
}
