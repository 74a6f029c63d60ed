//! Bundled real-graph edge lists.
//!
//! The contiguous-US graph links states (plus DC) that share a land border.
//! The Spanish bus file is a stand-in topology matching the published node
//! and link counts of that network; the original data is not redistributed
//! here.

use crate::error::{Error, Result};
use crate::graphgen::{parse_edge_list, MobilityNetwork};

pub const CONTIGUOUS_US: &str = include_str!("../data/contiguous_us.edges");
pub const SPANISH_BUS: &str = include_str!("../data/spanish_bus.edges");

/// Names accepted by [`load_bundled`].
pub const BUNDLED_NAMES: &[&str] = &["contiguous_us", "spanish_bus"];

/// Load a bundled graph by name, with binary adjacency awaiting a mobility
/// rate.
pub fn load_bundled(name: &str) -> Result<MobilityNetwork> {
    let text = match name {
        "contiguous_us" => CONTIGUOUS_US,
        "spanish_bus" => SPANISH_BUS,
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown bundled graph {other:?}; available: {BUNDLED_NAMES:?}"
            )))
        }
    };
    parse_edge_list(text, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_us_counts_match_source() {
        let net = load_bundled("contiguous_us").unwrap();
        assert_eq!(net.n(), 49);
        assert_eq!(net.link_count(), 107);
        assert!(net.is_connected());
    }

    #[test]
    fn spanish_bus_counts_match_source() {
        let net = load_bundled("spanish_bus").unwrap();
        assert_eq!(net.n(), 32);
        assert_eq!(net.link_count(), 202);
        assert!(net.is_connected());
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(load_bundled("atlantis").is_err());
    }
}
