//! Factor graphs shipped with the crate.
//!
//! `ICU8` is an eight-node diagnostic network in the style of the ICU alarm
//! model (1944 joint states). Its tables are illustrative.

pub const THREE_VAR: &str = include_str!("../fixtures/three_var.json");
pub const CHAIN3: &str = include_str!("../fixtures/chain3.json");
pub const ICU8: &str = include_str!("../fixtures/icu8.json");

/// `(name, document)` for every fixture.
pub const ALL: [(&str, &str); 3] = [("three_var", THREE_VAR), ("chain3", CHAIN3), ("icu8", ICU8)];

/// Evidence patterns exercised against each fixture.
pub fn evidence_suite(name: &str) -> Vec<Vec<(String, usize)>> {
    let e = |pairs: &[(&str, usize)]| pairs.iter().map(|&(n, v)| (n.to_string(), v)).collect();
    match name {
        "three_var" => vec![e(&[]), e(&[("C", 1)]), e(&[("B", 0), ("C", 1)])],
        "chain3" => vec![e(&[]), e(&[("C", 0)])],
        "icu8" => vec![
            e(&[]),
            e(&[("cvp", 2), ("pcwp", 2), ("history", 1)]),
            e(&[("cvp", 0), ("bp", 0)]),
        ],
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorgraph::FactorGraph;

    #[test]
    fn fixtures_parse() {
        for (name, doc) in ALL {
            let g = FactorGraph::parse(doc).unwrap();
            for ev in evidence_suite(name) {
                g.with_evidence(&ev).unwrap().enumerate_joint().unwrap();
            }
        }
        assert_eq!(FactorGraph::parse(ICU8).unwrap().state_count(), 1944);
    }
}
