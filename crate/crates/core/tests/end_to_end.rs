use stochcirc::compiler::{compile, query, CompileOptions};
use stochcirc::entropy::EntropyStream;
use stochcirc::factorgraph::FactorGraph;
use stochcirc::fixtures;
use stochcirc::gates::total_variation;
use stochcirc::lowprec::Precision;
use stochcirc::transition::{validate_schedule, RunConfig};

fn check(precision: Precision) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, doc) in fixtures::ALL {
        let base = FactorGraph::parse(doc).unwrap();
        for (k, evidence) in fixtures::evidence_suite(name).into_iter().enumerate() {
            let g = base.with_evidence(&evidence).unwrap();
            let exact = g.enumerate_joint().unwrap();
            let options = CompileOptions {
                precision,
                ..CompileOptions::default()
            };
            let a = compile(&g, &options).unwrap();
            assert!(validate_schedule(&a).is_empty());
            let cfg = RunConfig {
                sweeps: 100_000,
                ..RunConfig::new(&a, 1)
            };
            let r = query(&a, &[], &cfg, &EntropyStream::new(k as u64 + 100)).unwrap();
            for (v, m) in r.marginals.iter().enumerate() {
                let tv = total_variation(&m.probabilities, &exact.marginal(v));
                assert!(tv < 0.02, "{name} evidence #{k} {}: tv {tv}", m.variable);
                worst = worst.max(tv);
            }
        }
    }
    worst
}

#[test]
fn fixture_marginals_match_enumeration_at_default_precision() {
    let worst = check(Precision::default());
    println!("worst marginal TV at (8,4): {worst:.4}");
}

#[test]
fn fixture_marginals_match_enumeration_in_exact_mode() {
    let worst = check(Precision::Exact);
    println!("worst marginal TV in exact mode: {worst:.4}");
}
