//! Small oracle checks behind the `selftest` command.

use crate::compiler::{compile, query, CompileOptions};
use crate::dpmm::{canonical_partition, run_dpmm, DpmmParams, DpmmRunConfig};
use crate::entropy::EntropyStream;
use crate::error::Result;
use crate::factorgraph::FactorGraph;
use crate::fixtures;
use crate::gates::{estimate_cpt, total_variation, StochasticGate};
use crate::lowprec::{discrete_sample, EnergyFormat, EnergyVector};
use crate::mrf::LatticeMrf;
use crate::spiking::race_energies;
use crate::transition::{run, validate_schedule, RunConfig, ScheduleKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn tv_check(tv: f64, limit: f64) -> Result<(bool, String)> {
    Ok((tv < limit, format!("tv {tv:.4} (limit {limit})")))
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let root = EntropyStream::new(seed);
    vec![
        check("entropy_determinism", entropy(&root)),
        check("and_gate_table", and_gate(&root)),
        check("discrete_sample_8_4", sampler(&root)),
        check("three_variable_query", three_var(&root)),
        check("spike_race_ratio", race(&root)),
        check("lattice_enumeration", lattice(&root)),
        check("dpmm_partitions", dpmm(&root)),
        check("compiled_schedules_valid", schedules()),
    ]
}

fn entropy(root: &EntropyStream) -> Result<(bool, String)> {
    let mut a = root.fork(1);
    let mut b = root.fork(1);
    let mut c = root.fork(2);
    let same = (0..1000).all(|_| a.next_bits(64).ok() == b.next_bits(64).ok());
    let differs = (0..1000).any(|_| a.next_bits(64).ok() != c.next_bits(64).ok());
    Ok((same && differs, format!("replay {same}, sibling differs {differs}")))
}

fn and_gate(root: &EntropyStream) -> Result<(bool, String)> {
    let gate = StochasticGate::and();
    let est = estimate_cpt(&gate, 20_000, &mut root.fork(3))?;
    tv_check(est.max_row_tv(&gate.declared_cpt()?), 0.02)
}

fn sampler(root: &EntropyStream) -> Result<(bool, String)> {
    let v = EnergyVector::from_probabilities(&[0.1, 0.2, 0.7], EnergyFormat::default())?;
    let mut s = root.fork(4);
    let n = 50_000;
    let mut c = [0.0; 3];
    for _ in 0..n {
        c[discrete_sample(&v, &mut s)?] += 1.0 / n as f64;
    }
    tv_check(total_variation(&c, &[0.1, 0.2, 0.7]), 0.02)
}

fn three_var(root: &EntropyStream) -> Result<(bool, String)> {
    let g = FactorGraph::parse(fixtures::THREE_VAR)?;
    let mut worst: f64 = 0.0;
    for ev in [vec![], vec![("C".to_string(), 1)]] {
        let g = g.with_evidence(&ev)?;
        let exact = g.enumerate_joint()?;
        let a = compile(&g, &CompileOptions::default())?;
        let cfg = RunConfig {
            sweeps: 20_000,
            ..RunConfig::new(&a, 1)
        };
        let r = query(&a, &[], &cfg, &root.fork(5))?;
        for (v, m) in r.marginals.iter().enumerate() {
            worst = worst.max(total_variation(&m.probabilities, &exact.marginal(v)));
        }
    }
    tv_check(worst, 0.03)
}

fn race(root: &EntropyStream) -> Result<(bool, String)> {
    let mut s = root.fork(6);
    let n = 50_000;
    let mut c = [0.0; 2];
    for _ in 0..n {
        c[race_energies(&[0.0, 1.0], &mut s)?.0] += 1.0 / n as f64;
    }
    tv_check(total_variation(&c, &[2.0 / 3.0, 1.0 / 3.0]), 0.015)
}

fn lattice(root: &EntropyStream) -> Result<(bool, String)> {
    let mut s = root.fork(7);
    let ev: Vec<f64> = (0..2 * 2 * 3).map(|_| s.uniform() * 3.0).collect();
    let m = LatticeMrf::new(2, 2, 3, ev, 1.0, 2.0)?;
    let exact = m.to_factor_graph()?.enumerate_joint()?;
    let a = m.assembly(Default::default(), ScheduleKind::Parallel)?;
    let cfg = RunConfig {
        sweeps: 20_000,
        ..RunConfig::new(&a, 1)
    };
    let t = run(&a, &cfg, &root.fork(8))?;
    let worst = (0..4)
        .map(|p| total_variation(&t.marginal(p), &exact.marginal(p)))
        .fold(0.0, f64::max);
    tv_check(worst, 0.03)
}

/// Partitions of three data weighted by the CRP prior and the Beta-Bernoulli
/// marginal likelihood, the latter built from sequential predictives.
fn dpmm(root: &EntropyStream) -> Result<(bool, String)> {
    let data = vec![vec![true, true], vec![true, false], vec![false, false]];
    let params = DpmmParams::default();
    let parts: [[usize; 3]; 5] = [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [0, 1, 2]];
    let weight = |part: &[usize; 3]| {
        let k = part.iter().max().unwrap() + 1;
        let mut w = params.alpha.powi(k as i32) / (params.alpha * (params.alpha + 1.0) * (params.alpha + 2.0));
        for block in 0..k {
            let members: Vec<&Vec<bool>> = part.iter().zip(&data).filter(|(&b, _)| b == block).map(|(_, x)| x).collect();
            for f in 1..members.len() {
                w *= f as f64;
            }
            for pix in 0..2 {
                let mut on = 0.0;
                for (n, x) in members.iter().enumerate() {
                    let p_on = (on + params.beta_on) / (n as f64 + params.beta_on + params.beta_off);
                    w *= if x[pix] { p_on } else { 1.0 - p_on };
                    on += x[pix] as u8 as f64;
                }
            }
        }
        w
    };
    let w: Vec<f64> = parts.iter().map(weight).collect();
    let z: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| x / z).collect();
    let cfg = DpmmRunConfig {
        sweeps: 20_000,
        ..DpmmRunConfig::default()
    };
    let (_, trace) = run_dpmm(&data, params, &cfg, &root.fork(9))?;
    let mut emp = vec![0.0; 5];
    for p in &trace.partitions {
        let canon = canonical_partition(&p.iter().map(|&x| x as u64).collect::<Vec<_>>());
        let i = parts.iter().position(|q| q[..] == canon[..]).expect("three-item partition");
        emp[i] += 1.0 / trace.partitions.len() as f64;
    }
    tv_check(total_variation(&emp, &exact), 0.03)
}

fn schedules() -> Result<(bool, String)> {
    let mut bad = 0;
    for (_, doc) in fixtures::ALL {
        let a = compile(&FactorGraph::parse(doc)?, &CompileOptions::default())?;
        bad += validate_schedule(&a).len();
    }
    Ok((bad == 0, format!("{bad} conflicting pairs")))
}
