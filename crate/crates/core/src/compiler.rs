//! Factor graph to transition-assembly compiler.
//!
//! Every variable gets a circuit whose kernel reads the factors it touches.
//! The interaction graph is colored greedily (descending degree, ties by
//! name) and each color class becomes one parallel group. Colors are then
//! renumbered so that larger classes come first. Evidence is entered as
//! clamps; clamped circuits stay in the schedule and simply hold their value,
//! so changing evidence never requires recompiling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};
use crate::factorgraph::FactorGraph;
use crate::lowprec::Precision;
use crate::transition::{
    run, EnergyFactor, KernelChoice, RunConfig, Schedule, ScheduleKind, Trace, TransitionAssembly,
};

/// Blanket configurations enumerated by the compile-time support check.
pub const SUPPORT_CHECK_LIMIT: u128 = 1 << 16;

/// Batches used for batch-means standard errors.
pub const STDERR_BATCHES: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub kernel: KernelChoice,
    pub precision: Precision,
    pub schedule: ScheduleKind,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            kernel: KernelChoice::Gibbs,
            precision: Precision::default(),
            schedule: ScheduleKind::Parallel,
        }
    }
}

/// Greedy proper coloring. Returns one color per vertex; color 0 is the
/// largest class.
pub fn color_interaction_graph(names: &[String], neighbors: &[Vec<usize>]) -> Vec<usize> {
    let n = names.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        neighbors[b]
            .len()
            .cmp(&neighbors[a].len())
            .then_with(|| names[a].cmp(&names[b]))
    });
    let mut color = vec![usize::MAX; n];
    let mut taken = Vec::new();
    for &v in &order {
        taken.clear();
        taken.resize(neighbors[v].len() + 1, false);
        for &u in &neighbors[v] {
            if color[u] < taken.len() {
                taken[color[u]] = true;
            }
        }
        color[v] = taken.iter().position(|&t| !t).expect("a free color exists");
    }
    let count = color.iter().max().map_or(0, |&c| c + 1);
    let mut sizes: Vec<(usize, usize)> = (0..count).map(|c| (0, c)).collect();
    for &c in &color {
        sizes[c].0 += 1;
    }
    sizes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut rename = vec![0; count];
    for (new, &(_, old)) in sizes.iter().enumerate() {
        rename[old] = new;
    }
    color.into_iter().map(|c| rename[c]).collect()
}

/// Color classes in color order, members in variable order.
pub fn color_groups(coloring: &[usize]) -> Vec<Vec<usize>> {
    let count = coloring.iter().max().map_or(0, |&c| c + 1);
    let mut groups = vec![Vec::new(); count];
    for (v, &c) in coloring.iter().enumerate() {
        groups[c].push(v);
    }
    groups
}

pub fn is_proper_coloring(neighbors: &[Vec<usize>], coloring: &[usize]) -> bool {
    neighbors
        .iter()
        .enumerate()
        .all(|(v, ns)| ns.iter().all(|&u| coloring[u] != coloring[v]))
}

pub fn compile(graph: &FactorGraph, options: &CompileOptions) -> Result<TransitionAssembly> {
    let arities = graph.arities();
    let names = graph.names();
    let factors = graph
        .factors()
        .iter()
        .map(|f| EnergyFactor::from_weights(f.vars.clone(), &arities, &f.table))
        .collect::<Result<Vec<_>>>()?;
    let mut assembly = TransitionAssembly::new(names, arities, factors, options.precision, options.kernel)?;
    for (&v, &x) in graph.evidence() {
        assembly.clamp(v, x)?;
    }
    let n = assembly.names().len();
    let schedule = match options.schedule {
        ScheduleKind::Serial => Schedule::serial(n),
        ScheduleKind::RandomScan => Schedule::random_scan(n),
        ScheduleKind::Parallel | ScheduleKind::Custom => {
            let coloring = color_interaction_graph(assembly.names(), assembly.interaction_graph());
            Schedule::parallel(color_groups(&coloring))
        }
    };
    assembly.set_schedule(schedule);
    check_support(&assembly)?;
    Ok(assembly)
}

/// Every free circuit must have a possible value under every blanket
/// configuration it can see. Blankets too large to enumerate are skipped;
/// the chain reports such failures when it meets them.
pub fn check_support(assembly: &TransitionAssembly) -> Result<()> {
    let arities = assembly.arities();
    let mut state: Vec<usize> = vec![0; arities.len()];
    for (&v, &x) in assembly.clamped() {
        state[v] = x;
    }
    for v in 0..arities.len() {
        if assembly.clamped().contains_key(&v) {
            continue;
        }
        let free: Vec<usize> = assembly
            .neighbors(v)
            .iter()
            .copied()
            .filter(|u| !assembly.clamped().contains_key(u))
            .collect();
        let configs = free
            .iter()
            .try_fold(1u128, |acc, &u| acc.checked_mul(arities[u] as u128));
        if !configs.is_some_and(|c| c <= SUPPORT_CHECK_LIMIT) {
            continue;
        }
        let mut s = state.clone();
        loop {
            assembly.conditional(v, &s, 1.0)?;
            let mut carry = true;
            for &u in free.iter().rev() {
                s[u] += 1;
                if s[u] < arities[u] {
                    carry = false;
                    break;
                }
                s[u] = 0;
            }
            if carry {
                break;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub variable: String,
    pub probabilities: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QueryResult {
    pub marginals: Vec<Marginal>,
    pub trace: Trace,
}

/// Runs the chain and estimates marginals of the named variables (all of
/// them when `variables` is empty).
pub fn query(
    assembly: &TransitionAssembly,
    variables: &[String],
    config: &RunConfig,
    stream: &EntropyStream,
) -> Result<QueryResult> {
    let ids = if variables.is_empty() {
        (0..assembly.names().len()).collect()
    } else {
        variables
            .iter()
            .map(|n| assembly.variable_index(n))
            .collect::<Result<Vec<_>>>()?
    };
    let trace = run(assembly, config, stream)?;
    let marginals = ids
        .into_iter()
        .map(|v| marginal_with_stderr(&trace, v, assembly.arities()[v], &assembly.names()[v]))
        .collect();
    Ok(QueryResult { marginals, trace })
}

/// Batch-means standard errors; with too few samples for batching the
/// independent-sample formula is used.
fn marginal_with_stderr(trace: &Trace, var: usize, arity: usize, name: &str) -> Marginal {
    let n = trace.len();
    let probabilities = trace.marginal(var);
    let stderr = if n >= 2 * STDERR_BATCHES {
        let size = n / STDERR_BATCHES;
        let mut batch = vec![vec![0.0; arity]; STDERR_BATCHES];
        for (i, row) in trace.rows().take(size * STDERR_BATCHES).enumerate() {
            batch[i / size][row[var] as usize] += 1.0 / size as f64;
        }
        (0..arity)
            .map(|x| {
                let mean = batch.iter().map(|b| b[x]).sum::<f64>() / STDERR_BATCHES as f64;
                let var = batch.iter().map(|b| (b[x] - mean).powi(2)).sum::<f64>()
                    / (STDERR_BATCHES - 1) as f64;
                (var / STDERR_BATCHES as f64).sqrt()
            })
            .collect()
    } else {
        probabilities
            .iter()
            .map(|&p| (p * (1.0 - p) / n.max(1) as f64).sqrt())
            .collect()
    };
    Marginal {
        variable: name.to_string(),
        probabilities,
        stderr,
    }
}

pub fn write_marginals_csv<W: Write>(marginals: &[Marginal], mut out: W) -> std::io::Result<()> {
    writeln!(out, "variable,value,probability,stderr")?;
    for m in marginals {
        for (x, (p, se)) in m.probabilities.iter().zip(&m.stderr).enumerate() {
            writeln!(out, "{},{},{:.6},{:.6}", m.variable, x, p, se)?;
        }
    }
    Ok(())
}

/// Parses `name=value` evidence arguments.
pub fn parse_evidence(items: &[String]) -> Result<Vec<(String, usize)>> {
    items
        .iter()
        .map(|item| {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("evidence `{item}` is not NAME=VALUE")))?;
            let value = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("evidence value in `{item}` is not an integer")))?;
            Ok((name.trim().to_string(), value))
        })
        .collect()
}
