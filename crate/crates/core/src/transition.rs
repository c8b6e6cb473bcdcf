//! Stochastic transition circuits and their assemblies.
//!
//! Each variable owns a circuit: a state register plus a stochastic kernel
//! that reads the registers of interacting variables. An assembly executes a
//! schedule of groups; within a group every circuit computes its next value
//! from the state as of group start, then all registers latch together. A
//! schedule is valid when no group contains two interacting circuits.
//!
//! Per-run entropy is derived from one master stream:
//!
//! | stream                        | fork id                  |
//! |-------------------------------|--------------------------|
//! | kernel of variable `v`        | `v`                      |
//! | fault injection for `v`       | `FAULT_STREAM_BASE + v`  |
//! | initial state                 | `INIT_STREAM`            |
//! | random-scan site selection    | `SCAN_STREAM`            |

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};
use crate::lowprec::{weight_of_distance, Conditional, EnergyFormat, Precision};

pub const FAULT_STREAM_BASE: u64 = 1 << 62;
pub const INIT_STREAM: u64 = 1 << 63;
pub const SCAN_STREAM: u64 = (1 << 63) + 1;

/// Groups smaller than this are updated on the calling thread.
const PARALLEL_GROUP_MIN: usize = 256;

/// A factor over a few variables, stored as log2 energies relative to its
/// most probable entry (`INFINITY` marks zero weight). When the assembly runs
/// in fixed point the energies are also held as quantized words.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyFactor {
    vars: Vec<usize>,
    strides: Vec<usize>,
    energies: Vec<f64>,
    raw: Option<Vec<u32>>,
}

impl EnergyFactor {
    /// `arities` is indexed by variable id; the table is row-major over
    /// `vars` with the last variable fastest.
    pub fn from_energies(vars: Vec<usize>, arities: &[usize], energies: Vec<f64>) -> Result<Self> {
        let mut strides = vec![1; vars.len()];
        for i in (0..vars.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * arities[vars[i + 1]];
        }
        let expected: usize = vars.iter().map(|&v| arities[v]).product();
        if energies.len() != expected {
            return Err(Error::LengthMismatch {
                left: energies.len(),
                right: expected,
            });
        }
        if energies.iter().any(|e| e.is_nan() || *e == f64::NEG_INFINITY) {
            return Err(Error::Config("factor energies must not be NaN or -inf".into()));
        }
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let energies = if min.is_finite() {
            energies.into_iter().map(|e| e - min).collect()
        } else {
            energies
        };
        Ok(Self {
            vars,
            strides,
            energies,
            raw: None,
        })
    }

    /// Linear weights; zero weight is an impossible entry.
    pub fn from_weights(vars: Vec<usize>, arities: &[usize], weights: &[f64]) -> Result<Self> {
        let energies = weights
            .iter()
            .map(|&w| if w > 0.0 { -w.log2() } else { f64::INFINITY })
            .collect();
        Self::from_energies(vars, arities, energies)
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    fn quantize(&mut self, format: EnergyFormat) {
        self.raw = Some(self.energies.iter().map(|&e| format.quantize(e)).collect());
    }

    #[inline]
    fn offset(&self, state: &[usize]) -> usize {
        self.vars
            .iter()
            .zip(&self.strides)
            .map(|(&v, &s)| state[v] * s)
            .sum()
    }

    pub fn energy_at(&self, state: &[usize]) -> f64 {
        self.energies[self.offset(state)]
    }
}

/// Symmetric proposal matrix for Metropolis circuits.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    rows: Vec<Vec<f64>>,
}

impl Proposal {
    pub fn uniform(arity: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / arity as f64; arity]; arity],
        }
    }

    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape {
                    expected: k,
                    actual: row.len(),
                });
            }
            if row.iter().any(|&p| p.is_nan() || p <= 0.0) {
                return Err(Error::Config(format!("proposal row {i} must be strictly positive")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("proposal row {i} does not sum to 1")));
            }
            for (j, &p) in row.iter().enumerate() {
                if (p - rows[j][i]).abs() > 1e-12 {
                    return Err(Error::Config("proposal must be symmetric".into()));
                }
            }
        }
        Ok(Self { rows })
    }

    fn draw(&self, from: usize, stream: &mut EntropyStream) -> usize {
        let u = stream.uniform();
        let mut acc = 0.0;
        for (j, &p) in self.rows[from].iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.rows[from].len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Gibbs,
    Metropolis(Proposal),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    #[default]
    Gibbs,
    Metropolis,
}

impl FromStr for KernelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gibbs" => Ok(Self::Gibbs),
            "metropolis" | "mh" => Ok(Self::Metropolis),
            _ => Err(Error::Config(format!("unknown kernel `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionCircuit {
    variable: usize,
    arity: usize,
    /// Touching factors and this variable's stride inside each.
    factors: Vec<(usize, usize)>,
    kernel: Kernel,
}

impl TransitionCircuit {
    pub fn variable(&self) -> usize {
        self.variable
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn factor_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.factors.iter().map(|&(f, _)| f)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

fn circuit_for(variable: usize, arity: usize, factors: &[EnergyFactor], kernel: Kernel) -> TransitionCircuit {
    let touching = factors
        .iter()
        .enumerate()
        .filter_map(|(fi, f)| {
            f.vars
                .iter()
                .position(|&v| v == variable)
                .map(|pos| (fi, f.strides[pos]))
        })
        .collect();
    TransitionCircuit {
        variable,
        arity,
        factors: touching,
        kernel,
    }
}

/// Gibbs circuit: its conditional sums the energies of every touching factor.
pub fn gibbs_kernel_from_factors(variable: usize, arity: usize, factors: &[EnergyFactor]) -> TransitionCircuit {
    circuit_for(variable, arity, factors, Kernel::Gibbs)
}

/// Metropolis circuit with a symmetric proposal.
pub fn mh_kernel(
    variable: usize,
    arity: usize,
    proposal: Proposal,
    factors: &[EnergyFactor],
) -> Result<TransitionCircuit> {
    if proposal.rows.len() != arity {
        return Err(Error::Shape {
            expected: arity,
            actual: proposal.rows.len(),
        });
    }
    Ok(circuit_for(variable, arity, factors, Kernel::Metropolis(proposal)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Serial,
    Parallel,
    RandomScan,
    Custom,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Serial => "serial",
            Self::Parallel => "parallel",
            Self::RandomScan => "random-scan",
            Self::Custom => "custom",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Self::Serial),
            "parallel" => Ok(Self::Parallel),
            "random-scan" => Ok(Self::RandomScan),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected serial, parallel or random-scan)"
            ))),
        }
    }
}

/// Cycle schedules run their groups in order once per sweep; a random-scan
/// sweep makes one single-site update per free variable at uniformly chosen
/// sites (a mixture kernel).
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    groups: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn serial(n: usize) -> Self {
        Self {
            kind: ScheduleKind::Serial,
            groups: (0..n).map(|v| vec![v]).collect(),
        }
    }

    pub fn random_scan(n: usize) -> Self {
        Self {
            kind: ScheduleKind::RandomScan,
            groups: (0..n).map(|v| vec![v]).collect(),
        }
    }

    pub fn parallel(groups: Vec<Vec<usize>>) -> Self {
        Self {
            kind: ScheduleKind::Parallel,
            groups,
        }
    }

    pub fn custom(groups: Vec<Vec<usize>>) -> Self {
        Self {
            kind: ScheduleKind::Custom,
            groups,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionAssembly {
    names: Vec<String>,
    arities: Vec<usize>,
    factors: Vec<EnergyFactor>,
    circuits: Vec<TransitionCircuit>,
    neighbors: Vec<Vec<usize>>,
    schedule: Schedule,
    clamped: BTreeMap<usize, usize>,
    precision: Precision,
    temperature: f64,
}

impl TransitionAssembly {
    /// One circuit per variable (Gibbs, or Metropolis with a uniform
    /// proposal) and a serial schedule.
    pub fn new(
        names: Vec<String>,
        arities: Vec<usize>,
        mut factors: Vec<EnergyFactor>,
        precision: Precision,
        kernel: KernelChoice,
    ) -> Result<Self> {
        if names.len() != arities.len() {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: arities.len(),
            });
        }
        if let Some(f) = factors.iter().find(|f| f.vars.iter().any(|&v| v >= arities.len())) {
            return Err(Error::UnknownName(format!("variable in factor over {:?}", f.vars)));
        }
        if let Precision::Fixed(format) = precision {
            factors.iter_mut().for_each(|f| f.quantize(format));
        }
        let n = arities.len();
        let mut neighbors = vec![Vec::new(); n];
        for f in &factors {
            for &a in &f.vars {
                for &b in &f.vars {
                    if a != b {
                        neighbors[a].push(b);
                    }
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let circuits = (0..n)
            .map(|v| match kernel {
                KernelChoice::Gibbs => Ok(gibbs_kernel_from_factors(v, arities[v], &factors)),
                KernelChoice::Metropolis => mh_kernel(v, arities[v], Proposal::uniform(arities[v]), &factors),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names,
            arities,
            factors,
            circuits,
            neighbors,
            schedule: Schedule::serial(n),
            clamped: BTreeMap::new(),
            precision,
            temperature: 1.0,
        })
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.schedule = schedule;
    }

    pub fn set_circuit(&mut self, circuit: TransitionCircuit) {
        let v = circuit.variable;
        self.circuits[v] = circuit;
    }

    pub fn clamp(&mut self, var: usize, value: usize) -> Result<()> {
        let arity = *self
            .arities
            .get(var)
            .ok_or_else(|| Error::UnknownName(format!("#{var}")))?;
        if value >= arity {
            return Err(Error::ValueOutOfRange {
                variable: self.names[var].clone(),
                value,
                arity,
            });
        }
        self.clamped.insert(var, value);
        Ok(())
    }

    pub fn unclamp(&mut self, var: usize) {
        self.clamped.remove(&var);
    }

    pub fn clear_clamps(&mut self) {
        self.clamped.clear();
    }

    pub fn set_temperature(&mut self, t: f64) {
        assert!(t > 0.0, "temperature must be positive");
        self.temperature = t;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn factors(&self) -> &[EnergyFactor] {
        &self.factors
    }

    pub fn circuits(&self) -> &[TransitionCircuit] {
        &self.circuits
    }

    pub fn neighbors(&self, var: usize) -> &[usize] {
        &self.neighbors[var]
    }

    pub fn interaction_graph(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn clamped(&self) -> &BTreeMap<usize, usize> {
        &self.clamped
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Sum of all factor energies (log2 units, high precision).
    pub fn total_energy(&self, state: &[usize]) -> f64 {
        self.factors.iter().map(|f| f.energy_at(state)).sum()
    }

    /// Full conditional of `var` given the rest of `state`, as presented to
    /// the DISCRETE-SAMPLE gate.
    pub fn conditional(&self, var: usize, state: &[usize], temperature: f64) -> Result<Conditional> {
        let circuit = &self.circuits[var];
        let current = state[var];
        match self.precision {
            Precision::Fixed(format) => {
                let sat = format.max_raw();
                let sums = self.raw_sums(circuit, state, current, sat);
                let min = sums.iter().flatten().copied().min().ok_or_else(|| Error::ZeroSupport {
                    variable: self.names[var].clone(),
                })?;
                let raw = sums
                    .iter()
                    .map(|s| match s {
                        None => sat,
                        Some(s) => {
                            let d = s - min;
                            let d = if temperature == 1.0 {
                                d
                            } else {
                                (d as f64 / temperature).round() as u64
                            };
                            d.min(sat as u64) as u32
                        }
                    })
                    .collect();
                Ok(Conditional::Fixed(crate::lowprec::EnergyVector::from_raw(raw, format)?))
            }
            Precision::Exact => {
                let sums: Vec<f64> = (0..circuit.arity)
                    .map(|v| {
                        circuit
                            .factors
                            .iter()
                            .map(|&(fi, stride)| {
                                let f = &self.factors[fi];
                                f.energies[f.offset(state) - current * stride + v * stride]
                            })
                            .sum()
                    })
                    .collect();
                Conditional::from_energies(&sums, Precision::Exact, temperature).map_err(|_| {
                    Error::ZeroSupport {
                        variable: self.names[var].clone(),
                    }
                })
            }
        }
    }

    fn raw_sums(&self, circuit: &TransitionCircuit, state: &[usize], current: usize, sat: u32) -> Vec<Option<u64>> {
        let offsets: Vec<(usize, usize, &Vec<u32>)> = circuit
            .factors
            .iter()
            .map(|&(fi, stride)| {
                let f = &self.factors[fi];
                let base = f.offset(state) - current * stride;
                (base, stride, f.raw.as_ref().expect("quantized factor"))
            })
            .collect();
        (0..circuit.arity)
            .map(|v| {
                offsets.iter().try_fold(0u64, |acc, &(off, stride, raw)| {
                    let r = raw[off + v * stride];
                    (r != sat).then_some(acc + r as u64)
                })
            })
            .collect()
    }

    /// Energy of `var = value` in the units the kernel compares (raw words in
    /// fixed point, log2 in exact mode); `None` when impossible.
    fn local_energy(&self, var: usize, value: usize, state: &[usize]) -> Option<f64> {
        let circuit = &self.circuits[var];
        let at = |fi: usize, stride: usize| {
            let f = &self.factors[fi];
            f.offset(state) - state[var] * stride + value * stride
        };
        match self.precision {
            Precision::Fixed(format) => {
                let sat = format.max_raw();
                circuit
                    .factors
                    .iter()
                    .try_fold(0u64, |acc, &(fi, stride)| {
                        let r = self.factors[fi].raw.as_ref().expect("quantized factor")[at(fi, stride)];
                        (r != sat).then_some(acc + r as u64)
                    })
                    .map(|x| x as f64)
            }
            Precision::Exact => {
                let e: f64 = circuit
                    .factors
                    .iter()
                    .map(|&(fi, stride)| self.factors[fi].energies[at(fi, stride)])
                    .sum();
                e.is_finite().then_some(e)
            }
        }
    }
}

/// Same-group pairs of interacting (or repeated) circuits, by name.
pub fn validate_schedule(assembly: &TransitionAssembly) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for group in assembly.schedule.groups() {
        for (i, &a) in group.iter().enumerate() {
            for &b in &group[i + 1..] {
                if a == b || assembly.neighbors[a].binary_search(&b).is_ok() {
                    out.push((assembly.names[a].clone(), assembly.names[b].clone()));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    pub bit_flip_rate: f64,
}

impl FaultModel {
    pub fn new(bit_flip_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&bit_flip_rate) {
            return Err(Error::Config(format!("fault rate {bit_flip_rate} outside [0, 1]")));
        }
        Ok(Self { bit_flip_rate })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Sweeps after burn-in (before thinning).
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub fault: Option<FaultModel>,
}

impl RunConfig {
    /// Burn-in of ten sweeps per variable, no thinning, no faults.
    pub fn new(assembly: &TransitionAssembly, sweeps: usize) -> Self {
        Self {
            sweeps,
            burn_in: 10 * assembly.names.len(),
            thin: 1,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct CircuitRuntime {
    stream: Option<EntropyStream>,
    fault_stream: Option<EntropyStream>,
    proposals: u64,
    accepts: u64,
}

/// A running chain over an assembly.
pub struct Chain<'a> {
    assembly: &'a TransitionAssembly,
    state: Vec<usize>,
    runtime: Vec<CircuitRuntime>,
    scan: EntropyStream,
    free: Vec<usize>,
    fault: Option<FaultModel>,
    temperature: f64,
    sweeps_done: u64,
}

impl<'a> Chain<'a> {
    pub fn new(assembly: &'a TransitionAssembly, stream: &EntropyStream, fault: Option<FaultModel>) -> Result<Self> {
        let violations = validate_schedule(assembly);
        if !violations.is_empty() {
            return Err(Error::ScheduleViolation { pairs: violations });
        }
        let n = assembly.names.len();
        for group in assembly.schedule.groups() {
            if let Some(&v) = group.iter().find(|&&v| v >= n) {
                return Err(Error::UnknownName(format!("#{v} in schedule")));
            }
        }
        let mut init = stream.fork(INIT_STREAM);
        let state = (0..n)
            .map(|v| match assembly.clamped.get(&v) {
                Some(&x) => x,
                None => init.below(assembly.arities[v] as u64) as usize,
            })
            .collect();
        let fault = fault.filter(|f| f.bit_flip_rate > 0.0);
        let runtime = (0..n)
            .map(|v| CircuitRuntime {
                stream: Some(stream.fork(v as u64)),
                fault_stream: fault.map(|_| stream.fork(FAULT_STREAM_BASE + v as u64)),
                ..Default::default()
            })
            .collect();
        let free = (0..n).filter(|v| !assembly.clamped.contains_key(v)).collect();
        Ok(Self {
            assembly,
            state,
            runtime,
            scan: stream.fork(SCAN_STREAM),
            free,
            fault,
            temperature: assembly.temperature,
            sweeps_done: 0,
        })
    }

    pub fn state(&self) -> &[usize] {
        &self.state
    }

    /// Overwrite the register file; clamped variables keep their values.
    pub fn set_state(&mut self, state: &[usize]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::Shape {
                expected: self.state.len(),
                actual: state.len(),
            });
        }
        for (v, &x) in state.iter().enumerate() {
            if x >= self.assembly.arities[v] {
                return Err(Error::ValueOutOfRange {
                    variable: self.assembly.names[v].clone(),
                    value: x,
                    arity: self.assembly.arities[v],
                });
            }
            if !self.assembly.clamped.contains_key(&v) {
                self.state[v] = x;
            }
        }
        Ok(())
    }

    pub fn set_temperature(&mut self, t: f64) {
        assert!(t > 0.0, "temperature must be positive");
        self.temperature = t;
    }

    pub fn sweeps_done(&self) -> u64 {
        self.sweeps_done
    }

    /// `(proposals, accepts)` summed over Metropolis circuits.
    pub fn acceptance(&self) -> (u64, u64) {
        self.runtime
            .iter()
            .fold((0, 0), |(p, a), r| (p + r.proposals, a + r.accepts))
    }

    pub fn sweep(&mut self) -> Result<()> {
        if self.assembly.schedule.kind == ScheduleKind::RandomScan {
            for _ in 0..self.free.len() {
                let v = self.free[self.scan.below(self.free.len() as u64) as usize];
                self.update_group(&[v])?;
            }
        } else {
            for gi in 0..self.assembly.schedule.groups.len() {
                let group = &self.assembly.schedule.groups[gi];
                self.update_group(group)?;
            }
        }
        self.sweeps_done += 1;
        Ok(())
    }

    fn update_group(&mut self, group: &[usize]) -> Result<()> {
        let assembly = self.assembly;
        let snapshot = &self.state;
        let fault = self.fault;
        let temperature = self.temperature;
        let updates: Vec<(usize, usize)> =
            if group.len() >= PARALLEL_GROUP_MIN && rayon::current_num_threads() > 1 {
                let mut member = vec![false; self.runtime.len()];
                for &v in group {
                    member[v] = true;
                }
                self.runtime
                    .par_iter_mut()
                    .enumerate()
                    .filter(|(v, _)| member[*v] && !assembly.clamped.contains_key(v))
                    .map(|(v, rt)| transition(assembly, v, snapshot, rt, temperature, fault).map(|x| (v, x)))
                    .collect::<Result<_>>()?
            } else {
                let mut out = Vec::with_capacity(group.len());
                for &v in group {
                    if assembly.clamped.contains_key(&v) {
                        continue;
                    }
                    let x = transition(assembly, v, snapshot, &mut self.runtime[v], temperature, fault)?;
                    out.push((v, x));
                }
                out
            };
        for (v, x) in updates {
            self.state[v] = x;
        }
        Ok(())
    }
}

fn transition(
    assembly: &TransitionAssembly,
    v: usize,
    state: &[usize],
    rt: &mut CircuitRuntime,
    temperature: f64,
    fault: Option<FaultModel>,
) -> Result<usize> {
    let stream = rt.stream.as_mut().expect("circuit stream");
    let circuit = &assembly.circuits[v];
    let mut next = match &circuit.kernel {
        Kernel::Gibbs => assembly.conditional(v, state, temperature)?.sample(stream)?,
        Kernel::Metropolis(proposal) => {
            let current = state[v];
            let candidate = proposal.draw(current, stream);
            rt.proposals += 1;
            let e_cur = assembly.local_energy(v, current, state);
            let e_new = assembly.local_energy(v, candidate, state);
            let accept = match (e_cur, e_new) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(a), Some(b)) if b <= a => true,
                (Some(a), Some(b)) => match assembly.precision {
                    Precision::Fixed(format) => {
                        let d = ((b - a) / temperature).round() as u64;
                        // THETA gate with weight 2^(-d / 2^f) on 32 bits
                        stream.bits(32) < weight_of_distance(d, format.frac_bits())
                    }
                    Precision::Exact => stream.uniform() < (-(b - a) / temperature).exp2(),
                },
            };
            if accept {
                rt.accepts += 1;
                candidate
            } else {
                current
            }
        }
    };
    if let (Some(f), Some(fs)) = (fault, rt.fault_stream.as_mut()) {
        let width = register_bits(circuit.arity);
        for bit in 0..width {
            if fs.uniform() < f.bit_flip_rate {
                next ^= 1 << bit;
            }
        }
        next %= circuit.arity;
    }
    Ok(next)
}

/// Width of the state register for a domain of `arity` values.
pub fn register_bits(arity: usize) -> u32 {
    (usize::BITS - (arity.max(2) - 1).leading_zeros()).max(1)
}

/// Retained joint states, one row per kept sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    names: Vec<String>,
    arities: Vec<usize>,
    states: Vec<u32>,
}

impl Trace {
    pub fn new(names: Vec<String>, arities: Vec<usize>) -> Self {
        Self {
            names,
            arities,
            states: Vec::new(),
        }
    }

    pub fn push(&mut self, state: &[usize]) {
        self.states.extend(state.iter().map(|&x| x as u32));
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        if self.width() == 0 {
            0
        } else {
            self.states.len() / self.width()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.states.chunks(self.width().max(1))
    }

    /// Empirical joint over `vars`, last variable fastest.
    pub fn joint_histogram(&self, vars: &[usize]) -> Vec<f64> {
        let size: usize = vars.iter().map(|&v| self.arities[v]).product();
        let mut counts = vec![0u64; size];
        for row in self.rows() {
            let idx = vars
                .iter()
                .fold(0, |acc, &v| acc * self.arities[v] + row[v] as usize);
            counts[idx] += 1;
        }
        let n = self.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    pub fn marginal(&self, var: usize) -> Vec<f64> {
        self.joint_histogram(&[var])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.names.join(","))?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub groups: Vec<Vec<String>>,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub fault_rate: f64,
    pub precision: String,
    pub clamped: BTreeMap<String, usize>,
    pub retained: usize,
}

impl RunMetadata {
    pub fn describe(assembly: &TransitionAssembly, config: &RunConfig, seed: u64, retained: usize) -> Self {
        Self {
            seed,
            schedule: assembly.schedule.kind,
            groups: assembly
                .schedule
                .groups
                .iter()
                .map(|g| g.iter().map(|&v| assembly.names[v].clone()).collect())
                .collect(),
            sweeps: config.sweeps,
            burn_in: config.burn_in,
            thin: config.thin,
            fault_rate: config.fault.map_or(0.0, |f| f.bit_flip_rate),
            precision: assembly.precision.to_string(),
            clamped: assembly
                .clamped
                .iter()
                .map(|(&v, &x)| (assembly.names[v].clone(), x))
                .collect(),
            retained,
        }
    }
}

/// Burn in, then keep every `thin`-th state of `sweeps` further sweeps.
pub fn run(assembly: &TransitionAssembly, config: &RunConfig, stream: &EntropyStream) -> Result<Trace> {
    if config.sweeps == 0 {
        return Err(Error::Config("sweeps must be at least 1".into()));
    }
    if config.thin == 0 {
        return Err(Error::Config("thin must be at least 1".into()));
    }
    let mut chain = Chain::new(assembly, stream, config.fault)?;
    let mut trace = Trace::new(assembly.names.clone(), assembly.arities.clone());
    for _ in 0..config.burn_in {
        chain.sweep()?;
    }
    for s in 0..config.sweeps {
        chain.sweep()?;
        if s % config.thin == 0 {
            trace.push(chain.state());
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPoint {
    pub rate: f64,
    /// `Σ_v KL(exact_v ‖ empirical_v)` over free variables, in bits.
    pub kl: f64,
}

/// Marginal accuracy of the chain as the bit-flip rate grows.
pub fn fault_kl_curve(
    assembly: &TransitionAssembly,
    rates: &[f64],
    config: &RunConfig,
    stream: &EntropyStream,
    exact_marginals: &[Vec<f64>],
) -> Result<Vec<FaultPoint>> {
    rates
        .iter()
        .map(|&rate| {
            let cfg = RunConfig {
                fault: Some(FaultModel::new(rate)?),
                ..config.clone()
            };
            let trace = run(assembly, &cfg, stream)?;
            let kl = (0..assembly.names.len())
                .filter(|v| !assembly.clamped.contains_key(v))
                .map(|v| {
                    crate::lowprec::relative_entropy(&exact_marginals[v], &trace.marginal(v))
                        .unwrap_or(f64::INFINITY)
                })
                .sum();
            Ok(FaultPoint { rate, kl })
        })
        .collect()
}

pub fn write_fault_csv<W: Write>(points: &[FaultPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "fault_rate,kl_bits")?;
    for p in points {
        writeln!(out, "{},{:.6e}", p.rate, p.kl)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::total_variation;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    /// P(A) P(B|A) P(C|A) with the values used across the test suite.
    fn three_var(precision: Precision, kernel: KernelChoice) -> TransitionAssembly {
        let ar = vec![2, 2, 2];
        let factors = vec![
            EnergyFactor::from_weights(vec![0], &ar, &[0.3, 0.7]).unwrap(),
            EnergyFactor::from_weights(vec![0, 1], &ar, &[0.8, 0.2, 0.25, 0.75]).unwrap(),
            EnergyFactor::from_weights(vec![0, 2], &ar, &[0.9, 0.1, 0.4, 0.6]).unwrap(),
        ];
        TransitionAssembly::new(names(&["A", "B", "C"]), ar, factors, precision, kernel).unwrap()
    }

    fn exact_joint(clamp_c: Option<usize>) -> Vec<f64> {
        let pa = [0.3, 0.7];
        let pb = [[0.8, 0.2], [0.25, 0.75]];
        let pc = [[0.9, 0.1], [0.4, 0.6]];
        let mut j = [0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    if clamp_c.is_some_and(|x| x != c) {
                        continue;
                    }
                    j[a * 4 + b * 2 + c] = pa[a] * pb[a][b] * pc[a][c];
                }
            }
        }
        let z: f64 = j.iter().sum();
        j.iter().map(|p| p / z).collect()
    }

    #[test]
    fn unary_conditional() {
        let ar = vec![2];
        let f = vec![EnergyFactor::from_weights(vec![0], &ar, &[0.25, 0.75]).unwrap()];
        let asm = TransitionAssembly::new(names(&["x"]), ar, f, Precision::Exact, KernelChoice::Gibbs).unwrap();
        let d = asm.conditional(0, &[0], 1.0).unwrap().distribution().unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn conditional_of_a_matches_bayes_rule() {
        let asm = three_var(Precision::Exact, KernelChoice::Gibbs);
        let joint = exact_joint(None);
        for b in 0..2 {
            for c in 0..2 {
                let d = asm.conditional(0, &[0, b, c], 1.0).unwrap().distribution().unwrap();
                let p0 = joint[b * 2 + c];
                let p1 = joint[4 + b * 2 + c];
                assert!((d[0] - p0 / (p0 + p1)).abs() < 1e-12);
                // empirical draws through the gate
                let cond = asm.conditional(0, &[0, b, c], 1.0).unwrap();
                let mut s = EntropyStream::new(b as u64 * 2 + c as u64);
                let n = 100_000;
                let ones = (0..n).filter(|_| cond.sample(&mut s).unwrap() == 1).count();
                let emp = [1.0 - ones as f64 / n as f64, ones as f64 / n as f64];
                assert!(total_variation(&emp, &d) < 0.01);
            }
        }
    }

    #[test]
    fn ising_pair_prefers_agreement() {
        // coupling J = 1 bit: equal spins weigh 2, unequal 1
        let ar = vec![2, 2, 2];
        let f = vec![
            EnergyFactor::from_weights(vec![0, 1], &ar, &[2.0, 1.0, 1.0, 2.0]).unwrap(),
            EnergyFactor::from_weights(vec![0, 2], &ar, &[2.0, 1.0, 1.0, 2.0]).unwrap(),
        ];
        let asm = TransitionAssembly::new(names(&["s", "n1", "n2"]), ar, f, Precision::Exact, KernelChoice::Gibbs)
            .unwrap();
        for x in 0..2 {
            let d = asm.conditional(0, &[0, x, x], 1.0).unwrap().distribution().unwrap();
            // hand enumeration: agree 4, disagree 1
            assert!((d[x] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn metropolis_uniform_target_always_accepts() {
        let ar = vec![4];
        let f = vec![EnergyFactor::from_weights(vec![0], &ar, &[1.0; 4]).unwrap()];
        let asm = TransitionAssembly::new(names(&["u"]), ar, f, Precision::default(), KernelChoice::Metropolis)
            .unwrap();
        let mut chain = Chain::new(&asm, &EntropyStream::new(3), None).unwrap();
        for _ in 0..1000 {
            chain.sweep().unwrap();
        }
        let (p, a) = chain.acceptance();
        assert_eq!(p, 1000);
        assert_eq!(a, 1000);
    }

    #[test]
    fn metropolis_two_state_stationary() {
        let ar = vec![2];
        let f = vec![EnergyFactor::from_weights(vec![0], &ar, &[0.25, 0.75]).unwrap()];
        let asm = TransitionAssembly::new(names(&["x"]), ar, f, Precision::Exact, KernelChoice::Metropolis)
            .unwrap();
        let cfg = RunConfig {
            sweeps: 1_000_000,
            burn_in: 100,
            thin: 1,
            fault: None,
        };
        let t = run(&asm, &cfg, &EntropyStream::new(8)).unwrap();
        assert!(total_variation(&t.marginal(0), &[0.25, 0.75]) < 0.01);
    }

    #[test]
    fn metropolis_agrees_with_gibbs() {
        let cfg = |asm: &TransitionAssembly| RunConfig {
            sweeps: 200_000,
            ..RunConfig::new(asm, 1)
        };
        let g = three_var(Precision::default(), KernelChoice::Gibbs);
        let m = three_var(Precision::default(), KernelChoice::Metropolis);
        let tg = run(&g, &cfg(&g), &EntropyStream::new(1)).unwrap();
        let tm = run(&m, &cfg(&m), &EntropyStream::new(2)).unwrap();
        let all = [0, 1, 2];
        assert!(total_variation(&tg.joint_histogram(&all), &tm.joint_histogram(&all)) < 0.02);
    }

    #[test]
    fn serial_schedule_always_valid() {
        let asm = three_var(Precision::default(), KernelChoice::Gibbs);
        assert!(validate_schedule(&asm).is_empty());
        let asm = asm.with_schedule(Schedule::parallel(vec![vec![1, 2], vec![0]]));
        assert!(validate_schedule(&asm).is_empty());
        let bad = asm.with_schedule(Schedule::custom(vec![vec![0, 1, 2]]));
        assert_eq!(validate_schedule(&bad).len(), 2);
        assert!(matches!(
            Chain::new(&bad, &EntropyStream::new(0), None),
            Err(Error::ScheduleViolation { .. })
        ));
    }

    #[test]
    fn triangle_in_one_group_has_three_violations() {
        let ar = vec![2, 2, 2];
        let f = vec![EnergyFactor::from_weights(vec![0, 1, 2], &ar, &[1.0; 8]).unwrap()];
        let asm = TransitionAssembly::new(names(&["x", "y", "z"]), ar, f, Precision::Exact, KernelChoice::Gibbs)
            .unwrap()
            .with_schedule(Schedule::custom(vec![vec![0, 1, 2]]));
        assert_eq!(validate_schedule(&asm).len(), 3);
    }

    #[test]
    fn unclamped_and_clamped_joints() {
        let mut asm = three_var(Precision::default(), KernelChoice::Gibbs)
            .with_schedule(Schedule::parallel(vec![vec![1, 2], vec![0]]));
        let cfg = RunConfig {
            sweeps: 100_000,
            ..RunConfig::new(&asm, 1)
        };
        let t = run(&asm, &cfg, &EntropyStream::new(5)).unwrap();
        assert!(total_variation(&t.joint_histogram(&[0, 1, 2]), &exact_joint(None)) < 0.02);
        asm.clamp(2, 1).unwrap();
        let t = run(&asm, &cfg, &EntropyStream::new(6)).unwrap();
        assert!(t.rows().all(|r| r[2] == 1));
        assert!(total_variation(&t.joint_histogram(&[0, 1, 2]), &exact_joint(Some(1))) < 0.02);
    }

    #[test]
    fn zero_fault_rate_is_bit_identical() {
        let asm = three_var(Precision::default(), KernelChoice::Gibbs);
        let mut cfg = RunConfig::new(&asm, 5000);
        let a = run(&asm, &cfg, &EntropyStream::new(9)).unwrap();
        cfg.fault = Some(FaultModel::new(0.0).unwrap());
        let b = run(&asm, &cfg, &EntropyStream::new(9)).unwrap();
        assert_eq!(a, b);
        cfg.fault = Some(FaultModel::new(0.05).unwrap());
        let c = run(&asm, &cfg, &EntropyStream::new(9)).unwrap();
        assert_ne!(a, c);
        assert!(FaultModel::new(1.5).is_err());
    }

    #[test]
    fn heavy_faults_raise_marginal_divergence() {
        let asm = three_var(Precision::default(), KernelChoice::Gibbs);
        let cfg = RunConfig::new(&asm, 50_000);
        let j = exact_joint(None);
        let marginals: Vec<Vec<f64>> = (0..3)
            .map(|v| {
                let mut m = vec![0.0; 2];
                for (idx, p) in j.iter().enumerate() {
                    m[(idx >> (2 - v)) & 1] += p;
                }
                m
            })
            .collect();
        let curve = fault_kl_curve(&asm, &[0.0, 0.3], &cfg, &EntropyStream::new(10), &marginals).unwrap();
        assert!(curve[1].kl > 10.0 * curve[0].kl.max(1e-4), "{curve:?}");
    }

    #[test]
    fn random_scan_converges() {
        let asm = three_var(Precision::default(), KernelChoice::Gibbs).with_schedule(Schedule::random_scan(3));
        let cfg = RunConfig {
            sweeps: 100_000,
            ..RunConfig::new(&asm, 1)
        };
        let t = run(&asm, &cfg, &EntropyStream::new(12)).unwrap();
        assert!(total_variation(&t.joint_histogram(&[0, 1, 2]), &exact_joint(None)) < 0.02);
    }

    #[test]
    fn thinning_and_burn_in() {
        let asm = three_var(Precision::default(), KernelChoice::Gibbs);
        let cfg = RunConfig {
            sweeps: 100,
            burn_in: 7,
            thin: 10,
            fault: None,
        };
        assert_eq!(run(&asm, &cfg, &EntropyStream::new(0)).unwrap().len(), 10);
        assert!(run(&asm, &RunConfig { sweeps: 0, ..cfg.clone() }, &EntropyStream::new(0)).is_err());
    }

    #[test]
    fn register_widths() {
        assert_eq!(register_bits(1), 1);
        assert_eq!(register_bits(2), 1);
        assert_eq!(register_bits(3), 2);
        assert_eq!(register_bits(4), 2);
        assert_eq!(register_bits(5), 3);
    }

    #[test]
    fn zero_support_is_reported_by_name() {
        let ar = vec![2, 2];
        // y must equal x; the conditional of x given y is fine, but a factor
        // forbidding everything for y = 1 is not
        let f = vec![EnergyFactor::from_weights(vec![0, 1], &ar, &[1.0, 0.0, 1.0, 0.0]).unwrap()];
        let asm = TransitionAssembly::new(names(&["x", "y"]), ar, f, Precision::default(), KernelChoice::Gibbs)
            .unwrap();
        match asm.conditional(0, &[0, 1], 1.0) {
            Err(Error::ZeroSupport { variable }) => assert_eq!(variable, "x"),
            other => panic!("{other:?}"),
        }
    }
}
