//! Spiking realization of DISCRETE-SAMPLE and of transition assemblies.
//!
//! Every outcome value is a unit that fires after an exponential delay with
//! rate `2^-e`. The first unit to fire wins and inhibits the rest, so the
//! winner is distributed as `2^-e_i / sum_j 2^-e_j`. Saturated energies give
//! rate zero and never fire.
//!
//! Assemblies run quasi-synchronously: each schedule group occupies one unit
//! epoch, during which the races of all its free variables overlap. A spike
//! at offset `t` in epoch `k` is stamped `k + t`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};
use crate::lowprec::EnergyVector;
use crate::transition::{validate_schedule, ScheduleKind, Trace, TransitionAssembly, INIT_STREAM, SCAN_STREAM};

/// Race over log2 energies (`INFINITY` never fires). Returns the winner and
/// every unit's first-spike time.
pub fn race_energies(energies: &[f64], stream: &mut EntropyStream) -> Result<(usize, Vec<f64>)> {
    let times: Vec<f64> = energies
        .iter()
        .map(|&e| {
            let rate = (-e).exp2();
            if rate > 0.0 {
                -stream.uniform_open0().ln() / rate
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let winner = times
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or(Error::NoSupport)?;
    Ok((winner, times))
}

pub fn race_sample(energies: &EnergyVector, stream: &mut EntropyStream) -> Result<(usize, Vec<f64>)> {
    race_energies(&energies.energies(), stream)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub epoch: u64,
    pub time: f64,
    pub variable: usize,
    pub unit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    /// Winner spikes kept in the raster, counted from the first epoch.
    pub raster_limit: usize,
}

impl SpikeConfig {
    pub fn new(sweeps: usize) -> Self {
        Self {
            sweeps,
            burn_in: 100,
            raster_limit: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingRun {
    pub raster: Vec<Spike>,
    /// State after every post-burn-in sweep.
    pub trace: Trace,
    pub epochs: u64,
}

impl SpikingRun {
    pub fn write_raster_csv<W: Write>(&self, names: &[String], mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,variable,unit")?;
        for s in &self.raster {
            writeln!(out, "{:.6},{},{}", s.time, names[s.variable], s.unit)?;
        }
        Ok(())
    }
}

/// Gibbs sampling where every transition is a race among value units.
pub fn simulate_spiking_assembly(
    assembly: &TransitionAssembly,
    config: &SpikeConfig,
    stream: &EntropyStream,
) -> Result<SpikingRun> {
    let violations = validate_schedule(assembly);
    if !violations.is_empty() {
        return Err(Error::ScheduleViolation { pairs: violations });
    }
    let n = assembly.names().len();
    let clamped = assembly.clamped();
    let mut init = stream.fork(INIT_STREAM);
    let mut state: Vec<usize> = (0..n)
        .map(|v| match clamped.get(&v) {
            Some(&x) => x,
            None => init.below(assembly.arities()[v] as u64) as usize,
        })
        .collect();
    let mut streams: Vec<EntropyStream> = (0..n).map(|v| stream.fork(v as u64)).collect();
    let mut scan = stream.fork(SCAN_STREAM);
    let free: Vec<usize> = (0..n).filter(|v| !clamped.contains_key(v)).collect();
    let random_scan = assembly.schedule().kind() == ScheduleKind::RandomScan;

    let mut raster = Vec::new();
    let mut trace = Trace::new(assembly.names().to_vec(), assembly.arities().to_vec());
    let mut epoch = 0u64;
    let mut updates = Vec::new();
    for sweep in 0..config.burn_in + config.sweeps {
        let groups: Vec<Vec<usize>> = if random_scan {
            (0..free.len())
                .map(|_| vec![free[scan.below(free.len() as u64) as usize]])
                .collect()
        } else {
            assembly.schedule().groups().to_vec()
        };
        for group in &groups {
            updates.clear();
            for &v in group.iter().filter(|v| !clamped.contains_key(v)) {
                let cond = assembly.conditional(v, &state, 1.0)?;
                let (winner, times) = race_energies(&cond.energies(), &mut streams[v])?;
                if raster.len() < config.raster_limit {
                    raster.push(Spike {
                        epoch,
                        time: epoch as f64 + times[winner],
                        variable: v,
                        unit: winner,
                    });
                }
                updates.push((v, winner));
            }
            for &(v, x) in &updates {
                state[v] = x;
            }
            epoch += 1;
        }
        if sweep >= config.burn_in {
            trace.push(&state);
        }
    }
    Ok(SpikingRun {
        raster,
        trace,
        epochs: epoch,
    })
}
