//! Relative entropy of the fixed-point gate against the exact distribution,
//! swept over entropy and word width.
//!
//! Distributions over `K` outcomes are drawn from a symmetric Dirichlet whose
//! concentration is log-uniform on a per-bin sub-range of
//! `concentration_range`; draws whose entropy lands outside the target bin are
//! rejected. Sub-ranges come from a pilot pass that maps concentration to mean
//! entropy. One-hot and uniform endpoints are reported as their own rows.
//!
//! Each distribution is handed to the gate as energies relative to its most
//! probable outcome. The reported divergence is `KL(gate ‖ exact)`: the
//! reverse direction is infinite whenever a tail outcome falls past the
//! saturation code, which happens at every width for sparse distributions.
//!
//! Gamma variates for shapes below one use `ln G = ln G' + ln(U) / α` with
//! `G' ~ Gamma(α + 1)`, so the whole computation stays in the log domain.

use std::f64::consts::LN_2;
use std::io::Write;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use super::{EnergyFormat, EnergyVector};
use crate::entropy::EntropyStream;
use crate::error::{Error, Result};

pub const SWEEP_CSV_HEADER: &str = "entropy_bits,total_bits,frac_bits,mean_kl,max_kl,n";

const PILOT_POINTS: usize = 61;
const PILOT_SAMPLES: u64 = 8;
const CHUNK: u64 = 2048;
const PILOT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub outcomes: usize,
    pub per_bin: usize,
    /// Bin edges in bits, ascending.
    pub entropy_edges: Vec<f64>,
    pub formats: Vec<EnergyFormat>,
    pub concentration_range: (f64, f64),
    /// Give up on a bin after `per_bin * max_attempts_factor` draws.
    pub max_attempts_factor: usize,
}

impl SweepConfig {
    /// One-bit bins from 0 up to `log2 K`.
    pub fn new(outcomes: usize, per_bin: usize, formats: Vec<EnergyFormat>) -> Self {
        Self {
            outcomes,
            per_bin,
            entropy_edges: default_edges(outcomes),
            formats,
            concentration_range: (1e-3, 1e3),
            max_attempts_factor: 200,
        }
    }
}

pub fn default_edges(outcomes: usize) -> Vec<f64> {
    let top = (outcomes.max(2) as f64).log2();
    let mut edges: Vec<f64> = (0..).map(|b| b as f64).take_while(|&b| b < top).collect();
    edges.push(top);
    edges
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// Mean entropy of the distributions in the bin.
    pub entropy_bits: f64,
    pub total_bits: u32,
    pub frac_bits: u32,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub n: usize,
}

struct Draw {
    entropy: f64,
    kl: Vec<f64>,
}

/// Log of a Dirichlet(α, …, α) draw, up to an additive constant.
fn log_dirichlet(k: usize, alpha: f64, stream: &mut EntropyStream) -> Vec<f64> {
    if alpha >= 1.0 {
        let g = Gamma::new(alpha, 1.0).expect("valid gamma shape");
        (0..k).map(|_| g.sample(stream).ln()).collect()
    } else {
        let g = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma shape");
        (0..k)
            .map(|_| g.sample(stream).ln() + stream.uniform_open0().ln() / alpha)
            .collect()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropy in bits from unnormalized natural-log weights.
fn entropy_bits(log_w: &[f64]) -> f64 {
    let lse = log_sum_exp(log_w);
    log_w
        .iter()
        .map(|&l| {
            let p = (l - lse).exp();
            if p > 0.0 {
                p * (lse - l) / LN_2
            } else {
                0.0
            }
        })
        .sum()
}

/// `KL(gate ‖ exact)` in bits for every format, from unnormalized natural-log
/// weights.
fn gate_divergences(log_w: &[f64], formats: &[EnergyFormat]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_w);
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let energies: Vec<f64> = log_w.iter().map(|&l| (max - l) / LN_2).collect();
    formats
        .iter()
        .map(|&format| {
            let q = EnergyVector::from_energies(&energies, format)?.declared_distribution()?;
            Ok(q.iter()
                .zip(log_w)
                .filter(|(&qi, _)| qi > 0.0)
                .map(|(&qi, &l)| qi * (qi.log2() - (l - lse) / LN_2))
                .sum::<f64>()
                .max(0.0))
        })
        .collect()
}

fn log_uniform(lo: f64, hi: f64, stream: &mut EntropyStream) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * stream.uniform()).exp()
}

/// Mean entropy per concentration on a log grid.
fn pilot(k: usize, range: (f64, f64), root: &EntropyStream) -> Vec<(f64, f64)> {
    let stream = root.fork(PILOT_STREAM);
    (0..PILOT_POINTS)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / (PILOT_POINTS - 1) as f64;
            let alpha = (range.0.ln() + t * (range.1.ln() - range.0.ln())).exp();
            let mut s = stream.fork(i as u64);
            let mean = (0..PILOT_SAMPLES)
                .map(|_| entropy_bits(&log_dirichlet(k, alpha, &mut s)))
                .sum::<f64>()
                / PILOT_SAMPLES as f64;
            (alpha, mean)
        })
        .collect()
}

fn concentration_window(grid: &[(f64, f64)], lo: f64, hi: f64) -> (f64, f64) {
    let below = grid.iter().rposition(|&(_, h)| h < lo).unwrap_or(0);
    let above = grid
        .iter()
        .position(|&(_, h)| h > hi)
        .unwrap_or(grid.len() - 1);
    let a = below.saturating_sub(1);
    let b = (above + 1).min(grid.len() - 1);
    (grid[a].0, grid[b.max(a)].0)
}

fn summarize(entropy: f64, draws_kl: &[Vec<f64>], formats: &[EnergyFormat]) -> Vec<SweepRow> {
    formats
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let n = draws_kl.len();
            let kls = draws_kl.iter().map(|k| k[fi]);
            SweepRow {
                entropy_bits: entropy,
                total_bits: f.total_bits(),
                frac_bits: f.frac_bits(),
                mean_kl: kls.clone().sum::<f64>() / n as f64,
                max_kl: kls.fold(0.0, f64::max),
                n,
            }
        })
        .collect()
}

/// Rows ordered by bin (one-hot endpoint first, uniform endpoint last), then
/// by format in the order given. Independent of the rayon thread count.
pub fn precision_sweep(config: &SweepConfig, stream: &EntropyStream) -> Result<Vec<SweepRow>> {
    let k = config.outcomes;
    if k < 2 {
        return Err(Error::Config("precision sweep needs at least two outcomes".into()));
    }
    if config.formats.is_empty() {
        return Err(Error::Config("precision sweep needs at least one format".into()));
    }
    if config.entropy_edges.len() < 2 || config.entropy_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("entropy edges must be ascending with at least two entries".into()));
    }
    let formats = &config.formats;
    let mut rows = Vec::new();

    let mut one_hot = vec![f64::NEG_INFINITY; k];
    one_hot[0] = 0.0;
    rows.extend(summarize(0.0, &[gate_divergences(&one_hot, formats)?], formats));

    let grid = pilot(k, config.concentration_range, stream);
    let n_bins = config.entropy_edges.len() - 1;
    for (b, edge) in config.entropy_edges.windows(2).enumerate() {
        let (lo, hi) = (edge[0], edge[1]);
        let last = b + 1 == n_bins;
        let (a_lo, a_hi) = concentration_window(&grid, lo, hi);
        let bin_stream = stream.fork(b as u64);
        let max_attempts = (config.per_bin * config.max_attempts_factor) as u64;
        let mut accepted: Vec<Draw> = Vec::with_capacity(config.per_bin);
        let mut start = 0u64;
        while accepted.len() < config.per_bin && start < max_attempts {
            let end = (start + CHUNK).min(max_attempts);
            let chunk: Vec<Option<Draw>> = (start..end)
                .into_par_iter()
                .map(|j| -> Result<Option<Draw>> {
                    let mut s = bin_stream.fork(j);
                    let alpha = log_uniform(a_lo, a_hi, &mut s);
                    let log_w = log_dirichlet(k, alpha, &mut s);
                    let h = entropy_bits(&log_w);
                    let inside = h >= lo && (h < hi || (last && h <= hi));
                    if !inside {
                        return Ok(None);
                    }
                    Ok(Some(Draw {
                        entropy: h,
                        kl: gate_divergences(&log_w, formats)?,
                    }))
                })
                .collect::<Result<_>>()?;
            accepted.extend(chunk.into_iter().flatten().take(config.per_bin - accepted.len()));
            start = end;
        }
        if accepted.is_empty() {
            continue;
        }
        let mean_h = accepted.iter().map(|d| d.entropy).sum::<f64>() / accepted.len() as f64;
        let kls: Vec<Vec<f64>> = accepted.into_iter().map(|d| d.kl).collect();
        rows.extend(summarize(mean_h, &kls, formats));
    }

    let uniform = vec![0.0; k];
    rows.extend(summarize((k as f64).log2(), &[gate_divergences(&uniform, formats)?], formats));
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:.6},{},{},{:.6e},{:.6e},{}",
            r.entropy_bits, r.total_bits, r.frac_bits, r.mean_kl, r.max_kl, r.n
        )?;
    }
    Ok(())
}
