//! Lattice Markov random fields for dense matching (stereo and motion).
//!
//! Each pixel carries a latent label `X[i][j]` in `0..D` and an evidence
//! vector of match costs. Neighbouring labels are coupled by a truncated
//! linear smoothness energy, so fields stay smooth on surfaces but may jump
//! at boundaries. All energies are in log2 units. The 4-connected lattice
//! is bipartite, so the compiled schedule is a two-phase checkerboard.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::compiler::{color_groups, color_interaction_graph};
use crate::entropy::EntropyStream;
use crate::error::{Error, Result};
use crate::factorgraph::{Factor, FactorGraph, Variable};
use crate::lowprec::Precision;
use crate::pgm::GrayImage;
use crate::transition::{Chain, EnergyFactor, KernelChoice, Schedule, ScheduleKind, TransitionAssembly};

/// Gray-level cap of the truncated absolute difference.
pub const C_MAX: u8 = 32;

/// Energy of one gray level of mismatch.
pub const BITS_PER_LEVEL: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Stereo,
    Motion,
}

/// Truncated linear pairwise energy.
pub fn smoothness_energy(a: usize, b: usize, lambda: f64, tau: f64) -> f64 {
    lambda * (a.abs_diff(b) as f64).min(tau)
}

/// Motion candidates: `(dy, dx)` offsets ordered by ring (Chebyshev radius),
/// then row, then column.
pub fn motion_offsets(count: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::with_capacity(count);
    let mut r = 0i64;
    while out.len() < count {
        let mut ring: Vec<(i64, i64)> = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.abs().max(dx.abs()) == r {
                    ring.push((dy, dx));
                }
            }
        }
        out.extend(ring.into_iter().take(count - out.len()));
        r += 1;
    }
    out
}

fn mismatch_energy(a: u8, b: u8) -> f64 {
    a.abs_diff(b).min(C_MAX) as f64 * BITS_PER_LEVEL
}

fn border_energy() -> f64 {
    C_MAX as f64 * BITS_PER_LEVEL
}

/// Per-pixel candidate costs, row-major with the candidate fastest.
///
/// Stereo: candidate `d` compares `first(i, j)` with `second(i, j - d)`.
/// Motion: candidate `k` compares `first(i, j)` with `second(i + dy, j + dx)`
/// for the `k`-th entry of [`motion_offsets`]. Out-of-bounds candidates cost
/// the cap.
pub fn evidence_from_images(first: &GrayImage, second: &GrayImage, labels: usize, mode: MatchMode) -> Result<Vec<f64>> {
    let (h, w) = (first.height(), first.width());
    if (second.height(), second.width()) != (h, w) {
        return Err(Error::Shape {
            expected: h * w,
            actual: second.height() * second.width(),
        });
    }
    if labels == 0 {
        return Err(Error::Config("label count must be at least 1".into()));
    }
    let offsets: Vec<(i64, i64)> = match mode {
        MatchMode::Stereo => {
            if labels > w {
                return Err(Error::Config(format!("{labels} disparities exceed image width {w}")));
            }
            (0..labels as i64).map(|d| (0, -d)).collect()
        }
        MatchMode::Motion => {
            let offsets = motion_offsets(labels);
            let reach = offsets.iter().map(|&(dy, dx)| dy.abs().max(dx.abs())).max().unwrap_or(0);
            if reach as usize >= h.min(w) {
                return Err(Error::Config(format!(
                    "{labels} motion candidates reach {reach} px, beyond a {h}x{w} image"
                )));
            }
            offsets
        }
    };
    let mut y = Vec::with_capacity(h * w * labels);
    for i in 0..h {
        for j in 0..w {
            let a = first.get(i, j);
            for &(dy, dx) in &offsets {
                let (r, c) = (i as i64 + dy, j as i64 + dx);
                y.push(if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    border_energy()
                } else {
                    mismatch_energy(a, second.get(r as usize, c as usize))
                });
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeMrf {
    height: usize,
    width: usize,
    labels: usize,
    evidence: Vec<f64>,
    lambda: f64,
    tau: f64,
    /// Label distance matrix used by the smoothness term.
    distance: Vec<f64>,
}

impl LatticeMrf {
    /// Scalar labels (disparities); distance is `|a - b|`.
    pub fn new(height: usize, width: usize, labels: usize, evidence: Vec<f64>, lambda: f64, tau: f64) -> Result<Self> {
        let distance = (0..labels * labels)
            .map(|k| (k / labels).abs_diff(k % labels) as f64)
            .collect();
        Self::with_distance(height, width, labels, evidence, lambda, tau, distance)
    }

    /// Motion labels; distance is the L1 distance between offsets.
    pub fn motion(height: usize, width: usize, labels: usize, evidence: Vec<f64>, lambda: f64, tau: f64) -> Result<Self> {
        let off = motion_offsets(labels);
        let distance = (0..labels * labels)
            .map(|k| {
                let (a, b) = (off[k / labels], off[k % labels]);
                ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as f64
            })
            .collect();
        Self::with_distance(height, width, labels, evidence, lambda, tau, distance)
    }

    fn with_distance(
        height: usize,
        width: usize,
        labels: usize,
        evidence: Vec<f64>,
        lambda: f64,
        tau: f64,
        distance: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || labels == 0 {
            return Err(Error::Config("lattice dimensions and label count must be positive".into()));
        }
        if evidence.len() != height * width * labels {
            return Err(Error::Shape {
                expected: height * width * labels,
                actual: evidence.len(),
            });
        }
        if evidence.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::Config("evidence costs must be finite and nonnegative".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite() && tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config("smoothness parameters must be finite and nonnegative".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
            evidence,
            lambda,
            tau,
            distance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn evidence(&self, row: usize, col: usize) -> &[f64] {
        let k = (row * self.width + col) * self.labels;
        &self.evidence[k..k + self.labels]
    }

    pub fn pair_energy(&self, a: usize, b: usize) -> f64 {
        self.lambda * self.distance[a * self.labels + b].min(self.tau)
    }

    /// Right and down neighbour pairs in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::with_capacity(2 * self.height * self.width);
        for i in 0..self.height {
            for j in 0..self.width {
                let p = i * self.width + j;
                if j + 1 < self.width {
                    e.push((p, p + 1));
                }
                if i + 1 < self.height {
                    e.push((p, p + self.width));
                }
            }
        }
        e
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let unary: f64 = labels
            .iter()
            .enumerate()
            .map(|(p, &x)| self.evidence[p * self.labels + x])
            .sum();
        let pair: f64 = self
            .edges()
            .into_iter()
            .map(|(a, b)| self.pair_energy(labels[a], labels[b]))
            .sum();
        unary + pair
    }

    fn names(&self) -> Vec<String> {
        let digits = self.height.max(self.width).to_string().len();
        (0..self.height)
            .flat_map(|i| (0..self.width).map(move |j| format!("x_{i:0digits$}_{j:0digits$}")))
            .collect()
    }

    fn pair_table(&self) -> Vec<f64> {
        (0..self.labels * self.labels)
            .map(|k| self.pair_energy(k / self.labels, k % self.labels))
            .collect()
    }

    /// Gibbs assembly with a checkerboard schedule (or the requested
    /// alternative).
    pub fn assembly(&self, precision: Precision, schedule: ScheduleKind) -> Result<TransitionAssembly> {
        let n = self.height * self.width;
        let arities = vec![self.labels; n];
        let pair = self.pair_table();
        let mut factors = Vec::with_capacity(3 * n);
        for p in 0..n {
            factors.push(EnergyFactor::from_energies(
                vec![p],
                &arities,
                self.evidence[p * self.labels..(p + 1) * self.labels].to_vec(),
            )?);
        }
        for (a, b) in self.edges() {
            factors.push(EnergyFactor::from_energies(vec![a, b], &arities, pair.clone())?);
        }
        let mut asm = TransitionAssembly::new(self.names(), arities, factors, precision, KernelChoice::Gibbs)?;
        let schedule = match schedule {
            ScheduleKind::Serial => Schedule::serial(n),
            ScheduleKind::RandomScan => Schedule::random_scan(n),
            ScheduleKind::Parallel | ScheduleKind::Custom => {
                let coloring = color_interaction_graph(asm.names(), asm.interaction_graph());
                Schedule::parallel(color_groups(&coloring))
            }
        };
        asm.set_schedule(schedule);
        Ok(asm)
    }

    /// The same model as a factor graph with linear weights `2^-E`.
    pub fn to_factor_graph(&self) -> Result<FactorGraph> {
        let n = self.height * self.width;
        let names = self.names();
        let variables = names
            .iter()
            .map(|name| Variable {
                name: name.clone(),
                arity: self.labels,
            })
            .collect();
        let weights = |e: &[f64]| e.iter().map(|x| (-x).exp2()).collect::<Vec<_>>();
        let mut factors: Vec<Factor> = (0..n)
            .map(|p| Factor {
                name: format!("e_{}", names[p]),
                vars: vec![p],
                table: weights(&self.evidence[p * self.labels..(p + 1) * self.labels]),
            })
            .collect();
        let pair = weights(&self.pair_table());
        for (a, b) in self.edges() {
            factors.push(Factor {
                name: format!("s_{}_{}", names[a], names[b]),
                vars: vec![a, b],
                table: pair.clone(),
            });
        }
        FactorGraph::new(variables, factors, BTreeMap::new())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub start: f64,
    pub end: f64,
}

impl Default for Anneal {
    fn default() -> Self {
        Self { start: 2.0, end: 0.1 }
    }
}

impl Anneal {
    /// Geometric ladder: temperature at sweep `s` of `total`.
    pub fn temperature(&self, s: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.end;
        }
        self.start * (self.end / self.start).powf(s as f64 / (total - 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub sweeps: usize,
    /// `None` samples the posterior at unit temperature.
    pub anneal: Option<Anneal>,
    pub precision: Precision,
    pub schedule: ScheduleKind,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            sweeps: 200,
            anneal: Some(Anneal::default()),
            precision: Precision::default(),
            schedule: ScheduleKind::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub labels: Vec<usize>,
    /// Total energy before the first sweep and after every sweep.
    pub energy_trace: Vec<f64>,
}

pub fn solve(mrf: &LatticeMrf, config: &SolveConfig, stream: &EntropyStream) -> Result<Solution> {
    let asm = mrf.assembly(config.precision, config.schedule)?;
    let mut chain = Chain::new(&asm, stream, None)?;
    let mut energy_trace = Vec::with_capacity(config.sweeps + 1);
    energy_trace.push(mrf.energy(chain.state()));
    for s in 0..config.sweeps {
        if let Some(a) = config.anneal {
            chain.set_temperature(a.temperature(s, config.sweeps));
        }
        chain.sweep()?;
        energy_trace.push(mrf.energy(chain.state()));
    }
    Ok(Solution {
        labels: chain.state().to_vec(),
        energy_trace,
    })
}

pub fn write_energy_csv<W: Write>(trace: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "sweep,energy")?;
    for (s, e) in trace.iter().enumerate() {
        writeln!(out, "{s},{e:.6}")?;
    }
    Ok(())
}

/// Labels scaled onto the gray range.
pub fn label_image(labels: &[usize], height: usize, width: usize, count: usize) -> Result<GrayImage> {
    let scale = if count > 1 { 255.0 / (count - 1) as f64 } else { 0.0 };
    GrayImage::new(
        width,
        height,
        labels.iter().map(|&x| (x as f64 * scale).round() as u8).collect(),
    )
}

/// Random-dot stereo pair. The second image is random; the first is built
/// so that `first(i, j) = second(i, j - disparity(i, j))` wherever that
/// source pixel exists. Returns `(first, second)`.
pub fn random_dot_stereogram(disparity: &[usize], height: usize, width: usize, stream: &mut EntropyStream) -> Result<(GrayImage, GrayImage)> {
    if disparity.len() != height * width {
        return Err(Error::Shape {
            expected: height * width,
            actual: disparity.len(),
        });
    }
    let second = GrayImage::new(width, height, (0..height * width).map(|_| stream.bits(8) as u8).collect())?;
    let mut first = GrayImage::filled(width, height, 0);
    for i in 0..height {
        for j in 0..width {
            let d = disparity[i * width + j];
            let v = if j >= d { second.get(i, j - d) } else { stream.bits(8) as u8 };
            first.set(i, j, v);
        }
    }
    Ok((first, second))
}

/// A square of `front` disparity on a `back` background.
pub fn square_disparity(height: usize, width: usize, back: usize, front: usize) -> Vec<usize> {
    let (r0, r1) = (height / 4, height - height / 4);
    let (c0, c1) = (width / 4, width - width / 4);
    (0..height * width)
        .map(|p| {
            let (i, j) = (p / width, p % width);
            if (r0..r1).contains(&i) && (c0..c1).contains(&j) {
                front
            } else {
                back
            }
        })
        .collect()
}

/// Motion pair: the second frame is the first with every pixel moved by the
/// offset of its label (pixels uncovered by the move are fresh noise).
pub fn random_motion_pair(flow: &[usize], height: usize, width: usize, labels: usize, stream: &mut EntropyStream) -> Result<(GrayImage, GrayImage)> {
    if flow.len() != height * width {
        return Err(Error::Shape {
            expected: height * width,
            actual: flow.len(),
        });
    }
    let offsets = motion_offsets(labels);
    let first = GrayImage::new(width, height, (0..height * width).map(|_| stream.bits(8) as u8).collect())?;
    let mut second = GrayImage::new(width, height, (0..height * width).map(|_| stream.bits(8) as u8).collect())?;
    for i in 0..height {
        for j in 0..width {
            let (dy, dx) = offsets[flow[i * width + j]];
            let (r, c) = (i as i64 + dy, j as i64 + dx);
            if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                second.set(r as usize, c as usize, first.get(i, j));
            }
        }
    }
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::total_variation;
    use crate::transition::{run, validate_schedule, RunConfig};

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_energy(4, 4, 2.0, 3.0), 0.0);
        assert_eq!(smoothness_energy(3, 4, 2.0, 3.0), 2.0);
        assert_eq!(smoothness_energy(0, 10, 2.0, 3.0), 6.0);
    }

    #[test]
    fn ring_order() {
        let o = motion_offsets(10);
        assert_eq!(o[0], (0, 0));
        assert_eq!(o[1], (-1, -1));
        assert_eq!(o[8], (1, 1));
        assert_eq!(o[9], (-2, -2));
    }

    #[test]
    fn evidence_examples() {
        let mut s = EntropyStream::new(1);
        let img = GrayImage::new(8, 4, (0..32).map(|_| s.bits(8) as u8).collect()).unwrap();
        let y = evidence_from_images(&img, &img, 3, MatchMode::Stereo).unwrap();
        assert!(y.chunks(3).all(|c| c[0] == 0.0));
        // left border: candidate 2 falls outside for columns 0 and 1
        assert_eq!(y[2], border_energy());
        assert_eq!(y[3 + 2], border_energy());
        assert!(evidence_from_images(&img, &img, 9, MatchMode::Stereo).is_err());

        let disp = vec![2; 16 * 16];
        let (l, r) = random_dot_stereogram(&disp, 16, 16, &mut s).unwrap();
        let y = evidence_from_images(&l, &r, 5, MatchMode::Stereo).unwrap();
        for i in 0..16 {
            for j in 2..16 {
                let c = &y[(i * 16 + j) * 5..(i * 16 + j + 1) * 5];
                assert_eq!(c[2], 0.0);
            }
        }
    }

    #[test]
    fn motion_evidence_finds_the_shift() {
        let mut s = EntropyStream::new(2);
        let (h, w, d) = (12, 12, 9);
        let flow = vec![5; h * w];
        let (a, b) = random_motion_pair(&flow, h, w, d, &mut s).unwrap();
        let y = evidence_from_images(&a, &b, d, MatchMode::Motion).unwrap();
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                assert_eq!(y[(i * w + j) * d + 5], 0.0);
            }
        }
    }

    fn small_mrf(seed: u64, lambda: f64) -> LatticeMrf {
        let mut s = EntropyStream::new(seed);
        let ev = (0..27).map(|_| s.uniform() * 3.0).collect();
        LatticeMrf::new(3, 3, 3, ev, lambda, 2.0).unwrap()
    }

    #[test]
    fn checkerboard_is_valid() {
        let m = small_mrf(0, 1.0);
        let a = m.assembly(Precision::default(), ScheduleKind::Parallel).unwrap();
        assert_eq!(a.schedule().groups().len(), 2);
        assert!(validate_schedule(&a).is_empty());
        for g in a.schedule().groups() {
            let parity = (g[0] / 3 + g[0] % 3) % 2;
            assert!(g.iter().all(|&p| (p / 3 + p % 3) % 2 == parity));
        }
    }

    #[test]
    fn three_by_three_matches_enumeration() {
        let m = small_mrf(4, 1.0);
        let exact = m.to_factor_graph().unwrap().enumerate_joint().unwrap();
        let a = m.assembly(Precision::default(), ScheduleKind::Parallel).unwrap();
        let cfg = RunConfig {
            sweeps: 50_000,
            ..RunConfig::new(&a, 1)
        };
        let t = run(&a, &cfg, &EntropyStream::new(5)).unwrap();
        for p in 0..9 {
            assert!(total_variation(&t.marginal(p), &exact.marginal(p)) < 0.03);
        }
    }

    #[test]
    fn independent_pixels_follow_evidence() {
        let mut s = EntropyStream::new(6);
        let ev: Vec<f64> = (0..64 * 4).map(|_| s.uniform() * 4.0).collect();
        let m = LatticeMrf::new(8, 8, 4, ev.clone(), 0.0, 2.0).unwrap();
        let a = m.assembly(Precision::Exact, ScheduleKind::Parallel).unwrap();
        let cfg = RunConfig {
            sweeps: 4000,
            ..RunConfig::new(&a, 1)
        };
        let t = run(&a, &cfg, &EntropyStream::new(7)).unwrap();
        for p in 0..64 {
            let c = &ev[p * 4..p * 4 + 4];
            let argmin = (0..4).min_by(|&x, &y| c[x].total_cmp(&c[y])).unwrap();
            let mut sorted = c.to_vec();
            sorted.sort_by(f64::total_cmp);
            if sorted[1] - sorted[0] < 0.3 {
                continue;
            }
            let marg = t.marginal(p);
            let mode = (0..4).max_by(|&x, &y| marg[x].total_cmp(&marg[y])).unwrap();
            assert_eq!(mode, argmin, "pixel {p}");
        }
    }

    #[test]
    fn annealed_stereogram_recovers_shift() {
        let (h, w, d) = (24, 24, 5);
        let truth = square_disparity(h, w, 1, 3);
        let (l, r) = random_dot_stereogram(&truth, h, w, &mut EntropyStream::new(8)).unwrap();
        let ev = evidence_from_images(&l, &r, d, MatchMode::Stereo).unwrap();
        let m = LatticeMrf::new(h, w, d, ev, 1.0, 2.0).unwrap();
        let sol = solve(&m, &SolveConfig::default(), &EntropyStream::new(9)).unwrap();
        assert!(sol.energy_trace.last() < sol.energy_trace.first());
        let (mut ok, mut total) = (0, 0);
        for i in 1..h - 1 {
            for j in d..w - 1 {
                total += 1;
                ok += (sol.labels[i * w + j] == truth[i * w + j]) as usize;
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn anneal_ladder_endpoints() {
        let a = Anneal::default();
        assert!((a.temperature(0, 100) - 2.0).abs() < 1e-12);
        assert!((a.temperature(99, 100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn invalid_lattices() {
        assert!(LatticeMrf::new(2, 2, 2, vec![0.0; 7], 1.0, 1.0).is_err());
        assert!(LatticeMrf::new(2, 2, 2, vec![-1.0; 8], 1.0, 1.0).is_err());
        assert!(LatticeMrf::new(0, 2, 2, vec![], 1.0, 1.0).is_err());
    }
}
