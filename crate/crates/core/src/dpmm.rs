//! Dirichlet process mixture of Beta-Bernoulli images, sampled by collapsed
//! Gibbs over Chinese-restaurant-process seatings.
//!
//! Each datum's move draws from energies over the existing clusters plus one
//! fresh cluster:
//!
//! ```text
//! E_k   = -log2 n_k - sum_p log2 pred(x_p | c_kp, n_k)
//! E_new = -log2 alpha - sum_p log2 pred(x_p | 0, 0)
//! pred(1 | c, n) = (c + beta_on) / (n + beta_on + beta_off)
//! ```
//!
//! Cluster ids are founding serial numbers; they carry no meaning beyond
//! that and all comparisons use partitions.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};
use crate::lowprec::{Conditional, Precision};
use crate::pgm::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpmmParams {
    pub alpha: f64,
    pub beta_on: f64,
    pub beta_off: f64,
    pub precision: Precision,
}

impl Default for DpmmParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_on: 0.5,
            beta_off: 0.5,
            precision: Precision::default(),
        }
    }
}

impl DpmmParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_on", self.beta_on), ("beta_off", self.beta_off)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Cluster {
    size: u32,
    on: Vec<u32>,
}

impl Cluster {
    fn empty(dim: usize) -> Self {
        Self {
            size: 0,
            on: vec![0; dim],
        }
    }

    fn add(&mut self, x: &[bool]) {
        self.size += 1;
        for (c, &b) in self.on.iter_mut().zip(x) {
            *c += b as u32;
        }
    }

    fn remove(&mut self, x: &[bool]) {
        self.size -= 1;
        for (c, &b) in self.on.iter_mut().zip(x) {
            *c -= b as u32;
        }
    }
}

/// Energies for one datum's move; the last entry is the fresh cluster.
#[derive(Clone, Debug)]
pub struct AssignmentEnergies {
    pub clusters: Vec<u64>,
    pub energies: Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: u64,
    pub size: u32,
    /// Posterior predictive probability that each pixel is on.
    pub on_probability: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DpmmState {
    params: DpmmParams,
    dim: usize,
    data: Vec<Vec<bool>>,
    assignment: Vec<u64>,
    clusters: BTreeMap<u64, Cluster>,
    next_id: u64,
}

impl DpmmState {
    pub fn new(dim: usize, params: DpmmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            dim,
            data: Vec::new(),
            assignment: Vec::new(),
            clusters: BTreeMap::new(),
            next_id: 1,
        })
    }

    pub fn params(&self) -> &DpmmParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn assignments(&self) -> &[u64] {
        &self.assignment
    }

    /// Cluster labels renumbered by first appearance in datum order.
    pub fn partition(&self) -> Vec<usize> {
        canonical_partition(&self.assignment)
    }

    fn log2_predictive(&self, x: &[bool], cluster: &Cluster) -> f64 {
        let p = &self.params;
        let n = cluster.size as f64;
        let denom = (n + p.beta_on + p.beta_off).log2();
        x.iter()
            .zip(&cluster.on)
            .map(|(&b, &c)| {
                let num = if b { c as f64 + p.beta_on } else { n - c as f64 + p.beta_off };
                num.log2() - denom
            })
            .sum()
    }

    /// High-precision log2 energies over existing clusters then the fresh one.
    pub fn assignment_log2_energies(&self, x: &[bool]) -> Result<(Vec<u64>, Vec<f64>)> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut ids = Vec::with_capacity(self.clusters.len() + 1);
        let mut energies = Vec::with_capacity(self.clusters.len() + 1);
        for (&id, c) in &self.clusters {
            ids.push(id);
            energies.push(-(c.size as f64).log2() - self.log2_predictive(x, c));
        }
        ids.push(self.next_id);
        energies.push(-self.params.alpha.log2() - self.log2_predictive(x, &Cluster::empty(self.dim)));
        Ok((ids, energies))
    }

    pub fn assignment_energies(&self, x: &[bool]) -> Result<AssignmentEnergies> {
        let (clusters, e) = self.assignment_log2_energies(x)?;
        Ok(AssignmentEnergies {
            clusters,
            energies: Conditional::from_energies(&e, self.params.precision, 1.0)?,
        })
    }

    fn seat(&mut self, i: usize, stream: &mut EntropyStream) -> Result<()> {
        let a = self.assignment_energies(&self.data[i])?;
        let id = a.clusters[a.energies.sample(stream)?];
        if id == self.next_id {
            self.next_id += 1;
        }
        self.clusters
            .entry(id)
            .or_insert_with(|| Cluster::empty(self.dim))
            .add(&self.data[i]);
        self.assignment[i] = id;
        Ok(())
    }

    fn unseat(&mut self, i: usize) {
        let id = self.assignment[i];
        let c = self.clusters.get_mut(&id).expect("assigned cluster exists");
        c.remove(&self.data[i]);
        if c.size == 0 {
            self.clusters.remove(&id);
        }
        self.assignment[i] = 0;
    }

    /// Adds a datum by one conditional draw, then runs `inner_sweeps` sweeps.
    pub fn stream_datum(&mut self, x: Vec<bool>, inner_sweeps: usize, stream: &mut EntropyStream) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: x.len(),
            });
        }
        self.data.push(x);
        self.assignment.push(0);
        self.seat(self.data.len() - 1, stream)?;
        debug_assert_eq!(self.audit(), Ok(()));
        for _ in 0..inner_sweeps {
            self.gibbs_sweep(stream)?;
        }
        Ok(())
    }

    /// One move per datum, in ingestion order.
    pub fn gibbs_sweep(&mut self, stream: &mut EntropyStream) -> Result<()> {
        for i in 0..self.data.len() {
            self.unseat(i);
            self.seat(i, stream)?;
            debug_assert_eq!(self.audit(), Ok(()));
        }
        Ok(())
    }

    /// Recomputes every statistic from the assignments.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let mut fresh: BTreeMap<u64, Cluster> = BTreeMap::new();
        for (x, &id) in self.data.iter().zip(&self.assignment) {
            fresh.entry(id).or_insert_with(|| Cluster::empty(self.dim)).add(x);
        }
        if fresh != self.clusters {
            return Err("cluster statistics disagree with assignments".into());
        }
        if self.clusters.keys().any(|&id| id == 0 || id >= self.next_id) {
            return Err("cluster id outside the founded range".into());
        }
        Ok(())
    }

    /// Clusters by descending size, then founding order.
    pub fn cluster_summaries(&self) -> Vec<ClusterSummary> {
        let p = &self.params;
        let mut out: Vec<ClusterSummary> = self
            .clusters
            .iter()
            .map(|(&id, c)| ClusterSummary {
                id,
                size: c.size,
                on_probability: c
                    .on
                    .iter()
                    .map(|&k| (k as f64 + p.beta_on) / (c.size as f64 + p.beta_on + p.beta_off))
                    .collect(),
            })
            .collect();
        out.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
        out
    }
}

/// Relabels by order of first appearance.
pub fn canonical_partition(labels: &[u64]) -> Vec<usize> {
    let mut seen: Vec<u64> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(k) => k,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

/// Summary image: black where the pixel is likely on.
pub fn summary_image(summary: &ClusterSummary, height: usize, width: usize) -> Result<GrayImage> {
    GrayImage::new(
        width,
        height,
        summary
            .on_probability
            .iter()
            .map(|p| (255.0 * (1.0 - p)).round() as u8)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpmmRunConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Sweeps after each streamed datum during ingestion.
    pub inner_sweeps: usize,
}

impl Default for DpmmRunConfig {
    fn default() -> Self {
        Self {
            sweeps: 1000,
            burn_in: 100,
            thin: 1,
            inner_sweeps: 0,
        }
    }
}

/// Retained partitions of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct DpmmTrace {
    pub partitions: Vec<Vec<usize>>,
}

impl DpmmTrace {
    pub fn cluster_counts(&self) -> Vec<usize> {
        self.partitions
            .iter()
            .map(|p| p.iter().max().map_or(0, |&m| m + 1))
            .collect()
    }

    /// `(cluster count, retained samples)` in increasing count order.
    pub fn count_histogram(&self) -> Vec<(usize, usize)> {
        let mut h = BTreeMap::new();
        for k in self.cluster_counts() {
            *h.entry(k).or_insert(0) += 1;
        }
        h.into_iter().collect()
    }

    pub fn write_assignments_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.partitions.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        writeln!(out, "sample,{}", header.join(","))?;
        for (s, p) in self.partitions.iter().enumerate() {
            let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{s},{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_count_histogram_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "clusters,samples")?;
        for (k, c) in self.count_histogram() {
            writeln!(out, "{k},{c}")?;
        }
        Ok(())
    }
}

/// Streams every datum in, then sweeps.
pub fn run_dpmm(
    data: &[Vec<bool>],
    params: DpmmParams,
    config: &DpmmRunConfig,
    stream: &EntropyStream,
) -> Result<(DpmmState, DpmmTrace)> {
    if config.thin == 0 {
        return Err(Error::Config("thin must be at least 1".into()));
    }
    let dim = data.first().map_or(0, Vec::len);
    let mut state = DpmmState::new(dim, params)?;
    let mut s = stream.fork(0);
    for x in data {
        state.stream_datum(x.clone(), config.inner_sweeps, &mut s)?;
    }
    for _ in 0..config.burn_in {
        state.gibbs_sweep(&mut s)?;
    }
    let mut partitions = Vec::with_capacity(config.sweeps / config.thin + 1);
    for k in 0..config.sweeps {
        state.gibbs_sweep(&mut s)?;
        if k % config.thin == 0 {
            partitions.push(state.partition());
        }
    }
    Ok((state, DpmmTrace { partitions }))
}

/// One datum per line as `0`/`1` characters; whitespace is ignored and
/// lines starting with `#` are comments.
pub fn parse_binary_matrix(text: &str) -> Result<Vec<Vec<bool>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Config(format!("line {}: unexpected character `{c}`", n + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if Vec::len(first) != row.len() {
                return Err(Error::Shape {
                    expected: Vec::len(first),
                    actual: row.len(),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// IDX image file (`ubyte`, three dimensions), binarized at `threshold`.
/// Returns the data and the image shape `(rows, cols)`.
pub fn read_idx_images(bytes: &[u8], threshold: u8, limit: Option<usize>) -> Result<(Vec<Vec<bool>>, usize, usize)> {
    let mut r = bytes;
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Config("truncated IDX header".into()))?;
        Ok(u32::from_be_bytes(b))
    };
    let magic = word()?;
    if magic != 0x0000_0803 {
        return Err(Error::Config(format!("unsupported IDX magic {magic:#010x}")));
    }
    let count = word()? as usize;
    let rows = word()? as usize;
    let cols = word()? as usize;
    let count = limit.map_or(count, |l| l.min(count));
    let body = &bytes[16..];
    let size = rows * cols;
    if body.len() < count * size {
        return Err(Error::Config("IDX body shorter than its header declares".into()));
    }
    let data = body
        .chunks(size)
        .take(count)
        .map(|img| img.iter().map(|&p| p >= threshold).collect())
        .collect();
    Ok((data, rows, cols))
}

/// Binary data plus image shape when the source carries one.
pub type LoadedData = (Vec<Vec<bool>>, Option<(usize, usize)>);

pub fn read_data_file(path: &Path, threshold: u8, limit: Option<usize>) -> Result<LoadedData> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && bytes[..4] == [0, 0, 8, 3] {
        let (d, r, c) = read_idx_images(&bytes, threshold, limit)?;
        return Ok((d, Some((r, c))));
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Config("data file is neither IDX nor text".into()))?;
    let mut d = parse_binary_matrix(&text)?;
    if let Some(l) = limit {
        d.truncate(l);
    }
    Ok((d, None))
}

/// Two prototypes (all off, all on) with `per_cluster` copies each.
pub fn separated_fixture(per_cluster: usize, dim: usize) -> Vec<Vec<bool>> {
    let mut d = vec![vec![false; dim]; per_cluster];
    d.extend(vec![vec![true; dim]; per_cluster]);
    d
}

/// Three well-separated groups plus a small fourth group that differs from
/// the third in only a few pixels, so the posterior hesitates between three
/// and four clusters.
pub fn ambiguous_fixture() -> Vec<Vec<bool>> {
    const DIM: usize = 12;
    let block = |lo: usize, hi: usize| (0..DIM).map(|p| (lo..hi).contains(&p)).collect::<Vec<bool>>();
    let mut d = Vec::new();
    d.extend(std::iter::repeat_n(block(0, 4), 6));
    d.extend(std::iter::repeat_n(block(4, 8), 6));
    d.extend(std::iter::repeat_n(block(8, 12), 6));
    let mut near = block(8, 12);
    near[4] = true;
    near[8] = false;
    near[9] = false;
    d.extend(std::iter::repeat_n(near, 3));
    d
}
