//! Combinational stochastic gates.
//!
//! A gate with `m` input bits and `n` output bits is specified by a
//! conditional probability table: one distribution over `2^n` output words
//! for each of the `2^m` input words. Boolean gates are the special case in
//! which every row is one-hot.
//!
//! Word layout for parallel (side-by-side) composition: the first gate owns
//! the high bits of both the input and the output word.

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};

/// Dense tables are limited to this many entries; larger gates must be
/// procedural.
pub const MAX_TABLE_ENTRIES: u128 = 1 << 16;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCpt", into = "RawCpt")]
pub struct Cpt {
    m: u32,
    n: u32,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawCpt {
    m: u32,
    n: u32,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RawCpt> for Cpt {
    type Error = Error;
    fn try_from(raw: RawCpt) -> Result<Self> {
        Cpt::new(raw.m, raw.n, raw.rows)
    }
}

impl From<Cpt> for RawCpt {
    fn from(c: Cpt) -> Self {
        RawCpt {
            m: c.m,
            n: c.n,
            rows: c.rows,
        }
    }
}

fn check_table_size(m: u32, n: u32) -> Result<()> {
    let entries = 1u128 << (m + n).min(127);
    if m + n > 16 {
        return Err(Error::TableTooLarge {
            entries,
            limit: MAX_TABLE_ENTRIES,
        });
    }
    Ok(())
}

impl Cpt {
    pub fn new(m: u32, n: u32, rows: Vec<Vec<f64>>) -> Result<Self> {
        check_table_size(m, n)?;
        if rows.len() != 1 << m {
            return Err(Error::InvalidCpt(format!(
                "expected {} rows for {m} input bits, found {}",
                1u64 << m,
                rows.len()
            )));
        }
        for (x, row) in rows.iter().enumerate() {
            if row.len() != 1 << n {
                return Err(Error::InvalidCpt(format!(
                    "row {x} has {} entries, expected {}",
                    row.len(),
                    1u64 << n
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidCpt(format!("row {x} has entry {bad} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidCpt(format!("row {x} sums to {sum}")));
            }
        }
        Ok(Self { m, n, rows })
    }

    /// Truth table of a deterministic gate as a 0/1 table.
    pub fn deterministic(m: u32, n: u32, f: impl Fn(u64) -> u64) -> Result<Self> {
        check_table_size(m, n)?;
        let rows = (0..1u64 << m)
            .map(|x| {
                let y = f(x);
                assert!(y < 1 << n, "truth table output {y} does not fit in {n} bits");
                let mut row = vec![0.0; 1 << n];
                row[y as usize] = 1.0;
                row
            })
            .collect();
        Self::new(m, n, rows)
    }

    pub fn identity(bits: u32) -> Result<Self> {
        Self::deterministic(bits, bits, |x| x)
    }

    pub fn in_bits(&self) -> u32 {
        self.m
    }

    pub fn out_bits(&self) -> u32 {
        self.n
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, input: u64) -> &[f64] {
        &self.rows[input as usize]
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    /// Marginalizes the intermediate word: `(self ∘ next)[x][z] = Σ_y self[x][y] next[y][z]`.
    pub fn then(&self, next: &Cpt) -> Result<Cpt> {
        if self.n != next.m {
            return Err(Error::Composition {
                out_bits: self.n,
                in_bits: next.m,
            });
        }
        let width = 1usize << next.n;
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut out = vec![0.0; width];
                for (y, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (z, &q) in next.rows[y].iter().enumerate() {
                        out[z] += p * q;
                    }
                }
                out
            })
            .collect();
        Cpt::new_unchecked_sum(self.m, next.n, rows)
    }

    /// Tensor product; `self` owns the high bits.
    pub fn beside(&self, low: &Cpt) -> Result<Cpt> {
        let m = self.m + low.m;
        let n = self.n + low.n;
        check_table_size(m, n)?;
        let mut rows = Vec::with_capacity(1 << m);
        for hi_row in &self.rows {
            for lo_row in &low.rows {
                let mut row = Vec::with_capacity(1 << n);
                for &p in hi_row {
                    for &q in lo_row {
                        row.push(p * q);
                    }
                }
                rows.push(row);
            }
        }
        Cpt::new_unchecked_sum(m, n, rows)
    }

    // Products of valid rows can drift past the 1e-12 tolerance when the
    // intermediate alphabet is large; renormalize instead of rejecting.
    fn new_unchecked_sum(m: u32, n: u32, mut rows: Vec<Vec<f64>>) -> Result<Cpt> {
        for row in &mut rows {
            let s: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p = (*p / s).clamp(0.0, 1.0);
            }
        }
        Cpt::new(m, n, rows)
    }

    /// Largest per-row total variation distance to `other`.
    pub fn max_row_tv(&self, other: &Cpt) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| total_variation(a, b))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cpt serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn bits_for(count: u64) -> u32 {
    // bits needed to represent values 0..=count
    (64 - count.leading_zeros()).max(1)
}

fn binomial_pmf(n: u32, p: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n as usize + 1];
    let mut coef = 1.0f64;
    for j in 0..=n {
        if j > 0 {
            coef *= (n - j + 1) as f64 / j as f64;
        }
        pmf[j as usize] = coef * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
    }
    pmf
}

#[derive(Clone, Debug, PartialEq)]
pub enum StochasticGate {
    /// Sampled by inverse-CDF lookup with one 53-bit draw.
    Table(Cpt),
    /// Bernoulli(k / 2^m) coin with the weight `k` on its `m` input bits.
    Theta { weight_bits: u32 },
    /// Sum of `coins` THETA gates sharing one weight input.
    Binomial { coins: u32, weight_bits: u32 },
    Serial(Box<StochasticGate>, Box<StochasticGate>),
    Parallel(Box<StochasticGate>, Box<StochasticGate>),
}

impl StochasticGate {
    pub fn table(cpt: Cpt) -> Self {
        StochasticGate::Table(cpt)
    }

    pub fn and() -> Self {
        Self::Table(Cpt::deterministic(2, 1, |x| (x >> 1) & x & 1).unwrap())
    }

    pub fn or() -> Self {
        Self::Table(Cpt::deterministic(2, 1, |x| ((x >> 1) | x) & 1).unwrap())
    }

    pub fn xor() -> Self {
        Self::Table(Cpt::deterministic(2, 1, |x| ((x >> 1) ^ x) & 1).unwrap())
    }

    pub fn not() -> Self {
        Self::Table(Cpt::deterministic(1, 1, |x| !x & 1).unwrap())
    }

    pub fn identity(bits: u32) -> Result<Self> {
        Ok(Self::Table(Cpt::identity(bits)?))
    }

    pub fn theta(weight_bits: u32) -> Result<Self> {
        if weight_bits == 0 || weight_bits > 64 {
            return Err(Error::InvalidWidth(weight_bits));
        }
        Ok(Self::Theta { weight_bits })
    }

    pub fn binomial(coins: u32, weight_bits: u32) -> Result<Self> {
        if weight_bits == 0 || weight_bits > 64 {
            return Err(Error::InvalidWidth(weight_bits));
        }
        if coins == 0 {
            return Err(Error::Config("binomial circuit needs at least one coin".into()));
        }
        Ok(Self::Binomial { coins, weight_bits })
    }

    pub fn in_bits(&self) -> u32 {
        match self {
            Self::Table(c) => c.in_bits(),
            Self::Theta { weight_bits } | Self::Binomial { weight_bits, .. } => *weight_bits,
            Self::Serial(a, _) => a.in_bits(),
            Self::Parallel(a, b) => a.in_bits() + b.in_bits(),
        }
    }

    pub fn out_bits(&self) -> u32 {
        match self {
            Self::Table(c) => c.out_bits(),
            Self::Theta { .. } => 1,
            Self::Binomial { coins, .. } => bits_for(*coins as u64),
            Self::Serial(_, b) => b.out_bits(),
            Self::Parallel(a, b) => a.out_bits() + b.out_bits(),
        }
    }

    pub fn sample(&self, input: u64, stream: &mut EntropyStream) -> Result<u64> {
        let m = self.in_bits();
        if m < 64 && input >> m != 0 {
            return Err(Error::InputOutOfRange { input, bits: m });
        }
        Ok(self.sample_unchecked(input, stream))
    }

    fn sample_unchecked(&self, input: u64, stream: &mut EntropyStream) -> u64 {
        match self {
            Self::Table(cpt) => {
                let row = cpt.row(input);
                let u = stream.uniform();
                let mut acc = 0.0;
                let mut last_nonzero = 0;
                for (y, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        last_nonzero = y;
                        if u < acc {
                            return y as u64;
                        }
                    }
                }
                last_nonzero as u64
            }
            Self::Theta { weight_bits } => theta_draw(*weight_bits, input, stream) as u64,
            Self::Binomial { coins, weight_bits } => {
                (0..*coins).filter(|_| theta_draw(*weight_bits, input, stream)).count() as u64
            }
            Self::Serial(a, b) => {
                let mid = a.sample_unchecked(input, stream);
                b.sample_unchecked(mid, stream)
            }
            Self::Parallel(a, b) => {
                let lo_in = b.in_bits();
                let lo_out = b.out_bits();
                let hi = a.sample_unchecked(input >> lo_in, stream);
                let lo = b.sample_unchecked(input & low_mask(lo_in), stream);
                (hi << lo_out) | lo
            }
        }
    }

    /// The table this gate is declared to sample from.
    pub fn declared_cpt(&self) -> Result<Cpt> {
        check_table_size(self.in_bits(), self.out_bits())?;
        match self {
            Self::Table(cpt) => Ok(cpt.clone()),
            Self::Theta { weight_bits } => {
                let denom = (1u64 << weight_bits) as f64;
                let rows = (0..1u64 << weight_bits)
                    .map(|k| {
                        let p = k as f64 / denom;
                        vec![1.0 - p, p]
                    })
                    .collect();
                Cpt::new(*weight_bits, 1, rows)
            }
            Self::Binomial { coins, weight_bits } => {
                let n = self.out_bits();
                let denom = (1u64 << weight_bits) as f64;
                let rows = (0..1u64 << weight_bits)
                    .map(|k| {
                        let mut row = binomial_pmf(*coins, k as f64 / denom);
                        row.resize(1 << n, 0.0);
                        row
                    })
                    .collect();
                Cpt::new_unchecked_sum(*weight_bits, n, rows)
            }
            Self::Serial(a, b) => a.declared_cpt()?.then(&b.declared_cpt()?),
            Self::Parallel(a, b) => a.declared_cpt()?.beside(&b.declared_cpt()?),
        }
    }
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Comparator THETA: one `m`-bit draw `u`, output `u < k`.
#[inline]
fn theta_draw(weight_bits: u32, weight: u64, stream: &mut EntropyStream) -> bool {
    stream.bits(weight_bits) < weight
}

/// Feeds `g1`'s output into `g2`'s input.
pub fn compose_serial(g1: StochasticGate, g2: StochasticGate) -> Result<StochasticGate> {
    if g1.out_bits() != g2.in_bits() {
        return Err(Error::Composition {
            out_bits: g1.out_bits(),
            in_bits: g2.in_bits(),
        });
    }
    Ok(StochasticGate::Serial(Box::new(g1), Box::new(g2)))
}

/// Side-by-side gates on disjoint inputs; `high` owns the high bits.
pub fn compose_parallel(high: StochasticGate, low: StochasticGate) -> StochasticGate {
    StochasticGate::Parallel(Box::new(high), Box::new(low))
}

/// Bernoulli bit with `P(1) = weight / 2^weight_bits`.
pub fn theta_sample(weight_bits: u32, weight: u64, stream: &mut EntropyStream) -> Result<bool> {
    if weight_bits == 0 || weight_bits > 64 {
        return Err(Error::InvalidWidth(weight_bits));
    }
    if weight_bits < 64 && weight >> weight_bits != 0 {
        return Err(Error::InputOutOfRange {
            input: weight,
            bits: weight_bits,
        });
    }
    Ok(theta_draw(weight_bits, weight, stream))
}

/// Sum of `n_coins` independent THETA draws with a shared weight.
pub fn binomial_circuit(
    n_coins: u32,
    weight_bits: u32,
    weight: u64,
    stream: &mut EntropyStream,
) -> Result<u32> {
    if n_coins == 0 {
        return Err(Error::Config("binomial circuit needs at least one coin".into()));
    }
    let mut sum = 0;
    for _ in 0..n_coins {
        sum += theta_sample(weight_bits, weight, stream)? as u32;
    }
    Ok(sum)
}

/// Empirical table from `samples_per_row` draws on every input word.
pub fn estimate_cpt(
    gate: &StochasticGate,
    samples_per_row: u64,
    stream: &mut EntropyStream,
) -> Result<Cpt> {
    if samples_per_row == 0 {
        return Err(Error::Config("samples_per_row must be positive".into()));
    }
    let (m, n) = (gate.in_bits(), gate.out_bits());
    check_table_size(m, n)?;
    let rows = (0..1u64 << m)
        .map(|x| {
            let mut counts = vec![0u64; 1 << n];
            for _ in 0..samples_per_row {
                counts[gate.sample_unchecked(x, stream) as usize] += 1;
            }
            counts
                .into_iter()
                .map(|c| c as f64 / samples_per_row as f64)
                .collect()
        })
        .collect();
    Cpt::new_unchecked_sum(m, n, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> EntropyStream {
        EntropyStream::new(2013)
    }

    #[test]
    fn and_gate_truth_table() {
        let g = StochasticGate::and();
        let mut s = stream();
        for _ in 0..100 {
            assert_eq!(g.sample(0b11, &mut s).unwrap(), 1);
            assert_eq!(g.sample(0b01, &mut s).unwrap(), 0);
            assert_eq!(g.sample(0b10, &mut s).unwrap(), 0);
            assert_eq!(g.sample(0b00, &mut s).unwrap(), 0);
        }
    }

    #[test]
    fn input_out_of_range() {
        let g = StochasticGate::and();
        assert!(matches!(
            g.sample(4, &mut stream()),
            Err(Error::InputOutOfRange { input: 4, bits: 2 })
        ));
    }

    #[test]
    fn biased_row_frequency() {
        let g = StochasticGate::table(Cpt::new(0, 1, vec![vec![0.25, 0.75]]).unwrap());
        let mut s = stream();
        let n = 100_000;
        let ones: u64 = (0..n).map(|_| g.sample(0, &mut s).unwrap()).sum();
        let f = ones as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.005, "{f}");
    }

    #[test]
    fn theta_zero_weight() {
        let mut s = stream();
        assert!((0..10_000).all(|_| !theta_sample(8, 0, &mut s).unwrap()));
    }

    #[test]
    fn theta_half_and_max() {
        let mut s = stream();
        let n = 1_000_000;
        let half = (0..n).filter(|_| theta_sample(8, 128, &mut s).unwrap()).count() as f64 / n as f64;
        assert!((half - 0.5).abs() < 0.0015, "{half}");
        let top = (0..n).filter(|_| theta_sample(8, 255, &mut s).unwrap()).count() as f64 / n as f64;
        let p = 255.0 / 256.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((top - p).abs() < 3.0 * sigma, "{top}");
    }

    #[test]
    fn theta_rejects_oversized_weight() {
        assert!(theta_sample(4, 16, &mut stream()).is_err());
        assert!(theta_sample(0, 0, &mut stream()).is_err());
    }

    #[test]
    fn serial_composition_of_boolean_gates() {
        // NOT after AND is NAND
        let g = compose_serial(StochasticGate::and(), StochasticGate::not()).unwrap();
        let cpt = g.declared_cpt().unwrap();
        assert!(cpt.is_deterministic());
        let nand = Cpt::deterministic(2, 1, |x| !((x >> 1) & x) & 1).unwrap();
        assert_eq!(cpt, nand);
    }

    #[test]
    fn compose_with_identity() {
        let c = Cpt::new(1, 1, vec![vec![0.1, 0.9], vec![0.6, 0.4]]).unwrap();
        let g = compose_serial(StochasticGate::table(c.clone()), StochasticGate::identity(1).unwrap())
            .unwrap();
        assert!(g.declared_cpt().unwrap().max_row_tv(&c) < 1e-15);
    }

    #[test]
    fn compose_interface_mismatch() {
        let err = compose_serial(StochasticGate::and(), StochasticGate::and()).unwrap_err();
        assert!(matches!(err, Error::Composition { out_bits: 1, in_bits: 2 }));
    }

    #[test]
    fn binomial_degenerate_cases() {
        let mut s = stream();
        assert!((0..1000).all(|_| binomial_circuit(5, 8, 0, &mut s).unwrap() == 0));
        let g = StochasticGate::binomial(1, 8).unwrap();
        let theta = StochasticGate::theta(8).unwrap();
        assert_eq!(g.declared_cpt().unwrap(), theta.declared_cpt().unwrap());
        let mut a = stream();
        let mut b = stream();
        for k in [0, 1, 77, 128, 255] {
            for _ in 0..100 {
                assert_eq!(g.sample(k, &mut a).unwrap(), theta.sample(k, &mut b).unwrap());
            }
        }
    }

    #[test]
    fn estimate_deterministic_is_exact() {
        let est = estimate_cpt(&StochasticGate::and(), 17, &mut stream()).unwrap();
        assert_eq!(est, StochasticGate::and().declared_cpt().unwrap());
    }

    #[test]
    fn estimate_theta_row() {
        let g = StochasticGate::theta(4).unwrap();
        let est = estimate_cpt(&g, 1_000_000, &mut stream()).unwrap();
        assert!((est.row(4)[1] - 0.25).abs() < 0.002);
    }

    #[test]
    fn json_form() {
        let c = Cpt::from_json(r#"{"m":1,"n":1,"rows":[[0.25,0.75],[1,0]]}"#).unwrap();
        assert_eq!(c.row(0), &[0.25, 0.75]);
        assert_eq!(Cpt::from_json(&c.to_json()).unwrap(), c);
        assert!(Cpt::from_json(r#"{"m":0,"n":1,"rows":[[0.5,0.6]]}"#).is_err());
        assert!(Cpt::from_json(r#"{"m":0,"n":1,"rows":[[1.5,-0.5]]}"#).is_err());
        assert!(Cpt::from_json(r#"{"m":1,"n":1,"rows":[[1,0]]}"#).is_err());
    }

    #[test]
    fn oversized_tables_are_refused() {
        assert!(matches!(
            StochasticGate::theta(20).unwrap().declared_cpt(),
            Err(Error::TableTooLarge { .. })
        ));
        // still samples procedurally
        let mut s = stream();
        StochasticGate::theta(20).unwrap().sample(1 << 19, &mut s).unwrap();
    }
}
