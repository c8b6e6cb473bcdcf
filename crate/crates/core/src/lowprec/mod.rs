//! Fixed-point energies and the DISCRETE-SAMPLE gate.
//!
//! An energy is an unnormalized negative log2 probability. It is stored as an
//! unsigned word of `total_bits` bits, `frac_bits` of which are fractional:
//! `energy = raw / 2^frac_bits`. The all-ones word is the saturation code and
//! means "impossible": such entries get probability exactly zero.
//!
//! The gate renormalizes by subtracting the smallest raw energy `r_min` and
//! turns each remaining distance `d = raw - r_min` into an integer weight
//!
//! ```text
//! d = q * 2^f + r          (0 <= r < 2^f)
//! w = MULT[r] >> q         MULT[r] = round(2^32 * 2^(-r / 2^f))
//! ```
//!
//! so the declared output distribution is `w_i / Σ w` exactly. Sampling draws
//! an integer uniformly on `[0, Σ w)` by rejection and inverts the cumulative
//! weights.

mod sweep;

pub use sweep::{precision_sweep, write_sweep_csv, SweepConfig, SweepRow, SWEEP_CSV_HEADER};

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyStream;
use crate::error::{Error, Result};

/// Bits of the sub-unit multiplier table.
pub const MULTIPLIER_BITS: u32 = 32;
const MAX_FRAC_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnergyFormat {
    total_bits: u32,
    frac_bits: u32,
}

impl EnergyFormat {
    pub const DEFAULT: EnergyFormat = EnergyFormat {
        total_bits: 8,
        frac_bits: 4,
    };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        if total_bits == 0 || total_bits > 32 || frac_bits > total_bits || frac_bits > MAX_FRAC_BITS
        {
            return Err(Error::InvalidFormat {
                total_bits,
                frac_bits,
            });
        }
        Ok(Self {
            total_bits,
            frac_bits,
        })
    }

    /// `(b, b / 2)`, the convention used when only a total width is given.
    pub fn with_total_bits(total_bits: u32) -> Result<Self> {
        Self::new(total_bits, total_bits / 2)
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// The saturation code.
    pub fn max_raw(&self) -> u32 {
        if self.total_bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.total_bits) - 1
        }
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Largest representable energy (log2 units).
    pub fn max_energy(&self) -> f64 {
        self.max_raw() as f64 / self.scale()
    }

    /// Quantize a log2 energy, rounding to nearest and saturating. Infinite
    /// or out-of-range energies become the saturation code.
    pub fn quantize(&self, energy: f64) -> u32 {
        debug_assert!(!energy.is_nan());
        if energy <= 0.0 {
            return 0;
        }
        let scaled = (energy * self.scale()).round();
        if scaled >= self.max_raw() as f64 {
            self.max_raw()
        } else {
            scaled as u32
        }
    }
}

impl Default for EnergyFormat {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for EnergyFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.total_bits, self.frac_bits)
    }
}

impl FromStr for EnergyFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        let bad = || Error::Config(format!("cannot parse energy format `{s}`; expected `b,f`"));
        match s.split_once(',') {
            Some((b, f)) => {
                let b = b.trim().parse().map_err(|_| bad())?;
                let f = f.trim().parse().map_err(|_| bad())?;
                EnergyFormat::new(b, f)
            }
            None => EnergyFormat::with_total_bits(s.parse().map_err(|_| bad())?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnergyWord {
    raw: u32,
    format: EnergyFormat,
}

impl EnergyWord {
    pub fn new(raw: u32, format: EnergyFormat) -> Self {
        Self {
            raw: raw.min(format.max_raw()),
            format,
        }
    }

    pub fn raw(&self) -> u32 {
        self.raw
    }

    pub fn format(&self) -> EnergyFormat {
        self.format
    }

    pub fn energy(&self) -> f64 {
        if self.is_saturated() {
            f64::INFINITY
        } else {
            self.raw as f64 / self.format.scale()
        }
    }

    pub fn is_saturated(&self) -> bool {
        self.raw == self.format.max_raw()
    }
}

/// `raw = round(-log2(p) * 2^f)`, saturating.
pub fn encode_energy(p: f64, format: EnergyFormat) -> Result<EnergyWord> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::ProbabilityDomain(p));
    }
    Ok(EnergyWord {
        raw: format.quantize(-p.log2()),
        format,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnergyVector {
    format: EnergyFormat,
    raw: Vec<u32>,
}

impl EnergyVector {
    pub fn from_raw(raw: Vec<u32>, format: EnergyFormat) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("energy vector needs at least one outcome".into()));
        }
        let max = format.max_raw();
        Ok(Self {
            raw: raw.into_iter().map(|r| r.min(max)).collect(),
            format,
        })
    }

    pub fn from_words(words: &[EnergyWord]) -> Result<Self> {
        let format = words
            .first()
            .ok_or_else(|| Error::Config("energy vector needs at least one outcome".into()))?
            .format;
        if words.iter().any(|w| w.format != format) {
            return Err(Error::Config("energy words use different formats".into()));
        }
        Self::from_raw(words.iter().map(|w| w.raw).collect(), format)
    }

    /// Quantize log2 energies; `f64::INFINITY` marks impossible outcomes.
    pub fn from_energies(energies: &[f64], format: EnergyFormat) -> Result<Self> {
        Self::from_raw(energies.iter().map(|&e| format.quantize(e)).collect(), format)
    }

    /// Encode a (not necessarily normalized) probability vector. Zero entries
    /// saturate.
    pub fn from_probabilities(probs: &[f64], format: EnergyFormat) -> Result<Self> {
        let raw = probs
            .iter()
            .map(|&p| {
                if p == 0.0 {
                    Ok(format.max_raw())
                } else {
                    encode_energy(p, format).map(|w| w.raw)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(raw, format)
    }

    pub fn format(&self) -> EnergyFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &[u32] {
        &self.raw
    }

    pub fn word(&self, i: usize) -> EnergyWord {
        EnergyWord {
            raw: self.raw[i],
            format: self.format,
        }
    }

    /// Log2 energies, with saturated entries as `f64::INFINITY`.
    pub fn energies(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.word(i).energy()).collect()
    }

    /// Gate weights after renormalization; `None` when every entry is saturated.
    pub fn integer_weights(&self) -> Option<Vec<u64>> {
        let sat = self.format.max_raw();
        let min = self.raw.iter().copied().filter(|&r| r != sat).min()?;
        let table = multiplier_table(self.format.frac_bits);
        let f = self.format.frac_bits;
        Some(
            self.raw
                .iter()
                .map(|&r| {
                    if r == sat {
                        0
                    } else {
                        let d = r - min;
                        let q = d >> f;
                        let rem = d & ((1 << f) - 1);
                        if q >= 64 {
                            0
                        } else {
                            table[rem as usize] >> q
                        }
                    }
                })
                .collect(),
        )
    }

    /// The exact distribution the gate samples from.
    pub fn declared_distribution(&self) -> Result<Vec<f64>> {
        let w = self.integer_weights().ok_or(Error::NoSupport)?;
        let total: u64 = w.iter().sum();
        Ok(w.iter().map(|&x| x as f64 / total as f64).collect())
    }
}

/// `round(2^32 * 2^(-r / 2^f))` for `r` in `0..2^f`, built once per `f`.
pub fn multiplier_table(frac_bits: u32) -> &'static [u64] {
    static TABLES: [OnceLock<Vec<u64>>; (MAX_FRAC_BITS + 1) as usize] =
        [const { OnceLock::new() }; (MAX_FRAC_BITS + 1) as usize];
    TABLES[frac_bits as usize].get_or_init(|| {
        let steps = 1u64 << frac_bits;
        let one = (1u64 << MULTIPLIER_BITS) as f64;
        (0..steps)
            .map(|r| (one * (-(r as f64) / steps as f64).exp2()).round() as u64)
            .collect()
    })
}

/// Integer weight of an energy distance of `d` raw units (see module docs).
pub fn weight_of_distance(d: u64, frac_bits: u32) -> u64 {
    let q = d >> frac_bits;
    if q >= 64 {
        return 0;
    }
    multiplier_table(frac_bits)[(d & ((1 << frac_bits) - 1)) as usize] >> q
}

/// Index in `[0, weights.len())` with probability `w_i / Σ w`.
pub(crate) fn sample_integer_weights(weights: &[u64], stream: &mut EntropyStream) -> usize {
    let total: u64 = weights.iter().sum();
    debug_assert!(total > 0);
    let u = stream.below(total);
    let mut acc = 0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    unreachable!("cumulative weight covers the draw")
}

/// DISCRETE-SAMPLE: draw an outcome index from the energies.
pub fn discrete_sample(energies: &EnergyVector, stream: &mut EntropyStream) -> Result<usize> {
    let weights = energies.integer_weights().ok_or(Error::NoSupport)?;
    Ok(sample_integer_weights(&weights, stream))
}

/// `Σ p_i log2(p_i / q_i)` in bits.
pub fn relative_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergentKl { index: i });
        }
        kl += pi * (pi / qi).log2();
    }
    Ok(kl)
}

/// Arithmetic used by a sampling circuit: fixed point words or reference f64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Fixed(EnergyFormat),
    Exact,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Fixed(EnergyFormat::DEFAULT)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Fixed(fmt_) => write!(f, "{fmt_}"),
            Precision::Exact => f.write_str("exact"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("exact") {
            Ok(Precision::Exact)
        } else {
            s.parse().map(Precision::Fixed)
        }
    }
}

/// A conditional distribution over `K` outcomes in gate-ready form.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditional {
    Fixed(EnergyVector),
    /// Log2 energies relative to the minimum; `INFINITY` for impossible.
    Exact(Vec<f64>),
}

impl Conditional {
    /// Build from high-precision log2 energies. The temperature divides the
    /// renormalized energies before quantization.
    pub fn from_energies(energies: &[f64], precision: Precision, temperature: f64) -> Result<Self> {
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return Err(Error::NoSupport);
        }
        let rel = energies.iter().map(|&e| (e - min) / temperature);
        match precision {
            Precision::Fixed(format) => {
                let raw = rel.map(|e| format.quantize(e)).collect();
                Ok(Conditional::Fixed(EnergyVector::from_raw(raw, format)?))
            }
            Precision::Exact => Ok(Conditional::Exact(rel.collect())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Conditional::Fixed(v) => v.len(),
            Conditional::Exact(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, stream: &mut EntropyStream) -> Result<usize> {
        match self {
            Conditional::Fixed(v) => discrete_sample(v, stream),
            Conditional::Exact(e) => {
                let w: Vec<f64> = e.iter().map(|&x| (-x).exp2()).collect();
                let total: f64 = w.iter().sum();
                if total.is_nan() || total <= 0.0 {
                    return Err(Error::NoSupport);
                }
                let u = stream.uniform() * total;
                let mut acc = 0.0;
                let mut last = 0;
                for (i, &wi) in w.iter().enumerate() {
                    if wi > 0.0 {
                        acc += wi;
                        last = i;
                        if u < acc {
                            return Ok(i);
                        }
                    }
                }
                Ok(last)
            }
        }
    }

    pub fn distribution(&self) -> Result<Vec<f64>> {
        match self {
            Conditional::Fixed(v) => v.declared_distribution(),
            Conditional::Exact(e) => {
                let w: Vec<f64> = e.iter().map(|&x| (-x).exp2()).collect();
                let total: f64 = w.iter().sum();
                if total.is_nan() || total <= 0.0 {
                    return Err(Error::NoSupport);
                }
                Ok(w.into_iter().map(|x| x / total).collect())
            }
        }
    }

    /// Log2 energies as seen by the gate (`INFINITY` when saturated).
    pub fn energies(&self) -> Vec<f64> {
        match self {
            Conditional::Fixed(v) => v.energies(),
            Conditional::Exact(e) => e.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::total_variation;

    fn fmt84() -> EnergyFormat {
        EnergyFormat::DEFAULT
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_energy(1.0, fmt84()).unwrap().raw(), 0);
        assert_eq!(encode_energy(0.5, fmt84()).unwrap().raw(), 16);
        assert_eq!(encode_energy(0.1, fmt84()).unwrap().raw(), 53);
        assert!(encode_energy(1e-9, fmt84()).unwrap().is_saturated());
        assert!(matches!(encode_energy(0.0, fmt84()), Err(Error::ProbabilityDomain(_))));
        assert!(encode_energy(-0.5, fmt84()).is_err());
        assert!(encode_energy(1.5, fmt84()).is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("8,4".parse::<EnergyFormat>().unwrap(), fmt84());
        assert_eq!("(8, 4)".parse::<EnergyFormat>().unwrap(), fmt84());
        assert_eq!("6".parse::<EnergyFormat>().unwrap(), EnergyFormat::new(6, 3).unwrap());
        assert!("4,5".parse::<EnergyFormat>().is_err());
        assert!("33,4".parse::<EnergyFormat>().is_err());
        assert_eq!("exact".parse::<Precision>().unwrap(), Precision::Exact);
    }

    #[test]
    fn multiplier_table_endpoints() {
        let t = multiplier_table(4);
        assert_eq!(t.len(), 16);
        assert_eq!(t[0], 1 << 32);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(weight_of_distance(16, 4), 1 << 31);
    }

    #[test]
    fn uniform_energies_sample_uniformly() {
        let v = EnergyVector::from_raw(vec![37; 10], fmt84()).unwrap();
        let declared = v.declared_distribution().unwrap();
        assert!(declared.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        let mut s = EntropyStream::new(1);
        let n = 1_000_000;
        let mut counts = [0u64; 10];
        for _ in 0..n {
            counts[discrete_sample(&v, &mut s).unwrap()] += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!(total_variation(&emp, &declared) < 0.01);
    }

    #[test]
    fn saturated_entry_never_drawn() {
        let v = EnergyVector::from_raw(vec![0, 255], fmt84()).unwrap();
        assert_eq!(v.declared_distribution().unwrap(), vec![1.0, 0.0]);
        let mut s = EntropyStream::new(2);
        assert!((0..10_000).all(|_| discrete_sample(&v, &mut s).unwrap() == 0));
    }

    #[test]
    fn all_saturated_is_no_support() {
        let v = EnergyVector::from_raw(vec![255, 255, 300], fmt84()).unwrap();
        assert!(matches!(discrete_sample(&v, &mut EntropyStream::new(0)), Err(Error::NoSupport)));
    }

    #[test]
    fn one_bit_apart_is_two_to_one() {
        let v = EnergyVector::from_energies(&[0.0, 1.0], fmt84()).unwrap();
        let d = v.declared_distribution().unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relative_entropy_examples() {
        assert_eq!(relative_entropy(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((relative_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            relative_entropy(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::DivergentKl { index: 1 })
        ));
        assert!(relative_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn relative_entropy_matches_long_double_style_summation() {
        // Kahan-compensated oracle on a fixed random pair.
        let mut s = EntropyStream::new(77);
        let mut p: Vec<f64> = (0..10).map(|_| s.uniform() + 0.01).collect();
        let mut q: Vec<f64> = (0..10).map(|_| s.uniform() + 0.01).collect();
        let (zp, zq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= zp);
        q.iter_mut().for_each(|x| *x /= zq);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 0..10 {
            let term = p[i] * (p[i].ln() - q[i].ln()) / std::f64::consts::LN_2;
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((relative_entropy(&p, &q).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn conditional_exact_and_fixed_agree_on_representable_energies() {
        let e = [0.0, 1.0, 2.5, f64::INFINITY];
        let fixed = Conditional::from_energies(&e, Precision::default(), 1.0).unwrap();
        let exact = Conditional::from_energies(&e, Precision::Exact, 1.0).unwrap();
        let a = fixed.distribution().unwrap();
        let b = exact.distribution().unwrap();
        assert!(total_variation(&a, &b) < 1e-9);
        assert_eq!(a[3], 0.0);
    }

    #[test]
    fn conditional_temperature_sharpens() {
        let e = [0.0, 1.0];
        let hot = Conditional::from_energies(&e, Precision::Exact, 2.0).unwrap();
        let cold = Conditional::from_energies(&e, Precision::Exact, 0.5).unwrap();
        assert!(cold.distribution().unwrap()[0] > hot.distribution().unwrap()[0]);
        assert!(Conditional::from_energies(&[f64::INFINITY; 2], Precision::Exact, 1.0).is_err());
    }
}
