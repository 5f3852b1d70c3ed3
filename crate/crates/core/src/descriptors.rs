//! Learning targets and inputs derived from raw simulation output.
//!
//! Departure streams are summarized by log raw moments and polynomial
//! lag-autocorrelations; occupancy histograms become truncated PMFs with a
//! lumped tail. The IDC estimator is a diagnostic only.
//!
//! Descriptor vector layout is fixed: `n` log-moments first, then
//! `rho(k, a1, a2)` for `k = 1..=n1`, `a1 = 1..=n2`, `a2 = 1..=n2` in
//! lexicographic order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("series is empty")]
    Empty,
    #[error("series entry {index} is not positive ({value})")]
    NonPositive { index: usize, value: f64 },
    #[error("series of length {len} too short, need more than {need}")]
    TooShort { len: usize, need: usize },
    #[error("powered series x^{power} has (near-)zero variance")]
    ZeroVariance { power: u32 },
    #[error("invalid descriptor dims: {0}")]
    Dims(String),
    #[error("occupancy histogram is empty or has no positive weight")]
    EmptyHistogram,
    #[error("IDC grid point {t} exceeds horizon/10 = {max}")]
    Horizon { t: f64, max: f64 },
    #[error("need at least {need} events, got {got}")]
    TooFewEvents { need: usize, got: usize },
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn compensated_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut s = CompensatedSum::default();
    let mut n = 0usize;
    for x in xs {
        s.add(x);
        n += 1;
    }
    s.value() / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorDims {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
}

impl Default for DescriptorDims {
    fn default() -> Self {
        DescriptorDims { n: 5, n1: 2, n2: 2 }
    }
}

impl DescriptorDims {
    pub fn new(n: usize, n1: usize, n2: usize) -> Result<Self, DescriptorError> {
        let d = DescriptorDims { n, n1, n2 };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.n < 2 {
            return Err(DescriptorError::Dims(format!("n = {} must be at least 2", self.n)));
        }
        Ok(())
    }

    pub fn autocorr_len(&self) -> usize {
        self.n1 * self.n2 * self.n2
    }

    /// `n + n1 * n2^2`.
    pub fn len(&self) -> usize {
        self.n + self.autocorr_len()
    }

    /// `(k, a1, a2)` triples in vector order.
    pub fn autocorr_keys(&self) -> Vec<(usize, usize, usize)> {
        let mut keys = Vec::with_capacity(self.autocorr_len());
        for k in 1..=self.n1 {
            for a1 in 1..=self.n2 {
                for a2 in 1..=self.n2 {
                    keys.push((k, a1, a2));
                }
            }
        }
        keys
    }

    /// Whether every coordinate of `self` also exists in `other`.
    pub fn is_within(&self, other: &DescriptorDims) -> bool {
        self.n <= other.n && self.n1 <= other.n1 && self.n2 <= other.n2
    }

    /// Parses `"5,2,2"`.
    pub fn parse(s: &str) -> Result<Self, DescriptorError> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| DescriptorError::Dims(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            [n, n1, n2] => DescriptorDims::new(*n, *n1, *n2),
            _ => Err(DescriptorError::Dims(format!("{s:?}: expected n,n1,n2"))),
        }
    }
}

impl std::fmt::Display for DescriptorDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.n, self.n1, self.n2)
    }
}

/// Log-moments plus polynomial lag-autocorrelations of an inter-departure
/// stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepartureDescriptor {
    pub dims: DescriptorDims,
    pub log_moments: Vec<f64>,
    /// Values in [`DescriptorDims::autocorr_keys`] order.
    pub autocorr: Vec<f64>,
}

impl DepartureDescriptor {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.log_moments.clone();
        v.extend_from_slice(&self.autocorr);
        v
    }

    pub fn from_vector(dims: DescriptorDims, v: &[f64]) -> Result<Self, DescriptorError> {
        if v.len() != dims.len() {
            return Err(DescriptorError::Dims(format!("vector length {} != {}", v.len(), dims.len())));
        }
        Ok(DepartureDescriptor { dims, log_moments: v[..dims.n].to_vec(), autocorr: v[dims.n..].to_vec() })
    }

    pub fn autocorr_at(&self, k: usize, a1: usize, a2: usize) -> Option<f64> {
        if k == 0 || a1 == 0 || a2 == 0 || k > self.dims.n1 || a1 > self.dims.n2 || a2 > self.dims.n2 {
            return None;
        }
        let n2 = self.dims.n2;
        Some(self.autocorr[(k - 1) * n2 * n2 + (a1 - 1) * n2 + (a2 - 1)])
    }

    /// Restricts to smaller dims; every coordinate of `dims` must exist here.
    pub fn project(&self, dims: DescriptorDims) -> Result<Self, DescriptorError> {
        if !dims.is_within(&self.dims) {
            return Err(DescriptorError::Dims(format!("cannot project {} onto {}", self.dims, dims)));
        }
        let autocorr = dims
            .autocorr_keys()
            .into_iter()
            .map(|(k, a1, a2)| self.autocorr_at(k, a1, a2).expect("within dims"))
            .collect();
        Ok(DepartureDescriptor { dims, log_moments: self.log_moments[..dims.n].to_vec(), autocorr })
    }
}

fn check_positive(series: &[f64]) -> Result<(), DescriptorError> {
    if series.is_empty() {
        return Err(DescriptorError::Empty);
    }
    if let Some((index, &value)) = series.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(DescriptorError::NonPositive { index, value });
    }
    Ok(())
}

/// `ln((1/len) sum x^i)` for `i = 1..=n`.
pub fn estimate_moments(series: &[f64], n: usize) -> Result<Vec<f64>, DescriptorError> {
    check_positive(series)?;
    let mut sums = vec![CompensatedSum::default(); n];
    for &x in series {
        let mut p = 1.0;
        for s in sums.iter_mut() {
            p *= x;
            s.add(p);
        }
    }
    Ok(sums.iter().map(|s| (s.value() / series.len() as f64).ln()).collect())
}

/// Centered powers of one series, shared across all autocorrelation
/// coordinates.
pub struct AutocorrEstimator {
    centered: Vec<Vec<f64>>,
    variance: Vec<f64>,
}

impl AutocorrEstimator {
    pub fn new(series: &[f64], max_power: usize) -> Result<Self, DescriptorError> {
        check_positive(series)?;
        let mut centered = Vec::with_capacity(max_power);
        let mut variance = Vec::with_capacity(max_power);
        for a in 1..=max_power {
            let powered: Vec<f64> = series.iter().map(|x| x.powi(a as i32)).collect();
            let mean = compensated_mean(powered.iter().copied());
            let dev: Vec<f64> = powered.iter().map(|x| x - mean).collect();
            let var = compensated_mean(dev.iter().map(|d| d * d));
            let scale = mean * mean;
            if !(var > 1e-12 * scale) || !var.is_finite() {
                return Err(DescriptorError::ZeroVariance { power: a as u32 });
            }
            centered.push(dev);
            variance.push(var);
        }
        Ok(AutocorrEstimator { centered, variance })
    }

    /// Biased (1/N) sample autocorrelation between `x_q^{a1}` and
    /// `x_{q-k}^{a2}`.
    pub fn rho(&self, k: usize, a1: usize, a2: usize) -> Result<f64, DescriptorError> {
        let len = self.centered.first().map_or(0, Vec::len);
        if len <= k + 10 {
            return Err(DescriptorError::TooShort { len, need: k + 10 });
        }
        if a1 == 0 || a2 == 0 || a1 > self.centered.len() || a2 > self.centered.len() {
            return Err(DescriptorError::Dims(format!("powers ({a1}, {a2}) not precomputed")));
        }
        let x = &self.centered[a1 - 1];
        let y = &self.centered[a2 - 1];
        let mut s = CompensatedSum::default();
        for q in k..len {
            s.add(x[q] * y[q - k]);
        }
        let cov = s.value() / len as f64;
        let r = cov / (self.variance[a1 - 1] * self.variance[a2 - 1]).sqrt();
        Ok(r.clamp(-1.0, 1.0))
    }
}

/// Sample `rho(a1, a2, k)` of a positive series.
pub fn estimate_autocorr(series: &[f64], k: usize, a1: usize, a2: usize) -> Result<f64, DescriptorError> {
    if series.len() <= k + 10 {
        return Err(DescriptorError::TooShort { len: series.len(), need: k + 10 });
    }
    AutocorrEstimator::new(series, a1.max(a2))?.rho(k, a1, a2)
}

pub fn build_descriptor(series: &[f64], dims: DescriptorDims) -> Result<DepartureDescriptor, DescriptorError> {
    dims.validate()?;
    let log_moments = estimate_moments(series, dims.n)?;
    let autocorr = if dims.autocorr_len() == 0 {
        Vec::new()
    } else {
        let est = AutocorrEstimator::new(series, dims.n2)?;
        dims.autocorr_keys()
            .into_iter()
            .map(|(k, a1, a2)| est.rho(k, a1, a2))
            .collect::<Result<_, _>>()?
    };
    Ok(DepartureDescriptor { dims, log_moments, autocorr })
}

/// Truncated steady-state occupancy distribution. The last entry holds
/// `P(count >= L - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePmf {
    pub probs: Vec<f64>,
    pub delta: f64,
    /// Probability mass beyond index `L - 1` before lumping.
    pub tail_mass: f64,
    /// Set when `tail_mass > delta`.
    pub tail_flag: bool,
}

impl QueuePmf {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn build_pmf(pmf_counts: &[f64], len: usize, delta: f64) -> Result<QueuePmf, DescriptorError> {
    if len == 0 {
        return Err(DescriptorError::Dims("PMF length must be positive".into()));
    }
    if pmf_counts.iter().any(|c| !(*c >= 0.0)) {
        return Err(DescriptorError::EmptyHistogram);
    }
    let mut total = CompensatedSum::default();
    pmf_counts.iter().for_each(|&c| total.add(c));
    let total = total.value();
    if !(total > 0.0) {
        return Err(DescriptorError::EmptyHistogram);
    }
    let mut probs = vec![0.0; len];
    let mut lumped = CompensatedSum::default();
    let mut beyond = CompensatedSum::default();
    for (l, &c) in pmf_counts.iter().enumerate() {
        let p = c / total;
        if l + 1 < len {
            probs[l] = p;
        } else {
            lumped.add(p);
            if l >= len {
                beyond.add(p);
            }
        }
    }
    probs[len - 1] = lumped.value();
    // absorb rounding so the vector sums to one
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    let tail_mass = beyond.value();
    Ok(QueuePmf { probs, delta, tail_mass, tail_flag: tail_mass > delta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdcCurve {
    pub t_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub rate: f64,
}

/// Minimum number of events for [`estimate_idc`].
pub const IDC_MIN_EVENTS: usize = 10_000;

/// Index of dispersion for counts, `Var(A(t)) / (lambda t)`, from counts in
/// non-overlapping windows of length `t`.
pub fn estimate_idc(event_times: &[f64], t_grid: &[f64]) -> Result<IdcCurve, DescriptorError> {
    if event_times.len() < IDC_MIN_EVENTS {
        return Err(DescriptorError::TooFewEvents { need: IDC_MIN_EVENTS, got: event_times.len() });
    }
    let start = event_times[0];
    let horizon = event_times[event_times.len() - 1] - start;
    let rate = event_times.len() as f64 / horizon;
    let mut values = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(t > 0.0) || t > horizon / 10.0 {
            return Err(DescriptorError::Horizon { t, max: horizon / 10.0 });
        }
        let windows = (horizon / t).floor() as usize;
        let mut counts = vec![0u64; windows];
        for &e in event_times {
            let w = ((e - start) / t) as usize;
            if w < windows {
                counts[w] += 1;
            }
        }
        let mean = counts.iter().sum::<u64>() as f64 / windows as f64;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (windows as f64 - 1.0);
        values.push(var / (rate * t));
    }
    Ok(IdcCurve { t_grid: t_grid.to_vec(), values, rate })
}
