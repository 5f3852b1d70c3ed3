//! Phase-type distributions: representation, moments, scaling and sampling.
//!
//! A [`PhaseType`] is the absorption time of a finite continuous-time Markov
//! chain with initial vector `alpha` over `p` transient phases and
//! sub-generator `T`. It is the only distribution family used for external
//! inter-arrival and service times.
//!
//! The sub-generator is stored sparsely (diagonal plus off-diagonal rows) so
//! that Erlang and Coxian chains of order up to [`MAX_ORDER`] stay cheap; the
//! serialized form is the dense `{alpha, subgen}` JSON object.

mod fit;
mod library;
mod sample;

pub use fit::{fit_three_moments, fit_two_moments, FitError};
pub use library::{generate_library, FamilyWeights, GenConfig};
pub use sample::{draw_variates, PhaseSampler};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported order.
pub const MAX_ORDER: usize = 1000;

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhError {
    #[error("order {0} outside 1..={MAX_ORDER}")]
    Order(usize),
    #[error("alpha has length {alpha} but sub-generator has order {order}")]
    Shape { alpha: usize, order: usize },
    #[error("alpha is not a probability vector (sum {sum}, min {min})")]
    Alpha { sum: f64, min: f64 },
    #[error("sub-generator row {row}: {reason}")]
    Row { row: usize, reason: &'static str },
    #[error("no phase has a positive exit rate")]
    NoExit,
    #[error("(-T) is singular or badly conditioned")]
    Singular,
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// A phase-type distribution `PH(alpha, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PhaseTypeJson", into = "PhaseTypeJson")]
pub struct PhaseType {
    alpha: Vec<f64>,
    /// Diagonal of `T`, strictly negative.
    diag: Vec<f64>,
    /// Off-diagonal entries of `T` per row as `(column, rate)`, rate > 0,
    /// sorted by column.
    offdiag: Vec<Vec<(usize, f64)>>,
}

/// Dense wire form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseTypeJson {
    pub alpha: Vec<f64>,
    pub subgen: Vec<Vec<f64>>,
}

impl TryFrom<PhaseTypeJson> for PhaseType {
    type Error = PhError;
    fn try_from(j: PhaseTypeJson) -> Result<Self, PhError> {
        PhaseType::new(j.alpha, j.subgen)
    }
}

impl From<PhaseType> for PhaseTypeJson {
    fn from(ph: PhaseType) -> Self {
        PhaseTypeJson {
            subgen: ph.subgen(),
            alpha: ph.alpha,
        }
    }
}

impl PhaseType {
    /// Builds a PH from a dense sub-generator.
    pub fn new(alpha: Vec<f64>, subgen: Vec<Vec<f64>>) -> Result<Self, PhError> {
        let p = subgen.len();
        let mut diag = Vec::with_capacity(p);
        let mut offdiag = Vec::with_capacity(p);
        for (i, row) in subgen.iter().enumerate() {
            if row.len() != p {
                return Err(PhError::Row { row: i, reason: "not square" });
            }
            diag.push(row[i]);
            offdiag.push(
                row.iter()
                    .enumerate()
                    .filter(|&(j, &v)| j != i && v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect(),
            );
        }
        Self::from_parts(alpha, diag, offdiag)
    }

    /// Builds a PH from its diagonal and sparse off-diagonal rows.
    pub fn from_parts(
        alpha: Vec<f64>,
        diag: Vec<f64>,
        mut offdiag: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self, PhError> {
        let p = diag.len();
        if p == 0 || p > MAX_ORDER {
            return Err(PhError::Order(p));
        }
        if alpha.len() != p || offdiag.len() != p {
            return Err(PhError::Shape { alpha: alpha.len(), order: p });
        }
        let sum: f64 = alpha.iter().sum();
        let min = alpha.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min >= 0.0) || (sum - 1.0).abs() > PROB_TOL || alpha.iter().any(|a| !a.is_finite()) {
            return Err(PhError::Alpha { sum, min });
        }
        let mut any_exit = false;
        for (i, row) in offdiag.iter_mut().enumerate() {
            let d = diag[i];
            if !(d < 0.0) || !d.is_finite() {
                return Err(PhError::Row { row: i, reason: "diagonal must be negative" });
            }
            row.retain(|&(_, v)| v != 0.0);
            row.sort_by_key(|&(j, _)| j);
            let mut out = 0.0;
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(PhError::Row { row: i, reason: "duplicate column" });
                }
            }
            for &(j, v) in row.iter() {
                if j >= p || j == i {
                    return Err(PhError::Row { row: i, reason: "bad column index" });
                }
                if !(v > 0.0) || !v.is_finite() {
                    return Err(PhError::Row { row: i, reason: "off-diagonal must be nonnegative" });
                }
                out += v;
            }
            let exit = -d - out;
            if exit < -1e-12 * (-d) {
                return Err(PhError::Row { row: i, reason: "positive row sum" });
            }
            if exit > 1e-12 * (-d) {
                any_exit = true;
            }
        }
        if !any_exit {
            return Err(PhError::NoExit);
        }
        let ph = PhaseType { alpha, diag, offdiag };
        let m1 = ph.try_moments(1)?[0];
        if !(m1.is_finite() && m1 > 0.0) {
            return Err(PhError::Singular);
        }
        Ok(ph)
    }

    /// Exponential distribution with the given rate.
    pub fn exponential(rate: f64) -> Result<Self, PhError> {
        Self::from_parts(vec![1.0], vec![-rate], vec![vec![]])
    }

    /// Erlang-`k` with per-phase rate `rate`.
    pub fn erlang(k: usize, rate: f64) -> Result<Self, PhError> {
        Self::coxian(&vec![rate; k], &vec![1.0; k.saturating_sub(1)])
    }

    /// Mixture of exponentials.
    pub fn hyperexponential(probs: &[f64], rates: &[f64]) -> Result<Self, PhError> {
        if probs.len() != rates.len() {
            return Err(PhError::Parameter("probs and rates differ in length".into()));
        }
        Self::from_parts(
            probs.to_vec(),
            rates.iter().map(|r| -r).collect(),
            vec![vec![]; rates.len()],
        )
    }

    /// Coxian chain entered at phase 0. `cont[i]` is the probability of moving
    /// from phase `i` to `i + 1` rather than being absorbed.
    pub fn coxian(rates: &[f64], cont: &[f64]) -> Result<Self, PhError> {
        let k = rates.len();
        if k == 0 || cont.len() + 1 != k {
            return Err(PhError::Parameter("coxian needs k rates and k-1 continuation probabilities".into()));
        }
        let mut alpha = vec![0.0; k];
        alpha[0] = 1.0;
        Self::coxian_with_alpha(alpha, rates, cont)
    }

    pub(crate) fn coxian_with_alpha(alpha: Vec<f64>, rates: &[f64], cont: &[f64]) -> Result<Self, PhError> {
        let k = rates.len();
        let offdiag = (0..k)
            .map(|i| {
                if i + 1 < k && cont[i] > 0.0 {
                    vec![(i + 1, rates[i] * cont[i])]
                } else {
                    vec![]
                }
            })
            .collect();
        Self::from_parts(alpha, rates.iter().map(|r| -r).collect(), offdiag)
    }

    pub fn order(&self) -> usize {
        self.diag.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[Vec<(usize, f64)>] {
        &self.offdiag
    }

    /// Dense copy of the sub-generator.
    pub fn subgen(&self) -> Vec<Vec<f64>> {
        let p = self.order();
        let mut t = vec![vec![0.0; p]; p];
        for i in 0..p {
            t[i][i] = self.diag[i];
            for &(j, v) in &self.offdiag[i] {
                t[i][j] = v;
            }
        }
        t
    }

    /// Exit vector `t = -T 1`.
    pub fn exit_rates(&self) -> Vec<f64> {
        self.diag
            .iter()
            .zip(&self.offdiag)
            .map(|(d, row)| (-d - row.iter().map(|&(_, v)| v).sum::<f64>()).max(0.0))
            .collect()
    }

    /// `i`-th raw moment, `i! alpha (-T)^{-i} 1`.
    pub fn moment(&self, i: usize) -> f64 {
        assert!(i >= 1, "moment order starts at 1");
        self.moments(i)[i - 1]
    }

    /// Raw moments `m_1..=m_k`.
    pub fn moments(&self, k: usize) -> Vec<f64> {
        self.try_moments(k).expect("validated PhaseType has invertible sub-generator")
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    /// Squared coefficient of variation.
    pub fn scv(&self) -> f64 {
        let m = self.moments(2);
        m[1] / (m[0] * m[0]) - 1.0
    }

    /// Natural logs of the first `k` raw moments.
    pub fn log_moments(&self, k: usize) -> Vec<f64> {
        self.moments(k).into_iter().map(f64::ln).collect()
    }

    fn try_moments(&self, k: usize) -> Result<Vec<f64>, PhError> {
        let solver = NegTSolver::new(self)?;
        let mut x = vec![1.0; self.order()];
        let mut out = Vec::with_capacity(k);
        let mut fact = 1.0;
        for i in 1..=k {
            x = solver.solve(self, &x);
            fact *= i as f64;
            let v: f64 = self.alpha.iter().zip(&x).map(|(a, b)| a * b).sum();
            let m = fact * v;
            if !m.is_finite() || m <= 0.0 {
                return Err(PhError::Singular);
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Rescales time so that the mean equals `target_mean`; the SCV is unchanged.
    pub fn scale_to_mean(&self, target_mean: f64) -> Result<Self, PhError> {
        if !(target_mean > 0.0 && target_mean.is_finite()) {
            return Err(PhError::Parameter(format!("target mean {target_mean} must be positive")));
        }
        let f = self.mean() / target_mean;
        Ok(PhaseType {
            alpha: self.alpha.clone(),
            diag: self.diag.iter().map(|d| d * f).collect(),
            offdiag: self
                .offdiag
                .iter()
                .map(|row| row.iter().map(|&(j, v)| (j, v * f)).collect())
                .collect(),
        })
    }

    fn is_upper_triangular(&self) -> bool {
        self.offdiag.iter().enumerate().all(|(i, row)| row.iter().all(|&(j, _)| j > i))
    }

    fn is_lower_triangular(&self) -> bool {
        self.offdiag.iter().enumerate().all(|(i, row)| row.iter().all(|&(j, _)| j < i))
    }
}

/// Solves `(-T) x = b`. Triangular sub-generators (Erlang, Coxian,
/// hyperexponential) use substitution over the sparse rows; everything else
/// goes through a dense LU factorization computed once.
enum NegTSolver {
    Upper,
    Lower,
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl NegTSolver {
    fn new(ph: &PhaseType) -> Result<Self, PhError> {
        if ph.is_upper_triangular() {
            return Ok(NegTSolver::Upper);
        }
        if ph.is_lower_triangular() {
            return Ok(NegTSolver::Lower);
        }
        let p = ph.order();
        let mut m = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            m[(i, i)] = -ph.diag[i];
            for &(j, v) in &ph.offdiag[i] {
                m[(i, j)] = -v;
            }
        }
        let lu = m.lu();
        let u = lu.u();
        let scale = ph.diag.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        if u.diagonal().iter().any(|v| v.abs() <= 1e-13 * scale) {
            return Err(PhError::Singular);
        }
        Ok(NegTSolver::Dense(lu))
    }

    fn solve(&self, ph: &PhaseType, b: &[f64]) -> Vec<f64> {
        let p = ph.order();
        match self {
            NegTSolver::Upper => {
                let mut x = vec![0.0; p];
                for i in (0..p).rev() {
                    let s: f64 = ph.offdiag[i].iter().map(|&(j, v)| v * x[j]).sum();
                    x[i] = (b[i] + s) / -ph.diag[i];
                }
                x
            }
            NegTSolver::Lower => {
                let mut x = vec![0.0; p];
                for i in 0..p {
                    let s: f64 = ph.offdiag[i].iter().map(|&(j, v)| v * x[j]).sum();
                    x[i] = (b[i] + s) / -ph.diag[i];
                }
                x
            }
            NegTSolver::Dense(lu) => {
                let rhs = DVector::from_column_slice(b);
                lu.solve(&rhs).map(|v| v.iter().cloned().collect()).unwrap_or_else(|| vec![f64::NAN; p])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_moments_are_factorials() {
        let ph = PhaseType::exponential(1.0).unwrap();
        let m = ph.moments(5);
        for (got, want) in m.iter().zip([1.0, 2.0, 6.0, 24.0, 120.0]) {
            assert_relative_eq!(*got, want, max_relative = 1e-14);
        }
    }

    #[test]
    fn erlang_two_rate_two() {
        let ph = PhaseType::erlang(2, 2.0).unwrap();
        assert_relative_eq!(ph.mean(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(ph.scv(), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn erlang_scv_is_one_over_k() {
        for k in [1usize, 2, 4, 10, 100, 1000] {
            let ph = PhaseType::erlang(k, k as f64).unwrap();
            assert_relative_eq!(ph.mean(), 1.0, max_relative = 1e-12);
            assert_relative_eq!(ph.scv(), 1.0 / k as f64, max_relative = 1e-9);
        }
    }

    #[test]
    fn balanced_h2_second_moment() {
        // Frozen from the independent balanced-means parameterization:
        // p1 = (1 + sqrt((c-1)/(c+1)))/2, rate_i = 2 p_i / mean.
        let c: f64 = 4.0;
        let p1 = 0.5 * (1.0 + ((c - 1.0) / (c + 1.0)).sqrt());
        let p2 = 1.0 - p1;
        let ph = PhaseType::hyperexponential(&[p1, p2], &[2.0 * p1, 2.0 * p2]).unwrap();
        assert_relative_eq!(ph.moment(1), 1.0, max_relative = 1e-12);
        assert_relative_eq!(ph.moment(2), 5.0, max_relative = 1e-12);
        // direct mixture formula 2 * sum p_i / rate_i^2
        let direct = 2.0 * (p1 / (2.0 * p1).powi(2) + p2 / (2.0 * p2).powi(2));
        assert_relative_eq!(direct, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn dense_and_sparse_paths_agree() {
        // A cyclic 3-phase PH forces the dense LU path; its moments are
        // compared against an explicit inverse computed by nalgebra.
        let t = vec![
            vec![-3.0, 1.0, 0.5],
            vec![0.5, -2.0, 1.0],
            vec![1.0, 0.2, -4.0],
        ];
        let alpha = vec![0.2, 0.5, 0.3];
        let ph = PhaseType::new(alpha.clone(), t.clone()).unwrap();
        let m = DMatrix::from_fn(3, 3, |i, j| -t[i][j]);
        let inv = m.try_inverse().unwrap();
        let a = DVector::from_vec(alpha);
        let mut x = DVector::from_element(3, 1.0);
        let mut fact = 1.0;
        for i in 1..=5 {
            x = &inv * x;
            fact *= i as f64;
            let want = fact * a.dot(&x);
            assert_relative_eq!(ph.moment(i), want, max_relative = 1e-12);
        }
    }

    #[test]
    fn scaling_preserves_scv() {
        let ph = PhaseType::erlang(4, 2.0).unwrap();
        assert_relative_eq!(ph.mean(), 2.0, max_relative = 1e-14);
        let s = ph.scale_to_mean(0.5).unwrap();
        assert_relative_eq!(s.mean(), 0.5, max_relative = 1e-14);
        assert_relative_eq!(s.scv(), 0.25, max_relative = 1e-12);
        assert_relative_eq!(-s.diag()[0], 8.0, max_relative = 1e-14);

        let e = PhaseType::exponential(2.0).unwrap().scale_to_mean(1.0).unwrap();
        assert_eq!(e, PhaseType::exponential(1.0).unwrap());
    }

    #[test]
    fn scaling_to_own_mean_is_identity() {
        let ph = PhaseType::hyperexponential(&[0.3, 0.7], &[0.5, 4.0]).unwrap();
        let s = ph.scale_to_mean(ph.mean()).unwrap();
        for (a, b) in ph.moments(5).iter().zip(s.moments(5)) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_representations() {
        assert!(matches!(PhaseType::new(vec![0.5, 0.4], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]), Err(PhError::Alpha { .. })));
        assert!(matches!(PhaseType::new(vec![1.0], vec![vec![1.0]]), Err(PhError::Row { .. })));
        assert!(matches!(PhaseType::new(vec![1.0, 0.0], vec![vec![-1.0, 2.0], vec![0.0, -1.0]]), Err(PhError::Row { .. })));
        // closed two-phase cycle with no exit
        assert!(matches!(PhaseType::new(vec![1.0, 0.0], vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), Err(PhError::NoExit)));
        assert!(PhaseType::erlang(MAX_ORDER + 1, 1.0).is_err());
        assert!(PhaseType::exponential(1.0).unwrap().scale_to_mean(0.0).is_err());
    }

    #[test]
    fn json_round_trip_is_dense() {
        let ph = PhaseType::coxian(&[1.0, 2.0, 3.0], &[0.5, 0.25]).unwrap();
        let s = serde_json::to_string(&ph).unwrap();
        assert!(s.contains("\"subgen\":[[-1.0,0.5,0.0]"));
        let back: PhaseType = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ph);
        let bad = r#"{"alpha":[1.0],"subgen":[[0.5]]}"#;
        assert!(serde_json::from_str::<PhaseType>(bad).is_err());
    }
}
