//! Closed-form moment fits used by the library generator and by benchmark
//! layouts that name distributions by their moments.

use thiserror::Error;

use super::{PhError, PhaseType, MAX_ORDER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("moments ({0}, {1}, {2}) cannot be matched by an Erlang mixture of order <= {MAX_ORDER}")]
    Infeasible(f64, f64, f64),
    #[error(transparent)]
    Ph(#[from] PhError),
}

/// Two-moment fit: mixed Erlang(k-1, k) for `scv < 1`, exponential at 1, and
/// balanced-means H2 above 1.
pub fn fit_two_moments(mean: f64, scv: f64) -> Result<PhaseType, FitError> {
    if !(mean > 0.0) || !(scv > 0.0) {
        return Err(PhError::Parameter(format!("mean {mean} and scv {scv} must be positive")).into());
    }
    if (scv - 1.0).abs() < 1e-12 {
        return Ok(PhaseType::exponential(1.0 / mean)?);
    }
    if scv > 1.0 {
        let p1 = 0.5 * (1.0 + ((scv - 1.0) / (scv + 1.0)).sqrt());
        let p2 = 1.0 - p1;
        return Ok(PhaseType::hyperexponential(&[p1, p2], &[2.0 * p1 / mean, 2.0 * p2 / mean])?);
    }
    let k = ((1.0 / scv) - 1e-9).ceil().max(1.0) as usize;
    if k > MAX_ORDER {
        return Err(FitError::Infeasible(mean, (scv + 1.0) * mean * mean, f64::NAN));
    }
    let kf = k as f64;
    let disc = (kf * (1.0 + scv) - kf * kf * scv).max(0.0);
    let p = ((kf * scv - disc.sqrt()) / (1.0 + scv)).clamp(0.0, 1.0);
    let rate = (kf - p) / mean;
    if k == 1 || p <= 0.0 {
        return Ok(PhaseType::erlang(k, rate)?);
    }
    // Erlang(k-1) with probability p, Erlang(k) otherwise.
    let mut alpha = vec![0.0; k];
    alpha[0] = 1.0 - p;
    alpha[1] = p;
    Ok(PhaseType::coxian_with_alpha(alpha, &vec![rate; k], &vec![1.0; k - 1])?)
}

/// Rising factorial `k (k+1) ... (k+i-1)`.
fn rising(k: f64, i: usize) -> f64 {
    (0..i).map(|j| k + j as f64).product()
}

/// Three-moment fit by a two-branch mixture of Erlang-`k` distributions with
/// different rates. `k = 1` is the classical H2 three-moment fit; larger `k`
/// reaches SCVs below one. The smallest feasible `k` is used.
pub fn fit_three_moments(m1: f64, m2: f64, m3: f64) -> Result<PhaseType, FitError> {
    if !(m1 > 0.0 && m2 > m1 * m1 && m3 > 0.0) {
        return Err(FitError::Infeasible(m1, m2, m3));
    }
    let scv = m2 / (m1 * m1) - 1.0;
    let k0 = ((1.0 / scv).floor() as usize).max(1);
    for k in k0..=MAX_ORDER / 2 {
        let kf = k as f64;
        // Normalized moments of the two-point distribution of Erlang scales.
        let n1 = m1 / kf;
        let n2 = m2 / rising(kf, 2);
        let n3 = m3 / rising(kf, 3);
        let var = n2 - n1 * n1;
        if var <= 1e-12 * n1 * n1 {
            continue;
        }
        let s = (n3 - n1 * n2) / var;
        let q = s * n1 - n2;
        let disc = s * s - 4.0 * q;
        if disc <= 0.0 {
            continue;
        }
        let y1 = 0.5 * (s + disc.sqrt());
        let y2 = 0.5 * (s - disc.sqrt());
        if !(y2 > 0.0 && y1 > y2) {
            continue;
        }
        let p = (n1 - y2) / (y1 - y2);
        if !(p > 0.0 && p < 1.0) {
            continue;
        }
        let mut alpha = vec![0.0; 2 * k];
        alpha[0] = p;
        alpha[k] = 1.0 - p;
        let mut diag = vec![-1.0 / y1; k];
        diag.extend(vec![-1.0 / y2; k]);
        let offdiag = (0..2 * k)
            .map(|i| if i % k + 1 < k { vec![(i + 1, -diag[i])] } else { vec![] })
            .collect();
        return Ok(PhaseType::from_parts(alpha, diag, offdiag)?);
    }
    Err(FitError::Infeasible(m1, m2, m3))
}
