//! Replication-based confidence intervals for the labeled quantities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_tandem, SimError, TandemSpec, DEFAULT_WARMUP};
use crate::descriptors::{estimate_autocorr, estimate_moments};
use crate::rng::derive_seed;

const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub quantity: String,
    pub mean: f64,
    /// Full length of the 95% interval, `2 * 1.96 * sd / sqrt(reps)`.
    pub ci_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTable {
    pub reps: usize,
    pub n_arrivals: u64,
    pub rows: Vec<CiRow>,
}

impl CiTable {
    pub fn get(&self, quantity: &str) -> Option<&CiRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }
}

/// `reps` independent replications with seeds derived from `seed`.
pub fn replicate_ci(spec: &TandemSpec, reps: usize, n_arrivals: u64, seed: u64) -> Result<CiTable, SimError> {
    let seeds: Vec<u64> = (0..reps as u64).map(|r| derive_seed(seed, &[r])).collect();
    replicate_ci_with_seeds(spec, &seeds, n_arrivals)
}

/// Replications with explicit seeds (repeated seeds give zero-width intervals).
pub fn replicate_ci_with_seeds(spec: &TandemSpec, seeds: &[u64], n_arrivals: u64) -> Result<CiTable, SimError> {
    assert!(seeds.len() >= 2, "need at least two replications");
    let samples: Vec<Vec<(String, f64)>> = seeds
        .par_iter()
        .map(|&s| {
            let r = simulate_tandem(spec, n_arrivals, DEFAULT_WARMUP, s)?;
            let mut q = Vec::new();
            for (j, st) in r.stations.iter().enumerate() {
                let logm = estimate_moments(&st.departures, 5).unwrap_or_else(|_| vec![f64::NAN; 5]);
                for (i, v) in logm.into_iter().enumerate() {
                    q.push((format!("s{}.logm{}", j + 1, i + 1), v));
                }
                let rho = estimate_autocorr(&st.departures, 1, 1, 1).unwrap_or(f64::NAN);
                q.push((format!("s{}.rho111", j + 1), rho));
            }
            if let Some(st) = r.stations.get(1) {
                let total: f64 = st.pmf_counts.iter().sum();
                for l in 0..5 {
                    q.push((format!("s2.p{l}"), st.pmf_counts.get(l).copied().unwrap_or(0.0) / total));
                }
                q.push(("s2.mean_occupancy".to_string(), st.mean_occupancy()));
            }
            Ok(q)
        })
        .collect::<Result<_, SimError>>()?;

    let reps = samples.len() as f64;
    let rows = (0..samples[0].len())
        .map(|k| {
            let vals: Vec<f64> = samples.iter().map(|s| s[k].1).collect();
            let mean = vals.iter().sum::<f64>() / reps;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1.0);
            CiRow { quantity: samples[0][k].0.clone(), mean, ci_length: 2.0 * Z95 * var.sqrt() / reps.sqrt() }
        })
        .collect();
    Ok(CiTable { reps: seeds.len(), n_arrivals, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phdist::PhaseType;

    #[test]
    fn identical_seeds_give_zero_length() {
        let spec = TandemSpec::new(
            PhaseType::exponential(1.0).unwrap(),
            vec![PhaseType::exponential(2.0).unwrap(), PhaseType::erlang(2, 3.0).unwrap()],
        )
        .unwrap();
        let t = replicate_ci_with_seeds(&spec, &[4, 4], 20_000).unwrap();
        assert_eq!(t.rows.len(), 2 * 6 + 6);
        assert!(t.rows.iter().all(|r| r.ci_length == 0.0));
        assert!(t.get("s2.mean_occupancy").is_some());
    }
}
