//! Two-moment decomposition baseline for tandem lines with external rate 1.

use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QnaStation {
    pub utilization: f64,
    pub arrival_scv: f64,
    pub service_scv: f64,
    /// Mean time in queue.
    pub mean_wait: f64,
    pub mean_sojourn: f64,
    pub mean_occupancy: f64,
    pub departure_scv: f64,
}

/// Kraemer and Langenbach-Belz mean queueing time of a GI/G/1 queue with
/// arrival rate 1.
pub fn klb_wait(rho: f64, mean_service: f64, ca2: f64, cs2: f64) -> f64 {
    let total = ca2 + cs2;
    if total <= 0.0 {
        return 0.0;
    }
    let g = if ca2 < 1.0 {
        (-2.0 * (1.0 - rho) * (1.0 - ca2).powi(2) / (3.0 * rho * total)).exp()
    } else {
        1.0
    };
    rho * mean_service * total / (2.0 * (1.0 - rho)) * g
}

/// Propagates the arrival SCV station by station with
/// `cd^2 = rho^2 cs^2 + (1 - rho^2) ca^2`.
pub fn qna_baseline(arrival_scv: f64, service_scvs: &[f64], service_means: &[f64]) -> Result<Vec<QnaStation>, PipelineError> {
    if service_scvs.len() != service_means.len() || service_scvs.is_empty() {
        return Err(PipelineError::Input("need one SCV and one mean per station".into()));
    }
    let mut ca2 = arrival_scv;
    let mut out = Vec::with_capacity(service_means.len());
    for (j, (&cs2, &es)) in service_scvs.iter().zip(service_means).enumerate() {
        let rho = es;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(PipelineError::Unstable { station: j + 1, utilization: rho });
        }
        let wq = klb_wait(rho, es, ca2, cs2);
        let cd2 = rho * rho * cs2 + (1.0 - rho * rho) * ca2;
        out.push(QnaStation {
            utilization: rho,
            arrival_scv: ca2,
            service_scv: cs2,
            mean_wait: wq,
            mean_sojourn: wq + es,
            mean_occupancy: wq + es,
            departure_scv: cd2,
        });
        ca2 = cd2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_exponential_chains() {
        let q = qna_baseline(1.0, &[1.0, 1.0, 1.0], &[0.5, 0.3, 0.8]).unwrap();
        for s in &q {
            let rho = s.utilization;
            assert!((s.mean_wait - rho * rho / (1.0 - rho)).abs() < 1e-14);
            assert!((s.mean_occupancy - rho / (1.0 - rho)).abs() < 1e-14);
            assert_eq!(s.departure_scv, 1.0);
        }
    }

    #[test]
    fn departure_scv_limits() {
        let lo = qna_baseline(3.0, &[0.2], &[1e-6]).unwrap()[0];
        assert!((lo.departure_scv - 3.0).abs() < 1e-9);
        let hi = qna_baseline(3.0, &[0.2], &[1.0 - 1e-9]).unwrap()[0];
        assert!((hi.departure_scv - 0.2).abs() < 1e-8);
        assert!(matches!(qna_baseline(1.0, &[1.0], &[1.0]), Err(PipelineError::Unstable { station: 1, .. })));
    }
}
