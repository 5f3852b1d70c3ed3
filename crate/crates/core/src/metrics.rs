//! Accuracy metrics and grouped report tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::DescriptorDims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("percentile {0} outside (0, 100)")]
    Percentile(f64),
    #[error("throughput {0} must be positive")]
    Throughput(f64),
    #[error("records disagree on descriptor dims")]
    MixedDims,
}

fn same_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::Length(a, b));
    }
    Ok(())
}

/// MAPE with the count of entries skipped because their true value is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// `None` when every entry was excluded.
    pub percent: Option<f64>,
    pub used: usize,
    pub excluded: usize,
}

/// `(1/v) sum |(y - yhat) / y| * 100` over entries with `y != 0`.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<Mape, MetricsError> {
    same_len(truth.len(), pred.len())?;
    let mut sum = 0.0;
    let mut used = 0;
    for (y, p) in truth.iter().zip(pred) {
        if *y != 0.0 {
            sum += ((y - p) / y).abs();
            used += 1;
        }
    }
    Ok(Mape {
        percent: (used > 0).then(|| sum / used as f64 * 100.0),
        used,
        excluded: truth.len() - used,
    })
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, MetricsError> {
    same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / truth.len() as f64)
}

/// Batch mean of the summed absolute PMF differences.
pub fn sae<T: AsRef<[f64]>, P: AsRef<[f64]>>(truth_pmfs: &[T], pred_pmfs: &[P]) -> Result<f64, MetricsError> {
    same_len(truth_pmfs.len(), pred_pmfs.len())?;
    if truth_pmfs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, p) in truth_pmfs.iter().zip(pred_pmfs) {
        let (t, p) = (t.as_ref(), p.as_ref());
        same_len(t.len(), p.len())?;
        total += t.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / truth_pmfs.len() as f64)
}

/// Smallest `l` whose cumulative probability reaches `q / 100`.
pub fn pmf_percentile(pmf: &[f64], q: f64) -> Result<usize, MetricsError> {
    if !(q > 0.0 && q < 100.0) {
        return Err(MetricsError::Percentile(q));
    }
    let target = q / 100.0;
    let mut acc = 0.0;
    for (l, p) in pmf.iter().enumerate() {
        acc += p;
        // tolerate rounding in normalized vectors
        if acc >= target - 1e-12 {
            return Ok(l);
        }
    }
    Ok(pmf.len().saturating_sub(1))
}

pub fn mean_from_pmf(pmf: &[f64]) -> f64 {
    pmf.iter().enumerate().map(|(l, p)| l as f64 * p).sum()
}

/// Little's law: mean time in system `W = L / lambda`.
pub fn wait_from_little(mean_occupancy: f64, throughput: f64) -> Result<f64, MetricsError> {
    if !(throughput > 0.0) {
        return Err(MetricsError::Throughput(throughput));
    }
    Ok(mean_occupancy / throughput)
}

/// Percentiles reported for every PMF comparison.
pub const PERCENTILES: [f64; 6] = [25.0, 50.0, 75.0, 90.0, 99.0, 99.9];

/// Covariates used to bin evaluation records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub utilization: f64,
    pub arrival_scv: f64,
    pub service_scv: f64,
    pub rho111: f64,
}

/// One evaluated instance: truth and prediction for whichever outputs apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub covariates: Covariates,
    #[serde(default)]
    pub truth_pmf: Option<Vec<f64>>,
    #[serde(default)]
    pub pred_pmf: Option<Vec<f64>>,
    #[serde(default)]
    pub dims: Option<DescriptorDims>,
    /// Descriptor vectors (log-moments then autocorrelations).
    #[serde(default)]
    pub truth_descriptor: Option<Vec<f64>>,
    #[serde(default)]
    pub pred_descriptor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Four utilization bins by arrival SCV low/high by service SCV low/high.
    UtilScv,
    /// Four bins of the first-lag linear autocorrelation.
    Autocorr,
}

impl std::str::FromStr for Grouping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "util-scv" => Ok(Grouping::UtilScv),
            "autocorr" => Ok(Grouping::Autocorr),
            other => Err(format!("unknown grouping {other:?} (expected util-scv or autocorr)")),
        }
    }
}

/// SCV threshold separating the low and high groups.
pub const SCV_SPLIT: f64 = 4.0;
const UTIL_BINS: [(f64, f64); 4] = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];
const RHO_BINS: [(f64, f64); 4] = [(-0.5, -0.25), (-0.25, 0.0), (0.0, 0.25), (0.25, 0.5)];
const SCV_BINS: [(f64, f64); 2] = [(0.0, SCV_SPLIT), (SCV_SPLIT, 15.0)];

fn bin_of(value: f64, bins: &[(f64, f64)]) -> usize {
    // out-of-range values land in the end bins so groups stay a partition
    bins.iter().position(|&(_, ub)| value < ub).unwrap_or(bins.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupKey {
    /// `(name, lower, upper)` per binned covariate.
    pub bounds: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileMape {
    pub q: f64,
    pub mape: Option<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: GroupKey,
    pub count: usize,
    pub mean_occupancy_mape: Option<f64>,
    pub percentiles: Vec<PercentileMape>,
    /// MAE per autocorrelation coordinate, in descriptor order.
    pub autocorr_mae: Vec<Option<f64>>,
    /// MAPE of raw departure moments `exp(log m_i)`.
    pub moment_mape: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub grouping: Grouping,
    pub dims: Option<DescriptorDims>,
    pub total: usize,
    pub groups: Vec<GroupRow>,
}

fn group_keys(grouping: Grouping) -> Vec<GroupKey> {
    let b = |name: &str, (lo, hi): (f64, f64)| (name.to_string(), lo, hi);
    match grouping {
        Grouping::UtilScv => {
            let mut keys = Vec::new();
            for &u in &UTIL_BINS {
                for &a in &SCV_BINS {
                    for &s in &SCV_BINS {
                        keys.push(GroupKey { bounds: vec![b("utilization", u), b("arrival_scv", a), b("service_scv", s)] });
                    }
                }
            }
            keys
        }
        Grouping::Autocorr => RHO_BINS.iter().map(|&r| GroupKey { bounds: vec![b("rho111", r)] }).collect(),
    }
}

/// Index of the group `c` falls in under `grouping`.
pub fn group_index(grouping: Grouping, c: &Covariates) -> usize {
    match grouping {
        Grouping::UtilScv => {
            bin_of(c.utilization, &UTIL_BINS) * 4 + bin_of(c.arrival_scv, &SCV_BINS) * 2 + bin_of(c.service_scv, &SCV_BINS)
        }
        Grouping::Autocorr => bin_of(c.rho111, &RHO_BINS),
    }
}

fn summarize(records: &[&EvalRecord], key: GroupKey, dims: Option<DescriptorDims>) -> Result<GroupRow, MetricsError> {
    let pmfs: Vec<(&Vec<f64>, &Vec<f64>)> =
        records.iter().filter_map(|r| Some((r.truth_pmf.as_ref()?, r.pred_pmf.as_ref()?))).collect();
    let mut mean_occupancy_mape = None;
    let mut percentiles: Vec<PercentileMape> =
        PERCENTILES.iter().map(|&q| PercentileMape { q, mape: None, excluded: 0 }).collect();
    if !pmfs.is_empty() {
        let t: Vec<f64> = pmfs.iter().map(|(t, _)| mean_from_pmf(t)).collect();
        let p: Vec<f64> = pmfs.iter().map(|(_, p)| mean_from_pmf(p)).collect();
        mean_occupancy_mape = mape(&t, &p)?.percent;
        for pm in percentiles.iter_mut() {
            let mut t = Vec::with_capacity(pmfs.len());
            let mut p = Vec::with_capacity(pmfs.len());
            for (tp, pp) in &pmfs {
                t.push(pmf_percentile(tp, pm.q)? as f64);
                p.push(pmf_percentile(pp, pm.q)? as f64);
            }
            let m = mape(&t, &p)?;
            pm.mape = m.percent;
            pm.excluded = m.excluded;
        }
    }
    let mut autocorr_mae = Vec::new();
    let mut moment_mape = Vec::new();
    if let Some(d) = dims {
        let descs: Vec<(&Vec<f64>, &Vec<f64>)> = records
            .iter()
            .filter_map(|r| Some((r.truth_descriptor.as_ref()?, r.pred_descriptor.as_ref()?)))
            .collect();
        for i in 0..d.n {
            if descs.is_empty() {
                moment_mape.push(None);
                continue;
            }
            let t: Vec<f64> = descs.iter().map(|(t, _)| t[i].exp()).collect();
            let p: Vec<f64> = descs.iter().map(|(_, p)| p[i].exp()).collect();
            moment_mape.push(mape(&t, &p)?.percent);
        }
        for c in 0..d.autocorr_len() {
            if descs.is_empty() {
                autocorr_mae.push(None);
                continue;
            }
            let t: Vec<f64> = descs.iter().map(|(t, _)| t[d.n + c]).collect();
            let p: Vec<f64> = descs.iter().map(|(_, p)| p[d.n + c]).collect();
            autocorr_mae.push(Some(mae(&t, &p)?));
        }
    }
    Ok(GroupRow { key, count: records.len(), mean_occupancy_mape, percentiles, autocorr_mae, moment_mape })
}

/// Aggregates evaluation records per group. Every group of the layout is
/// emitted; empty groups have count 0 and no metrics.
pub fn grouped_report(records: &[EvalRecord], grouping: Grouping) -> Result<MetricsReport, MetricsError> {
    let mut dims = None;
    for r in records {
        if r.truth_descriptor.is_some() {
            match (dims, r.dims) {
                (None, d) => dims = d,
                (Some(a), Some(b)) if a != b => return Err(MetricsError::MixedDims),
                _ => {}
            }
        }
    }
    let keys = group_keys(grouping);
    let mut buckets: Vec<Vec<&EvalRecord>> = vec![Vec::new(); keys.len()];
    for r in records {
        buckets[group_index(grouping, &r.covariates)].push(r);
    }
    let groups = keys
        .into_iter()
        .zip(buckets)
        .map(|(k, b)| summarize(&b, k, dims))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport { grouping, dims, total: records.len(), groups })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// CSV table, one row per group; empty cells mark missing metrics.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = Vec::new();
        if let Some(first) = self.groups.first() {
            for (name, _, _) in &first.key.bounds {
                header.push(format!("{name}_lb"));
                header.push(format!("{name}_ub"));
            }
        }
        header.push("count".into());
        header.push("mape_mean_occupancy".into());
        for q in PERCENTILES {
            header.push(format!("mape_p{q}"));
            header.push(format!("excluded_p{q}"));
        }
        if let Some(d) = self.dims {
            for i in 1..=d.n {
                header.push(format!("mape_moment{i}"));
            }
            for (k, a1, a2) in d.autocorr_keys() {
                header.push(format!("mae_rho_{k}_{a1}_{a2}"));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for g in &self.groups {
            let mut row: Vec<String> = Vec::new();
            for (_, lo, hi) in &g.key.bounds {
                row.push(format!("{lo}"));
                row.push(format!("{hi}"));
            }
            row.push(g.count.to_string());
            row.push(fmt_opt(g.mean_occupancy_mape));
            for p in &g.percentiles {
                row.push(fmt_opt(p.mape));
                row.push(p.excluded.to_string());
            }
            if self.dims.is_some() {
                row.extend(g.moment_mape.iter().map(|v| fmt_opt(*v)));
                row.extend(g.autocorr_mae.iter().map(|v| fmt_opt(*v)));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Metadata sidecar accompanying the CSV table.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "grouping": self.grouping,
            "dims": self.dims,
            "total": self.total,
            "groups": self.groups.len(),
            "percentiles": PERCENTILES,
            "scv_split": SCV_SPLIT,
            "zero_truth_policy": "records whose true value is 0 are excluded from that MAPE cell and counted in excluded_*",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn formula_values() {
        assert_eq!(mape(&[2.0], &[1.0]).unwrap().percent, Some(50.0));
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap().percent, Some(0.0));
        assert_relative_eq!(mape(&[1.0, 2.0], &[1.1, 1.8]).unwrap().percent.unwrap(), 10.0, max_relative = 1e-12);
        let m = mape(&[0.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!((m.used, m.excluded), (1, 1));
        assert_eq!(m.percent, Some(25.0));
        assert_eq!(mape(&[0.0], &[1.0]).unwrap().percent, None);
        assert!(mape(&[1.0], &[]).is_err());

        assert_eq!(mae(&[0.3], &[0.3]).unwrap(), 0.0);
        assert_relative_eq!(mae(&[0.1], &[-0.1]).unwrap(), 0.2, max_relative = 1e-12);
        assert_relative_eq!(mae(&[0.0, 0.2], &[0.1, 0.1]).unwrap(), 0.1, max_relative = 1e-12);

        assert_eq!(sae(&[vec![0.2, 0.8]], &[vec![0.2, 0.8]]).unwrap(), 0.0);
        assert_eq!(sae(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]).unwrap(), 1.0);
    }

    #[test]
    fn percentiles_and_means() {
        let p = [0.5, 0.3, 0.2];
        assert_eq!(pmf_percentile(&p, 75.0).unwrap(), 1);
        assert_eq!(pmf_percentile(&p, 25.0).unwrap(), 0);
        assert!(pmf_percentile(&p, 100.0).is_err());
        // geometric(0.5) truncated at 150: 1 - 0.5^(l+1) >= 0.99 first at l = 6
        let mut g: Vec<f64> = (0..150).map(|l| 0.5 * 0.5f64.powi(l)).collect();
        g[149] += 0.5f64.powi(150);
        assert_eq!(pmf_percentile(&g, 99.0).unwrap(), 6);

        assert_eq!(mean_from_pmf(&[0.5, 0.5]), 0.5);
        assert_eq!(wait_from_little(1.0, 1.0).unwrap(), 1.0);
        assert!(wait_from_little(1.0, 0.0).is_err());
        let geo7: Vec<f64> = (0..2000).map(|l| 0.3 * 0.7f64.powi(l)).collect();
        assert_relative_eq!(mean_from_pmf(&geo7), 7.0 / 3.0, max_relative = 1e-9);
    }

    fn rec(util: f64, a: f64, s: f64, rho: f64, truth: Vec<f64>, pred: Vec<f64>) -> EvalRecord {
        EvalRecord {
            covariates: Covariates { utilization: util, arrival_scv: a, service_scv: s, rho111: rho },
            truth_pmf: Some(truth),
            pred_pmf: Some(pred),
            dims: None,
            truth_descriptor: None,
            pred_descriptor: None,
        }
    }

    #[test]
    fn binning() {
        let c = Covariates { utilization: 0.3, arrival_scv: 2.0, service_scv: 2.0, rho111: 0.3 };
        assert_eq!(group_index(Grouping::UtilScv, &c), 4);
        let keys = group_keys(Grouping::UtilScv);
        assert_eq!(keys[4].bounds[0], ("utilization".to_string(), 0.25, 0.5));
        assert_eq!(keys[4].bounds[1].2, SCV_SPLIT);
        assert_eq!(group_index(Grouping::Autocorr, &c), 3);
        assert_eq!(group_keys(Grouping::Autocorr)[3].bounds[0], ("rho111".to_string(), 0.25, 0.5));
        // clamped ends
        assert_eq!(group_index(Grouping::Autocorr, &Covariates { rho111: -0.9, ..c }), 0);
        assert_eq!(group_index(Grouping::UtilScv, &Covariates { utilization: 0.95, arrival_scv: 20.0, ..c }), 14);
    }

    #[test]
    fn perfect_predictions_report_zero() {
        let recs = vec![
            rec(0.1, 1.0, 1.0, 0.0, vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2]),
            rec(0.6, 5.0, 1.0, 0.1, vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]),
        ];
        let r = grouped_report(&recs, Grouping::UtilScv).unwrap();
        assert_eq!(r.groups.len(), 16);
        assert_eq!(r.groups.iter().map(|g| g.count).sum::<usize>(), 2);
        for g in r.groups.iter().filter(|g| g.count > 0) {
            assert_eq!(g.mean_occupancy_mape, Some(0.0));
            for p in &g.percentiles {
                assert!(p.mape.unwrap_or(0.0) == 0.0);
            }
        }
        let empty = r.groups.iter().find(|g| g.count == 0).unwrap();
        assert_eq!(empty.mean_occupancy_mape, None);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.starts_with("utilization_lb,utilization_ub,arrival_scv_lb"));
    }
}
