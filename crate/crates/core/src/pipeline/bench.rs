//! Benchmark layouts comparing the network chain and QNA against simulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{infer_spec, ModelBundle};
use super::qna::qna_baseline;
use super::PipelineError;
use crate::metrics::{group_index, Covariates, Grouping};
use crate::phdist::{fit_three_moments, fit_two_moments, PhaseType};
use crate::rng::derive_seed;
use crate::simulator::{simulate_tandem, TandemSpec, DEFAULT_WARMUP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    TwoStationGrid,
    SureshWhitt9,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "two-station-grid" => Ok(Suite::TwoStationGrid),
            "suresh-whitt-9" => Ok(Suite::SureshWhitt9),
            other => Err(format!("unknown suite {other:?} (expected two-station-grid or suresh-whitt-9)")),
        }
    }
}

/// Named benchmark distributions with mean 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NamedDist {
    Exponential,
    Erlang(usize),
    /// Balanced-means H2 with the given SCV.
    H2(f64),
    LogNormal(f64),
    Gamma(f64),
}

impl NamedDist {
    pub fn label(&self) -> String {
        match self {
            NamedDist::Exponential => "M".into(),
            NamedDist::Erlang(k) => format!("E{k}"),
            NamedDist::H2(c) => format!("H2({c})"),
            NamedDist::LogNormal(c) => format!("LN({c})"),
            NamedDist::Gamma(c) => format!("G({c})"),
        }
    }

    pub fn scv(&self) -> f64 {
        match *self {
            NamedDist::Exponential => 1.0,
            NamedDist::Erlang(k) => 1.0 / k as f64,
            NamedDist::H2(c) | NamedDist::LogNormal(c) | NamedDist::Gamma(c) => c,
        }
    }

    /// PH representation with the given mean. Lognormal and gamma laws are
    /// replaced by three-moment PH fits.
    pub fn to_ph(&self, mean: f64) -> Result<PhaseType, PipelineError> {
        let unit = match *self {
            NamedDist::Exponential => PhaseType::exponential(1.0)?,
            NamedDist::Erlang(k) => PhaseType::erlang(k, k as f64)?,
            NamedDist::H2(c) => fit_two_moments(1.0, c)?,
            NamedDist::LogNormal(c) => {
                let s2 = (1.0 + c).ln();
                let m = |i: f64| (i * (i - 1.0) * s2 / 2.0).exp();
                fit_three_moments(1.0, m(2.0), m(3.0))?
            }
            NamedDist::Gamma(c) => fit_three_moments(1.0, 1.0 + c, (1.0 + c) * (1.0 + 2.0 * c))?,
        };
        Ok(unit.scale_to_mean(mean)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    pub label: String,
    pub spec: TandemSpec,
    /// Binning covariates of the last station.
    pub covariates: Covariates,
}

/// Expected scenario count quoted for each suite.
pub fn reference_count(suite: Suite) -> usize {
    match suite {
        Suite::TwoStationGrid => 864,
        Suite::SureshWhitt9 => 2,
    }
}

pub fn benchmark_scenarios(suite: Suite) -> Result<Vec<Scenario>, PipelineError> {
    let mut out = Vec::new();
    match suite {
        Suite::TwoStationGrid => {
            let outer = [NamedDist::Erlang(4), NamedDist::LogNormal(4.0)];
            let middle = [
                NamedDist::Erlang(4),
                NamedDist::LogNormal(0.25),
                NamedDist::Exponential,
                NamedDist::H2(4.0),
                NamedDist::LogNormal(4.0),
                NamedDist::Gamma(4.0),
            ];
            let rho1 = [0.7, 0.9];
            let rho2: Vec<f64> = (0..18).map(|i| 0.11 + 0.05 * i as f64).collect();
            for g1 in &outer {
                for g2 in &middle {
                    for g3 in &outer {
                        for &r1 in &rho1 {
                            for &r2 in &rho2 {
                                let spec = TandemSpec::new(g1.to_ph(1.0)?, vec![g2.to_ph(r1)?, g3.to_ph(r2)?])?;
                                out.push(Scenario {
                                    id: out.len(),
                                    label: format!("{}/{}/1 -> ./{}/1 rho1={r1} rho2={r2:.2}", g1.label(), g2.label(), g3.label()),
                                    spec,
                                    covariates: Covariates {
                                        utilization: r2,
                                        arrival_scv: g1.scv(),
                                        service_scv: g3.scv(),
                                        rho111: 0.0,
                                    },
                                });
                            }
                        }
                    }
                }
            }
        }
        Suite::SureshWhitt9 => {
            // SCV 0 is approximated by the least variable trained law
            for (arrival, name) in [(NamedDist::Erlang(1000), "E1000"), (NamedDist::H2(8.0), "H2(8)")] {
                let mut services = vec![PhaseType::exponential(1.0 / 0.6)?; 8];
                services.push(PhaseType::exponential(1.0 / 0.9)?);
                out.push(Scenario {
                    id: out.len(),
                    label: format!("{name} -> 8x M(0.6) -> M(0.9)"),
                    spec: TandemSpec::new(arrival.to_ph(1.0)?, services)?,
                    covariates: Covariates { utilization: 0.9, arrival_scv: arrival.scv(), service_scv: 1.0, rho111: 0.0 },
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub id: usize,
    pub label: String,
    pub covariates: Covariates,
    pub sim_seed: u64,
    pub sim_sojourn: Vec<f64>,
    pub qna_sojourn: Vec<f64>,
    pub nn_sojourn: Vec<Option<f64>>,
    pub qna_ape: Vec<f64>,
    pub nn_ape: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchGroup {
    pub bounds: Vec<(String, f64, f64)>,
    pub count: usize,
    /// MAPE of the last station's mean sojourn.
    pub nn_mape: Option<f64>,
    pub qna_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: Option<Suite>,
    pub scenario_count: usize,
    pub reference_count: Option<usize>,
    pub sim_budget: u64,
    pub scenarios: Vec<ScenarioResult>,
    pub groups: Vec<BenchGroup>,
}

fn ape(truth: f64, pred: f64) -> f64 {
    ((truth - pred) / truth).abs() * 100.0
}

/// Simulates each scenario once and scores QNA and (optionally) the network
/// chain against that same realization.
pub fn run_scenarios(
    scenarios: &[Scenario],
    bundle: Option<&ModelBundle>,
    sim_budget: u64,
    seed: u64,
) -> Result<Vec<ScenarioResult>, PipelineError> {
    scenarios
        .par_iter()
        .map(|sc| {
            let sim_seed = derive_seed(seed, &[sc.id as u64]);
            let sim = simulate_tandem(&sc.spec, sim_budget, DEFAULT_WARMUP, sim_seed)?;
            let sim_sojourn: Vec<f64> = sim.stations.iter().map(|s| s.mean_sojourn()).collect();
            let scvs: Vec<f64> = sc.spec.services.iter().map(|s| s.scv()).collect();
            let means: Vec<f64> = sc.spec.services.iter().map(|s| s.mean()).collect();
            let qna = qna_baseline(sc.spec.arrival.scv(), &scvs, &means)?;
            let qna_sojourn: Vec<f64> = qna.iter().map(|q| q.mean_sojourn).collect();
            let nn_sojourn: Vec<Option<f64>> = match bundle {
                Some(b) => infer_spec(b, &sc.spec)?.stations.iter().map(|s| s.mean_sojourn).collect(),
                None => vec![None; sim_sojourn.len()],
            };
            Ok(ScenarioResult {
                id: sc.id,
                label: sc.label.clone(),
                covariates: sc.covariates,
                sim_seed,
                qna_ape: sim_sojourn.iter().zip(&qna_sojourn).map(|(t, p)| ape(*t, *p)).collect(),
                nn_ape: sim_sojourn.iter().zip(&nn_sojourn).map(|(t, p)| p.map(|p| ape(*t, p))).collect(),
                sim_sojourn,
                qna_sojourn,
                nn_sojourn,
            })
        })
        .collect()
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn grid_groups(results: &[ScenarioResult]) -> Vec<BenchGroup> {
    let util = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];
    let scv = [(0.0, 4.0), (4.0, 15.0)];
    let mut groups = Vec::new();
    for &u in &util {
        for &a in &scv {
            for &s in &scv {
                groups.push(BenchGroup {
                    bounds: vec![
                        ("utilization".into(), u.0, u.1),
                        ("arrival_scv".into(), a.0, a.1),
                        ("service_scv".into(), s.0, s.1),
                    ],
                    count: 0,
                    nn_mape: None,
                    qna_mape: None,
                });
            }
        }
    }
    let mut members: Vec<Vec<&ScenarioResult>> = vec![Vec::new(); groups.len()];
    for r in results {
        members[group_index(Grouping::UtilScv, &r.covariates)].push(r);
    }
    for (g, m) in groups.iter_mut().zip(members) {
        g.count = m.len();
        g.qna_mape = mean_of(m.iter().map(|r| *r.qna_ape.last().unwrap()));
        g.nn_mape = mean_of(m.iter().filter_map(|r| *r.nn_ape.last().unwrap()));
    }
    groups
}

pub fn benchmark_suite(
    suite: Suite,
    bundle: Option<&ModelBundle>,
    sim_budget: u64,
    seed: u64,
) -> Result<BenchReport, PipelineError> {
    let scenarios = benchmark_scenarios(suite)?;
    let results = run_scenarios(&scenarios, bundle, sim_budget, seed)?;
    let groups = if suite == Suite::TwoStationGrid { grid_groups(&results) } else { Vec::new() };
    Ok(BenchReport {
        suite: Some(suite),
        scenario_count: results.len(),
        reference_count: Some(reference_count(suite)),
        sim_budget,
        scenarios: results,
        groups,
    })
}

impl BenchReport {
    /// One row per scenario and station.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,label,station,sim_sojourn,qna_sojourn,nn_sojourn,qna_ape,nn_ape\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.scenarios {
            for j in 0..r.sim_sojourn.len() {
                out.push_str(&format!(
                    "{},\"{}\",{},{:.6},{:.6},{},{:.6},{}\n",
                    r.id,
                    r.label,
                    j + 1,
                    r.sim_sojourn[j],
                    r.qna_sojourn[j],
                    opt(r.nn_sojourn[j]),
                    r.qna_ape[j],
                    opt(r.nn_ape[j])
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        let grid = benchmark_scenarios(Suite::TwoStationGrid).unwrap();
        assert_eq!(grid.len(), 864);
        assert_eq!(grid.len(), reference_count(Suite::TwoStationGrid));
        assert!(grid.iter().all(|s| (s.spec.arrival.mean() - 1.0).abs() < 1e-9));
        let top = grid.iter().map(|s| s.spec.services[1].mean()).fold(0.0, f64::max);
        assert!((top - 0.96).abs() < 1e-9);
        let sw = benchmark_scenarios(Suite::SureshWhitt9).unwrap();
        assert_eq!(sw.len(), 2);
        for s in &sw {
            let rho: Vec<f64> = s.spec.services.iter().map(|p| p.mean()).collect();
            assert_eq!(rho.len(), 9);
            assert!(rho[..8].iter().all(|r| (r - 0.6).abs() < 1e-12));
            assert!((rho[8] - 0.9).abs() < 1e-12);
        }
        assert!((sw[0].spec.arrival.scv() - 0.001).abs() < 1e-12);
        assert!((sw[1].spec.arrival.scv() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn named_distributions_hit_their_moments() {
        for d in [NamedDist::Erlang(4), NamedDist::LogNormal(0.25), NamedDist::LogNormal(4.0), NamedDist::Gamma(4.0), NamedDist::H2(4.0)] {
            let ph = d.to_ph(0.7).unwrap();
            assert!((ph.mean() - 0.7).abs() < 1e-9, "{}", d.label());
            assert!((ph.scv() - d.scv()).abs() < 1e-6 * d.scv(), "{}: {}", d.label(), ph.scv());
        }
    }
}
