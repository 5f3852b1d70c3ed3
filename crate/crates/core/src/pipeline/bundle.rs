//! Trained network triple and the station-by-station inference chain.

use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::descriptors::DescriptorDims;
use crate::metrics::mean_from_pmf;
use crate::nn::{load_model, save_model, Head, MlpModel, Role};
use crate::simulator::TandemSpec;

const BUNDLE_FILE: &str = "bundle.json";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub nn1: MlpModel,
    pub nn2: MlpModel,
    pub nn3: MlpModel,
    pub dims: DescriptorDims,
    pub pmf_len: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    dims: DescriptorDims,
    pmf_len: usize,
}

impl ModelBundle {
    /// Checks that the descriptor flows through the chain.
    pub fn new(nn1: MlpModel, nn2: MlpModel, nn3: MlpModel, dims: DescriptorDims) -> Result<Self, PipelineError> {
        for (m, role) in [(&nn1, Role::Nn1), (&nn2, Role::Nn2), (&nn3, Role::Nn3)] {
            if let Some(r) = m.meta.role {
                if r != role {
                    return Err(PipelineError::Bundle(format!("{role} slot holds a {r} model")));
                }
            }
            if m.head != role.head() {
                return Err(PipelineError::Bundle(format!("{role} needs a {:?} head", role.head())));
            }
            if m.input_len() != role.input_len(dims) {
                return Err(PipelineError::Bundle(format!(
                    "{role} input {} != {} for dims {dims}",
                    m.input_len(),
                    role.input_len(dims)
                )));
            }
        }
        if nn1.output_len() != dims.len() || nn3.output_len() != dims.len() || nn2.input_len() - dims.n != dims.len() {
            return Err(PipelineError::Bundle(format!(
                "chain mismatch: nn1 out {}, nn3 out {}, nn2 in {} with n = {}",
                nn1.output_len(),
                nn3.output_len(),
                nn2.input_len(),
                dims.n
            )));
        }
        let pmf_len = nn2.output_len();
        Ok(ModelBundle { nn1, nn2, nn3, dims, pmf_len })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        for (m, role) in [(&self.nn1, Role::Nn1), (&self.nn2, Role::Nn2), (&self.nn3, Role::Nn3)] {
            save_model(m, &dir.join(format!("{}.tfm", role.name())))?;
        }
        let meta = BundleMeta { version: BUNDLE_VERSION, dims: self.dims, pmf_len: self.pmf_len };
        std::fs::write(dir.join(BUNDLE_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads `nn1.tfm`, `nn2.tfm`, `nn3.tfm` from `dir`. Dims come from
    /// `bundle.json` when present, otherwise from the model headers.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let nn1 = load_model(&dir.join("nn1.tfm"))?;
        let nn2 = load_model(&dir.join("nn2.tfm"))?;
        let nn3 = load_model(&dir.join("nn3.tfm"))?;
        let meta_path = dir.join(BUNDLE_FILE);
        let dims = if meta_path.exists() {
            let meta: BundleMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)?;
            if meta.version != BUNDLE_VERSION {
                return Err(PipelineError::Schema(format!("bundle version {}", meta.version)));
            }
            meta.dims
        } else {
            nn1.meta.dims.ok_or_else(|| PipelineError::Bundle("no descriptor dims recorded".into()))?
        };
        Self::new(nn1, nn2, nn3, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub nn1: usize,
    pub nn2: usize,
    pub nn3: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationPrediction {
    /// 1-based station index.
    pub station: usize,
    /// Occupancy PMF (stations 2..m).
    pub pmf: Option<Vec<f64>>,
    /// Departure descriptor (stations 1..m-1).
    pub descriptor: Option<Vec<f64>>,
    pub mean_occupancy: Option<f64>,
    /// Mean time in system by Little's law with throughput 1.
    pub mean_sojourn: Option<f64>,
    /// Mean time in queue, `mean_sojourn - E[S]`.
    pub mean_wait: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPrediction {
    pub stations: Vec<StationPrediction>,
    pub calls: CallCounts,
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let w = v.first().map_or(0, |r| r.len());
    Array2::from_shape_vec((v.len(), w), v.concat()).expect("rectangular rows")
}

/// Runs the chain for a batch of tandems with the same station count.
/// Each network is applied once per chain step to the whole batch; call
/// counts are per instance.
pub fn infer_batch(
    bundle: &ModelBundle,
    arrival_logm: &[Vec<f64>],
    service_logm: &[Vec<Vec<f64>>],
) -> Result<Vec<ChainPrediction>, PipelineError> {
    let n = bundle.dims.n;
    let b = arrival_logm.len();
    if b != service_logm.len() {
        return Err(PipelineError::Input(format!("{b} arrival rows vs {} service rows", service_logm.len())));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let m = service_logm[0].len();
    if m < 2 {
        return Err(PipelineError::Input("need at least two stations".into()));
    }
    for (a, s) in arrival_logm.iter().zip(service_logm) {
        if s.len() != m {
            return Err(PipelineError::Input("batch mixes station counts".into()));
        }
        if a.len() != n || s.iter().any(|v| v.len() != n) {
            return Err(PipelineError::Input(format!("moment vectors must have length {n}")));
        }
    }
    let service_at = |j: usize| rows(&service_logm.iter().map(|s| s[j].clone()).collect::<Vec<_>>());
    let mut out: Vec<ChainPrediction> = (0..b)
        .map(|_| ChainPrediction {
            stations: (1..=m)
                .map(|station| StationPrediction {
                    station,
                    pmf: None,
                    descriptor: None,
                    mean_occupancy: None,
                    mean_sojourn: None,
                    mean_wait: None,
                })
                .collect(),
            calls: CallCounts::default(),
        })
        .collect();

    let x1 = concatenate(Axis(1), &[rows(arrival_logm).view(), service_at(0).view()]).expect("same rows");
    let mut desc = bundle.nn1.forward_batch(x1.view())?;
    pin_rate(&mut desc);
    for (i, p) in out.iter_mut().enumerate() {
        p.calls.nn1 += 1;
        p.stations[0].descriptor = Some(desc.row(i).to_vec());
    }
    for j in 1..m {
        let svc = service_at(j);
        let x = concatenate(Axis(1), &[desc.view(), svc.view()]).expect("same rows");
        let pmf = bundle.nn2.forward_batch(x.view())?;
        for (i, p) in out.iter_mut().enumerate() {
            p.calls.nn2 += 1;
            let probs = pmf.row(i).to_vec();
            let occ = mean_from_pmf(&probs);
            let st = &mut p.stations[j];
            st.mean_occupancy = Some(occ);
            st.mean_sojourn = Some(occ);
            st.mean_wait = Some(occ - svc[[i, 0]].exp());
            st.pmf = Some(probs);
        }
        if j + 1 < m {
            desc = bundle.nn3.forward_batch(x.view())?;
            pin_rate(&mut desc);
            for (i, p) in out.iter_mut().enumerate() {
                p.calls.nn3 += 1;
                p.stations[j].descriptor = Some(desc.row(i).to_vec());
            }
        }
    }
    Ok(out)
}

/// A stable tandem passes the unit arrival rate through every station, so
/// the first departure log-moment is exactly 0. Training inputs carry only
/// estimation noise there, which standardization magnifies; a network's
/// error in that coordinate would dominate the next step.
fn pin_rate(desc: &mut Array2<f64>) {
    desc.column_mut(0).fill(0.0);
}

pub fn infer_tandem(
    bundle: &ModelBundle,
    arrival_logm: &[f64],
    service_logm: &[Vec<f64>],
) -> Result<ChainPrediction, PipelineError> {
    Ok(infer_batch(bundle, &[arrival_logm.to_vec()], &[service_logm.to_vec()])?.remove(0))
}

/// Chain prediction from analytic PH log-moments of a spec.
pub fn infer_spec(bundle: &ModelBundle, spec: &TandemSpec) -> Result<ChainPrediction, PipelineError> {
    let n = bundle.dims.n;
    let services: Vec<Vec<f64>> = spec.services.iter().map(|s| s.log_moments(n)).collect();
    infer_tandem(bundle, &spec.arrival.log_moments(n), &services)
}

/// Untrained bundle with the given hidden widths, used for shape tests and
/// runtime probes.
pub fn random_bundle(dims: DescriptorDims, pmf_len: usize, hidden: [&[usize]; 3], seed: u64) -> Result<ModelBundle, PipelineError> {
    let mut models = Vec::new();
    for (k, role) in Role::ALL.into_iter().enumerate() {
        let mut layer_dims = vec![role.input_len(dims)];
        layer_dims.extend_from_slice(hidden[k]);
        layer_dims.push(role.output_len(dims, pmf_len));
        let head = if role == Role::Nn2 { Head::Softmax } else { Head::Identity };
        let mut m = MlpModel::init(&layer_dims, head, &mut crate::rng::stream(seed, k as u64))?;
        m.meta.role = Some(role);
        m.meta.dims = Some(dims);
        models.push(m);
    }
    let nn3 = models.pop().unwrap();
    let nn2 = models.pop().unwrap();
    let nn1 = models.pop().unwrap();
    ModelBundle::new(nn1, nn2, nn3, dims)
}
