//! Labeled datasets from two-station simulations.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::descriptors::{build_descriptor, build_pmf, estimate_autocorr, DepartureDescriptor, DescriptorDims};
use crate::metrics::Covariates;
use crate::nn::{Dataset, Role};
use crate::phdist::{generate_library, GenConfig, PhaseType};
use crate::rng::{derive_seed, stream};
use crate::simulator::{simulate_tandem, TandemSpec};

pub const DATASET_FORMAT: &str = "tandemflow-dataset";
pub const DATASET_VERSION: u32 = 1;
const SUMMARY_FORMAT: &str = "tandemflow-summaries";
const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_arrivals: u64,
    pub warmup: f64,
    /// Largest descriptor dims stored; smaller dims are projections.
    pub dims: DescriptorDims,
    /// PMF length `L`.
    pub pmf_len: usize,
    /// Maximum tolerated simulated mass beyond `L - 1`.
    pub delta: f64,
    pub arrival_scv: (f64, f64),
    pub service_scv: (f64, f64),
    /// Service means are uniform on `(lo, hi]`.
    pub service_mean: (f64, f64),
    pub max_attempts: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 5000,
            n_val: 500,
            n_test: 500,
            n_arrivals: 1_000_000,
            warmup: crate::simulator::DEFAULT_WARMUP,
            dims: DescriptorDims::default(),
            pmf_len: 150,
            delta: 1e-3,
            arrival_scv: (0.001, 15.0),
            service_scv: (0.001, 15.0),
            service_mean: (0.01, 0.9),
            max_attempts: 50,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn n_instances(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.n_instances() == 0 {
            return bad("no instances requested");
        }
        if self.pmf_len < 2 {
            return bad("pmf_len must be at least 2");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        let (lo, hi) = self.service_mean;
        if !(lo > 0.0 && hi > lo && hi < 1.0) {
            return bad("service_mean must satisfy 0 < lo < hi < 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        self.dims.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for (lo, hi) in [self.arrival_scv, self.service_scv] {
            GenConfig::new(1, lo, hi, 1.0, 0).validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Digest of everything that affects the simulated instances.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// Everything kept from one simulated instance; role records at any smaller
/// dims are derived from it without re-simulating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub index: usize,
    pub attempt: u32,
    pub sim_seed: u64,
    pub spec_hash: String,
    pub split: Split,
    pub arrival_logm: Vec<f64>,
    pub arrival_scv: f64,
    pub service_logm: Vec<Vec<f64>>,
    pub service_mean: Vec<f64>,
    pub service_scv: Vec<f64>,
    /// Station 1 and station 2 inter-departure descriptors.
    pub departure: Vec<DepartureDescriptor>,
    pub departure_scv: Vec<f64>,
    pub departure_rho111: Vec<f64>,
    /// Station 2 occupancy PMF of length `L`.
    pub pmf: Vec<f64>,
    pub tail_mass: f64,
    pub mean_occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub attempt: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySet {
    pub config: DatasetConfig,
    pub instances: Vec<InstanceSummary>,
    pub rejections: Vec<Rejection>,
    /// Instances that exhausted `max_attempts`.
    pub dropped: Vec<usize>,
}

pub fn spec_hash(spec: &TandemSpec) -> String {
    let json = serde_json::to_vec(spec).expect("serializable");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

fn draw_spec(cfg: &DatasetConfig, index: usize, attempt: u32) -> Result<TandemSpec, PipelineError> {
    let tag = |k: u64| derive_seed(cfg.seed, &[index as u64, attempt as u64, k]);
    let ph = |scv: (f64, f64), mean: f64, k: u64| -> Result<PhaseType, PipelineError> {
        let lib = generate_library(&GenConfig::new(1, scv.0, scv.1, mean, tag(k)))?;
        Ok(lib.into_iter().next().expect("one entry"))
    };
    let mut rng = stream(tag(3), 0);
    let (lo, hi) = cfg.service_mean;
    let mut mean = || lo + (hi - lo) * (1.0 - rng.random::<f64>());
    let (m1, m2) = (mean(), mean());
    let arrival = ph(cfg.arrival_scv, 1.0, 0)?;
    let services = vec![ph(cfg.service_scv, m1, 1)?, ph(cfg.service_scv, m2, 2)?];
    Ok(TandemSpec::new(arrival, services)?)
}

fn summarize(cfg: &DatasetConfig, index: usize, attempt: u32) -> Result<InstanceSummary, String> {
    let spec = draw_spec(cfg, index, attempt).map_err(|e| e.to_string())?;
    let sim_seed = derive_seed(cfg.seed, &[index as u64, attempt as u64, 99]);
    let mut s = label_spec(cfg, &spec, sim_seed)?;
    s.index = index;
    s.attempt = attempt;
    Ok(s)
}

/// Simulates a given two-station spec and computes its labels under `cfg`.
/// Errors carry the rejection reason.
pub fn label_spec(cfg: &DatasetConfig, spec: &TandemSpec, sim_seed: u64) -> Result<InstanceSummary, String> {
    if spec.stations() != 2 {
        return Err(format!("need 2 stations, got {}", spec.stations()));
    }
    let (index, attempt) = (0, 0);
    let r = simulate_tandem(&spec, cfg.n_arrivals, cfg.warmup, sim_seed).map_err(|e| e.to_string())?;
    let st2 = &r.stations[1];
    let pmf = build_pmf(&st2.pmf_counts, cfg.pmf_len, cfg.delta).map_err(|e| e.to_string())?;
    if pmf.tail_flag {
        return Err(format!("tail mass {:.3e} beyond L-1 exceeds delta", pmf.tail_mass));
    }
    let mut departure = Vec::with_capacity(2);
    let mut departure_scv = Vec::with_capacity(2);
    let mut departure_rho111 = Vec::with_capacity(2);
    for st in &r.stations {
        let d = build_descriptor(&st.departures, cfg.dims).map_err(|e| e.to_string())?;
        let rho = match d.autocorr_at(1, 1, 1) {
            Some(v) => v,
            None => estimate_autocorr(&st.departures, 1, 1, 1).map_err(|e| e.to_string())?,
        };
        departure_scv.push((d.log_moments[1] - 2.0 * d.log_moments[0]).exp() - 1.0);
        departure_rho111.push(rho);
        departure.push(d);
    }
    Ok(InstanceSummary {
        index,
        attempt,
        sim_seed,
        spec_hash: spec_hash(spec),
        split: Split::Train,
        arrival_logm: spec.arrival.log_moments(cfg.dims.n),
        arrival_scv: spec.arrival.scv(),
        service_logm: spec.services.iter().map(|s| s.log_moments(cfg.dims.n)).collect(),
        service_mean: spec.services.iter().map(|s| s.mean()).collect(),
        service_scv: spec.services.iter().map(|s| s.scv()).collect(),
        departure,
        departure_scv,
        departure_rho111,
        pmf: pmf.probs,
        tail_mass: pmf.tail_mass,
        mean_occupancy: st2.mean_occupancy(),
    })
}

/// Simulates every instance (in parallel, ordered by index), resampling
/// rejected draws, and assigns splits by spec hash.
pub fn build_summaries(cfg: &DatasetConfig) -> Result<SummarySet, PipelineError> {
    cfg.validate()?;
    let outcomes: Vec<(Option<InstanceSummary>, Vec<Rejection>)> = (0..cfg.n_instances())
        .into_par_iter()
        .map(|index| {
            let mut rejections = Vec::new();
            for attempt in 0..cfg.max_attempts {
                match summarize(cfg, index, attempt) {
                    Ok(s) => return (Some(s), rejections),
                    Err(reason) => rejections.push(Rejection { index, attempt, reason }),
                }
            }
            (None, rejections)
        })
        .collect();
    let mut instances = Vec::new();
    let mut rejections = Vec::new();
    let mut dropped = Vec::new();
    for (index, (s, rej)) in outcomes.into_iter().enumerate() {
        for r in &rej {
            log::info!("instance {} attempt {} rejected: {}", r.index, r.attempt, r.reason);
        }
        rejections.extend(rej);
        match s {
            Some(s) => instances.push(s),
            None => {
                log::warn!("instance {index} dropped after {} attempts", cfg.max_attempts);
                dropped.push(index);
            }
        }
    }
    assign_splits(&mut instances, cfg);
    Ok(SummarySet { config: cfg.clone(), instances, rejections, dropped })
}

/// Orders instances by spec hash and fills train, val, then test.
fn assign_splits(instances: &mut [InstanceSummary], cfg: &DatasetConfig) {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[a].spec_hash.cmp(&instances[b].spec_hash).then(instances[a].index.cmp(&instances[b].index))
    });
    for (rank, &i) in order.iter().enumerate() {
        instances[i].split = if rank < cfg.n_train {
            Split::Train
        } else if rank < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryHeader {
    format: String,
    version: u32,
    config: DatasetConfig,
    rejections: Vec<Rejection>,
    dropped: Vec<usize>,
}

pub fn write_summaries(set: &SummarySet, path: &Path) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = SummaryHeader {
        format: SUMMARY_FORMAT.into(),
        version: SUMMARY_VERSION,
        config: set.config.clone(),
        rejections: set.rejections.clone(),
        dropped: set.dropped.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &set.instances {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries(path: &Path) -> Result<SummarySet, PipelineError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| PipelineError::Schema(format!("{}: empty file", path.display())))??;
    let h: SummaryHeader = serde_json::from_str(&first)?;
    if h.format != SUMMARY_FORMAT || h.version != SUMMARY_VERSION {
        return Err(PipelineError::Schema(format!("{}: {} v{}", path.display(), h.format, h.version)));
    }
    let mut instances = Vec::new();
    for line in lines {
        instances.push(serde_json::from_str(&line?)?);
    }
    Ok(SummarySet { config: h.config, instances, rejections: h.rejections, dropped: h.dropped })
}

/// [`build_summaries`] memoized in `cache_dir` under the config digest.
pub fn build_summaries_cached(cfg: &DatasetConfig, cache_dir: &Path) -> Result<SummarySet, PipelineError> {
    let path = cache_dir.join(format!("summaries-{}.jsonl", cfg.digest()));
    if path.exists() {
        let set = read_summaries(&path)?;
        if set.config == *cfg {
            log::info!("using cached summaries {}", path.display());
            return Ok(set);
        }
    }
    let set = build_summaries(cfg)?;
    std::fs::create_dir_all(cache_dir)?;
    let tmp = path.with_extension("tmp");
    write_summaries(&set, &tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec_hash: String,
    pub n_arrivals: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub role: Role,
    pub split: Split,
    pub input: Vec<f64>,
    pub label: Vec<f64>,
    pub covariates: Covariates,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub dims: DescriptorDims,
    pub pmf_len: usize,
    pub n_arrivals: u64,
    pub seed: u64,
    pub counts: SplitCounts,
    pub rejections: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn of(instances: &[InstanceSummary]) -> Self {
        let mut c = SplitCounts::default();
        for s in instances {
            match s.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

/// Input and label of `role` for one instance at `dims` (within the stored dims).
pub fn role_vectors(s: &InstanceSummary, role: Role, dims: DescriptorDims) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let d1 = s.departure[0].project(dims)?.to_vector();
    let svc2 = &s.service_logm[1][..dims.n];
    Ok(match role {
        Role::Nn1 => (concat(&s.arrival_logm[..dims.n], &s.service_logm[0][..dims.n]), d1),
        Role::Nn2 => (concat(&d1, svc2), s.pmf.clone()),
        Role::Nn3 => (concat(&d1, svc2), s.departure[1].project(dims)?.to_vector()),
    })
}

/// Grouping covariates of the station a role predicts.
pub fn role_covariates(s: &InstanceSummary, role: Role) -> Covariates {
    match role {
        Role::Nn1 => Covariates {
            utilization: s.service_mean[0],
            arrival_scv: s.arrival_scv,
            service_scv: s.service_scv[0],
            rho111: 0.0,
        },
        _ => Covariates {
            utilization: s.service_mean[1],
            arrival_scv: s.departure_scv[0],
            service_scv: s.service_scv[1],
            rho111: s.departure_rho111[0],
        },
    }
}

pub fn role_records(set: &SummarySet, role: Role, dims: DescriptorDims) -> Result<Vec<DatasetRecord>, PipelineError> {
    set.instances
        .iter()
        .map(|s| {
            let (input, label) = role_vectors(s, role, dims)?;
            Ok(DatasetRecord {
                role,
                split: s.split,
                input,
                label,
                covariates: role_covariates(s, role),
                provenance: Provenance {
                    seed: s.sim_seed,
                    spec_hash: s.spec_hash.clone(),
                    n_arrivals: set.config.n_arrivals,
                    index: s.index,
                },
            })
        })
        .collect()
}

/// Training matrices for one role and split straight from summaries.
pub fn role_dataset(set: &SummarySet, role: Role, dims: DescriptorDims, split: Split) -> Result<Dataset, PipelineError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in set.instances.iter().filter(|s| s.split == split) {
        let (x, y) = role_vectors(s, role, dims)?;
        xs.push(x);
        ys.push(y);
    }
    Ok(Dataset::from_rows(&xs, &ys)?)
}

pub fn records_dataset(records: &[DatasetRecord], split: Split) -> Result<Dataset, PipelineError> {
    let (xs, ys): (Vec<_>, Vec<_>) =
        records.iter().filter(|r| r.split == split).map(|r| (r.input.clone(), r.label.clone())).unzip();
    Ok(Dataset::from_rows(&xs, &ys)?)
}

pub fn dataset_path(dir: &Path, role: Role) -> PathBuf {
    dir.join(format!("{}.jsonl", role.name()))
}

/// Writes one JSON Lines file per role at `dims`; returns their paths.
pub fn write_datasets(set: &SummarySet, dims: DescriptorDims, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let counts = SplitCounts::of(&set.instances);
    let mut paths = Vec::new();
    for role in Role::ALL {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            role,
            dims,
            pmf_len: set.config.pmf_len,
            n_arrivals: set.config.n_arrivals,
            seed: set.config.seed,
            counts,
            rejections: set.rejections.len(),
            dropped: set.dropped.len(),
        };
        let path = dataset_path(dir, role);
        let mut w = BufWriter::new(std::fs::File::create(&path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in role_records(set, role, dims)? {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), PipelineError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| PipelineError::Schema(format!("{}: empty file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| PipelineError::Schema(format!("{}: bad header: {e}", path.display())))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(PipelineError::Schema(format!(
            "{}: expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let want_in = header.role.input_len(header.dims);
    let want_out = header.role.output_len(header.dims, header.pmf_len);
    let mut records = Vec::new();
    for line in lines {
        let r: DatasetRecord = serde_json::from_str(&line?)?;
        if r.role != header.role || r.input.len() != want_in || r.label.len() != want_out {
            return Err(PipelineError::Schema(format!("{}: record {} breaks the role contract", path.display(), records.len())));
        }
        records.push(r);
    }
    Ok((header, records))
}
