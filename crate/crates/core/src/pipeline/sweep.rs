//! Descriptor-dimension sweep and batch inference timing.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::dataset::{role_dataset, Split, SummarySet};
use super::PipelineError;
use crate::descriptors::DescriptorDims;
use crate::nn::{random_search, train, Head, Role, SearchSpace, TrainConfig};
use crate::phdist::{generate_library, GenConfig};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub input_dim: usize,
    pub val_sae: f64,
    /// Configuration that produced `val_sae`.
    pub config: TrainConfig,
}

/// Every `(n, n1, n2)` in the inclusive ranges.
pub fn dims_grid(n: (usize, usize), n1: (usize, usize), n2: (usize, usize)) -> Result<Vec<DescriptorDims>, PipelineError> {
    let mut out = Vec::new();
    for a in n.0..=n.1 {
        for b in n1.0..=n1.1 {
            for c in n2.0..=n2.1 {
                out.push(DescriptorDims::new(a, b, c)?);
            }
        }
    }
    Ok(out)
}

/// Trains an NN2 per cell on the same simulated instances and reports its
/// validation SAE. With `budget > 1` each cell runs its own random search
/// around `cfg` (seeded per cell).
pub fn sweep_dims(set: &SummarySet, cells: &[DescriptorDims], cfg: &TrainConfig, budget: usize) -> Result<Vec<SweepCell>, PipelineError> {
    if budget == 0 {
        return Err(PipelineError::Config("budget must be at least 1".into()));
    }
    for d in cells {
        if !d.is_within(&set.config.dims) {
            return Err(PipelineError::Config(format!("cell {d} exceeds simulated dims {}", set.config.dims)));
        }
    }
    cells
        .par_iter()
        .map(|&dims| {
            let tr = role_dataset(set, Role::Nn2, dims, Split::Train)?;
            let va = role_dataset(set, Role::Nn2, dims, Split::Val)?;
            let fit = |c: &TrainConfig| train(&tr, &va, c, Head::Softmax, dims.n).map(|o| o.best_val);
            let (config, val_sae) = if budget == 1 {
                (cfg.clone(), fit(cfg)?)
            } else {
                let seed = derive_seed(cfg.seed, &[dims.n as u64, dims.n1 as u64, dims.n2 as u64]);
                let r = random_search(&SearchSpace::default(), budget, fit, seed)?;
                (r.best, r.best_val)
            };
            Ok(SweepCell { n: dims.n, n1: dims.n1, n2: dims.n2, input_dim: tr.inputs.ncols(), val_sae, config })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("n,n1,n2,input_dim,val_sae\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{},{:.8}\n", c.n, c.n1, c.n2, c.input_dim, c.val_sae));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub network: String,
    pub instances: usize,
    pub seconds: f64,
}

/// Times one batched forward pass per network on realistic inputs: analytic
/// log-moments of random PH arrivals and services, with descriptors produced
/// by the bundle itself.
pub fn measure_runtime(bundle: &ModelBundle, batch: usize, seed: u64) -> Result<Vec<RuntimeRow>, PipelineError> {
    if batch == 0 {
        return Err(PipelineError::Config("batch must be positive".into()));
    }
    let n = bundle.dims.n;
    let arrivals = generate_library(&GenConfig::new(batch, 0.01, 15.0, 1.0, derive_seed(seed, &[0])))?;
    let services = generate_library(&GenConfig::new(2 * batch, 0.01, 15.0, 1.0, derive_seed(seed, &[1])))?;
    let mut rng = stream(seed, 2);
    let mut x1 = ndarray::Array2::zeros((batch, 2 * n));
    let mut svc2 = ndarray::Array2::zeros((batch, n));
    for i in 0..batch {
        let s1 = services[2 * i].scale_to_mean(rng.random_range(0.05..0.9))?;
        let s2 = services[2 * i + 1].scale_to_mean(rng.random_range(0.05..0.9))?;
        let row: Vec<f64> = arrivals[i].log_moments(n).into_iter().chain(s1.log_moments(n)).collect();
        x1.row_mut(i).assign(&ndarray::Array1::from(row));
        svc2.row_mut(i).assign(&ndarray::Array1::from(s2.log_moments(n)));
    }
    let mut rows = Vec::new();
    let t = Instant::now();
    let desc = bundle.nn1.forward_batch(x1.view())?;
    rows.push(RuntimeRow { network: "NN1".into(), instances: batch, seconds: t.elapsed().as_secs_f64() });
    let x2 = ndarray::concatenate(ndarray::Axis(1), &[desc.view(), svc2.view()]).expect("same rows");
    let t = Instant::now();
    let _ = bundle.nn2.forward_batch(x2.view())?;
    rows.push(RuntimeRow { network: "NN2".into(), instances: batch, seconds: t.elapsed().as_secs_f64() });
    let t = Instant::now();
    let _ = bundle.nn3.forward_batch(x2.view())?;
    rows.push(RuntimeRow { network: "NN3".into(), instances: batch, seconds: t.elapsed().as_secs_f64() });
    Ok(rows)
}

/// `Network & Number of instances & Runtimes` table.
pub fn runtime_table(rows: &[RuntimeRow]) -> String {
    let mut out = String::from("Network & Number of instances & Runtimes \\\\\n");
    for r in rows {
        out.push_str(&format!("{} & {} & {:.4} \\\\\n", r.network, r.instances, r.seconds));
    }
    out
}
