//! Mini-batch AdamW training and random hyperparameter search.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gradients, Head, Loss, MlpModel, NnError, Role};
use crate::metrics::sae;
use crate::rng::{derive_seed, stream};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub const LEARNING_RATES: [f64; 4] = [0.01, 0.05, 0.001, 0.0001];
pub const NEURONS: [usize; 8] = [50, 70, 100, 150, 200, 300, 350, 600];
pub const BATCH_SIZES: [usize; 4] = [64, 128, 256, 512];
pub const WEIGHT_DECAYS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Hidden layer widths; the layer count is `hidden.len()`.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Moment/autocorrelation mix of the descriptor loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Sum the descriptor loss within blocks instead of averaging.
    #[serde(default)]
    pub loss_sum: bool,
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}

/// Reference architecture with mid-range optimizer settings.
pub fn default_config(role: Role, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.001,
        epochs: 100,
        hidden: role.default_hidden(),
        batch_size: 128,
        weight_decay: 1e-5,
        alpha: 0.5,
        loss_sum: false,
        seed,
    }
}

impl TrainConfig {
    /// Checks that every field lies in the tuning state space.
    pub fn validate_search_space(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if !LEARNING_RATES.contains(&self.learning_rate) {
            return bad(format!("learning_rate {} not in {:?}", self.learning_rate, LEARNING_RATES));
        }
        if !(100..=350).contains(&self.epochs) {
            return bad(format!("epochs {} not in [100, 350]", self.epochs));
        }
        if !(1..=10).contains(&self.hidden.len()) {
            return bad(format!("{} hidden layers not in [1, 10]", self.hidden.len()));
        }
        if let Some(w) = self.hidden.iter().find(|w| !NEURONS.contains(w)) {
            return bad(format!("hidden width {w} not in {NEURONS:?}"));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch_size {} not in {:?}", self.batch_size, BATCH_SIZES));
        }
        if !WEIGHT_DECAYS.contains(&self.weight_decay) {
            return bad(format!("weight_decay {} not in {:?}", self.weight_decay, WEIGHT_DECAYS));
        }
        self.validate()
    }

    /// Minimal sanity checks used by [`train`].
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs > 0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.alpha)
            && self.hidden.iter().all(|&w| w > 0);
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("{self:?}")))
        }
    }
}

/// Feature matrix and label matrix, one instance per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, NnError> {
        if inputs.nrows() != targets.nrows() {
            return Err(NnError::Dim { expected: inputs.nrows(), got: targets.nrows() });
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self, NnError> {
        let to_mat = |rows: &[Vec<f64>]| -> Result<Array2<f64>, NnError> {
            let w = rows.first().map_or(0, |r| r.len());
            let mut flat = Vec::with_capacity(rows.len() * w);
            for r in rows {
                if r.len() != w {
                    return Err(NnError::Dim { expected: w, got: r.len() });
                }
                flat.extend_from_slice(r);
            }
            Ok(Array2::from_shape_vec((rows.len(), w), flat).expect("shape"))
        };
        Self::new(to_mat(inputs)?, to_mat(targets)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub model: MlpModel,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn loss_for(head: Head, n_moments: usize, cfg: &TrainConfig) -> Loss {
    match head {
        Head::Softmax => Loss::Pmf,
        Head::Identity => Loss::Depart { n_moments, alpha: cfg.alpha, sum: cfg.loss_sum },
    }
}

/// Validation metric: SAE for PMF heads, the training loss otherwise.
pub fn validation_metric(model: &MlpModel, data: &Dataset, loss: &Loss) -> Result<f64, NnError> {
    let pred = predict_chunked(model, data.inputs.view())?;
    Ok(match loss {
        Loss::Pmf => {
            let p: Vec<_> = pred.rows().into_iter().map(|r| r.to_vec()).collect();
            let t: Vec<_> = data.targets.rows().into_iter().map(|r| r.to_vec()).collect();
            sae(&t, &p).expect("equal shapes")
        }
        l => l.value(pred.view(), data.targets.view()),
    })
}

fn predict_chunked(model: &MlpModel, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
    let mut out = Array2::zeros((inputs.nrows(), model.output_len()));
    for start in (0..inputs.nrows()).step_by(1024) {
        let end = (start + 1024).min(inputs.nrows());
        let y = model.forward_batch(inputs.slice(ndarray::s![start..end, ..]))?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&y);
    }
    Ok(out)
}

struct Adam {
    mw: Vec<Array2<f64>>,
    vw: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        Adam {
            mw: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            vw: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            mb: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            vb: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, g: &super::Gradients, lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for l in 0..model.weights.len() {
            ndarray::Zip::from(&mut model.weights[l])
                .and(&mut self.mw[l])
                .and(&mut self.vw[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, &gr| {
                    *m = BETA1 * *m + (1.0 - BETA1) * gr;
                    *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + EPS) + wd * *p);
                });
            ndarray::Zip::from(&mut model.biases[l])
                .and(&mut self.mb[l])
                .and(&mut self.vb[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, &gr| {
                    *m = BETA1 * *m + (1.0 - BETA1) * gr;
                    *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                });
        }
    }
}

/// Trains a fresh network of shape `input -> cfg.hidden -> output`.
///
/// `n_moments` is the log-moment block length of descriptor targets and is
/// ignored for softmax heads. Deterministic given `cfg.seed`.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    head: Head,
    n_moments: usize,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NnError::Empty);
    }
    let (d_in, d_out) = (train_set.inputs.ncols(), train_set.targets.ncols());
    if val_set.inputs.ncols() != d_in || val_set.targets.ncols() != d_out {
        return Err(NnError::Dim { expected: d_in, got: val_set.inputs.ncols() });
    }
    if head == Head::Identity && n_moments > d_out {
        return Err(NnError::Dim { expected: d_out, got: n_moments });
    }
    let mut dims = vec![d_in];
    dims.extend(&cfg.hidden);
    dims.push(d_out);
    let mut model = MlpModel::init(&dims, head, &mut stream(cfg.seed, 0))?;
    model.meta.seed = cfg.seed;
    model.fit_standardizer(train_set.inputs.view())?;
    let loss = loss_for(head, n_moments, cfg);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = stream(cfg.seed, 1);

    let mut best = (validation_metric(&model, val_set, &loss)?, 0usize, model.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.select(chunk);
            let (v, g) = gradients(&model, x.view(), y.view(), &loss)?;
            if !v.is_finite() {
                return Err(NnError::NonFinite { epoch, batch: bi, loss: v });
            }
            loss_sum += v * chunk.len() as f64;
            adam.step(&mut model, &g, cfg.learning_rate, cfg.weight_decay);
        }
        let val = validation_metric(&model, val_set, &loss)?;
        if !val.is_finite() {
            return Err(NnError::NonFinite { epoch, batch: usize::MAX, loss: val });
        }
        let train_loss = loss_sum / train_set.len() as f64;
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val:.6}");
        curve.push(EpochStats { epoch, train_loss, val_metric: val });
        if val < best.0 {
            best = (val, epoch, model.clone());
        }
    }
    Ok(TrainOutcome { model: best.2, curve, best_epoch: best.1, best_val: best.0 })
}

/// Ranges sampled by [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub epochs: (usize, usize),
    pub hidden_layers: (usize, usize),
    pub neurons: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub weight_decays: Vec<f64>,
    pub alpha: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rates: LEARNING_RATES.to_vec(),
            epochs: (100, 350),
            hidden_layers: (1, 10),
            neurons: NEURONS.to_vec(),
            batch_sizes: BATCH_SIZES.to_vec(),
            weight_decays: WEIGHT_DECAYS.to_vec(),
            alpha: (0.0, 1.0),
        }
    }
}

impl SearchSpace {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> TrainConfig {
        let pick_f = |rng: &mut R, v: &[f64]| v[rng.random_range(0..v.len())];
        let learning_rate = pick_f(rng, &self.learning_rates);
        let epochs = rng.random_range(self.epochs.0..=self.epochs.1);
        let layers = rng.random_range(self.hidden_layers.0..=self.hidden_layers.1);
        let hidden = (0..layers).map(|_| self.neurons[rng.random_range(0..self.neurons.len())]).collect();
        let batch_size = self.batch_sizes[rng.random_range(0..self.batch_sizes.len())];
        let weight_decay = pick_f(rng, &self.weight_decays);
        let alpha = self.alpha.0 + (self.alpha.1 - self.alpha.0) * rng.random::<f64>();
        TrainConfig { learning_rate, epochs, hidden, batch_size, weight_decay, alpha, loss_sum: false, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderEntry {
    pub trial: usize,
    pub config: TrainConfig,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_val: f64,
    /// Every trial, ascending by validation metric (ties by trial index).
    pub leaderboard: Vec<LeaderEntry>,
}

/// Samples `budget` configurations and evaluates them with `train_fn`, which
/// returns the validation metric. Trials run in parallel; results are
/// independent of the thread count.
pub fn random_search<F>(space: &SearchSpace, budget: usize, train_fn: F, seed: u64) -> Result<SearchResult, NnError>
where
    F: Fn(&TrainConfig) -> Result<f64, NnError> + Sync,
{
    if budget == 0 {
        return Err(NnError::Config("budget must be at least 1".into()));
    }
    let mut rng = stream(seed, 0);
    let configs: Vec<TrainConfig> =
        (0..budget).map(|t| space.sample(&mut rng, derive_seed(seed, &[t as u64]))).collect();
    let metrics: Vec<f64> = configs.par_iter().map(&train_fn).collect::<Result<_, _>>()?;
    let mut leaderboard: Vec<LeaderEntry> = configs
        .into_iter()
        .zip(metrics)
        .enumerate()
        .map(|(trial, (config, val_metric))| LeaderEntry { trial, config, val_metric })
        .collect();
    leaderboard.sort_by(|a, b| a.val_metric.total_cmp(&b.val_metric).then(a.trial.cmp(&b.trial)));
    Ok(SearchResult { best: leaderboard[0].config.clone(), best_val: leaderboard[0].val_metric, leaderboard })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pmf_data(n: usize, seed: u64) -> Dataset {
        // geometric PMFs parameterized by the single input
        let mut rng = stream(seed, 9);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let r: f64 = 0.1 + 0.7 * rng.random::<f64>();
            let mut p: Vec<f64> = (0..8).map(|l| (1.0 - r) * r.powi(l)).collect();
            p[7] += r.powi(8);
            xs.push(vec![r, r * r]);
            ys.push(p);
        }
        Dataset::from_rows(&xs, &ys).unwrap()
    }

    #[test]
    fn memorizes_one_example() {
        let x = vec![vec![0.3, -1.0, 2.0]; 16];
        let y = vec![vec![0.5, -0.2, 1.5, 0.1]; 16];
        let d = Dataset::from_rows(&x, &y).unwrap();
        let cfg = TrainConfig { hidden: vec![20], epochs: 350, batch_size: 16, learning_rate: 0.01, ..default_config(Role::Nn1, 1) };
        let out = train(&d, &d, &cfg, Head::Identity, 2).unwrap();
        assert!(out.best_val < 1e-3, "{}", out.best_val);
    }

    #[test]
    fn deterministic_and_beats_uniform() {
        let tr = toy_pmf_data(400, 1);
        let va = toy_pmf_data(100, 2);
        let cfg = TrainConfig { hidden: vec![30, 30], epochs: 100, batch_size: 64, learning_rate: 0.01, ..default_config(Role::Nn2, 5) };
        let a = train(&tr, &va, &cfg, Head::Softmax, 0).unwrap();
        let b = train(&tr, &va, &cfg, Head::Softmax, 0).unwrap();
        assert_eq!(a.best_val, b.best_val);
        assert_eq!(a.model, b.model);
        let uniform = vec![vec![1.0 / 8.0; 8]; va.len()];
        let truth: Vec<Vec<f64>> = va.targets.rows().into_iter().map(|r| r.to_vec()).collect();
        let base = sae(&truth, &uniform).unwrap();
        assert!(a.best_val < base / 3.0, "{} vs {}", a.best_val, base);
    }

    #[test]
    fn search_space_validation() {
        let mut c = default_config(Role::Nn2, 0);
        c.validate_search_space().unwrap();
        c.epochs = 99;
        assert!(c.validate_search_space().is_err());
        let mut c = default_config(Role::Nn1, 0);
        c.hidden = vec![51];
        assert!(c.validate_search_space().is_err());
        let space = SearchSpace::default();
        let mut rng = stream(1, 1);
        for _ in 0..200 {
            space.sample(&mut rng, 0).validate_search_space().unwrap();
        }
    }

    #[test]
    fn search_is_deterministic() {
        let f = |c: &TrainConfig| Ok(c.learning_rate * c.epochs as f64 + c.hidden.len() as f64);
        let a = random_search(&SearchSpace::default(), 10, f, 4).unwrap();
        let b = random_search(&SearchSpace::default(), 10, f, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.leaderboard.len(), 10);
        let one = random_search(&SearchSpace::default(), 1, f, 4).unwrap();
        assert_eq!(one.best, one.leaderboard[0].config);
        assert!(random_search(&SearchSpace::default(), 0, f, 4).is_err());
    }
}
