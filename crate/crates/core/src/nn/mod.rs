//! Feed-forward networks with ReLU hidden layers, the two training losses and
//! exact backpropagation.

mod io;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::DescriptorDims;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use train::{
    default_config, random_search, train, Dataset, EpochStats, LeaderEntry, SearchResult, SearchSpace, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    Empty,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Identity,
    Softmax,
}

/// The three networks of the inference chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Nn1,
    Nn2,
    Nn3,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Nn1, Role::Nn2, Role::Nn3];

    pub fn name(self) -> &'static str {
        match self {
            Role::Nn1 => "nn1",
            Role::Nn2 => "nn2",
            Role::Nn3 => "nn3",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Role::Nn2 => Head::Softmax,
            _ => Head::Identity,
        }
    }

    pub fn input_len(self, dims: DescriptorDims) -> usize {
        match self {
            Role::Nn1 => 2 * dims.n,
            _ => dims.len() + dims.n,
        }
    }

    pub fn output_len(self, dims: DescriptorDims, pmf_len: usize) -> usize {
        match self {
            Role::Nn2 => pmf_len,
            _ => dims.len(),
        }
    }

    /// Hidden widths of the reference architectures.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Role::Nn2 => vec![50, 70, 200, 350, 600],
            _ => vec![50, 70, 50],
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nn1" => Ok(Role::Nn1),
            "nn2" => Ok(Role::Nn2),
            "nn3" => Ok(Role::Nn3),
            other => Err(format!("unknown role {other:?} (expected nn1, nn2 or nn3)")),
        }
    }
}

/// Provenance carried in the model file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub role: Option<Role>,
    pub dims: Option<DescriptorDims>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` has shape `(layer_dims[l], layer_dims[l + 1])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub head: Head,
    /// Per-feature standardization applied before the first layer.
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub meta: ModelMeta,
}

fn check_dims(layer_dims: &[usize]) -> Result<(), NnError> {
    if layer_dims.len() < 2 {
        return Err(NnError::Arch("need at least input and output dims".into()));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(NnError::Arch(format!("zero-width layer in {layer_dims:?}")));
    }
    Ok(())
}

impl MlpModel {
    /// All-zero parameters and identity standardization.
    pub fn zeros(layer_dims: &[usize], head: Head) -> Result<Self, NnError> {
        check_dims(layer_dims)?;
        let weights = layer_dims.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            head,
            input_mean: Array1::zeros(layer_dims[0]),
            input_std: Array1::ones(layer_dims[0]),
            meta: ModelMeta::default(),
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], head: Head, rng: &mut R) -> Result<Self, NnError> {
        let mut m = Self::zeros(layer_dims, head)?;
        for w in &mut m.weights {
            let scale = (2.0 / w.nrows() as f64).sqrt();
            w.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(m)
    }

    pub fn input_len(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Sets the standardization from the rows of a training matrix.
    pub fn fit_standardizer(&mut self, inputs: ArrayView2<f64>) -> Result<(), NnError> {
        if inputs.ncols() != self.input_len() {
            return Err(NnError::Dim { expected: self.input_len(), got: inputs.ncols() });
        }
        if inputs.nrows() == 0 {
            return Err(NnError::Empty);
        }
        let mean = inputs.mean_axis(Axis(0)).unwrap();
        let std = inputs.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        self.input_mean = mean;
        self.input_std = std;
        Ok(())
    }

    fn standardize(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        (&inputs - &self.input_mean) / &self.input_std
    }

    /// Forward pass over a batch (one instance per row).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if inputs.ncols() != self.input_len() {
            return Err(NnError::Dim { expected: self.input_len(), got: inputs.ncols() });
        }
        let mut a = self.standardize(inputs);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w) + b;
            if l < last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        if self.head == Head::Softmax {
            softmax_rows(&mut a);
        }
        Ok(a)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Training objective attached to an output head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Loss {
    /// `alpha * MSE(log-moments) + (1 - alpha) * MSE(autocorrelations)`; with
    /// `sum` the squared errors are summed within each block instead of averaged.
    Depart { n_moments: usize, alpha: f64, sum: bool },
    /// Batch mean of `sum |p - q| + max |p - q|`.
    Pmf,
}

impl Loss {
    pub fn value(&self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        match *self {
            Loss::Depart { n_moments, alpha, sum } => loss_depart_impl(pred, target, alpha, n_moments, sum),
            Loss::Pmf => loss_pmf(pred, target),
        }
    }

    /// Gradient of the loss with respect to the network output.
    fn output_grad(&self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Array2<f64> {
        let b = pred.nrows() as f64;
        let mut g = Array2::zeros(pred.raw_dim());
        match *self {
            Loss::Depart { n_moments, alpha, sum } => {
                let n_auto = pred.ncols() - n_moments;
                let (wm, wa) = block_weights(alpha, n_moments, n_auto, sum);
                for ((i, j), gv) in g.indexed_iter_mut() {
                    let e = pred[[i, j]] - target[[i, j]];
                    let w = if j < n_moments { wm } else { wa };
                    *gv = 2.0 * w * e / b;
                }
            }
            Loss::Pmf => {
                for ((p, t), mut gr) in pred.rows().into_iter().zip(target.rows()).zip(g.rows_mut()) {
                    let mut arg = 0;
                    let mut best = f64::NEG_INFINITY;
                    for (l, (x, y)) in p.iter().zip(t.iter()).enumerate() {
                        let d = (x - y).abs();
                        gr[l] = sign(x - y) / b;
                        // strict comparison keeps the lowest tied index
                        if d > best {
                            best = d;
                            arg = l;
                        }
                    }
                    gr[arg] += sign(p[arg] - t[arg]) / b;
                }
            }
        }
        g
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn block_weights(alpha: f64, n_moments: usize, n_auto: usize, sum: bool) -> (f64, f64) {
    let per = |len: usize| if sum || len == 0 { 1.0 } else { 1.0 / len as f64 };
    (alpha * per(n_moments), (1.0 - alpha) * per(n_auto))
}

fn loss_depart_impl(pred: ArrayView2<f64>, target: ArrayView2<f64>, alpha: f64, n_moments: usize, sum: bool) -> f64 {
    let n_auto = pred.ncols() - n_moments;
    let (wm, wa) = block_weights(alpha, n_moments, n_auto, sum);
    let mut acc_m = 0.0;
    let mut acc_a = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        for (j, (x, y)) in p.iter().zip(t.iter()).enumerate() {
            let e2 = (x - y) * (x - y);
            if j < n_moments {
                acc_m += e2;
            } else {
                acc_a += e2;
            }
        }
    }
    (wm * acc_m + wa * acc_a) / pred.nrows() as f64
}

/// Descriptor loss with block means.
pub fn loss_depart(pred: ArrayView2<f64>, target: ArrayView2<f64>, alpha: f64, dims: DescriptorDims) -> f64 {
    loss_depart_impl(pred, target, alpha, dims.n, false)
}

/// Descriptor loss with block sums.
pub fn loss_depart_sum(pred: ArrayView2<f64>, target: ArrayView2<f64>, alpha: f64, dims: DescriptorDims) -> f64 {
    loss_depart_impl(pred, target, alpha, dims.n, true)
}

pub fn loss_pmf(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        let mut s = 0.0;
        let mut m: f64 = 0.0;
        for (x, y) in p.iter().zip(t.iter()) {
            let d = (x - y).abs();
            s += d;
            m = m.max(d);
        }
        total += s + m;
    }
    total / pred.nrows() as f64
}

/// Parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Loss value and its exact gradient for one batch.
pub fn gradients(
    model: &MlpModel,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss: &Loss,
) -> Result<(f64, Gradients), NnError> {
    if inputs.nrows() == 0 {
        return Err(NnError::Empty);
    }
    if inputs.ncols() != model.input_len() {
        return Err(NnError::Dim { expected: model.input_len(), got: inputs.ncols() });
    }
    if targets.ncols() != model.output_len() || targets.nrows() != inputs.nrows() {
        return Err(NnError::Dim { expected: model.output_len(), got: targets.ncols() });
    }
    let n_layers = model.weights.len();
    // activations[l] is the input to layer l
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(model.standardize(inputs));
    for (l, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let mut z = activations[l].dot(w) + b;
        if l + 1 < n_layers {
            z.mapv_inplace(relu);
        }
        activations.push(z);
    }
    let mut out = activations.pop().unwrap();
    if model.head == Head::Softmax {
        softmax_rows(&mut out);
    }
    let value = loss.value(out.view(), targets);
    let mut dz = loss.output_grad(out.view(), targets);
    if model.head == Head::Softmax {
        for (mut g, p) in dz.rows_mut().into_iter().zip(out.rows()) {
            let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            g.zip_mut_with(&p, |gi, &pi| *gi = pi * (*gi - dot));
        }
    }
    let mut gw = vec![Array2::zeros((0, 0)); n_layers];
    let mut gb = vec![Array1::zeros(0); n_layers];
    for l in (0..n_layers).rev() {
        let a = &activations[l];
        gw[l] = a.t().dot(&dz);
        gb[l] = dz.sum_axis(Axis(0));
        if l > 0 {
            let mut da = dz.dot(&model.weights[l].t());
            // a > 0 exactly where the ReLU was active
            da.zip_mut_with(a, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0
                }
            });
            dz = da;
        }
    }
    Ok((value, Gradients { weights: gw, biases: gb }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn zero_softmax_is_uniform() {
        let m = MlpModel::zeros(&[3, 5, 4], Head::Softmax).unwrap();
        let y = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        for v in y {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_layer_echoes() {
        let mut m = MlpModel::zeros(&[3, 3], Head::Identity).unwrap();
        m.weights[0] = Array2::eye(3);
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let p = array![[0.5, 0.5]];
        let t = array![[0.6, 0.4]];
        assert!((loss_pmf(p.view(), t.view()) - 0.3).abs() < 1e-12);
        let dims = DescriptorDims::new(2, 1, 1).unwrap();
        let pred = array![[0.1, 0.3, 0.2]];
        let tgt = array![[0.0, 0.0, 0.0]];
        assert!((loss_depart(pred.view(), tgt.view(), 0.5, dims) - 0.045).abs() < 1e-12);
        assert!((loss_depart(pred.view(), tgt.view(), 1.0, dims) - 0.05).abs() < 1e-12);
        assert_eq!(loss_depart(pred.view(), pred.view(), 0.3, dims), 0.0);
        assert!((loss_depart_sum(pred.view(), tgt.view(), 0.5, dims) - (0.05 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn pmf_tie_routes_to_lowest_index() {
        let m = MlpModel::zeros(&[1, 3], Head::Identity).unwrap();
        let x = array![[0.0]];
        // output is [0, 0, 0]; errors -0.2, -0.2, +0.1 tie at indices 0 and 1
        let t = array![[0.2, 0.2, -0.1]];
        let (_, g) = gradients(&m, x.view(), t.view(), &Loss::Pmf).unwrap();
        assert_eq!(g.biases[0].to_vec(), vec![-2.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let mut rng = stream(3, 0);
        let m = MlpModel::init(&[4, 6, 3], Head::Identity, &mut rng).unwrap();
        let x = array![[0.1, 0.2, -0.3, 1.0], [1.0, 0.0, 0.5, -0.5]];
        let y = m.forward_batch(x.view()).unwrap();
        let loss = Loss::Depart { n_moments: 2, alpha: 0.4, sum: false };
        let (v, g) = gradients(&m, x.view(), y.view(), &loss).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.weights.iter().all(|w| w.iter().all(|&x| x == 0.0)));
    }
}
