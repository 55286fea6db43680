//! A small dense network for scalar regression, trained with Adam.
//!
//! Networks map a state feature vector to one value. Inputs are standardized
//! with statistics frozen at training time and stored inside the network, so
//! a serialized network is self-contained. Hidden layers use ReLU; the
//! output is linear. Everything is f64 and deterministic given the training
//! RNG.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("training data is empty")]
    EmptyDataset,
    #[error("target count {targets} does not match row count {rows}")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub(crate) w: Array2<f64>,
    pub(crate) b: Array1<f64>,
}

/// Feed-forward ReLU network with a linear scalar output and built-in input
/// standardization.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub(crate) layers: Vec<Layer>,
    pub(crate) x_mean: Array1<f64>,
    pub(crate) x_std: Array1<f64>,
}

/// Training hyperparameters. `stop_mse` ends training once the full-dataset
/// mean squared error drops below it; `plateau_patience`, when set, ends
/// training after that many epochs without a meaningful new best MSE
/// (improvements below one part in 1e4 of the current best do not count).
/// The best-MSE parameters seen are the ones returned.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_mse: f64,
    pub plateau_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 1024,
            max_epochs: 10_000,
            stop_mse: 0.1,
            plateau_patience: None,
        }
    }
}

/// A trained network plus how training went.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: Mlp,
    pub epochs: usize,
    pub mse: f64,
}

impl Mlp {
    /// He-normal initialization for the given layer sizes.
    fn init(dims: &[usize], x_mean: Array1<f64>, x_std: Array1<f64>, rng: &mut ChaCha8Rng) -> Mlp {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Mlp {
            layers,
            x_mean,
            x_std,
        }
    }

    pub(crate) fn from_parts(layers: Vec<Layer>, x_mean: Array1<f64>, x_std: Array1<f64>) -> Mlp {
        Mlp {
            layers,
            x_mean,
            x_std,
        }
    }

    /// Layer sizes, input through output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w.ncols()];
        for layer in &self.layers {
            dims.push(layer.w.nrows());
        }
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    fn standardize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            row -= &self.x_mean;
            row /= &self.x_std;
        }
        out
    }

    /// Batched forward pass on raw (unstandardized) inputs; one value per
    /// row.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut a = self.standardize(&x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a.index_axis(Axis(1), 0).to_owned()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        self.predict_batch(view)[0]
    }

    /// Full-dataset MSE against `y`, in prediction chunks to bound scratch
    /// memory.
    fn dataset_mse(&self, x_std: &Array2<f64>, y: &Array1<f64>) -> f64 {
        const CHUNK: usize = 8192;
        let n = x_std.nrows();
        let mut acc = 0.0;
        let mut row = 0;
        while row < n {
            let hi = (row + CHUNK).min(n);
            let mut a = x_std.slice(ndarray::s![row..hi, ..]).to_owned();
            let last = self.layers.len() - 1;
            for (l, layer) in self.layers.iter().enumerate() {
                let mut z = a.dot(&layer.w.t());
                z += &layer.b;
                if l < last {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                a = z;
            }
            for (i, r) in (row..hi).enumerate() {
                let d = a[[i, 0]] - y[r];
                acc += d * d;
            }
            row = hi;
        }
        acc / n as f64
    }

    /// Mean squared error and parameter gradients on one batch of already
    /// standardized inputs.
    pub(crate) fn mse_and_grads(
        &self,
        x_std: &Array2<f64>,
        y: &Array1<f64>,
    ) -> (f64, Vec<Layer>) {
        let n = x_std.nrows();
        let last = self.layers.len() - 1;
        // Forward, keeping pre-activations and activations.
        let mut acts: Vec<Array2<f64>> = vec![x_std.clone()];
        let mut zs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t());
            z += &layer.b;
            zs.push(z.clone());
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        let pred = acts[last + 1].index_axis(Axis(1), 0);
        let mut mse = 0.0;
        let mut dz = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let d = pred[i] - y[i];
            mse += d * d;
            dz[[i, 0]] = 2.0 * d / n as f64;
        }
        mse /= n as f64;
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|layer| Layer {
                w: Array2::zeros(layer.w.dim()),
                b: Array1::zeros(layer.b.len()),
            })
            .collect();
        for l in (0..self.layers.len()).rev() {
            grads[l].w = dz.t().dot(&acts[l]);
            grads[l].b = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&self.layers[l].w);
                da.zip_mut_with(&zs[l - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = da;
            }
        }
        (mse, grads)
    }
}

/// Trains a fresh network on `(x, y)` with the given hidden layer sizes.
/// Initialization, shuffling, and therefore the result are fully determined
/// by `rng`.
pub fn train(
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    hidden: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trained, NnError> {
    let n = x.nrows();
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    if y.len() != n {
        return Err(NnError::ShapeMismatch {
            rows: n,
            targets: y.len(),
        });
    }
    let d = x.ncols();
    let mut x_mean = Array1::zeros(d);
    let mut x_std = Array1::zeros(d);
    for j in 0..d {
        let col = x.index_axis(Axis(1), j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        x_mean[j] = mean;
        // Constant features pass through unscaled.
        x_std[j] = if var.sqrt() < 1e-8 { 1.0 } else { var.sqrt() };
    }
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut net = Mlp::init(&dims, x_mean, x_std, rng);
    let x_std_data = net.standardize(&x);

    // Adam state, one moment pair per parameter tensor.
    let mut m: Vec<Layer> = net
        .layers
        .iter()
        .map(|layer| Layer {
            w: Array2::zeros(layer.w.dim()),
            b: Array1::zeros(layer.b.len()),
        })
        .collect();
    let mut v: Vec<Layer> = m.clone();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut t = 0u32;

    let batch = cfg.batch_size.max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_mse = net.dataset_mse(&x_std_data, y);
    let mut best_net = net.clone();
    let mut best_epoch = 0usize;
    let mut epochs = 0usize;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(rng);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let idx = &order[start..end];
            let mut bx = Array2::zeros((idx.len(), d));
            let mut by = Array1::zeros(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                bx.row_mut(row).assign(&x_std_data.row(i));
                by[row] = y[i];
            }
            let (batch_mse, grads) = net.mse_and_grads(&bx, &by);
            if !batch_mse.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch });
            }
            t += 1;
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for l in 0..net.layers.len() {
                adam_update(
                    &mut net.layers[l].w,
                    &grads[l].w,
                    &mut m[l].w,
                    &mut v[l].w,
                    cfg.learning_rate,
                    beta1,
                    beta2,
                    eps,
                    bc1,
                    bc2,
                );
                adam_update_1d(
                    &mut net.layers[l].b,
                    &grads[l].b,
                    &mut m[l].b,
                    &mut v[l].b,
                    cfg.learning_rate,
                    beta1,
                    beta2,
                    eps,
                    bc1,
                    bc2,
                );
            }
            start = end;
        }
        let mse = net.dataset_mse(&x_std_data, y);
        if !mse.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        // Micro-improvements still update the returned snapshot but do not
        // reset the plateau clock; the reset threshold scales with the loss.
        if mse < best_mse {
            if mse < best_mse - 1e-4 * best_mse.abs().max(1.0) {
                best_epoch = epoch;
            }
            best_mse = mse;
            best_net = net.clone();
        }
        if mse < cfg.stop_mse {
            return Ok(Trained {
                net,
                epochs: epoch,
                mse,
            });
        }
        if let Some(patience) = cfg.plateau_patience {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }
    Ok(Trained {
        net: best_net,
        epochs,
        mse: best_mse,
    })
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    w: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(w)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|w, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        });
}

#[allow(clippy::too_many_arguments)]
fn adam_update_1d(
    w: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(w)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|w, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        });
}
