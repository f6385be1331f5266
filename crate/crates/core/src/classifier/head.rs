//! MLP head: affine, batch normalization, rectifier, dropout, affine,
//! log-softmax.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::rng::rng_for;
use crate::tensor::Matrix;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// hidden x input
    pub w1: Matrix,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// classes x hidden
    pub w2: Matrix,
    pub b2: Array1<f64>,
}

impl Head {
    pub fn init(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[]);
        let mut uniform = |rows: usize, cols: usize| {
            // He-style scaling for the rectified hidden layer
            let a = (6.0 / cols.max(1) as f64).sqrt();
            Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
        };
        Head {
            w1: uniform(hidden, input),
            b1: Array1::zeros(hidden),
            gamma: Array1::ones(hidden),
            beta: Array1::zeros(hidden),
            running_mean: Array1::zeros(hidden),
            running_var: Array1::ones(hidden),
            w2: uniform(classes, hidden),
            b2: Array1::zeros(classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Head {
            w1: Matrix::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            running_mean: Array1::zeros(self.running_mean.len()),
            running_var: Array1::zeros(self.running_var.len()),
            w2: Matrix::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadMode {
    /// Batch statistics and dropout with a mask drawn from `dropout_seed`.
    Train { dropout: f64, dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Matrix,
    normalized: Matrix,
    inv_std: Array1<f64>,
    affine_out: Matrix,
    mask: Matrix,
    hidden_out: Matrix,
    pub log_probs: Matrix,
    batch_stats: bool,
    pub batch_mean: Array1<f64>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var: Array1<f64>,
}

impl HeadCache {
    /// Rectifier pattern of the hidden layer.
    pub fn signature(&self) -> impl Iterator<Item = u32> + '_ {
        self.affine_out.iter().map(|y| u32::from(*y > 0.0))
    }
}

pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

impl Head {
    /// Batch statistics need at least two rows; a singleton batch falls back
    /// to the running statistics even in training mode.
    pub fn forward(&self, input: &Matrix, mode: HeadMode) -> HeadCache {
        let b = input.nrows();
        let hidden = self.hidden_dim();
        let mut pre = input.dot(&self.w1.t());
        pre += &self.b1;

        let batch_stats = matches!(mode, HeadMode::Train { .. }) && b >= 2;
        let (mean, var_biased) = if batch_stats {
            let mean = pre.mean_axis(Axis(0)).unwrap();
            let var = pre.var_axis(Axis(0), 0.0);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var_biased.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
        let normalized = (&pre - &mean) * &inv_std;
        let affine_out = &normalized * &self.gamma + &self.beta;
        let batch_var = if batch_stats {
            var_biased.mapv(|v| v * b as f64 / (b - 1) as f64)
        } else {
            Array1::zeros(hidden)
        };

        let mask = match mode {
            HeadMode::Train { dropout, dropout_seed } if dropout > 0.0 => {
                let mut rng = rng_for(dropout_seed, &[]);
                let keep = 1.0 / (1.0 - dropout);
                Matrix::from_shape_simple_fn((b, hidden), || {
                    if rng.gen::<f64>() < dropout {
                        0.0
                    } else {
                        keep
                    }
                })
            }
            _ => Matrix::ones((b, hidden)),
        };
        let hidden_out = affine_out.mapv(|y| y.max(0.0)) * &mask;
        let mut logits = hidden_out.dot(&self.w2.t());
        logits += &self.b2;
        let mut log_probs = Matrix::zeros(logits.dim());
        for (l, mut o) in logits.outer_iter().zip(log_probs.outer_iter_mut()) {
            log_softmax(l.as_slice().unwrap(), o.as_slice_mut().unwrap());
        }
        HeadCache {
            input: input.clone(),
            normalized,
            inv_std,
            affine_out,
            mask,
            hidden_out,
            log_probs,
            batch_stats,
            batch_mean: mean,
            batch_var,
        }
    }

    /// Gradients of the mean negative log-likelihood of `labels`. Returns
    /// the loss, the parameter gradients and the gradient with respect to the
    /// head input.
    pub fn backward(&self, cache: &HeadCache, labels: &[usize]) -> (f64, Head, Matrix) {
        let b = labels.len();
        let scale = 1.0 / b as f64;
        let mut loss = 0.0;
        let mut dlogits = cache.log_probs.mapv(f64::exp);
        for (i, &y) in labels.iter().enumerate() {
            loss -= cache.log_probs[[i, y]];
            dlogits[[i, y]] -= 1.0;
        }
        dlogits *= scale;
        loss *= scale;

        let mut grads = self.zeros_like();
        grads.w2 = dlogits.t().dot(&cache.hidden_out);
        grads.b2 = dlogits.sum_axis(Axis(0));
        let mut dy = dlogits.dot(&self.w2) * &cache.mask;
        ndarray::Zip::from(&mut dy)
            .and(&cache.affine_out)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
        grads.gamma = (&dy * &cache.normalized).sum_axis(Axis(0));
        grads.beta = dy.sum_axis(Axis(0));
        let dnorm = &dy * &self.gamma;
        let dpre = if cache.batch_stats {
            let sum = dnorm.sum_axis(Axis(0));
            let sum_xhat = (&dnorm * &cache.normalized).sum_axis(Axis(0));
            let centered = &dnorm * b as f64 - &sum - &cache.normalized * &sum_xhat;
            centered * &cache.inv_std * scale
        } else {
            dnorm * &cache.inv_std
        };
        grads.w1 = dpre.t().dot(&cache.input);
        grads.b1 = dpre.sum_axis(Axis(0));
        let dinput = dpre.dot(&self.w1);
        (loss, grads, dinput)
    }

    pub fn update_running_stats(&mut self, cache: &HeadCache) {
        if !cache.batch_stats {
            return;
        }
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &cache.batch_mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &cache.batch_var * BN_MOMENTUM;
    }
}
