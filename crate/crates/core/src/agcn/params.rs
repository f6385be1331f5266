use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;
use crate::tensor::{visit_matrix, visit_matrix_mut, Matrix, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear layers; used to test gradients without kinks.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Subgradient 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Gaussian mixture over 2-D pseudo-coordinates with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmKernelParams {
    /// K x 2
    pub means: Matrix,
    /// K x 2, log of the diagonal covariance entries.
    pub log_diag_cov: Matrix,
    /// D x K, one mixture per output channel.
    pub mixing: Matrix,
}

impl GmmKernelParams {
    pub fn num_kernels(&self) -> usize {
        self.means.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.nrows();
        if k == 0 || self.means.ncols() != 2 || self.log_diag_cov.dim() != (k, 2) || self.mixing.ncols() != k {
            return Err(Error::Shape(format!(
                "kernel shapes means {:?}, log_diag_cov {:?}, mixing {:?}",
                self.means.dim(),
                self.log_diag_cov.dim(),
                self.mixing.dim()
            )));
        }
        let finite = |m: &Matrix| m.iter().all(|v| v.is_finite());
        if !(finite(&self.means) && finite(&self.mixing) && finite(&self.log_diag_cov)) {
            return Err(Error::Numerical("non-finite kernel parameter".into()));
        }
        if self.log_diag_cov.iter().any(|s| !(s.exp() > 0.0 && s.exp().is_finite())) {
            return Err(Error::Numerical("covariance underflow or overflow".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcnLayerParams {
    pub kernel: GmmKernelParams,
    /// D x F_in feature transform; row d feeds channel d.
    pub theta: Matrix,
}

impl AgcnLayerParams {
    pub fn in_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.mixing.nrows() != self.out_dim() {
            return Err(Error::Shape(format!(
                "mixing has {} rows, transform has {}",
                self.kernel.mixing.nrows(),
                self.out_dim()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        AgcnLayerParams {
            kernel: GmmKernelParams {
                means: Matrix::zeros(self.kernel.means.dim()),
                log_diag_cov: Matrix::zeros(self.kernel.log_diag_cov.dim()),
                mixing: Matrix::zeros(self.kernel.mixing.dim()),
            },
            theta: Matrix::zeros(self.theta.dim()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgcnDims {
    pub in_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub num_kernels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcnParams {
    pub blocks: Vec<AgcnLayerParams>,
    pub activation: Activation,
}

impl AgcnParams {
    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().unwrap().out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Shape("an AGCN needs at least one block".into()));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            block.validate()?;
            if b > 0 && block.in_dim() != self.blocks[b - 1].out_dim() {
                return Err(Error::Shape(format!(
                    "block {b} expects width {} but block {} emits {}",
                    block.in_dim(),
                    b - 1,
                    self.blocks[b - 1].out_dim()
                )));
            }
        }
        if self.blocks.len() >= 2 && self.blocks[0].out_dim() != self.out_dim() {
            return Err(Error::Shape("residual needs equal first and last widths".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        AgcnParams {
            blocks: self.blocks.iter().map(AgcnLayerParams::zeros_like).collect(),
            activation: self.activation,
        }
    }

    pub fn dims(&self) -> AgcnDims {
        AgcnDims {
            in_dim: self.in_dim(),
            hidden: self.out_dim(),
            blocks: self.blocks.len(),
            num_kernels: self.blocks[0].kernel.num_kernels(),
        }
    }
}

impl Parameters for AgcnParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (b, block) in self.blocks.iter().enumerate() {
            visit_matrix(&format!("block{b}.mu"), &block.kernel.means, f);
            visit_matrix(&format!("block{b}.log_cov"), &block.kernel.log_diag_cov, f);
            visit_matrix(&format!("block{b}.alpha"), &block.kernel.mixing, f);
            visit_matrix(&format!("block{b}.theta"), &block.theta, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            visit_matrix_mut(&format!("block{b}.mu"), &mut block.kernel.means, f);
            visit_matrix_mut(&format!("block{b}.log_cov"), &mut block.kernel.log_diag_cov, f);
            visit_matrix_mut(&format!("block{b}.alpha"), &mut block.kernel.mixing, f);
            visit_matrix_mut(&format!("block{b}.theta"), &mut block.theta, f);
        }
    }
}

/// Entries uniform on `[-a, a]` with variance `1 / fan_in`.
fn scaled_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let a = (3.0 / fan_in.max(1) as f64).sqrt();
    Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

/// Means uniform in the unit square (pseudo-coordinates lie in (0, 1]),
/// unit variances, and fan-in scaled mixing weights and transforms.
pub fn init_params(dims: AgcnDims, seed: u64) -> Result<AgcnParams> {
    if dims.in_dim == 0 || dims.hidden == 0 || dims.blocks == 0 || dims.num_kernels == 0 {
        return Err(Error::InvalidArgument(format!("degenerate AGCN dims {dims:?}")));
    }
    let mut rng = rng_for(seed, &[]);
    let blocks = (0..dims.blocks)
        .map(|b| {
            let f_in = if b == 0 { dims.in_dim } else { dims.hidden };
            let k = dims.num_kernels;
            AgcnLayerParams {
                kernel: GmmKernelParams {
                    means: Matrix::from_shape_simple_fn((k, 2), || rng.gen::<f64>()),
                    log_diag_cov: Matrix::zeros((k, 2)),
                    mixing: scaled_uniform(&mut rng, dims.hidden, k, k),
                },
                theta: scaled_uniform(&mut rng, dims.hidden, f_in, f_in),
            }
        })
        .collect();
    Ok(AgcnParams {
        blocks,
        activation: Activation::Relu,
    })
}
