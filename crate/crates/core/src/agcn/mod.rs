//! Absorbing graph convolution network.
//!
//! One layer maps node states `H` ((M+1) x F) to ((M+1) x D):
//!
//! ```text
//! m_v        = Θ h_v
//! out[u, d]  = σ( Σ_{v → u} ω_d(z_uv) · m_v[d] )
//! ω_d(z)     = Σ_k α[d, k] · exp(-½ Σ_c (z_c - μ[k, c])² / exp(s[k, c]))
//! ```
//!
//! where `v → u` ranges over the radius neighbours of an event node plus the
//! absorbing node, and over every event node when `u` is the absorbing node.
//! `z_uv = (deg(u)^-½, deg(v)^-½)` and `s` holds log-variances. A stack of
//! `B` layers adds the first layer's output to the last one's when `B >= 2`.
//!
//! Gradients are derived by hand in [`backward`] and checked against central
//! differences by [`gradient_check`].

mod gradcheck;
mod params;
mod problem;

use std::collections::HashMap;

use crate::graph::AbsorbingGraph;
use crate::tensor::{matvec, matvec_t_acc, outer_acc, Matrix};
use crate::{Error, Result};

pub use gradcheck::{gradient_check, Differentiable, GradCheckReport, GroupReport};
pub use problem::AgcnProblem;
pub use params::{init_params, Activation, AgcnDims, AgcnLayerParams, AgcnParams, GmmKernelParams};

/// Message routing for one graph: every directed message `source → target`
/// together with the index of its degree pair. Messages are grouped by
/// target.
#[derive(Debug, Clone)]
pub struct MessagePlan {
    num_nodes: usize,
    /// `offsets[u]..offsets[u + 1]` indexes the messages into node `u`.
    offsets: Vec<usize>,
    sources: Vec<u32>,
    pair_of: Vec<u32>,
    /// Distinct pseudo-coordinates.
    pairs: Vec<[f64; 2]>,
}

impl MessagePlan {
    /// With `absorbing` false the absorbing node neither sends nor receives,
    /// leaving plain radius-graph message passing.
    pub fn new(graph: &AbsorbingGraph, absorbing: bool) -> Self {
        let m = graph.num_event_nodes();
        let a = graph.absorbing_index();
        let deg = graph.degrees();
        let mut pair_ids: HashMap<(usize, usize), u32> = HashMap::new();
        let mut pairs = Vec::new();
        let mut intern = |u: usize, v: usize| -> u32 {
            *pair_ids.entry((deg[u], deg[v])).or_insert_with(|| {
                pairs.push([1.0 / (deg[u] as f64).sqrt(), 1.0 / (deg[v] as f64).sqrt()]);
                (pairs.len() - 1) as u32
            })
        };
        let mut offsets = Vec::with_capacity(m + 2);
        let mut sources = Vec::new();
        let mut pair_of = Vec::new();
        offsets.push(0);
        for u in 0..m {
            for &v in graph.neighbors(u) {
                sources.push(v);
                pair_of.push(intern(u, v as usize));
            }
            if absorbing {
                sources.push(a as u32);
                pair_of.push(intern(u, a));
            }
            offsets.push(sources.len());
        }
        if absorbing {
            for v in 0..m {
                sources.push(v as u32);
                pair_of.push(intern(a, v));
            }
        }
        offsets.push(sources.len());
        MessagePlan {
            num_nodes: m + 1,
            offsets,
            sources,
            pair_of,
            pairs,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_messages(&self) -> usize {
        self.sources.len()
    }

    pub fn pseudo_coordinates(&self) -> &[[f64; 2]] {
        &self.pairs
    }

    fn incoming(&self, u: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.offsets[u]..self.offsets[u + 1];
        self.sources[r.clone()]
            .iter()
            .zip(&self.pair_of[r])
            .map(|(&s, &p)| (s as usize, p as usize))
    }
}

/// GMM kernel weight `ω_d(z)` for one channel.
pub fn gmm_weight(z: [f64; 2], kernel: &GmmKernelParams, d: usize) -> f64 {
    (0..kernel.num_kernels())
        .map(|k| kernel.mixing[[d, k]] * gaussian(z, kernel, k))
        .sum()
}

fn gaussian(z: [f64; 2], kernel: &GmmKernelParams, k: usize) -> f64 {
    let mut q = 0.0;
    for c in 0..2 {
        let diff = z[c] - kernel.means[[k, c]];
        q += diff * diff * (-kernel.log_diag_cov[[k, c]]).exp();
    }
    (-0.5 * q).exp()
}

/// Values kept from one layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    /// `Θ h_v` per node.
    messages: Matrix,
    /// Gaussian responses per degree pair (pairs x K).
    gauss: Matrix,
    /// Kernel weights per degree pair (pairs x D).
    omega: Matrix,
    pre: Matrix,
    output: Matrix,
}

impl LayerCache {
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

fn check_layer_shapes(plan: &MessagePlan, input: &Matrix, params: &AgcnLayerParams) -> Result<()> {
    params.validate()?;
    if input.nrows() != plan.num_nodes {
        return Err(Error::Shape(format!(
            "{} state rows for a graph with {} nodes",
            input.nrows(),
            plan.num_nodes
        )));
    }
    if input.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "state width {} but layer expects {}",
            input.ncols(),
            params.in_dim()
        )));
    }
    Ok(())
}

/// One absorbing graph convolution.
pub fn layer_forward(
    plan: &MessagePlan,
    input: &Matrix,
    params: &AgcnLayerParams,
    activation: Activation,
) -> Result<LayerCache> {
    check_layer_shapes(plan, input, params)?;
    let n = plan.num_nodes;
    let dim = params.out_dim();
    let kern = &params.kernel;
    let kg = kern.num_kernels();

    let mut messages = Matrix::zeros((n, dim));
    for (h, mut m) in input.outer_iter().zip(messages.outer_iter_mut()) {
        matvec(&params.theta, h.as_slice().unwrap(), m.as_slice_mut().unwrap());
    }

    let np = plan.pairs.len();
    let mut gauss = Matrix::zeros((np, kg));
    let mut omega = Matrix::zeros((np, dim));
    for (p, z) in plan.pairs.iter().enumerate() {
        for k in 0..kg {
            gauss[[p, k]] = gaussian(*z, kern, k);
        }
        matvec(
            &kern.mixing,
            gauss.row(p).as_slice().unwrap(),
            omega.row_mut(p).into_slice().unwrap(),
        );
    }

    let mut pre = Matrix::zeros((n, dim));
    {
        let msg = messages.as_slice().unwrap();
        let om = omega.as_slice().unwrap();
        for (u, mut row) in pre.outer_iter_mut().enumerate() {
            let row = row.as_slice_mut().unwrap();
            for (v, p) in plan.incoming(u) {
                let mv = &msg[v * dim..(v + 1) * dim];
                let w = &om[p * dim..(p + 1) * dim];
                for d in 0..dim {
                    row[d] += w[d] * mv[d];
                }
            }
        }
    }
    let output = pre.mapv(|x| activation.apply(x));
    Ok(LayerCache {
        input: input.clone(),
        messages,
        gauss,
        omega,
        pre,
        output,
    })
}

/// Backward pass of [`layer_forward`]: accumulates parameter gradients into
/// `grads` and returns the gradient with respect to the layer input.
pub fn layer_backward(
    plan: &MessagePlan,
    cache: &LayerCache,
    params: &AgcnLayerParams,
    activation: Activation,
    upstream: &Matrix,
    grads: &mut AgcnLayerParams,
) -> Result<Matrix> {
    if upstream.dim() != cache.output.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs layer output {:?}",
            upstream.dim(),
            cache.output.dim()
        )));
    }
    let dim = params.out_dim();
    let kern = &params.kernel;
    let kg = kern.num_kernels();
    let n = plan.num_nodes;

    let mut dpre = upstream.clone();
    ndarray::Zip::from(&mut dpre)
        .and(&cache.pre)
        .for_each(|g, &x| *g *= activation.derivative(x));

    let mut domega = Matrix::zeros(cache.omega.dim());
    let mut dmsg = Matrix::zeros((n, dim));
    {
        let msg = cache.messages.as_slice().unwrap();
        let om = cache.omega.as_slice().unwrap();
        let dp = dpre.as_slice().unwrap();
        let dom = domega.as_slice_mut().unwrap();
        let dm = dmsg.as_slice_mut().unwrap();
        for u in 0..n {
            let gu = &dp[u * dim..(u + 1) * dim];
            if gu.iter().all(|g| *g == 0.0) {
                continue;
            }
            for (v, p) in plan.incoming(u) {
                for d in 0..dim {
                    dom[p * dim + d] += gu[d] * msg[v * dim + d];
                    dm[v * dim + d] += gu[d] * om[p * dim + d];
                }
            }
        }
    }

    // ω = α g  =>  dα += dω gᵀ, dg = αᵀ dω
    let mut dgauss = vec![0.0; kg];
    for (p, z) in plan.pairs.iter().enumerate() {
        let dw = domega.row(p);
        let dw = dw.as_slice().unwrap();
        let g = cache.gauss.row(p);
        let g = g.as_slice().unwrap();
        outer_acc(&mut grads.kernel.mixing, dw, g);
        dgauss.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(&kern.mixing, dw, &mut dgauss);
        for k in 0..kg {
            let dq = dgauss[k] * g[k];
            if dq == 0.0 {
                continue;
            }
            for c in 0..2 {
                let inv_var = (-kern.log_diag_cov[[k, c]]).exp();
                let diff = z[c] - kern.means[[k, c]];
                grads.kernel.means[[k, c]] += dq * diff * inv_var;
                grads.kernel.log_diag_cov[[k, c]] += dq * 0.5 * diff * diff * inv_var;
            }
        }
    }

    let mut dinput = Matrix::zeros(cache.input.dim());
    for v in 0..n {
        let dm = dmsg.row(v);
        let dm = dm.as_slice().unwrap();
        let h = cache.input.row(v);
        outer_acc(&mut grads.theta, dm, h.as_slice().unwrap());
        matvec_t_acc(&params.theta, dm, dinput.row_mut(v).into_slice().unwrap());
    }
    Ok(dinput)
}

/// Cached forward pass of a full AGCN stack.
#[derive(Debug, Clone, Default)]
pub struct AgcnCache {
    layers: Vec<LayerCache>,
    output: Matrix,
}

impl AgcnCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    /// The absorbing node's final state.
    pub fn absorbing_state(&self) -> Vec<f64> {
        self.output.row(self.output.nrows() - 1).to_vec()
    }
}

/// Runs every block; for two or more blocks the first block's output is
/// added to the last block's.
pub fn forward(plan: &MessagePlan, input: &Matrix, params: &AgcnParams) -> Result<AgcnCache> {
    params.validate()?;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let h = layers.last().map_or(input, |l| &l.output);
        let cache = layer_forward(plan, h, block, params.activation)?;
        layers.push(cache);
    }
    let mut output = layers.last().unwrap().output.clone();
    if layers.len() >= 2 {
        output += &layers[0].output;
    }
    Ok(AgcnCache { layers, output })
}

/// Gradients of `Σ upstream ⊙ output` with respect to every parameter and
/// to the input states.
pub fn backward(
    plan: &MessagePlan,
    params: &AgcnParams,
    cache: &AgcnCache,
    upstream: &Matrix,
) -> Result<(AgcnParams, Matrix)> {
    if cache.layers.is_empty() {
        return Err(Error::InvalidArgument("backward called without a forward cache".into()));
    }
    if cache.layers.len() != params.blocks.len() {
        return Err(Error::Shape(format!(
            "cache holds {} layers, model has {}",
            cache.layers.len(),
            params.blocks.len()
        )));
    }
    if upstream.dim() != cache.output.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            upstream.dim(),
            cache.output.dim()
        )));
    }
    let mut grads = params.zeros_like();
    let nb = params.blocks.len();
    let mut g = upstream.clone();
    for b in (0..nb).rev() {
        if b == 0 && nb >= 2 {
            g += upstream;
        }
        g = layer_backward(
            plan,
            &cache.layers[b],
            &params.blocks[b],
            params.activation,
            &g,
            &mut grads.blocks[b],
        )?;
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests;
