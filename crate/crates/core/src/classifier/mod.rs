//! Dual-branch classifier: an AGCN per graph, absorbing-node read-out,
//! concatenation, MLP head and negative log-likelihood loss.

mod head;
mod problem;
mod train;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agcn::{self, init_params, AgcnCache, AgcnDims, AgcnParams, MessagePlan};
use crate::graph::AbsorbingGraph;
use crate::rng::derive_seed;
use crate::tensor::{accumulate, visit_matrix, visit_matrix_mut, visit_vector, visit_vector_mut, Matrix, Parameters};
use crate::{Error, Result};

pub use head::{log_softmax, Head, HeadCache, HeadMode, BN_EPSILON, BN_MOMENTUM};
pub use problem::{battery_problem, gradcheck_battery, BatteryInstance, ModelProblem};
pub use train::{
    evaluate, lr_at, train, write_embeddings, Adam, EpochMetrics, EvalMetrics, SamplePrediction, TrainConfig,
    TrainOutcome, TrainState, METRICS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Dual,
    PointOnly,
    VoxelOnly,
}

impl BranchMode {
    pub fn uses_points(self) -> bool {
        self != BranchMode::VoxelOnly
    }

    pub fn uses_voxels(self) -> bool {
        self != BranchMode::PointOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Dual => "dual",
            BranchMode::PointOnly => "point_only",
            BranchMode::VoxelOnly => "voxel_only",
        }
    }
}

/// Graph-level read-out of each branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The absorbing node's final state; the absorbing node takes part in
    /// message passing.
    #[default]
    Absorbing,
    /// Channel-wise maximum over event nodes of a plain radius-graph network;
    /// the control variant for the absorbing read-out.
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width D of every AGCN block.
    pub hidden_dim: usize,
    /// Gaussian kernels per block.
    pub num_kernels: usize,
    pub blocks: usize,
    pub head_hidden: usize,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_kernels: 8,
            blocks: 3,
            head_hidden: 128,
            readout: Readout::Absorbing,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_kernels == 0 || self.blocks == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model widths, kernel count and block count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample input of one branch: the graph, its message plan and the
/// initial node states.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub graph: AbsorbingGraph,
    pub plan: MessagePlan,
    pub states: Matrix,
}

impl BranchInput {
    pub fn new(graph: AbsorbingGraph, readout: Readout) -> Self {
        let plan = MessagePlan::new(&graph, readout == Readout::Absorbing);
        let states = graph.input_states();
        BranchInput { graph, plan, states }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: usize,
    pub label: usize,
    pub point: Option<BranchInput>,
    pub voxel: Option<BranchInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub point: Option<AgcnParams>,
    pub voxel: Option<AgcnParams>,
    pub head: Head,
    pub readout: Readout,
    pub dropout: f64,
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (prefix, branch) in [("point", &self.point), ("voxel", &self.voxel)] {
            if let Some(p) = branch {
                p.visit(&mut |name, shape, v| f(&format!("{prefix}.{name}"), shape, v));
            }
        }
        let h = &self.head;
        visit_matrix("head.w1", &h.w1, f);
        visit_vector("head.b1", &h.b1, f);
        visit_vector("head.gamma", &h.gamma, f);
        visit_vector("head.beta", &h.beta, f);
        visit_matrix("head.w2", &h.w2, f);
        visit_vector("head.b2", &h.b2, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (prefix, branch) in [("point", &mut self.point), ("voxel", &mut self.voxel)] {
            if let Some(p) = branch {
                p.visit_mut(&mut |name, v| f(&format!("{prefix}.{name}"), v));
            }
        }
        let h = &mut self.head;
        visit_matrix_mut("head.w1", &mut h.w1, f);
        visit_vector_mut("head.b1", &mut h.b1, f);
        visit_vector_mut("head.gamma", &mut h.gamma, f);
        visit_vector_mut("head.beta", &mut h.beta, f);
        visit_matrix_mut("head.w2", &mut h.w2, f);
        visit_vector_mut("head.b2", &mut h.b2, f);
    }
}

impl ModelParams {
    /// Normalization statistics: state that is saved but not trained.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_vector("head.running_mean", &self.head.running_mean, f);
        visit_vector("head.running_var", &self.head.running_var, f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_vector_mut("head.running_mean", &mut self.head.running_mean, f);
        visit_vector_mut("head.running_var", &mut self.head.running_var, f);
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn branch_mode(&self) -> BranchMode {
        match (&self.point, &self.voxel) {
            (Some(_), None) => BranchMode::PointOnly,
            (None, Some(_)) => BranchMode::VoxelOnly,
            _ => BranchMode::Dual,
        }
    }

    /// Width of the concatenated read-out fed to the head.
    pub fn embedding_dim(&self) -> usize {
        self.point.as_ref().map_or(0, AgcnParams::out_dim) + self.voxel.as_ref().map_or(0, AgcnParams::out_dim)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            point: self.point.as_ref().map(AgcnParams::zeros_like),
            voxel: self.voxel.as_ref().map(AgcnParams::zeros_like),
            head: self.head.zeros_like(),
            readout: self.readout,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.point.is_none() && self.voxel.is_none() {
            return Err(Error::Shape("a model needs at least one branch".into()));
        }
        for p in self.point.iter().chain(&self.voxel) {
            p.validate()?;
        }
        if self.head.input_dim() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "head expects width {} but the branches emit {}",
                self.head.input_dim(),
                self.embedding_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Fresh parameters. Input widths come from the preprocessing features.
pub fn init_model(
    config: &ModelConfig,
    branch_mode: BranchMode,
    point_in: usize,
    voxel_in: usize,
    num_classes: usize,
    dropout: f64,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let branch = |in_dim: usize, stream: u64| {
        init_params(
            AgcnDims {
                in_dim,
                hidden: config.hidden_dim,
                blocks: config.blocks,
                num_kernels: config.num_kernels,
            },
            derive_seed(seed, &[stream]),
        )
    };
    let point = branch_mode.uses_points().then(|| branch(point_in, 1)).transpose()?;
    let voxel = branch_mode.uses_voxels().then(|| branch(voxel_in, 2)).transpose()?;
    let width = point.as_ref().map_or(0, |_| config.hidden_dim) + voxel.as_ref().map_or(0, |_| config.hidden_dim);
    let model = ModelParams {
        point,
        voxel,
        head: Head::init(width, config.head_hidden, num_classes, derive_seed(seed, &[3])),
        readout: config.readout,
        dropout,
    };
    model.validate()?;
    Ok(model)
}

pub fn nll_loss(log_probs: &[f64], label: usize) -> Result<f64> {
    log_probs
        .get(label)
        .map(|lp| -lp)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of range for {} classes", log_probs.len())))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct BranchForward {
    cache: AgcnCache,
    embedding: Vec<f64>,
    /// Max-pool winner per channel.
    argmax: Vec<usize>,
}

fn branch_forward(params: &AgcnParams, input: &BranchInput, readout: Readout) -> Result<BranchForward> {
    if input.states.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "graph features have width {} but the branch expects {}",
            input.states.ncols(),
            params.in_dim()
        )));
    }
    let cache = agcn::forward(&input.plan, &input.states, params)?;
    let out = cache.output();
    let (embedding, argmax) = match readout {
        Readout::Absorbing => (cache.absorbing_state(), Vec::new()),
        Readout::MaxPool => {
            let m = out.nrows() - 1;
            (0..out.ncols())
                .map(|d| {
                    let col: Vec<f64> = (0..m).map(|i| out[[i, d]]).collect();
                    let i = argmax(&col);
                    (col[i], i)
                })
                .unzip()
        }
    };
    Ok(BranchForward {
        cache,
        embedding,
        argmax,
    })
}

fn branch_backward(
    params: &AgcnParams,
    input: &BranchInput,
    fwd: &BranchForward,
    readout: Readout,
    grad: &[f64],
) -> Result<AgcnParams> {
    let mut upstream = Matrix::zeros(fwd.cache.output().dim());
    match readout {
        Readout::Absorbing => {
            let a = upstream.nrows() - 1;
            upstream.row_mut(a).assign(&ndarray::ArrayView1::from(grad));
        }
        Readout::MaxPool => {
            for (d, (&i, &g)) in fwd.argmax.iter().zip(grad).enumerate() {
                upstream[[i, d]] = g;
            }
        }
    }
    Ok(agcn::backward(&input.plan, params, &fwd.cache, &upstream)?.0)
}

struct SampleForward {
    point: Option<BranchForward>,
    voxel: Option<BranchForward>,
}

impl SampleForward {
    fn embedding(&self) -> Vec<f64> {
        let mut e = Vec::new();
        for b in self.point.iter().chain(&self.voxel) {
            e.extend_from_slice(&b.embedding);
        }
        e
    }

    /// Rectifier patterns and max-pool winners.
    fn signature(&self, params: &ModelParams, out: &mut Vec<u32>) {
        for (fwd, p) in [(&self.point, &params.point), (&self.voxel, &params.voxel)] {
            let (Some(fwd), Some(p)) = (fwd, p) else { continue };
            if p.activation == agcn::Activation::Relu {
                for l in fwd.cache.layers() {
                    out.extend(l.pre_activation().iter().map(|x| u32::from(*x > 0.0)));
                }
            }
            out.extend(fwd.argmax.iter().map(|&i| i as u32));
        }
    }
}

/// Result of one batched forward (and optional backward) pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// batch x classes
    pub log_probs: Matrix,
    pub head_cache: HeadCache,
    pub grads: Option<ModelParams>,
    pub signature: Vec<u32>,
}

impl ModelParams {
    fn sample_forward(&self, s: &PreparedSample) -> Result<SampleForward> {
        let run = |params: &Option<AgcnParams>, input: &Option<BranchInput>, name: &str| -> Result<_> {
            match (params, input) {
                (Some(p), Some(i)) => Ok(Some(branch_forward(p, i, self.readout)?)),
                (Some(_), None) => Err(Error::Shape(format!("sample {} lacks the {name} graph", s.id))),
                (None, _) => Ok(None),
            }
        };
        Ok(SampleForward {
            point: run(&self.point, &s.point, "point")?,
            voxel: run(&self.voxel, &s.voxel, "voxel")?,
        })
    }

    /// Concatenated eval-mode read-outs, the head's input.
    pub fn embed(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        Ok(self.sample_forward(sample)?.embedding())
    }

    /// Eval-mode log-probabilities of one sample.
    pub fn predict(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        let out = self.run_batch(&[sample], HeadMode::Eval, false, false)?;
        Ok(out.log_probs.row(0).to_vec())
    }

    /// Forward in the given mode and, with `backward`, gradients of the mean
    /// loss. Per-sample work runs in parallel; reductions run in batch order
    /// so results do not depend on the thread count.
    pub fn run_batch(
        &self,
        samples: &[&PreparedSample],
        mode: HeadMode,
        backward: bool,
        signature: bool,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let classes = self.num_classes();
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::InvalidArgument(format!(
                "sample {} has label {} but the model has {classes} classes",
                s.id, s.label
            )));
        }
        let forwards: Vec<SampleForward> = samples
            .par_iter()
            .map(|s| self.sample_forward(s))
            .collect::<Result<_>>()?;
        let width = self.embedding_dim();
        let mut z = Matrix::zeros((samples.len(), width));
        for (row, f) in z.outer_iter_mut().zip(&forwards) {
            let e = f.embedding();
            Array1::from(e).assign_to(row);
        }
        let head_cache = self.head.forward(&z, mode);
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut sig = Vec::new();
        if signature {
            for f in &forwards {
                f.signature(self, &mut sig);
            }
            sig.extend(head_cache.signature());
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -head_cache.log_probs[[i, y]])
            .sum::<f64>()
            / samples.len() as f64;
        let grads = if backward {
            let (_, head_grads, dz) = self.head.backward(&head_cache, &labels);
            let dp = self.point.as_ref().map_or(0, AgcnParams::out_dim);
            let per_sample: Vec<(Option<AgcnParams>, Option<AgcnParams>)> = samples
                .par_iter()
                .zip(&forwards)
                .enumerate()
                .map(|(i, (s, f))| {
                    let g = dz.row(i);
                    let g = g.as_slice().unwrap();
                    let point = match (&self.point, &f.point, &s.point) {
                        (Some(p), Some(fw), Some(inp)) => Some(branch_backward(p, inp, fw, self.readout, &g[..dp])?),
                        _ => None,
                    };
                    let voxel = match (&self.voxel, &f.voxel, &s.voxel) {
                        (Some(p), Some(fw), Some(inp)) => Some(branch_backward(p, inp, fw, self.readout, &g[dp..])?),
                        _ => None,
                    };
                    Ok((point, voxel))
                })
                .collect::<Result<_>>()?;
            let mut grads = self.zeros_like();
            grads.head = head_grads;
            for (p, v) in &per_sample {
                if let (Some(dst), Some(src)) = (&mut grads.point, p) {
                    accumulate(dst, src);
                }
                if let (Some(dst), Some(src)) = (&mut grads.voxel, v) {
                    accumulate(dst, src);
                }
            }
            Some(grads)
        } else {
            None
        };
        Ok(BatchOutput {
            loss,
            log_probs: head_cache.log_probs.clone(),
            head_cache,
            grads,
            signature: sig,
        })
    }
}

#[cfg(test)]
mod tests;
