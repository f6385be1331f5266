use rand::Rng;

use super::{init_model, BranchInput, BranchMode, HeadMode, ModelConfig, ModelParams, PreparedSample, Readout};
use crate::agcn::{gradient_check, Differentiable, GradCheckReport};
use crate::graph::build_radius_graph;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Matrix, Parameters};
use crate::Result;

/// Mean batch loss of the full model as a function of every trainable
/// parameter, with a fixed dropout mask.
#[derive(Debug, Clone)]
pub struct ModelProblem {
    pub model: ModelParams,
    pub samples: Vec<PreparedSample>,
    pub mode: HeadMode,
    /// Scales the first gradient entry by 1.1; a mutation that the check
    /// must catch.
    pub corrupt: bool,
}

impl Differentiable for ModelProblem {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.model.visit(&mut |name, _, v| out.push((name.to_string(), v.len())));
        out
    }

    fn get(&self) -> Vec<f64> {
        self.model.flatten()
    }

    fn set(&mut self, flat: &[f64]) {
        self.model.assign(flat);
    }

    fn evaluate(&self) -> (f64, Vec<u32>) {
        let refs: Vec<&PreparedSample> = self.samples.iter().collect();
        let out = self.model.run_batch(&refs, self.mode, false, true).expect("valid problem");
        (out.loss, out.signature)
    }

    fn gradient(&self) -> Vec<f64> {
        let refs: Vec<&PreparedSample> = self.samples.iter().collect();
        let out = self.model.run_batch(&refs, self.mode, true, false).expect("valid problem");
        let mut flat = out.grads.expect("backward requested").flatten();
        if self.corrupt {
            flat[0] *= 1.1;
        }
        flat
    }
}

#[derive(Debug, Clone)]
pub struct BatteryInstance {
    pub name: String,
    pub num_params: usize,
    pub max_nodes: usize,
    pub report: GradCheckReport,
}

const POINT_IN: usize = 4;
const VOXEL_IN: usize = 5;

fn random_branch(rng: &mut impl Rng, in_dim: usize, readout: Readout) -> Result<BranchInput> {
    // at most 29 event nodes plus the absorbing node
    let m = rng.gen_range(2..=29);
    let coords: Vec<[f64; 3]> = (0..m)
        .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)])
        .collect();
    let features = Matrix::from_shape_simple_fn((m, in_dim), || rng.gen_range(-1.0..1.0));
    let radius = rng.gen_range(1.0..2.0);
    Ok(BranchInput::new(build_radius_graph(&coords, &features, radius)?, readout))
}

/// Small random model and batch number `index` of the battery seeded by
/// `seed`. Instances cycle through branch modes, read-outs and head modes.
pub fn battery_problem(seed: u64, index: usize, corrupt: bool) -> Result<(String, ModelProblem)> {
    let mut rng = rng_for(seed, &[index as u64]);
    let branch_mode = [BranchMode::Dual, BranchMode::PointOnly, BranchMode::VoxelOnly][index % 3];
    let readout = if (index / 3) % 2 == 0 { Readout::Absorbing } else { Readout::MaxPool };
    let train_mode = index % 4 != 3;
    let config = ModelConfig {
        hidden_dim: rng.gen_range(2..=4),
        num_kernels: rng.gen_range(1..=3),
        blocks: rng.gen_range(1..=3),
        head_hidden: rng.gen_range(3..=5),
        readout,
    };
    let classes = rng.gen_range(2..=4);
    let mut model = init_model(
        &config,
        branch_mode,
        POINT_IN,
        VOXEL_IN,
        classes,
        0.3,
        derive_seed(seed, &[index as u64, 1]),
    )?;
    // Move away from the initial values so every parameter matters.
    let mut flat = model.flatten();
    for v in &mut flat {
        *v += rng.gen_range(-0.3..0.3);
    }
    model.assign(&flat);
    model.visit_buffers_mut(&mut |name, v| {
        for x in v.iter_mut() {
            *x = if name.ends_with("var") {
                rng.gen_range(0.5..2.0)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    });
    let batch = rng.gen_range(3..=4);
    let samples = (0..batch)
        .map(|id| {
            Ok(PreparedSample {
                id,
                label: rng.gen_range(0..classes),
                point: branch_mode.uses_points().then(|| random_branch(&mut rng, POINT_IN, readout)).transpose()?,
                voxel: branch_mode.uses_voxels().then(|| random_branch(&mut rng, VOXEL_IN, readout)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = if train_mode {
        HeadMode::Train {
            dropout: model.dropout,
            dropout_seed: derive_seed(seed, &[index as u64, 2]),
        }
    } else {
        HeadMode::Eval
    };
    let name = format!(
        "#{index:02} {}/{:?}/{} B={} D={} K={}",
        branch_mode.as_str(),
        readout,
        if train_mode { "train" } else { "eval" },
        config.blocks,
        config.hidden_dim,
        config.num_kernels
    );
    Ok((
        name,
        ModelProblem {
            model,
            samples,
            mode,
            corrupt,
        },
    ))
}

/// Finite-difference checks of the full model on `count` random instances
/// covering both branches, both read-outs and the head in both modes.
pub fn gradcheck_battery(
    seed: u64,
    count: usize,
    epsilon: f64,
    tolerance: f64,
    corrupt: bool,
) -> Result<Vec<BatteryInstance>> {
    (0..count)
        .map(|i| {
            let (name, mut problem) = battery_problem(seed, i, corrupt)?;
            let max_nodes = problem
                .samples
                .iter()
                .flat_map(|s| s.point.iter().chain(&s.voxel))
                .map(|b| b.graph.num_nodes())
                .max()
                .unwrap_or(0);
            let num_params = problem.model.num_params();
            let report = gradient_check(&mut problem, epsilon, tolerance);
            Ok(BatteryInstance {
                name,
                num_params,
                max_nodes,
                report,
            })
        })
        .collect()
}
