use rand::Rng;

use super::*;
use crate::graph::build_radius_graph;
use crate::rng::rng_for;
use crate::tensor::Parameters;

fn kernel(means: &[[f64; 2]], log_cov: &[[f64; 2]], mixing: Vec<Vec<f64>>) -> GmmKernelParams {
    let k = means.len();
    GmmKernelParams {
        means: Matrix::from_shape_fn((k, 2), |(i, c)| means[i][c]),
        log_diag_cov: Matrix::from_shape_fn((k, 2), |(i, c)| log_cov[i][c]),
        mixing: Matrix::from_shape_fn((mixing.len(), k), |(d, i)| mixing[d][i]),
    }
}

fn random_graph(rng: &mut impl Rng, m: usize, f: usize) -> AbsorbingGraph {
    let coords: Vec<[f64; 3]> = (0..m)
        .map(|_| [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)])
        .collect();
    let feats = Matrix::from_shape_simple_fn((m, f), || rng.gen_range(-1.0..1.0));
    build_radius_graph(&coords, &feats, 2.5).unwrap()
}

fn random_problem(seed: u64, activation: Activation) -> AgcnProblem {
    let mut rng = rng_for(seed, &[]);
    let m = rng.gen_range(2..=12);
    let f = rng.gen_range(1..=4);
    let graph = random_graph(&mut rng, m, f);
    let dims = AgcnDims {
        in_dim: f,
        hidden: rng.gen_range(1..=4),
        blocks: rng.gen_range(1..=3),
        num_kernels: rng.gen_range(1..=3),
    };
    let mut params = init_params(dims, seed).unwrap();
    params.activation = activation;
    for b in &mut params.blocks {
        b.kernel.log_diag_cov.mapv_inplace(|_| rng.gen_range(-1.0..0.5));
    }
    let mut input = graph.input_states();
    let upstream = Matrix::from_shape_simple_fn((m + 1, dims.hidden), || rng.gen_range(-1.0..1.0));
    input.row_mut(m).fill(0.0);
    AgcnProblem {
        plan: MessagePlan::new(&graph, true),
        params,
        input,
        upstream,
    }
}

#[test]
fn gmm_weight_at_mean_is_mixing_weight() {
    let k = kernel(&[[0.3, 0.7]], &[[0.0, 0.0]], vec![vec![1.0]]);
    assert_eq!(gmm_weight([0.3, 0.7], &k, 0), 1.0);
}

#[test]
fn gmm_weight_unit_covariance() {
    // |z - μ|² = 2 with unit variances -> e^-1
    let k = kernel(&[[0.0, 0.0]], &[[0.0, 0.0]], vec![vec![1.0]]);
    let w = gmm_weight([1.0, 1.0], &k, 0);
    assert!((w - (-1f64).exp()).abs() < 1e-15);
    assert!((w - 0.367879).abs() < 1e-6);
}

#[test]
fn gmm_weight_zero_mixture() {
    let k = kernel(&[[0.1, 0.2], [0.9, 0.4]], &[[0.3, -0.2], [0.0, 1.0]], vec![vec![0.0, 0.0]]);
    for z in [[0.0, 0.0], [0.5, 0.5], [1.0, 0.2]] {
        assert_eq!(gmm_weight(z, &k, 0), 0.0);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = rng_for(1, &[]);
    let g = random_graph(&mut rng, 9, 3);
    let params = init_params(AgcnDims { in_dim: 3, hidden: 4, blocks: 3, num_kernels: 2 }, 2).unwrap();
    let x = Matrix::zeros((10, 3));
    let out = forward(&MessagePlan::new(&g, true), &x, &params).unwrap();
    assert!(out.output().iter().all(|v| *v == 0.0));
}

#[test]
fn single_node_by_hand() {
    let g = build_radius_graph(&[[0.0; 3]], &Matrix::from_elem((1, 2), 1.0), 1.0).unwrap();
    let plan = MessagePlan::new(&g, true);
    let k = kernel(&[[0.2, 0.9]], &[[0.1, -0.3]], vec![vec![0.8], vec![-1.3]]);
    let theta = Matrix::from_shape_vec((2, 2), vec![0.5, 0.25, 1.0, 2.0]).unwrap();
    let layer = AgcnLayerParams { kernel: k.clone(), theta };
    let x = g.input_states();
    let cache = layer_forward(&plan, &x, &layer, Activation::Relu).unwrap();
    // event node only hears the absorbing node, whose input is zero
    assert_eq!(cache.output().row(0).to_vec(), vec![0.0, 0.0]);
    // both degrees are 1, so z = (1, 1)
    let m = [0.75, 3.0];
    let expected: Vec<f64> = (0..2).map(|d| (gmm_weight([1.0, 1.0], &k, d) * m[d]).max(0.0)).collect();
    assert_eq!(cache.output().row(1).to_vec(), expected);
    assert!(expected[0] > 0.0 && expected[1] == 0.0);
}

#[test]
fn positive_homogeneity_in_theta() {
    let p = random_problem(5, Activation::Relu);
    let layer = &p.params.blocks[0];
    let base = layer_forward(&p.plan, &p.input, layer, Activation::Relu).unwrap();
    let mut scaled = layer.clone();
    scaled.theta *= 2.5;
    let out = layer_forward(&p.plan, &p.input, &scaled, Activation::Relu).unwrap();
    for (a, b) in base.output().iter().zip(out.output()) {
        assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn one_block_has_no_residual() {
    let mut p = random_problem(8, Activation::Relu);
    p.params.blocks.truncate(1);
    let full = forward(&p.plan, &p.input, &p.params).unwrap();
    let single = layer_forward(&p.plan, &p.input, &p.params.blocks[0], Activation::Relu).unwrap();
    assert_eq!(full.output(), single.output());
}

#[test]
fn zero_last_block_leaves_first_output() {
    for seed in 0..10 {
        let mut p = random_problem(seed, Activation::Relu);
        if p.params.blocks.len() < 2 {
            continue;
        }
        let last = p.params.blocks.last_mut().unwrap();
        last.theta.fill(0.0);
        last.kernel.mixing.fill(0.0);
        let out = forward(&p.plan, &p.input, &p.params).unwrap();
        assert_eq!(out.output(), out.layers()[0].output());
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let p = random_problem(3, Activation::Relu);
    let a = forward(&p.plan, &p.input, &p.params).unwrap();
    let b = forward(&p.plan, &p.input, &p.params).unwrap();
    assert_eq!(a.output(), b.output());
}

#[test]
fn shape_errors() {
    let p = random_problem(4, Activation::Relu);
    let bad = Matrix::zeros((p.input.nrows(), p.input.ncols() + 1));
    assert!(matches!(forward(&p.plan, &bad, &p.params), Err(Error::Shape(_))));
    let bad = Matrix::zeros((p.input.nrows() + 1, p.input.ncols()));
    assert!(matches!(forward(&p.plan, &bad, &p.params), Err(Error::Shape(_))));
    let mut broken = p.params.clone();
    broken.blocks[0].kernel.mixing = Matrix::zeros((7, 1));
    assert!(forward(&p.plan, &p.input, &broken).is_err());
}

#[test]
fn backward_without_forward_is_an_error() {
    let p = random_problem(4, Activation::Relu);
    let err = backward(&p.plan, &p.params, &AgcnCache::default(), &p.upstream);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn zero_upstream_zero_gradients() {
    let mut p = random_problem(6, Activation::Relu);
    p.upstream.fill(0.0);
    assert!(p.gradient().iter().all(|g| *g == 0.0));
}

#[test]
fn mixing_gradient_single_edge_by_hand() {
    // one event node: the only live message is event -> absorbing
    let g = build_radius_graph(&[[0.0; 3]], &Matrix::from_elem((1, 1), 2.0), 1.0).unwrap();
    let k = kernel(&[[0.4, 0.6], [0.9, 0.1]], &[[0.0, 0.2], [-0.5, 0.0]], vec![vec![0.7, 0.3]]);
    let theta = Matrix::from_elem((1, 1), 1.5);
    let params = AgcnParams {
        blocks: vec![AgcnLayerParams { kernel: k.clone(), theta }],
        activation: Activation::Relu,
    };
    let plan = MessagePlan::new(&g, true);
    let x = g.input_states();
    let cache = forward(&plan, &x, &params).unwrap();
    let upstream = Matrix::from_shape_vec((2, 1), vec![0.0, -0.8]).unwrap();
    let (grads, _) = backward(&plan, &params, &cache, &upstream).unwrap();
    let transformed = 1.5 * 2.0;
    for kk in 0..2 {
        let single = kernel(&[[k.means[[kk, 0]], k.means[[kk, 1]]]], &[[k.log_diag_cov[[kk, 0]], k.log_diag_cov[[kk, 1]]]], vec![vec![1.0]]);
        let exp_term = gmm_weight([1.0, 1.0], &single, 0);
        let expected = exp_term * transformed * -0.8;
        assert!((grads.blocks[0].kernel.mixing[[0, kk]] - expected).abs() < 1e-14);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..30 {
        let mut p = random_problem(seed, Activation::Relu);
        let report = gradient_check(&mut p, 1e-5, 1e-5);
        assert!(report.passed(), "seed {seed}\n{report}");
        assert!(report.checked() > 0);
    }
}

#[test]
fn linear_submodel_is_exact() {
    for seed in 0..10 {
        let mut p = random_problem(seed, Activation::Identity);
        // multilinear in alpha, theta and the input: differences are exact
        // up to rounding along those coordinates
        let report = gradient_check(&mut p, 1e-5, 1e-5);
        assert!(report.passed(), "seed {seed}\n{report}");
        assert!(report.groups.iter().all(|g| g.skipped == 0));
        for g in &report.groups {
            if g.name.ends_with("alpha") || g.name.ends_with("theta") || g.name == "input" {
                assert!(g.max_rel_error < 1e-8, "seed {seed}\n{report}");
            }
        }
    }
}

struct Corrupted(AgcnProblem);

impl Differentiable for Corrupted {
    fn groups(&self) -> Vec<(String, usize)> {
        self.0.groups()
    }
    fn get(&self) -> Vec<f64> {
        self.0.get()
    }
    fn set(&mut self, flat: &[f64]) {
        self.0.set(flat)
    }
    fn evaluate(&self) -> (f64, Vec<u32>) {
        self.0.evaluate()
    }
    fn gradient(&self) -> Vec<f64> {
        let mut g = self.0.gradient();
        // first alpha entry of block 0
        let offset = 4 * self.0.params.blocks[0].kernel.num_kernels();
        g[offset] *= 1.1;
        g
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let p = random_problem(12, Activation::Identity);
    let offset = 4 * p.params.blocks[0].kernel.num_kernels();
    assert!(p.gradient()[offset].abs() > 1e-3);
    let report = gradient_check(&mut Corrupted(p), 1e-5, 1e-4);
    assert!(!report.passed());
}

#[test]
fn init_is_seeded_and_scaled() {
    let dims = AgcnDims { in_dim: 50, hidden: 64, blocks: 2, num_kernels: 8 };
    let a = init_params(dims, 9).unwrap();
    assert_eq!(a, init_params(dims, 9).unwrap());
    assert_ne!(a, init_params(dims, 10).unwrap());
    a.validate().unwrap();
    let theta = &a.blocks[0].theta;
    let var = theta.iter().map(|v| v * v).sum::<f64>() / theta.len() as f64;
    assert!((var * 50.0 - 1.0).abs() < 0.2, "variance {var}");
    for b in &a.blocks {
        assert!(b.kernel.means.iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(b.kernel.log_diag_cov.iter().all(|s| *s == 0.0));
    }
    assert_eq!(a.num_params(), 2 * (8 * 2 * 2 + 64 * 8) + 64 * 50 + 64 * 64);
}
