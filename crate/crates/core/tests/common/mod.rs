//! Reference implementations written directly from the definitions, with
//! no code shared with the library beyond plain data types.

#![allow(dead_code)]

use pvag::agcn::AgcnParams;
use pvag::event_io::Polarity;
use pvag::graph::AbsorbingGraph;
use pvag::sampling::NormPoint;
use pvag::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// All pairs `i < j` closer than `r`.
pub fn brute_edges(coords: &[[f64; 3]], r: f64) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            if dist(&coords[i], &coords[j]) < r {
                out.push((i as u32, j as u32));
            }
        }
    }
    out
}

pub fn random_coords(rng: &mut impl Rng, m: usize, extent: f64) -> Vec<[f64; 3]> {
    (0..m)
        .map(|_| [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)])
        .collect()
}

pub fn random_features(rng: &mut impl Rng, m: usize, f: usize) -> Matrix {
    Matrix::from_shape_simple_fn((m, f), || rng.gen_range(-1.0..1.0))
}

/// Radius-graph AGCN evaluated node by node from the layer definition:
///
/// `h'_u[d] = relu( Σ_{v ∈ N(u) ∪ {a}} ω_d(z_uv) Σ_f Θ[d,f] h_v[f] )`,
/// `ω_d(z) = Σ_k α[d,k] exp(-½ Σ_c (z_c - μ_kc)² / σ²_kc)`,
/// `z_uv = (deg(u)^-½, deg(v)^-½)`,
///
/// where the absorbing node `a` neighbors every event node, starts from a
/// zero state, and the first block's output is added to the last one's when
/// there are two or more blocks. Neighborhoods are recomputed from the
/// coordinates and `radius`.
pub fn oracle_forward(coords: &[[f64; 3]], features: &Matrix, radius: f64, params: &AgcnParams) -> Vec<Vec<f64>> {
    let m = coords.len();
    let a = m;
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for u in 0..m {
        for v in 0..m {
            if u != v && dist(&coords[u], &coords[v]) < radius {
                nbrs[u].push(v);
            }
        }
    }
    let deg: Vec<f64> = (0..=m)
        .map(|u| if u == a { m as f64 } else { nbrs[u].len() as f64 + 1.0 })
        .collect();
    for u in 0..m {
        nbrs[u].push(a);
        nbrs[a].push(u);
    }
    let mut h: Vec<Vec<f64>> = (0..=m)
        .map(|u| if u == a { vec![0.0; features.ncols()] } else { features.row(u).to_vec() })
        .collect();
    let mut first: Option<Vec<Vec<f64>>> = None;
    for block in &params.blocks {
        let k = &block.kernel;
        let d_out = block.theta.nrows();
        let mut next = vec![vec![0.0; d_out]; m + 1];
        for u in 0..=m {
            for d in 0..d_out {
                let mut acc = 0.0;
                for &v in &nbrs[u] {
                    let z = [deg[u].powf(-0.5), deg[v].powf(-0.5)];
                    let mut w = 0.0;
                    for kk in 0..k.means.nrows() {
                        let mut q = 0.0;
                        for c in 0..2 {
                            let var = k.log_diag_cov[[kk, c]].exp();
                            q += (z[c] - k.means[[kk, c]]).powi(2) / var;
                        }
                        w += k.mixing[[d, kk]] * (-0.5 * q).exp();
                    }
                    let mut msg = 0.0;
                    for f in 0..block.theta.ncols() {
                        msg += block.theta[[d, f]] * h[v][f];
                    }
                    acc += w * msg;
                }
                next[u][d] = acc.max(0.0);
            }
        }
        if first.is_none() {
            first = Some(next.clone());
        }
        h = next;
    }
    if params.blocks.len() >= 2 {
        let first = first.unwrap();
        for (row, f) in h.iter_mut().zip(first) {
            for (x, y) in row.iter_mut().zip(f) {
                *x += y;
            }
        }
    }
    h
}

/// Octree leaves by plain recursion: each leaf as a list of input indices
/// in input order, leaves in depth-first octant order.
pub fn oracle_octree_leaves(points: &[NormPoint], max_num_events: usize) -> Vec<Vec<usize>> {
    fn recurse(points: &[NormPoint], idx: Vec<usize>, lo: [f64; 3], hi: [f64; 3], max: usize, out: &mut Vec<Vec<usize>>) {
        let edge = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if idx.len() <= max || edge <= 1.0 {
            out.push(idx);
            return;
        }
        let mid: Vec<f64> = (0..3).map(|a| (lo[a] + hi[a]) / 2.0).collect();
        for code in 0..8usize {
            let upper = |a: usize| code >> a & 1 == 1;
            let child: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| {
                    let c = [points[i].x, points[i].y, points[i].t];
                    (0..3).all(|a| (c[a] >= mid[a]) == upper(a))
                })
                .collect();
            if child.is_empty() {
                continue;
            }
            let mut clo = lo;
            let mut chi = hi;
            for a in 0..3 {
                if upper(a) {
                    clo[a] = mid[a];
                } else {
                    chi[a] = mid[a];
                }
            }
            recurse(points, child, clo, chi, max, out);
        }
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for (a, c) in [p.x, p.y, p.t].into_iter().enumerate() {
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    let mut out = Vec::new();
    recurse(points, (0..points.len()).collect(), lo, hi, max_num_events, &mut out);
    out
}

/// Points on an integer-ish lattice so that duplicates and boundary ties
/// occur.
pub fn random_points(rng: &mut impl Rng, n: usize, extent: f64, lattice: bool) -> Vec<NormPoint> {
    (0..n)
        .map(|_| {
            let mut c = [0.0; 3].map(|_| rng.gen_range(0.0..extent));
            if lattice {
                c = c.map(f64::floor);
            }
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            NormPoint::new(c[0], c[1], c[2], p)
        })
        .collect()
}

pub fn graph_with_features(rng: &mut impl Rng, m: usize, f: usize, extent: f64, radius: f64) -> AbsorbingGraph {
    let coords = random_coords(rng, m, extent);
    let feats = random_features(rng, m, f);
    pvag::graph::build_radius_graph(&coords, &feats, radius).unwrap()
}
