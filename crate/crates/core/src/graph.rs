//! Radius graphs with an absorbing node.
//!
//! Event nodes `0..M` are joined when their Euclidean distance in
//! `(x, y, t)` is strictly below the radius. Node `M` is the absorbing node:
//! it is adjacent to every event node, but those edges are implicit and are
//! not stored in [`AbsorbingGraph::edges`].
//!
//! Degrees count the absorbing edge, so every event node has degree at least
//! one and the absorbing node has degree `M`.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Radius for the center-point graph, in normalized units.
    pub point_radius: f64,
    /// Radius for the voxel graph, in voxel lattice units.
    pub voxel_radius: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            point_radius: 5.0,
            voxel_radius: 2.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("point_radius", self.point_radius), ("voxel_radius", self.voxel_radius)] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("graph.{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    (dx * dx + dy * dy + dt * dt).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbingGraph {
    coords: Vec<[f64; 3]>,
    features: Matrix,
    edges: Vec<(u32, u32)>,
    degrees: Vec<usize>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl AbsorbingGraph {
    /// Assembles a graph from an explicit undirected edge list over event
    /// nodes. Edges are normalized to `(min, max)` and sorted.
    pub fn from_edges(coords: Vec<[f64; 3]>, features: Matrix, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        let m = coords.len();
        if m == 0 {
            return Err(Error::InvalidArgument("a graph needs at least one event node".into()));
        }
        if features.nrows() != m {
            return Err(Error::Shape(format!(
                "{} feature rows for {m} nodes",
                features.nrows()
            )));
        }
        for e in edges.iter_mut() {
            if e.0 == e.1 {
                return Err(Error::Validation(format!("self-loop on node {}", e.0)));
            }
            if e.0.max(e.1) as usize >= m {
                return Err(Error::Validation(format!("edge {e:?} references a missing node")));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate edge {:?}", w[0])));
        }

        let mut radius_degree = vec![0usize; m];
        for &(i, j) in &edges {
            radius_degree[i as usize] += 1;
            radius_degree[j as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0);
        for d in &radius_degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0u32; offsets[m]];
        for &(i, j) in &edges {
            neighbors[fill[i as usize]] = j;
            fill[i as usize] += 1;
            neighbors[fill[j as usize]] = i;
            fill[j as usize] += 1;
        }
        for i in 0..m {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }

        let mut degrees: Vec<usize> = radius_degree.iter().map(|d| d + 1).collect();
        degrees.push(m);
        Ok(AbsorbingGraph {
            coords,
            features,
            edges,
            degrees,
            offsets,
            neighbors,
        })
    }

    pub fn num_event_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len() + 1
    }

    pub fn absorbing_index(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Radius neighbors of event node `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn is_adjacent(&self, u: usize, v: usize) -> bool {
        let a = self.absorbing_index();
        if u == v || u > a || v > a {
            return false;
        }
        if u == a || v == a {
            return true;
        }
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    /// Node features with a zero row appended for the absorbing node.
    pub fn input_states(&self) -> Matrix {
        let (m, f) = self.features.dim();
        let mut x = Matrix::zeros((m + 1, f));
        x.slice_mut(ndarray::s![..m, ..]).assign(&self.features);
        x
    }

    /// Relabels event node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_event_nodes();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the event nodes".into()));
        }
        let mut coords = vec![[0.0; 3]; m];
        let mut features = Matrix::zeros(self.features.dim());
        for (i, &p) in perm.iter().enumerate() {
            coords[p] = self.coords[i];
            features.row_mut(p).assign(&self.features.row(i));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(i, j)| (perm[i as usize] as u32, perm[j as usize] as u32))
            .collect();
        AbsorbingGraph::from_edges(coords, features, edges)
    }

    /// Writes `u v` per radius edge after a header comment carrying `M` and
    /// the radius. Absorbing edges are omitted.
    pub fn write_edge_list(&self, radius: f64, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# M={} R={}", self.num_event_nodes(), radius)?;
        for (u, v) in &self.edges {
            writeln!(out, "{u} {v}")?;
        }
        Ok(())
    }
}

fn check_radius_inputs(coords: &[[f64; 3]], features: &Matrix, radius: f64) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("a graph needs at least one event node".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if coords.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    if features.nrows() != coords.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} nodes",
            features.nrows(),
            coords.len()
        )));
    }
    Ok(())
}

/// Radius graph via a uniform hash grid with cell edge `radius`: each point
/// only compares against the 27 cells around its own.
pub fn build_radius_graph(coords: &[[f64; 3]], features: &Matrix, radius: f64) -> Result<AbsorbingGraph> {
    check_radius_inputs(coords, features, radius)?;
    // slightly enlarged cells keep every pair closer than `radius` in
    // adjacent cells despite rounding in the division
    let cell = radius * (1.0 + 1e-9);
    let key = |c: &[f64; 3]| c.map(|v| (v / cell).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        grid.entry(key(c)).or_default().push(i as u32);
    }
    let mut edges = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        let k = key(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dt in -1..=1 {
                    let Some(bucket) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dt]) else {
                        continue;
                    };
                    for &j in bucket {
                        if (j as usize) > i && distance(c, &coords[j as usize]) < radius {
                            edges.push((i as u32, j));
                        }
                    }
                }
            }
        }
    }
    AbsorbingGraph::from_edges(coords.to_vec(), features.clone(), edges)
}

/// All-pairs reference construction; quadratic, meant for tests and tiny
/// inputs.
pub fn build_radius_graph_bruteforce(
    coords: &[[f64; 3]],
    features: &Matrix,
    radius: f64,
) -> Result<AbsorbingGraph> {
    check_radius_inputs(coords, features, radius)?;
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            if distance(&coords[i], &coords[j]) < radius {
                edges.push((i as u32, j as u32));
            }
        }
    }
    AbsorbingGraph::from_edges(coords.to_vec(), features.clone(), edges)
}

/// Degree-based pseudo-coordinate `(deg(u)^-1/2, deg(v)^-1/2)` of an
/// adjacent pair.
pub fn pseudo_coordinate(graph: &AbsorbingGraph, u: usize, v: usize) -> Result<[f64; 2]> {
    if !graph.is_adjacent(u, v) {
        return Err(Error::InvalidArgument(format!("nodes {u} and {v} are not adjacent")));
    }
    let d = graph.degrees();
    Ok([1.0 / (d[u] as f64).sqrt(), 1.0 / (d[v] as f64).sqrt()])
}
