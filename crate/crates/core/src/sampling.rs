//! Downsampling a dense event cloud to representative center points.
//!
//! All strategies return a subset of their input, never synthesized
//! coordinates, and all are deterministic given the seed.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::event_io::{EventCloud, Polarity};
use crate::graph::distance;
use crate::rng::rng_for;
use crate::{Error, Result};

/// An event with its timestamp rescaled to spatial units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub polarity: Polarity,
}

impl NormPoint {
    pub fn new(x: f64, y: f64, t: f64, polarity: Polarity) -> Self {
        NormPoint { x, y, t, polarity }
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Octree-grid non-uniform sampling.
    OctreeGrid,
    /// Farthest point sampling.
    Fps,
    /// Uniform random subset.
    Uniform,
}

impl SamplingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::OctreeGrid => "octree_grid",
            SamplingStrategy::Fps => "fps",
            SamplingStrategy::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: SamplingStrategy,
    /// Octree leaf capacity.
    pub max_num_events: usize,
    /// Output size for `fps` and `uniform`.
    pub target_count: usize,
    /// Normalized timestamps span `[0, t_norm]`.
    pub t_norm: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: SamplingStrategy::OctreeGrid,
            max_num_events: 40,
            target_count: 256,
            t_norm: 64.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_num_events == 0 {
            return Err(Error::Config("sampling.max_num_events must be >= 1".into()));
        }
        if self.target_count == 0 {
            return Err(Error::Config("sampling.target_count must be >= 1".into()));
        }
        if !(self.t_norm > 0.0 && self.t_norm.is_finite()) {
            return Err(Error::Config("sampling.t_norm must be positive".into()));
        }
        Ok(())
    }

    /// Runs the configured strategy. `sample_id` decorrelates the random
    /// streams of different samples that share one config seed.
    pub fn apply(&self, points: &[NormPoint], sample_id: u64) -> Result<Vec<NormPoint>> {
        let seed = crate::rng::derive_seed(self.seed, &[sample_id]);
        match self.strategy {
            SamplingStrategy::OctreeGrid => octree_downsample(points, self.max_num_events, seed),
            // Small streams keep every point rather than failing.
            SamplingStrategy::Fps => {
                fps_downsample(points, self.target_count.min(points.len()), seed)
            }
            SamplingStrategy::Uniform => {
                uniform_downsample(points, self.target_count.min(points.len()), seed)
            }
        }
    }
}

/// Rescales timestamps affinely onto `[0, t_norm]`; a zero time span maps
/// every event to 0.
pub fn normalize_time(cloud: &EventCloud, t_norm: f64) -> Result<Vec<NormPoint>> {
    let events = cloud.events();
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(Error::InvalidArgument("cannot normalize an empty cloud".into())),
    };
    if !(t_norm > 0.0 && t_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_norm must be positive, got {t_norm}")));
    }
    // sorted input: first/last are the extremes
    let span = (last - first).max(1) as f64;
    Ok(events
        .iter()
        .map(|e| {
            NormPoint::new(
                e.x as f64,
                e.y as f64,
                (e.t - first) as f64 / span * t_norm,
                e.p,
            )
        })
        .collect())
}

#[derive(Clone, Copy)]
struct Cell {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Cell {
    fn bounding(points: &[NormPoint]) -> Cell {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (a, c) in p.coords().into_iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c);
            }
        }
        Cell { lo, hi }
    }

    fn max_edge(&self) -> f64 {
        (0..3).map(|a| self.hi[a] - self.lo[a]).fold(0.0, f64::max)
    }

    fn mid(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.lo[a] + self.hi[a]))
    }

    /// Octant code: bit `a` is set when the point lies in the upper half
    /// along axis `a` (x, y, t).
    fn octant(mid: &[f64; 3], c: &[f64; 3]) -> usize {
        (0..3).filter(|&a| c[a] >= mid[a]).map(|a| 1 << a).sum()
    }

    fn child(&self, code: usize) -> Cell {
        let mid = self.mid();
        let mut lo = self.lo;
        let mut hi = self.hi;
        for a in 0..3 {
            if code & (1 << a) != 0 {
                lo[a] = mid[a];
            } else {
                hi[a] = mid[a];
            }
        }
        Cell { lo, hi }
    }
}

/// Octree-grid sampling.
///
/// The tight bounding box of `points` is bisected at its midpoints along
/// x, y and t. A cell becomes a leaf once it holds at most `max_num_events`
/// points or its longest edge is at most one unit. Each non-empty leaf
/// contributes one of its points, picked uniformly at random. Leaves are
/// visited depth-first in octant order and points within a leaf keep their
/// input order, which fixes how the seeded stream is consumed.
pub fn octree_downsample(
    points: &[NormPoint],
    max_num_events: usize,
    seed: u64,
) -> Result<Vec<NormPoint>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("octree sampling needs points".into()));
    }
    if max_num_events == 0 {
        return Err(Error::InvalidArgument("max_num_events must be >= 1".into()));
    }
    let mut rng = rng_for(seed, &[]);
    let mut out = Vec::new();
    let all: Vec<u32> = (0..points.len() as u32).collect();
    let mut stack = vec![(Cell::bounding(points), all)];
    // LIFO stack: push children in reverse so octant 0 is visited first.
    while let Some((cell, members)) = stack.pop() {
        if members.len() <= max_num_events || cell.max_edge() <= 1.0 {
            let pick = members[rng.gen_range(0..members.len())];
            out.push(points[pick as usize]);
            continue;
        }
        let mid = cell.mid();
        let mut buckets: [Vec<u32>; 8] = Default::default();
        for &i in &members {
            buckets[Cell::octant(&mid, &points[i as usize].coords())].push(i);
        }
        for (code, bucket) in buckets.into_iter().enumerate().rev() {
            if !bucket.is_empty() {
                stack.push((cell.child(code), bucket));
            }
        }
    }
    Ok(out)
}

/// Farthest point sampling under the Euclidean spatio-temporal distance,
/// starting from a seeded random point.
pub fn fps_downsample(points: &[NormPoint], target_count: usize, seed: u64) -> Result<Vec<NormPoint>> {
    check_target(points, target_count)?;
    let first = rng_for(seed, &[]).gen_range(0..points.len());
    fps_from(points, target_count, first)
}

/// Farthest point sampling with a fixed first pick. Ties go to the lowest
/// index. Output is in selection order.
pub fn fps_from(points: &[NormPoint], target_count: usize, first: usize) -> Result<Vec<NormPoint>> {
    check_target(points, target_count)?;
    if first >= points.len() {
        return Err(Error::InvalidArgument(format!("first pick {first} out of range")));
    }
    let coords: Vec<[f64; 3]> = points.iter().map(NormPoint::coords).collect();
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut out = Vec::with_capacity(target_count);
    let mut current = first;
    for _ in 0..target_count {
        out.push(points[current]);
        min_dist[current] = f64::NEG_INFINITY;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, c) in coords.iter().enumerate() {
            if min_dist[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = distance(c, &coords[current]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best.0 {
                best = (min_dist[i], i);
            }
        }
        current = best.1;
    }
    Ok(out)
}

/// Uniform subset without replacement; output keeps input order.
pub fn uniform_downsample(
    points: &[NormPoint],
    target_count: usize,
    seed: u64,
) -> Result<Vec<NormPoint>> {
    check_target(points, target_count)?;
    let mut picked = index::sample(&mut rng_for(seed, &[]), points.len(), target_count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| points[i]).collect())
}

fn check_target(points: &[NormPoint], target_count: usize) -> Result<()> {
    if target_count == 0 {
        return Err(Error::InvalidArgument("target_count must be >= 1".into()));
    }
    if points.len() < target_count {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {target_count} of {} points",
            points.len()
        )));
    }
    Ok(())
}
