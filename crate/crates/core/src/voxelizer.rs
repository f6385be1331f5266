//! Spatio-temporal voxelization with top-K selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::event_io::Polarity;
use crate::sampling::NormPoint;
use crate::{Error, Result};

/// Voxel edge lengths: `h` along y, `w` along x, `t` along normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelSize {
    pub h: f64,
    pub w: f64,
    pub t: f64,
}

impl VoxelSize {
    pub fn cube(edge: f64) -> Self {
        VoxelSize {
            h: edge,
            w: edge,
            t: edge,
        }
    }

    /// Edge lengths in (x, y, t) axis order.
    pub fn xyt(&self) -> [f64; 3] {
        [self.w, self.h, self.t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelizationConfig {
    pub size: VoxelSize,
    pub top_k: usize,
    /// Descriptor width C: two polarity fractions plus `C - 2` temporal bins.
    pub feature_dim: usize,
}

impl Default for VoxelizationConfig {
    fn default() -> Self {
        VoxelizationConfig {
            size: VoxelSize::cube(4.0),
            top_k: 2048,
            feature_dim: 2,
        }
    }
}

impl VoxelizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.size.xyt().iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config("voxel sizes must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("voxel.top_k must be >= 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("voxel.feature_dim must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    /// Integer cell index along (x, y, t).
    pub index: [i64; 3],
    /// Cell center in normalized units.
    pub coord: [f64; 3],
    pub count: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    /// Sorted by count descending, then cell index ascending.
    pub voxels: Vec<VoxelCell>,
    pub label: Option<usize>,
    /// Events in non-empty cells that did not make the top-K cut.
    pub dropped_events: usize,
    pub occupied_cells: usize,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

pub fn cell_index(p: &NormPoint, size: &VoxelSize) -> [i64; 3] {
    let s = size.xyt();
    let c = p.coords();
    [0, 1, 2].map(|a| (c[a] / s[a]).floor() as i64)
}

/// Groups points into voxels and keeps the `top_k` most populated ones.
pub fn voxelize(points: &[NormPoint], config: &VoxelizationConfig) -> Result<VoxelSet> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("voxelization needs points".into()));
    }
    config.validate()?;
    let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_index(p, &config.size)).or_default().push(i as u32);
    }
    let mut ranked: Vec<([i64; 3], Vec<u32>)> = cells.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let occupied_cells = ranked.len();
    let dropped_events = ranked.iter().skip(config.top_k).map(|c| c.1.len()).sum();
    let s = config.size.xyt();
    let mut members = Vec::new();
    let voxels = ranked
        .into_iter()
        .take(config.top_k)
        .map(|(index, idx)| {
            members.clear();
            members.extend(idx.iter().map(|&i| points[i as usize]));
            let t_lo = index[2] as f64 * s[2];
            let feature = voxel_feature(&members, config.feature_dim, (t_lo, t_lo + s[2]))?;
            Ok(VoxelCell {
                index,
                coord: [0, 1, 2].map(|a| (index[a] as f64 + 0.5) * s[a]),
                count: idx.len(),
                feature,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoxelSet {
        voxels,
        label: None,
        dropped_events,
        occupied_cells,
    })
}

/// Voxel descriptor: `(n+/n, n-/n)` followed, when `feature_dim > 2`, by a
/// normalized histogram of event times over `t_window` with
/// `feature_dim - 2` bins.
pub fn voxel_feature(events: &[NormPoint], feature_dim: usize, t_window: (f64, f64)) -> Result<Vec<f64>> {
    if events.is_empty() {
        return Err(Error::InvalidArgument("voxel feature of an empty cell".into()));
    }
    if feature_dim < 2 {
        return Err(Error::InvalidArgument("voxel feature needs at least 2 channels".into()));
    }
    let n = events.len() as f64;
    let positive = events.iter().filter(|e| e.polarity == Polarity::Positive).count() as f64;
    let mut feature = vec![0.0; feature_dim];
    feature[0] = positive / n;
    feature[1] = (n - positive) / n;
    let bins = feature_dim - 2;
    if bins > 0 {
        let width = (t_window.1 - t_window.0).max(f64::MIN_POSITIVE);
        for e in events {
            let b = (((e.t - t_window.0) / width) * bins as f64).floor();
            let b = (b.max(0.0) as usize).min(bins - 1);
            feature[2 + b] += 1.0 / n;
        }
    }
    Ok(feature)
}
