//! From event files to model inputs: time normalization, sampling,
//! voxelization and graph construction, with an on-disk graph cache, plus
//! the end-to-end train and evaluate drivers.
//!
//! Node features:
//!
//! * point graph: `(x / width, y / height, t' / t_norm, polarity)`;
//! * voxel graph: `(cx / width, cy / height, ct / t_norm, descriptor...)`
//!   where `(cx, cy, ct)` is the cell center.
//!
//! Point graphs are built in normalized units. Voxel graphs are built in
//! lattice units (cell center divided by the voxel size), so the voxel
//! radius counts cells.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::classifier::{
    evaluate, init_model, train, BranchInput, EpochMetrics, EvalMetrics, PreparedSample, Readout, TrainState,
};
use crate::config::RunConfig;
use crate::event_io::{decode_binary, parse_csv, DatasetManifest, EventCloud, EventFormat, Split};
use crate::graph::{build_radius_graph, AbsorbingGraph};
use crate::rng::derive_seed;
use crate::sampling::{normalize_time, NormPoint, SamplingConfig};
use crate::tensor::Matrix;
use crate::voxelizer::{voxelize, VoxelizationConfig};
use crate::{Error, Result};

pub const POINT_FEATURES: usize = 4;

pub fn voxel_features(config: &VoxelizationConfig) -> usize {
    3 + config.feature_dim
}

/// Center-point graph of one sample.
pub fn point_graph(
    points: &[NormPoint],
    width: u16,
    height: u16,
    sampling: &SamplingConfig,
    radius: f64,
    sample_id: u64,
) -> Result<AbsorbingGraph> {
    let centers = sampling.apply(points, sample_id)?;
    let coords: Vec<[f64; 3]> = centers.iter().map(NormPoint::coords).collect();
    let mut features = Matrix::zeros((centers.len(), POINT_FEATURES));
    for (mut row, p) in features.outer_iter_mut().zip(&centers) {
        row[0] = p.x / width as f64;
        row[1] = p.y / height as f64;
        row[2] = p.t / sampling.t_norm;
        row[3] = p.polarity.sign() as f64;
    }
    build_radius_graph(&coords, &features, radius)
}

/// Top-K voxel graph of one sample.
pub fn voxel_graph(
    points: &[NormPoint],
    width: u16,
    height: u16,
    voxel: &VoxelizationConfig,
    t_norm: f64,
    radius: f64,
) -> Result<AbsorbingGraph> {
    let set = voxelize(points, voxel)?;
    let size = voxel.size.xyt();
    let coords: Vec<[f64; 3]> = set.voxels.iter().map(|v| [0, 1, 2].map(|a| v.coord[a] / size[a])).collect();
    let mut features = Matrix::zeros((set.len(), voxel_features(voxel)));
    for (mut row, v) in features.outer_iter_mut().zip(&set.voxels) {
        row[0] = v.coord[0] / width as f64;
        row[1] = v.coord[1] / height as f64;
        row[2] = v.coord[2] / t_norm;
        for (dst, src) in row.iter_mut().skip(3).zip(&v.feature) {
            *dst = *src;
        }
    }
    build_radius_graph(&coords, &features, radius)
}

/// Graphs of one sample; a branch switched off by the branch mode is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGraphs {
    pub point: Option<AbsorbingGraph>,
    pub voxel: Option<AbsorbingGraph>,
}

/// Counters shared by concurrent preprocessing tasks.
#[derive(Debug, Default)]
pub struct PrepStats {
    pub point_graphs_built: AtomicUsize,
    pub voxel_graphs_built: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub samples_computed: AtomicUsize,
}

impl PrepStats {
    pub fn point_graphs(&self) -> usize {
        self.point_graphs_built.load(Ordering::Relaxed)
    }

    pub fn voxel_graphs(&self) -> usize {
        self.voxel_graphs_built.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn computed(&self) -> usize {
        self.samples_computed.load(Ordering::Relaxed)
    }
}

pub fn preprocess_cloud(cloud: &EventCloud, config: &RunConfig, sample_id: u64, stats: &PrepStats) -> Result<SampleGraphs> {
    if cloud.is_empty() {
        return Err(Error::Validation(format!("sample {sample_id} has no events")));
    }
    let t_norm = config.sampling.t_norm;
    let points = normalize_time(cloud, t_norm)?;
    let mode = config.train.branch_mode;
    let point = if mode.uses_points() {
        stats.point_graphs_built.fetch_add(1, Ordering::Relaxed);
        Some(point_graph(
            &points,
            cloud.width(),
            cloud.height(),
            &config.sampling,
            config.graph.point_radius,
            sample_id,
        )?)
    } else {
        None
    };
    let voxel = if mode.uses_voxels() {
        stats.voxel_graphs_built.fetch_add(1, Ordering::Relaxed);
        Some(voxel_graph(
            &points,
            cloud.width(),
            cloud.height(),
            &config.voxel,
            t_norm,
            config.graph.voxel_radius,
        )?)
    } else {
        None
    };
    Ok(SampleGraphs { point, voxel })
}

const CACHE_MAGIC: &[u8; 4] = b"PVGC";
const CACHE_VERSION: u32 = 1;

fn encode_graph(g: &AbsorbingGraph, out: &mut Vec<u8>) {
    out.extend_from_slice(&(g.num_event_nodes() as u32).to_le_bytes());
    out.extend_from_slice(&(g.feature_dim() as u32).to_le_bytes());
    for c in g.coords().iter().flatten().chain(g.features().iter()) {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(g.edges().len() as u32).to_le_bytes());
    for (u, v) in g.edges() {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_graphs(graphs: &SampleGraphs) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(u8::from(graphs.point.is_some()) | u8::from(graphs.voxel.is_some()) << 1);
    for g in graphs.point.iter().chain(&graphs.voxel) {
        encode_graph(g, &mut out);
    }
    out
}

struct Cursor<'a>(&'a [u8], usize);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .0
            .get(self.1..self.1 + N)
            .ok_or_else(|| Error::parse(format!("offset {}", self.1), "truncated graph cache entry"))?;
        self.1 += N;
        Ok(s.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn decode_graph(c: &mut Cursor) -> Result<AbsorbingGraph> {
    let m = c.u32()?;
    let f = c.u32()?;
    let coords = (0..m)
        .map(|_| Ok([c.f64()?, c.f64()?, c.f64()?]))
        .collect::<Result<Vec<_>>>()?;
    let values = (0..m * f).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let features = Matrix::from_shape_vec((m, f), values).expect("length matches");
    let e = c.u32()?;
    let edges = (0..e)
        .map(|_| Ok((c.u32()? as u32, c.u32()? as u32)))
        .collect::<Result<Vec<_>>>()?;
    AbsorbingGraph::from_edges(coords, features, edges)
}

pub fn decode_graphs(bytes: &[u8]) -> Result<SampleGraphs> {
    let mut c = Cursor(bytes, 0);
    if &c.take::<4>()? != CACHE_MAGIC || u32::from_le_bytes(c.take()?) != CACHE_VERSION {
        return Err(Error::parse("offset 0", "not a graph cache entry of this version"));
    }
    let [flags] = c.take::<1>()?;
    let point = (flags & 1 != 0).then(|| decode_graph(&mut c)).transpose()?;
    let voxel = (flags & 2 != 0).then(|| decode_graph(&mut c)).transpose()?;
    if c.1 != bytes.len() {
        return Err(Error::parse(format!("offset {}", c.1), "trailing bytes in graph cache entry"));
    }
    Ok(SampleGraphs { point, voxel })
}

/// Per-sample graph files under `<root>/<preprocess hash>/`. Entries are
/// named by sample index and a digest of the event file, so a config change
/// or an edited file misses the cache.
#[derive(Debug, Clone)]
pub struct GraphCache {
    dir: PathBuf,
}

impl GraphCache {
    pub fn open(root: impl AsRef<Path>, config: &RunConfig) -> Result<Self> {
        let dir = root.as_ref().join(&config.preprocess_hash()[..16]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(GraphCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, sample_id: usize, content: &[u8]) -> PathBuf {
        let digest: String = Sha256::digest(content)[..8].iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{sample_id:06}-{digest}.bin"))
    }

    /// Exclusive advisory lock held until the returned file is dropped.
    pub fn lock(&self) -> Result<File> {
        let path = self.dir.join(".lock");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        Ok(file)
    }

    /// A missing or unreadable entry is a miss.
    fn load(&self, path: &Path) -> Option<SampleGraphs> {
        let bytes = fs::read(path).ok()?;
        match decode_graphs(&bytes) {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn store(&self, path: &Path, graphs: &SampleGraphs) -> Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, encode_graphs(graphs)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn decode_cloud(bytes: &[u8], path: &Path, manifest: &DatasetManifest) -> Result<EventCloud> {
    let located = |e: Error| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    };
    match EventFormat::from_path(path, manifest.sensor_width, manifest.sensor_height) {
        EventFormat::Binary => decode_binary(bytes).map_err(located),
        EventFormat::Csv { width, height } => {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| Error::parse(path.display().to_string(), "CSV file is not UTF-8"))?;
            parse_csv(text, width, height).map_err(located)
        }
    }
}

/// Graphs for manifest entries `indices`, computed in parallel. Results are
/// in `indices` order and independent of the thread count.
pub fn preprocess_samples(
    manifest: &DatasetManifest,
    indices: &[usize],
    config: &RunConfig,
    cache: Option<&GraphCache>,
    stats: &PrepStats,
) -> Result<Vec<SampleGraphs>> {
    let _guard = cache.map(GraphCache::lock).transpose()?;
    let start = Instant::now();
    let out = indices
        .par_iter()
        .map(|&i| {
            let path = manifest.sample_path(i);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let entry = cache.map(|c| c.entry(i, &bytes));
            if let Some(graphs) = cache.zip(entry.as_ref()).and_then(|(c, p)| c.load(p)) {
                stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(graphs);
            }
            let cloud = decode_cloud(&bytes, &path, manifest)?;
            let graphs = preprocess_cloud(&cloud, config, i as u64, stats)?;
            stats.samples_computed.fetch_add(1, Ordering::Relaxed);
            if let (Some(c), Some(p)) = (cache, &entry) {
                c.store(p, &graphs)?;
            }
            Ok(graphs)
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "preprocessed {} samples in {:.2?} ({} cached, {} computed)",
        indices.len(),
        start.elapsed(),
        stats.hits(),
        stats.computed()
    );
    Ok(out)
}

/// Model inputs for every sample of `split`.
pub fn prepare_split(
    manifest: &DatasetManifest,
    split: Split,
    config: &RunConfig,
    cache: Option<&GraphCache>,
    stats: &PrepStats,
) -> Result<Vec<PreparedSample>> {
    let indices = manifest.indices(split);
    let graphs = preprocess_samples(manifest, &indices, config, cache, stats)?;
    Ok(to_samples(manifest, &indices, graphs, config.model.readout))
}

pub fn to_samples(
    manifest: &DatasetManifest,
    indices: &[usize],
    graphs: Vec<SampleGraphs>,
    readout: Readout,
) -> Vec<PreparedSample> {
    indices
        .iter()
        .zip(graphs)
        .map(|(&i, g)| PreparedSample {
            id: i,
            label: manifest.samples[i].label,
            point: g.point.map(|g| BranchInput::new(g, readout)),
            voxel: g.voxel.map(|g| BranchInput::new(g, readout)),
        })
        .collect()
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Fresh model for `config` and `num_classes`.
pub fn new_train_state(config: &RunConfig, num_classes: usize) -> Result<TrainState> {
    let model = init_model(
        &config.model,
        config.train.branch_mode,
        POINT_FEATURES,
        voxel_features(&config.voxel),
        num_classes,
        config.train.dropout,
        derive_seed(config.train.seed, &[0x1417]),
    )?;
    Ok(TrainState::new(model, config.train.seed))
}

/// Trains on already prepared samples.
pub fn train_prepared(
    config: &RunConfig,
    num_classes: usize,
    train_set: &[PreparedSample],
    test_set: &[PreparedSample],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    config.validate()?;
    let state = new_train_state(config, num_classes)?;
    let outcome = train(state, train_set, test_set, &config.train, on_epoch)?;
    Ok(TrainRun {
        checkpoint: Checkpoint::new(config.clone(), POINT_FEATURES, voxel_features(&config.voxel), outcome.state),
        metrics: outcome.metrics,
    })
}

/// Preprocesses both splits of `manifest` and trains a fresh model.
pub fn train_run(
    config: &RunConfig,
    manifest: &DatasetManifest,
    cache: Option<&GraphCache>,
    stats: &PrepStats,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    config.validate()?;
    let train_set = prepare_split(manifest, Split::Train, config, cache, stats)?;
    let test_set = prepare_split(manifest, Split::Test, config, cache, stats)?;
    train_prepared(config, manifest.num_classes, &train_set, &test_set, on_epoch)
}

/// Evaluates a checkpoint on one split, preprocessing with the checkpoint's
/// own configuration.
pub fn evaluate_run(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    cache: Option<&GraphCache>,
    stats: &PrepStats,
) -> Result<EvalMetrics> {
    if manifest.num_classes != checkpoint.num_classes {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} classes, manifest has {}",
            checkpoint.num_classes, manifest.num_classes
        )));
    }
    let samples = prepare_split(manifest, split, &checkpoint.config, cache, stats)?;
    evaluate(checkpoint.model(), &samples)
}


/// Sweep axes of the ablation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Branch,
    Blocks,
    VoxelK,
    VoxelSize,
    MaxNumEvents,
    Sampling,
    Readout,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Branch,
        AblationAxis::Blocks,
        AblationAxis::VoxelK,
        AblationAxis::VoxelSize,
        AblationAxis::MaxNumEvents,
        AblationAxis::Sampling,
        AblationAxis::Readout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Branch => "branch",
            AblationAxis::Blocks => "blocks",
            AblationAxis::VoxelK => "voxel_k",
            AblationAxis::VoxelSize => "voxel_size",
            AblationAxis::MaxNumEvents => "max_num_events",
            AblationAxis::Sampling => "sampling",
            AblationAxis::Readout => "readout",
        }
    }

    /// Config key each value is written to; `voxel_size` sets all three
    /// edges.
    fn keys(self) -> &'static [&'static str] {
        match self {
            AblationAxis::Branch => &["train.branch_mode"],
            AblationAxis::Blocks => &["model.blocks"],
            AblationAxis::VoxelK => &["voxel.top_k"],
            AblationAxis::VoxelSize => &["voxel.size.h", "voxel.size.w", "voxel.size.t"],
            AblationAxis::MaxNumEvents => &["sampling.max_num_events"],
            AblationAxis::Sampling => &["sampling.strategy"],
            AblationAxis::Readout => &["model.readout"],
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Branch => &["dual", "point_only", "voxel_only"],
            AblationAxis::Blocks => &["1", "2", "3"],
            AblationAxis::VoxelK => &["1024", "1536", "2048", "2560", "3072"],
            AblationAxis::VoxelSize => &["2", "3", "4", "5", "6"],
            AblationAxis::MaxNumEvents => &["20", "40", "60"],
            AblationAxis::Sampling => &["fps", "uniform", "octree_grid"],
            AblationAxis::Readout => &["absorbing", "max_pool"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// One configuration per value, derived from `base`.
    pub fn settings(self, base: &RunConfig, values: &[String]) -> Result<Vec<(String, RunConfig)>> {
        values
            .iter()
            .map(|v| {
                let mut cfg = base.clone();
                for key in self.keys() {
                    cfg.set(key, v)?;
                }
                cfg.validate()?;
                Ok((v.clone(), cfg))
            })
            .collect()
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[cfg(test)]
mod ablation_tests {
    use super::*;
    use crate::classifier::BranchMode;
    use crate::sampling::SamplingStrategy;

    #[test]
    fn axes_expand_to_documented_rows() {
        let base = RunConfig::default();
        let rows = |a: AblationAxis| a.settings(&base, &a.default_values()).unwrap();
        assert_eq!(rows(AblationAxis::Blocks).len(), 3);
        assert_eq!(rows(AblationAxis::VoxelK).len(), 5);
        let sampling = rows(AblationAxis::Sampling);
        assert_eq!(sampling[0].1.sampling.strategy, SamplingStrategy::Fps);
        assert_eq!(sampling[1].1.sampling.strategy, SamplingStrategy::Uniform);
        assert_eq!(sampling[2].1.sampling.strategy, SamplingStrategy::OctreeGrid);
        assert_eq!(rows(AblationAxis::Branch)[1].1.train.branch_mode, BranchMode::PointOnly);
        let size = &rows(AblationAxis::VoxelSize)[0].1.voxel.size;
        assert_eq!((size.h, size.w, size.t), (2.0, 2.0, 2.0));
        assert!("nonsense".parse::<AblationAxis>().is_err());
        assert_eq!("voxel_k".parse::<AblationAxis>().unwrap(), AblationAxis::VoxelK);
    }
}
