use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{read_events, EventCloud, EventFormat};
use crate::rng::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// A labeled dataset with its train/test assignment, stored as JSON.
///
/// ```json
/// {
///   "name": "synthetic",
///   "num_classes": 4,
///   "seed": 0,
///   "sensor_width": 64,
///   "sensor_height": 64,
///   "samples": [
///     { "path": "class00_00000.evs", "label": 0, "split": "train" }
///   ]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub seed: u64,
    /// Sensor size used for CSV files, which carry no header.
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let mut train = HashSet::new();
        let mut test = HashSet::new();
        for s in &self.samples {
            if s.label >= self.num_classes {
                return Err(Error::Validation(format!(
                    "{}: label {} >= num_classes {}",
                    s.path.display(),
                    s.label,
                    self.num_classes
                )));
            }
            match s.split {
                Split::Train => train.insert(&s.path),
                Split::Test => test.insert(&s.path),
            };
        }
        if let Some(p) = train.intersection(&test).next() {
            return Err(Error::Validation(format!(
                "{} appears in both train and test splits",
                p.display()
            )));
        }
        Ok(())
    }

    /// Indices of samples in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sample_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.samples[index].path)
    }

    pub fn load_sample(&self, index: usize) -> Result<EventCloud> {
        let path = self.sample_path(index);
        let format = EventFormat::from_path(&path, self.sensor_width, self.sensor_height);
        Ok(read_events(&path, format)?.with_label(self.samples[index].label))
    }

    /// Assigns `n` items to train/test with `round(n * train_fraction)` train
    /// items, chosen by a seeded shuffle.
    pub fn stratified_assignment(n: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[]));
        let mut out = vec![Split::Test; n];
        for &i in &order[..n_train.min(n)] {
            out[i] = Split::Train;
        }
        out
    }
}
