//! Dataset manifests, in-memory sample pairs and deterministic batching.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_tensor;
use crate::preprocess::{ClipStats, Split, BACKGROUND};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Images in HU and maps in expansion-ratio units.
    Raw,
    /// Both clipped, rescaled to `[-1, 1]` and cropped/padded.
    Processed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub x_path: PathBuf,
    pub y_path: PathBuf,
    pub severity_tag: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub stage: Stage,
    pub slice_size: (usize, usize),
    pub clip_stats: Option<ClipStats>,
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(stage: Stage, slice_size: (usize, usize)) -> Self {
        Self {
            version: MANIFEST_VERSION,
            stage,
            slice_size,
            clip_stats: None,
            config_hash: None,
            entries: Vec::new(),
        }
    }

    /// Checks id uniqueness and version; file existence is checked by
    /// [`LoadedManifest::load`].
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {}", e.id)));
            }
        }
        if self.stage == Stage::Processed && self.clip_stats.is_none() {
            return Err(Error::Manifest("processed manifest without clip_stats".into()));
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &manifest.entries {
            for p in [&e.x_path, &e.y_path] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry {} references missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(Self { manifest, root })
    }

    pub fn save(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads every pair of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SamplePair>> {
        let size = self.manifest.slice_size;
        self.manifest
            .entries_in(split)
            .map(|e| {
                let x = load_tensor(self.resolve(&e.x_path))?;
                let y = load_tensor(self.resolve(&e.y_path))?;
                SamplePair::new(e.id.clone(), x, y, e.severity_tag.clone(), size, self.manifest.stage)
            })
            .collect()
    }
}

/// One `(x, y)` slice pair. For processed data both lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub x: Tensor,
    pub y: Tensor,
    pub severity_tag: Option<String>,
}

impl SamplePair {
    pub fn new(id: String, x: Tensor, y: Tensor, severity_tag: Option<String>, size: (usize, usize), stage: Stage) -> Result<Self> {
        for (name, t) in [("x", &x), ("y", &y)] {
            if t.shape() != [size.0, size.1] {
                return Err(Error::Manifest(format!(
                    "{id}: {name} has shape {:?}, manifest slice size is {size:?}",
                    t.shape()
                )));
            }
            if stage == Stage::Processed && t.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Manifest(format!("{id}: {name} has values outside [-1, 1]")));
            }
        }
        Ok(Self {
            id,
            x,
            y,
            severity_tag,
        })
    }

    /// Pixels that belong to the lung region: everything except padding,
    /// which sits at the floor value in both slices.
    pub fn lung_mask(&self) -> Vec<bool> {
        lung_mask(self.x.data(), self.y.data())
    }
}

pub fn lung_mask(x: &[f32], y: &[f32]) -> Vec<bool> {
    x.iter().zip(y).map(|(&a, &b)| !(a <= BACKGROUND && b <= BACKGROUND)).collect()
}

/// Index lists for one epoch: a shuffle seeded by `(seed, epoch)`, cut into
/// full batches of `batch_size`; a short tail is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    if len == 0 {
        return Err(Error::Empty("split"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// A stacked batch: `x` and `y` are `[B, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
}

pub fn stack_batch(samples: &[SamplePair], indices: &[usize]) -> Result<Batch> {
    let xs: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].x).collect();
    let ys: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].y).collect();
    let add_channel = |t: Tensor| -> Result<Tensor> {
        let s = t.shape().to_vec();
        t.reshape(vec![s[0], 1, s[1], s[2]])
    };
    Ok(Batch {
        indices: indices.to_vec(),
        x: add_channel(Tensor::stack(&xs)?)?,
        y: add_channel(Tensor::stack(&ys)?)?,
    })
}

/// Iterator over one epoch's batches.
pub struct BatchIterator<'a> {
    samples: &'a [SamplePair],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(samples: &'a [SamplePair], batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        let batches = epoch_batches(samples.len(), batch_size, seed, epoch)?;
        Ok(Self {
            samples,
            batches: batches.into_iter(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.batches.len()
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        Some(stack_batch(self.samples, &idx))
    }
}
