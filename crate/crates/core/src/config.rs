//! Experiment configuration: one JSON document that fixes a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{build_baseline, ModelKind, ModelSpec, Scale};
use crate::trainer::TrainConfig;

/// Severity draw for one tag: uniform in `[lo, hi]`, share of samples by `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityBand {
    pub tag: String,
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

impl SeverityBand {
    fn new(tag: &str, lo: f64, hi: f64) -> Self {
        Self {
            tag: tag.into(),
            lo,
            hi,
            weight: 1.0,
        }
    }
}

pub fn default_severity_mix() -> Vec<SeverityBand> {
    vec![
        SeverityBand::new("low", 0.0, 0.3),
        SeverityBand::new("mid", 0.35, 0.65),
        SeverityBand::new("high", 0.7, 1.0),
    ]
}

/// Parses `tag:lo-hi[:weight],...`, e.g. `low:0-0.3,high:0.7-1:2`.
pub fn parse_severity_mix(spec: &str) -> Result<Vec<SeverityBand>> {
    let bad = |part: &str| Error::Config(format!("severity band {part:?}: expected tag:lo-hi[:weight]"));
    let bands = spec
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let fields: Vec<&str> = part.split(':').collect();
            if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
                return Err(bad(part));
            }
            let (lo, hi) = fields[1].split_once('-').ok_or_else(|| bad(part))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(part));
            Ok(SeverityBand {
                tag: fields[0].to_string(),
                lo: num(lo)?,
                hi: num(hi)?,
                weight: if fields.len() == 3 { num(fields[2])? } else { 1.0 },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_mix(&bands)?;
    Ok(bands)
}

fn validate_mix(bands: &[SeverityBand]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Config("severity mix has no bands".into()));
    }
    for (i, b) in bands.iter().enumerate() {
        if !(0.0 <= b.lo && b.lo <= b.hi && b.hi <= 1.0) {
            return Err(Error::Config(format!("severity band {}: need 0 <= lo <= hi <= 1", b.tag)));
        }
        if !(b.weight > 0.0 && b.weight.is_finite()) {
            return Err(Error::Config(format!("severity band {}: weight must be > 0", b.tag)));
        }
        if bands[..i].iter().any(|o| o.tag == b.tag) {
            return Err(Error::Config(format!("severity tag {} listed twice", b.tag)));
        }
    }
    Ok(())
}

/// Synthetic data set: sizes, phantom generator knobs and the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub count: usize,
    /// `None` gives a 70/30 split stratified by tag.
    pub test_count: Option<usize>,
    pub size: (usize, usize),
    pub severity_mix: Vec<SeverityBand>,
    pub num_blobs: usize,
    pub smoothness_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        Self {
            count: 650,
            test_count: Some(150),
            size: (64, 64),
            severity_mix: default_severity_mix(),
            num_blobs: 12,
            smoothness_scale: 6.0,
            noise_sd: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSetConfig {
    pub fn validate(&self) -> Result<()> {
        validate_mix(&self.severity_mix)?;
        if let Some(t) = self.test_count {
            if t > self.count {
                return Err(Error::Config(format!("test_count {t} exceeds count {}", self.count)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Phantom pairs and the raw manifest.
    pub raw_dir: PathBuf,
    /// Preprocessed pairs and manifest.
    pub data_dir: PathBuf,
    /// Checkpoints, training log, reports.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            raw_dir: "data/raw".into(),
            data_dir: "data/processed".into(),
            run_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub phantom: PhantomSetConfig,
    pub paths: Paths,
}

impl ExperimentConfig {
    /// 64x64 phantoms, batch 16, 200 epochs.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            scale: Scale::Desk,
            model: build_baseline(kind, Scale::Desk),
            train: TrainConfig::default(),
            phantom: PhantomSetConfig::default(),
            paths: Paths::default(),
        }
    }

    /// 256x256 slices, batch 64, full-width networks.
    pub fn paper(kind: ModelKind) -> Self {
        Self {
            scale: Scale::Paper,
            model: build_baseline(kind, Scale::Paper),
            train: TrainConfig {
                batch_size: 64,
                ..TrainConfig::default()
            },
            phantom: PhantomSetConfig {
                size: (256, 256),
                ..PhantomSetConfig::default()
            },
            paths: Paths::default(),
        }
    }

    pub fn preset(name: &str, kind: ModelKind) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(kind)),
            "paper" => Ok(Self::paper(kind)),
            other => Err(Error::Unknown {
                what: "preset",
                name: other.to_string(),
            }),
        }
    }

    /// Swaps in the baseline of `kind` at this config's scale, keeping the
    /// slice size.
    pub fn with_model(mut self, kind: ModelKind) -> Self {
        let slice = self.model.generator.slice_size;
        self.model = build_baseline(kind, self.scale);
        self.model.generator.slice_size = slice;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        let (h, w) = self.phantom.size;
        let s = self.model.generator.slice_size;
        if (h, w) != (s, s) {
            return Err(Error::Config(format!(
                "phantom size {h}x{w} differs from generator slice size {s}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Parses and validates; parse errors carry line and column.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
