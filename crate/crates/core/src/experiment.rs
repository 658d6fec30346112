//! Data-set level steps shared by the command line and the tests:
//! phantom-set generation with a stratified split, and preprocessing of a
//! raw manifest into a model-ready one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PhantomSetConfig;
use crate::dataset::{DatasetManifest, LoadedManifest, ManifestEntry, Stage};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::phantom::{make_phantom_pair, PhantomSpec};
use crate::preprocess::{compute_clip_stats, Preprocessor, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_DIR: &str = "pairs";
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;

/// Splits `total` into integer shares proportional to `weights`
/// (largest remainder, ties to the earlier entry).
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn pair_paths(id: &str) -> (PathBuf, PathBuf) {
    let dir = Path::new(PAIRS_DIR);
    (dir.join(format!("{id}_x.jxp")), dir.join(format!("{id}_y.jxp")))
}

/// Writes `cfg.count` phantom pairs and `manifest.json` under `out_dir`.
pub fn generate_phantom_set(cfg: &PhantomSetConfig, out_dir: &Path, config_hash: Option<String>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let pairs = out_dir.join(PAIRS_DIR);
    fs::create_dir_all(&pairs).map_err(|e| Error::io(&pairs, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let weights: Vec<f64> = cfg.severity_mix.iter().map(|b| b.weight).collect();
    let mut bands: Vec<usize> = apportion(cfg.count, &weights)
        .into_iter()
        .enumerate()
        .flat_map(|(i, n)| std::iter::repeat_n(i, n))
        .collect();
    bands.shuffle(&mut rng);

    let mut manifest = DatasetManifest::new(Stage::Raw, cfg.size);
    manifest.config_hash = config_hash;
    for (i, &b) in bands.iter().enumerate() {
        let band = &cfg.severity_mix[b];
        let severity = if band.hi > band.lo { rng.random_range(band.lo..=band.hi) } else { band.lo };
        let spec = PhantomSpec {
            size: cfg.size,
            severity,
            num_blobs: cfg.num_blobs,
            smoothness_scale: cfg.smoothness_scale,
            noise_sd: cfg.noise_sd,
            seed: rng.random(),
        };
        let pair = make_phantom_pair(&spec)?;
        let id = format!("ph{i:05}");
        let (x_path, y_path) = pair_paths(&id);
        save_tensor(out_dir.join(&x_path), &pair.image)?;
        save_tensor(out_dir.join(&y_path), &pair.jmap.to_tensor())?;
        manifest.entries.push(ManifestEntry {
            id,
            x_path,
            y_path,
            severity_tag: Some(band.tag.clone()),
            split: Split::Train,
        });
    }
    assign_split(&mut manifest, cfg.test_count, cfg.seed);
    LoadedManifest::save(&manifest, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Marks test entries: the total (default 30%, rounded) is shared across
/// severity tags in proportion to their sizes, members chosen by a seeded
/// shuffle within each tag.
pub fn assign_split(manifest: &mut DatasetManifest, test_count: Option<usize>, seed: u64) {
    let n = manifest.entries.len();
    let total = test_count.unwrap_or_else(|| (n as f64 * DEFAULT_TEST_FRACTION).round() as usize).min(n);
    let mut groups: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.severity_tag.clone()).or_default().push(i);
    }
    let sizes: Vec<f64> = groups.values().map(|g| g.len() as f64).collect();
    let shares = apportion(total, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for (members, share) in groups.values_mut().zip(shares) {
        members.shuffle(&mut rng);
        for &i in members.iter().take(share) {
            manifest.entries[i].split = Split::Test;
        }
    }
}

/// Clip statistics from the train split, then clip/rescale/crop-pad every
/// pair into `out_dir`. Rerunning on the same input rewrites identical files.
pub fn preprocess_dataset(raw_manifest: &Path, out_dir: &Path, target: (usize, usize)) -> Result<DatasetManifest> {
    let raw = LoadedManifest::load(raw_manifest)?;
    if raw.manifest.stage != Stage::Raw {
        return Err(Error::Manifest(format!("{} is already preprocessed", raw_manifest.display())));
    }
    let train_maps = raw
        .manifest
        .entries_in(Split::Train)
        .map(|e| load_tensor(raw.resolve(&e.y_path)))
        .collect::<Result<Vec<_>>>()?;
    let stats = compute_clip_stats(train_maps.iter().map(|t| t.data()), Split::Train)?;
    let pre = Preprocessor::new(stats, target)?;

    let pairs = out_dir.join(PAIRS_DIR);
    fs::create_dir_all(&pairs).map_err(|e| Error::io(&pairs, e))?;
    let mut manifest = DatasetManifest::new(Stage::Processed, target);
    manifest.clip_stats = Some(stats);
    manifest.config_hash = raw.manifest.config_hash.clone();
    for e in &raw.manifest.entries {
        let x = pre.image(&load_tensor(raw.resolve(&e.x_path))?)?;
        let y = pre.jmap(&load_tensor(raw.resolve(&e.y_path))?)?;
        let (x_path, y_path) = pair_paths(&e.id);
        save_tensor(out_dir.join(&x_path), &x)?;
        save_tensor(out_dir.join(&y_path), &y)?;
        manifest.entries.push(ManifestEntry {
            x_path,
            y_path,
            ..e.clone()
        });
    }
    LoadedManifest::save(&manifest, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
