//! Checkpoint directories.
//!
//! ```text
//! <dir>/checkpoint.json            model + train config, counters, history
//! <dir>/generator/<name>.jxp       one tensor file per parameter
//! <dir>/generator.adam_m/<name>.jxp
//! <dir>/generator.adam_v/<name>.jxp
//! <dir>/discriminator...           same layout, when present
//! ```
//!
//! Contents are a pure function of the training state; there are no
//! timestamps, so identical runs give byte-identical directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::RunningStats;
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::networks::{ModelSpec, NetworkParams};
use crate::optim::{AdamConfig, AdamState, ParamMap};
use crate::trainer::{EpochLog, TrainConfig, TrainState, Trainer};

pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "checkpoint.json";
pub const FINAL: &str = "final";

pub fn initial_name() -> String {
    epoch_name(0)
}

pub fn epoch_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRecord {
    seed: u64,
    /// Parameter names with their shapes.
    params: BTreeMap<String, Vec<usize>>,
    buffers: BTreeMap<String, RunningStats>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    config: AdamConfig,
    step_count: u64,
    skipped_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config_hash: Option<String>,
    model: ModelSpec,
    train: TrainConfig,
    epoch: usize,
    global_step: u64,
    generator: NetRecord,
    discriminator: Option<NetRecord>,
    adam_g: AdamRecord,
    adam_d: Option<AdamRecord>,
    history: Vec<EpochLog>,
}

fn write_map(dir: &Path, map: &ParamMap) -> Result<()> {
    for (name, t) in map {
        save_tensor(dir.join(format!("{name}.jxp")), t)?;
    }
    Ok(())
}

fn read_map(dir: &Path, shapes: &BTreeMap<String, Vec<usize>>) -> Result<ParamMap> {
    shapes
        .iter()
        .map(|(name, shape)| {
            let path = dir.join(format!("{name}.jxp"));
            let t = load_tensor(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("{} has shape {:?}, manifest says {shape:?}", path.display(), t.shape()),
                ));
            }
            Ok((name.clone(), t))
        })
        .collect()
}

fn net_record(p: &NetworkParams) -> NetRecord {
    NetRecord {
        seed: p.seed,
        params: p.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        buffers: p.buffers.clone(),
    }
}

fn adam_record(a: &AdamState) -> AdamRecord {
    AdamRecord {
        config: a.config,
        step_count: a.step_count,
        skipped_steps: a.skipped_steps,
    }
}

fn write_net(root: &Path, prefix: &str, net: &NetworkParams, adam: &AdamState) -> Result<()> {
    write_map(&root.join(prefix), &net.params)?;
    write_map(&root.join(format!("{prefix}.adam_m")), &adam.first_moment)?;
    write_map(&root.join(format!("{prefix}.adam_v")), &adam.second_moment)
}

fn read_net(root: &Path, prefix: &str, rec: &NetRecord, adam: &AdamRecord) -> Result<(NetworkParams, AdamState)> {
    let params = read_map(&root.join(prefix), &rec.params)?;
    let first_moment = read_map(&root.join(format!("{prefix}.adam_m")), &rec.params)?;
    let second_moment = read_map(&root.join(format!("{prefix}.adam_v")), &rec.params)?;
    Ok((
        NetworkParams {
            params,
            buffers: rec.buffers.clone(),
            seed: rec.seed,
        },
        AdamState {
            config: adam.config,
            first_moment,
            second_moment,
            step_count: adam.step_count,
            skipped_steps: adam.skipped_steps,
        },
    ))
}

/// Writes `trainer` to `dir`, replacing whatever was there.
pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    let st = &trainer.state;
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    write_net(&staging, "generator", &st.generator, &st.adam_g)?;
    if let (Some(d), Some(a)) = (&st.discriminator, &st.adam_d) {
        write_net(&staging, "discriminator", d, a)?;
    }
    let manifest = Manifest {
        version: VERSION,
        config_hash: trainer.config_hash.clone(),
        model: trainer.model.clone(),
        train: trainer.config.clone(),
        epoch: st.epoch,
        global_step: st.global_step,
        generator: net_record(&st.generator),
        discriminator: st.discriminator.as_ref().map(net_record),
        adam_g: adam_record(&st.adam_g),
        adam_d: st.adam_d.as_ref().map(adam_record),
        history: st.history.clone(),
    };
    let path = staging.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.version != VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint version {} (expected {VERSION})",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// Restores a trainer able to continue exactly where the saved one stopped.
pub fn load(dir: &Path) -> Result<Trainer> {
    let m = read_manifest(dir)?;
    let (generator, adam_g) = read_net(dir, "generator", &m.generator, &m.adam_g)?;
    let (discriminator, adam_d) = match (&m.discriminator, &m.adam_d) {
        (Some(r), Some(a)) => {
            let (d, s) = read_net(dir, "discriminator", r, a)?;
            (Some(d), Some(s))
        }
        (None, None) => (None, None),
        _ => return Err(Error::Config("checkpoint has a discriminator without optimizer state".into())),
    };
    let state = TrainState {
        epoch: m.epoch,
        global_step: m.global_step,
        generator,
        discriminator,
        adam_g,
        adam_d,
        history: m.history,
    };
    let mut t = Trainer::from_state(m.model, m.train, state)?;
    t.config_hash = m.config_hash;
    Ok(t)
}

/// Generator weights and model description only, for inference.
pub fn load_generator(dir: &Path) -> Result<(ModelSpec, NetworkParams, Option<String>)> {
    let m = read_manifest(dir)?;
    let params = read_map(&dir.join("generator"), &m.generator.params)?;
    Ok((
        m.model,
        NetworkParams {
            params,
            buffers: m.generator.buffers,
            seed: m.generator.seed,
        },
        m.config_hash,
    ))
}
