//! Adversarial training loop with top-k generator updates.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::dataset::{stack_batch, Batch, BatchIterator, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialKind};
use crate::networks::{discriminator_forward, generator_forward, ModelSpec, NetworkParams};
use crate::optim::{AdamConfig, AdamState, StepOutcome};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,k,d_loss,g_adv,g_ch,seconds";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps_adam: f32,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        self.adam(self.lr_g).validate()?;
        self.adam(self.lr_d).validate()
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }

    /// The full `k` schedule, one entry per epoch.
    pub fn k_schedule(&self) -> Vec<usize> {
        (0..self.epochs)
            .map(|e| k_for_epoch(e, self.batch_size, self.epochs))
            .collect()
    }
}

/// Number of samples kept for the generator update in `epoch`.
///
/// Starts at `B`, drops every 10 epochs and lands on `B/2` in the decade
/// holding the last epoch. The per-decade step is sized from the number of
/// decay points available, `floor((total - 1) / 10)`.
pub fn k_for_epoch(epoch: usize, batch_size: usize, total_epochs: usize) -> usize {
    let half = batch_size / 2;
    let decays = (total_epochs.saturating_sub(1) / 10).max(1);
    let step = half.div_ceil(decays);
    let drop = (epoch / 10).saturating_mul(step);
    batch_size.saturating_sub(drop).max(half)
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select_top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Per-epoch mean losses. Wall time is reported alongside but never stored,
/// so checkpoints stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub k: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_ch: f64,
}

impl EpochLog {
    pub fn csv_row(&self, seconds: f64) -> String {
        format!(
            "{},{},{},{},{},{seconds:.3}",
            self.epoch, self.k, self.d_loss, self.g_adv, self.g_ch
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_recon: f32,
    pub skipped_d: bool,
    pub skipped_g: bool,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub generator: NetworkParams,
    pub discriminator: Option<NetworkParams>,
    pub adam_g: AdamState,
    pub adam_d: Option<AdamState>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelSpec,
    /// Hash of the experiment config, recorded in checkpoints.
    pub config_hash: Option<String>,
    pub config: TrainConfig,
    pub state: TrainState,
}

fn discriminator_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Trainer {
    pub fn new(model: ModelSpec, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let generator = NetworkParams::generator(&model.generator, config.seed)?;
        let discriminator = model
            .discriminator
            .as_ref()
            .map(|d| NetworkParams::discriminator(d, discriminator_seed(config.seed)))
            .transpose()?;
        let adam_g = AdamState::new(config.adam(config.lr_g), &generator.params);
        let adam_d = discriminator
            .as_ref()
            .map(|d| AdamState::new(config.adam(config.lr_d), &d.params));
        Ok(Self {
            model,
            config_hash: None,
            config,
            state: TrainState {
                epoch: 0,
                global_step: 0,
                generator,
                discriminator,
                adam_g,
                adam_d,
                history: Vec::new(),
            },
        })
    }

    pub fn from_state(model: ModelSpec, config: TrainConfig, state: TrainState) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        if model.discriminator.is_some() != state.discriminator.is_some() {
            return Err(Error::Config("checkpoint and model disagree on the discriminator".into()));
        }
        Ok(Self {
            model,
            config_hash: None,
            config,
            state,
        })
    }

    pub fn k_at(&self, epoch: usize) -> usize {
        if self.model.drs {
            k_for_epoch(epoch, self.config.batch_size, self.config.epochs)
        } else {
            self.config.batch_size
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch, k: usize) -> Result<StepLog> {
        let b = batch.x.shape()[0];
        if b != self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch holds {b} samples, batch_size is {}",
                self.config.batch_size
            )));
        }
        if k == 0 || k > b {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={b}")));
        }
        let mut log = StepLog::default();
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = g.constant(batch.y.clone());
        let gen_cfg = self.model.generator.clone();
        let st = &mut self.state;
        let mut gen_bound = st.generator.bind(&mut g, true, true);
        let fake = generator_forward(&mut g, &gen_cfg, &mut gen_bound, x)?;

        let adv_kind = self.model.adversarial;
        let score_fake = match (&self.model.discriminator, st.discriminator.as_mut(), adv_kind) {
            (Some(dcfg), Some(disc), Some(kind)) => {
                let adam_d = st.adam_d.as_mut().expect("discriminator optimizer");
                let (d_loss, skipped) = discriminator_update(disc, adam_d, dcfg, kind, batch, g.value(fake))?;
                log.d_loss = d_loss;
                log.skipped_d = skipped;
                let mut d_bound = disc.bind(&mut g, false, true);
                Some(discriminator_forward(&mut g, dcfg, &mut d_bound, x, fake)?)
            }
            _ => None,
        };

        let (score_sel, fake_sel, y_sel) = match score_fake {
            Some(s) if self.model.drs => {
                let per_sample = g.sample_mean(s);
                let kept = select_top_k(g.value(per_sample).data(), k);
                (
                    Some(g.select_batch(s, &kept)?),
                    g.select_batch(fake, &kept)?,
                    g.select_batch(y, &kept)?,
                )
            }
            s => (s, fake, y),
        };

        let recon = losses::recon_loss(&mut g, fake_sel, y_sel, &self.model.loss)?;
        let total = match (score_sel, adv_kind) {
            (Some(s), Some(kind)) => {
                let adv = losses::generator_adv(&mut g, s, kind);
                log.g_adv = losses::scalar(&g, adv.total);
                g.add(adv.total, recon.total)?
            }
            _ => recon.total,
        };
        log.g_recon = losses::scalar(&g, recon.total);
        let value = losses::scalar(&g, total);
        if !value.is_finite() {
            log::warn!("generator loss is {value} at step {}; update skipped", st.global_step);
            log.skipped_g = true;
        } else {
            g.backward(total)?;
            let grads = gen_bound.grads(&g);
            drop(gen_bound);
            log.skipped_g = st.adam_g.step(&mut st.generator.params, &grads)? == StepOutcome::SkippedNonFinite;
        }
        st.global_step += 1;
        Ok(log)
    }

    /// Runs the remaining epochs. With `out_dir`, appends to the CSV log and
    /// writes checkpoints there.
    pub fn fit(&mut self, train: &[SamplePair], out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog, f64)) -> Result<()> {
        if train.len() < self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "{} training pairs cannot fill one batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        if let Some(dir) = out_dir {
            prepare_log(dir, self.state.epoch)?;
            if self.state.epoch == 0 && self.state.global_step == 0 {
                checkpoint::save(self, &dir.join(checkpoint::initial_name()))?;
            }
        }
        while self.state.epoch < self.config.epochs {
            let epoch = self.state.epoch;
            let started = Instant::now();
            let k = self.k_at(epoch);
            let mut sums = [0.0f64; 3];
            let mut steps = 0usize;
            for batch in BatchIterator::new(train, self.config.batch_size, self.config.seed, epoch as u64)? {
                let s = self.train_step(&batch?, k)?;
                sums[0] += s.d_loss as f64;
                sums[1] += s.g_adv as f64;
                sums[2] += s.g_recon as f64;
                steps += 1;
            }
            let n = steps.max(1) as f64;
            let entry = EpochLog {
                epoch,
                k,
                d_loss: sums[0] / n,
                g_adv: sums[1] / n,
                g_ch: sums[2] / n,
            };
            let seconds = started.elapsed().as_secs_f64();
            self.state.epoch += 1;
            if let Some(dir) = out_dir {
                append_log(dir, &entry, seconds)?;
            }
            on_epoch(&entry, seconds);
            self.state.history.push(entry);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.state.epoch % every == 0 && self.state.epoch < self.config.epochs {
                    checkpoint::save(self, &dir.join(checkpoint::epoch_name(self.state.epoch)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            checkpoint::save(self, &dir.join(checkpoint::FINAL))?;
        }
        Ok(())
    }

    /// Generator output for `x [N, 1, H, W]` using running statistics.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        predict(&self.model, &mut self.state.generator, x)
    }
}

/// Inference: batch-norm generators use their running statistics.
pub fn predict(model: &ModelSpec, generator: &mut NetworkParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut bound = generator.bind(&mut g, false, false);
    let out = generator_forward(&mut g, &model.generator, &mut bound, xv)?;
    Ok(g.value(out).clone())
}

/// Predicts every sample in order, `batch` at a time. Returns `[H, W]` maps.
pub fn predict_samples(model: &ModelSpec, generator: &mut NetworkParams, samples: &[SamplePair], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = stack_batch(samples, chunk)?;
        let y = predict(model, generator, &b.x)?;
        let [n, _, h, w] = y.dims4("predict")?;
        for i in 0..n {
            out.push(Tensor::new([h, w], y.sample(i).to_vec())?);
        }
    }
    Ok(out)
}

fn discriminator_update(
    disc: &mut NetworkParams,
    adam: &mut AdamState,
    cfg: &crate::networks::DiscriminatorConfig,
    kind: AdversarialKind,
    batch: &Batch,
    fake: &Tensor,
) -> Result<(f32, bool)> {
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    // a fresh leaf: nothing flows back into the generator
    let f = g.constant(fake.clone());
    let mut bound = disc.bind(&mut g, true, true);
    let real = discriminator_forward(&mut g, cfg, &mut bound, x, y)?;
    let fake_score = discriminator_forward(&mut g, cfg, &mut bound, x, f)?;
    let loss = match kind {
        AdversarialKind::Lsgan => losses::lsgan_d_loss(&mut g, real, fake_score)?,
        AdversarialKind::Bce => losses::bce_d_loss(&mut g, real, fake_score)?,
    };
    let value = losses::scalar(&g, loss);
    if !value.is_finite() {
        log::warn!("discriminator loss is {value}; update skipped");
        return Ok((value, true));
    }
    g.backward(loss)?;
    let grads = bound.grads(&g);
    drop(bound);
    let outcome = adam.step(&mut disc.params, &grads)?;
    Ok((value, outcome == StepOutcome::SkippedNonFinite))
}

fn prepare_log(dir: &Path, start_epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let mut rows = vec![LOG_HEADER.to_string()];
    if start_epoch > 0 && path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        rows.extend(
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < start_epoch))
                .map(str::to_string),
        );
    }
    fs::write(&path, rows.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

fn append_log(dir: &Path, entry: &EpochLog, seconds: f64) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", entry.csv_row(seconds)).map_err(|e| Error::io(&path, e))
}
