//! Generator and discriminator definitions.
//!
//! Parameters live in a [`NetworkParams`] name map; a forward pass binds them
//! onto a [`Graph`] as leaves and runs the layer stack described by the
//! config. Kernel 4 / stride 2 / pad 1 for every resampling conv,
//! LeakyReLU(0.2) in the encoder and discriminator.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::losses::{AdversarialKind, LossWeights, ReconKind};
use crate::optim::ParamMap;
use crate::tensor::Tensor;

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const NORM_EPS: f32 = 1e-5;
pub const INIT_SD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub slice_size: usize,
}

impl GeneratorConfig {
    pub fn desk(norm: NormKind) -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            norm,
            in_channels: 1,
            out_channels: 1,
            slice_size: 64,
        }
    }

    pub fn paper(norm: NormKind) -> Self {
        Self {
            depth: 8,
            base_channels: 64,
            norm,
            in_channels: 1,
            out_channels: 1,
            slice_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("generator depth {} must be >= 2", self.depth)));
        }
        if self.depth >= usize::BITS as usize || self.slice_size % (1 << self.depth) != 0 || self.slice_size == 0 {
            return Err(Error::Config(format!(
                "slice size {} must be divisible by 2^depth = {}",
                self.slice_size,
                1usize << self.depth.min(63)
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channels produced by encoder level `i` (capped at 8x base).
    pub fn enc_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Stride-2 layers; 3 gives the 70x70 patch.
    pub num_layers: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    /// Condition and candidate are channel-concatenated.
    pub in_channels: usize,
}

impl DiscriminatorConfig {
    /// Narrower than the generator to keep a desk-scale run within budget.
    pub fn desk(norm: NormKind) -> Self {
        Self {
            num_layers: 3,
            base_channels: 16,
            norm,
            in_channels: 2,
        }
    }

    pub fn paper(norm: NormKind) -> Self {
        Self {
            base_channels: 64,
            ..Self::desk(norm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }

    fn channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    /// Side length of the input patch seen by one output score.
    pub fn receptive_field(&self) -> usize {
        let mut strides = vec![2; self.num_layers];
        strides.extend([1, 1]);
        strides.iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Weight,
    Zero,
    One,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Layer recipe shared by construction (shapes) and forward (execution).
#[derive(Clone, Debug)]
enum Layer {
    Conv { name: String, cin: usize, cout: usize, stride: usize, pad: usize },
    ConvT { name: String, cin: usize, cout: usize },
    Norm { name: String, channels: usize },
}

impl Layer {
    fn specs(&self, out: &mut Vec<ParamSpec>) {
        let mut push = |name: String, shape: Vec<usize>, init| out.push(ParamSpec { name, shape, init });
        match self {
            Layer::Conv { name, cin, cout, .. } => {
                push(format!("{name}.weight"), vec![*cout, *cin, KERNEL, KERNEL], Init::Weight);
                push(format!("{name}.bias"), vec![*cout], Init::Zero);
            }
            Layer::ConvT { name, cin, cout } => {
                push(format!("{name}.weight"), vec![*cin, *cout, KERNEL, KERNEL], Init::Weight);
                push(format!("{name}.bias"), vec![*cout], Init::Zero);
            }
            Layer::Norm { name, channels } => {
                push(format!("{name}.gamma"), vec![*channels], Init::One);
                push(format!("{name}.beta"), vec![*channels], Init::Zero);
            }
        }
    }
}

fn norm_layer(kind: NormKind, name: String, channels: usize) -> Option<Layer> {
    (kind != NormKind::None).then_some(Layer::Norm { name, channels })
}

struct EncoderLevel {
    conv: Layer,
    norm: Option<Layer>,
}

struct DecoderLevel {
    conv: Layer,
    norm: Option<Layer>,
}

struct GeneratorPlan {
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    out: Layer,
}

fn generator_plan(cfg: &GeneratorConfig) -> GeneratorPlan {
    let d = cfg.depth;
    let encoder = (0..d)
        .map(|i| {
            let cin = if i == 0 { cfg.in_channels } else { cfg.enc_channels(i - 1) };
            let cout = cfg.enc_channels(i);
            // the outermost and innermost levels carry no normalization
            let norm = if i > 0 && i < d - 1 {
                norm_layer(cfg.norm, format!("enc{i}.norm"), cout)
            } else {
                None
            };
            EncoderLevel {
                conv: Layer::Conv {
                    name: format!("enc{i}.conv"),
                    cin,
                    cout,
                    stride: 2,
                    pad: 1,
                },
                norm,
            }
        })
        .collect();
    let decoder = (1..d)
        .rev()
        .map(|i| {
            let cin = if i == d - 1 { cfg.enc_channels(i) } else { 2 * cfg.enc_channels(i) };
            let cout = cfg.enc_channels(i - 1);
            DecoderLevel {
                conv: Layer::ConvT {
                    name: format!("dec{i}.conv"),
                    cin,
                    cout,
                },
                norm: norm_layer(cfg.norm, format!("dec{i}.norm"), cout),
            }
        })
        .collect();
    let out = Layer::ConvT {
        name: "out.conv".into(),
        cin: 2 * cfg.enc_channels(0),
        cout: cfg.out_channels,
    };
    GeneratorPlan { encoder, decoder, out }
}

fn discriminator_plan(cfg: &DiscriminatorConfig) -> Vec<(Layer, Option<Layer>)> {
    let mut layers = Vec::new();
    let mut cin = cfg.in_channels;
    for i in 0..=cfg.num_layers {
        let cout = cfg.channels(i);
        let stride = if i < cfg.num_layers { 2 } else { 1 };
        let norm = if i == 0 {
            None
        } else {
            norm_layer(cfg.norm, format!("layer{i}.norm"), cout)
        };
        layers.push((
            Layer::Conv {
                name: format!("layer{i}.conv"),
                cin,
                cout,
                stride,
                pad: 1,
            },
            norm,
        ));
        cin = cout;
    }
    layers.push((
        Layer::Conv {
            name: "head.conv".into(),
            cin,
            cout: 1,
            stride: 1,
            pad: 1,
        },
        None,
    ));
    layers
}

fn generator_specs(cfg: &GeneratorConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let plan = generator_plan(cfg);
    let mut specs = Vec::new();
    let mut norms = Vec::new();
    let mut visit = |l: &Layer| {
        l.specs(&mut specs);
        if let Layer::Norm { name, channels } = l {
            norms.push((name.clone(), *channels));
        }
    };
    for lvl in &plan.encoder {
        visit(&lvl.conv);
        if let Some(n) = &lvl.norm {
            visit(n);
        }
    }
    for lvl in &plan.decoder {
        visit(&lvl.conv);
        if let Some(n) = &lvl.norm {
            visit(n);
        }
    }
    visit(&plan.out);
    (specs, norms)
}

fn discriminator_specs(cfg: &DiscriminatorConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut specs = Vec::new();
    let mut norms = Vec::new();
    for (conv, norm) in discriminator_plan(cfg) {
        conv.specs(&mut specs);
        if let Some(n) = norm {
            n.specs(&mut specs);
            if let Layer::Norm { name, channels } = n {
                norms.push((name, channels));
            }
        }
    }
    (specs, norms)
}

/// Named parameter tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub params: ParamMap,
    pub buffers: BTreeMap<String, RunningStats>,
    pub seed: u64,
}

impl NetworkParams {
    fn build(specs: Vec<ParamSpec>, norms: Vec<(String, usize)>, norm: NormKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for s in specs {
            let t = match s.init {
                Init::Weight => Tensor::randn(s.shape, INIT_SD, &mut rng),
                Init::Zero => Tensor::zeros(s.shape),
                Init::One => Tensor::full(s.shape, 1.0),
            };
            let prev = params.insert(s.name.clone(), t);
            debug_assert!(prev.is_none(), "duplicate parameter {}", s.name);
        }
        let buffers = if norm == NormKind::Batch {
            norms.into_iter().map(|(n, c)| (n, RunningStats::new(c))).collect()
        } else {
            BTreeMap::new()
        };
        Self { params, buffers, seed }
    }

    pub fn generator(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, norms) = generator_specs(cfg);
        Ok(Self::build(specs, norms, cfg.norm, seed))
    }

    pub fn discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, norms) = discriminator_specs(cfg);
        Ok(Self::build(specs, norms, cfg.norm, seed))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `g` (tracked when `trainable`).
    pub fn bind(&mut self, g: &mut Graph, trainable: bool, training: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound {
            vars,
            buffers: &mut self.buffers,
            training,
        }
    }
}

/// Parameters bound to a graph for one forward pass.
pub struct Bound<'a> {
    vars: BTreeMap<String, Var>,
    buffers: &'a mut BTreeMap<String, RunningStats>,
    training: bool,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Unknown {
            what: "parameter",
            name: name.to_string(),
        })
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub fn grads(&self, g: &Graph) -> ParamMap {
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t)))
            .collect()
    }

    fn apply(&mut self, g: &mut Graph, layer: &Layer, h: Var, kind: NormKind) -> Result<Var> {
        match layer {
            Layer::Conv { name, stride, pad, .. } => {
                let w = self.var(&format!("{name}.weight"))?;
                let b = self.var(&format!("{name}.bias"))?;
                g.conv2d(h, w, Some(b), *stride, *pad)
            }
            Layer::ConvT { name, .. } => {
                let w = self.var(&format!("{name}.weight"))?;
                let b = self.var(&format!("{name}.bias"))?;
                g.conv_transpose2d(h, w, Some(b), 2, 1)
            }
            Layer::Norm { name, .. } => {
                let gamma = self.var(&format!("{name}.gamma"))?;
                let beta = self.var(&format!("{name}.beta"))?;
                match kind {
                    NormKind::Instance => g.instance_norm(h, gamma, beta, NORM_EPS),
                    NormKind::Batch => {
                        let stats = self.buffers.get_mut(name).ok_or_else(|| Error::Unknown {
                            what: "batch norm buffer",
                            name: name.clone(),
                        })?;
                        g.batch_norm(h, gamma, beta, stats, self.training, NORM_EPS)
                    }
                    NormKind::None => Ok(h),
                }
            }
        }
    }
}

/// `x [N, in, S, S] -> y_hat [N, out, S, S]` in `(-1, 1)`.
pub fn generator_forward(g: &mut Graph, cfg: &GeneratorConfig, p: &mut Bound<'_>, x: Var) -> Result<Var> {
    let [_, c, h, w] = g.value(x).dims4("generator")?;
    if c != cfg.in_channels || h != cfg.slice_size || w != cfg.slice_size {
        return Err(Error::dim(
            "generator",
            format!(
                "input [_, {c}, {h}, {w}] does not match config [_, {}, {s}, {s}]",
                cfg.in_channels,
                s = cfg.slice_size
            ),
        ));
    }
    let plan = generator_plan(cfg);
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut cur = x;
    for lvl in &plan.encoder {
        cur = p.apply(g, &lvl.conv, cur, cfg.norm)?;
        if let Some(n) = &lvl.norm {
            cur = p.apply(g, n, cur, cfg.norm)?;
        }
        cur = g.leaky_relu(cur, LEAKY_SLOPE);
        skips.push(cur);
    }
    for (lvl, skip_level) in plan.decoder.iter().zip((0..cfg.depth - 1).rev()) {
        cur = p.apply(g, &lvl.conv, cur, cfg.norm)?;
        if let Some(n) = &lvl.norm {
            cur = p.apply(g, n, cur, cfg.norm)?;
        }
        cur = g.relu(cur);
        cur = g.concat(&[cur, skips[skip_level]])?;
    }
    cur = p.apply(g, &plan.out, cur, cfg.norm)?;
    Ok(g.tanh(cur))
}

/// Raw patch scores `[N, 1, h, w]` for the pair `(x, y)`.
pub fn discriminator_forward(g: &mut Graph, cfg: &DiscriminatorConfig, p: &mut Bound<'_>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 4 || sy.len() != 4 || sx[0] != sy[0] || sx[2..] != sy[2..] {
        return Err(Error::dim(
            "discriminator",
            format!("condition {sx:?} and candidate {sy:?} must share N, H and W"),
        ));
    }
    if sx[1] + sy[1] != cfg.in_channels {
        return Err(Error::dim(
            "discriminator",
            format!("{} + {} channels, config expects {}", sx[1], sy[1], cfg.in_channels),
        ));
    }
    let mut cur = g.concat(&[x, y])?;
    let plan = discriminator_plan(cfg);
    let last = plan.len() - 1;
    for (i, (conv, norm)) in plan.iter().enumerate() {
        cur = p.apply(g, conv, cur, cfg.norm)?;
        if let Some(n) = norm {
            cur = p.apply(g, n, cur, cfg.norm)?;
        }
        if i < last {
            cur = g.leaky_relu(cur, LEAKY_SLOPE);
        }
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    UnetSsim,
    Pix2pix,
    Ours,
    OursDrs,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::UnetSsim, ModelKind::Pix2pix, ModelKind::Ours, ModelKind::OursDrs];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::UnetSsim => "unet_ssim",
            ModelKind::Pix2pix => "pix2pix",
            ModelKind::Ours => "ours",
            ModelKind::OursDrs => "ours_drs",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "model kind",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Everything that distinguishes one compared model from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    pub adversarial: Option<AdversarialKind>,
    pub loss: LossWeights,
    pub drs: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.loss.validate()?;
        match (&self.discriminator, self.adversarial) {
            (Some(d), Some(_)) => d.validate()?,
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "discriminator and adversarial loss must be both present or both absent".into(),
                ))
            }
        }
        if self.drs && self.discriminator.is_none() {
            return Err(Error::Config("top-k selection needs a discriminator".into()));
        }
        Ok(())
    }
}

/// The four compared configurations.
pub fn build_baseline(kind: ModelKind, scale: Scale) -> ModelSpec {
    let gen = |norm| match scale {
        Scale::Desk => GeneratorConfig::desk(norm),
        Scale::Paper => GeneratorConfig::paper(norm),
    };
    let disc = |norm| match scale {
        Scale::Desk => DiscriminatorConfig::desk(norm),
        Scale::Paper => DiscriminatorConfig::paper(norm),
    };
    match kind {
        ModelKind::UnetSsim => ModelSpec {
            kind,
            generator: gen(NormKind::Instance),
            discriminator: None,
            adversarial: None,
            loss: LossWeights {
                lambda_recon: 1.0,
                eps_charbonnier: 1e-6,
                recon: ReconKind::SsimL1,
            },
            drs: false,
        },
        ModelKind::Pix2pix => ModelSpec {
            kind,
            generator: gen(NormKind::Batch),
            discriminator: Some(disc(NormKind::Batch)),
            adversarial: Some(AdversarialKind::Bce),
            loss: LossWeights {
                lambda_recon: 100.0,
                eps_charbonnier: 1e-6,
                recon: ReconKind::L1,
            },
            drs: false,
        },
        ModelKind::Ours | ModelKind::OursDrs => ModelSpec {
            kind,
            generator: gen(NormKind::Instance),
            discriminator: Some(disc(NormKind::Instance)),
            adversarial: Some(AdversarialKind::Lsgan),
            loss: LossWeights::default(),
            drs: kind == ModelKind::OursDrs,
        },
    }
}
