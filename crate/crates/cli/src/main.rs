use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::warn;

use jexpand::checkpoint::{self, FINAL};
use jexpand::config::{parse_severity_mix, ExperimentConfig};
use jexpand::dataset::LoadedManifest;
use jexpand::experiment::{generate_phantom_set, preprocess_dataset, MANIFEST_FILE};
use jexpand::gradcheck;
use jexpand::io::save_tensor;
use jexpand::metrics::{compare_reports, evaluate, evaluate_predictions, render_table, MetricsReport};
use jexpand::networks::ModelKind;
use jexpand::preprocess::{Split, UnitRescale};
use jexpand::trainer::{predict_samples, Trainer};
use jexpand::{Error, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "jexpand", version, about = "Lung tissue-expansion maps from single expiration slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset experiment config.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value = "ours_drs")]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic phantom pairs with a train/test split.
    PhantomGen(PhantomGenArgs),
    /// Clip, rescale and crop/pad a raw data set.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        target_size: Vec<usize>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Write predicted maps for one split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or the constant-mean baseline) on one split.
    Evaluate {
        /// Omit together with --constant-mean to score the baseline.
        #[arg(long, required_unless_present = "constant_mean")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Predict the train-split mean everywhere.
        #[arg(long, conflicts_with = "checkpoint")]
        constant_mean: bool,
        /// Report path; a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mann-Whitney U comparison of two reports.
    Compare {
        #[arg(long = "report", num_args = 1, required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or comma-separated op names.
        #[arg(long, default_value = "all", value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Test-split size; default is 30% stratified by severity tag.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
    /// `tag:lo-hi[:weight],...`
    #[arg(long)]
    severity_mix: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Replace the config's model by this baseline.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Processed manifest; defaults to `<paths.data_dir>/manifest.json`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; defaults to `paths.run_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated { .. } => EXIT_IO,
        Error::Json { source, .. } if source.is_io() => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn init_threads() {
    let n = match std::env::var("JEXPAND_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or_else(|_| {
            warn!("ignoring JEXPAND_THREADS={v:?}; using 1 thread");
            1
        }),
        Err(_) => 1,
    };
    jexpand::set_threads(n);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::InitConfig { preset, model, out } => {
            let c = ExperimentConfig::preset(&preset, model)?;
            c.save(&out)?;
            println!("wrote {} (hash {})", out.display(), c.hash());
            Ok(())
        }
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Preprocess {
            manifest,
            out,
            target_size,
        } => {
            let m = preprocess_dataset(&manifest, &out, (target_size[0], target_size[1]))?;
            let s = m.clip_stats.expect("set by preprocessing");
            println!(
                "{} pairs -> {} (clip mu {:.4}, sigma {:.4} from {} train maps)",
                m.entries.len(),
                out.join(MANIFEST_FILE).display(),
                s.mu,
                s.sigma,
                s.n_train
            );
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Infer {
            checkpoint,
            manifest,
            split,
            out,
        } => infer(&checkpoint, &manifest, split, &out),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            constant_mean,
            out,
        } => evaluate_cmd(checkpoint.as_deref(), &manifest, split, constant_mean, &out),
        Command::Compare { reports, out } => compare(&reports, out.as_deref()),
        Command::Gradcheck { ops, seed } => {
            let start = Instant::now();
            let r = gradcheck::run(&ops, seed)?;
            print!("{r}");
            println!("{} cases in {:.1}s", r.cases.len(), start.elapsed().as_secs_f64());
            if r.passed() {
                Ok(())
            } else {
                Err(Failure::Failed(format!("gradient check failed (tolerance {:e})", r.tolerance)))
            }
        }
    }
}

fn phantom_gen(a: PhantomGenArgs) -> CliResult {
    let (mut p, hash) = match &a.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            (c.phantom.clone(), Some(c.hash()))
        }
        None => (ExperimentConfig::desk(ModelKind::OursDrs).phantom, None),
    };
    if let Some(n) = a.count {
        p.count = n;
        // an explicit count without --test-count falls back to the 70/30 split
        p.test_count = None;
    }
    if a.test_count.is_some() {
        p.test_count = a.test_count;
    }
    if let Some(s) = a.size {
        p.size = (s[0], s[1]);
    }
    if let Some(m) = &a.severity_mix {
        p.severity_mix = parse_severity_mix(m)?;
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    let m = generate_phantom_set(&p, &a.out, hash)?;
    println!(
        "{} pairs ({} train, {} test) -> {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Test),
        a.out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(kind) = a.model {
        cfg = cfg.with_model(kind);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let data = a.data.unwrap_or_else(|| cfg.paths.data_dir.join(MANIFEST_FILE));
    let run_dir = a.out.unwrap_or_else(|| cfg.paths.run_dir.clone());

    let manifest = LoadedManifest::load(&data)?;
    let size = manifest.manifest.slice_size;
    let s = cfg.model.generator.slice_size;
    if size != (s, s) {
        return Err(Error::Config(format!("data slices are {size:?}, model expects {s}x{s}")).into());
    }
    let train = manifest.load_split(Split::Train)?;

    let mut trainer = match &a.resume {
        Some(dir) => {
            let t = checkpoint::load(dir)?;
            if t.config_hash.as_deref() != Some(hash.as_str()) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different config (hash {:?}, this config {hash})",
                    dir.display(),
                    t.config_hash
                ))
                .into());
            }
            t
        }
        None => {
            let mut t = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
            t.config_hash = Some(hash.clone());
            t
        }
    };
    cfg.save(&run_dir.join("config.json"))?;
    println!("training {} on {} pairs, config {hash}", cfg.model.kind, train.len());
    let mut out = std::io::stdout();
    trainer.fit(&train, Some(&run_dir), |log, secs| {
        let _ = writeln!(
            out,
            "epoch {:>4} k {:>3} d_loss {:.5} g_adv {:.5} g_recon {:.5} {secs:.1}s",
            log.epoch, log.k, log.d_loss, log.g_adv, log.g_ch
        );
    })?;
    println!("final checkpoint: {}", run_dir.join(FINAL).display());
    Ok(())
}

fn load_for_inference(ckpt: &Path, manifest: &Path, split: Split) -> Result<InferenceInputs, Failure> {
    let (model, generator, hash) = checkpoint::load_generator(ckpt)?;
    let data = LoadedManifest::load(manifest)?;
    let s = model.generator.slice_size;
    if data.manifest.slice_size != (s, s) {
        return Err(Error::Config(format!(
            "checkpoint expects {s}x{s} slices, manifest has {:?}",
            data.manifest.slice_size
        ))
        .into());
    }
    let samples = data.load_split(split)?;
    Ok(InferenceInputs {
        model,
        generator,
        hash,
        data,
        samples,
    })
}

struct InferenceInputs {
    model: jexpand::networks::ModelSpec,
    generator: jexpand::networks::NetworkParams,
    hash: Option<String>,
    data: LoadedManifest,
    samples: Vec<jexpand::dataset::SamplePair>,
}

fn infer(ckpt: &Path, manifest: &Path, split: Split, out: &Path) -> CliResult {
    let mut inp = load_for_inference(ckpt, manifest, split)?;
    let preds = predict_samples(&inp.model, &mut inp.generator, &inp.samples, 16)?;
    for (s, p) in inp.samples.iter().zip(&preds) {
        save_tensor(out.join(format!("{}.jxp", s.id)), p)?;
    }
    println!("{} predictions -> {}", preds.len(), out.display());
    Ok(())
}

fn j_units(data: &LoadedManifest) -> Result<UnitRescale, Failure> {
    let stats = data
        .manifest
        .clip_stats
        .as_ref()
        .ok_or_else(|| Error::Manifest("manifest has no clip statistics; run preprocess first".into()))?;
    Ok(UnitRescale::for_stats(stats)?)
}

fn evaluate_cmd(ckpt: Option<&Path>, manifest: &Path, split: Split, constant: bool, out: &Path) -> CliResult {
    let report = if constant {
        let data = LoadedManifest::load(manifest)?;
        let train = data.load_split(Split::Train)?;
        if train.is_empty() {
            return Err(Error::Empty("train split").into());
        }
        let n: usize = train.iter().map(|s| s.y.len()).sum();
        let mean = train.iter().flat_map(|s| s.y.data()).map(|&v| v as f64).sum::<f64>() / n as f64;
        let samples = data.load_split(split)?;
        let preds: Vec<Tensor> = samples.iter().map(|s| Tensor::full(s.y.shape().to_vec(), mean as f32)).collect();
        evaluate_predictions(
            &samples,
            &preds,
            &j_units(&data)?,
            &split.to_string(),
            Some("constant_mean".into()),
            data.manifest.config_hash.clone(),
        )?
    } else {
        let ckpt = ckpt.ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
        let mut inp = load_for_inference(ckpt, manifest, split)?;
        let units = j_units(&inp.data)?;
        evaluate(&inp.model, &mut inp.generator, &inp.samples, &units, &split.to_string(), inp.hash.clone())?
    };
    report.save(out)?;
    let all = report.group("all").expect("always present");
    for (name, s) in &all.metrics {
        println!(
            "{name:>8}  median {:>10}  mean {:>10}",
            s.median.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.mean.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    println!("{} slices -> {}", report.slices.len(), out.display());
    Ok(())
}

fn compare(paths: &[PathBuf], out: Option<&Path>) -> CliResult {
    if paths.len() != 2 {
        return Err(Failure::Usage(format!("compare takes exactly two --report, got {}", paths.len())));
    }
    let (a, b) = (MetricsReport::load(&paths[0])?, MetricsReport::load(&paths[1])?);
    let comps = compare_reports(&a, &b)?;
    let name = |r: &MetricsReport, p: &Path| r.model.clone().unwrap_or_else(|| p.display().to_string());
    let table = render_table(&name(&a, &paths[0]), &name(&b, &paths[1]), &comps);
    print!("{table}");
    if let Some(out) = out {
        let text = serde_json::to_string_pretty(&comps).expect("comparisons serialize") + "\n";
        std::fs::write(out, text).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}
