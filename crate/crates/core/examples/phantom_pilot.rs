//! Short desk-scale run: `cargo run --release --example phantom_pilot [epochs] [model]`.

use std::time::Instant;

use jexpand::config::ExperimentConfig;
use jexpand::dataset::LoadedManifest;
use jexpand::experiment::{generate_phantom_set, preprocess_dataset, MANIFEST_FILE};
use jexpand::metrics::{evaluate, evaluate_predictions};
use jexpand::networks::ModelKind;
use jexpand::preprocess::{Split, UnitRescale};
use jexpand::trainer::Trainer;
use jexpand::Tensor;

fn main() {
    let epochs: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("integer"));
    let kind: ModelKind = std::env::args().nth(2).map_or(ModelKind::OursDrs, |s| s.parse().expect("model"));
    let dir = std::env::temp_dir().join("jexpand_pilot");
    let mut cfg = ExperimentConfig::desk(kind);
    cfg.train.epochs = epochs;
    if !dir.join("processed").join(MANIFEST_FILE).is_file() {
        generate_phantom_set(&cfg.phantom, &dir.join("raw"), None).unwrap();
        preprocess_dataset(&dir.join("raw").join(MANIFEST_FILE), &dir.join("processed"), (64, 64)).unwrap();
    }
    let data = LoadedManifest::load(dir.join("processed").join(MANIFEST_FILE)).unwrap();
    let train = data.load_split(Split::Train).unwrap();
    let test = data.load_split(Split::Test).unwrap();
    let units = UnitRescale::for_stats(data.manifest.clip_stats.as_ref().unwrap()).unwrap();

    let mean: f64 = train.iter().flat_map(|s| s.y.data()).map(|&v| v as f64).sum::<f64>() / (train.len() * 64 * 64) as f64;
    let constant: Vec<Tensor> = test.iter().map(|_| Tensor::full([64, 64], mean as f32)).collect();
    let base = evaluate_predictions(&test, &constant, &units, "test", None, None).unwrap();
    let bmae = base.group("all").unwrap().metrics["mae"].median.unwrap();
    println!("constant: mae median {bmae:.4}");

    let mut t = Trainer::new(cfg.model.clone(), cfg.train.clone()).unwrap();
    let start = Instant::now();
    t.fit(&train, None, |log, secs| {
        println!("epoch {} k {} d {:.4} g_adv {:.4} g_rec {:.4} ({secs:.1}s)", log.epoch, log.k, log.d_loss, log.g_adv, log.g_ch);
    })
    .unwrap();
    println!("trained in {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    let r = evaluate(&t.model, &mut t.state.generator, &test, &units, "test", None).unwrap();
    for g in &r.groups {
        let m = &g.metrics;
        println!(
            "{:5} mae {:.4} rs {:?} psnr {:?} ssim {:?} mean_j {:?}",
            g.group,
            m["mae"].median.unwrap(),
            m["rs"].median,
            m["psnr"].median,
            m["ssim"].median,
            m["mean_j"].median
        );
    }
    let mae = r.group("all").unwrap().metrics["mae"].median.unwrap();
    println!("mae reduction vs constant: {:.1}%", 100.0 * (1.0 - mae / bmae));
}
