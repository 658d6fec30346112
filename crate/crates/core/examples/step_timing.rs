//! Times desk-scale training steps: `cargo run --release --example step_timing [d_base]`.

use std::time::Instant;

use jexpand::dataset::Batch;
use jexpand::networks::{build_baseline, ModelKind, Scale};
use jexpand::trainer::{TrainConfig, Trainer};
use jexpand::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let d_base: usize = std::env::args().nth(1).map_or(16, |s| s.parse().expect("integer"));
    for kind in [ModelKind::OursDrs, ModelKind::UnetSsim] {
        let mut model = build_baseline(kind, Scale::Desk);
        if let Some(d) = model.discriminator.as_mut() {
            d.base_channels = d_base;
        }
        let cfg = TrainConfig::default();
        let b = cfg.batch_size;
        let mut t = Trainer::new(model, cfg).expect("trainer");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Batch {
            indices: (0..b).collect(),
            x: Tensor::uniform([b, 1, 64, 64], -1.0, 1.0, &mut rng),
            y: Tensor::uniform([b, 1, 64, 64], -1.0, 1.0, &mut rng),
        };
        t.train_step(&batch, b / 2).expect("warm-up");
        let n = 5;
        let start = Instant::now();
        for _ in 0..n {
            t.train_step(&batch, b / 2).expect("step");
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!("{kind}: {per:.3} s/step, 6200 steps = {:.1} min", per * 6200.0 / 60.0);
    }
}
