//! Train the stage-1 candidate detector on synthetic phantoms and save a
//! checkpoint. Uses a trimmed desk configuration so it finishes in about
//! half a minute on one CPU core.
//!
//!     cargo run --example train_detector [OUT_DIR]

use nodule_cad::checkpoint::save_detector;
use nodule_cad::ct::{generate_phantom, PhantomParams};
use nodule_cad::detector::{train_detector, DetectorConfig};
use std::path::PathBuf;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example-runs/detector".into())
        .into();
    std::fs::create_dir_all(&out).unwrap();

    let params = PhantomParams {
        vessel_count: 4,
        ..PhantomParams::default()
    };
    let scans: Vec<_> = (0..4u64)
        .map(|i| generate_phantom(&format!("train-{i:03}"), 7 + i, &params).unwrap())
        .collect();

    let config = DetectorConfig {
        epochs: 6,
        lr: 0.005,
        seed: 1,
        ..DetectorConfig::desk()
    };
    println!(
        "training on {} scans ({} parameters)...",
        scans.len(),
        config.param_count()
    );
    let (model, losses) = train_detector(&scans, &config, |step, loss| {
        if step % 50 == 0 {
            println!("  step {step}: loss {loss:.4}");
        }
    })
    .unwrap();
    println!(
        "done after {} steps; first loss {:.3}, last {:.3}",
        losses.len(),
        losses.first().unwrap(),
        losses.last().unwrap()
    );
    let path = out.join("detector.ckpt");
    save_detector(&path, &model).unwrap();
    println!("checkpoint written to {}", path.display());
}
