//! Slice-wise candidate detection on a fresh phantom with a quickly trained
//! detector, printing how detections line up with the ground truth.
//!
//!     cargo run --example detect_candidates

use nodule_cad::ct::{generate_phantom, write_candidates, PhantomParams};
use nodule_cad::detector::{detect_candidates, train_detector, DetectorConfig};

fn main() {
    let params = PhantomParams {
        vessel_count: 4,
        ..PhantomParams::default()
    };
    let scans: Vec<_> = (0..4u64)
        .map(|i| generate_phantom(&format!("train-{i:03}"), 31 + i, &params).unwrap())
        .collect();
    let config = DetectorConfig {
        epochs: 6,
        lr: 0.005,
        seed: 5,
        ..DetectorConfig::desk()
    };
    println!("training a desk-scale detector...");
    let (model, _) = train_detector(&scans, &config, |_, _| {}).unwrap();

    let (vol, annotations) = generate_phantom("held-out", 1234, &params).unwrap();
    let candidates = detect_candidates(&model, &vol, 0.05).unwrap();
    println!(
        "{} candidates on {} ({} true nodules)",
        candidates.len(),
        vol.series_uid(),
        annotations.len()
    );
    for a in &annotations {
        let best = candidates
            .iter()
            .filter(|c| {
                let d = ((c.center[0] - a.center[0]).powi(2)
                    + (c.center[1] - a.center[1]).powi(2)
                    + (c.center[2] - a.center[2]).powi(2))
                .sqrt();
                d < a.diameter_mm / 2.0
            })
            .map(|c| c.probability)
            .fold(f64::NAN, f64::max);
        println!(
            "  nodule d={:.1} mm at ({:6.1}, {:6.1}, {:6.1}): best hit probability {best:.3}",
            a.diameter_mm, a.center[0], a.center[1], a.center[2]
        );
    }
    print!("{}", &write_candidates(&candidates[..candidates.len().min(5)]));
}
