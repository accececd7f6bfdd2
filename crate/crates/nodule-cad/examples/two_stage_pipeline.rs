//! The whole system end to end on synthetic data: generate phantoms, train
//! both stages, detect on held-out scans, rescore, and compare the FROC
//! curves. Takes a couple of minutes on one CPU core.
//!
//!     cargo run --example two_stage_pipeline

use nodule_cad::ct::{generate_phantom, Annotation, CtVolume, PhantomParams};
use nodule_cad::detector::{train_detector, DetectorConfig};
use nodule_cad::fpr::{build_fpr, rescore_candidates, train_fpr, Fpr3dConfig};
use nodule_cad::froc::{average_froc_score, froc_curve, sensitivity_at};
use nodule_cad::pipeline::{build_fpr_training_set, detect_all};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let t0 = std::time::Instant::now();
    let params = PhantomParams {
        vessel_count: 4,
        ..PhantomParams::default()
    };
    let mut train: Vec<(CtVolume, Vec<Annotation>)> = Vec::new();
    let mut held_out: Vec<(CtVolume, Vec<Annotation>)> = Vec::new();
    for i in 0..10u64 {
        let pair = generate_phantom(&format!("scan-{i:02}"), 500 + i, &params).unwrap();
        if i < 7 {
            train.push(pair);
        } else {
            held_out.push(pair);
        }
    }
    println!(
        "{} training scans, {} held out",
        train.len(),
        held_out.len()
    );

    let det_cfg = DetectorConfig {
        epochs: 10,
        lr: 0.005,
        lr_decay_step: 600,
        lr_decay: 0.3,
        seed: 21,
        ..DetectorConfig::desk()
    };
    println!("stage 1: training the candidate detector...");
    let (detector, _) = train_detector(&train, &det_cfg, |_, _| {}).unwrap();
    println!("  done at {:?}", t0.elapsed());

    let train_vols: Vec<CtVolume> = train.iter().map(|(v, _)| v.clone()).collect();
    let stage1_train = detect_all(&detector, &train_vols, 0.05).unwrap();
    println!(
        "  {} candidates on the training scans feed stage 2",
        stage1_train.len()
    );

    let fpr_cfg = Fpr3dConfig {
        duplicate_factor: 1,
        epochs: 4,
        early_stop_val_acc: Some(0.95),
        seed: 22,
        ..Fpr3dConfig::desk()
    };
    println!("stage 2: training the false-positive reducer...");
    let patches = build_fpr_training_set(&train, &stage1_train, &fpr_cfg).unwrap();
    let fpr = build_fpr(&fpr_cfg, &mut ChaCha8Rng::seed_from_u64(fpr_cfg.seed)).unwrap();
    let (fpr, _) = train_fpr(fpr, &patches, |s| {
        println!(
            "  epoch {}: loss {:.4}, validation accuracy {:.3}",
            s.epoch, s.mean_loss, s.val_accuracy
        );
    })
    .unwrap();

    let test_vols: Vec<CtVolume> = held_out.iter().map(|(v, _)| v.clone()).collect();
    let annotations: Vec<Annotation> = held_out
        .iter()
        .flat_map(|(_, a)| a.iter().cloned())
        .collect();
    let scans: Vec<String> = test_vols
        .iter()
        .map(|v| v.series_uid().to_string())
        .collect();
    let stage1 = detect_all(&detector, &test_vols, 0.02).unwrap();
    let stage2 = rescore_candidates(&fpr, &test_vols, &stage1).unwrap();
    let c1 = froc_curve(&scans, &stage1, &annotations).unwrap();
    let c2 = froc_curve(&scans, &stage2, &annotations).unwrap();
    println!("held-out comparison ({} nodules):", annotations.len());
    println!(
        "  stage 1: sens@4fps {:.3}, average FROC score {:.3}, {:.1} candidates/scan",
        sensitivity_at(&c1, 4.0),
        average_froc_score(&c1),
        c1.candidates_per_scan()
    );
    println!(
        "  stage 2: sens@4fps {:.3}, average FROC score {:.3}",
        sensitivity_at(&c2, 4.0),
        average_froc_score(&c2)
    );
    println!(
        "  FPs/scan needed for sensitivity 0.8: stage 1 {:?}, stage 2 {:?}",
        c1.fps_at_sensitivity(0.8),
        c2.fps_at_sensitivity(0.8)
    );
    println!("total {:?}", t0.elapsed());
}
