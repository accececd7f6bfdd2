use nodule_cad::ct::{generate_phantom, Annotation, CtVolume, PhantomParams};
use nodule_cad::detector::{train_detector, DetectorConfig};
use nodule_cad::fpr::{build_fpr, rescore_candidates, train_fpr, Fpr3dConfig};
use nodule_cad::froc::{froc_curve, sensitivity_at, average_froc_score};
use nodule_cad::pipeline::{build_fpr_training_set, detect_all};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let det_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let fpr_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let t0 = std::time::Instant::now();

    let params = PhantomParams {
        vessel_count: 5,
        vessel_radius_mm: (2.5, 6.0),
        ..PhantomParams::default()
    };
    let mut train: Vec<(CtVolume, Vec<Annotation>)> = Vec::new();
    let mut test: Vec<(CtVolume, Vec<Annotation>)> = Vec::new();
    for i in 0..12u64 {
        let uid = format!("e2e-{seed}-{i:02}");
        let pair = generate_phantom(&uid, seed * 101 + i, &params).unwrap();
        if i < 8 { train.push(pair) } else { test.push(pair) }
    }

    let det_cfg = DetectorConfig {
        epochs: det_epochs,
        lr: 0.005,
        lr_decay_step: 600,
        lr_decay: 0.3,
        seed: 1000 + seed,
        ..DetectorConfig::desk()
    };
    let (det, _) = train_detector(&train, &det_cfg, |_, _| {}).unwrap();
    eprintln!("[{seed}] detector trained at {:?}", t0.elapsed());

    let train_vols: Vec<CtVolume> = train.iter().map(|(v, _)| v.clone()).collect();
    let s1_train = detect_all(&det, &train_vols, 0.02).unwrap();

    let fpr_cfg = Fpr3dConfig {
        duplicate_factor: 1,
        epochs: fpr_epochs,
        early_stop_val_acc: Some(0.98),
        negatives_cap: Some(260),
        seed: 2000 + seed,
        ..Fpr3dConfig::desk()
    };
    let patches = build_fpr_training_set(&train, &s1_train, &fpr_cfg).unwrap();
    let fpr_model = build_fpr(&fpr_cfg, &mut ChaCha8Rng::seed_from_u64(fpr_cfg.seed)).unwrap();
    let (fpr_model, hist) = train_fpr(fpr_model, &patches, |_| {}).unwrap();
    eprintln!("[{seed}] fpr trained ({} patches, best val {:.3}) at {:?}", patches.len(),
        hist.iter().map(|e| e.val_accuracy).fold(0.0, f64::max), t0.elapsed());

    let test_vols: Vec<CtVolume> = test.iter().map(|(v, _)| v.clone()).collect();
    let test_annos: Vec<Annotation> = test.iter().flat_map(|(_, a)| a.iter().cloned()).collect();
    let scans: Vec<String> = test_vols.iter().map(|v| v.series_uid().to_string()).collect();
    let s1 = detect_all(&det, &test_vols, 0.02).unwrap();
    let s2 = rescore_candidates(&fpr_model, &test_vols, &s1).unwrap();
    let c1 = froc_curve(&scans, &s1, &test_annos).unwrap();
    let c2 = froc_curve(&scans, &s2, &test_annos).unwrap();
    println!(
        "seed {seed}: sens2@4fps={:.3} fp1@0.8={:?} fp2@0.8={:?} avg1={:.3} avg2={:.3} elapsed={:?}",
        sensitivity_at(&c2, 4.0), c1.fps_at_sensitivity(0.8), c2.fps_at_sensitivity(0.8),
        average_froc_score(&c1), average_froc_score(&c2), t0.elapsed()
    );
}
