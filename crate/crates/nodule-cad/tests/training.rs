//! Training smoke oracles on synthetic data: the 3D classifier must
//! separate spheres from noise, and the trained detector must find a
//! high-contrast sphere while staying quiet on air.

use nodule_cad::ct::{generate_phantom, Annotation, CtVolume, PhantomParams};
use nodule_cad::detector::{detect_candidates, train_detector, DeconvSpec, DetectorConfig};
use nodule_cad::fpr::{build_fpr, fpr_score, train_fpr, AugTag, Fpr3dConfig, Patch};
use nodule_cad::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_fpr_config() -> Fpr3dConfig {
    Fpr3dConfig {
        conv_channels: vec![4, 4, 8, 8, 16, 16],
        dense_widths: vec![32, 16, 2],
        patch_extent: (14, 14, 12),
        crop_extent: (10, 10, 8),
        dropout_fc: 0.1,
        dropout_pool: 0.02,
        lr: 0.001,
        epochs: 30,
        early_stop_val_acc: Some(0.95),
        ..Fpr3dConfig::full()
    }
}

/// Half sphere-bearing, half pure-noise patches in normalized units.
fn sphere_noise_patches(cfg: &Fpr3dConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Patch> {
    let (px, py, pz) = cfg.patch_extent;
    let mut out = Vec::new();
    for i in 0..n {
        let positive = i % 2 == 0;
        let mut data = vec![0.0f64; px * py * pz];
        for v in data.iter_mut() {
            *v = (-800.0 + rng.gen_range(-40.0..40.0) + 600.0) / 300.0;
        }
        if positive {
            let r = rng.gen_range(2.5..4.5);
            for z in 0..pz {
                for y in 0..py {
                    for x in 0..px {
                        let d = ((x as f64 - px as f64 / 2.0).powi(2)
                            + (y as f64 - py as f64 / 2.0).powi(2)
                            + ((z as f64 - pz as f64 / 2.0) * 2.0).powi(2))
                        .sqrt();
                        if d < r {
                            data[(z * py + y) * px + x] += 2.0;
                        }
                    }
                }
            }
        }
        out.push(Patch {
            data: Tensor::new(vec![1, pz, py, px], data).unwrap(),
            candidate: None,
            label: Some(positive),
            aug: AugTag::IDENTITY,
        });
    }
    out
}

#[test]
fn fpr_reaches_95_percent_validation_on_sphere_noise_patches() {
    let seeds = 10u64;
    let mut reached = 0;
    for seed in 0..seeds {
        let mut cfg = tiny_fpr_config();
        cfg.seed = 100 + seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = sphere_noise_patches(&cfg, 200, &mut rng);
        let model = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (_, hist) = train_fpr(model, &patches, |_| {}).unwrap();
        let best = hist.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
        if best >= 0.95 {
            reached += 1;
        }
    }
    assert!(
        reached as f64 >= 0.9 * seeds as f64,
        "validation reached 0.95 on only {reached}/{seeds} seeds"
    );
}

#[test]
fn trained_fpr_ranks_sphere_patches_above_air_patches() {
    let mut cfg = tiny_fpr_config();
    cfg.seed = 4242;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = sphere_noise_patches(&cfg, 200, &mut rng);
    let model = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let (model, _) = train_fpr(model, &train, |_| {}).unwrap();
    let held_out = sphere_noise_patches(&cfg, 80, &mut rng);
    let mut wins = 0;
    let mut pairs = 0;
    for pair in held_out.chunks(2) {
        let (pos, neg) = (&pair[0], &pair[1]);
        assert_eq!(pos.label, Some(true));
        assert_eq!(neg.label, Some(false));
        let sp = fpr_score(&model, pos).unwrap();
        let sn = fpr_score(&model, neg).unwrap();
        assert!((0.0..=1.0).contains(&sp) && (0.0..=1.0).contains(&sn));
        if sp > sn {
            wins += 1;
        }
        pairs += 1;
    }
    assert!(
        wins as f64 >= 0.95 * pairs as f64,
        "sphere outranked air on only {wins}/{pairs} held-out pairs"
    );
}

fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        input_extent: 48,
        backbone_widths: vec![4, 8, 16, 24],
        backbone_convs: vec![1, 1, 1, 1],
        backbone_pools: vec![true, true, true, true],
        deconv: DeconvSpec {
            kernel: 4,
            stride: 4,
            pad: 2,
            channels: 24,
        },
        rpn_hidden: 24,
        roi_dense: (64, 48),
        pre_nms_k: 256,
        post_nms_k: 16,
        roi_batch: 32,
        max_final_per_slice: 8,
        lr: 0.005,
        epochs: 10,
        seed: 11,
        ..DetectorConfig::full()
    }
}

fn tiny_phantom_params(spheres: usize) -> PhantomParams {
    PhantomParams {
        extents: (48, 48, 20),
        spacing: [1.0, 1.0, 2.0],
        origin: [-24.0, -24.0, -20.0],
        sphere_count: spheres,
        diameter_mm: (10.0, 14.0),
        margin_xy_mm: 10.0,
        margin_z_mm: 5.0,
        vessel_count: 0,
        ..PhantomParams::default()
    }
}

#[test]
fn trained_detector_finds_sphere_and_ignores_air() {
    let cfg = tiny_detector_config();
    let params = tiny_phantom_params(2);
    let train: Vec<(CtVolume, Vec<Annotation>)> = (0..3)
        .map(|i| generate_phantom(&format!("t{i}"), 50 + i, &params).unwrap())
        .collect();
    let (model, losses) = train_detector(&train, &cfg, |_, _| {}).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);

    // A held-out phantom with one high-contrast sphere: some candidate must
    // land within the sphere radius of its center.
    let one = tiny_phantom_params(1);
    let (vol, annos) = generate_phantom("held-out", 99, &one).unwrap();
    let candidates = detect_candidates(&model, &vol, 0.05).unwrap();
    assert!(!candidates.is_empty(), "no candidates on the sphere phantom");
    let a = &annos[0];
    let hit = candidates.iter().any(|c| {
        let d = ((c.center[0] - a.center[0]).powi(2)
            + (c.center[1] - a.center[1]).powi(2)
            + (c.center[2] - a.center[2]).powi(2))
        .sqrt();
        d < a.diameter_mm / 2.0
    });
    assert!(hit, "no candidate within the sphere radius");

    // An all-air volume: nothing above a 0.5 floor.
    let air = tiny_phantom_params(0);
    let (air_vol, air_annos) = generate_phantom("air", 123, &air).unwrap();
    assert!(air_annos.is_empty());
    let candidates = detect_candidates(&model, &air_vol, 0.5).unwrap();
    assert!(
        candidates.is_empty(),
        "air volume produced {} candidates above 0.5",
        candidates.len()
    );

    // A floor of 1.0 can never pass (probabilities live in [0,1)).
    let candidates = detect_candidates(&model, &vol, 1.0).unwrap();
    assert!(candidates.is_empty());
}

#[test]
fn detection_rejects_volumes_without_three_slices() {
    let cfg = tiny_detector_config();
    let model = nodule_cad::detector::build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let thin = CtVolume::new("thin", (48, 48, 2), [1.0, 1.0, 2.0], [0.0; 3], vec![-800.0; 4608])
        .unwrap();
    assert!(detect_candidates(&model, &thin, 0.5).is_err());
}
