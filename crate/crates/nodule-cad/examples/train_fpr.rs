//! Train the 3D false-positive reducer on labeled patches and show its
//! crop/flip augmentation arithmetic.
//!
//!     cargo run --example train_fpr

use nodule_cad::ct::{generate_phantom, Candidate, CandidateSource, PhantomParams};
use nodule_cad::fpr::{
    build_fpr, enumerate_augmentations, extract_patch, fpr_score, label_candidate, train_fpr,
    Fpr3dConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = Fpr3dConfig {
        epochs: 3,
        seed: 9,
        ..Fpr3dConfig::desk()
    };
    println!(
        "classifier: {:?} layers (conv/pool/dense/output), {} parameters",
        cfg.layer_census(),
        cfg.param_count()
    );

    // Candidates: the true nodule centers plus points on the vessels.
    let params = PhantomParams {
        sphere_count: 3,
        vessel_count: 3,
        ..PhantomParams::default()
    };
    let mut patches = Vec::new();
    for i in 0..6u64 {
        let (vol, annos) = generate_phantom(&format!("p{i}"), 60 + i, &params).unwrap();
        let mut candidates: Vec<Candidate> = annos
            .iter()
            .map(|a| Candidate {
                series_uid: a.series_uid.clone(),
                center: a.center,
                probability: 0.5,
                source: CandidateSource::Detector,
            })
            .collect();
        // off-nodule decoys at fixed offsets
        for a in &annos {
            candidates.push(Candidate {
                series_uid: a.series_uid.clone(),
                center: [a.center[0] + 18.0, a.center[1], a.center[2]],
                probability: 0.5,
                source: CandidateSource::Detector,
            });
        }
        for c in candidates {
            if !vol.contains_voxel(vol.world_to_voxel(c.center)) {
                continue;
            }
            let mut patch = extract_patch(
                &vol,
                c.center,
                cfg.patch_extent,
                cfg.norm_mean_hu,
                cfg.norm_scale_hu,
            )
            .unwrap();
            patch.label = Some(label_candidate(&c, &annos));
            patches.push(patch);
        }
    }
    println!(
        "{} training patches, {} positive",
        patches.len(),
        patches.iter().filter(|p| p.label == Some(true)).count()
    );
    let augs = enumerate_augmentations(&patches[0], &cfg).unwrap();
    println!(
        "each patch expands to {} augmentations (125 crops x 8 flips)",
        augs.len()
    );

    let model = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (model, history) = train_fpr(model, &patches, |s| {
        println!(
            "  epoch {}: loss {:.4}, validation accuracy {:.3}",
            s.epoch, s.mean_loss, s.val_accuracy
        );
    })
    .unwrap();
    let best = history.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    println!("best validation accuracy {best:.3}");

    let pos = patches.iter().find(|p| p.label == Some(true)).unwrap();
    let neg = patches.iter().find(|p| p.label == Some(false)).unwrap();
    println!(
        "example scores: nodule patch {:.3}, decoy patch {:.3}",
        fpr_score(&model, pos).unwrap(),
        fpr_score(&model, neg).unwrap()
    );
}
