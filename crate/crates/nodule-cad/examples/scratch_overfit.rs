use nodule_cad::ct::{generate_phantom, Annotation, CtVolume, PhantomParams};
use nodule_cad::detector::*;
use nodule_cad::pipeline::detect_all;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let params = PhantomParams { vessel_count: 2, ..PhantomParams::default() };
    let (vol, annos) = generate_phantom("ov", 5, &params).unwrap();
    let cfg = DetectorConfig { seed: 3, ..DetectorConfig::desk() };
    let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut state = TrainState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // overfit every annotated slice of one scan
    let scans = vec![(vol.clone(), annos.clone())];
    let slices = detector_training_slices(&scans, &cfg, &mut rng);
    println!("{} slices, {} annos", slices.len(), annos.len());
    for round in 0..30 {
        let mut sum = 0.0;
        for s in &slices {
            let img = nodule_cad::ct::build_slice_triplet(&vol, s.z, cfg.input_extent).unwrap();
            sum += train_step(&mut model, &img, &s.gts, &mut state, &mut rng).unwrap();
        }
        if round % 5 == 0 { println!("round {round}: mean loss {:.4}", sum / slices.len() as f64); }
    }
    let cands = detect_all(&model, &[vol.clone()], 0.05).unwrap();
    println!("candidates: {}", cands.len());
    for a in &annos {
        let hit = cands.iter().filter(|c| {
            let d = ((c.center[0]-a.center[0]).powi(2)+(c.center[1]-a.center[1]).powi(2)+(c.center[2]-a.center[2]).powi(2)).sqrt();
            d < a.diameter_mm / 2.0
        }).map(|c| c.probability).fold(f64::MIN, f64::max);
        println!("anno d={:.1} -> best hit prob {:.4}", a.diameter_mm, hit);
    }
    let top: Vec<(f64, [f64;3])> = cands.iter().take(8).map(|c| (c.probability, c.center)).collect();
    println!("top candidates: {top:.3?}");
}
