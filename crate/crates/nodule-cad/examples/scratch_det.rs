use nodule_cad::ct::{generate_phantom, Annotation, CtVolume, PhantomParams};
use nodule_cad::detector::{train_detector, DetectorConfig};
use nodule_cad::froc::froc_curve;
use nodule_cad::pipeline::detect_all;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let params = PhantomParams { vessel_count: 4, ..PhantomParams::default() };
    let mut train: Vec<(CtVolume, Vec<Annotation>)> = Vec::new();
    for i in 0..8u64 {
        let uid = format!("d-{seed}-{i:02}");
        train.push(generate_phantom(&uid, seed * 101 + i, &params).unwrap());
    }
    let det_cfg = DetectorConfig {
        epochs, lr,
        lr_decay_step: 600,
        lr_decay: 0.3,
        seed: 1000 + seed,
        ..DetectorConfig::desk()
    };
    let mut ep_losses: Vec<f64> = Vec::new();
    let mut acc = (0usize, 0.0f64);
    let (det, _) = train_detector(&train, &det_cfg, |step, loss| {
        acc.0 += 1; acc.1 += loss;
        if acc.0 == 80 { ep_losses.push(acc.1 / 80.0); acc = (0, 0.0); }
        let _ = step;
    }).unwrap();
    let vols: Vec<CtVolume> = train.iter().map(|(v, _)| v.clone()).collect();
    let annos: Vec<Annotation> = train.iter().flat_map(|(_, a)| a.iter().cloned()).collect();
    let scans: Vec<String> = vols.iter().map(|v| v.series_uid().to_string()).collect();
    let cands = detect_all(&det, &vols, 0.02).unwrap();
    let msg = if cands.is_empty() { "NO CANDIDATES".to_string() } else {
        let c = froc_curve(&scans, &cands, &annos).unwrap();
        format!("train max sens {:.3} ({} cands)", c.max_sensitivity(), cands.len())
    };
    println!("seed {seed} lr {lr} ep {epochs}: losses/80steps {:?} -> {msg}",
        ep_losses.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());
}
