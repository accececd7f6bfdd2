use nodule_cad::ct::{build_slice_triplet, generate_phantom, PhantomParams};
use nodule_cad::detector::*;
use nodule_cad::geom::{decode_box, iou, generate_anchors, BBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let params = PhantomParams { vessel_count: 2, ..PhantomParams::default() };
    let (vol, annos) = generate_phantom("ov", 5, &params).unwrap();
    let cfg = DetectorConfig { seed: 3, ..DetectorConfig::desk() };
    let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut state = TrainState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scans = vec![(vol.clone(), annos.clone())];
    let slices = detector_training_slices(&scans, &cfg, &mut rng);
    for _ in 0..30 {
        for s in &slices {
            let img = build_slice_triplet(&vol, s.z, cfg.input_extent).unwrap();
            train_step(&mut model, &img, &s.gts, &mut state, &mut rng).unwrap();
        }
    }
    // inspect the best-annotated slice
    let s = slices.iter().max_by_key(|s| s.gts.len()).unwrap();
    println!("slice z={} gts={:?}", s.z, s.gts);
    let img = build_slice_triplet(&vol, s.z, cfg.input_extent).unwrap();
    let out = rpn_forward(&model, &img).unwrap();
    // best objectness near each gt
    for gt in &s.gts {
        let mut best = (0.0f64, 0usize);
        for (i, a) in out.anchors.boxes().iter().enumerate() {
            if iou(a, gt) > 0.3 && out.objectness[i] > best.0 {
                best = (out.objectness[i], i);
            }
        }
        let d = decode_box(&out.anchors.boxes()[best.1], &out.deltas[best.1]);
        println!("gt {gt:?}: best nearby objectness {:.4}, decoded {:?} iou_after_decode {:.3}",
            best.0, d, iou(&d, gt));
    }
    let max_obj = out.objectness.iter().cloned().fold(0.0, f64::max);
    println!("max objectness anywhere: {max_obj:.4}");
    let coverage = (out.anchors.feature_extents().1 as f64 * cfg.feature_stride()).min(cfg.input_extent as f64);
    let props = propose_rois(&out.objectness, &out.deltas, &out.anchors, coverage,
        cfg.pre_nms_k, cfg.post_nms_k, cfg.proposal_nms_iou).unwrap();
    println!("{} proposals; best gt IoU per gt:", props.len());
    for gt in &s.gts {
        let best = props.iter().map(|p| iou(p, gt)).fold(0.0, f64::max);
        println!("  gt best proposal IoU {:.3}", best);
    }
    let _ = generate_anchors((1,1), 4.0, &[4.0]);
}
