//! FROC evaluation on a hand-built scene: curve points, the seven
//! sensitivity readouts, and the average score.
//!
//!     cargo run --example froc_eval

use nodule_cad::ct::{Annotation, Candidate, CandidateSource};
use nodule_cad::froc::{
    average_froc_score, froc_curve, match_candidates, sensitivity_at, FROC_FP_RATES,
};

fn anno(uid: &str, center: [f64; 3], d: f64) -> Annotation {
    Annotation {
        series_uid: uid.into(),
        center,
        diameter_mm: d,
    }
}

fn cand(uid: &str, center: [f64; 3], p: f64) -> Candidate {
    Candidate {
        series_uid: uid.into(),
        center,
        probability: p,
        source: CandidateSource::Detector,
    }
}

fn main() {
    let scans: Vec<String> = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
    let annotations = vec![
        anno("s1", [0.0, 0.0, 0.0], 10.0),
        anno("s1", [100.0, 0.0, 0.0], 20.0),
        anno("s2", [0.0, 0.0, 0.0], 10.0),
    ];
    let candidates = vec![
        cand("s1", [1.0, 0.0, 0.0], 0.9),    // hit
        cand("s1", [100.0, 0.0, 3.0], 0.8),  // hit
        cand("s1", [0.0, 2.0, 0.0], 0.7),    // duplicate hit, ignored
        cand("s2", [50.0, 50.0, 50.0], 0.6), // miss
        cand("s2", [0.0, 0.0, 4.9], 0.5),    // hit
        cand("s3", [10.0, 10.0, 10.0], 0.4), // miss on a nodule-free scan
        cand("s1", [0.0, 0.0, 5.0], 0.3),    // exactly on the boundary: miss
    ];

    let m = match_candidates(&scans, &candidates, &annotations).unwrap();
    println!(
        "matching: {} TPs, {} FPs over {} nodules in {} scans",
        m.true_positives, m.false_positives, m.total_nodules, m.total_scans
    );

    let curve = froc_curve(&scans, &candidates, &annotations).unwrap();
    println!("curve points (threshold, FPs/scan, sensitivity):");
    for p in curve.points() {
        println!(
            "  {:.2}  {:.4}  {:.4}",
            p.threshold, p.fps_per_scan, p.sensitivity
        );
    }
    println!("sensitivity at the seven FP rates:");
    for rate in FROC_FP_RATES {
        println!("  {:>6.3} FPs/scan -> {:.4}", rate, sensitivity_at(&curve, rate));
    }
    println!("average FROC score: {:.6}", average_froc_score(&curve));
}
