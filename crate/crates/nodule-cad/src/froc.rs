//! FROC evaluation: candidate/annotation matching, the sensitivity vs
//! false-positives-per-scan curve, the seven-point average score, and CSV
//! report emission.

use std::path::Path;

use crate::ct::{Annotation, Candidate};
use crate::util::fmt_float;
use crate::{Error, Result};

/// The seven operating points of the average score, in FPs per scan.
pub const FROC_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Role of one candidate after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRole {
    /// Highest-scored hit on its annotation.
    TruePositive,
    /// Hit an annotation that a higher-scored candidate already claimed;
    /// neither a TP nor an FP.
    Ignored,
    FalsePositive,
}

/// One candidate's matching outcome; indices refer to the input slices.
#[derive(Debug, Clone, Copy)]
pub struct CandidateMatch {
    pub candidate_index: usize,
    /// Index of the annotation whose sphere contains this candidate, if any.
    pub annotation_index: Option<usize>,
    pub role: MatchRole,
}

/// Matching of all candidates against all annotations over a scan set.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Scan uid plus the matches of candidates on that scan.
    pub per_scan: Vec<(String, Vec<CandidateMatch>)>,
    /// Detected flag per annotation.
    pub detected: Vec<bool>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub total_nodules: usize,
    pub total_scans: usize,
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_scan_refs(
    scans: &[String],
    candidates: &[Candidate],
    annotations: &[Annotation],
) -> Result<()> {
    let known: std::collections::BTreeSet<&str> = scans.iter().map(|s| s.as_str()).collect();
    let mut offenders: Vec<String> = Vec::new();
    for c in candidates {
        if !known.contains(c.series_uid.as_str()) && !offenders.contains(&c.series_uid) {
            offenders.push(c.series_uid.clone());
        }
    }
    for a in annotations {
        if !known.contains(a.series_uid.as_str()) && !offenders.contains(&a.series_uid) {
            offenders.push(a.series_uid.clone());
        }
    }
    if !offenders.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "records reference unknown scans: {}",
            offenders.join(", ")
        )));
    }
    Ok(())
}

/// Match candidates to annotations over a fixed scan set.
///
/// A candidate hits an annotation when its distance to the annotation
/// center is strictly less than diameter/2, and it matches the nearest such
/// annotation. Per annotation, the highest-scored hit is the true positive
/// and further hits are ignored; candidates hitting nothing are false
/// positives.
pub fn match_candidates(
    scans: &[String],
    candidates: &[Candidate],
    annotations: &[Annotation],
) -> Result<MatchResult> {
    check_scan_refs(scans, candidates, annotations)?;
    let classified = classify(candidates, annotations);
    let mut detected = vec![false; annotations.len()];
    let mut tp = 0;
    let mut fp = 0;
    let mut per_scan: Vec<(String, Vec<CandidateMatch>)> = scans
        .iter()
        .map(|s| (s.clone(), Vec::new()))
        .collect();
    for m in &classified {
        match m.role {
            MatchRole::TruePositive => {
                detected[m.annotation_index.unwrap()] = true;
                tp += 1;
            }
            MatchRole::FalsePositive => fp += 1,
            MatchRole::Ignored => {}
        }
        let uid = &candidates[m.candidate_index].series_uid;
        let slot = per_scan
            .iter_mut()
            .find(|(s, _)| s == uid)
            .expect("scan refs checked");
        slot.1.push(*m);
    }
    Ok(MatchResult {
        per_scan,
        detected,
        true_positives: tp,
        false_positives: fp,
        total_nodules: annotations.len(),
        total_scans: scans.len(),
    })
}

/// Hit assignment independent of any threshold. Candidates keep input order.
fn classify(candidates: &[Candidate], annotations: &[Annotation]) -> Vec<CandidateMatch> {
    let mut out: Vec<CandidateMatch> = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let mut hit: Option<(usize, f64)> = None;
        for (j, a) in annotations.iter().enumerate() {
            if a.series_uid != c.series_uid {
                continue;
            }
            let d = dist3(c.center, a.center);
            if d < a.diameter_mm / 2.0 {
                hit = match hit {
                    Some((_, best)) if best <= d => hit,
                    _ => Some((j, d)),
                };
            }
        }
        out.push(CandidateMatch {
            candidate_index: i,
            annotation_index: hit.map(|(j, _)| j),
            role: MatchRole::FalsePositive, // roles resolved below
        });
    }
    // Per annotation, the best-scored hit is the TP; the rest are ignored.
    let mut best: Vec<Option<usize>> = vec![None; annotations.len()];
    for m in &out {
        if let Some(j) = m.annotation_index {
            let better = match best[j] {
                None => true,
                Some(prev) => {
                    candidates[m.candidate_index].probability
                        > candidates[prev].probability
                }
            };
            if better {
                best[j] = Some(m.candidate_index);
            }
        }
    }
    for m in &mut out {
        m.role = match m.annotation_index {
            None => MatchRole::FalsePositive,
            Some(j) if best[j] == Some(m.candidate_index) => MatchRole::TruePositive,
            Some(_) => MatchRole::Ignored,
        };
    }
    out
}

/// One operating point of a FROC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub sensitivity: f64,
}

/// Monotone FROC curve plus the counts behind it.
#[derive(Debug, Clone)]
pub struct FrocCurve {
    points: Vec<FrocPoint>,
    pub total_scans: usize,
    pub total_nodules: usize,
    pub total_candidates: usize,
}

impl FrocCurve {
    pub fn points(&self) -> &[FrocPoint] {
        &self.points
    }

    /// Sensitivity of the last (lowest-threshold) operating point.
    pub fn max_sensitivity(&self) -> f64 {
        self.points.last().map(|p| p.sensitivity).unwrap_or(0.0)
    }

    pub fn candidates_per_scan(&self) -> f64 {
        self.total_candidates as f64 / self.total_scans as f64
    }

    /// Smallest FPs/scan at which sensitivity reaches `target`, if the
    /// curve ever does.
    pub fn fps_at_sensitivity(&self, target: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.sensitivity >= target)
            .map(|p| p.fps_per_scan)
    }
}

/// Sweep the distinct candidate scores from high to low and record
/// (FPs/scan, sensitivity) at each threshold. Points are deduplicated per
/// FPs/scan value (keeping the highest sensitivity) and sorted by FPs/scan.
pub fn froc_curve(
    scans: &[String],
    candidates: &[Candidate],
    annotations: &[Annotation],
) -> Result<FrocCurve> {
    if scans.is_empty() {
        return Err(Error::InvalidArgument(
            "froc_curve needs at least one scan".into(),
        ));
    }
    if annotations.is_empty() {
        return Err(Error::InvalidArgument(
            "froc_curve needs at least one annotation (sensitivity is undefined otherwise)".into(),
        ));
    }
    check_scan_refs(scans, candidates, annotations)?;
    let n_scans = scans.len() as f64;
    let n_annotations = annotations.len() as f64;

    if candidates.is_empty() {
        return Ok(FrocCurve {
            points: vec![FrocPoint {
                threshold: f64::INFINITY,
                fps_per_scan: 0.0,
                sensitivity: 0.0,
            }],
            total_scans: scans.len(),
            total_nodules: annotations.len(),
            total_candidates: 0,
        });
    }

    let classified = classify(candidates, annotations);
    // Best hitter score per annotation; false-positive score list.
    let mut ann_best: Vec<Option<f64>> = vec![None; annotations.len()];
    let mut fp_scores: Vec<f64> = Vec::new();
    for m in &classified {
        let p = candidates[m.candidate_index].probability;
        match m.annotation_index {
            Some(j) => {
                ann_best[j] = Some(match ann_best[j] {
                    Some(prev) => prev.max(p),
                    None => p,
                });
            }
            None => fp_scores.push(p),
        }
    }

    let mut thresholds: Vec<f64> = candidates.iter().map(|c| c.probability).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut points: Vec<FrocPoint> = Vec::new();
    for &t in &thresholds {
        let sens = ann_best
            .iter()
            .filter(|b| matches!(b, Some(s) if *s >= t))
            .count() as f64
            / n_annotations;
        let fps = fp_scores.iter().filter(|&&s| s >= t).count() as f64 / n_scans;
        points.push(FrocPoint {
            threshold: t,
            fps_per_scan: fps,
            sensitivity: sens,
        });
    }
    // Dedup by FPs/scan, keeping the best sensitivity (the lowest threshold
    // reaching that FP rate). Thresholds descend, so later entries win.
    let mut dedup: Vec<FrocPoint> = Vec::new();
    for p in points {
        match dedup.last_mut() {
            Some(last) if last.fps_per_scan == p.fps_per_scan => *last = p,
            _ => dedup.push(p),
        }
    }
    debug_assert!(dedup.windows(2).all(|w| {
        w[0].fps_per_scan < w[1].fps_per_scan && w[0].sensitivity <= w[1].sensitivity
    }));
    Ok(FrocCurve {
        points: dedup,
        total_scans: scans.len(),
        total_nodules: annotations.len(),
        total_candidates: candidates.len(),
    })
}

/// Step-function readout: the sensitivity of the most permissive operating
/// point whose FPs/scan does not exceed `fps_target`; 0 when no point
/// qualifies. No interpolation.
pub fn sensitivity_at(curve: &FrocCurve, fps_target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fps_per_scan <= fps_target)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

/// Arithmetic mean of [`sensitivity_at`] over the seven standard FP rates.
pub fn average_froc_score(curve: &FrocCurve) -> f64 {
    let sum: f64 = FROC_FP_RATES
        .iter()
        .map(|&r| sensitivity_at(curve, r))
        .sum();
    sum / FROC_FP_RATES.len() as f64
}

/// A named curve for report emission.
#[derive(Debug, Clone)]
pub struct FrocSystem {
    pub name: String,
    pub curve: FrocCurve,
}

/// Write `froc.csv` (per-threshold operating points) and `summary.csv`
/// (per-system sensitivity, candidates/scan, seven-point average) into
/// `out_dir`, preserving system order. Output is deterministic.
pub fn emit_report(systems: &[FrocSystem], out_dir: &Path) -> Result<()> {
    if systems.is_empty() {
        return Err(Error::InvalidArgument("emit_report needs >= 1 curve".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut froc = String::from("system,threshold,fps_per_scan,sensitivity\n");
    for s in systems {
        for p in s.curve.points() {
            let threshold = if p.threshold.is_finite() {
                fmt_float(p.threshold)
            } else {
                "inf".to_string()
            };
            froc.push_str(&format!(
                "{},{},{},{}\n",
                s.name,
                threshold,
                fmt_float(p.fps_per_scan),
                fmt_float(p.sensitivity)
            ));
        }
    }
    let froc_path = out_dir.join("froc.csv");
    std::fs::write(&froc_path, froc).map_err(|e| Error::io(&froc_path, e))?;

    let mut summary = String::from("system,sensitivity,candidates_per_scan,average_froc_score\n");
    for s in systems {
        summary.push_str(&format!(
            "{},{},{},{}\n",
            s.name,
            fmt_float(s.curve.max_sensitivity()),
            fmt_float(s.curve.candidates_per_scan()),
            fmt_float(average_froc_score(&s.curve))
        ));
    }
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct::CandidateSource;

    fn cand(uid: &str, center: [f64; 3], p: f64) -> Candidate {
        Candidate {
            series_uid: uid.into(),
            center,
            probability: p,
            source: CandidateSource::Detector,
        }
    }

    fn anno(uid: &str, center: [f64; 3], d: f64) -> Annotation {
        Annotation {
            series_uid: uid.into(),
            center,
            diameter_mm: d,
        }
    }

    fn scans(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_center_hit_is_tp() {
        let r = match_candidates(
            &scans(&["s"]),
            &[cand("s", [0.0; 3], 0.9)],
            &[anno("s", [0.0; 3], 10.0)],
        )
        .unwrap();
        assert_eq!((r.true_positives, r.false_positives), (1, 0));
        assert_eq!(r.detected, vec![true]);
    }

    #[test]
    fn coincident_duplicate_is_ignored_not_fp() {
        let r = match_candidates(
            &scans(&["s"]),
            &[cand("s", [0.0; 3], 0.9), cand("s", [0.0; 3], 0.7)],
            &[anno("s", [0.0; 3], 10.0)],
        )
        .unwrap();
        assert_eq!((r.true_positives, r.false_positives), (1, 0));
        let roles: Vec<MatchRole> = r.per_scan[0].1.iter().map(|m| m.role).collect();
        assert_eq!(roles, vec![MatchRole::TruePositive, MatchRole::Ignored]);
    }

    #[test]
    fn boundary_distance_is_excluded() {
        let r = match_candidates(
            &scans(&["s"]),
            &[cand("s", [5.0, 0.0, 0.0], 0.9)],
            &[anno("s", [0.0; 3], 10.0)],
        )
        .unwrap();
        assert_eq!((r.true_positives, r.false_positives), (0, 1));
    }

    #[test]
    fn unknown_scan_reference_lists_offenders() {
        let err = match_candidates(
            &scans(&["s1"]),
            &[cand("mystery", [0.0; 3], 0.5)],
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn all_tp_curve_reaches_full_sensitivity_at_zero_fps() {
        let annos = vec![anno("s", [0.0; 3], 10.0), anno("s", [50.0, 0.0, 0.0], 10.0)];
        let cands = vec![cand("s", [0.0; 3], 0.9), cand("s", [50.0, 0.0, 0.0], 0.8)];
        let curve = froc_curve(&scans(&["s"]), &cands, &annos).unwrap();
        assert_eq!(sensitivity_at(&curve, 0.0), 1.0);
        assert_eq!(average_froc_score(&curve), 1.0);
    }

    #[test]
    fn no_candidates_yields_origin_point() {
        let curve = froc_curve(&scans(&["s"]), &[], &[anno("s", [0.0; 3], 5.0)]).unwrap();
        assert_eq!(curve.points().len(), 1);
        assert_eq!(curve.points()[0].fps_per_scan, 0.0);
        assert_eq!(curve.points()[0].sensitivity, 0.0);
    }

    #[test]
    fn empty_annotations_rejected() {
        assert!(froc_curve(&scans(&["s"]), &[], &[]).is_err());
    }

    #[test]
    fn sensitivity_readout_saturates_and_zeroes() {
        let annos = vec![anno("s", [0.0; 3], 10.0)];
        let cands = vec![
            cand("s", [30.0, 0.0, 0.0], 0.9), // FP appears first
            cand("s", [0.0; 3], 0.5),
        ];
        let curve = froc_curve(&scans(&["s"]), &cands, &annos).unwrap();
        // Beyond the max FPs: final sensitivity.
        assert_eq!(sensitivity_at(&curve, 100.0), 1.0);
        // Target 0 with an immediate FP: no zero-FP operating point.
        assert_eq!(sensitivity_at(&curve, 0.0), 0.0);
        assert_eq!(curve.fps_at_sensitivity(1.0), Some(1.0));
    }

    #[test]
    fn average_is_mean_of_seven_readouts() {
        // Synthetic curve via direct construction: sensitivities 0.1..0.7
        // at exactly the seven rates.
        let points: Vec<FrocPoint> = FROC_FP_RATES
            .iter()
            .zip([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
            .map(|(&r, s)| FrocPoint {
                threshold: 1.0 - s,
                fps_per_scan: r,
                sensitivity: s,
            })
            .collect();
        let curve = FrocCurve {
            points,
            total_scans: 8,
            total_nodules: 10,
            total_candidates: 40,
        };
        assert!((average_froc_score(&curve) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn report_files_are_deterministic_and_ordered() {
        let annos = vec![anno("s", [0.0; 3], 10.0)];
        let cands = vec![cand("s", [0.0; 3], 0.75), cand("s", [40.0, 0.0, 0.0], 0.25)];
        let curve = froc_curve(&scans(&["s"]), &cands, &annos).unwrap();
        let systems = vec![
            FrocSystem {
                name: "stage1".into(),
                curve: curve.clone(),
            },
            FrocSystem {
                name: "stage2".into(),
                curve,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&systems, dir.path()).unwrap();
        let froc1 = std::fs::read(dir.path().join("froc.csv")).unwrap();
        let summary1 = std::fs::read(dir.path().join("summary.csv")).unwrap();
        emit_report(&systems, dir.path()).unwrap();
        assert_eq!(froc1, std::fs::read(dir.path().join("froc.csv")).unwrap());
        assert_eq!(
            summary1,
            std::fs::read(dir.path().join("summary.csv")).unwrap()
        );
        let text = String::from_utf8(summary1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("stage1,"));
        assert!(lines[2].starts_with("stage2,"));
    }
}
