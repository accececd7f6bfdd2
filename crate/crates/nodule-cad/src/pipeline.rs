//! Dataset loading and the glue that chains the two stages.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ct::{load_annotations, load_volume, Annotation, Candidate, CtVolume};
use crate::detector::{detect_candidates, DetectorModel};
use crate::fpr::{balance_duplicate, extract_patch, label_candidate, Fpr3dConfig, Patch};
use crate::{Error, Result};

/// Load every `.mhd` volume in a directory (sorted by file name) together
/// with the matching rows of its `annotations.csv`, when present.
pub fn load_dataset(dir: &Path) -> Result<Vec<(CtVolume, Vec<Annotation>)>> {
    let mut mhds: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mhd"))
        .collect();
    mhds.sort();
    if mhds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .mhd volumes under {}",
            dir.display()
        )));
    }
    let annos_path = dir.join("annotations.csv");
    let annotations = if annos_path.exists() {
        load_annotations(&annos_path)?
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(mhds.len());
    for p in mhds {
        let vol = load_volume(&p)?;
        let mine: Vec<Annotation> = annotations
            .iter()
            .filter(|a| a.series_uid == vol.series_uid())
            .cloned()
            .collect();
        out.push((vol, mine));
    }
    Ok(out)
}

/// Run stage-1 detection over every volume, concatenating candidates in
/// volume order.
pub fn detect_all(
    model: &DetectorModel,
    volumes: &[CtVolume],
    score_floor: f64,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for vol in volumes {
        out.extend(detect_candidates(model, vol, score_floor)?);
    }
    Ok(out)
}

/// Assemble the stage-2 training set from stage-1 candidates: label each
/// candidate by whether its center lies inside an annotated nodule, extract
/// its patch, subsample negatives to the configured cap, and duplicate
/// positives by the configured factor.
pub fn build_fpr_training_set(
    scans: &[(CtVolume, Vec<Annotation>)],
    candidates: &[Candidate],
    cfg: &Fpr3dConfig,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061746368);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for c in candidates {
        let Some((vol, annos)) = scans
            .iter()
            .find(|(v, _)| v.series_uid() == c.series_uid)
        else {
            return Err(Error::InvalidArgument(format!(
                "no volume for candidate scan {}",
                c.series_uid
            )));
        };
        let label = label_candidate(c, annos);
        let mut patch = extract_patch(
            vol,
            c.center,
            cfg.patch_extent,
            cfg.norm_mean_hu,
            cfg.norm_scale_hu,
        )?;
        patch.label = Some(label);
        patch.candidate = Some(c.clone());
        if label {
            positives.push(patch);
        } else {
            negatives.push(patch);
        }
    }
    if let Some(cap) = cfg.negatives_cap {
        if negatives.len() > cap {
            negatives.shuffle(&mut rng);
            negatives.truncate(cap);
        }
    }
    let mut combined = positives;
    combined.extend(negatives);
    Ok(balance_duplicate(combined, cfg.duplicate_factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct::{generate_phantom, save_annotations, save_volume, ElementType, PhantomParams};

    #[test]
    fn dataset_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let params = PhantomParams {
            extents: (40, 40, 12),
            sphere_count: 1,
            diameter_mm: (8.0, 10.0),
            margin_xy_mm: 10.0,
            ..PhantomParams::default()
        };
        let mut all_annos = Vec::new();
        for i in 0..2 {
            let uid = format!("scan-{i:03}");
            let (vol, annos) = generate_phantom(&uid, i as u64, &params).unwrap();
            save_volume(&vol, &dir.path().join(format!("{uid}.mhd")), ElementType::Float).unwrap();
            all_annos.extend(annos);
        }
        save_annotations(&dir.path().join("annotations.csv"), &all_annos).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].0.series_uid(), "scan-000");
        assert_eq!(ds[0].1.len(), 1);
        assert_eq!(ds[1].1.len(), 1);
    }
}
