//! Line-oriented `key = value` configuration documents with dotted module
//! namespaces (`detector.lr`, `fpr3d.dropout_fc`, `phantom.sphere_count`).
//! The same format is echoed next to every CLI run's outputs and embedded
//! in checkpoints, so a written document always round-trips.

use std::collections::BTreeMap;

use crate::ct::PhantomParams;
use crate::detector::DetectorConfig;
use crate::fpr::Fpr3dConfig;
use crate::{Error, Result};

/// Sorted key/value document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    map: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            };
            if line.trim().is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    i + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvDoc { map })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    /// Overlay `other` on top of this document.
    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Render as sorted `key = value` lines, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Parse(format!("config key {key}: expected {want}, got {value:?}"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split_whitespace().map(|p| p_usize(key, p)).collect()
}

fn p_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace().map(|p| p_f64(key, p)).collect()
}

fn p_bool_list(key: &str, v: &str) -> Result<Vec<bool>> {
    v.split_whitespace().map(|p| p_bool(key, p)).collect()
}

fn fixed<const N: usize>(key: &str, v: Vec<usize>) -> Result<[usize; N]> {
    let n = v.len();
    v.try_into()
        .map_err(|_| bad(key, &format!("{n} values"), &format!("{N} values")))
}

fn fixed_f64<const N: usize>(key: &str, v: Vec<f64>) -> Result<[f64; N]> {
    let n = v.len();
    v.try_into()
        .map_err(|_| bad(key, &format!("{n} values"), &format!("{N} values")))
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Apply every `detector.*` key of the document.
pub fn apply_detector(cfg: &mut DetectorConfig, doc: &KvDoc) -> Result<()> {
    for (key, v) in doc.iter() {
        let Some(field) = key.strip_prefix("detector.") else {
            continue;
        };
        match field {
            "input_extent" => cfg.input_extent = p_usize(key, v)?,
            "backbone_widths" => cfg.backbone_widths = p_usize_list(key, v)?,
            "backbone_convs" => cfg.backbone_convs = p_usize_list(key, v)?,
            "backbone_pools" => cfg.backbone_pools = p_bool_list(key, v)?,
            "deconv" => {
                let [k, s, p, c] = fixed::<4>(key, p_usize_list(key, v)?)?;
                cfg.deconv = crate::detector::DeconvSpec {
                    kernel: k,
                    stride: s,
                    pad: p,
                    channels: c,
                };
            }
            "use_deconv" => cfg.use_deconv = p_bool(key, v)?,
            "anchor_sizes" => cfg.anchor_sizes = p_f64_list(key, v)?,
            "rpn_hidden" => cfg.rpn_hidden = p_usize(key, v)?,
            "roi_grid" => {
                let [w, h] = fixed::<2>(key, p_usize_list(key, v)?)?;
                cfg.roi_grid = (w, h);
            }
            "roi_dense" => {
                let [a, b] = fixed::<2>(key, p_usize_list(key, v)?)?;
                cfg.roi_dense = (a, b);
            }
            "pre_nms_k" => cfg.pre_nms_k = p_usize(key, v)?,
            "post_nms_k" => cfg.post_nms_k = p_usize(key, v)?,
            "proposal_nms_iou" => cfg.proposal_nms_iou = p_f64(key, v)?,
            "final_nms_iou" => cfg.final_nms_iou = p_f64(key, v)?,
            "max_final_per_slice" => cfg.max_final_per_slice = p_usize(key, v)?,
            "pos_iou" => cfg.pos_iou = p_f64(key, v)?,
            "neg_iou" => cfg.neg_iou = p_f64(key, v)?,
            "roi_pos_iou" => cfg.roi_pos_iou = p_f64(key, v)?,
            "rpn_batch" => cfg.rpn_batch = p_usize(key, v)?,
            "rpn_min_neg" => cfg.rpn_min_neg = p_usize(key, v)?,
            "roi_batch" => cfg.roi_batch = p_usize(key, v)?,
            "roi_min_neg" => cfg.roi_min_neg = p_usize(key, v)?,
            "norm_mean_hu" => cfg.norm_mean_hu = p_f64(key, v)?,
            "norm_scale_hu" => cfg.norm_scale_hu = p_f64(key, v)?,
            "roi_dropout" => cfg.roi_dropout = p_f64(key, v)?,
            "lr" => cfg.lr = p_f64(key, v)?,
            "momentum" => cfg.momentum = p_f64(key, v)?,
            "weight_decay" => cfg.weight_decay = p_f64(key, v)?,
            "lr_decay_step" => cfg.lr_decay_step = p_usize(key, v)?,
            "lr_decay" => cfg.lr_decay = p_f64(key, v)?,
            "warmup_steps" => cfg.warmup_steps = p_usize(key, v)?,
            "clip_grad_norm" => cfg.clip_grad_norm = p_f64(key, v)?,
            "epochs" => cfg.epochs = p_usize(key, v)?,
            "negative_slice_fraction" => cfg.negative_slice_fraction = p_f64(key, v)?,
            "min_gt_radius_mm" => cfg.min_gt_radius_mm = p_f64(key, v)?,
            "score_floor" => cfg.score_floor = p_f64(key, v)?,
            "merge_xy_voxels" => cfg.merge_xy_voxels = p_f64(key, v)?,
            "merge_z_slices" => cfg.merge_z_slices = p_usize(key, v)?,
            "seed" => cfg.seed = p_u64(key, v)?,
            _ => return Err(Error::Parse(format!("unknown config key {key}"))),
        }
    }
    Ok(())
}

/// Write every `detector.*` key of the configuration.
pub fn emit_detector(cfg: &DetectorConfig, doc: &mut KvDoc) {
    doc.set("detector.input_extent", cfg.input_extent);
    doc.set("detector.backbone_widths", join(&cfg.backbone_widths));
    doc.set("detector.backbone_convs", join(&cfg.backbone_convs));
    doc.set("detector.backbone_pools", join(&cfg.backbone_pools));
    doc.set(
        "detector.deconv",
        format!(
            "{} {} {} {}",
            cfg.deconv.kernel, cfg.deconv.stride, cfg.deconv.pad, cfg.deconv.channels
        ),
    );
    doc.set("detector.use_deconv", cfg.use_deconv);
    doc.set("detector.anchor_sizes", join(&cfg.anchor_sizes));
    doc.set("detector.rpn_hidden", cfg.rpn_hidden);
    doc.set(
        "detector.roi_grid",
        format!("{} {}", cfg.roi_grid.0, cfg.roi_grid.1),
    );
    doc.set(
        "detector.roi_dense",
        format!("{} {}", cfg.roi_dense.0, cfg.roi_dense.1),
    );
    doc.set("detector.pre_nms_k", cfg.pre_nms_k);
    doc.set("detector.post_nms_k", cfg.post_nms_k);
    doc.set("detector.proposal_nms_iou", cfg.proposal_nms_iou);
    doc.set("detector.final_nms_iou", cfg.final_nms_iou);
    doc.set("detector.max_final_per_slice", cfg.max_final_per_slice);
    doc.set("detector.pos_iou", cfg.pos_iou);
    doc.set("detector.neg_iou", cfg.neg_iou);
    doc.set("detector.roi_pos_iou", cfg.roi_pos_iou);
    doc.set("detector.rpn_batch", cfg.rpn_batch);
    doc.set("detector.rpn_min_neg", cfg.rpn_min_neg);
    doc.set("detector.roi_batch", cfg.roi_batch);
    doc.set("detector.roi_min_neg", cfg.roi_min_neg);
    doc.set("detector.norm_mean_hu", cfg.norm_mean_hu);
    doc.set("detector.norm_scale_hu", cfg.norm_scale_hu);
    doc.set("detector.roi_dropout", cfg.roi_dropout);
    doc.set("detector.lr", cfg.lr);
    doc.set("detector.momentum", cfg.momentum);
    doc.set("detector.weight_decay", cfg.weight_decay);
    doc.set("detector.lr_decay_step", cfg.lr_decay_step);
    doc.set("detector.lr_decay", cfg.lr_decay);
    doc.set("detector.warmup_steps", cfg.warmup_steps);
    doc.set("detector.clip_grad_norm", cfg.clip_grad_norm);
    doc.set("detector.epochs", cfg.epochs);
    doc.set(
        "detector.negative_slice_fraction",
        cfg.negative_slice_fraction,
    );
    doc.set("detector.min_gt_radius_mm", cfg.min_gt_radius_mm);
    doc.set("detector.score_floor", cfg.score_floor);
    doc.set("detector.merge_xy_voxels", cfg.merge_xy_voxels);
    doc.set("detector.merge_z_slices", cfg.merge_z_slices);
    doc.set("detector.seed", cfg.seed);
}

/// Apply every `fpr3d.*` key of the document.
pub fn apply_fpr(cfg: &mut Fpr3dConfig, doc: &KvDoc) -> Result<()> {
    for (key, v) in doc.iter() {
        let Some(field) = key.strip_prefix("fpr3d.") else {
            continue;
        };
        match field {
            "conv_channels" => cfg.conv_channels = p_usize_list(key, v)?,
            "conv_kernel" => cfg.conv_kernel = p_usize(key, v)?,
            "pool_after" => cfg.pool_after = p_usize_list(key, v)?,
            "dense_widths" => cfg.dense_widths = p_usize_list(key, v)?,
            "dropout_fc" => cfg.dropout_fc = p_f64(key, v)?,
            "dropout_pool" => cfg.dropout_pool = p_f64(key, v)?,
            "patch_extent" => {
                let [x, y, z] = fixed::<3>(key, p_usize_list(key, v)?)?;
                cfg.patch_extent = (x, y, z);
            }
            "crop_extent" => {
                let [x, y, z] = fixed::<3>(key, p_usize_list(key, v)?)?;
                cfg.crop_extent = (x, y, z);
            }
            "norm_mean_hu" => cfg.norm_mean_hu = p_f64(key, v)?,
            "norm_scale_hu" => cfg.norm_scale_hu = p_f64(key, v)?,
            "duplicate_factor" => cfg.duplicate_factor = p_usize(key, v)?,
            "lr" => cfg.lr = p_f64(key, v)?,
            "momentum" => cfg.momentum = p_f64(key, v)?,
            "weight_decay" => cfg.weight_decay = p_f64(key, v)?,
            "epochs" => cfg.epochs = p_usize(key, v)?,
            "val_fraction" => cfg.val_fraction = p_f64(key, v)?,
            "early_stop_val_acc" => {
                cfg.early_stop_val_acc = if v == "none" {
                    None
                } else {
                    Some(p_f64(key, v)?)
                }
            }
            "negatives_cap" => {
                cfg.negatives_cap = if v == "none" {
                    None
                } else {
                    Some(p_usize(key, v)?)
                }
            }
            "seed" => cfg.seed = p_u64(key, v)?,
            _ => return Err(Error::Parse(format!("unknown config key {key}"))),
        }
    }
    Ok(())
}

/// Write every `fpr3d.*` key of the configuration.
pub fn emit_fpr(cfg: &Fpr3dConfig, doc: &mut KvDoc) {
    doc.set("fpr3d.conv_channels", join(&cfg.conv_channels));
    doc.set("fpr3d.conv_kernel", cfg.conv_kernel);
    doc.set("fpr3d.pool_after", join(&cfg.pool_after));
    doc.set("fpr3d.dense_widths", join(&cfg.dense_widths));
    doc.set("fpr3d.dropout_fc", cfg.dropout_fc);
    doc.set("fpr3d.dropout_pool", cfg.dropout_pool);
    doc.set(
        "fpr3d.patch_extent",
        format!(
            "{} {} {}",
            cfg.patch_extent.0, cfg.patch_extent.1, cfg.patch_extent.2
        ),
    );
    doc.set(
        "fpr3d.crop_extent",
        format!(
            "{} {} {}",
            cfg.crop_extent.0, cfg.crop_extent.1, cfg.crop_extent.2
        ),
    );
    doc.set("fpr3d.norm_mean_hu", cfg.norm_mean_hu);
    doc.set("fpr3d.norm_scale_hu", cfg.norm_scale_hu);
    doc.set("fpr3d.duplicate_factor", cfg.duplicate_factor);
    doc.set("fpr3d.lr", cfg.lr);
    doc.set("fpr3d.momentum", cfg.momentum);
    doc.set("fpr3d.weight_decay", cfg.weight_decay);
    doc.set("fpr3d.epochs", cfg.epochs);
    doc.set("fpr3d.val_fraction", cfg.val_fraction);
    doc.set(
        "fpr3d.early_stop_val_acc",
        cfg.early_stop_val_acc
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    doc.set(
        "fpr3d.negatives_cap",
        cfg.negatives_cap
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    doc.set("fpr3d.seed", cfg.seed);
}

/// Apply every `phantom.*` key of the document.
pub fn apply_phantom(params: &mut PhantomParams, doc: &KvDoc) -> Result<()> {
    for (key, v) in doc.iter() {
        let Some(field) = key.strip_prefix("phantom.") else {
            continue;
        };
        match field {
            "extents" => {
                let [x, y, z] = fixed::<3>(key, p_usize_list(key, v)?)?;
                params.extents = (x, y, z);
            }
            "spacing" => params.spacing = fixed_f64::<3>(key, p_f64_list(key, v)?)?,
            "origin" => params.origin = fixed_f64::<3>(key, p_f64_list(key, v)?)?,
            "sphere_count" => params.sphere_count = p_usize(key, v)?,
            "diameter_mm" => {
                let [a, b] = fixed_f64::<2>(key, p_f64_list(key, v)?)?;
                params.diameter_mm = (a, b);
            }
            "contrast_hu" => params.contrast_hu = p_f64(key, v)?,
            "noise_sigma_hu" => params.noise_sigma_hu = p_f64(key, v)?,
            "background_hu" => params.background_hu = p_f64(key, v)?,
            "vessel_count" => params.vessel_count = p_usize(key, v)?,
            "vessel_radius_mm" => {
                let [a, b] = fixed_f64::<2>(key, p_f64_list(key, v)?)?;
                params.vessel_radius_mm = (a, b);
            }
            "vessel_contrast_hu" => params.vessel_contrast_hu = p_f64(key, v)?,
            "margin_xy_mm" => params.margin_xy_mm = p_f64(key, v)?,
            "margin_z_mm" => params.margin_z_mm = p_f64(key, v)?,
            "min_separation_mm" => params.min_separation_mm = p_f64(key, v)?,
            _ => return Err(Error::Parse(format!("unknown config key {key}"))),
        }
    }
    Ok(())
}

/// Write every `phantom.*` key of the parameters.
pub fn emit_phantom(params: &PhantomParams, doc: &mut KvDoc) {
    doc.set(
        "phantom.extents",
        format!(
            "{} {} {}",
            params.extents.0, params.extents.1, params.extents.2
        ),
    );
    doc.set("phantom.spacing", join(&params.spacing));
    doc.set("phantom.origin", join(&params.origin));
    doc.set("phantom.sphere_count", params.sphere_count);
    doc.set(
        "phantom.diameter_mm",
        format!("{} {}", params.diameter_mm.0, params.diameter_mm.1),
    );
    doc.set("phantom.contrast_hu", params.contrast_hu);
    doc.set("phantom.noise_sigma_hu", params.noise_sigma_hu);
    doc.set("phantom.background_hu", params.background_hu);
    doc.set("phantom.vessel_count", params.vessel_count);
    doc.set(
        "phantom.vessel_radius_mm",
        format!(
            "{} {}",
            params.vessel_radius_mm.0, params.vessel_radius_mm.1
        ),
    );
    doc.set("phantom.vessel_contrast_hu", params.vessel_contrast_hu);
    doc.set("phantom.margin_xy_mm", params.margin_xy_mm);
    doc.set("phantom.margin_z_mm", params.margin_z_mm);
    doc.set("phantom.min_separation_mm", params.min_separation_mm);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_handles_comments_and_crlf() {
        let doc = KvDoc::parse(
            "# a comment\n\ndetector.lr = 0.01\r\nfpr3d.dropout_fc = 0.5 # inline\n",
        )
        .unwrap();
        assert_eq!(doc.get("detector.lr"), Some("0.01"));
        assert_eq!(doc.get("fpr3d.dropout_fc"), Some("0.5"));
        assert!(KvDoc::parse("not a pair\n").is_err());
    }

    #[test]
    fn detector_config_round_trips_through_doc() {
        let cfg = DetectorConfig::desk();
        let mut doc = KvDoc::new();
        emit_detector(&cfg, &mut doc);
        let mut back = DetectorConfig::full();
        apply_detector(&mut back, &doc).unwrap();
        let mut doc2 = KvDoc::new();
        emit_detector(&back, &mut doc2);
        assert_eq!(doc.to_text(), doc2.to_text());
        assert_eq!(back.input_extent, 96);
        assert_eq!(back.backbone_widths, vec![8, 16, 32, 64]);
    }

    #[test]
    fn fpr_config_round_trips_through_doc() {
        let cfg = Fpr3dConfig::desk();
        let mut doc = KvDoc::new();
        emit_fpr(&cfg, &mut doc);
        let mut back = Fpr3dConfig::full();
        apply_fpr(&mut back, &doc).unwrap();
        let mut doc2 = KvDoc::new();
        emit_fpr(&back, &mut doc2);
        assert_eq!(doc.to_text(), doc2.to_text());
        assert_eq!(back.crop_extent, (20, 20, 12));
    }

    #[test]
    fn phantom_params_round_trip_through_doc() {
        let mut p = PhantomParams::default();
        p.vessel_count = 5;
        p.diameter_mm = (6.0, 12.5);
        let mut doc = KvDoc::new();
        emit_phantom(&p, &mut doc);
        let mut back = PhantomParams::default();
        apply_phantom(&mut back, &doc).unwrap();
        assert_eq!(back.vessel_count, 5);
        assert_eq!(back.diameter_mm, (6.0, 12.5));
    }

    #[test]
    fn unknown_keys_in_owned_namespace_are_rejected() {
        let doc = KvDoc::parse("detector.bogus = 1\n").unwrap();
        assert!(apply_detector(&mut DetectorConfig::desk(), &doc).is_err());
        // Foreign namespaces pass through untouched.
        let doc = KvDoc::parse("fpr3d.lr = 0.1\n").unwrap();
        apply_detector(&mut DetectorConfig::desk(), &doc).unwrap();
    }
}
