//! False-positive reduction: a 3D convolutional classifier that rescores
//! stage-1 candidates from a volumetric patch around each candidate center.
//!
//! The network is six 3D conv layers (each followed by ReLU), three 3D
//! max-pooling layers, three fully connected layers, and a 2-way softmax.
//! Dropout follows the pooling layers and the first two dense layers.
//! Training patches are augmented by all crop offsets of a fixed-size
//! sub-window and by flips along the three orthogonal axes, and positive
//! patches are duplicated to balance the classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ct::{Annotation, Candidate, CandidateSource, CtVolume};
use crate::optim::Sgd;
use crate::tensor::{DiffGraph, Tensor, Var};
use crate::{Error, Result};

/// HU used to pad patches that stick out of the volume.
pub const AIR_HU: f64 = -1000.0;

#[derive(Debug, Clone)]
pub struct Fpr3dConfig {
    /// Output channels of the six conv layers.
    pub conv_channels: Vec<usize>,
    /// Cubic conv kernel extent (padding keeps spatial extents).
    pub conv_kernel: usize,
    /// Conv indices (0-based) after which a 2x2x2 stride-2 pool runs.
    pub pool_after: Vec<usize>,
    /// Widths of the three dense layers; the last must be 2.
    pub dense_widths: Vec<usize>,
    pub dropout_fc: f64,
    pub dropout_pool: f64,
    /// Patch extent in voxels, (x, y, z) order.
    pub patch_extent: (usize, usize, usize),
    /// Augmentation crop extent, (x, y, z); patch minus crop must be 4 per axis.
    pub crop_extent: (usize, usize, usize),
    pub norm_mean_hu: f64,
    pub norm_scale_hu: f64,
    pub duplicate_factor: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    /// Stop as soon as validation accuracy reaches this value, if set.
    pub early_stop_val_acc: Option<f64>,
    /// Cap on negative candidates kept when assembling a training set.
    pub negatives_cap: Option<usize>,
    pub seed: u64,
}

impl Fpr3dConfig {
    /// Paper-scale preset.
    pub fn full() -> Self {
        Fpr3dConfig {
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            conv_kernel: 3,
            pool_after: vec![1, 3, 5],
            dense_widths: vec![512, 128, 2],
            dropout_fc: 0.5,
            dropout_pool: 0.2,
            patch_extent: (40, 40, 24),
            crop_extent: (36, 36, 20),
            norm_mean_hu: -600.0,
            norm_scale_hu: 300.0,
            duplicate_factor: 8,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            val_fraction: 0.2,
            early_stop_val_acc: None,
            negatives_cap: None,
            seed: 0,
        }
    }

    /// CPU-minutes preset: halved channels, smaller patches, gentler
    /// regularization for the small-sample regime, same layer census and
    /// augmentation arithmetic.
    pub fn desk() -> Self {
        Fpr3dConfig {
            conv_channels: vec![16, 16, 32, 32, 64, 64],
            dense_widths: vec![256, 64, 2],
            patch_extent: (24, 24, 16),
            crop_extent: (20, 20, 12),
            dropout_fc: 0.2,
            dropout_pool: 0.05,
            lr: 0.001,
            epochs: 6,
            ..Fpr3dConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "need exactly 6 conv layers, got {}",
                self.conv_channels.len()
            )));
        }
        if self.pool_after.len() != 3
            || self.pool_after.windows(2).any(|w| w[0] >= w[1])
            || self.pool_after.iter().any(|&p| p >= 6)
        {
            return Err(Error::InvalidArgument(format!(
                "pool placements must be 3 increasing conv indices < 6, got {:?}",
                self.pool_after
            )));
        }
        if self.dense_widths.len() != 3 || *self.dense_widths.last().unwrap() != 2 {
            return Err(Error::InvalidArgument(format!(
                "need 3 dense layers ending in width 2, got {:?}",
                self.dense_widths
            )));
        }
        let diff = (
            self.patch_extent.0 as isize - self.crop_extent.0 as isize,
            self.patch_extent.1 as isize - self.crop_extent.1 as isize,
            self.patch_extent.2 as isize - self.crop_extent.2 as isize,
        );
        if diff != (4, 4, 4) {
            return Err(Error::InvalidArgument(format!(
                "patch minus crop extents must be (4,4,4) for the 125 crop offsets, got {diff:?}"
            )));
        }
        if self.flattened_width() == 0 {
            return Err(Error::InvalidArgument(
                "crop extent collapses to nothing after the three pools".into(),
            ));
        }
        for rate in [self.dropout_fc, self.dropout_pool] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!(
                    "dropout rate must be in [0,1), got {rate}"
                )));
            }
        }
        Ok(())
    }

    /// Crop offsets per axis (5 each when patch - crop = 4).
    pub fn offsets_per_axis(&self) -> (usize, usize, usize) {
        (
            self.patch_extent.0 - self.crop_extent.0 + 1,
            self.patch_extent.1 - self.crop_extent.1 + 1,
            self.patch_extent.2 - self.crop_extent.2 + 1,
        )
    }

    /// Total augmentations per candidate: crop offsets times 8 flips.
    pub fn augmentation_count(&self) -> usize {
        let (ox, oy, oz) = self.offsets_per_axis();
        ox * oy * oz * 8
    }

    /// Layer census `(conv, pool, dense, output width)`.
    pub fn layer_census(&self) -> (usize, usize, usize, usize) {
        (
            self.conv_channels.len(),
            self.pool_after.len(),
            self.dense_widths.len(),
            *self.dense_widths.last().unwrap(),
        )
    }

    /// Spatial extents (z, y, x) after conv `i` and its optional pool.
    fn extent_after(&self, conv_idx: usize) -> (usize, usize, usize) {
        let (cx, cy, cz) = self.crop_extent;
        let mut e = (cz, cy, cx);
        for i in 0..=conv_idx {
            if self.pool_after.contains(&i) {
                e = (e.0 / 2, e.1 / 2, e.2 / 2);
            }
        }
        e
    }

    /// Dense input width after the last conv block.
    pub fn flattened_width(&self) -> usize {
        let e = self.extent_after(5);
        self.conv_channels[5] * e.0 * e.1 * e.2
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = 1;
        let k3 = self.conv_kernel.pow(3);
        for &c_out in &self.conv_channels {
            total += c_out * c_in * k3 + c_out;
            c_in = c_out;
        }
        let mut width = self.flattened_width();
        for &w in &self.dense_widths {
            total += w * width + w;
            width = w;
        }
        total
    }
}

/// Hounsfield normalization: `(hu - mean) / scale`.
pub fn normalize_hu(hu: f64, mean_hu: f64, scale_hu: f64) -> f64 {
    (hu - mean_hu) / scale_hu
}

/// Normalize a whole scan into a `[nz, ny, nx]` tensor.
pub fn normalize_volume(vol: &CtVolume, mean_hu: f64, scale_hu: f64) -> Tensor {
    let (nx, ny, nz) = vol.extents();
    let data = vol
        .data()
        .iter()
        .map(|&v| normalize_hu(v, mean_hu, scale_hu))
        .collect();
    Tensor::new(vec![nz, ny, nx], data).expect("volume extents are valid")
}

/// Crop-offset and flip-mask tag of an augmented patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugTag {
    pub offset: (usize, usize, usize),
    /// Bit 0 flips x (sagittal), bit 1 flips y (coronal), bit 2 flips z (axial).
    pub flip_mask: u8,
}

impl AugTag {
    pub const IDENTITY: AugTag = AugTag {
        offset: (0, 0, 0),
        flip_mask: 0,
    };
}

/// A voxel patch in normalized HU, shaped `[1, dz, dy, dx]`.
#[derive(Debug, Clone)]
pub struct Patch {
    pub data: Tensor,
    pub candidate: Option<Candidate>,
    pub label: Option<bool>,
    pub aug: AugTag,
}

impl Patch {
    /// Patch extents in (x, y, z) order.
    pub fn extent(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[3], s[2], s[1])
    }
}

/// Crop a patch centered on a world-space point; voxels outside the volume
/// read as air. The center must lie inside the volume.
pub fn extract_patch(
    vol: &CtVolume,
    center_world: [f64; 3],
    extent: (usize, usize, usize),
    mean_hu: f64,
    scale_hu: f64,
) -> Result<Patch> {
    let v = vol.world_to_voxel(center_world);
    if !vol.contains_voxel(v) {
        return Err(Error::InvalidArgument(format!(
            "patch center {center_world:?} maps outside the volume (voxel {v:?})"
        )));
    }
    let c = [
        v[0].round() as isize,
        v[1].round() as isize,
        v[2].round() as isize,
    ];
    let (ex, ey, ez) = extent;
    let start = [
        c[0] - (ex / 2) as isize,
        c[1] - (ey / 2) as isize,
        c[2] - (ez / 2) as isize,
    ];
    let mut data = Vec::with_capacity(ex * ey * ez);
    for dz in 0..ez as isize {
        for dy in 0..ey as isize {
            for dx in 0..ex as isize {
                let hu = vol.hu_or(start[0] + dx, start[1] + dy, start[2] + dz, AIR_HU);
                data.push(normalize_hu(hu, mean_hu, scale_hu));
            }
        }
    }
    Ok(Patch {
        data: Tensor::new(vec![1, ez, ey, ex], data)?,
        candidate: None,
        label: None,
        aug: AugTag::IDENTITY,
    })
}

/// Extract the crop at `offset` from a full-size patch.
pub fn crop_patch(patch: &Patch, offset: (usize, usize, usize), crop: (usize, usize, usize)) -> Patch {
    let (px, py, _pz) = patch.extent();
    let (cx, cy, cz) = crop;
    let src = patch.data.data();
    let mut data = Vec::with_capacity(cx * cy * cz);
    for z in 0..cz {
        for y in 0..cy {
            let base = ((z + offset.2) * py + (y + offset.1)) * px + offset.0;
            data.extend_from_slice(&src[base..base + cx]);
        }
    }
    Patch {
        data: Tensor::new(vec![1, cz, cy, cx], data).expect("crop fits"),
        candidate: patch.candidate.clone(),
        label: patch.label,
        aug: AugTag {
            offset,
            flip_mask: 0,
        },
    }
}

/// Flip a patch along the axes selected by `mask` (bit 0 = x, 1 = y, 2 = z).
pub fn flip_patch(patch: &Patch, mask: u8) -> Patch {
    let s = patch.data.shape();
    let (dz, dy, dx) = (s[1], s[2], s[3]);
    let src = patch.data.data();
    let mut data = Vec::with_capacity(src.len());
    for z in 0..dz {
        let sz = if mask & 4 != 0 { dz - 1 - z } else { z };
        for y in 0..dy {
            let sy = if mask & 2 != 0 { dy - 1 - y } else { y };
            for x in 0..dx {
                let sx = if mask & 1 != 0 { dx - 1 - x } else { x };
                data.push(src[(sz * dy + sy) * dx + sx]);
            }
        }
    }
    Patch {
        data: Tensor::new(vec![1, dz, dy, dx], data).expect("same extents"),
        candidate: patch.candidate.clone(),
        label: patch.label,
        aug: AugTag {
            offset: patch.aug.offset,
            flip_mask: patch.aug.flip_mask ^ mask,
        },
    }
}

/// Enumerate every augmentation of a full-size patch: all crop offsets in
/// lexicographic (x, y, z) order, each under all 8 flip masks in order
/// 0..=7. With the standard extents this yields 125 x 8 = 1000 patches.
pub fn enumerate_augmentations(patch: &Patch, cfg: &Fpr3dConfig) -> Result<Vec<Patch>> {
    if patch.extent() != cfg.patch_extent {
        return Err(Error::Shape(format!(
            "patch extent {:?} does not match configured {:?}",
            patch.extent(),
            cfg.patch_extent
        )));
    }
    let (ox, oy, oz) = cfg.offsets_per_axis();
    let mut out = Vec::with_capacity(ox * oy * oz * 8);
    for x in 0..ox {
        for y in 0..oy {
            for z in 0..oz {
                let cropped = crop_patch(patch, (x, y, z), cfg.crop_extent);
                for mask in 0..8u8 {
                    out.push(flip_patch(&cropped, mask));
                }
            }
        }
    }
    Ok(out)
}

/// A candidate is positive iff its center lies strictly inside some
/// annotated nodule of the same scan.
pub fn label_candidate(candidate: &Candidate, annotations: &[Annotation]) -> bool {
    annotations.iter().any(|a| {
        a.series_uid == candidate.series_uid && {
            let d = ((a.center[0] - candidate.center[0]).powi(2)
                + (a.center[1] - candidate.center[1]).powi(2)
                + (a.center[2] - candidate.center[2]).powi(2))
            .sqrt();
            d < a.diameter_mm / 2.0
        }
    })
}

/// Repeat each positive patch `factor` times (duplicates adjacent, original
/// order otherwise); negatives pass through once.
pub fn balance_duplicate(patches: Vec<Patch>, factor: usize) -> Vec<Patch> {
    let mut out = Vec::new();
    for p in patches {
        let copies = if p.label == Some(true) { factor } else { 1 };
        for _ in 0..copies.max(1) {
            out.push(p.clone());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The 3D classifier: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Fpr3dModel {
    pub config: Fpr3dConfig,
    pub params: Vec<(String, Tensor)>,
}

/// He-initialize a classifier from its configuration.
pub fn build_fpr(config: &Fpr3dConfig, rng: &mut ChaCha8Rng) -> Result<Fpr3dModel> {
    config.validate()?;
    let k = config.conv_kernel;
    let mut params = Vec::new();
    let mut c_in = 1usize;
    for (i, &c_out) in config.conv_channels.iter().enumerate() {
        let fan_in = c_in * k * k * k;
        params.push((
            format!("conv{i}.weight"),
            Tensor::he_init(&[c_out, c_in, k, k, k], fan_in, rng).with_grad(),
        ));
        params.push((format!("conv{i}.bias"), Tensor::zeros(&[c_out]).with_grad()));
        c_in = c_out;
    }
    let mut width = config.flattened_width();
    for (i, &w) in config.dense_widths.iter().enumerate() {
        params.push((
            format!("fc{i}.weight"),
            Tensor::he_init(&[w, width], width, rng).with_grad(),
        ));
        params.push((format!("fc{i}.bias"), Tensor::zeros(&[w]).with_grad()));
        width = w;
    }
    Ok(Fpr3dModel {
        config: config.clone(),
        params,
    })
}

impl Fpr3dModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn feed(&self, graph: &mut DiffGraph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| graph.leaf(t)).collect()
    }

    /// Forward pass to the 2-way logits. `input` must be a crop-extent
    /// tensor `[1, cz, cy, cx]` already on the graph.
    fn forward(
        &self,
        graph: &mut DiffGraph,
        pvars: &[Var],
        input: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut x = input;
        let mut pi = 0;
        for i in 0..cfg.conv_channels.len() {
            let w = pvars[pi];
            let b = pvars[pi + 1];
            pi += 2;
            x = graph.conv3d(x, w, 1, (cfg.conv_kernel - 1) / 2)?;
            x = graph.bias_add(x, b)?;
            x = graph.relu(x)?;
            if cfg.pool_after.contains(&i) {
                x = graph.max_pool(x, &[2, 2, 2], &[2, 2, 2])?;
                x = graph.dropout(x, cfg.dropout_pool, rng)?;
            }
        }
        let flat = graph.value(x).len();
        x = graph.reshape(x, &[flat])?;
        for i in 0..cfg.dense_widths.len() {
            let w = pvars[pi];
            let b = pvars[pi + 1];
            pi += 2;
            x = graph.dense(x, w, b)?;
            if i + 1 < cfg.dense_widths.len() {
                x = graph.relu(x)?;
                x = graph.dropout(x, cfg.dropout_fc, rng)?;
            }
        }
        Ok(x)
    }
}

/// Softmax probability of the nodule class for one patch, scored at the
/// centered crop with no flips. Accepts either a crop-extent or a
/// patch-extent tensor.
pub fn fpr_score(model: &Fpr3dModel, patch: &Patch) -> Result<f64> {
    let cfg = &model.config;
    let crop = if patch.extent() == cfg.crop_extent {
        patch.clone()
    } else if patch.extent() == cfg.patch_extent {
        let (ox, oy, oz) = cfg.offsets_per_axis();
        crop_patch(patch, (ox / 2, oy / 2, oz / 2), cfg.crop_extent)
    } else {
        return Err(Error::Shape(format!(
            "patch extent {:?} matches neither crop {:?} nor patch {:?}",
            patch.extent(),
            cfg.crop_extent,
            cfg.patch_extent
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout is off in inference
    let mut graph = DiffGraph::inference();
    let pvars = model.feed(&mut graph);
    let input = graph.constant(crop.data);
    let logits = model.forward(&mut graph, &pvars, input, &mut rng)?;
    let l = graph.value(logits);
    Ok(softmax2(l.data()[0], l.data()[1]))
}

fn softmax2(l0: f64, l1: f64) -> f64 {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    e1 / (e0 + e1)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

/// Train on labeled full-size patches with stochastic crop/flip
/// augmentation, tracking validation accuracy on a held-out split; the
/// returned model carries the best-validation parameters.
pub fn train_fpr(
    model: Fpr3dModel,
    dataset: &[Patch],
    mut log: impl FnMut(&EpochStats),
) -> Result<(Fpr3dModel, Vec<EpochStats>)> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if dataset.iter().any(|p| p.label.is_none()) {
        return Err(Error::InvalidArgument(
            "training patches must be labeled".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let val_len = ((dataset.len() as f64 * cfg.val_fraction) as usize)
        .min(dataset.len() - 1)
        .max(1);
    let (val_idx, train_idx) = order.split_at(val_len);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut model = model;
    let mut opt = Sgd::new(&model.params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let (ox, oy, oz) = cfg.offsets_per_axis();
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &idx in &train_idx {
            let patch = &dataset[idx];
            let offset = (
                rng.gen_range(0..ox),
                rng.gen_range(0..oy),
                rng.gen_range(0..oz),
            );
            let mask = rng.gen_range(0..8u8);
            let crop = flip_patch(&crop_patch(patch, offset, cfg.crop_extent), mask);
            let label = usize::from(patch.label == Some(true));

            let mut graph = DiffGraph::training();
            let pvars = model.feed(&mut graph);
            let input = graph.constant(crop.data);
            let logits = model.forward(&mut graph, &pvars, input, &mut rng)?;
            let loss = graph.softmax_xent(logits, label)?;
            let loss_val = graph.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { step: opt.step });
            }
            loss_sum += loss_val;
            let mut grads = graph.backward(loss)?;
            let aligned: Vec<Option<Tensor>> =
                pvars.iter().map(|&v| grads.take(v)).collect();
            opt.apply(&mut model.params, &aligned);
        }

        let mut correct = 0usize;
        for &idx in &val_idx {
            let p = &dataset[idx];
            let score = fpr_score(&model, p)?;
            if (score > 0.5) == (p.label == Some(true)) {
                correct += 1;
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / train_idx.len().max(1) as f64,
            val_accuracy: correct as f64 / val_idx.len() as f64,
        };
        log(&stats);
        history.push(stats);
        if best.as_ref().map_or(true, |(acc, _)| stats.val_accuracy > *acc) {
            best = Some((stats.val_accuracy, model.params.clone()));
        }
        if let Some(target) = cfg.early_stop_val_acc {
            if stats.val_accuracy >= target {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Rescore candidates with the trained classifier; each output candidate
/// keeps its location and carries the stage-2 probability.
pub fn rescore_candidates(
    model: &Fpr3dModel,
    volumes: &[CtVolume],
    candidates: &[Candidate],
) -> Result<Vec<Candidate>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let vol = volumes
            .iter()
            .find(|v| v.series_uid() == c.series_uid)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no volume for candidate scan {}", c.series_uid))
            })?;
        let patch = extract_patch(
            vol,
            c.center,
            cfg.patch_extent,
            cfg.norm_mean_hu,
            cfg.norm_scale_hu,
        )?;
        let p = fpr_score(model, &patch)?;
        out.push(Candidate {
            series_uid: c.series_uid.clone(),
            center: c.center,
            probability: p,
            source: CandidateSource::Reducer,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_cfg() -> Fpr3dConfig {
        Fpr3dConfig {
            conv_channels: vec![2, 2, 3, 3, 4, 4],
            dense_widths: vec![16, 8, 2],
            patch_extent: (14, 14, 12),
            crop_extent: (10, 10, 8),
            dropout_fc: 0.1,
            dropout_pool: 0.05,
            epochs: 1,
            ..Fpr3dConfig::full()
        }
    }

    fn constant_patch(cfg: &Fpr3dConfig, value: f64) -> Patch {
        let (px, py, pz) = cfg.patch_extent;
        Patch {
            data: Tensor::full(&[1, pz, py, px], value),
            candidate: None,
            label: None,
            aug: AugTag::IDENTITY,
        }
    }

    #[test]
    fn normalization_formula_and_affinity() {
        assert_eq!(normalize_hu(-600.0, -600.0, 300.0), 0.0);
        assert_eq!(normalize_hu(-300.0, -600.0, 300.0), 1.0);
        assert_eq!(normalize_hu(-900.0, -600.0, 300.0), -1.0);
        for (a, b) in [(120.5, -44.0), (-1000.0, 400.0), (0.0, 1.0)] {
            let lhs = normalize_hu(a, -600.0, 300.0) - normalize_hu(b, -600.0, 300.0);
            assert!((lhs - (a - b) / 300.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_patch_has_no_padding_and_matches_indexing() {
        let n = 30;
        let data: Vec<f64> = (0..n * n * n).map(|i| i as f64).collect();
        let vol = CtVolume::new("v", (n, n, n), [1.0; 3], [0.0; 3], data).unwrap();
        let center = [15.0, 15.0, 15.0];
        let p = extract_patch(&vol, center, (8, 8, 6), -600.0, 300.0).unwrap();
        assert_eq!(p.data.shape(), &[1, 6, 8, 8]);
        for z in 0..6usize {
            for y in 0..8usize {
                for x in 0..8usize {
                    let want =
                        normalize_hu(vol.hu(x + 15 - 4, y + 15 - 4, z + 15 - 3), -600.0, 300.0);
                    assert_eq!(p.data.data()[(z * 8 + y) * 8 + x], want);
                }
            }
        }
    }

    #[test]
    fn corner_patch_pads_with_air() {
        let vol = CtVolume::new("v", (10, 10, 10), [1.0; 3], [0.0; 3], vec![0.0; 1000]).unwrap();
        let p = extract_patch(&vol, [0.0, 0.0, 0.0], (8, 8, 6), -600.0, 300.0).unwrap();
        let air = normalize_hu(AIR_HU, -600.0, 300.0);
        assert_eq!(p.data.data()[0], air);
        assert!((air - (-4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn patch_center_outside_volume_is_rejected() {
        let vol = CtVolume::new("v", (10, 10, 10), [1.0; 3], [0.0; 3], vec![0.0; 1000]).unwrap();
        assert!(extract_patch(&vol, [50.0, 0.0, 0.0], (4, 4, 4), -600.0, 300.0).is_err());
    }

    #[test]
    fn augmentation_enumeration_yields_1000_unique_tags() {
        let cfg = Fpr3dConfig::full();
        let patch = {
            let (px, py, pz) = cfg.patch_extent;
            let data: Vec<f64> = (0..px * py * pz).map(|i| i as f64).collect();
            Patch {
                data: Tensor::new(vec![1, pz, py, px], data).unwrap(),
                candidate: None,
                label: None,
                aug: AugTag::IDENTITY,
            }
        };
        let augs = enumerate_augmentations(&patch, &cfg).unwrap();
        assert_eq!(augs.len(), 1000);
        let tags: HashSet<AugTag> = augs.iter().map(|p| p.aug).collect();
        assert_eq!(tags.len(), 1000);
        let offsets: HashSet<_> = augs.iter().map(|p| p.aug.offset).collect();
        assert_eq!(offsets.len(), 125);
        let masks: HashSet<_> = augs.iter().map(|p| p.aug.flip_mask).collect();
        assert_eq!(masks.len(), 8);
    }

    #[test]
    fn centered_crop_with_no_flip_is_identity_window() {
        let cfg = Fpr3dConfig::full();
        let (px, py, _pz) = cfg.patch_extent;
        let patch = {
            let (px, py, pz) = cfg.patch_extent;
            let data: Vec<f64> = (0..px * py * pz).map(|i| i as f64 * 0.25).collect();
            Patch {
                data: Tensor::new(vec![1, pz, py, px], data).unwrap(),
                candidate: None,
                label: None,
                aug: AugTag::IDENTITY,
            }
        };
        let c = crop_patch(&patch, (2, 2, 2), cfg.crop_extent);
        let (cx, cy, cz) = cfg.crop_extent;
        for z in 0..cz {
            for y in 0..cy {
                for x in 0..cx {
                    let want = patch.data.data()[((z + 2) * py + (y + 2)) * px + x + 2];
                    assert_eq!(c.data.data()[(z * cy + y) * cx + x], want);
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions_and_commute() {
        let cfg = tiny_cfg();
        let (cx, cy, cz) = cfg.crop_extent;
        let data: Vec<f64> = (0..cx * cy * cz).map(|i| (i as f64).sin()).collect();
        let p = Patch {
            data: Tensor::new(vec![1, cz, cy, cx], data).unwrap(),
            candidate: None,
            label: None,
            aug: AugTag::IDENTITY,
        };
        for mask in 1..8u8 {
            let twice = flip_patch(&flip_patch(&p, mask), mask);
            assert_eq!(twice.data, p.data, "mask {mask}");
            assert_eq!(twice.aug, p.aug);
        }
        let ab = flip_patch(&flip_patch(&p, 0b011), 0b100);
        let ba = flip_patch(&flip_patch(&p, 0b100), 0b011);
        assert_eq!(ab.data, ba.data);
    }

    #[test]
    fn labeling_is_boundary_exclusive_and_order_invariant() {
        let annos = vec![
            Annotation {
                series_uid: "s".into(),
                center: [0.0; 3],
                diameter_mm: 10.0,
            },
            Annotation {
                series_uid: "s".into(),
                center: [100.0, 0.0, 0.0],
                diameter_mm: 6.0,
            },
        ];
        let at = |c: [f64; 3]| Candidate {
            series_uid: "s".into(),
            center: c,
            probability: 0.5,
            source: CandidateSource::Detector,
        };
        assert!(label_candidate(&at([0.0; 3]), &annos));
        assert!(!label_candidate(&at([5.0 + 1e-9, 0.0, 0.0]), &annos));
        let mut reversed = annos.clone();
        reversed.reverse();
        for c in [[0.0; 3], [100.0, 2.9, 0.0], [40.0, 0.0, 0.0]] {
            assert_eq!(
                label_candidate(&at(c), &annos),
                label_candidate(&at(c), &reversed)
            );
        }
    }

    #[test]
    fn duplication_arithmetic() {
        let cfg = tiny_cfg();
        let mut patches = vec![constant_patch(&cfg, 0.0); 11];
        patches[0].label = Some(true);
        for p in patches.iter_mut().skip(1) {
            p.label = Some(false);
        }
        assert_eq!(balance_duplicate(patches.clone(), 8).len(), 18);
        assert_eq!(balance_duplicate(patches.clone(), 1).len(), 11);
        for p in patches.iter_mut() {
            p.label = Some(false);
        }
        assert_eq!(balance_duplicate(patches, 8).len(), 11);
    }

    #[test]
    fn census_and_param_count_match_config() {
        let cfg = Fpr3dConfig::full();
        assert_eq!(cfg.layer_census(), (6, 3, 3, 2));
        assert_eq!(cfg.flattened_width(), 4096);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = build_fpr(&tiny_cfg(), &mut rng).unwrap();
        assert_eq!(model.param_count(), tiny_cfg().param_count());
        assert_eq!(model.params.len(), 2 * (6 + 3));
    }

    #[test]
    fn builds_are_seed_deterministic_and_scores_are_stable() {
        let cfg = tiny_cfg();
        let a = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.params, b.params);

        let p = constant_patch(&cfg, 0.3);
        let s1 = fpr_score(&a, &p).unwrap();
        let s2 = fpr_score(&a, &p).unwrap();
        assert_eq!(s1, s2);
        assert!((0.0..=1.0).contains(&s1));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = Fpr3dConfig {
            lr: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let model = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = model.params.clone();
        let mut dataset = vec![constant_patch(&cfg, 0.1); 6];
        for (i, p) in dataset.iter_mut().enumerate() {
            p.label = Some(i % 2 == 0);
        }
        let (trained, _) = train_fpr(model, &dataset, |_| {}).unwrap();
        assert_eq!(trained.params, before);
    }

    #[test]
    fn training_is_reproducible_under_fixed_seed() {
        let cfg = Fpr3dConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let mut dataset = vec![constant_patch(&cfg, 0.0); 8];
        for (i, p) in dataset.iter_mut().enumerate() {
            p.label = Some(i % 2 == 0);
            // give the classes a signal
            if i % 2 == 0 {
                for v in p.data.data_mut() {
                    *v += 1.0;
                }
            }
        }
        let run = || {
            let model = build_fpr(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let (m, h) = train_fpr(model, &dataset, |_| {}).unwrap();
            (m.params, h.iter().map(|e| e.mean_loss).collect::<Vec<_>>())
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }
}
