//! Joint training of the proposal and ROI heads: anchor assignment and
//! minibatch sampling, the four-term loss, backward, and SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{joint_loss_on_graph, RegTerms};
use super::{
    anchor_cls_indices, anchor_reg_indices, build_detector, propose_rois, read_rpn_maps,
    DetectorConfig, DetectorModel,
};
use crate::ct::{build_slice_triplet, Annotation, CtVolume, SliceImage};
use crate::geom::{assign_anchors, encode_box, generate_anchors, iou, AnchorLabel, BBox};
use crate::optim::Sgd;
use crate::tensor::ops::RoiRect;
use crate::tensor::{DiffGraph, Tensor};
use crate::{Error, Result};

/// Optimizer state carried across training steps.
pub struct TrainState {
    pub(crate) opt: Sgd,
}

impl TrainState {
    pub fn new(model: &DetectorModel) -> Self {
        let c = &model.config;
        TrainState {
            opt: Sgd::new(&model.params, c.lr, c.momentum, c.weight_decay),
        }
    }

    pub fn step(&self) -> usize {
        self.opt.step
    }
}

/// Ground-truth boxes of one training slice, in image pixels: the in-plane
/// disc of every nodule the slice cuts, skipped when the cut radius falls
/// below the configured minimum.
pub fn slice_gt_boxes(
    vol: &CtVolume,
    annotations: &[Annotation],
    z: usize,
    config: &DetectorConfig,
) -> Vec<BBox> {
    let (nx, ny, _) = vol.extents();
    let spacing = vol.spacing();
    let e = config.input_extent as f64;
    let mut out = Vec::new();
    for a in annotations {
        if a.series_uid != vol.series_uid() {
            continue;
        }
        let v = vol.world_to_voxel(a.center);
        let r_mm = a.diameter_mm / 2.0;
        let dz_mm = (z as f64 - v[2]) * spacing[2];
        if dz_mm.abs() >= r_mm {
            continue;
        }
        let r_slice = (r_mm * r_mm - dz_mm * dz_mm).sqrt();
        if r_slice < config.min_gt_radius_mm {
            continue;
        }
        let cx = (v[0] + 0.5) * e / nx as f64 - 0.5;
        let cy = (v[1] + 0.5) * e / ny as f64 - 0.5;
        let w = 2.0 * r_slice / spacing[0] * e / nx as f64;
        let h = 2.0 * r_slice / spacing[1] * e / ny as f64;
        out.push(BBox::new(cx, cy, w, h));
    }
    out
}

/// One slice of the training set: scan index, axial index, gt boxes.
#[derive(Debug, Clone)]
pub struct TrainSlice {
    pub scan: usize,
    pub z: usize,
    pub gts: Vec<BBox>,
}

/// Enumerate training slices: every nodule-bearing slice, plus a seeded
/// sample of gt-free slices sized by `negative_slice_fraction`.
pub fn detector_training_slices(
    scans: &[(CtVolume, Vec<Annotation>)],
    config: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainSlice> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, (vol, annos)) in scans.iter().enumerate() {
        let (_, _, nz) = vol.extents();
        for z in 0..nz {
            let gts = slice_gt_boxes(vol, annos, z, config);
            if gts.is_empty() {
                negatives.push(TrainSlice { scan: i, z, gts });
            } else {
                positives.push(TrainSlice { scan: i, z, gts });
            }
        }
    }
    negatives.shuffle(rng);
    let keep = ((positives.len() as f64 * config.negative_slice_fraction).ceil() as usize)
        .min(negatives.len());
    positives.extend(negatives.into_iter().take(keep));
    positives
}

/// One joint forward/backward/update on a single slice.
///
/// The RPN minibatch holds up to `rpn_batch` anchors at a 1:1
/// positive:negative target (padded with negatives when positives are
/// scarce); the ROI minibatch holds up to `roi_batch` proposals at 1:3.
/// Ground-truth boxes join the proposal pool during training so the ROI
/// head sees positives from the first step.
pub fn train_step(
    model: &mut DetectorModel,
    image: &SliceImage,
    gts: &[BBox],
    state: &mut TrainState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = model.config.clone();
    if image.data.shape() != [3, cfg.input_extent, cfg.input_extent] {
        return Err(Error::Shape(format!(
            "slice image shape {:?} does not match detector input {}",
            image.data.shape(),
            cfg.input_extent
        )));
    }
    for gt in gts {
        if gt.w <= 0.0 || gt.h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ground-truth box with non-positive extents {}x{}",
                gt.w, gt.h
            )));
        }
    }

    let mut graph = DiffGraph::training();
    let pvars = model.feed(&mut graph);
    let input = graph.constant(model.normalize_input(image));
    let feat = model.forward_features(&mut graph, &pvars, input)?;
    let (cls_map, reg_map) = model.forward_rpn(&mut graph, &pvars, feat)?;
    let fs = graph.value(feat).shape();
    let (fh, fw) = (fs[1], fs[2]);
    let anchors = generate_anchors((fh, fw), cfg.feature_stride(), &cfg.anchor_sizes)?;
    let extent = cfg.input_extent as f64;
    let labels = assign_anchors(
        &anchors,
        gts,
        cfg.pos_iou,
        cfg.neg_iou,
        Some((extent, extent)),
    )?;

    let mut pos: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(a, l)| match l {
            AnchorLabel::Positive(g) => Some((a, *g)),
            _ => None,
        })
        .collect();
    let mut neg: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(a, l)| matches!(l, AnchorLabel::Negative).then_some(a))
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cfg.rpn_batch / 2);
    // 1:1 positives:negatives, with a floor so gt-free slices still teach
    // background; the full-scale padded variant drowns the handful of
    // positives a desk-scale slice carries.
    neg.truncate(
        pos.len()
            .max(cfg.rpn_min_neg)
            .min(cfg.rpn_batch - pos.len()),
    );
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::InvalidArgument(
            "no usable anchors on this slice (all cross-boundary?)".into(),
        ));
    }

    let sizes = anchors.sizes().len();
    let mut cls_idx = Vec::with_capacity(2 * (pos.len() + neg.len()));
    let mut cls_labels = Vec::with_capacity(pos.len() + neg.len());
    for &(a, _) in &pos {
        cls_idx.extend(anchor_cls_indices(a, sizes, fh, fw));
        cls_labels.push(1);
    }
    for &a in &neg {
        cls_idx.extend(anchor_cls_indices(a, sizes, fh, fw));
        cls_labels.push(0);
    }
    let n_cls = cls_labels.len();
    let gathered = graph.gather(cls_map, cls_idx)?;
    let rpn_cls_rows = graph.reshape(gathered, &[n_cls, 2])?;

    let rpn_reg = if pos.is_empty() {
        None
    } else {
        let mut idx = Vec::with_capacity(4 * pos.len());
        let mut targets = Vec::with_capacity(4 * pos.len());
        for &(a, g) in &pos {
            idx.extend(anchor_reg_indices(a, sizes, fh, fw));
            targets.extend(encode_box(&anchors.boxes()[a], &gts[g])?.as_array());
        }
        let gathered = graph.gather(reg_map, idx)?;
        Some(RegTerms {
            pred: graph.reshape(gathered, &[pos.len(), 4])?,
            target: Tensor::new(vec![pos.len(), 4], targets)?,
        })
    };

    // Proposals come from the current head outputs; no gradient flows
    // through the box coordinates. They are clipped to the anchor coverage
    // area so their feature rects stay on the map.
    let (scores, deltas) = read_rpn_maps(graph.value(cls_map), graph.value(reg_map), &anchors);
    let coverage = (fw as f64 * cfg.feature_stride()).min(extent);
    let mut proposals = propose_rois(
        &scores,
        &deltas,
        &anchors,
        coverage,
        cfg.pre_nms_k,
        cfg.post_nms_k,
        cfg.proposal_nms_iou,
    )?;
    proposals.extend(gts.iter().copied());
    proposals.retain(|p| {
        let (x1, y1, x2, y2) = p.corners();
        x1 < coverage && y1 < coverage && x2 > 0.0 && y2 > 0.0
    });

    let mut roi_pos: Vec<(BBox, usize)> = Vec::new();
    let mut roi_neg: Vec<BBox> = Vec::new();
    for p in proposals {
        let mut best = (0usize, 0.0f64);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&p, gt);
            if v > best.1 {
                best = (g, v);
            }
        }
        if !gts.is_empty() && best.1 >= cfg.roi_pos_iou {
            roi_pos.push((p, best.0));
        } else {
            roi_neg.push(p);
        }
    }
    roi_pos.shuffle(rng);
    roi_neg.shuffle(rng);
    roi_pos.truncate(cfg.roi_batch / 4);
    // 1:3 positives:negatives with a background floor, capped by the batch.
    roi_neg.truncate(
        (3 * roi_pos.len())
            .max(cfg.roi_min_neg)
            .min(cfg.roi_batch - roi_pos.len()),
    );
    if roi_pos.is_empty() && roi_neg.is_empty() {
        // Degenerate slice: fall back to the whole image as background.
        roi_neg.push(BBox::new(
            extent / 2.0,
            extent / 2.0,
            extent,
            extent,
        ));
    }

    let stride = cfg.feature_stride();
    let to_rect = |b: &BBox| {
        let (x1, y1, x2, y2) = b.corners();
        RoiRect {
            x1: x1 / stride,
            y1: y1 / stride,
            x2: x2 / stride,
            y2: y2 / stride,
        }
    };
    let mut rects: Vec<RoiRect> = roi_pos.iter().map(|(b, _)| to_rect(b)).collect();
    rects.extend(roi_neg.iter().map(to_rect));
    let mut roi_labels = vec![1usize; roi_pos.len()];
    roi_labels.extend(vec![0usize; roi_neg.len()]);

    let (roi_cls_rows, roi_reg_rows) =
        model.forward_roi_head(&mut graph, &pvars, feat, &rects, rng)?;

    let roi_reg = if roi_pos.is_empty() {
        None
    } else {
        let mut idx = Vec::with_capacity(4 * roi_pos.len());
        let mut targets = Vec::with_capacity(4 * roi_pos.len());
        for (row, (p, g)) in roi_pos.iter().enumerate() {
            idx.extend([4 * row, 4 * row + 1, 4 * row + 2, 4 * row + 3]);
            targets.extend(encode_box(p, &gts[*g])?.as_array());
        }
        let gathered = graph.gather(roi_reg_rows, idx)?;
        Some(RegTerms {
            pred: graph.reshape(gathered, &[roi_pos.len(), 4])?,
            target: Tensor::new(vec![roi_pos.len(), 4], targets)?,
        })
    };

    let loss = joint_loss_on_graph(
        &mut graph,
        rpn_cls_rows,
        cls_labels,
        rpn_reg,
        roi_cls_rows,
        roi_labels,
        roi_reg,
    )?;
    let loss_val = graph.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.opt.step,
        });
    }
    let mut grads = graph.backward(loss)?;
    let mut aligned: Vec<Option<Tensor>> = pvars.iter().map(|&v| grads.take(v)).collect();
    if cfg.clip_grad_norm > 0.0 {
        let sq: f64 = aligned
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        let norm = sq.sqrt();
        if norm > cfg.clip_grad_norm {
            let scale = cfg.clip_grad_norm / norm;
            for g in aligned.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    let mut lr = if cfg.lr_decay_step > 0 {
        cfg.lr * cfg.lr_decay.powi((state.opt.step / cfg.lr_decay_step) as i32)
    } else {
        cfg.lr
    };
    if cfg.warmup_steps > 0 && state.opt.step < cfg.warmup_steps {
        lr *= 0.3 + 0.7 * state.opt.step as f64 / cfg.warmup_steps as f64;
    }
    state.opt.lr = lr;
    state.opt.apply(&mut model.params, &aligned);
    Ok(loss_val)
}

/// Build a detector and train it over the slice set of the given scans.
/// Returns the model plus the per-step loss history.
pub fn train_detector(
    scans: &[(CtVolume, Vec<Annotation>)],
    config: &DetectorConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<(DetectorModel, Vec<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = build_detector(config, &mut rng)?;
    let mut slices = detector_training_slices(scans, config, &mut rng);
    if slices.is_empty() {
        return Err(Error::InvalidArgument(
            "no training slices (no annotations intersect any slice)".into(),
        ));
    }
    let mut state = TrainState::new(&model);
    let mut losses = Vec::new();
    for _epoch in 0..config.epochs {
        slices.shuffle(&mut rng);
        for s in &slices {
            let image = build_slice_triplet(&scans[s.scan].0, s.z, config.input_extent)?;
            let loss = train_step(&mut model, &image, &s.gts, &mut state, &mut rng)?;
            log(state.opt.step, loss);
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::tensor::Tensor;

    fn synthetic_image(extent: usize, blob: Option<(f64, f64, f64)>) -> SliceImage {
        let mut data = Tensor::full(&[3, extent, extent], -800.0);
        if let Some((cx, cy, r)) = blob {
            for ch in 0..3 {
                for y in 0..extent {
                    for x in 0..extent {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d < r {
                            data.data_mut()[(ch * extent + y) * extent + x] = -200.0;
                        }
                    }
                }
            }
        }
        SliceImage {
            series_uid: "syn".into(),
            z_index: 1,
            data,
            source_extents: (extent, extent),
            target_extent: extent,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = DetectorConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = model.params.clone();
        let mut state = TrainState::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = synthetic_image(48, Some((24.0, 24.0, 5.0)));
        let gts = vec![BBox::new(24.0, 24.0, 10.0, 10.0)];
        train_step(&mut model, &image, &gts, &mut state, &mut rng).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn fixed_seed_reproduces_loss_trajectory() {
        let cfg = tiny_config();
        let run = || {
            let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut state = TrainState::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let image = synthetic_image(48, Some((20.0, 28.0, 5.0)));
            let gts = vec![BBox::new(20.0, 28.0, 10.0, 10.0)];
            (0..5)
                .map(|_| train_step(&mut model, &image, &gts, &mut state, &mut rng).unwrap())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_repeated_steps_over_seeds() {
        let cfg = tiny_config();
        let mut improved = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut state = TrainState::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let image = synthetic_image(48, Some((24.0, 24.0, 5.0)));
            let gts = vec![BBox::new(24.0, 24.0, 10.0, 10.0)];
            let losses: Vec<f64> = (0..50)
                .map(|_| train_step(&mut model, &image, &gts, &mut state, &mut rng).unwrap())
                .collect();
            let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
            if tail < head {
                improved += 1;
            }
        }
        assert!(
            improved as f64 >= 0.95 * seeds as f64,
            "loss decreased on only {improved}/{seeds} seeds"
        );
    }

    #[test]
    fn slice_gt_boxes_follow_sphere_cuts() {
        let cfg = DetectorConfig {
            input_extent: 40,
            min_gt_radius_mm: 1.0,
            ..tiny_config()
        };
        let vol = CtVolume::new(
            "s",
            (40, 40, 10),
            [1.0, 1.0, 2.0],
            [0.0; 3],
            vec![-800.0; 16000],
        )
        .unwrap();
        let annos = vec![Annotation {
            series_uid: "s".into(),
            center: [20.0, 20.0, 10.0], // voxel z = 5
            diameter_mm: 8.0,
        }];
        // Center slice: full 8 mm disc.
        let boxes = slice_gt_boxes(&vol, &annos, 5, &cfg);
        assert_eq!(boxes.len(), 1);
        assert!((boxes[0].w - 8.0).abs() < 1e-9);
        // One slice up (2 mm): radius sqrt(16-4).
        let boxes = slice_gt_boxes(&vol, &annos, 6, &cfg);
        assert!((boxes[0].w - 2.0 * 12.0f64.sqrt()).abs() < 1e-9);
        // Two slices away (4 mm = radius): no cut.
        assert!(slice_gt_boxes(&vol, &annos, 7, &cfg).is_empty());
    }
}
