//! The candidate detector: a shared convolutional backbone with an added
//! transposed-convolution layer that restores feature stride 16 to 4, a
//! region-proposal head with six square anchors per feature cell, and an
//! ROI-pooling classifier head that scores and refines each proposal.
//! Per-slice detections are fused into 3D world-space candidates.

mod loss;
mod train;

pub use loss::{joint_loss, joint_loss_on_graph, LossBatch, RegTerms};
pub use train::{detector_training_slices, train_detector, train_step, TrainState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ct::{build_slice_triplet, Candidate, CandidateSource, CtVolume, SliceImage};
use crate::geom::{decode_box, generate_anchors, nms, AnchorSet, BBox, BoxDelta};
use crate::tensor::ops::RoiRect;
use crate::tensor::{DiffGraph, Tensor, Var};
use crate::{Error, Result};

/// Transposed-convolution layer geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Square slice input extent in pixels.
    pub input_extent: usize,
    /// Output channels per backbone conv group.
    pub backbone_widths: Vec<usize>,
    /// 3x3 convs per group.
    pub backbone_convs: Vec<usize>,
    /// Whether a 2x2 stride-2 max pool follows each group.
    pub backbone_pools: Vec<bool>,
    pub deconv: DeconvSpec,
    /// Ablation switch: without the deconv layer the feature stride stays 16.
    pub use_deconv: bool,
    /// Square anchor side lengths in input pixels.
    pub anchor_sizes: Vec<f64>,
    /// Width of the sliding-window feature of the proposal head.
    pub rpn_hidden: usize,
    pub roi_grid: (usize, usize),
    /// Widths of the two ROI-head dense layers.
    pub roi_dense: (usize, usize),
    pub pre_nms_k: usize,
    pub post_nms_k: usize,
    pub proposal_nms_iou: f64,
    pub final_nms_iou: f64,
    pub max_final_per_slice: usize,
    /// Anchor assignment thresholds.
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Proposal is a foreground ROI sample at or above this IoU.
    pub roi_pos_iou: f64,
    /// Anchors per RPN minibatch, sampled at 1:1 positives:negatives.
    pub rpn_batch: usize,
    /// Negatives sampled even when positives are scarce or absent.
    pub rpn_min_neg: usize,
    /// ROIs per minibatch, sampled at 1:3 positives:negatives.
    pub roi_batch: usize,
    /// ROI negatives sampled even when positives are scarce or absent.
    pub roi_min_neg: usize,
    pub norm_mean_hu: f64,
    pub norm_scale_hu: f64,
    pub roi_dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps between learning-rate decays; 0 disables the schedule.
    pub lr_decay_step: usize,
    pub lr_decay: f64,
    /// Linear learning-rate ramp over the first training steps; 0 disables.
    pub warmup_steps: usize,
    /// Global L2 gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    pub epochs: usize,
    /// Extra gt-free slices mixed into training, as a fraction of the
    /// nodule-bearing slice count.
    pub negative_slice_fraction: f64,
    /// Minimum in-plane nodule radius (mm) for a slice to carry a gt box.
    pub min_gt_radius_mm: f64,
    pub score_floor: f64,
    /// Cross-slice candidate merge: in-plane voxel radius and slice window.
    pub merge_xy_voxels: f64,
    pub merge_z_slices: usize,
    pub seed: u64,
}

impl DetectorConfig {
    /// Paper-scale preset (600 px inputs, VGG-16-shaped backbone).
    pub fn full() -> Self {
        DetectorConfig {
            input_extent: 600,
            backbone_widths: vec![64, 128, 256, 512, 512],
            backbone_convs: vec![2, 2, 3, 3, 3],
            backbone_pools: vec![true, true, true, true, false],
            deconv: DeconvSpec {
                kernel: 4,
                stride: 4,
                pad: 2,
                channels: 512,
            },
            use_deconv: true,
            anchor_sizes: vec![4.0, 6.0, 10.0, 16.0, 22.0, 32.0],
            rpn_hidden: 512,
            roi_grid: (7, 7),
            roi_dense: (4096, 4096),
            pre_nms_k: 2000,
            post_nms_k: 300,
            proposal_nms_iou: 0.7,
            final_nms_iou: 0.3,
            max_final_per_slice: 16,
            pos_iou: 0.7,
            neg_iou: 0.3,
            roi_pos_iou: 0.5,
            rpn_batch: 256,
            rpn_min_neg: 16,
            roi_batch: 128,
            roi_min_neg: 24,
            norm_mean_hu: -600.0,
            norm_scale_hu: 300.0,
            roi_dropout: 0.5,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_step: 0,
            lr_decay: 0.1,
            warmup_steps: 100,
            clip_grad_norm: 10.0,
            epochs: 4,
            negative_slice_fraction: 0.25,
            min_gt_radius_mm: 2.0,
            score_floor: 0.05,
            merge_xy_voxels: 3.0,
            merge_z_slices: 2,
            seed: 0,
        }
    }

    /// CPU-minutes preset: 96 px inputs and thin widths, same stride
    /// geometry and anchor shapes.
    pub fn desk() -> Self {
        DetectorConfig {
            input_extent: 96,
            backbone_widths: vec![8, 16, 32, 64],
            backbone_convs: vec![1, 1, 1, 1],
            backbone_pools: vec![true, true, true, true],
            deconv: DeconvSpec {
                kernel: 4,
                stride: 4,
                pad: 2,
                channels: 64,
            },
            rpn_hidden: 64,
            roi_dense: (256, 256),
            pre_nms_k: 512,
            post_nms_k: 32,
            roi_batch: 64,
            lr: 3e-3,
            epochs: 2,
            ..DetectorConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.backbone_widths.len();
        if n == 0 || self.backbone_convs.len() != n || self.backbone_pools.len() != n {
            return Err(Error::InvalidArgument(format!(
                "backbone widths/convs/pools must be non-empty and equal length, got {n}/{}/{}",
                self.backbone_convs.len(),
                self.backbone_pools.len()
            )));
        }
        if self.backbone_widths.iter().any(|&w| w == 0)
            || self.backbone_convs.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument("zero backbone width or depth".into()));
        }
        if self.anchor_sizes.is_empty() {
            return Err(Error::InvalidArgument("empty anchor size list".into()));
        }
        if self.deconv.pad >= self.deconv.kernel {
            return Err(Error::InvalidArgument(
                "deconv padding must be below its kernel extent".into(),
            ));
        }
        let (fe, _) = self.feature_geometry(self.input_extent)?;
        if fe == 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {} collapses to an empty feature map",
                self.input_extent
            )));
        }
        Ok(())
    }

    /// Product of the backbone pooling strides.
    pub fn backbone_stride(&self) -> usize {
        1 << self.backbone_pools.iter().filter(|&&p| p).count()
    }

    /// Pixels per feature cell after the (optional) deconv layer.
    pub fn feature_stride(&self) -> f64 {
        let s = self.backbone_stride() as f64;
        if self.use_deconv {
            s / self.deconv.stride as f64
        } else {
            s
        }
    }

    /// Feature-map extent and stride for a square input, composed from the
    /// per-layer shape formulas.
    pub fn feature_geometry(&self, input: usize) -> Result<(usize, f64)> {
        let mut e = input;
        for &pool in &self.backbone_pools {
            // 3x3 pad-1 convs preserve extents.
            if pool {
                if e < 2 {
                    return Err(Error::Shape(format!(
                        "extent {e} too small to pool"
                    )));
                }
                e = (e - 2) / 2 + 1;
            }
        }
        if self.use_deconv {
            e = crate::tensor::ops::deconv_out_extent(
                e,
                self.deconv.kernel,
                self.deconv.stride,
                self.deconv.pad,
            )?;
        }
        Ok((e, self.feature_stride()))
    }

    pub fn rpn_cls_channels(&self) -> usize {
        2 * self.anchor_sizes.len()
    }

    pub fn rpn_reg_channels(&self) -> usize {
        4 * self.anchor_sizes.len()
    }

    /// Channels of the map the ROI head pools from.
    pub fn roi_feat_channels(&self) -> usize {
        if self.use_deconv {
            self.deconv.channels
        } else {
            *self.backbone_widths.last().unwrap()
        }
    }

    /// Closed-form parameter count of a built model.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        let mut c_in = 3usize;
        for (g, &width) in self.backbone_widths.iter().enumerate() {
            for _ in 0..self.backbone_convs[g] {
                total += width * c_in * 9 + width;
                c_in = width;
            }
        }
        if self.use_deconv {
            total += c_in * self.deconv.channels * self.deconv.kernel * self.deconv.kernel
                + self.deconv.channels;
        }
        let fc = self.roi_feat_channels();
        total += self.rpn_hidden * fc * 9 + self.rpn_hidden;
        total += self.rpn_cls_channels() * self.rpn_hidden + self.rpn_cls_channels();
        total += self.rpn_reg_channels() * self.rpn_hidden + self.rpn_reg_channels();
        let pooled = fc * self.roi_grid.0 * self.roi_grid.1;
        let (d1, d2) = self.roi_dense;
        total += d1 * pooled + d1;
        total += d2 * d1 + d2;
        total += 2 * d2 + 2;
        total += 4 * d2 + 4;
        total
    }
}

/// Initialization scale of the four prediction heads.
const HEAD_INIT_STD: f64 = 0.01;

/// Detector parameters plus their configuration.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: Vec<(String, Tensor)>,
}

/// Build and He-initialize a detector.
pub fn build_detector(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<DetectorModel> {
    config.validate()?;
    let mut params = Vec::new();
    let mut push = |name: String, t: Tensor| params.push((name, t.with_grad()));
    let mut c_in = 3usize;
    for (g, &width) in config.backbone_widths.iter().enumerate() {
        for c in 0..config.backbone_convs[g] {
            push(
                format!("backbone.g{g}.c{c}.weight"),
                Tensor::he_init(&[width, c_in, 3, 3], c_in * 9, rng),
            );
            push(format!("backbone.g{g}.c{c}.bias"), Tensor::zeros(&[width]));
            c_in = width;
        }
    }
    if config.use_deconv {
        let d = config.deconv;
        push(
            "deconv.weight".into(),
            Tensor::he_init(
                &[c_in, d.channels, d.kernel, d.kernel],
                c_in * d.kernel * d.kernel,
                rng,
            ),
        );
        push("deconv.bias".into(), Tensor::zeros(&[d.channels]));
    }
    let fc = config.roi_feat_channels();
    push(
        "rpn.conv.weight".into(),
        Tensor::he_init(&[config.rpn_hidden, fc, 3, 3], fc * 9, rng),
    );
    push("rpn.conv.bias".into(), Tensor::zeros(&[config.rpn_hidden]));
    // Prediction heads start near zero so early steps stay calm; the
    // extractor layers keep He initialization.
    push(
        "rpn.cls.weight".into(),
        Tensor::gaussian(
            &[config.rpn_cls_channels(), config.rpn_hidden, 1, 1],
            HEAD_INIT_STD,
            rng,
        ),
    );
    push(
        "rpn.cls.bias".into(),
        Tensor::zeros(&[config.rpn_cls_channels()]),
    );
    push(
        "rpn.reg.weight".into(),
        Tensor::gaussian(
            &[config.rpn_reg_channels(), config.rpn_hidden, 1, 1],
            HEAD_INIT_STD,
            rng,
        ),
    );
    push(
        "rpn.reg.bias".into(),
        Tensor::zeros(&[config.rpn_reg_channels()]),
    );
    let pooled = fc * config.roi_grid.0 * config.roi_grid.1;
    let (d1, d2) = config.roi_dense;
    push(
        "roi.fc1.weight".into(),
        Tensor::he_init(&[d1, pooled], pooled, rng),
    );
    push("roi.fc1.bias".into(), Tensor::zeros(&[d1]));
    push("roi.fc2.weight".into(), Tensor::he_init(&[d2, d1], d1, rng));
    push("roi.fc2.bias".into(), Tensor::zeros(&[d2]));
    push(
        "roi.cls.weight".into(),
        Tensor::gaussian(&[2, d2], HEAD_INIT_STD, rng),
    );
    push("roi.cls.bias".into(), Tensor::zeros(&[2]));
    push(
        "roi.reg.weight".into(),
        Tensor::gaussian(&[4, d2], HEAD_INIT_STD, rng),
    );
    push("roi.reg.bias".into(), Tensor::zeros(&[4]));
    Ok(DetectorModel {
        config: config.clone(),
        params,
    })
}

impl DetectorModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn feed(&self, graph: &mut DiffGraph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| graph.leaf(t)).collect()
    }

    fn pair(&self, pvars: &[Var], name: &str) -> (Var, Var) {
        let wi = self
            .params
            .iter()
            .position(|(n, _)| n == &format!("{name}.weight"))
            .unwrap_or_else(|| panic!("missing param {name}.weight"));
        (pvars[wi], pvars[wi + 1])
    }

    /// Normalize a raw-HU slice image into detector input space.
    pub fn normalize_input(&self, image: &SliceImage) -> Tensor {
        let c = &self.config;
        let mut t = image.data.clone();
        for v in t.data_mut() {
            *v = (*v - c.norm_mean_hu) / c.norm_scale_hu;
        }
        t
    }

    /// Shared feature extractor: backbone groups, then the deconv layer.
    pub fn forward_features(
        &self,
        graph: &mut DiffGraph,
        pvars: &[Var],
        input: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut x = input;
        for (g, &pool) in cfg.backbone_pools.iter().enumerate() {
            for c in 0..cfg.backbone_convs[g] {
                let (w, b) = self.pair(pvars, &format!("backbone.g{g}.c{c}"));
                x = graph.conv2d(x, w, 1, 1)?;
                x = graph.bias_add(x, b)?;
                x = graph.relu(x)?;
            }
            if pool {
                x = graph.max_pool(x, &[2, 2], &[2, 2])?;
            }
        }
        if cfg.use_deconv {
            let (w, b) = self.pair(pvars, "deconv");
            x = graph.transposed_conv2d(x, w, cfg.deconv.stride, cfg.deconv.pad)?;
            x = graph.bias_add(x, b)?;
            x = graph.relu(x)?;
        }
        Ok(x)
    }

    /// Proposal-head maps: objectness logits `[2S, H, W]` and box deltas
    /// `[4S, H, W]`.
    pub fn forward_rpn(
        &self,
        graph: &mut DiffGraph,
        pvars: &[Var],
        feat: Var,
    ) -> Result<(Var, Var)> {
        let (w, b) = self.pair(pvars, "rpn.conv");
        let mut h = graph.conv2d(feat, w, 1, 1)?;
        h = graph.bias_add(h, b)?;
        h = graph.relu(h)?;
        let (wc, bc) = self.pair(pvars, "rpn.cls");
        let mut cls = graph.conv2d(h, wc, 1, 0)?;
        cls = graph.bias_add(cls, bc)?;
        let (wr, br) = self.pair(pvars, "rpn.reg");
        let mut reg = graph.conv2d(h, wr, 1, 0)?;
        reg = graph.bias_add(reg, br)?;
        Ok((cls, reg))
    }

    /// ROI classifier head over a batch of feature-space ROIs. Returns
    /// `([R,2]` class logits, `[R,4]` box deltas).
    pub fn forward_roi_head(
        &self,
        graph: &mut DiffGraph,
        pvars: &[Var],
        feat: Var,
        rois: &[RoiRect],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let mut pooled = Vec::with_capacity(rois.len());
        for &roi in rois {
            let p = graph.roi_pool(feat, roi, cfg.roi_grid)?;
            pooled.push(p);
        }
        let mut x = graph.stack_rows(&pooled)?;
        let (w1, b1) = self.pair(pvars, "roi.fc1");
        x = graph.dense_batch(x, w1, b1)?;
        x = graph.relu(x)?;
        x = graph.dropout(x, cfg.roi_dropout, rng)?;
        let (w2, b2) = self.pair(pvars, "roi.fc2");
        x = graph.dense_batch(x, w2, b2)?;
        x = graph.relu(x)?;
        x = graph.dropout(x, cfg.roi_dropout, rng)?;
        let (wc, bc) = self.pair(pvars, "roi.cls");
        let cls = graph.dense_batch(x, wc, bc)?;
        let (wr, br) = self.pair(pvars, "roi.reg");
        let reg = graph.dense_batch(x, wr, br)?;
        Ok((cls, reg))
    }
}

/// Flat data indices of the two objectness logits of anchor `a` in a
/// `[2S, H, W]` map.
pub(crate) fn anchor_cls_indices(a: usize, sizes: usize, h: usize, w: usize) -> [usize; 2] {
    let s = a % sizes;
    let cell = a / sizes;
    let (r, c) = (cell / w, cell % w);
    let plane = h * w;
    let pos = r * w + c;
    [(2 * s) * plane + pos, (2 * s + 1) * plane + pos]
}

/// Flat data indices of the four delta channels of anchor `a` in `[4S, H, W]`.
pub(crate) fn anchor_reg_indices(a: usize, sizes: usize, h: usize, w: usize) -> [usize; 4] {
    let s = a % sizes;
    let cell = a / sizes;
    let (r, c) = (cell / w, cell % w);
    let plane = h * w;
    let pos = r * w + c;
    [
        (4 * s) * plane + pos,
        (4 * s + 1) * plane + pos,
        (4 * s + 2) * plane + pos,
        (4 * s + 3) * plane + pos,
    ]
}

fn softmax2(l0: f64, l1: f64) -> f64 {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    e1 / (e0 + e1)
}

/// Per-anchor objectness probabilities and box deltas extracted from the
/// head maps.
pub(crate) fn read_rpn_maps(
    cls: &Tensor,
    reg: &Tensor,
    anchors: &AnchorSet,
) -> (Vec<f64>, Vec<BoxDelta>) {
    let (h, w) = anchors.feature_extents();
    let sizes = anchors.sizes().len();
    let mut scores = Vec::with_capacity(anchors.len());
    let mut deltas = Vec::with_capacity(anchors.len());
    for a in 0..anchors.len() {
        let [i0, i1] = anchor_cls_indices(a, sizes, h, w);
        scores.push(softmax2(cls.data()[i0], cls.data()[i1]));
        let [j0, j1, j2, j3] = anchor_reg_indices(a, sizes, h, w);
        deltas.push(BoxDelta {
            tx: reg.data()[j0],
            ty: reg.data()[j1],
            tw: reg.data()[j2],
            th: reg.data()[j3],
        });
    }
    (scores, deltas)
}

/// Proposal-stage output for one slice.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    pub anchors: AnchorSet,
}

/// Run the shared trunk and proposal head on one slice (inference mode) and
/// read out one score and one delta per anchor.
pub fn rpn_forward(model: &DetectorModel, image: &SliceImage) -> Result<RpnOutput> {
    let cfg = &model.config;
    if image.data.shape() != [3, cfg.input_extent, cfg.input_extent] {
        return Err(Error::Shape(format!(
            "slice image shape {:?} does not match detector input {}",
            image.data.shape(),
            cfg.input_extent
        )));
    }
    let mut graph = DiffGraph::inference();
    let pvars = model.feed(&mut graph);
    let input = graph.constant(model.normalize_input(image));
    let feat = model.forward_features(&mut graph, &pvars, input)?;
    let (cls, reg) = model.forward_rpn(&mut graph, &pvars, feat)?;
    let fs = graph.value(feat).shape();
    let anchors = generate_anchors(
        (fs[1], fs[2]),
        cfg.feature_stride(),
        &cfg.anchor_sizes,
    )?;
    let (objectness, deltas) = read_rpn_maps(graph.value(cls), graph.value(reg), &anchors);
    Ok(RpnOutput {
        objectness,
        deltas,
        anchors,
    })
}

/// Decode per-anchor deltas, clip to the image, drop degenerate boxes, keep
/// the top `pre_nms_k` by score, suppress, and keep the top `post_nms_k`.
pub fn propose_rois(
    objectness: &[f64],
    deltas: &[BoxDelta],
    anchors: &AnchorSet,
    image_extent: f64,
    pre_nms_k: usize,
    post_nms_k: usize,
    nms_iou: f64,
) -> Result<Vec<BBox>> {
    if objectness.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor count {} does not match {} scores / {} deltas",
            anchors.len(),
            objectness.len(),
            deltas.len()
        )));
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.boxes().iter().enumerate() {
        let b = decode_box(anchor, &deltas[i]).clipped(image_extent, image_extent);
        if b.w > 1e-3 && b.h > 1e-3 {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(pre_nms_k);
    let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let kept = nms(&top_boxes, &top_scores, nms_iou)?;
    Ok(kept
        .into_iter()
        .take(post_nms_k)
        .map(|i| top_boxes[i])
        .collect())
}

/// One final detection on a slice, already refined and in image pixels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SliceDetection {
    pub z: usize,
    pub voxel_x: f64,
    pub voxel_y: f64,
    pub score: f64,
}

/// Full two-head inference on one slice: proposals, ROI scoring, refinement,
/// final NMS, score floor, and per-slice cap.
pub(crate) fn detect_on_slice(
    model: &DetectorModel,
    image: &SliceImage,
    score_floor: f64,
) -> Result<Vec<SliceDetection>> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // inference: dropout off
    let mut graph = DiffGraph::inference();
    let pvars = model.feed(&mut graph);
    let input = graph.constant(model.normalize_input(image));
    let feat = model.forward_features(&mut graph, &pvars, input)?;
    let (cls, reg) = model.forward_rpn(&mut graph, &pvars, feat)?;
    let fs = graph.value(feat).shape();
    let anchors = generate_anchors((fs[1], fs[2]), cfg.feature_stride(), &cfg.anchor_sizes)?;
    let (scores, deltas) = read_rpn_maps(graph.value(cls), graph.value(reg), &anchors);
    // Proposals are clipped to the anchor coverage area so their feature
    // rects stay on the map (the feature extent times the stride can fall
    // short of the image when pooling floors).
    let coverage = (fs[2] as f64 * cfg.feature_stride()).min(cfg.input_extent as f64);
    let proposals = propose_rois(
        &scores,
        &deltas,
        &anchors,
        coverage,
        cfg.pre_nms_k,
        cfg.post_nms_k,
        cfg.proposal_nms_iou,
    )?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let stride = cfg.feature_stride();
    let rois: Vec<RoiRect> = proposals
        .iter()
        .map(|b| {
            let (x1, y1, x2, y2) = b.corners();
            RoiRect {
                x1: x1 / stride,
                y1: y1 / stride,
                x2: x2 / stride,
                y2: y2 / stride,
            }
        })
        .collect();
    let (roi_cls, roi_reg) = model.forward_roi_head(&mut graph, &pvars, feat, &rois, &mut rng)?;
    let cls_v = graph.value(roi_cls);
    let reg_v = graph.value(roi_reg);
    let mut final_boxes = Vec::with_capacity(proposals.len());
    let mut final_scores = Vec::with_capacity(proposals.len());
    for (i, prop) in proposals.iter().enumerate() {
        let p = softmax2(cls_v.data()[2 * i], cls_v.data()[2 * i + 1]);
        let d = BoxDelta {
            tx: reg_v.data()[4 * i],
            ty: reg_v.data()[4 * i + 1],
            tw: reg_v.data()[4 * i + 2],
            th: reg_v.data()[4 * i + 3],
        };
        let refined =
            decode_box(prop, &d).clipped(cfg.input_extent as f64, cfg.input_extent as f64);
        if refined.w > 1e-3 && refined.h > 1e-3 {
            final_boxes.push(refined);
            final_scores.push(p);
        }
    }
    let kept = nms(&final_boxes, &final_scores, cfg.final_nms_iou)?;
    let mut out = Vec::new();
    for &i in kept.iter().take(cfg.max_final_per_slice) {
        if final_scores[i] < score_floor {
            continue;
        }
        let (vx, vy) = image.image_to_voxel((final_boxes[i].cx, final_boxes[i].cy));
        out.push(SliceDetection {
            z: image.z_index,
            voxel_x: vx,
            voxel_y: vy,
            score: final_scores[i],
        });
    }
    Ok(out)
}

/// Greedy cross-slice fusion: keep detections in descending score order,
/// suppressing any within `merge_xy_voxels` in-plane and `merge_z_slices`
/// axially of an already-kept one.
pub(crate) fn merge_slice_detections(
    detections: Vec<SliceDetection>,
    merge_xy_voxels: f64,
    merge_z_slices: usize,
) -> Vec<SliceDetection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &detections[a];
        let db = &detections[b];
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(da.z.cmp(&db.z))
            .then(da.voxel_x.partial_cmp(&db.voxel_x).unwrap_or(std::cmp::Ordering::Equal))
            .then(da.voxel_y.partial_cmp(&db.voxel_y).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut kept: Vec<SliceDetection> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let duplicate = kept.iter().any(|k| {
            let dz = (k.z as isize - d.z as isize).unsigned_abs();
            let dxy = ((k.voxel_x - d.voxel_x).powi(2) + (k.voxel_y - d.voxel_y).powi(2)).sqrt();
            dz <= merge_z_slices && dxy < merge_xy_voxels
        });
        if !duplicate {
            kept.push(*d);
        }
    }
    kept
}

/// Slice-wise detection over a whole volume: build each slice triplet, run
/// both heads, fuse detections across slices, and map the survivors to
/// world-space candidates with the ROI-classifier confidence.
pub fn detect_candidates(
    model: &DetectorModel,
    vol: &CtVolume,
    score_floor: f64,
) -> Result<Vec<Candidate>> {
    let cfg = &model.config;
    let (_, _, nz) = vol.extents();
    if nz < 3 {
        return Err(Error::InvalidArgument(format!(
            "volume {} has {nz} slices; detection needs at least 3",
            vol.series_uid()
        )));
    }
    let per_slice: Vec<Result<Vec<SliceDetection>>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let image = build_slice_triplet(vol, z, cfg.input_extent)?;
            detect_on_slice(model, &image, score_floor)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_slice {
        all.extend(r?);
    }
    let merged = merge_slice_detections(all, cfg.merge_xy_voxels, cfg.merge_z_slices);
    let mut out: Vec<Candidate> = merged
        .into_iter()
        .map(|d| {
            let world = vol.voxel_to_world([d.voxel_x, d.voxel_y, d.z as f64]);
            Candidate {
                series_uid: vol.series_uid().to_string(),
                center: world,
                probability: d.score,
                source: CandidateSource::Detector,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.center[2].partial_cmp(&b.center[2]).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.center[0].partial_cmp(&b.center[0]).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.center[1].partial_cmp(&b.center[1]).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            input_extent: 48,
            backbone_widths: vec![2, 3, 4, 4],
            backbone_convs: vec![1, 1, 1, 1],
            backbone_pools: vec![true, true, true, true],
            deconv: DeconvSpec {
                kernel: 4,
                stride: 4,
                pad: 2,
                channels: 6,
            },
            rpn_hidden: 8,
            roi_dense: (24, 16),
            pre_nms_k: 128,
            post_nms_k: 12,
            roi_batch: 16,
            max_final_per_slice: 8,
            ..DetectorConfig::full()
        }
    }

    #[test]
    fn full_preset_head_channels_match_six_anchors() {
        let cfg = DetectorConfig::full();
        assert_eq!(cfg.anchor_sizes, vec![4.0, 6.0, 10.0, 16.0, 22.0, 32.0]);
        assert_eq!(cfg.rpn_cls_channels(), 12);
        assert_eq!(cfg.rpn_reg_channels(), 24);
        assert_eq!(
            cfg.deconv,
            DeconvSpec {
                kernel: 4,
                stride: 4,
                pad: 2,
                channels: 512
            }
        );
    }

    #[test]
    fn feature_stride_is_4_with_deconv_16_without() {
        let mut cfg = DetectorConfig::desk();
        assert_eq!(cfg.backbone_stride(), 16);
        assert_eq!(cfg.feature_stride(), 4.0);
        let (e, s) = cfg.feature_geometry(96).unwrap();
        assert_eq!((e, s), (20, 4.0));

        cfg.use_deconv = false;
        assert_eq!(cfg.feature_stride(), 16.0);
        let (e, s) = cfg.feature_geometry(96).unwrap();
        assert_eq!((e, s), (6, 16.0));

        // Paper-scale arithmetic: 600 -> 37 at stride 16 -> 144 after deconv.
        let full = DetectorConfig::full();
        assert_eq!(full.feature_geometry(600).unwrap(), (144, 4.0));
    }

    #[test]
    fn built_model_matches_closed_form_param_count() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = build_detector(&cfg, &mut rng).unwrap();
        assert_eq!(model.param_count(), cfg.param_count());
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let cfg = tiny_config();
        let a = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn build_rejects_inconsistent_widths() {
        let mut cfg = tiny_config();
        cfg.backbone_convs = vec![1, 1];
        assert!(build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn flat_image(extent: usize) -> SliceImage {
        SliceImage {
            series_uid: "t".into(),
            z_index: 1,
            data: Tensor::full(&[3, extent, extent], -800.0),
            source_extents: (extent, extent),
            target_extent: extent,
        }
    }

    #[test]
    fn rpn_forward_emits_one_score_and_delta_per_anchor() {
        let cfg = tiny_config();
        let model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = rpn_forward(&model, &flat_image(48)).unwrap();
        let (fe, _) = cfg.feature_geometry(48).unwrap();
        assert_eq!(out.anchors.len(), fe * fe * 6);
        assert_eq!(out.objectness.len(), out.anchors.len());
        assert_eq!(out.deltas.len(), out.anchors.len());
        assert!(out.objectness.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zeroed_cls_head_scores_from_bias_only() {
        let cfg = tiny_config();
        let mut model = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name == "rpn.cls.weight" {
                t.data_mut().fill(0.0);
            }
            if name == "rpn.cls.bias" {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = if i % 2 == 1 { 1.5 } else { 0.0 };
                }
            }
        }
        let out = rpn_forward(&model, &flat_image(48)).unwrap();
        let want = {
            let e0: f64 = 1.0;
            let e1 = 1.5f64.exp();
            e1 / (e0 + e1)
        };
        assert!(out
            .objectness
            .iter()
            .all(|&p| (p - want).abs() < 1e-12));
    }

    #[test]
    fn propose_rois_single_anchor_passthrough_and_cap() {
        let anchors = generate_anchors((1, 1), 4.0, &[4.0]).unwrap();
        let rois = propose_rois(
            &[0.9],
            &[BoxDelta::ZERO],
            &anchors,
            48.0,
            10,
            10,
            0.7,
        )
        .unwrap();
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0], anchors.boxes()[0]);

        let anchors = generate_anchors((2, 2), 4.0, &[4.0, 6.0]).unwrap();
        let scores = vec![0.5; anchors.len()];
        let deltas = vec![BoxDelta::ZERO; anchors.len()];
        let one = propose_rois(&scores, &deltas, &anchors, 48.0, 100, 1, 0.7).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn merge_keeps_highest_score_within_window() {
        let dets = vec![
            SliceDetection {
                z: 10,
                voxel_x: 20.0,
                voxel_y: 20.0,
                score: 0.7,
            },
            SliceDetection {
                z: 11,
                voxel_x: 20.5,
                voxel_y: 20.2,
                score: 0.9,
            },
            SliceDetection {
                z: 14,
                voxel_x: 20.0,
                voxel_y: 20.0,
                score: 0.5,
            },
            SliceDetection {
                z: 10,
                voxel_x: 60.0,
                voxel_y: 20.0,
                score: 0.4,
            },
        ];
        let kept = merge_slice_detections(dets, 3.0, 2);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        // 0.9 absorbs 0.7 (z within 2, xy within 3); 0.5 is 3 slices away
        // from z=11 and survives; 0.4 is far in-plane.
        assert_eq!(scores, vec![0.9, 0.5, 0.4]);
    }
}
